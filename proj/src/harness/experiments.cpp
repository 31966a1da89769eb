#include "msdm/harness/experiments.hpp"

#include <chrono>
#include <cstdio>
#include <ostream>

#include "msdm/checkpoint.hpp"
#include "msdm/errors.hpp"
#include "msdm/ops.hpp"

namespace msdm::harness {

namespace {

std::uint64_t tagged(std::uint64_t seed, const char* tag) { return mix_seed(seed, hash_string(tag)); }

std::uint64_t run_seed(const ExperimentConfig& c, int run) {
  return mix_seed(tagged(c.seed, "lora.run"), static_cast<std::uint64_t>(run));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

metrics::EmbeddingSet validation_embeddings(const synth::DatasetManifest& m, const metrics::Embedder& e) {
  std::vector<Image> images;
  for (const auto& id : m.validation_ids) images.push_back(m.image(id).pixels);
  return metrics::embed_images(images, e, "real");
}

void reset_adapters(ModelBundle& model) {
  model.unet->remove_adapters();
  model.adapters.clear();
  model.kind = "base";
}

}  // namespace

std::unique_ptr<metrics::Embedder> embedder_for(const ExperimentConfig& c, const ModelBundle* model) {
  return metrics::make_embedder(c.eval_embedder, c.seed, model ? model->vae.get() : nullptr, c.dataset_image_size);
}

DomainFid domain_fid(const ModelBundle& model, const synth::DatasetManifest& target, const metrics::Embedder& embedder,
                     const ExperimentConfig& c, std::uint64_t generation_seed) {
  const auto prompts = evaluation_prompts(target, c.eval_max_prompts, c.eval_seed);
  const auto gen = generate_total(model, prompts, c.eval_fid_images, generation_seed);
  std::vector<Image> images;
  for (const auto& g : gen.images) images.push_back(g.image);
  const auto real = validation_embeddings(target, embedder);
  const auto fake = metrics::embed_images(images, embedder, "generated");
  return {metrics::fid(real, fake), images.size(), static_cast<std::size_t>(real.size())};
}

TrainedVsUntrained compare_with_untrained(const MsdmRun& run, const ExperimentConfig& c) {
  ModelBundle fresh = make_bundle(c, "msdm-scratch", c.seed);
  auto vae_params = fresh.vae->parameters();
  assign_by_name(vae_params, run.model.vae->parameters());
  fresh.latent_scale = run.model.latent_scale;

  const auto embedder = embedder_for(c, &run.model);
  const auto prompts = evaluation_prompts(run.dataset, c.eval_max_prompts, c.eval_seed);
  TrainedVsUntrained out;
  out.trained_dev_fid = dev_fid(run.dataset, generate_total(run.model, prompts, c.eval_fid_images, c.eval_seed), *embedder, c.eval_seed);
  out.untrained_dev_fid = dev_fid(run.dataset, generate_total(fresh, prompts, c.eval_fid_images, c.eval_seed), *embedder, c.eval_seed);
  return out;
}

LoraExperiment lora_experiment(PretrainedBase& base, const ExperimentConfig& c, int rank, int runs,
                               const std::function<void(int, ModelBundle&)>& after_run) {
  if (runs < 1) throw ConfigError("lora_experiment: runs must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  reset_adapters(base.model);
  const auto embedder = embedder_for(c, &base.model);
  const std::uint64_t pristine = digest(base.model.unet_side());

  LoraExperiment e;
  e.zero_shot_fid = domain_fid(base.model, base.target, *embedder, c, c.eval_seed).fid;
  for (int r = 0; r < runs; ++r) {
    const LoraRun lr = fine_tune_lora(base.model, base.target, c, rank, run_seed(c, r));
    e.base_unchanged = e.base_unchanged && lr.base_digest_before == pristine && lr.base_digest_after == pristine;
    e.result.trainable_params = lr.trainable_params;
    const double f = domain_fid(base.model, base.target, *embedder, c, c.eval_seed).fid;
    e.tuned_fids.push_back(f);
    if (f < e.zero_shot_fid) ++e.improved_runs;
    if (after_run) after_run(r, base.model);
  }
  reset_adapters(base.model);
  e.base_unchanged = e.base_unchanged && digest(base.model.unet_side()) == pristine;

  e.result.config_digest = config_digest(c);
  e.result.rank = rank;
  e.result.run_fids = e.tuned_fids;
  e.result.wall_seconds = seconds_since(t0);
  return e;
}

std::vector<SweepRow> rank_sweep(PretrainedBase& base, const ExperimentConfig& c, const std::vector<int>& ranks, int runs) {
  if (runs < 1) throw ConfigError("rank_sweep: runs must be positive");
  const auto embedder = embedder_for(c, &base.model);
  std::vector<SweepRow> rows;
  for (int rank : ranks) {
    SweepRow row;
    row.rank = rank;
    for (int r = 0; r < runs; ++r) {
      const LoraRun lr = fine_tune_lora(base.model, base.target, c, rank, run_seed(c, r));
      row.params = lr.trainable_params;
      row.fids.push_back(domain_fid(base.model, base.target, *embedder, c, c.eval_seed).fid);
    }
    reset_adapters(base.model);
    if (runs >= 2) {
      const auto s = metrics::aggregate_runs(row.fids);
      row.fid_mean = s.mean;
      row.fid_std = s.std;
    } else {
      row.fid_mean = row.fids.front();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "rank,params,fid_mean,fid_std\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%zu,%.4f,%.4f\n", r.rank, r.params, r.fid_mean, r.fid_std);
    os << buf;
  }
}

AugmentationExperiment augmentation_experiment(const ExperimentConfig& c) {
  c.validate();
  ExperimentConfig plain = c;
  plain.dataset_augment = "none";
  const auto dataset = target_dataset(plain);
  const auto paraphrases = synth::paraphrase_all(dataset, c.dataset_paraphrases, tagged(c.seed, "paraphrase"));

  AugmentationExperiment e;
  for (const auto& p : dataset.prompts) e.base_originals += p.origin == synth::Origin::original;
  e.base_paraphrases = paraphrases.size();

  // Shared VAE: the images are identical across strategies, only texts differ.
  ModelBundle shared = make_bundle(c, "msdm-scratch", c.seed);
  const TrainingSet images = training_set(dataset);
  Rng vae_rng(tagged(c.seed, "vae.train"));
  train_vae(*shared.vae, images.images, c.vae_steps, c.vae_batch, c.vae_lr, c.vae_kl_weight, vae_rng);
  const auto latents = encode_latents(*shared.vae, images.images);
  const double scale = latent_scale_of(latents);
  std::vector<Tensor> z;
  {
    NoGradScope no_grad;
    for (const auto& l : latents) z.push_back(ops::scale(l, scale));
  }

  const auto with_add = synth::augment(dataset, paraphrases, synth::Strategy::add, c.dataset_substitute_fraction,
                                       tagged(c.seed, "augment"));
  const auto prompts = evaluation_prompts(with_add, c.eval_max_prompts, c.eval_seed);
  const auto embedder = embedder_for(c, &shared);

  for (const auto strategy : {synth::Strategy::add, synth::Strategy::substitute, synth::Strategy::replace}) {
    const auto m = synth::augment(dataset, paraphrases, strategy, c.dataset_substitute_fraction, tagged(c.seed, "augment"));
    AugmentationRow row;
    row.strategy = std::string(synth::to_string(strategy));
    row.is_default = row.strategy == kDefaultStrategy;
    row.prompts = m.prompts.size();
    for (const auto& p : m.prompts) {
      (p.origin == synth::Origin::original ? row.originals : row.paraphrases) += 1;
    }

    ModelBundle model = make_bundle(c, "msdm-scratch", c.seed);
    auto vae_params = model.vae->parameters();
    assign_by_name(vae_params, shared.vae->parameters());
    model.latent_scale = scale;
    const TrainingSet ts = training_set(m);
    Rng rng(tagged(c.seed, "unet.train"));
    DiffusionTrainOptions opts{c.train_steps, c.train_batch, c.train_lr, c.train_weight_decay, c.diffusion_drop_probability};
    std::vector<Tensor> trainable;
    for (auto& [name, t] : model.unet_side()) trainable.push_back(t);
    for (auto& [name, t] : model.vae->parameters()) t.set_requires_grad(false);
    const LossCurve curve = train_diffusion(model, z, ts.texts, trainable, opts, rng);
    row.final_loss = curve.smoothed(curve.losses.size());

    const auto gen = generate_set(model, prompts, c.eval_images_per_prompt, c.eval_seed, 1);
    const auto ev = evaluate(dataset, gen, *embedder, c.eval_seed, default_assumptions(c));
    row.dev_fid = ev.report.dev_run_fids.front();
    row.agreement = ev.report.agreement;
    e.rows.push_back(row);
  }
  return e;
}

void write_augmentation_csv(std::ostream& os, const AugmentationExperiment& e) {
  os << "strategy,default,prompts,originals,paraphrases,final_loss,fid_dev,agreement\n";
  char buf[256];
  for (const auto& r : e.rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%zu,%zu,%zu,%.6f,%.4f,%.4f\n", r.strategy.c_str(), r.is_default ? 1 : 0,
                  r.prompts, r.originals, r.paraphrases, r.final_loss, r.dev_fid, r.agreement);
    os << buf;
  }
}

void write_augmentation_markdown(std::ostream& os, const AugmentationExperiment& e) {
  os << "Base prompt table: " << e.base_originals << " originals, " << e.base_paraphrases << " paraphrases\n\n";
  os << "| Strategy | Prompts | Originals | Paraphrases | Final loss | FID (Dev) | Agreement |\n";
  os << "|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : e.rows) {
    std::snprintf(buf, sizeof buf, "| %s%s | %zu | %zu | %zu | %.4f | %.2f | %.3f |\n", r.strategy.c_str(),
                  r.is_default ? " (default)" : "", r.prompts, r.originals, r.paraphrases, r.final_loss, r.dev_fid,
                  r.agreement);
    os << buf;
  }
}

}  // namespace msdm::harness
