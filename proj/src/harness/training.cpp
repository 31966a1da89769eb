#include "msdm/harness/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>

#include "msdm/checkpoint.hpp"
#include "msdm/errors.hpp"
#include "msdm/manifest_io.hpp"
#include "msdm/ops.hpp"
#include "msdm/optim.hpp"

namespace msdm::harness {

namespace {

std::uint64_t tagged(std::uint64_t seed, const char* tag) { return mix_seed(seed, hash_string(tag)); }

std::vector<Tensor> tensors(const NamedTensors& named) {
  std::vector<Tensor> out;
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

void set_trainable(const NamedTensors& named, bool on) {
  for (const auto& [_, t] : named) {
    Tensor h = t;
    h.set_requires_grad(on);
    h.clear_grad();
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ------------------------------------------------------------------ curves

double LossCurve::smoothed(std::size_t step, std::size_t window) const {
  if (step == 0 || step > losses.size()) throw ContractError("loss curve: step out of range");
  const std::size_t first = step > window ? step - window : 0;
  double sum = 0.0;
  for (std::size_t i = first; i < step; ++i) sum += losses[i];
  return sum / static_cast<double>(step - first);
}

void LossCurve::write_csv(const std::filesystem::path& path, std::size_t window) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,loss,smoothed\n";
  out.precision(17);
  for (std::size_t s = 1; s <= losses.size(); ++s) out << s << ',' << losses[s - 1] << ',' << smoothed(s, window) << '\n';
}

// ------------------------------------------------------------------ bundle

NamedTensors ModelBundle::unet_side() const {
  NamedTensors out = text->parameters();
  for (auto& p : unet->parameters()) out.push_back(std::move(p));
  return out;
}

NamedTensors ModelBundle::parameters() const {
  NamedTensors out = vae->parameters();
  for (auto& p : unet_side()) out.push_back(std::move(p));
  out.emplace_back("latent.scale", Tensor::from({1}, {latent_scale}));
  return out;
}

diffusion::NoisePredictor ModelBundle::predictor() const {
  const Unet* u = unet.get();
  return [u](const Tensor& x, int t, const TextEmbedding& e) { return u->forward(x, t, e); };
}

Shape ModelBundle::latent_shape() const {
  return vae->latent_shape(config.dataset_image_size, config.dataset_image_size);
}

Tensor ModelBundle::sample_latent(const std::string& prompt, std::uint64_t seed) const {
  NoGradScope no_grad;
  diffusion::GuidanceConfig g{config.diffusion_guidance, config.diffusion_drop_probability};
  return diffusion::ddpm_sample(predictor(), text->encode(prompt), schedule, g, seed, latent_shape());
}

Image ModelBundle::generate(const std::string& prompt, std::uint64_t seed) const {
  NoGradScope no_grad;
  const Tensor z = sample_latent(prompt, seed);
  return tensor_to_image(vae->decode(ops::scale(z, 1.0 / latent_scale)));
}

VaeConfig vae_config_for(const ExperimentConfig& c) {
  VaeConfig v;
  v.ch1 = c.vae_ch1;
  v.ch2 = c.vae_ch2;
  return v;
}

UnetConfig unet_config_for(const ExperimentConfig& c, bool base_backbone) {
  UnetConfig u;
  const std::size_t mult = base_backbone ? c.lora_width_mult : 1;
  u.ch1 = c.unet_ch1 * mult;
  u.ch2 = c.unet_ch2 * mult;
  u.attn1_width = c.unet_attn1_width;
  u.attn2_width = base_backbone ? c.lora_attn_width : c.unet_attn2_width;
  u.text_width = TextEncoder::kWidth;
  u.timesteps = c.diffusion_T;
  return u;
}

diffusion::NoiseSchedule schedule_for(const ExperimentConfig& c) {
  return c.diffusion_schedule == "cosine" ? diffusion::make_cosine_schedule(c.diffusion_T)
                                          : diffusion::make_default_linear_schedule(c.diffusion_T);
}

ModelBundle make_bundle(const ExperimentConfig& c, const std::string& kind, std::uint64_t seed) {
  c.validate();
  if (kind != "msdm-scratch" && kind != "base" && kind != "base-lora") throw ConfigError("unknown model kind '" + kind + "'");
  ModelBundle b;
  b.config = c;
  b.kind = kind;
  b.seed = seed;
  b.vae = std::make_unique<Vae>(vae_config_for(c), tagged(seed, "vae.init"));
  b.text = std::make_unique<TextEncoder>(tagged(seed, "text"));
  b.unet = std::make_unique<Unet>(unet_config_for(c, kind != "msdm-scratch"), tagged(seed, "unet.init"));
  b.schedule = schedule_for(c);
  return b;
}

void save_bundle(const std::filesystem::path& dir, const ModelBundle& b) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", b.parameters());
  save_config(dir / "config.txt", b.config);
  std::ofstream(dir / "kind.txt", std::ios::trunc) << b.kind << ' ' << b.seed << '\n';
  std::filesystem::remove(dir / "adapters.ckpt");
  std::filesystem::remove(dir / "adapters.ckpt.txt");
  if (!b.adapters.empty()) lora::save_adapters(dir / "adapters.ckpt", b.adapters);
}

ModelBundle load_bundle(const std::filesystem::path& dir) {
  const ExperimentConfig c = load_config(dir / "config.txt");
  std::ifstream kind_in(dir / "kind.txt");
  std::string kind;
  std::uint64_t seed = 0;
  if (!(kind_in >> kind >> seed)) throw IoError("missing or malformed kind.txt in " + dir.string());
  ModelBundle b = make_bundle(c, kind, seed);
  NamedTensors loaded = load_checkpoint(dir / "model.ckpt");
  NamedTensors target;
  for (auto& p : b.parameters()) {
    if (p.first != "latent.scale") target.push_back(std::move(p));
  }
  bool have_scale = false;
  for (const auto& [name, t] : loaded) {
    if (name == "latent.scale") {
      b.latent_scale = t[0];
      have_scale = true;
    }
  }
  if (!have_scale) throw IoError("checkpoint lacks latent.scale");
  NamedTensors source;
  for (auto& p : loaded) {
    if (p.first != "latent.scale") source.push_back(std::move(p));
  }
  assign_by_name(target, source);
  if (std::filesystem::exists(dir / "adapters.ckpt")) {
    b.adapters = lora::load_adapters(dir / "adapters.ckpt");
    b.unet->install_adapters(b.adapters);
  }
  return b;
}

// ---------------------------------------------------------------- datasets

synth::DatasetManifest target_dataset(const ExperimentConfig& c) {
  synth::DatasetOptions o;
  o.image_size = c.dataset_image_size;
  o.images_per_combo = c.dataset_images_per_combo;
  auto m = synth::build_dataset(c.dataset_images, tagged(c.seed, "dataset"), o);
  m = synth::split_holdout(m, c.dataset_holdout, tagged(c.seed, "split"));
  if (c.dataset_augment != "none") {
    const auto paras = synth::paraphrase_all(m, c.dataset_paraphrases, tagged(c.seed, "paraphrase"));
    m = synth::augment(m, paras, synth::parse_strategy(c.dataset_augment), c.dataset_substitute_fraction,
                       tagged(c.seed, "augment"));
  }
  return m;
}

synth::DatasetManifest generic_dataset(const ExperimentConfig& c) {
  auto o = synth::generic_domain_options();
  o.image_size = c.dataset_image_size;
  o.images_per_combo = c.dataset_images_per_combo;
  return synth::build_dataset(c.dataset_generic_images, tagged(c.seed, "generic"), o);
}

TrainingSet training_set(const synth::DatasetManifest& m) {
  std::map<std::string, const synth::PromptRecord*> prompts;
  for (const auto& p : m.prompts) prompts.emplace(p.id, &p);
  std::map<std::string, const synth::ImageSample*> images;
  for (const auto& im : m.images) images.emplace(im.id, &im);
  TrainingSet ts;
  for (const auto& id : m.train_ids) {
    const auto* im = images.at(id);
    ts.images.push_back(image_to_tensor(im->pixels));
    std::vector<std::string> texts;
    for (const auto& pid : im->prompt_ids) {
      const auto it = prompts.find(pid);
      if (it != prompts.end() && !m.is_validation_prompt(pid)) texts.push_back(it->second->text);
    }
    ts.texts.push_back(std::move(texts));
  }
  return ts;
}

// ---------------------------------------------------------------- training

LossCurve train_vae(Vae& vae, const std::vector<Tensor>& images, std::size_t steps, std::size_t batch, double lr,
                    double kl_weight, Rng& rng, const StepCallback& on_step) {
  if (images.empty()) throw ConfigError("train_vae: no training images");
  auto params = tensors(vae.parameters());
  zero_grads(params);
  AdamW opt(params, AdamWConfig{lr, 0.9, 0.999, 1e-8, 0.0});
  LossCurve curve;
  for (std::size_t step = 1; step <= steps; ++step) {
    double total = 0.0;
    try {
      for (std::size_t b = 0; b < batch; ++b) {
        const Tensor& x = images[rng.below(images.size())];
        Tape tape;
        TapeScope scope(tape);
        const auto enc = vae.encode(x, rng);
        const Tensor loss = vae_loss(x, enc.mean, enc.logvar, vae.decode(enc.z), kl_weight);
        total += loss.item();
        tape.backward(ops::scale(loss, 1.0 / static_cast<double>(batch)));
      }
    } catch (const NumericError& e) {
      throw DivergenceError("vae step " + std::to_string(step) + ": " + e.what());
    }
    const double mean = total / static_cast<double>(batch);
    if (!std::isfinite(mean)) throw DivergenceError("vae step " + std::to_string(step) + ": non-finite loss");
    opt.step();
    curve.losses.push_back(mean);
    if (on_step) on_step(step, mean);
  }
  return curve;
}

std::vector<Tensor> encode_latents(const Vae& vae, const std::vector<Tensor>& images) {
  NoGradScope no_grad;
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto& x : images) out.push_back(vae.encode_mean(x));
  return out;
}

double latent_scale_of(const std::vector<Tensor>& latents) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& z : latents) {
    for (double v : z.data()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  if (n < 2) throw InsufficientSamplesError("latent_scale_of: no latents");
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  if (!(var > 0.0)) throw NumericError("latent_scale_of: zero latent variance");
  return 1.0 / std::sqrt(var);
}

LossCurve train_diffusion(ModelBundle& bundle, const std::vector<Tensor>& latents,
                          const std::vector<std::vector<std::string>>& texts, const std::vector<Tensor>& trainable,
                          const DiffusionTrainOptions& options, Rng& rng, const StepCallback& on_step) {
  if (latents.empty() || latents.size() != texts.size()) throw ConfigError("train_diffusion: bad training set");
  std::vector<Tensor> params = trainable;
  zero_grads(params);
  AdamW opt(params, AdamWConfig{options.lr, 0.9, 0.999, 1e-8, options.weight_decay});
  const auto model = bundle.predictor();
  const diffusion::GuidanceConfig guidance{1.0, options.drop_probability};
  LossCurve curve;
  for (std::size_t step = 1; step <= options.steps; ++step) {
    double total = 0.0;
    try {
      for (std::size_t b = 0; b < options.batch; ++b) {
        const std::size_t i = rng.below(latents.size());
        const auto& choices = texts[i];
        const std::string text = choices.empty() ? std::string() : choices[rng.below(choices.size())];
        Tape tape;
        TapeScope scope(tape);
        const TextEmbedding emb = bundle.text->encode(text);
        const Tensor loss = diffusion::eps_loss(model, latents[i], emb, bundle.schedule, guidance, rng);
        total += loss.item();
        tape.backward(ops::scale(loss, 1.0 / static_cast<double>(options.batch)));
      }
    } catch (const NumericError& e) {
      throw DivergenceError("diffusion step " + std::to_string(step) + ": " + e.what());
    }
    const double mean = total / static_cast<double>(options.batch);
    if (!std::isfinite(mean)) throw DivergenceError("diffusion step " + std::to_string(step) + ": non-finite loss");
    opt.step();
    curve.losses.push_back(mean);
    if (on_step) on_step(step, mean);
  }
  return curve;
}

namespace {

std::vector<Tensor> scaled(const std::vector<Tensor>& latents, double s) {
  NoGradScope no_grad;
  std::vector<Tensor> out;
  out.reserve(latents.size());
  for (const auto& z : latents) out.push_back(ops::scale(z, s));
  return out;
}

}  // namespace

MsdmRun train_msdm(const ExperimentConfig& c, bool write_outputs, const StepCallback& on_step) {
  const auto t0 = std::chrono::steady_clock::now();
  c.validate();
  MsdmRun run{RunResult{}, make_bundle(c, "msdm-scratch", c.seed), {}, {}, target_dataset(c)};
  const TrainingSet ts = training_set(run.dataset);

  Rng vae_rng(tagged(c.seed, "vae.train"));
  run.vae_curve = train_vae(*run.model.vae, ts.images, c.vae_steps, c.vae_batch, c.vae_lr, c.vae_kl_weight, vae_rng);
  set_trainable(run.model.vae->parameters(), false);

  const auto latents = encode_latents(*run.model.vae, ts.images);
  run.model.latent_scale = latent_scale_of(latents);
  const auto z = scaled(latents, run.model.latent_scale);

  Rng unet_rng(tagged(c.seed, "unet.train"));
  DiffusionTrainOptions opts{c.train_steps, c.train_batch, c.train_lr, c.train_weight_decay, c.diffusion_drop_probability};
  run.unet_curve = train_diffusion(run.model, z, ts.texts, tensors(run.model.unet_side()), opts, unet_rng, on_step);
  set_trainable(run.model.unet_side(), false);

  run.result.config_digest = config_digest(c);
  if (write_outputs) {
    const std::filesystem::path out = c.output_dir;
    run.vae_curve.write_csv(out / "vae_loss.csv");
    run.unet_curve.write_csv(out / "loss.csv");
    save_bundle(out / "model", run.model);
    synth::write_manifest(out / "dataset", run.dataset);
    run.result.checkpoints.push_back((out / "model" / "model.ckpt").string());
  }
  run.result.wall_seconds = seconds_since(t0);
  return run;
}

PretrainedBase pretrain_base(const ExperimentConfig& c, bool write_outputs) {
  c.validate();
  PretrainedBase base{make_bundle(c, "base", tagged(c.seed, "base")), {}, {}, target_dataset(c), generic_dataset(c)};
  const TrainingSet generic = training_set(base.generic);
  const TrainingSet target = training_set(base.target);

  std::vector<Tensor> vae_images = generic.images;
  vae_images.insert(vae_images.end(), target.images.begin(), target.images.end());
  Rng vae_rng(tagged(c.seed, "base.vae.train"));
  base.vae_curve = train_vae(*base.model.vae, vae_images, c.vae_steps, c.vae_batch, c.vae_lr, c.vae_kl_weight, vae_rng);
  set_trainable(base.model.vae->parameters(), false);

  const auto latents = encode_latents(*base.model.vae, generic.images);
  base.model.latent_scale = latent_scale_of(latents);
  Rng unet_rng(tagged(c.seed, "base.unet.train"));
  DiffusionTrainOptions opts{c.lora_pretrain_steps, c.lora_pretrain_batch, c.train_lr, c.train_weight_decay,
                             c.diffusion_drop_probability};
  base.unet_curve = train_diffusion(base.model, scaled(latents, base.model.latent_scale), generic.texts,
                                    tensors(base.model.unet_side()), opts, unet_rng);
  set_trainable(base.model.unet_side(), false);

  if (write_outputs) {
    const std::filesystem::path out = std::filesystem::path(c.output_dir) / "base";
    base.vae_curve.write_csv(out / "vae_loss.csv");
    base.unet_curve.write_csv(out / "loss.csv");
    save_bundle(out / "model", base.model);
  }
  return base;
}

LoraRun fine_tune_lora(ModelBundle& base, const synth::DatasetManifest& target, const ExperimentConfig& c, int rank,
                       std::uint64_t run_seed) {
  base.unet->remove_adapters();
  base.adapters.clear();
  set_trainable(base.vae->parameters(), false);
  set_trainable(base.unet_side(), false);

  LoraRun run;
  run.base_digest_before = digest(base.unet_side());
  const auto targets = c.targets();
  const std::optional<double> alpha = c.lora_alpha > 0.0 ? std::optional<double>(c.lora_alpha) : std::nullopt;
  run.adapters = lora::attach(base.unet->linear_weights(targets), targets, rank, alpha, tagged(run_seed, "lora.init"));
  base.unet->install_adapters(run.adapters);
  base.adapters = run.adapters;
  base.kind = "base-lora";
  run.trainable_params = lora::trainable_param_count(run.adapters);

  const TrainingSet ts = training_set(target);
  const auto z = scaled(encode_latents(*base.vae, ts.images), base.latent_scale);
  Rng rng(tagged(run_seed, "lora.train"));
  DiffusionTrainOptions opts{c.lora_steps, c.lora_batch, c.lora_lr, 0.0, c.diffusion_drop_probability};
  run.curve = train_diffusion(base, z, ts.texts, lora::trainable_tensors(run.adapters), opts, rng);
  for (auto& t : lora::trainable_tensors(run.adapters)) t.clear_grad();
  run.base_digest_after = digest(base.unet_side());
  return run;
}

}  // namespace msdm::harness
