#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "msdm/checkpoint.hpp"
#include "msdm/embedders.hpp"
#include "msdm/errors.hpp"
#include "msdm/harness/config.hpp"
#include "msdm/harness/correlate.hpp"
#include "msdm/harness/evaluation.hpp"
#include "msdm/harness/experiments.hpp"
#include "msdm/harness/training.hpp"

using namespace msdm;
using namespace msdm::harness;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("msdm_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

ExperimentConfig tiny_config(const std::string& out) {
  ExperimentConfig c;
  c.dataset_images = 40;
  c.dataset_images_per_combo = 10;
  c.vae_steps = 4;
  c.vae_batch = 4;
  c.train_steps = 6;
  c.train_batch = 4;
  c.unet_ch1 = 16;
  c.unet_ch2 = 16;
  c.eval_fid_images = 4;
  c.output_dir = out;
  return c;
}

// Validation images of `m` split alternately between one original and one
// rephrased prompt, posing as a generated set.
GeneratedSet real_as_generated(const synth::DatasetManifest& m) {
  GeneratedSet g;
  g.model = "real";
  g.prompts = {{"po", "original text", {}, "original", 0}, {"pr", "rephrased text", {}, "rephrased", 0}};
  for (std::size_t i = 0; i < m.validation_ids.size(); ++i) {
    const auto& img = m.image(m.validation_ids[i]);
    g.images.push_back({i % 2 ? "pr" : "po", i % 2 ? "rephrased" : "original", 0, 0, i / 2, 0, img.pixels});
  }
  return g;
}

std::vector<annotation::ExportRow> ranked_rows(const std::vector<std::pair<std::string, int>>& model_rank, int tasks) {
  std::vector<annotation::ExportRow> rows;
  for (int t = 0; t < tasks; ++t) {
    for (const auto& [m, r] : model_rank) {
      rows.push_back({"t" + std::to_string(t), t % 2 ? "rephrased" : "original", m,
                      m == "real" ? std::nullopt : std::optional(std::array<int, 6>{5, 5, 5, 5, 5, 5}), r});
    }
  }
  return rows;
}

metrics::MetricReport report_with(double fbd, double fid, double fidelity) {
  metrics::MetricReport r;
  r.fbd = fbd;
  r.fid_mean = fid;
  r.fidelity = fidelity;
  r.agreement = 0.5;
  r.diversity = 0.5;
  return r;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("config text round trip, overrides and rejections") {
    ExperimentConfig c;
    c.lora_rank = 64;
    c.diffusion_schedule = "cosine";
    c.train_lr = 3.5e-5;
    c.output_dir = "runs/x y";
    const auto back = parse_config(write_config(c));
    CHECK(back == c);
    CHECK(config_digest(back) == config_digest(c));
    CHECK(parse_config("lora.rank = 64\n# note\n\n").lora_rank == 64);
    set_config_value(c, "eval.runs", "2");
    CHECK(c.eval_runs == 2);
    CHECK_THROWS_AS(parse_config("lora.rnak = 4\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("lora.rank = four\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("lora.rank\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("dataset.holdout = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("diffusion.schedule = quadratic\n"), ConfigError);
    CHECK(ExperimentConfig{}.ranks() == std::vector<int>{4, 8, 16, 32, 64, 128, 256});
    CHECK(config_keys().size() > 30);
  }

  TEST_CASE("Spearman closed cases and ties") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(spearman({1, 2, 3, 4}, {7, 7, 7, 7}) == 0.0);
    CHECK(average_ranks({5, 1, 5, 3}) == std::vector<double>{3.5, 1, 3.5, 2});
    CHECK_THROWS_AS(spearman({1, 2}, {1}), ContractError);
  }

  TEST_CASE("Spearman eight-point hand example") {
    // Tiers 1..4 twice each; metric ranks 1,3,2,6,5,4,8,7. Centered tier
    // ranks (-3,-3,-1,-1,1,1,3,3) against centered metric ranks give
    // sum xy = 34, sum xx = 40, sum yy = 42.
    const std::vector<double> tier = {1, 1, 2, 2, 3, 3, 4, 4};
    const std::vector<double> metric = {10, 12, 11, 15, 14, 13, 20, 18};
    CHECK(std::abs(spearman(tier, metric) - 34.0 / std::sqrt(40.0 * 42.0)) < 1e-12);
  }

  TEST_CASE("rank correlation over an export") {
    const std::map<std::string, metrics::MetricReport> reports = {
        {"m1", report_with(1.0, 10.0, 90.0)}, {"m2", report_with(2.0, 20.0, 50.0)}, {"m3", report_with(3.0, 30.0, 10.0)}};
    const auto rows = ranked_rows({{"m1", 1}, {"m2", 2}, {"m3", 3}, {"real", 4}}, 40);
    std::ostringstream csv;
    csv << annotation::export_header() << "\n";
    for (const auto& r : rows) {
      csv << r.task_id << "," << r.prompt_kind << "," << r.model_id;
      for (std::size_t a = 0; a < 6; ++a) csv << "," << (r.scores ? std::to_string((*r.scores)[a]) : "");
      csv << "," << r.rank << "\n";
    }
    const auto parsed = parse_export_csv(csv.str());
    CHECK(parsed.size() == 160);
    const auto table = correlate_ranks(parsed, reports, 40);
    CHECK(table.tasks == 40);
    CHECK(table.warnings.empty());
    for (const auto& row : table.rows) {
      if (row.metric == "fbd" || row.metric == "fid") CHECK(row.spearman == doctest::Approx(1.0).epsilon(1e-15));
      if (row.metric == "fidelity") CHECK(row.spearman == doctest::Approx(-1.0).epsilon(1e-15));
      if (row.metric == "agreement") CHECK(row.spearman == 0.0);
      if (row.metric == "fbd") {
        CHECK(row.tier_mean[0] == 1.0);
        CHECK(row.tier_count[3] == 0);
        CHECK(row.samples == 120);
      }
    }
    const auto partial = correlate_ranks(ranked_rows({{"m1", 1}, {"m2", 2}}, 3), reports, 40);
    CHECK(partial.warnings.size() == 4);
    CHECK_THROWS_AS(parse_export_csv("bad header\n"), ConfigError);
    CHECK_THROWS_AS(parse_export_csv(annotation::export_header() + "\nt0,original,m1,1,1,1,1,1,1,5\n"), ConfigError);
  }

  TEST_CASE("evaluating real images against themselves") {
    const auto m = synth::split_holdout(synth::build_dataset(200, 4), 0.10, 4);
    const auto emb = metrics::make_embedder("random-projection", 4);
    const auto gen = real_as_generated(m);
    ExperimentConfig c;
    const auto ev = evaluate(m, gen, *emb, 9, default_assumptions(c));
    CHECK(ev.report.fbd <= 1e-6);
    std::vector<Image> odd, even;
    for (std::size_t i = 0; i < m.validation_ids.size(); ++i) (i % 2 ? odd : even).push_back(m.image(m.validation_ids[i]).pixels);
    const double own = 0.5 * (metrics::set_diversity(metrics::embed_images(even, *emb, "real").embeddings) +
                              metrics::set_diversity(metrics::embed_images(odd, *emb, "real").embeddings));
    CHECK(std::abs(ev.report.diversity - own) < 1e-12);
    CHECK(ev.report.embedder == "random-projection");
    CHECK(ev.report.assumptions == default_assumptions(c));
    CHECK_FALSE(ev.report.assumptions.empty());
    CHECK(ev.report.run_fids.size() == 1);
    CHECK(ev.rows.size() == 2);

    auto broken = gen;
    broken.prompts.pop_back();
    for (auto& g : broken.images) g.prompt_id = "po";
    CHECK_THROWS_AS(evaluate(m, broken, *emb, 9, {}), ContractError);
    auto stray = gen;
    stray.images[0].prompt_id = "nobody";
    CHECK_THROWS_AS(evaluate(m, stray, *emb, 9, {}), ContractError);

    std::ostringstream csv, md;
    metrics::MetricReport a = ev.report, b = ev.report;
    b.model = "other";
    write_summary_csv(csv, {a, b});
    write_summary_markdown(md, {a, b});
    CHECK(csv.str().rfind("model,fid_dev,fid_test,fidelity,agreement,diversity,fbd\n", 0) == 0);
    const auto csv_text = csv.str();
    CHECK(std::count(csv_text.begin(), csv_text.end(), '\n') == 3);
    for (const char* col : {"FID", "Fidelity", "Agreement", "Diversity", "FBD"}) CHECK(md.str().find(col) != std::string::npos);
  }

  TEST_CASE("evaluation prompts pair unseen rephrasings") {
    const auto m = synth::split_holdout(synth::build_dataset(200, 5), 0.10, 5);
    std::set<std::string> texts;
    for (const auto& p : m.prompts) texts.insert(p.text);
    const auto ps = evaluation_prompts(m, 4, 3);
    REQUIRE(ps.size() % 2 == 0);
    for (std::size_t i = 0; i < ps.size(); i += 2) {
      CHECK(ps[i].kind == "original");
      CHECK(ps[i + 1].kind == "rephrased");
      CHECK(ps[i].pair == ps[i + 1].pair);
      CHECK(ps[i].attrs == ps[i + 1].attrs);
      CHECK(texts.count(ps[i + 1].text) == 0);
    }
    const auto split = dev_test_split(m, 1);
    CHECK(split.dev.size() + split.test.size() == m.validation_ids.size());
  }

  TEST_CASE("tiny training is deterministic and survives a checkpoint reload") {
    const auto dir = scratch_dir("tiny");
    const auto c = tiny_config(dir.string());
    auto a = train_msdm(c, true);
    const auto b = train_msdm(c, false);
    REQUIRE(a.unet_curve.losses.size() == c.train_steps);
    CHECK(std::memcmp(a.unet_curve.losses.data(), b.unet_curve.losses.data(), c.train_steps * sizeof(double)) == 0);
    CHECK(a.vae_curve.losses == b.vae_curve.losses);
    CHECK(digest(a.model.parameters()) == digest(b.model.parameters()));
    CHECK(a.result.config_digest == b.result.config_digest);
    CHECK(std::filesystem::exists(dir / "loss.csv"));

    auto loaded = load_bundle(dir / "model");
    CHECK(loaded.config == c);
    CHECK(digest(loaded.parameters()) == digest(a.model.parameters()));
    CHECK(loaded.generate("generate an image containing a polyp", 3) == a.model.generate("generate an image containing a polyp", 3));

    const auto ts = training_set(a.dataset);
    const auto continue_training = [&](ModelBundle& m) {
      auto lat = encode_latents(*m.vae, ts.images);
      for (auto& z : lat)
        for (auto& v : z.mutable_data()) v *= m.latent_scale;
      std::vector<Tensor> trainable;
      for (auto& [_, t] : m.unet_side()) {
        t.set_requires_grad(true);
        trainable.push_back(t);
      }
      Rng rng(55);
      return train_diffusion(m, lat, ts.texts, trainable, {3, 2, 1e-4, 0.01, 0.1}, rng).losses;
    };
    const auto la = continue_training(a.model), lb = continue_training(loaded);
    CHECK(std::memcmp(la.data(), lb.data(), la.size() * sizeof(double)) == 0);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("generated sets: counts, distinct seeds and file round trip") {
    const auto dir = scratch_dir("gen");
    auto c = tiny_config(dir.string());
    const auto run = train_msdm(c, false);
    const auto prompts = evaluation_prompts(run.dataset, 2, c.eval_seed);
    const auto set = generate_set(run.model, prompts, 3, 8, 2);
    CHECK(set.images.size() == prompts.size() * 3 * 2);
    std::set<std::vector<std::uint8_t>> distinct;
    std::set<std::uint64_t> seeds;
    for (const auto& g : set.images) {
      distinct.insert(g.image.rgb);
      seeds.insert(g.seed);
    }
    CHECK(distinct.size() == set.images.size());
    CHECK(seeds.size() == set.images.size());
    write_generated(dir / "g", set);
    const auto back = read_generated(dir / "g");
    REQUIRE(back.images.size() == set.images.size());
    for (std::size_t i = 0; i < set.images.size(); ++i) {
      CHECK(back.images[i].image == set.images[i].image);
      CHECK(back.images[i].prompt_id == set.images[i].prompt_id);
    }
    CHECK(back.runs == 2);
    CHECK(generate_total(run.model, prompts, 5, 8).images.size() == 5);
    const auto emb = embedder_for(c);
    const auto ev = evaluate(run.dataset, set, *emb, 1, default_assumptions(c));
    const auto agg = metrics::aggregate_runs(ev.report.run_fids);
    CHECK(ev.report.fid_mean == agg.mean);
    CHECK(ev.report.fid_std == agg.std);
    std::filesystem::remove_all(dir);
  }
}
