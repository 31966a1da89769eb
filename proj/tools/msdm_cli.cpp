#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "msdm/annotation/http.hpp"
#include "msdm/annotation/service.hpp"
#include "msdm/errors.hpp"
#include "msdm/harness/config.hpp"
#include "msdm/harness/correlate.hpp"
#include "msdm/harness/evaluation.hpp"
#include "msdm/harness/experiments.hpp"
#include "msdm/harness/training.hpp"
#include "msdm/manifest_io.hpp"

namespace fs = std::filesystem;
using namespace msdm;
using namespace msdm::harness;
using nlohmann::json;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("-c,--config", args.path, "experiment config file (key = value lines)");
  app->add_option("--set", args.overrides, "override one key, e.g. --set lora.rank=64");
}

ExperimentConfig resolve(const ConfigArgs& args) {
  ExperimentConfig c = args.path.empty() ? ExperimentConfig{} : load_config(args.path);
  for (const auto& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.validate();
  return c;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

StepCallback progress(const char* what, std::size_t every) {
  return [what, every](std::size_t step, double loss) {
    if (step % every == 0) std::fprintf(stderr, "%s step %zu loss %.5f\n", what, step, loss);
  };
}

json result_json(const RunResult& r) {
  json j = {{"config_digest", r.config_digest}, {"run_fids", r.run_fids}, {"wall_seconds", r.wall_seconds},
            {"checkpoints", r.checkpoints},     {"rank", r.rank},         {"trainable_params", r.trainable_params}};
  if (r.report) j["report"] = json::parse(metrics::to_json(*r.report));
  return j;
}

PretrainedBase base_for(const ExperimentConfig& c, const std::string& base_dir) {
  if (base_dir.empty()) return pretrain_base(c, true);
  ModelBundle model = load_bundle(base_dir);
  model.unet->remove_adapters();
  model.adapters.clear();
  model.kind = "base";
  return PretrainedBase{std::move(model), {}, {}, target_dataset(c), generic_dataset(c)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent diffusion toolkit: synthetic data, training, LoRA, evaluation and annotation"};
  app.require_subcommand(1);

  ConfigArgs cfg;

  // dataset build
  auto* dataset = app.add_subcommand("dataset", "dataset tools");
  dataset->require_subcommand(1);
  auto* dataset_build = dataset->add_subcommand("build", "render the target and generic datasets");
  add_config_options(dataset_build, cfg);
  std::string dataset_out;
  dataset_build->add_option("-o,--out", dataset_out, "output directory (default <output.dir>/dataset)");

  // train msdm / train lora
  auto* train = app.add_subcommand("train", "training");
  train->require_subcommand(1);
  auto* train_msdm_cmd = train->add_subcommand("msdm", "train the VAE, then the U-Net from scratch");
  add_config_options(train_msdm_cmd, cfg);
  auto* train_lora_cmd = train->add_subcommand("lora", "pretrain the wide base (or load it) and LoRA fine-tune it");
  add_config_options(train_lora_cmd, cfg);
  std::string base_dir;
  int lora_runs = 0;
  train_lora_cmd->add_option("--base", base_dir, "pretrained base bundle directory");
  train_lora_cmd->add_option("--runs", lora_runs, "independent fine-tunes (default eval.runs)");

  // sweep ranks
  auto* sweep = app.add_subcommand("sweep", "parameter sweeps");
  sweep->require_subcommand(1);
  auto* sweep_ranks = sweep->add_subcommand("ranks", "fine-tune at every rank in sweep.ranks");
  add_config_options(sweep_ranks, cfg);
  sweep_ranks->add_option("--base", base_dir, "pretrained base bundle directory");
  sweep_ranks->add_option("--runs", lora_runs, "fine-tunes per rank (default eval.runs)");

  // augmentation comparison
  auto* augment_cmd = app.add_subcommand("augment-compare", "train once per paraphrase strategy and compare");
  add_config_options(augment_cmd, cfg);

  // generate
  auto* generate = app.add_subcommand("generate", "sample images for the evaluation prompts");
  add_config_options(generate, cfg);
  std::string model_dir, gen_out, model_name;
  std::size_t total = 0;
  generate->add_option("-m,--model", model_dir, "model bundle directory")->required();
  generate->add_option("-o,--out", gen_out, "output directory")->required();
  generate->add_option("--name", model_name, "model id recorded in the output (default: bundle kind)");
  generate->add_option("--total", total, "generate this many images in one run instead of per-prompt sets");

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score a generated directory against the validation split");
  add_config_options(evaluate_cmd, cfg);
  std::string gen_dir, report_out, eval_model_dir;
  evaluate_cmd->add_option("-g,--generated", gen_dir, "directory written by generate")->required();
  evaluate_cmd->add_option("-o,--out", report_out, "report JSON path (default <generated>/report.json)");
  evaluate_cmd->add_option("-m,--model", eval_model_dir, "model bundle, needed for the vae-encoder embedder");

  // report
  auto* report = app.add_subcommand("report", "comparison table from several report JSON files");
  std::vector<std::string> report_files;
  std::string report_dir;
  report->add_option("reports", report_files, "report JSON files")->required();
  report->add_option("-o,--out", report_dir, "write summary.md and summary.csv here");

  // correlate
  auto* correlate = app.add_subcommand("correlate", "expert rank tiers versus automated metrics");
  std::string export_file, corr_out;
  std::vector<std::string> corr_reports;
  std::size_t expected_tasks = 0;
  correlate->add_option("-e,--export", export_file, "annotation export CSV")->required();
  correlate->add_option("-r,--reports", corr_reports, "report JSON per model")->required();
  correlate->add_option("--tasks", expected_tasks, "expected task count (warn when fewer were rated)");
  correlate->add_option("-o,--out", corr_out, "output CSV (default stdout)");

  // annotation
  auto* build_tasks_cmd = app.add_subcommand("build-tasks", "generate image sets and write an annotation data directory");
  add_config_options(build_tasks_cmd, cfg);
  std::vector<std::string> task_models;
  std::string data_dir;
  std::size_t reference_count = 4, images_per_set = 10, task_count = 40;
  build_tasks_cmd->add_option("--models", task_models, "three model bundle directories")->required()->expected(3);
  build_tasks_cmd->add_option("--data-dir", data_dir, "annotation data directory")->required();
  build_tasks_cmd->add_option("--references", reference_count, "real reference images per task");
  build_tasks_cmd->add_option("--images-per-set", images_per_set, "images per anonymised set");
  build_tasks_cmd->add_option("--tasks", task_count, "number of tasks");

  auto* serve_cmd = app.add_subcommand("serve-annotation", "serve the annotation HTTP API");
  std::string addr = "127.0.0.1:8080";
  serve_cmd->add_option("--addr", addr, "bind address host:port");
  serve_cmd->add_option("--data-dir", data_dir, "annotation data directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (dataset_build->parsed()) {
      const auto c = resolve(cfg);
      const fs::path out = dataset_out.empty() ? fs::path(c.output_dir) / "dataset" : fs::path(dataset_out);
      const auto target = target_dataset(c);
      synth::write_manifest(out / "target", target);
      synth::write_manifest(out / "generic", generic_dataset(c));
      save_config(out / "config.txt", c);
      std::printf("target: %zu images (%zu train, %zu validation), %zu prompts -> %s\n", target.images.size(),
                  target.train_ids.size(), target.validation_ids.size(), target.prompts.size(), out.c_str());
    } else if (train_msdm_cmd->parsed()) {
      const auto c = resolve(cfg);
      save_config(fs::path(c.output_dir) / "config.txt", c);
      auto run = train_msdm(c, true, progress("unet", 100));
      const auto cmp = compare_with_untrained(run, c);
      json j = result_json(run.result);
      j["trained_dev_fid"] = cmp.trained_dev_fid;
      j["untrained_dev_fid"] = cmp.untrained_dev_fid;
      j["smoothed_loss_step10"] = run.unet_curve.smoothed(std::min<std::size_t>(10, run.unet_curve.losses.size()));
      j["smoothed_loss_final"] = run.unet_curve.smoothed(run.unet_curve.losses.size());
      write_text(fs::path(c.output_dir) / "result.json", j.dump(2) + "\n");
      std::printf("trained in %.1fs; dev FID %.3f (untrained %.3f)\n", run.result.wall_seconds, cmp.trained_dev_fid,
                  cmp.untrained_dev_fid);
    } else if (train_lora_cmd->parsed()) {
      const auto c = resolve(cfg);
      save_config(fs::path(c.output_dir) / "config.txt", c);
      PretrainedBase base = base_for(c, base_dir);
      const int runs = lora_runs > 0 ? lora_runs : c.eval_runs;
      const auto e = lora_experiment(base, c, c.lora_rank, runs, [&](int r, ModelBundle& tuned) {
        if (r == 0) save_bundle(fs::path(c.output_dir) / "lora_model", tuned);
      });
      json j = result_json(e.result);
      j["zero_shot_fid"] = e.zero_shot_fid;
      j["improved_runs"] = e.improved_runs;
      j["base_unchanged"] = e.base_unchanged;
      write_text(fs::path(c.output_dir) / "lora_result.json", j.dump(2) + "\n");
      std::printf("rank %d: zero-shot FID %.3f, tuned", c.lora_rank, e.zero_shot_fid);
      for (double f : e.tuned_fids) std::printf(" %.3f", f);
      std::printf("; improved %zu/%d; base unchanged: %s\n", e.improved_runs, runs, e.base_unchanged ? "yes" : "no");
    } else if (sweep_ranks->parsed()) {
      const auto c = resolve(cfg);
      PretrainedBase base = base_for(c, base_dir);
      const auto rows = rank_sweep(base, c, c.ranks(), lora_runs > 0 ? lora_runs : c.eval_runs);
      std::ostringstream csv;
      write_sweep_csv(csv, rows);
      write_text(fs::path(c.output_dir) / "rank_sweep.csv", csv.str());
      std::cout << csv.str();
    } else if (augment_cmd->parsed()) {
      const auto c = resolve(cfg);
      const auto e = augmentation_experiment(c);
      std::ostringstream csv, md;
      write_augmentation_csv(csv, e);
      write_augmentation_markdown(md, e);
      write_text(fs::path(c.output_dir) / "augmentation.csv", csv.str());
      write_text(fs::path(c.output_dir) / "augmentation.md", md.str());
      std::cout << md.str();
    } else if (generate->parsed()) {
      const auto c = resolve(cfg);
      const ModelBundle model = load_bundle(model_dir);
      const auto prompts = evaluation_prompts(target_dataset(c), c.eval_max_prompts, c.eval_seed);
      GeneratedSet set = total > 0 ? generate_total(model, prompts, total, c.eval_seed)
                                   : generate_set(model, prompts, c.eval_images_per_prompt, c.eval_seed, c.eval_runs);
      if (!model_name.empty()) set.model = model_name;
      write_generated(gen_out, set);
      std::printf("%zu images for %zu prompts -> %s\n", set.images.size(), prompts.size(), gen_out.c_str());
    } else if (evaluate_cmd->parsed()) {
      const auto c = resolve(cfg);
      const auto gen = read_generated(gen_dir);
      std::optional<ModelBundle> model;
      if (!eval_model_dir.empty()) model = load_bundle(eval_model_dir);
      const auto embedder = embedder_for(c, model ? &*model : nullptr);
      const auto ev = evaluate(target_dataset(c), gen, *embedder, c.eval_seed, default_assumptions(c));
      const fs::path out = report_out.empty() ? fs::path(gen_dir) / "report.json" : fs::path(report_out);
      write_text(out, metrics::to_json(ev.report) + "\n");
      std::ostringstream rows;
      metrics::write_prompt_csv(rows, ev.rows);
      write_text(out.parent_path() / "prompt_metrics.csv", rows.str());
      std::ostringstream md;
      write_summary_markdown(md, {ev.report});
      std::cout << md.str();
    } else if (report->parsed()) {
      std::vector<metrics::MetricReport> reports;
      for (const auto& f : report_files) reports.push_back(metrics::report_from_json(read_text(f)));
      std::ostringstream md, csv;
      write_summary_markdown(md, reports);
      write_summary_csv(csv, reports);
      if (!report_dir.empty()) {
        write_text(fs::path(report_dir) / "summary.md", md.str());
        write_text(fs::path(report_dir) / "summary.csv", csv.str());
      }
      std::cout << md.str();
    } else if (correlate->parsed()) {
      std::map<std::string, metrics::MetricReport> reports;
      for (const auto& f : corr_reports) {
        auto r = metrics::report_from_json(read_text(f));
        reports[r.model] = std::move(r);
      }
      const auto table = correlate_ranks(parse_export_csv(read_text(export_file)), reports, expected_tasks);
      for (const auto& w : table.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      std::ostringstream csv;
      write_correlation_csv(csv, table);
      if (corr_out.empty()) {
        std::cout << csv.str();
      } else {
        write_text(corr_out, csv.str());
      }
    } else if (build_tasks_cmd->parsed()) {
      const auto c = resolve(cfg);
      const auto target = target_dataset(c);
      const auto pairs = prompt_pairs(target, (task_count + 1) / 2, c.eval_seed);
      annotation::TaskBuildInput in;
      in.task_count = task_count;
      in.images_per_set = images_per_set;
      in.reference_count = reference_count;
      in.seed = mix_seed(c.seed, hash_string("annotation.tasks"));
      for (const auto& p : pairs) in.prompts.push_back({p.id, p.text, p.kind});
      for (const auto& id : target.validation_ids) in.references.push_back(target.image(id).pixels);
      for (const auto& dir : task_models) {
        const ModelBundle m = load_bundle(dir);
        annotation::ModelOutputs out;
        out.model_id = fs::path(dir).filename().string();
        for (std::size_t i = 0; i < task_count; ++i) {
          std::vector<Image> set;
          for (std::size_t k = 0; k < images_per_set; ++k) set.push_back(m.generate(pairs[i].text, image_seed(c.eval_seed, 0, i, k)));
          out.per_prompt.push_back(std::move(set));
        }
        std::fprintf(stderr, "generated sets for %s\n", out.model_id.c_str());
        in.models.push_back(std::move(out));
      }
      annotation::write_task_store(data_dir, annotation::build_tasks(in));
      std::printf("%zu tasks -> %s\n", task_count, data_dir.c_str());
    } else if (serve_cmd->parsed()) {
      annotation::AnnotationService service(data_dir);
      for (const auto& w : service.load_warnings()) std::fprintf(stderr, "warning: %s\n", w.c_str());
      return annotation::serve(service, addr);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
