#include "msdm/harness/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include "json.hpp"
#include "msdm/errors.hpp"

namespace msdm::harness {

using nlohmann::json;

std::vector<EvalPrompt> evaluation_prompts(const synth::DatasetManifest& m, std::size_t max_pairs, std::uint64_t seed) {
  std::map<std::string, synth::SceneAttributes> combos;
  for (const auto& id : m.validation_ids) {
    const auto& a = m.image(id).attrs;
    combos.emplace(a.key(), a);
  }
  std::set<std::string> known_texts;
  for (const auto& p : m.prompts) known_texts.insert(p.text);

  std::vector<EvalPrompt> out;
  std::size_t pair = 0;
  for (const auto& [key, attrs] : combos) {
    if (pair >= max_pairs) break;
    const synth::PromptRecord* chosen = nullptr;
    for (const auto& p : m.prompts) {
      if (p.attrs == attrs && p.origin == synth::Origin::original && m.is_validation_prompt(p.id)) {
        chosen = &p;
        break;
      }
    }
    if (!chosen) {
      for (const auto& p : m.prompts) {
        if (p.attrs == attrs && p.origin == synth::Origin::original && p.template_id == 0) {
          chosen = &p;
          break;
        }
      }
    }
    const synth::PromptRecord original =
        chosen ? *chosen : synth::render_prompt(attrs, 0, "eval." + key);
    const auto rewrites = synth::paraphrase(original, 16, seed);
    const synth::PromptRecord* rephrased = nullptr;
    for (const auto& r : rewrites) {
      if (!known_texts.count(r.text)) {
        rephrased = &r;
        break;
      }
    }
    if (!rephrased) throw ConfigError("evaluation_prompts: no unseen rephrasing for " + original.id);
    out.push_back({original.id, original.text, attrs, "original", pair});
    out.push_back({rephrased->id, rephrased->text, attrs, "rephrased", pair});
    ++pair;
  }
  if (out.empty()) throw ConfigError("evaluation_prompts: validation split is empty");
  return out;
}

std::vector<EvalPrompt> prompt_pairs(const synth::DatasetManifest& m, std::size_t n_pairs, std::uint64_t seed) {
  std::set<std::string> known_texts;
  for (const auto& p : m.prompts) known_texts.insert(p.text);
  std::vector<const synth::PromptRecord*> pool;
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& p : m.prompts) {
      if (p.origin == synth::Origin::original && m.is_validation_prompt(p.id) == (pass == 0)) pool.push_back(&p);
    }
  }
  std::vector<EvalPrompt> out;
  std::set<std::string> used;
  for (const auto* p : pool) {
    if (out.size() / 2 >= n_pairs) break;
    for (const auto& r : synth::paraphrase(*p, 16, seed)) {
      if (known_texts.count(r.text) || used.count(r.text)) continue;
      const std::size_t pair = out.size() / 2;
      out.push_back({p->id, p->text, p->attrs, "original", pair});
      out.push_back({r.id, r.text, r.attrs, "rephrased", pair});
      used.insert(r.text);
      break;
    }
  }
  if (out.size() / 2 < n_pairs) {
    throw ConfigError("prompt_pairs: only " + std::to_string(out.size() / 2) + " of " + std::to_string(n_pairs) +
                      " prompt pairs available");
  }
  return out;
}

DevTestSplit dev_test_split(const synth::DatasetManifest& m, std::uint64_t seed) {
  std::vector<std::string> ids = m.validation_ids;
  if (ids.size() < 4) throw InsufficientSamplesError("dev/test split needs at least 4 validation images");
  Rng rng(mix_seed(seed, hash_string("devtest")));
  shuffle(ids, rng);
  DevTestSplit s;
  s.dev.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(ids.size() / 2));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(ids.size() / 2), ids.end());
  return s;
}

std::uint64_t image_seed(std::uint64_t seed, int run, std::size_t prompt_index, std::size_t image_index) {
  return mix_seed(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(run)), prompt_index), image_index);
}

GeneratedSet generate_set(const ModelBundle& model, const std::vector<EvalPrompt>& prompts, std::size_t n_per_prompt,
                          std::uint64_t seed, int runs) {
  GeneratedSet set;
  set.model = model.kind;
  set.prompts = prompts;
  set.runs = runs;
  for (int r = 0; r < runs; ++r) {
    for (std::size_t p = 0; p < prompts.size(); ++p) {
      for (std::size_t i = 0; i < n_per_prompt; ++i) {
        const std::uint64_t s = image_seed(seed, r, p, i);
        set.images.push_back({prompts[p].id, prompts[p].kind, prompts[p].pair, r, i, s, model.generate(prompts[p].text, s)});
      }
    }
  }
  return set;
}

GeneratedSet generate_total(const ModelBundle& model, const std::vector<EvalPrompt>& prompts, std::size_t total,
                            std::uint64_t seed) {
  if (prompts.empty()) throw ConfigError("generate_total: no prompts");
  GeneratedSet set;
  set.model = model.kind;
  set.prompts = prompts;
  for (std::size_t k = 0; k < total; ++k) {
    const std::size_t p = k % prompts.size(), i = k / prompts.size();
    const std::uint64_t s = image_seed(seed, 0, p, i);
    set.images.push_back({prompts[p].id, prompts[p].kind, prompts[p].pair, 0, i, s, model.generate(prompts[p].text, s)});
  }
  return set;
}

void write_generated(const std::filesystem::path& dir, const GeneratedSet& set) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream out(dir / "generated.jsonl", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "generated.jsonl").string());
  json header = {{"model", set.model}, {"runs", set.runs}, {"prompts", json::array()}};
  for (const auto& p : set.prompts) {
    header["prompts"].push_back({{"id", p.id},
                                 {"text", p.text},
                                 {"kind", p.kind},
                                 {"pair", p.pair},
                                 {"attrs",
                                  {{"finding", synth::to_string(p.attrs.finding)},
                                   {"count", p.attrs.count},
                                   {"modality", synth::to_string(p.attrs.modality)},
                                   {"hue", synth::to_string(p.attrs.hue)}}}});
  }
  out << header.dump() << '\n';
  for (const auto& g : set.images) {
    char name[96];
    std::snprintf(name, sizeof name, "images/r%d_%s_%04zu.png", g.run, g.prompt_id.c_str(), g.index);
    write_png(dir / name, g.image);
    out << json{{"file", name}, {"prompt_id", g.prompt_id}, {"kind", g.kind}, {"pair", g.pair},
                {"run", g.run},  {"index", g.index},         {"seed", g.seed}}
               .dump()
        << '\n';
  }
}

GeneratedSet read_generated(const std::filesystem::path& dir) {
  std::ifstream in(dir / "generated.jsonl");
  if (!in) throw IoError("cannot open " + (dir / "generated.jsonl").string());
  GeneratedSet set;
  std::string line;
  try {
    if (!std::getline(in, line)) throw IoError("empty generated.jsonl");
    const json header = json::parse(line);
    set.model = header.at("model").get<std::string>();
    set.runs = header.at("runs").get<int>();
    for (const auto& p : header.at("prompts")) {
      EvalPrompt e;
      e.id = p.at("id").get<std::string>();
      e.text = p.at("text").get<std::string>();
      e.kind = p.at("kind").get<std::string>();
      e.pair = p.at("pair").get<std::size_t>();
      const auto& a = p.at("attrs");
      e.attrs = {synth::parse_finding(a.at("finding").get<std::string>()), a.at("count").get<int>(),
                 synth::parse_modality(a.at("modality").get<std::string>()), synth::parse_hue(a.at("hue").get<std::string>())};
      set.prompts.push_back(std::move(e));
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      GeneratedImage g;
      g.prompt_id = j.at("prompt_id").get<std::string>();
      g.kind = j.at("kind").get<std::string>();
      g.pair = j.at("pair").get<std::size_t>();
      g.run = j.at("run").get<int>();
      g.index = j.at("index").get<std::size_t>();
      g.seed = j.at("seed").get<std::uint64_t>();
      g.image = read_png(dir / j.at("file").get<std::string>());
      set.images.push_back(std::move(g));
    }
  } catch (const json::exception& e) {
    throw IoError("generated.jsonl: " + std::string(e.what()));
  }
  return set;
}

std::vector<std::string> default_assumptions(const ExperimentConfig& c) {
  char buf[160];
  std::vector<std::string> a;
  a.push_back("embedder '" + c.eval_embedder + "' is a frozen toy feature extractor; values are not comparable to clinical-feature FIDs");
  std::snprintf(buf, sizeof buf, "diffusion T=%d, %s schedule, guidance scale %g, condition drop %g", c.diffusion_T,
                c.diffusion_schedule.c_str(), c.diffusion_guidance, c.diffusion_drop_probability);
  a.push_back(buf);
  a.push_back("linear schedule endpoints rescaled so alpha_bar_T matches the 1000-step 1e-4..0.02 schedule");
  a.push_back("per-prompt FID uses diagonal covariance when either set has fewer samples than embedding dimensions");
  a.push_back("diversity distance is cosine distance");
  a.push_back("agreement is the cosine similarity of per-prompt mean embeddings");
  a.push_back("fidelity uses the mean of per-prompt FIDs");
  a.push_back("FID (Dev)/FID (Test) computed against disjoint halves of the validation split");
  a.push_back("synthetic data: procedurally rendered 32x32 scenes, rule-based paraphrases");
  return a;
}

namespace {

struct Embedded {
  std::map<std::string, Eigen::VectorXd> real;  // image id -> embedding
  std::vector<Eigen::VectorXd> generated;       // parallel to GeneratedSet::images
};

metrics::EmbeddingSet rows_of(const std::vector<Eigen::VectorXd>& vs, std::string source, std::string prompt_id = {}) {
  metrics::EmbeddingSet s;
  s.source = std::move(source);
  s.prompt_id = std::move(prompt_id);
  if (vs.empty()) return s;
  s.embeddings.resize(static_cast<Eigen::Index>(vs.size()), vs.front().size());
  for (std::size_t i = 0; i < vs.size(); ++i) s.embeddings.row(static_cast<Eigen::Index>(i)) = vs[i].transpose();
  return s;
}

metrics::EmbeddingSet real_rows(const Embedded& e, const std::vector<std::string>& ids) {
  std::vector<Eigen::VectorXd> vs;
  for (const auto& id : ids) vs.push_back(e.real.at(id));
  return rows_of(vs, "real");
}

Embedded embed_all(const synth::DatasetManifest& real, const GeneratedSet& gen, const metrics::Embedder& embedder) {
  Embedded e;
  for (const auto& id : real.validation_ids) e.real.emplace(id, embedder.embed(real.image(id).pixels));
  for (const auto& g : gen.images) e.generated.push_back(embedder.embed(g.image));
  return e;
}

metrics::EmbeddingSet run_pool(const Embedded& e, const GeneratedSet& gen, int run) {
  std::vector<Eigen::VectorXd> vs;
  for (std::size_t i = 0; i < gen.images.size(); ++i) {
    if (gen.images[i].run == run) vs.push_back(e.generated[i]);
  }
  if (vs.size() < 2) throw InsufficientSamplesError("run " + std::to_string(run) + " has fewer than 2 generated images");
  return rows_of(vs, "generated");
}

}  // namespace

double dev_fid(const synth::DatasetManifest& real, const GeneratedSet& generated, const metrics::Embedder& embedder,
               std::uint64_t split_seed, int run) {
  const Embedded e = embed_all(real, generated, embedder);
  return metrics::fid(real_rows(e, dev_test_split(real, split_seed).dev), run_pool(e, generated, run));
}

Evaluation evaluate(const synth::DatasetManifest& real, const GeneratedSet& gen, const metrics::Embedder& embedder,
                    std::uint64_t split_seed, const std::vector<std::string>& assumptions) {
  if (gen.prompts.empty() || gen.images.empty()) throw ContractError("evaluate: empty generated set");
  std::set<std::string> prompt_ids;
  for (const auto& p : gen.prompts) prompt_ids.insert(p.id);
  for (const auto& g : gen.images) {
    if (!prompt_ids.count(g.prompt_id)) throw ContractError("evaluate: image for unknown prompt " + g.prompt_id);
    if (g.run < 0 || g.run >= gen.runs) throw ContractError("evaluate: image run index out of range");
  }
  const Embedded e = embed_all(real, gen, embedder);
  const DevTestSplit split = dev_test_split(real, split_seed);
  const auto dev = real_rows(e, split.dev), test = real_rows(e, split.test), all_real = real_rows(e, real.validation_ids);

  Evaluation ev;
  auto& r = ev.report;
  r.model = gen.model;
  r.embedder = embedder.id();
  r.run_count = gen.runs;
  r.assumptions = assumptions;
  r.real_samples = real.validation_ids.size();
  r.generated_samples = gen.images.size();
  r.prompt_count = gen.prompts.size();

  for (int run = 0; run < gen.runs; ++run) {
    const auto pooled = run_pool(e, gen, run);
    r.dev_run_fids.push_back(metrics::fid(dev, pooled));
    r.run_fids.push_back(metrics::fid(test, pooled));
  }
  if (gen.runs >= 2) {
    const auto s = metrics::aggregate_runs(r.run_fids);
    r.fid_mean = s.mean;
    r.fid_std = s.std;
  } else {
    r.fid_mean = r.run_fids.front();
    r.fid_std = 0.0;
  }

  // Per-prompt groups per run.
  const auto group = [&](const std::string& pid, int run) {
    std::vector<Eigen::VectorXd> vs;
    for (std::size_t i = 0; i < gen.images.size(); ++i) {
      if (gen.images[i].prompt_id == pid && gen.images[i].run == run) vs.push_back(e.generated[i]);
    }
    return rows_of(vs, "generated", pid);
  };
  const auto reference_for = [&](const EvalPrompt& p) {
    std::vector<std::string> ids;
    for (const auto& id : real.validation_ids) {
      if (real.image(id).attrs == p.attrs) ids.push_back(id);
    }
    if (ids.size() < 2) {
      ids.clear();
      for (const auto& id : real.validation_ids) {
        if (real.image(id).attrs.finding == p.attrs.finding) ids.push_back(id);
      }
    }
    if (ids.size() < 2) ids = real.validation_ids;
    return real_rows(e, ids);
  };

  std::vector<double> prompt_fids, prompt_div;
  std::map<std::size_t, std::pair<const EvalPrompt*, const EvalPrompt*>> pairs;
  for (const auto& p : gen.prompts) {
    const auto ref = reference_for(p);
    double f = 0.0, d = 0.0;
    for (int run = 0; run < gen.runs; ++run) {
      const auto g = group(p.id, run);
      f += metrics::fid(ref, g);
      d += metrics::set_diversity(g.embeddings);
    }
    f /= gen.runs;
    d /= gen.runs;
    prompt_fids.push_back(f);
    prompt_div.push_back(d);
    ev.rows.push_back({p.id, f, d, 0.0});
    auto& slot = pairs[p.pair];
    (p.kind == "original" ? slot.first : slot.second) = &p;
  }

  double agreement_sum = 0.0;
  std::size_t agreement_n = 0;
  for (const auto& [pair, ends] : pairs) {
    if (!ends.first || !ends.second) throw ContractError("evaluate: prompt pair " + std::to_string(pair) + " is incomplete");
    double a = 0.0;
    for (int run = 0; run < gen.runs; ++run) a += metrics::agreement_pair(group(ends.first->id, run), group(ends.second->id, run));
    a /= gen.runs;
    for (auto& row : ev.rows) {
      if (row.prompt_id == ends.first->id || row.prompt_id == ends.second->id) row.agreement_pair = a;
    }
    agreement_sum += a;
    ++agreement_n;
  }

  r.fidelity = metrics::fidelity(prompt_fids);
  r.agreement = agreement_sum / static_cast<double>(agreement_n);
  double div = 0.0;
  for (double d : prompt_div) div += d;
  r.diversity = div / static_cast<double>(prompt_div.size());
  r.fbd = metrics::fbd(all_real, rows_of(e.generated, "generated"));
  r.validate();
  return ev;
}

namespace {

struct SummaryCells {
  std::string model, fid_dev, fid_test, fidelity, agreement, diversity, fbd;
};

SummaryCells cells(const metrics::MetricReport& r) {
  char buf[64];
  SummaryCells c;
  c.model = r.model;
  c.fid_dev = r.dev_run_fids.empty() ? "n/a" : metrics::format_range(r.dev_run_fids);
  c.fid_test = metrics::format_mean_std({r.fid_mean, r.fid_std});
  std::snprintf(buf, sizeof buf, "%.2f", r.fidelity);
  c.fidelity = buf;
  std::snprintf(buf, sizeof buf, "%.3f", r.agreement);
  c.agreement = buf;
  std::snprintf(buf, sizeof buf, "%.3f", r.diversity);
  c.diversity = buf;
  std::snprintf(buf, sizeof buf, "%.4f", r.fbd);
  c.fbd = buf;
  return c;
}

}  // namespace

void write_summary_csv(std::ostream& os, const std::vector<metrics::MetricReport>& reports) {
  os << "model,fid_dev,fid_test,fidelity,agreement,diversity,fbd\n";
  for (const auto& r : reports) {
    const auto c = cells(r);
    os << c.model << ',' << c.fid_dev << ',' << c.fid_test << ',' << c.fidelity << ',' << c.agreement << ','
       << c.diversity << ',' << c.fbd << '\n';
  }
}

void write_summary_markdown(std::ostream& os, const std::vector<metrics::MetricReport>& reports) {
  os << "| Model | FID (Dev) | FID (Test) | Fidelity (↑) | Agreement (↑) | Diversity (↑) | FBD (↓) |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    const auto c = cells(r);
    os << "| " << c.model << " | " << c.fid_dev << " | " << c.fid_test << " | " << c.fidelity << " | " << c.agreement
       << " | " << c.diversity << " | " << c.fbd << " |\n";
  }
  if (!reports.empty()) os << "\nEmbedder: " << reports.front().embedder << "\n";
}

}  // namespace msdm::harness
