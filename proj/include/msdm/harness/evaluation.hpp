#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "msdm/embedders.hpp"
#include "msdm/harness/training.hpp"
#include "msdm/metrics.hpp"
#include "msdm/synthdata.hpp"

namespace msdm::harness {

struct EvalPrompt {
  std::string id;
  std::string text;
  synth::SceneAttributes attrs;
  std::string kind;  // "original" or "rephrased"
  std::size_t pair = 0;
};

// One original prompt per attribute combo present in the validation split
// (validation-only prompts preferred), each followed by a rephrasing whose text
// does not occur anywhere in the prompt table. At most max_pairs pairs.
std::vector<EvalPrompt> evaluation_prompts(const synth::DatasetManifest& m, std::size_t max_pairs, std::uint64_t seed);

struct DevTestSplit {
  std::vector<std::string> dev;
  std::vector<std::string> test;
};
// n_pairs distinct original prompts (validation-only ones first) each paired
// with an unseen rephrasing; used to build annotation tasks.
std::vector<EvalPrompt> prompt_pairs(const synth::DatasetManifest& m, std::size_t n_pairs, std::uint64_t seed);

DevTestSplit dev_test_split(const synth::DatasetManifest& m, std::uint64_t seed);

struct GeneratedImage {
  std::string prompt_id;
  std::string kind;
  std::size_t pair = 0;
  int run = 0;
  std::size_t index = 0;
  std::uint64_t seed = 0;
  Image image;
};

struct GeneratedSet {
  std::string model;
  std::vector<EvalPrompt> prompts;
  std::vector<GeneratedImage> images;
  int runs = 1;
};

std::uint64_t image_seed(std::uint64_t seed, int run, std::size_t prompt_index, std::size_t image_index);

// n_per_prompt images for every prompt in every run, each from its own derived seed.
GeneratedSet generate_set(const ModelBundle& model, const std::vector<EvalPrompt>& prompts, std::size_t n_per_prompt,
                          std::uint64_t seed, int runs);
// `total` images cycling over the prompts (large-evaluation mode, single run).
GeneratedSet generate_total(const ModelBundle& model, const std::vector<EvalPrompt>& prompts, std::size_t total,
                            std::uint64_t seed);

// <dir>/generated.jsonl plus <dir>/images/*.png
void write_generated(const std::filesystem::path& dir, const GeneratedSet& set);
GeneratedSet read_generated(const std::filesystem::path& dir);

struct Evaluation {
  metrics::MetricReport report;
  std::vector<metrics::PromptMetricRow> rows;
};

std::vector<std::string> default_assumptions(const ExperimentConfig& c);

// Fidelity, Agreement and Diversity from per-prompt groups (averaged over
// runs), FBD over everything pooled, FID (dev/test) per run.
Evaluation evaluate(const synth::DatasetManifest& real, const GeneratedSet& generated, const metrics::Embedder& embedder,
                    std::uint64_t split_seed, const std::vector<std::string>& assumptions);

// FID of the pooled generated images of one run against the dev half.
double dev_fid(const synth::DatasetManifest& real, const GeneratedSet& generated, const metrics::Embedder& embedder,
               std::uint64_t split_seed, int run = 0);

// Comparison table with columns model, fid_dev, fid_test, fidelity, agreement,
// diversity, fbd.
void write_summary_csv(std::ostream& os, const std::vector<metrics::MetricReport>& reports);
void write_summary_markdown(std::ostream& os, const std::vector<metrics::MetricReport>& reports);

}  // namespace msdm::harness
