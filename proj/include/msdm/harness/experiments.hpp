#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "msdm/embedders.hpp"
#include "msdm/harness/evaluation.hpp"
#include "msdm/harness/training.hpp"

namespace msdm::harness {

// FID of eval.fid_images generated images (cycling over the evaluation
// prompts) against the whole validation split of `target`.
struct DomainFid {
  double fid = 0.0;
  std::size_t generated = 0;
  std::size_t real = 0;
};
DomainFid domain_fid(const ModelBundle& model, const synth::DatasetManifest& target, const metrics::Embedder& embedder,
                     const ExperimentConfig& c, std::uint64_t generation_seed);

std::unique_ptr<metrics::Embedder> embedder_for(const ExperimentConfig& c, const ModelBundle* model = nullptr);

// Dev-half FID of a trained MSDM against the same model with its U-Net and
// text encoder reset to their initial weights (VAE and latent scale kept).
struct TrainedVsUntrained {
  double trained_dev_fid = 0.0;
  double untrained_dev_fid = 0.0;
};
TrainedVsUntrained compare_with_untrained(const MsdmRun& run, const ExperimentConfig& c);

struct LoraExperiment {
  double zero_shot_fid = 0.0;
  std::vector<double> tuned_fids;  // one per run
  std::size_t improved_runs = 0;
  bool base_unchanged = true;
  RunResult result;
};

// One zero-shot probe, then `runs` independent fine-tunes at `rank`, each
// probed with the same generation seed. Adapters are removed afterwards.
// after_run sees the model with that run's adapters installed.
LoraExperiment lora_experiment(PretrainedBase& base, const ExperimentConfig& c, int rank, int runs,
                               const std::function<void(int run, ModelBundle& tuned)>& after_run = {});

struct SweepRow {
  int rank = 0;
  std::size_t params = 0;
  double fid_mean = 0.0;
  double fid_std = 0.0;
  std::vector<double> fids;
};

std::vector<SweepRow> rank_sweep(PretrainedBase& base, const ExperimentConfig& c, const std::vector<int>& ranks, int runs);
// rank,params,fid_mean,fid_std
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

struct AugmentationRow {
  std::string strategy;
  bool is_default = false;
  std::size_t prompts = 0;
  std::size_t originals = 0;
  std::size_t paraphrases = 0;
  double final_loss = 0.0;
  double dev_fid = 0.0;
  double agreement = 0.0;
};

struct AugmentationExperiment {
  std::size_t base_originals = 0;
  std::size_t base_paraphrases = 0;
  std::vector<AugmentationRow> rows;  // add, substitute, replace
};

inline constexpr const char* kDefaultStrategy = "add";

// Builds the three augmented prompt tables from one dataset, trains one VAE,
// then one U-Net per strategy (train.steps each) and evaluates each.
AugmentationExperiment augmentation_experiment(const ExperimentConfig& c);
void write_augmentation_csv(std::ostream& os, const AugmentationExperiment& e);
void write_augmentation_markdown(std::ostream& os, const AugmentationExperiment& e);

}  // namespace msdm::harness
