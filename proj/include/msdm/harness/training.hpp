#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msdm/diffusion.hpp"
#include "msdm/harness/config.hpp"
#include "msdm/image.hpp"
#include "msdm/lora.hpp"
#include "msdm/metrics.hpp"
#include "msdm/synthdata.hpp"
#include "msdm/text_encoder.hpp"
#include "msdm/unet.hpp"
#include "msdm/vae.hpp"

namespace msdm::harness {

struct LossCurve {
  std::vector<double> losses;  // index 0 is step 1

  // Trailing mean over up to `window` steps ending at `step` (1-based).
  double smoothed(std::size_t step, std::size_t window = 50) const;
  void write_csv(const std::filesystem::path& path, std::size_t window = 50) const;
};

/// VAE, text encoder and U-Net plus everything needed to sample from them.
struct ModelBundle {
  ExperimentConfig config;
  std::string kind;  // "msdm-scratch", "base" or "base-lora"
  std::uint64_t seed = 0;  // construction seed; also keys the frozen token table
  std::unique_ptr<Vae> vae;
  std::unique_ptr<TextEncoder> text;
  std::unique_ptr<Unet> unet;
  diffusion::NoiseSchedule schedule;
  double latent_scale = 1.0;
  std::vector<lora::AdapterPtr> adapters;

  NamedTensors parameters() const;  // vae, text, unet and latent.scale
  NamedTensors unet_side() const;   // text + unet, the diffusion parameters
  diffusion::NoisePredictor predictor() const;
  Shape latent_shape() const;
  Tensor sample_latent(const std::string& prompt, std::uint64_t seed) const;
  Image generate(const std::string& prompt, std::uint64_t seed) const;
};

VaeConfig vae_config_for(const ExperimentConfig& c);
// The base backbone is lora.width_mult times wider with attention at the
// lower resolution running at lora.attn_width.
UnetConfig unet_config_for(const ExperimentConfig& c, bool base_backbone);
diffusion::NoiseSchedule schedule_for(const ExperimentConfig& c);

ModelBundle make_bundle(const ExperimentConfig& c, const std::string& kind, std::uint64_t seed);
void save_bundle(const std::filesystem::path& dir, const ModelBundle& bundle);
// Loads model.ckpt, config.txt, kind.txt (kind and seed) and adapters (when
// present) from dir.
ModelBundle load_bundle(const std::filesystem::path& dir);

// Deterministic datasets derived from the config.
synth::DatasetManifest target_dataset(const ExperimentConfig& c);
synth::DatasetManifest generic_dataset(const ExperimentConfig& c);

struct TrainingSet {
  std::vector<Tensor> images;                  // [3 x H x W] in [-1, 1]
  std::vector<std::vector<std::string>> texts;  // linked prompt texts per image
};
TrainingSet training_set(const synth::DatasetManifest& m);

using StepCallback = std::function<void(std::size_t step, double loss)>;

LossCurve train_vae(Vae& vae, const std::vector<Tensor>& images, std::size_t steps, std::size_t batch, double lr,
                    double kl_weight, Rng& rng, const StepCallback& on_step = {});

std::vector<Tensor> encode_latents(const Vae& vae, const std::vector<Tensor>& images);
// 1 / std of all latent values.
double latent_scale_of(const std::vector<Tensor>& latents);

struct DiffusionTrainOptions {
  std::size_t steps = 0;
  std::size_t batch = 1;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double drop_probability = 0.1;
};

// eps-loss training of bundle.unet on pre-scaled latents; only `trainable`
// tensors are updated. Non-finite losses abort with DivergenceError.
LossCurve train_diffusion(ModelBundle& bundle, const std::vector<Tensor>& latents,
                          const std::vector<std::vector<std::string>>& texts, const std::vector<Tensor>& trainable,
                          const DiffusionTrainOptions& options, Rng& rng, const StepCallback& on_step = {});

struct RunResult {
  std::uint64_t config_digest = 0;
  std::vector<double> run_fids;
  std::optional<metrics::MetricReport> report;
  double wall_seconds = 0.0;
  std::vector<std::string> checkpoints;
  int rank = 0;
  std::size_t trainable_params = 0;
};

struct MsdmRun {
  RunResult result;
  ModelBundle model;
  LossCurve vae_curve;
  LossCurve unet_curve;
  synth::DatasetManifest dataset;
};

// VAE first, then freeze it and train the U-Net (and text mixing) on scaled
// latents. Writes loss CSVs and the bundle under output.dir when write_outputs.
MsdmRun train_msdm(const ExperimentConfig& c, bool write_outputs = true, const StepCallback& on_step = {});

struct PretrainedBase {
  ModelBundle model;
  LossCurve vae_curve;
  LossCurve unet_curve;
  synth::DatasetManifest target;
  synth::DatasetManifest generic;
};

// VAE on generic + target-train images; wide U-Net on the generic domain only.
PretrainedBase pretrain_base(const ExperimentConfig& c, bool write_outputs = true);

struct LoraRun {
  std::vector<lora::AdapterPtr> adapters;
  LossCurve curve;
  std::uint64_t base_digest_before = 0;
  std::uint64_t base_digest_after = 0;
  std::size_t trainable_params = 0;
};

// Attaches fresh adapters at the given rank to a copy-free view of the base,
// fine-tunes them on the target training set and leaves them installed.
LoraRun fine_tune_lora(ModelBundle& base, const synth::DatasetManifest& target, const ExperimentConfig& c, int rank,
                       std::uint64_t run_seed);

}  // namespace msdm::harness
