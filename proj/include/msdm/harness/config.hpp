#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace msdm::harness {

/// Every knob of an experiment. Serialised as `key = value` lines with dotted
/// keys; write_config followed by parse_config reproduces an equal config.
struct ExperimentConfig {
  std::uint64_t seed = 1234;

  std::size_t dataset_images = 200;
  std::size_t dataset_generic_images = 200;
  std::size_t dataset_image_size = 32;
  double dataset_holdout = 0.10;
  std::size_t dataset_images_per_combo = 50;
  std::string dataset_augment = "none";  // none | add | substitute | replace
  int dataset_paraphrases = 4;
  double dataset_substitute_fraction = 0.5;

  std::string model_kind = "msdm-scratch";  // msdm-scratch | base-lora

  std::size_t unet_ch1 = 32;
  std::size_t unet_ch2 = 64;
  std::size_t unet_attn1_width = 0;
  std::size_t unet_attn2_width = 0;

  std::size_t vae_ch1 = 16;
  std::size_t vae_ch2 = 32;
  std::size_t vae_steps = 500;
  std::size_t vae_batch = 16;
  double vae_lr = 1e-3;
  double vae_kl_weight = 1e-3;

  int diffusion_T = 100;
  std::string diffusion_schedule = "linear";  // linear | cosine
  double diffusion_guidance = 1.0;
  double diffusion_drop_probability = 0.1;

  std::size_t train_steps = 2000;
  std::size_t train_batch = 16;
  double train_lr = 1e-4;
  double train_weight_decay = 0.01;

  int lora_rank = 16;
  double lora_alpha = 0.0;  // 0: alpha = rank
  std::string lora_targets = "attn2.to_q,attn2.to_out,attn2.ff1,attn2.ff2";
  std::size_t lora_steps = 200;
  std::size_t lora_batch = 8;
  double lora_lr = 1e-3;
  std::size_t lora_pretrain_steps = 600;
  std::size_t lora_pretrain_batch = 8;
  std::size_t lora_width_mult = 2;
  std::size_t lora_attn_width = 256;

  std::size_t eval_images_per_prompt = 10;
  int eval_runs = 5;
  std::string eval_embedder = "random-projection";
  std::size_t eval_max_prompts = 8;
  std::uint64_t eval_seed = 777;
  std::size_t eval_fid_images = 20;  // generated images per domain-FID probe

  std::string sweep_ranks = "4,8,16,32,64,128,256";

  std::string output_dir = "runs/default";

  bool operator==(const ExperimentConfig&) const = default;

  void validate() const;
  std::vector<int> ranks() const;
  std::vector<std::string> targets() const;
  double effective_lora_alpha() const { return lora_alpha > 0.0 ? lora_alpha : static_cast<double>(lora_rank); }
};

// Throws ConfigError (with line number) on unknown keys or bad values.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path);
std::string write_config(const ExperimentConfig& config);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);
// Applies one `key=value` override.
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();
std::uint64_t config_digest(const ExperimentConfig& config);

}  // namespace msdm::harness
