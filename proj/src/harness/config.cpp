#include "msdm/harness/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "msdm/errors.hpp"
#include "msdm/rng.hpp"

namespace msdm::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config: bad value '" + v + "' for " + key);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, ptr);
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class T>
Field field(T ExperimentConfig::*member, const std::string& key) {
  Field f;
  f.get = [member](const ExperimentConfig& c) {
    if constexpr (std::is_same_v<T, std::string>) {
      return c.*member;
    } else if constexpr (std::is_same_v<T, double>) {
      return format_double(c.*member);
    } else {
      return std::to_string(c.*member);
    }
  };
  f.set = [member, key](ExperimentConfig& c, const std::string& v) {
    if constexpr (std::is_same_v<T, std::string>) {
      c.*member = v;
    } else {
      c.*member = parse_number<T>(key, v);
    }
  };
  return f;
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    const auto add = [&t](const std::string& key, auto member) { t.emplace_back(key, field(member, key)); };
    using C = ExperimentConfig;
    add("seed", &C::seed);
    add("dataset.images", &C::dataset_images);
    add("dataset.generic_images", &C::dataset_generic_images);
    add("dataset.image_size", &C::dataset_image_size);
    add("dataset.holdout", &C::dataset_holdout);
    add("dataset.images_per_combo", &C::dataset_images_per_combo);
    add("dataset.augment", &C::dataset_augment);
    add("dataset.paraphrases", &C::dataset_paraphrases);
    add("dataset.substitute_fraction", &C::dataset_substitute_fraction);
    add("model.kind", &C::model_kind);
    add("unet.ch1", &C::unet_ch1);
    add("unet.ch2", &C::unet_ch2);
    add("unet.attn1_width", &C::unet_attn1_width);
    add("unet.attn2_width", &C::unet_attn2_width);
    add("vae.ch1", &C::vae_ch1);
    add("vae.ch2", &C::vae_ch2);
    add("vae.steps", &C::vae_steps);
    add("vae.batch", &C::vae_batch);
    add("vae.lr", &C::vae_lr);
    add("vae.kl_weight", &C::vae_kl_weight);
    add("diffusion.T", &C::diffusion_T);
    add("diffusion.schedule", &C::diffusion_schedule);
    add("diffusion.guidance", &C::diffusion_guidance);
    add("diffusion.drop_probability", &C::diffusion_drop_probability);
    add("train.steps", &C::train_steps);
    add("train.batch", &C::train_batch);
    add("train.lr", &C::train_lr);
    add("train.weight_decay", &C::train_weight_decay);
    add("lora.rank", &C::lora_rank);
    add("lora.alpha", &C::lora_alpha);
    add("lora.targets", &C::lora_targets);
    add("lora.steps", &C::lora_steps);
    add("lora.batch", &C::lora_batch);
    add("lora.lr", &C::lora_lr);
    add("lora.pretrain_steps", &C::lora_pretrain_steps);
    add("lora.pretrain_batch", &C::lora_pretrain_batch);
    add("lora.width_mult", &C::lora_width_mult);
    add("lora.attn_width", &C::lora_attn_width);
    add("eval.images_per_prompt", &C::eval_images_per_prompt);
    add("eval.runs", &C::eval_runs);
    add("eval.embedder", &C::eval_embedder);
    add("eval.max_prompts", &C::eval_max_prompts);
    add("eval.seed", &C::eval_seed);
    add("eval.fid_images", &C::eval_fid_images);
    add("sweep.ranks", &C::sweep_ranks);
    add("output.dir", &C::output_dir);
    return t;
  }();
  return table;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

std::vector<int> ExperimentConfig::ranks() const {
  std::vector<int> out;
  for (const auto& r : split_list(sweep_ranks)) out.push_back(parse_number<int>("sweep.ranks", r));
  return out;
}

std::vector<std::string> ExperimentConfig::targets() const { return split_list(lora_targets); }

void ExperimentConfig::validate() const {
  const auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  require(dataset_images >= 20, "dataset.images must be at least 20");
  require(dataset_generic_images >= 20, "dataset.generic_images must be at least 20");
  require(dataset_image_size >= 16 && dataset_image_size % 16 == 0, "dataset.image_size must be a multiple of 16");
  require(dataset_holdout > 0.0 && dataset_holdout < 1.0, "dataset.holdout must be in (0, 1)");
  require(dataset_images_per_combo >= 1, "dataset.images_per_combo must be positive");
  require(dataset_augment == "none" || dataset_augment == "add" || dataset_augment == "substitute" ||
              dataset_augment == "replace",
          "dataset.augment must be none, add, substitute or replace");
  require(dataset_paraphrases >= 1, "dataset.paraphrases must be positive");
  require(dataset_substitute_fraction >= 0.0 && dataset_substitute_fraction <= 1.0,
          "dataset.substitute_fraction must be in [0, 1]");
  require(model_kind == "msdm-scratch" || model_kind == "base-lora", "model.kind must be msdm-scratch or base-lora");
  require(unet_ch1 >= 8 && unet_ch1 % 8 == 0 && unet_ch2 >= 8 && unet_ch2 % 8 == 0,
          "unet channels must be positive multiples of 8");
  require(vae_ch1 >= 1 && vae_ch2 >= 1, "vae channels must be positive");
  require(vae_batch >= 1 && train_batch >= 1 && lora_batch >= 1 && lora_pretrain_batch >= 1, "batch sizes must be positive");
  require(vae_lr > 0.0 && train_lr > 0.0 && lora_lr > 0.0, "learning rates must be positive");
  require(vae_kl_weight >= 0.0, "vae.kl_weight must be non-negative");
  require(diffusion_T >= 1, "diffusion.T must be at least 1");
  require(diffusion_schedule == "linear" || diffusion_schedule == "cosine", "diffusion.schedule must be linear or cosine");
  require(diffusion_guidance >= 0.0, "diffusion.guidance must be non-negative");
  require(diffusion_drop_probability >= 0.0 && diffusion_drop_probability <= 1.0,
          "diffusion.drop_probability must be in [0, 1]");
  require(train_weight_decay >= 0.0, "train.weight_decay must be non-negative");
  require(lora_rank >= 1, "lora.rank must be at least 1");
  require(lora_alpha >= 0.0, "lora.alpha must be non-negative");
  require(!targets().empty(), "lora.targets must name at least one layer");
  require(lora_width_mult >= 1, "lora.width_mult must be positive");
  require(eval_images_per_prompt >= 2, "eval.images_per_prompt must be at least 2");
  require(eval_runs >= 1, "eval.runs must be positive");
  require(eval_embedder == "random-projection" || eval_embedder == "vae-encoder",
          "eval.embedder must be random-projection or vae-encoder");
  require(eval_max_prompts >= 1, "eval.max_prompts must be positive");
  require(eval_fid_images >= 2, "eval.fid_images must be at least 2");
  for (int r : ranks()) require(r >= 1, "sweep.ranks entries must be positive");
  require(!output_dir.empty(), "output.dir must not be empty");
}

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  for (const auto& [k, f] : fields()) {
    if (k == key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : fields()) out.push_back(k);
  return out;
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    try {
      set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(n) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string write_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(config) + "\n";
  return out;
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << write_config(config);
}

std::uint64_t config_digest(const ExperimentConfig& config) { return hash_string(write_config(config)); }

}  // namespace msdm::harness
