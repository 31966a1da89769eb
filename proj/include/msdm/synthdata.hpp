#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "msdm/image.hpp"

namespace msdm::synth {

enum class Finding { polyp, clean, instrument };
enum class Modality { endo, xray };
// Palette family. teal is kept out of the default target domain and used as
// the generic pretraining domain.
enum class Hue { pink, amber, crimson, teal };

std::string_view to_string(Finding f);
std::string_view to_string(Modality m);
std::string_view to_string(Hue h);
Finding parse_finding(std::string_view s);
Modality parse_modality(std::string_view s);
Hue parse_hue(std::string_view s);

struct SceneAttributes {
  Finding finding = Finding::clean;
  int count = 0;
  Modality modality = Modality::endo;
  Hue hue = Hue::pink;

  void validate() const;  // clean <=> count 0; count in 0..3
  std::string key() const;
  bool operator==(const SceneAttributes&) const = default;
};

// Every valid finding/count pair crossed with the given modalities and hues.
std::vector<SceneAttributes> attribute_grammar(const std::vector<Modality>& modalities, const std::vector<Hue>& hues);

// Exact marker colours of finding outlines. Backgrounds never produce them.
inline constexpr std::uint8_t kEndoRim[3] = {28, 6, 18};
inline constexpr std::uint8_t kXrayRim[3] = {252, 252, 246};
inline constexpr std::uint8_t kInstrumentBody[3] = {148, 150, 156};
inline constexpr std::uint8_t kInstrumentStripe[3] = {240, 242, 245};

Image render_scene(const SceneAttributes& attrs, std::uint64_t seed, std::size_t size = 32);
std::size_t count_color(const Image& image, const std::uint8_t (&rgb)[3]);

enum class Origin { original, paraphrase };

struct PromptRecord {
  std::string id;
  std::string text;
  SceneAttributes attrs;
  Origin origin = Origin::original;
  std::optional<std::string> parent_id;
  int template_id = 0;
};

inline constexpr int kTemplateCount = 14;

// Template 0 is the plain "generate an image containing ..." form.
std::string render_prompt_text(const SceneAttributes& attrs, int template_id);
PromptRecord render_prompt(const SceneAttributes& attrs, int template_id, std::string id);

struct ImageSample {
  std::string id;
  Image pixels;
  SceneAttributes attrs;
  std::vector<std::string> prompt_ids;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::vector<ImageSample> images;
  std::vector<PromptRecord> prompts;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
  std::vector<std::string> validation_prompt_ids;  // prompts linked only to validation images
  std::uint64_t root_seed = 0;
  double holdout_fraction = 0.0;
  std::string strategy = "none";

  const PromptRecord& prompt(std::string_view id) const;
  const ImageSample& image(std::string_view id) const;
  bool is_validation_prompt(std::string_view id) const;
};

struct DatasetOptions {
  std::size_t image_size = 32;
  std::vector<Modality> modalities = {Modality::endo, Modality::xray};
  std::vector<Hue> hues = {Hue::pink, Hue::amber, Hue::crimson};
  std::size_t images_per_combo = 50;
};

DatasetOptions generic_domain_options();

// Attribute combos are drawn uniformly from the grammar (about one combo per
// images_per_combo images) and images are dealt round-robin over them. Each
// image links 7..14 distinct templates rendered with its own attributes.
DatasetManifest build_dataset(std::size_t n_images, std::uint64_t seed, const DatasetOptions& options = {});

// Image-level split. Prompts whose every linked image is held out become
// validation prompts; all others stay with training.
DatasetManifest split_holdout(const DatasetManifest& manifest, double fraction, std::uint64_t seed);
void refresh_prompt_split(DatasetManifest& manifest);

// Rule-based rewriter: swaps verb, noun and connector synonyms and can move
// the finding in front of the noun phrase. Returns up to k distinct texts,
// none equal to the parent. When k exceeds the number of available rewrites
// the output is capped and *warning (if given) explains why.
std::vector<PromptRecord> paraphrase(const PromptRecord& prompt, int k, std::uint64_t seed,
                                     std::string* warning = nullptr);
std::size_t paraphrase_capacity(const PromptRecord& prompt);

// Paraphrases of every original prompt in the manifest, grouped by parent.
std::vector<PromptRecord> paraphrase_all(const DatasetManifest& manifest, int k, std::uint64_t seed);

enum class Strategy { add, substitute, replace };
std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view s);

// add: originals + paraphrases. substitute: exactly round(fraction * n)
// originals swapped for their first paraphrase. replace: paraphrases only.
// Image links follow the prompt table.
DatasetManifest augment(const DatasetManifest& manifest, const std::vector<PromptRecord>& paraphrases,
                        Strategy strategy, double fraction, std::uint64_t seed);

}  // namespace msdm::synth
