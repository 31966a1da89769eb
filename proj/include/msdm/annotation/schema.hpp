#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace msdm::annotation {

inline constexpr std::size_t kAspectCount = 6;
inline constexpr std::array<std::string_view, kAspectCount> kAspects = {
    "clinical_realism", "prompt_faithfulness", "detectability", "color_contrast", "intra_set_diversity", "confidence_of_use"};
inline constexpr int kMinScore = 0;
inline constexpr int kMaxScore = 10;

inline constexpr std::array<std::string_view, 3> kSetLabels = {"A", "B", "C"};
// Candidates ranked in a global preference: the three sets plus the real images.
inline constexpr std::array<std::string_view, 4> kCandidates = {"A", "B", "C", "real"};
inline constexpr std::string_view kRealModelId = "real";

// One de-anonymised export line. Real-image rows carry no scores.
struct ExportRow {
  std::string task_id;
  std::string prompt_kind;
  std::string model_id;
  std::optional<std::array<int, kAspectCount>> scores;
  int rank = 0;
};

// task_id,prompt_kind,model_id,<six aspects>,rank
std::string export_header();

}  // namespace msdm::annotation
