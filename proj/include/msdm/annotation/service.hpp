#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "msdm/annotation/schema.hpp"
#include "msdm/image.hpp"

namespace msdm::annotation {

/// Blinded task as served: image ids are opaque and sets carry only labels.
struct AnnotationTask {
  std::string id;
  std::size_t index = 0;
  std::string prompt_id;
  std::string prompt_text;
  std::string prompt_kind;  // "original" (even index) or "rephrased" (odd index)
  std::vector<std::string> reference_images;
  std::array<std::vector<std::string>, 3> sets;  // A, B, C
};

// Server-side only: which model produced each labelled set.
using Permutation = std::map<std::string, std::array<std::string, 3>>;

struct TaskPrompt {
  std::string id;
  std::string text;
  std::string kind;
};

struct ModelOutputs {
  std::string model_id;
  std::vector<std::vector<Image>> per_prompt;  // parallel to the prompt list
};

struct TaskBuildInput {
  std::vector<TaskPrompt> prompts;  // alternating original / rephrased
  std::vector<ModelOutputs> models;  // exactly three
  std::vector<Image> references;     // real validation images
  std::size_t task_count = 40;
  std::size_t images_per_set = 10;
  std::size_t reference_count = 4;
  std::uint64_t seed = 0;
};

struct TaskStore {
  std::vector<AnnotationTask> tasks;
  Permutation permutation;
  std::map<std::string, Image> images;
};

// Throws ConfigError when prompts, models or images are insufficient or the
// prompt kinds do not alternate original/rephrased starting at index 0.
TaskStore build_tasks(const TaskBuildInput& input);

// tasks.json, permutation.json, images/<id>.png
void write_task_store(const std::filesystem::path& dir, const TaskStore& store);

struct RatingRecord {
  std::string task_id;
  std::string annotator_id;
  std::array<std::array<int, kAspectCount>, 3> scores{};  // [set][aspect]
  std::array<int, 4> global_preference{};                 // A, B, C, real
  std::string timestamp;
};

struct ValidationIssue {
  std::string field;
  std::string message;
};

// Schema, bounds and permutation checks. An empty result means valid.
std::vector<ValidationIssue> validate_rating_json(const std::string& body, RatingRecord* out);

struct StoredRating {
  RatingRecord record;
  std::uint64_t version = 0;   // monotonically increasing across the log
  std::uint64_t revision = 0;  // 1 for the first rating of (task, annotator)
};

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

class AnnotationService {
 public:
  // Loads tasks.json and permutation.json and replays ratings.jsonl.
  explicit AnnotationService(std::filesystem::path data_dir);

  Response list_tasks() const;
  Response get_task(const std::string& id) const;
  Response get_image(const std::string& id) const;
  Response submit_rating(const std::string& body);
  Response export_csv(const std::optional<std::string>& annotator) const;
  Response export_summary(const std::optional<std::string>& annotator) const;

  std::size_t task_count() const { return tasks_.size(); }
  std::size_t rating_count() const;
  std::vector<std::string> load_warnings() const { return warnings_; }

 private:
  std::vector<StoredRating> current(const std::optional<std::string>& annotator) const;
  void apply(StoredRating r);

  std::filesystem::path dir_;
  std::vector<AnnotationTask> tasks_;
  std::map<std::string, std::size_t> task_index_;
  Permutation permutation_;
  std::vector<std::string> warnings_;

  mutable std::shared_mutex state_mutex_;
  std::mutex write_mutex_;
  std::map<std::pair<std::string, std::string>, StoredRating> latest_;  // (task, annotator)
  std::uint64_t next_version_ = 1;
};

}  // namespace msdm::annotation
