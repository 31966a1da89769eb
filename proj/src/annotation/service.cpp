#include "msdm/annotation/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "msdm/errors.hpp"
#include "msdm/rng.hpp"

namespace msdm::annotation {

using nlohmann::json;

namespace {

std::string opaque_id(std::uint64_t seed, const std::string& slot) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(mix_seed(seed, hash_string(slot))));
  return buf;
}

std::string task_id_for(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "t%02zu", index);
  return buf;
}

std::string now_iso8601() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json error_body(const std::string& kind, const std::string& message) { return {{"error", kind}, {"message", message}}; }

Response json_response(int status, const json& body) { return {status, "application/json", body.dump()}; }

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json scores_json(const RatingRecord& r) {
  json s = json::object();
  for (std::size_t l = 0; l < 3; ++l) {
    json aspects = json::object();
    for (std::size_t a = 0; a < kAspectCount; ++a) aspects[std::string(kAspects[a])] = r.scores[l][a];
    s[std::string(kSetLabels[l])] = aspects;
  }
  return s;
}

json preference_json(const RatingRecord& r) {
  json g = json::object();
  for (std::size_t c = 0; c < kCandidates.size(); ++c) g[std::string(kCandidates[c])] = r.global_preference[c];
  return g;
}

}  // namespace

TaskStore build_tasks(const TaskBuildInput& in) {
  if (in.task_count == 0) throw ConfigError("build_tasks: task_count must be positive");
  if (in.prompts.size() < in.task_count) {
    throw ConfigError("build_tasks: need " + std::to_string(in.task_count) + " prompts, got " +
                      std::to_string(in.prompts.size()));
  }
  if (in.models.size() != 3) throw ConfigError("build_tasks: exactly three models are required");
  if (in.references.size() < in.reference_count) throw ConfigError("build_tasks: not enough reference images");
  for (std::size_t i = 0; i < in.task_count; ++i) {
    const char* want = i % 2 == 0 ? "original" : "rephrased";
    if (in.prompts[i].kind != want) {
      throw ConfigError("build_tasks: prompt " + std::to_string(i) + " must be " + want);
    }
  }
  std::set<std::string> model_ids;
  for (const auto& m : in.models) {
    if (m.model_id.empty() || m.model_id == kRealModelId) throw ConfigError("build_tasks: invalid model id");
    if (!model_ids.insert(m.model_id).second) throw ConfigError("build_tasks: duplicate model id " + m.model_id);
    if (m.per_prompt.size() < in.task_count) throw ConfigError("build_tasks: model " + m.model_id + " lacks prompts");
    for (std::size_t i = 0; i < in.task_count; ++i) {
      if (m.per_prompt[i].size() < in.images_per_set) {
        throw ConfigError("build_tasks: model " + m.model_id + " has too few images for prompt " + in.prompts[i].id);
      }
    }
  }

  TaskStore store;
  const Rng root(mix_seed(in.seed, hash_string("annotation")));
  const auto put = [&](const std::string& slot, const Image& img) {
    const std::string id = opaque_id(in.seed, slot);
    if (!store.images.emplace(id, img).second) throw ContractError("build_tasks: opaque id collision");
    return id;
  };
  for (std::size_t i = 0; i < in.task_count; ++i) {
    AnnotationTask t;
    t.index = i;
    t.id = task_id_for(i);
    t.prompt_id = in.prompts[i].id;
    t.prompt_text = in.prompts[i].text;
    t.prompt_kind = in.prompts[i].kind;

    Rng rng = root.fork(t.id);
    std::vector<std::size_t> order = {0, 1, 2};
    shuffle(order, rng);
    std::array<std::string, 3> labels;
    for (std::size_t l = 0; l < 3; ++l) {
      const auto& model = in.models[order[l]];
      labels[l] = model.model_id;
      for (std::size_t k = 0; k < in.images_per_set; ++k) {
        t.sets[l].push_back(put(t.id + "/set" + std::to_string(l) + "/" + std::to_string(k), model.per_prompt[i][k]));
      }
    }
    std::vector<std::size_t> refs(in.references.size());
    for (std::size_t k = 0; k < refs.size(); ++k) refs[k] = k;
    shuffle(refs, rng);
    for (std::size_t k = 0; k < in.reference_count; ++k) {
      t.reference_images.push_back(put(t.id + "/ref/" + std::to_string(k), in.references[refs[k]]));
    }
    store.permutation[t.id] = labels;
    store.tasks.push_back(std::move(t));
  }
  return store;
}

void write_task_store(const std::filesystem::path& dir, const TaskStore& store) {
  std::filesystem::create_directories(dir / "images");
  json tasks = json::array();
  for (const auto& t : store.tasks) {
    json sets = json::object();
    for (std::size_t l = 0; l < 3; ++l) sets[std::string(kSetLabels[l])] = t.sets[l];
    tasks.push_back({{"id", t.id},
                     {"index", t.index},
                     {"prompt_id", t.prompt_id},
                     {"prompt_text", t.prompt_text},
                     {"prompt_kind", t.prompt_kind},
                     {"reference_images", t.reference_images},
                     {"sets", sets}});
  }
  json perm = json::object();
  for (const auto& [task, labels] : store.permutation) {
    json m = json::object();
    for (std::size_t l = 0; l < 3; ++l) m[std::string(kSetLabels[l])] = labels[l];
    perm[task] = m;
  }
  std::ofstream(dir / "tasks.json") << json{{"tasks", tasks}}.dump(1) << '\n';
  std::ofstream(dir / "permutation.json") << perm.dump(1) << '\n';
  for (const auto& [id, img] : store.images) write_png(dir / "images" / (id + ".png"), img);
}

std::vector<ValidationIssue> validate_rating_json(const std::string& body, RatingRecord* out) {
  std::vector<ValidationIssue> issues;
  const auto issue = [&](std::string field, std::string msg) { issues.push_back({std::move(field), std::move(msg)}); };
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception&) {
    issue("", "body is not valid JSON");
    return issues;
  }
  if (!j.is_object()) {
    issue("", "body must be a JSON object");
    return issues;
  }
  RatingRecord r;
  static const std::set<std::string> allowed = {"task_id", "annotator_id", "scores", "global_preference", "timestamp"};
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) issue(k, "unknown field");
  }
  const auto string_field = [&](const char* key, std::string& dst, bool required) {
    if (!j.contains(key)) {
      if (required) issue(key, "missing");
      return;
    }
    if (!j[key].is_string() || j[key].get<std::string>().empty()) {
      issue(key, "must be a non-empty string");
      return;
    }
    dst = j[key].get<std::string>();
    if (dst.size() > 256) issue(key, "longer than 256 characters");
  };
  string_field("task_id", r.task_id, true);
  string_field("annotator_id", r.annotator_id, true);
  string_field("timestamp", r.timestamp, false);

  const auto score_ok = [](const json& v) {
    return v.is_number_integer() && v.get<long long>() >= kMinScore && v.get<long long>() <= kMaxScore;
  };
  if (!j.contains("scores") || !j["scores"].is_object()) {
    issue("scores", "missing or not an object");
  } else {
    const auto& s = j["scores"];
    for (const auto& [k, _] : s.items()) {
      if (std::find(kSetLabels.begin(), kSetLabels.end(), k) == kSetLabels.end()) issue("scores." + k, "unknown set label");
    }
    for (std::size_t l = 0; l < 3; ++l) {
      const std::string label(kSetLabels[l]);
      if (!s.contains(label) || !s[label].is_object()) {
        issue("scores." + label, "missing or not an object");
        continue;
      }
      const auto& set = s[label];
      for (const auto& [k, _] : set.items()) {
        if (std::find(kAspects.begin(), kAspects.end(), k) == kAspects.end()) issue("scores." + label + "." + k, "unknown aspect");
      }
      for (std::size_t a = 0; a < kAspectCount; ++a) {
        const std::string aspect(kAspects[a]);
        const std::string field = "scores." + label + "." + aspect;
        if (!set.contains(aspect)) {
          issue(field, "missing");
        } else if (!score_ok(set[aspect])) {
          issue(field, "must be an integer in 0..10");
        } else {
          r.scores[l][a] = set[aspect].get<int>();
        }
      }
    }
  }

  if (!j.contains("global_preference") || !j["global_preference"].is_object()) {
    issue("global_preference", "missing or not an object");
  } else {
    const auto& g = j["global_preference"];
    bool complete = true;
    for (const auto& [k, _] : g.items()) {
      if (std::find(kCandidates.begin(), kCandidates.end(), k) == kCandidates.end()) {
        issue("global_preference." + k, "unknown candidate");
        complete = false;
      }
    }
    for (std::size_t c = 0; c < kCandidates.size(); ++c) {
      const std::string key(kCandidates[c]);
      if (!g.contains(key)) {
        issue("global_preference." + key, "missing");
        complete = false;
      } else if (!g[key].is_number_integer() || g[key].get<long long>() < 1 || g[key].get<long long>() > 4) {
        issue("global_preference." + key, "must be an integer rank in 1..4");
        complete = false;
      } else {
        r.global_preference[c] = g[key].get<int>();
      }
    }
    if (complete) {
      auto sorted = r.global_preference;
      std::sort(sorted.begin(), sorted.end());
      if (sorted != std::array<int, 4>{1, 2, 3, 4}) issue("global_preference", "ranks must be a permutation of 1..4");
    }
  }
  if (issues.empty() && out) *out = r;
  return issues;
}

AnnotationService::AnnotationService(std::filesystem::path data_dir) : dir_(std::move(data_dir)) {
  try {
    const json tasks = json::parse(read_text(dir_ / "tasks.json"));
    for (const auto& t : tasks.at("tasks")) {
      AnnotationTask a;
      a.id = t.at("id").get<std::string>();
      a.index = t.at("index").get<std::size_t>();
      a.prompt_id = t.at("prompt_id").get<std::string>();
      a.prompt_text = t.at("prompt_text").get<std::string>();
      a.prompt_kind = t.at("prompt_kind").get<std::string>();
      a.reference_images = t.at("reference_images").get<std::vector<std::string>>();
      for (std::size_t l = 0; l < 3; ++l) a.sets[l] = t.at("sets").at(std::string(kSetLabels[l])).get<std::vector<std::string>>();
      task_index_[a.id] = tasks_.size();
      tasks_.push_back(std::move(a));
    }
    const json perm = json::parse(read_text(dir_ / "permutation.json"));
    for (const auto& [task, m] : perm.items()) {
      std::array<std::string, 3> labels;
      for (std::size_t l = 0; l < 3; ++l) labels[l] = m.at(std::string(kSetLabels[l])).get<std::string>();
      permutation_[task] = labels;
    }
  } catch (const json::exception& e) {
    throw IoError("annotation data: " + std::string(e.what()));
  }
  for (const auto& t : tasks_) {
    if (!permutation_.count(t.id)) throw IoError("annotation data: no permutation for task " + t.id);
  }

  const auto log = dir_ / "ratings.jsonl";
  if (!std::filesystem::exists(log)) return;
  std::string text = read_text(log);
  // A record cut short by a crash has no trailing newline; drop it so the
  // next append starts on a fresh line.
  const std::size_t keep = text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1;
  if (keep != text.size()) {
    warnings_.push_back("dropped a truncated trailing record from ratings.jsonl");
    std::filesystem::resize_file(log, keep);
    text.resize(keep);
  }
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      StoredRating s;
      s.version = j.at("version").get<std::uint64_t>();
      s.revision = j.at("revision").get<std::uint64_t>();
      json record = j;
      record.erase("version");
      record.erase("revision");
      const auto issues = validate_rating_json(record.dump(), &s.record);
      if (!issues.empty()) throw IoError(issues.front().field + ": " + issues.front().message);
      apply(std::move(s));
    } catch (const std::exception& e) {
      warnings_.push_back("ratings.jsonl line " + std::to_string(n) + " skipped: " + e.what());
    }
  }
}

void AnnotationService::apply(StoredRating r) {
  next_version_ = std::max(next_version_, r.version + 1);
  latest_[{r.record.task_id, r.record.annotator_id}] = std::move(r);
}

std::size_t AnnotationService::rating_count() const {
  std::shared_lock lock(state_mutex_);
  return latest_.size();
}

Response AnnotationService::list_tasks() const {
  json out = json::array();
  for (const auto& t : tasks_) {
    out.push_back({{"id", t.id}, {"index", t.index}, {"prompt_kind", t.prompt_kind}, {"prompt_text", t.prompt_text}});
  }
  return json_response(200, {{"tasks", out}});
}

Response AnnotationService::get_task(const std::string& id) const {
  const auto it = task_index_.find(id);
  if (it == task_index_.end()) return json_response(404, error_body("not_found", "unknown task " + id));
  const auto& t = tasks_[it->second];
  const auto urls = [](const std::vector<std::string>& ids) {
    json a = json::array();
    for (const auto& i : ids) a.push_back({{"id", i}, {"url", "/images/" + i}});
    return a;
  };
  json sets = json::array();
  for (std::size_t l = 0; l < 3; ++l) sets.push_back({{"label", kSetLabels[l]}, {"images", urls(t.sets[l])}});
  json aspects = json::array();
  for (auto a : kAspects) aspects.push_back(a);
  return json_response(200, {{"id", t.id},
                             {"index", t.index},
                             {"prompt_id", t.prompt_id},
                             {"prompt_text", t.prompt_text},
                             {"prompt_kind", t.prompt_kind},
                             {"reference_images", urls(t.reference_images)},
                             {"sets", sets},
                             {"aspects", aspects},
                             {"score_range", {kMinScore, kMaxScore}},
                             {"candidates", kCandidates}});
}

Response AnnotationService::get_image(const std::string& id) const {
  const bool well_formed = id.size() == 16 && std::all_of(id.begin(), id.end(), [](char c) {
                             return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
                           });
  const auto path = dir_ / "images" / (id + ".png");
  if (!well_formed || !std::filesystem::exists(path)) return json_response(404, error_body("not_found", "unknown image"));
  const auto bytes = read_file_bytes(path);
  return {200, "image/png", std::string(bytes.begin(), bytes.end())};
}

Response AnnotationService::submit_rating(const std::string& body) {
  RatingRecord r;
  const auto issues = validate_rating_json(body, &r);
  if (!issues.empty()) {
    if (issues.front().field.empty()) return json_response(400, error_body("bad_request", issues.front().message));
    json list = json::array();
    for (const auto& i : issues) list.push_back({{"field", i.field}, {"message", i.message}});
    return json_response(422, {{"error", "validation"}, {"issues", list}});
  }
  if (!task_index_.count(r.task_id)) return json_response(404, error_body("not_found", "unknown task " + r.task_id));
  if (r.timestamp.empty()) r.timestamp = now_iso8601();

  std::lock_guard write_lock(write_mutex_);
  StoredRating s;
  s.record = r;
  {
    std::shared_lock lock(state_mutex_);
    s.version = next_version_;
    const auto it = latest_.find({r.task_id, r.annotator_id});
    s.revision = it == latest_.end() ? 1 : it->second.revision + 1;
  }
  json line = {{"version", s.version},     {"revision", s.revision},     {"task_id", r.task_id},
               {"annotator_id", r.annotator_id}, {"scores", scores_json(r)}, {"global_preference", preference_json(r)},
               {"timestamp", r.timestamp}};
  const std::string bytes = line.dump() + "\n";
  const auto path = dir_ / "ratings.jsonl";
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) return json_response(500, error_body("storage", std::strerror(errno)));
  std::size_t written = 0;
  while (written < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + written, bytes.size() - written);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      ::close(fd);
      return json_response(500, error_body("storage", "write failed"));
    }
    written += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (!synced) return json_response(500, error_body("storage", "fsync failed"));
  {
    std::unique_lock lock(state_mutex_);
    apply(s);
  }
  char id[32];
  std::snprintf(id, sizeof id, "r%06llu", static_cast<unsigned long long>(s.version));
  return json_response(200, {{"id", id}, {"version", s.version}, {"revision", s.revision}});
}

std::vector<StoredRating> AnnotationService::current(const std::optional<std::string>& annotator) const {
  std::vector<StoredRating> out;
  {
    std::shared_lock lock(state_mutex_);
    for (const auto& [key, r] : latest_) {
      if (!annotator || key.second == *annotator) out.push_back(r);
    }
  }
  std::sort(out.begin(), out.end(), [&](const StoredRating& a, const StoredRating& b) {
    const auto ia = task_index_.at(a.record.task_id), ib = task_index_.at(b.record.task_id);
    return ia != ib ? ia < ib : a.record.annotator_id < b.record.annotator_id;
  });
  return out;
}

Response AnnotationService::export_csv(const std::optional<std::string>& annotator) const {
  std::ostringstream os;
  os << export_header() << '\n';
  for (const auto& s : current(annotator)) {
    const auto& r = s.record;
    const auto& task = tasks_[task_index_.at(r.task_id)];
    const auto& labels = permutation_.at(r.task_id);
    for (std::size_t l = 0; l < 3; ++l) {
      os << r.task_id << ',' << task.prompt_kind << ',' << labels[l];
      for (int v : r.scores[l]) os << ',' << v;
      os << ',' << r.global_preference[l] << '\n';
    }
    os << r.task_id << ',' << task.prompt_kind << ',' << kRealModelId;
    for (std::size_t a = 0; a < kAspectCount; ++a) os << ',';
    os << ',' << r.global_preference[3] << '\n';
  }
  return {200, "text/csv", os.str()};
}

Response AnnotationService::export_summary(const std::optional<std::string>& annotator) const {
  struct Acc {
    std::array<double, kAspectCount> sum{};
    double rank_sum = 0.0;
    std::size_t n = 0;
  };
  std::map<std::string, Acc> acc;
  const auto ratings = current(annotator);
  for (const auto& s : ratings) {
    const auto& labels = permutation_.at(s.record.task_id);
    for (std::size_t l = 0; l < 3; ++l) {
      auto& a = acc[labels[l]];
      for (std::size_t k = 0; k < kAspectCount; ++k) a.sum[k] += s.record.scores[l][k];
      a.rank_sum += s.record.global_preference[l];
      ++a.n;
    }
    auto& real = acc[std::string(kRealModelId)];
    real.rank_sum += s.record.global_preference[3];
    ++real.n;
  }
  json models = json::object();
  for (const auto& [model, a] : acc) {
    json m = {{"n", a.n}, {"mean_rank", a.rank_sum / static_cast<double>(a.n)}};
    if (model != kRealModelId) {
      json aspects = json::object();
      for (std::size_t k = 0; k < kAspectCount; ++k) aspects[std::string(kAspects[k])] = a.sum[k] / static_cast<double>(a.n);
      m["aspect_means"] = aspects;
    }
    models[model] = m;
  }
  json out = {{"ratings", ratings.size()}, {"tasks", tasks_.size()}, {"models", models}};
  if (annotator) out["annotator"] = *annotator;
  return json_response(200, out);
}

}  // namespace msdm::annotation
