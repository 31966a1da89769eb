#include "msdm/manifest_io.hpp"

#include <fstream>
#include "json.hpp"

#include "msdm/errors.hpp"

namespace msdm::synth {

using nlohmann::json;

namespace {

json attrs_json(const SceneAttributes& a) {
  return {{"finding", to_string(a.finding)}, {"count", a.count}, {"modality", to_string(a.modality)},
          {"hue", to_string(a.hue)}};
}

SceneAttributes attrs_from(const json& j) {
  SceneAttributes a;
  a.finding = parse_finding(j.at("finding").get<std::string>());
  a.count = j.at("count").get<int>();
  a.modality = parse_modality(j.at("modality").get<std::string>());
  a.hue = parse_hue(j.at("hue").get<std::string>());
  a.validate();
  return a;
}

json prompt_json(const PromptRecord& p) {
  return {{"id", p.id},
          {"text", p.text},
          {"attrs", attrs_json(p.attrs)},
          {"origin", p.origin == Origin::original ? "original" : "paraphrase"},
          {"parent_id", p.parent_id ? json(*p.parent_id) : json(nullptr)},
          {"template", p.template_id}};
}

PromptRecord prompt_from(const json& j) {
  PromptRecord p;
  p.id = j.at("id").get<std::string>();
  p.text = j.at("text").get<std::string>();
  p.attrs = attrs_from(j.at("attrs"));
  const auto origin = j.at("origin").get<std::string>();
  if (origin != "original" && origin != "paraphrase") throw IoError("prompt " + p.id + ": bad origin '" + origin + "'");
  p.origin = origin == "original" ? Origin::original : Origin::paraphrase;
  if (j.contains("parent_id") && !j.at("parent_id").is_null()) p.parent_id = j.at("parent_id").get<std::string>();
  p.template_id = j.value("template", 0);
  return p;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

template <class Fn>
void for_each_line(const std::filesystem::path& path, Fn fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      fn(json::parse(line));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

}  // namespace

void write_prompts_jsonl(const std::filesystem::path& path, const std::vector<PromptRecord>& prompts) {
  auto out = open_out(path);
  for (const auto& p : prompts) out << prompt_json(p).dump() << '\n';
}

std::vector<PromptRecord> read_prompts_jsonl(const std::filesystem::path& path) {
  std::vector<PromptRecord> out;
  for_each_line(path, [&](const json& j) { out.push_back(prompt_from(j)); });
  return out;
}

void write_manifest(const std::filesystem::path& dir, const DatasetManifest& m) {
  std::filesystem::create_directories(dir / "images");
  write_prompts_jsonl(dir / "prompts.jsonl", m.prompts);
  auto images = open_out(dir / "images.jsonl");
  for (const auto& im : m.images) {
    const std::string file = "images/" + im.id + ".png";
    write_png(dir / file, im.pixels);
    images << json{{"id", im.id},
                   {"file", file},
                   {"attrs", attrs_json(im.attrs)},
                   {"prompt_ids", im.prompt_ids},
                   {"seed", im.seed}}
                  .dump()
           << '\n';
  }
  auto split = open_out(dir / "split.json");
  split << json{{"train", m.train_ids},
                {"validation", m.validation_ids},
                {"validation_prompts", m.validation_prompt_ids},
                {"root_seed", m.root_seed},
                {"holdout_fraction", m.holdout_fraction},
                {"strategy", m.strategy}}
               .dump(2)
        << '\n';
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  DatasetManifest m;
  m.prompts = read_prompts_jsonl(dir / "prompts.jsonl");
  for_each_line(dir / "images.jsonl", [&](const json& j) {
    ImageSample s;
    s.id = j.at("id").get<std::string>();
    s.attrs = attrs_from(j.at("attrs"));
    s.prompt_ids = j.at("prompt_ids").get<std::vector<std::string>>();
    s.seed = j.value("seed", std::uint64_t{0});
    s.pixels = read_png(dir / j.at("file").get<std::string>());
    m.images.push_back(std::move(s));
  });
  std::ifstream in(dir / "split.json");
  if (!in) throw IoError("cannot open " + (dir / "split.json").string());
  try {
    const json s = json::parse(in);
    m.train_ids = s.at("train").get<std::vector<std::string>>();
    m.validation_ids = s.at("validation").get<std::vector<std::string>>();
    m.validation_prompt_ids = s.at("validation_prompts").get<std::vector<std::string>>();
    m.root_seed = s.at("root_seed").get<std::uint64_t>();
    m.holdout_fraction = s.at("holdout_fraction").get<double>();
    m.strategy = s.at("strategy").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError("split.json: " + std::string(e.what()));
  }
  return m;
}

}  // namespace msdm::synth
