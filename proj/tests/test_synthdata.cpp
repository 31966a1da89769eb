#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "msdm/errors.hpp"
#include "msdm/manifest_io.hpp"
#include "msdm/synthdata.hpp"

using namespace msdm;
using namespace msdm::synth;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("msdm_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::size_t pixel_diff(const Image& a, const Image& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.rgb.size(); i += 3)
    if (a.rgb[i] != b.rgb[i] || a.rgb[i + 1] != b.rgb[i + 1] || a.rgb[i + 2] != b.rgb[i + 2]) ++n;
  return n;
}

}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("prompt templates") {
    const SceneAttributes polyp{Finding::polyp, 1, Modality::endo, Hue::pink};
    CHECK(render_prompt_text(polyp, 0) == "generate an image containing a polyp");
    CHECK(render_prompt_text(polyp, 3) == render_prompt_text(polyp, 3));
    const SceneAttributes tool{Finding::instrument, 1, Modality::endo, Hue::pink};
    CHECK(render_prompt_text(tool, 0).find("forceps") != std::string::npos);
    CHECK_THROWS_AS(render_prompt_text(polyp, kTemplateCount), ConfigError);
    CHECK_THROWS_AS(render_prompt_text(polyp, -1), ConfigError);
    CHECK_THROWS_AS((SceneAttributes{Finding::clean, 1, Modality::endo, Hue::pink}.validate()), ConfigError);
    CHECK_THROWS_AS((SceneAttributes{Finding::polyp, 0, Modality::endo, Hue::pink}.validate()), ConfigError);
  }

  TEST_CASE("scenes: clean has no rim, counts are visible, bytes are deterministic") {
    for (std::uint64_t s = 0; s < 50; ++s) {
      for (auto m : {Modality::endo, Modality::xray}) {
        const auto img = render_scene({Finding::clean, 0, m, Hue::amber}, s);
        CHECK(count_color(img, kEndoRim) == 0);
        CHECK(count_color(img, kXrayRim) == 0);
        CHECK(count_color(img, kInstrumentBody) == 0);
      }
      CHECK(count_color(render_scene({Finding::polyp, 1, Modality::endo, Hue::pink}, s), kEndoRim) > 0);
      CHECK(count_color(render_scene({Finding::instrument, 1, Modality::endo, Hue::pink}, s), kInstrumentBody) > 0);
    }
    double total = 0.0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      total += static_cast<double>(pixel_diff(render_scene({Finding::polyp, 2, Modality::endo, Hue::pink}, s),
                                              render_scene({Finding::polyp, 1, Modality::endo, Hue::pink}, s)));
    }
    CHECK(total / 100.0 >= 40.0);
    const SceneAttributes a{Finding::polyp, 3, Modality::xray, Hue::crimson};
    CHECK(encode_png(render_scene(a, 9)) == encode_png(render_scene(a, 9)));
    CHECK(render_scene(a, 9).width == 32);
  }

  TEST_CASE("PNG round trip is bit-exact") {
    const auto img = render_scene({Finding::instrument, 2, Modality::endo, Hue::amber}, 4, 48);
    CHECK(decode_png(encode_png(img)) == img);
    CHECK_THROWS_AS(decode_png({1, 2, 3}), IoError);
  }

  TEST_CASE("dataset structure and split") {
    const auto m = build_dataset(200, 11);
    CHECK(m.images.size() == 200);
    for (const auto& img : m.images) {
      CHECK(img.prompt_ids.size() >= 7);
      CHECK(img.prompt_ids.size() <= 14);
      std::set<std::string> distinct(img.prompt_ids.begin(), img.prompt_ids.end());
      CHECK(distinct.size() == img.prompt_ids.size());
      for (const auto& pid : img.prompt_ids) CHECK(m.prompt(pid).attrs == img.attrs);
    }
    const auto s = split_holdout(m, 0.10, 3);
    CHECK(s.validation_ids.size() == 20);
    CHECK(s.train_ids.size() == 180);
    std::set<std::string> train(s.train_ids.begin(), s.train_ids.end());
    for (const auto& v : s.validation_ids) CHECK(train.count(v) == 0);
    for (const auto& pid : s.validation_prompt_ids) {
      for (const auto& img : s.images) {
        if (std::find(img.prompt_ids.begin(), img.prompt_ids.end(), pid) != img.prompt_ids.end()) {
          CHECK(train.count(img.id) == 0);
        }
      }
    }
    const auto again = split_holdout(m, 0.10, 3);
    CHECK(again.validation_ids == s.validation_ids);
    CHECK(split_holdout(build_dataset(2000, 11), 0.10, 3).validation_ids.size() == 200);
    CHECK_THROWS_AS(split_holdout(m, 0.0, 3), ConfigError);
  }

  TEST_CASE("paraphrases preserve attributes and are distinct") {
    const auto p = render_prompt({Finding::polyp, 1, Modality::endo, Hue::pink}, 0, "p0");
    const auto out = paraphrase(p, 5, 2);
    REQUIRE(out.size() == 5);
    std::set<std::string> texts;
    for (const auto& r : out) {
      CHECK(r.text != p.text);
      CHECK(r.attrs == p.attrs);
      CHECK(r.origin == Origin::paraphrase);
      CHECK(r.parent_id == std::optional<std::string>("p0"));
      texts.insert(r.text);
    }
    CHECK(texts.size() == 5);
    CHECK(paraphrase(p, 5, 2)[0].text == out[0].text);
    std::string warning;
    const auto capped = paraphrase(p, 100000, 2, &warning);
    CHECK(capped.size() == paraphrase_capacity(p));
    CHECK_FALSE(warning.empty());
    CHECK_THROWS_AS(paraphrase(p, 0, 2), ConfigError);
  }

  TEST_CASE("483 base prompts times 23 rewrites exceed 11,000 unique texts") {
    std::vector<PromptRecord> base;
    std::set<std::string> seen;
    for (const auto& attrs : attribute_grammar({Modality::endo, Modality::xray}, {Hue::pink, Hue::amber, Hue::crimson, Hue::teal})) {
      for (int t = 0; t < kTemplateCount && base.size() < 483; ++t) {
        const auto r = render_prompt(attrs, t, "b" + std::to_string(base.size()));
        if (seen.insert(r.text).second) base.push_back(r);
      }
    }
    REQUIRE(base.size() == 483);
    std::set<std::string> all(seen);
    for (const auto& b : base)
      for (const auto& r : paraphrase(b, 23, 5)) all.insert(r.text);
    INFO("unique texts " << all.size());
    CHECK(all.size() > 11000);
  }

  TEST_CASE("augmentation cardinalities") {
    const auto m = split_holdout(build_dataset(200, 21), 0.10, 1);
    const auto para = paraphrase_all(m, 2, 4);
    std::size_t n_orig = 0;
    for (const auto& p : m.prompts) n_orig += p.origin == Origin::original;
    const auto add = augment(m, para, Strategy::add, 0.5, 1);
    CHECK(add.prompts.size() == m.prompts.size() + para.size());
    const auto rep = augment(m, para, Strategy::replace, 0.5, 1);
    CHECK(rep.prompts.size() == para.size());
    for (const auto& p : rep.prompts) CHECK(p.origin == Origin::paraphrase);
    const auto sub = augment(m, para, Strategy::substitute, 0.5, 1);
    CHECK(sub.prompts.size() == n_orig);
    for (const auto& p : para) {
      REQUIRE(p.parent_id);
      CHECK(p.attrs == m.prompt(*p.parent_id).attrs);
    }
    for (const auto* aug : {&add, &rep, &sub}) {
      for (const auto& img : aug->images) {
        CHECK_FALSE(img.prompt_ids.empty());
        for (const auto& pid : img.prompt_ids) CHECK(aug->prompt(pid).attrs == img.attrs);
      }
    }
    CHECK_THROWS_AS(augment(m, para, Strategy::substitute, 1.5, 1), ConfigError);
  }

  TEST_CASE("substitute swaps exactly half of 100 originals") {
    DatasetManifest m;
    std::vector<PromptRecord> para;
    const SceneAttributes a{Finding::polyp, 1, Modality::endo, Hue::pink};
    for (int i = 0; i < 100; ++i) {
      const auto p = render_prompt(a, i % kTemplateCount, "p" + std::to_string(i));
      m.prompts.push_back(p);
      para.push_back(paraphrase(p, 1, 3)[0]);
    }
    const auto sub = augment(m, para, Strategy::substitute, 0.5, 7);
    std::size_t swapped = 0;
    for (const auto& p : sub.prompts) swapped += p.origin == Origin::paraphrase;
    CHECK(sub.prompts.size() == 100);
    CHECK(swapped == 50);
  }

  TEST_CASE("manifest files round trip") {
    const auto m = split_holdout(build_dataset(40, 8), 0.10, 2);
    const auto dir = scratch_dir("manifest");
    write_manifest(dir, m);
    const auto back = read_manifest(dir);
    CHECK(back.images.size() == m.images.size());
    CHECK(back.validation_ids == m.validation_ids);
    CHECK(back.validation_prompt_ids == m.validation_prompt_ids);
    for (std::size_t i = 0; i < m.images.size(); ++i) {
      CHECK(back.images[i].pixels == m.images[i].pixels);
      CHECK(back.images[i].prompt_ids == m.images[i].prompt_ids);
    }
    for (std::size_t i = 0; i < m.prompts.size(); ++i) CHECK(back.prompts[i].text == m.prompts[i].text);
    const auto dir2 = scratch_dir("manifest2");
    write_manifest(dir2, m);
    CHECK(read_file_bytes(dir / "prompts.jsonl") == read_file_bytes(dir2 / "prompts.jsonl"));
    CHECK(read_file_bytes(dir / "images.jsonl") == read_file_bytes(dir2 / "images.jsonl"));
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
  }
}
