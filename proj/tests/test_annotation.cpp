#include <fstream>
#include <map>
#include <set>

// Eigen ahead of httplib: <resolv.h> defines a _res macro that clashes with
// Eigen parameter names.
#include "msdm/harness/correlate.hpp"

#include "annotation_fixture.hpp"
#include "doctest.h"
#include "msdm/errors.hpp"

using namespace msdm;
using namespace msdm::annotation;
using nlohmann::json;

namespace {

bool mentions_model(const std::string& body) {
  for (const auto& m : test::kFixtureModels)
    if (body.find(m) != std::string::npos) return true;
  return body.find("model_id") != std::string::npos;
}

}  // namespace

TEST_SUITE("annotation") {
  TEST_CASE("task construction: parity, permutations, errors") {
    const auto store = build_tasks(test::fixture_input(5));
    REQUIRE(store.tasks.size() == 40);
    std::size_t originals = 0;
    for (const auto& t : store.tasks) {
      CHECK(t.prompt_kind == (t.index % 2 ? "rephrased" : "original"));
      originals += t.prompt_kind == "original";
      for (const auto& s : t.sets) CHECK(s.size() == 10);
      CHECK(t.reference_images.size() == 4);
      const auto& perm = store.permutation.at(t.id);
      CHECK(std::set<std::string>(perm.begin(), perm.end()) ==
            std::set<std::string>(test::kFixtureModels.begin(), test::kFixtureModels.end()));
    }
    CHECK(originals == 20);
    CHECK(build_tasks(test::fixture_input(5)).permutation == store.permutation);
    CHECK(build_tasks(test::fixture_input(6)).permutation != store.permutation);

    auto few = test::fixture_input(5);
    few.prompts.resize(39);
    CHECK_THROWS_AS(build_tasks(few), ConfigError);
    auto two = test::fixture_input(5);
    two.models.pop_back();
    CHECK_THROWS_AS(build_tasks(two), ConfigError);
    auto swapped = test::fixture_input(5);
    std::swap(swapped.prompts[0].kind, swapped.prompts[1].kind);
    CHECK_THROWS_AS(build_tasks(swapped), ConfigError);
    auto thin = test::fixture_input(5);
    thin.models[1].per_prompt[3].resize(9);
    CHECK_THROWS_AS(build_tasks(thin), ConfigError);
  }

  TEST_CASE("validator boundaries") {
    Rng rng(1);
    auto j = test::valid_rating("t00", "a", rng);
    for (auto& [_, set] : j["scores"].items())
      for (auto& [__, v] : set.items()) v = 0;
    CHECK(validate_rating_json(j.dump(), nullptr).empty());
    auto high = j;
    high["scores"]["A"]["clinical_realism"] = 11;
    CHECK_FALSE(validate_rating_json(high.dump(), nullptr).empty());
    auto low = j;
    low["scores"]["B"]["confidence_of_use"] = -1;
    CHECK_FALSE(validate_rating_json(low.dump(), nullptr).empty());
    auto dup = j;
    dup["global_preference"] = {{"A", 1}, {"B", 2}, {"C", 2}, {"real", 4}};
    CHECK_FALSE(validate_rating_json(dup.dump(), nullptr).empty());
    auto extra = j;
    extra["model_id"] = "x";
    CHECK_FALSE(validate_rating_json(extra.dump(), nullptr).empty());
    auto missing = j;
    missing.erase("annotator_id");
    CHECK_FALSE(validate_rating_json(missing.dump(), nullptr).empty());
    RatingRecord r;
    CHECK(validate_rating_json(test::valid_rating("t01", "b", rng).dump(), &r).empty());
    CHECK(r.task_id == "t01");
  }

  TEST_CASE("HTTP: blinding, fuzzing, round trip and durability") {
    TaskStore store;
    const auto dir = test::fixture_store("annotation_http", 21, &store);
    std::map<std::string, std::string> model_of_image;
    for (const auto& t : store.tasks)
      for (std::size_t l = 0; l < 3; ++l)
        for (const auto& id : t.sets[l]) model_of_image[id] = store.permutation.at(t.id)[l];
    std::string export_before;
    {
      test::HttpFixture http(dir);
      auto cli = http.client();

      const auto list = cli.Get("/tasks");
      REQUIRE(list);
      CHECK(list->status == 200);
      CHECK_FALSE(mentions_model(list->body));
      const auto listed = json::parse(list->body)["tasks"];
      REQUIRE(listed.size() == 40);
      for (const auto& t : listed) {
        const auto res = cli.Get("/tasks/" + t["id"].get<std::string>());
        REQUIRE(res);
        CHECK(res->status == 200);
        CHECK_FALSE(mentions_model(res->body));
        const auto task = json::parse(res->body);
        CHECK(task["sets"].size() == 3);
        for (const auto& s : task["sets"]) {
          CHECK(s["images"].size() == 10);
          for (const auto& img : s["images"]) {
            const auto id = img["id"].get<std::string>();
            CHECK(id.size() == 16);
            CHECK(model_of_image.count(id) == 1);
          }
        }
      }
      const auto some_image = store.tasks[0].sets[0][0];
      const auto png = cli.Get("/images/" + some_image);
      REQUIRE(png);
      CHECK(png->status == 200);
      CHECK(png->get_header_value("Content-Type") == "image/png");
      CHECK(decode_png(std::vector<std::uint8_t>(png->body.begin(), png->body.end())) == store.images.at(some_image));
      CHECK(cli.Get("/images/../tasks.json")->status == 404);
      CHECK(cli.Get("/tasks/nope")->status == 404);

      Rng rng(77);
      std::size_t rejected = 0;
      for (int i = 0; i < 1000; ++i) {
        const auto& t = store.tasks[rng.below(40)];
        const auto res = cli.Post("/ratings", test::invalid_rating(t.id, rng).dump(), "application/json");
        REQUIRE(res);
        rejected += res->status == 422;
      }
      CHECK(rejected == 1000);
      CHECK(http.service->rating_count() == 0);
      CHECK(cli.Post("/ratings", "{not json", "application/json")->status == 400);
      CHECK(cli.Post("/ratings", test::valid_rating("t99", "a", rng).dump(), "application/json")->status == 404);

      // 25 annotators x 40 tasks: every valid record has its own key.
      std::map<std::pair<std::string, std::string>, json> sent;
      std::size_t accepted = 0;
      for (int a = 0; a < 25; ++a) {
        for (const auto& t : store.tasks) {
          const auto rec = test::valid_rating(t.id, "ann" + std::to_string(a), rng);
          const auto res = cli.Post("/ratings", rec.dump(), "application/json");
          REQUIRE(res);
          accepted += res->status == 200;
          sent[{t.id, rec["annotator_id"].get<std::string>()}] = rec;
        }
      }
      CHECK(accepted == 1000);
      CHECK(http.service->rating_count() == 1000);

      const auto exp = cli.Get("/export");
      REQUIRE(exp);
      CHECK(exp->status == 200);
      export_before = exp->body;
      const auto rows = harness::parse_export_csv(exp->body);
      CHECK(rows.size() == 1000 * 4);
      // Rows come in blocks of four per rating, sorted by task then annotator.
      std::vector<std::pair<std::string, std::string>> keys;
      for (const auto& [k, _] : sent) keys.push_back(k);
      std::map<std::string, std::size_t> index;
      for (const auto& t : store.tasks) index[t.id] = t.index;
      std::sort(keys.begin(), keys.end(), [&](const auto& x, const auto& y) {
        return index[x.first] != index[y.first] ? index[x.first] < index[y.first] : x.second < y.second;
      });
      std::size_t mismatches = 0;
      for (std::size_t k = 0; k < keys.size(); ++k) {
        const auto& rec = sent[keys[k]];
        const auto& perm = store.permutation.at(keys[k].first);
        for (std::size_t l = 0; l < 4; ++l) {
          const auto& row = rows[k * 4 + l];
          const std::string cand(kCandidates[l]);
          const std::string want_model = l < 3 ? perm[l] : std::string(kRealModelId);
          mismatches += row.task_id != keys[k].first || row.model_id != want_model ||
                        row.rank != rec["global_preference"][cand].get<int>();
          if (l < 3) {
            REQUIRE(row.scores);
            for (std::size_t a = 0; a < kAspectCount; ++a)
              mismatches += (*row.scores)[a] != rec["scores"][cand][std::string(kAspects[a])].get<int>();
          } else {
            mismatches += row.scores.has_value();
          }
        }
      }
      CHECK(mismatches == 0);

      const auto one = cli.Get("/export?annotator=ann3");
      CHECK(harness::parse_export_csv(one->body).size() == 40 * 4);
      const auto summary = json::parse(cli.Get("/export/summary")->body);
      for (const auto& m : test::kFixtureModels) {
        CHECK(summary["models"][m]["n"] == 1000);
        for (const auto& [_, v] : summary["models"][m]["aspect_means"].items()) {
          CHECK(v.get<double>() >= 0.0);
          CHECK(v.get<double>() <= 10.0);
        }
      }

      // Overwrite with versioning.
      const auto again = test::valid_rating(store.tasks[0].id, "ann0", rng);
      const auto res = json::parse(cli.Post("/ratings", again.dump(), "application/json")->body);
      CHECK(res["revision"] == 2);
      CHECK(res["version"] == 1001);
      CHECK(http.service->rating_count() == 1000);
      export_before = cli.Get("/export")->body;
    }
    // Restart: every acknowledged record is replayed.
    {
      AnnotationService reloaded(dir);
      CHECK(reloaded.rating_count() == 1000);
      CHECK(reloaded.export_csv(std::nullopt).body == export_before);
      CHECK(reloaded.load_warnings().empty());
    }
    // A torn final line is dropped with a warning, earlier records survive.
    {
      std::ofstream(dir / "ratings.jsonl", std::ios::app) << "{\"version\": 1002, \"task_";
      AnnotationService torn(dir);
      CHECK(torn.rating_count() == 1000);
      CHECK(torn.load_warnings().size() == 1);
      CHECK(torn.export_csv(std::nullopt).body == export_before);
      Rng rng(3);
      CHECK(torn.submit_rating(test::valid_rating(store.tasks[1].id, "late", rng).dump()).status == 200);
    }
    {
      AnnotationService after(dir);
      CHECK(after.rating_count() == 1001);
      CHECK(after.load_warnings().empty());
    }
    std::filesystem::remove_all(dir);
  }
}
