#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "radmae/datamodel.hpp"
#include "radmae/error.hpp"

using namespace radmae;
using nlohmann::json;

namespace {

json small_manifest() {
  return json::parse(R"({
    "tasks": [{"id": "y", "kind": "binary", "classes": ["neg", "pos"]},
              {"id": "age", "kind": "regression"}],
    "entries": [
      {"id": "a", "path": "a.png", "patient_id": "p1", "labels": {"y": 1, "age": 40}},
      {"id": "b", "path": "b.png", "patient_id": "p1", "labels": {"y": null},
       "fields": {"body_part": "knee"}, "regions": [{"box": [1, 2, 3, 4], "location": 5}]},
      {"id": "c", "path": "c.png", "labels": {"y": {"value": 0, "masked": true}}}
    ]})");
}

// Patients with three images each; positives are every fifth image.
DatasetManifest grouped_manifest(int n) {
  DatasetManifest m;
  m.tasks["y"] = {TaskKind::kBinary, {"neg", "pos"}};
  int patient = 0;
  for (int i = 0; i < n; ++i) {
    if (i % 3 == 0) ++patient;
    ManifestEntry e;
    e.id = "e" + std::to_string(i);
    e.path = e.id + ".png";
    e.patient_id = "p" + std::to_string(patient);
    e.labels["y"] = LabeledTarget::of(i % 5 == 0 ? 1 : 0);
    m.entries.push_back(e);
  }
  return m;
}

}  // namespace

TEST_CASE("manifest parsing keeps masks, fields and regions") {
  const auto m = parse_manifest(small_manifest(), "/data");
  REQUIRE(m.entries.size() == 3);
  CHECK(m.tasks.at("age").cardinality() == 1);
  CHECK(m.entry("a").labels.at("y") == LabeledTarget::of(1));
  CHECK(m.entry("b").labels.at("y").masked);
  CHECK(m.entry("c").labels.at("y").masked);
  CHECK(m.entry("b").field("body_part") == "knee");
  CHECK(m.entry("b").field("patient_id") == "p1");
  CHECK(m.entry("b").regions.at(0) == RegionAnnotation{1, 2, 3, 4, 5});
  CHECK(m.image_path(m.entry("a")) == "/data/a.png");
  const auto round = parse_manifest(manifest_to_json(m), "/data");
  CHECK(round.entries.size() == 3);
  CHECK(round.entry("b").regions == m.entry("b").regions);
}

TEST_CASE("manifest validation rejects bad labels") {
  auto doc = small_manifest();
  doc["entries"][0]["labels"]["y"] = 2;
  CHECK_THROWS_AS(validate_manifest(parse_manifest(doc, ".")), Error);
  doc = small_manifest();
  doc["entries"][1]["id"] = "a";
  CHECK_THROWS_AS(validate_manifest(parse_manifest(doc, ".")), Error);
  doc = small_manifest();
  doc["entries"][0]["labels"]["missing"] = 1;
  CHECK_THROWS_AS(validate_manifest(parse_manifest(doc, ".")), Error);
}

TEST_CASE("apportion hands out floor or ceil quotas") {
  const auto shares = apportion({7, 2, 11}, 10);
  CHECK(shares[0] + shares[1] + shares[2] == 10);
  CHECK(shares[0] >= 3);
  CHECK(shares[0] <= 4);
  CHECK(shares[1] == 1);
  CHECK(shares[2] >= 5);
  CHECK(shares[2] <= 6);
}

TEST_CASE("grouped stratified splits stay balanced") {
  const auto m = grouped_manifest(300);
  SplitOptions o;
  o.folds = 5;
  o.seed = 4;
  o.stratify_key = "y";
  o.group_key = "patient_id";
  const auto plan = make_splits(m, o);
  std::map<std::string, std::string> group;
  for (const auto& e : m.entries) group[e.id] = *e.patient_id;
  std::set<std::string> test_groups;
  int test_pos = 0;
  for (const auto& id : plan.test_ids) {
    test_groups.insert(group[id]);
    test_pos += m.entry(id).labels.at("y").class_index();
  }
  CHECK(plan.test_ids.size() == 30);
  CHECK(std::abs(test_pos - 6) <= 1);
  const double pool_pos = (60.0 - test_pos) / 5.0;
  for (const auto& f : plan.folds) {
    std::set<std::string> val_groups;
    int pos = 0;
    for (const auto& id : f.val_ids) {
      val_groups.insert(group[id]);
      pos += m.entry(id).labels.at("y").class_index();
      CHECK(test_groups.count(group[id]) == 0);
    }
    for (const auto& id : f.train_ids) CHECK(val_groups.count(group[id]) == 0);
    // 270 pool entries per 5 folds; groups of 3 allow one group of slack.
    CHECK(std::abs(static_cast<int>(f.val_ids.size()) - 54) <= 3);
    CHECK(std::abs(pos - pool_pos) < 1.5);
  }
  CHECK(plan == split_plan_from_json(split_plan_to_json(plan)));
  CHECK(plan == make_splits(m, o));
}

TEST_CASE("subsampling keeps class shares") {
  const auto m = grouped_manifest(200);
  SplitOptions o;
  o.folds = 2;
  o.seed = 1;
  o.stratify_key = "y";
  const auto plan = make_splits(m, o);
  const auto sub = subsample_training(plan, 0.25, 9);
  const auto ids = sub.pool_ids();
  CHECK(ids.size() == 45);  // ceil(0.25 * 180)
  CHECK(sub.test_ids.size() == plan.test_ids.size() + 135);
  int pos = 0;
  for (const auto& id : ids) pos += m.entry(id).labels.at("y").class_index();
  CHECK(std::abs(pos - 9) <= 1);
}
