#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "radmae/error.hpp"
#include "radmae/synthgen.hpp"

using namespace radmae;
using namespace radmae::synth;

namespace {

double background_fraction(const Image& img) {
  const auto d = img.data();
  return static_cast<double>(std::count_if(d.begin(), d.end(), [](double v) { return v < 0.05; })) / d.size();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("normal images are deterministic and mostly background") {
  CHECK(generate_normal(0, 64, 64).sample.pixels == generate_normal(0, 64, 64).sample.pixels);
  CHECK_FALSE(generate_normal(0, 64, 64).sample.pixels == generate_normal(1, 64, 64).sample.pixels);
  double worst = 1.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto n = generate_normal(s, 64, 64);
    worst = std::min(worst, background_fraction(n.sample.pixels));
    const auto d = n.sample.pixels.data();
    CHECK(*std::max_element(d.begin(), d.end()) <= 1.0);
    CHECK(*std::min_element(d.begin(), d.end()) >= 0.0);
  }
  MESSAGE("minimum background fraction over 1000 images: ", worst);
  CHECK(worst >= 0.30);
  CHECK_THROWS_AS(generate_normal(0, 16, 64), Error);
}

TEST_CASE("anomaly injection stays inside its footprint") {
  const auto n = generate_normal(3, 64, 64, 14);
  const auto [ci, cj] = n.shaft.point(0.0, 0.0);
  for (auto kind : {AnomalyKind::kTumorBlob, AnomalyKind::kFractureGap, AnomalyKind::kImplantBar}) {
    AnomalySpec spec;
    spec.kind = kind;
    spec.center_i = ci;
    spec.center_j = cj;
    spec.scale = kind == AnomalyKind::kImplantBar ? 10.0 : kind == AnomalyKind::kFractureGap ? 2.5 : 6.0;
    spec.angle_deg = n.shaft.angle_deg;
    spec.intensity_delta = 0.5;
    const auto inj = inject_anomaly(n.sample, spec, 1);
    CHECK(inj.footprint.count() > 0);
    double before = 0, after = 0;
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 64; ++j) {
        if (!inj.footprint.at(i, j)) {
          CHECK(inj.sample.pixels.at(i, j) == n.sample.pixels.at(i, j));
        } else {
          before += n.sample.pixels.at(i, j);
          after += inj.sample.pixels.at(i, j);
          CHECK((i > 0 && j > 0 && i < 63 && j < 63));
        }
      }
    if (kind == AnomalyKind::kFractureGap) CHECK(after < before);
    CHECK(inj.sample.labels.at("abnormality").value == 1.0);
    spec.intensity_delta = 0.0;
    const auto zero = inject_anomaly(n.sample, spec, 1);
    CHECK(zero.sample.pixels == n.sample.pixels);
    CHECK(zero.footprint == inj.footprint);
  }
  AnomalySpec off;
  off.center_i = 1;
  off.center_j = 1;
  CHECK_THROWS_WITH_AS(inject_anomaly(n.sample, off, 0), doctest::Contains("anomaly off-bone"), Error);
}

TEST_CASE("anomaly kinds drive head labels") {
  const auto n = generate_normal(8, 64, 64, 5);
  const auto [ci, cj] = n.shaft.point(0.0, 0.0);
  AnomalySpec tumor{AnomalyKind::kTumorBlob, ci, cj, 5.0, 0.4, TumorSubtype::kMalignant, n.shaft.angle_deg};
  const auto t = inject_anomaly(n.sample, tumor, 2);
  CHECK(t.sample.labels.at("tumor_presence").value == 1);
  CHECK(t.sample.labels.at("tumor_subtype").value == 0);
  CHECK(t.sample.labels.at("malignancy").value == 1);
  AnomalySpec gap{AnomalyKind::kFractureGap, ci, cj, 2.0, 0.7, TumorSubtype::kBenign, n.shaft.angle_deg};
  CHECK(inject_anomaly(n.sample, gap, 2).sample.labels.at("fracture").value == 1);
  const auto [fi, fj] = n.shaft.point(12.0, 0.0);
  AnomalySpec far_gap = gap;
  far_gap.center_i = fi;
  far_gap.center_j = fj;
  CHECK(inject_anomaly(t.sample, far_gap, 2).sample.labels.at("fracture").value == 0);
  AnomalySpec bar{AnomalyKind::kImplantBar, ci, cj, 8.0, 0.9, TumorSubtype::kBenign, n.shaft.angle_deg};
  CHECK(inject_anomaly(n.sample, bar, 2).sample.labels.at("implant").value == 1);
}

TEST_CASE("corpus counts, label masking and determinism") {
  CorpusSpec spec;
  spec.n_normal = 100;
  spec.n_abnormal = 100;
  spec.seed = 4;
  const auto c = generate_corpus(spec);
  REQUIRE(c.manifest.entries.size() == 200);
  int abnormal = 0, tumors = 0, intermediate = 0;
  std::set<std::string> patients;
  for (const auto& e : c.manifest.entries) {
    abnormal += e.labels.at("abnormality").value == 1.0;
    tumors += e.labels.at("tumor_presence").value == 1.0;
    intermediate += e.labels.at("tumor_subtype").value == 1.0;
    patients.insert(*e.patient_id);
    REQUIRE(e.regions.size() == 1);
  }
  CHECK(abnormal == 100);
  CHECK(tumors == 50);
  CHECK(intermediate == 5);
  CHECK(patients.size() < 200);

  spec.mix = {{AnomalyKind::kTumorBlob, 1.0}};
  const auto t = generate_corpus(spec);
  for (const auto& e : t.manifest.entries) {
    CHECK(e.labels.at("fracture").masked);
    CHECK(e.labels.at("implant").masked);
    if (e.labels.at("abnormality").value == 1.0) CHECK(e.labels.at("tumor_presence").value == 1.0);
  }
  spec.mix = {{AnomalyKind::kTumorBlob, 0.5}};
  CHECK_THROWS_AS(generate_corpus(spec), Error);
}

TEST_CASE("build_corpus writes byte-identical manifests") {
  const auto root = std::filesystem::temp_directory_path() / "radmae_synth_test";
  std::filesystem::remove_all(root);
  CorpusSpec spec;
  spec.n_normal = 6;
  spec.n_abnormal = 6;
  const auto m = build_corpus(spec, root / "a");
  build_corpus(spec, root / "b");
  CHECK(slurp(root / "a" / "manifest.json") == slurp(root / "b" / "manifest.json"));
  CHECK(std::filesystem::exists(root / "a" / m.entries[0].path));
  const auto loaded = load_manifest(root / "a" / "manifest.json");
  CHECK(loaded.entries.size() == 12);
  const auto img = ingest_image(loaded.image_path(loaded.entries[3]), 64, 64, 1);
  CHECK(img.pixels == generate_corpus(spec).images[3]);
  std::filesystem::remove_all(root);
}
