#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "radmae/error.hpp"
#include "radmae/multihead.hpp"
#include "radmae/synthgen.hpp"

using namespace radmae;
using namespace radmae::region;

namespace {

BackboneConfig tiny_conv(int size = 16) {
  BackboneConfig b;
  b.kind = "conv";
  b.encoder.image_height = size;
  b.encoder.image_width = size;
  b.encoder.channels = 1;
  b.encoder.patch = 4;
  b.encoder.dim = 16;
  b.encoder.depth = 1;
  b.encoder.heads = 2;
  b.conv_width = 8;
  b.conv_out = 8;
  return b;
}

HeadTargets all_masked() {
  HeadTargets t;
  t.fill(LabeledTarget::unknown());
  return t;
}

RegionPrediction region_with(std::vector<double> subtype, double abnormal = 0.5) {
  RegionPrediction r;
  r.box = {0, 0, 8, 8, -1, 1.0};
  r.probabilities[kAbnormality] = {abnormal};
  r.probabilities[kTumorSubtype] = std::move(subtype);
  r.probabilities[kLocation] = std::vector<double>(29, 1.0 / 29);
  r.probabilities[kFracture] = {0.1, 0.1, 0.8};
  r.probabilities[kImplant] = {0.1};
  return r;
}

class ThrowingProposer : public Proposer {
 public:
  std::string name() const override { return "broken"; }
  std::vector<RegionBox> propose(const Image&, const std::string&) const override { fail("detector offline"); }
};

class FixedProposer : public Proposer {
 public:
  explicit FixedProposer(std::vector<RegionBox> b) : boxes(std::move(b)) {}
  std::string name() const override { return "fixed"; }
  std::vector<RegionBox> propose(const Image&, const std::string&) const override { return boxes; }
  std::vector<RegionBox> boxes;
};

// Scalar reference for one head: mean over unmasked samples of BCE or CE.
double reference_head_loss(const nn::Matrix& logits, const std::vector<HeadTargets>& t, int h) {
  const auto& g = head_layout().groups[static_cast<std::size_t>(h)];
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto& y = t[i][static_cast<std::size_t>(h)];
    if (y.masked) continue;
    ++n;
    if (g.activation == Activation::kSigmoid) {
      const double p = 1.0 / (1.0 + std::exp(-logits(static_cast<long>(i), g.offset)));
      sum += -(y.value * std::log(p) + (1 - y.value) * std::log(1 - p));
    } else {
      double z = 0.0;
      for (int c = 0; c < g.arity; ++c) z += std::exp(logits(static_cast<long>(i), g.offset + c));
      sum += -std::log(std::exp(logits(static_cast<long>(i), g.offset + y.class_index())) / z);
    }
  }
  return n ? sum / n : 0.0;
}

}  // namespace

TEST_CASE("head layout is contiguous with 38 outputs") {
  const auto& l = head_layout();
  REQUIRE(l.groups.size() == 5);
  CHECK(l.total == 38);
  const std::vector<int> arity{1, 4, 29, 3, 1};
  int offset = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(l.groups[i].arity == arity[i]);
    CHECK(l.groups[i].offset == offset);
    CHECK(static_cast<int>(l.groups[i].class_names.size()) == std::max(arity[i], 2));
    offset += arity[i];
  }
  CHECK(l.group("fracture").class_names[0] == "neoplastic pathologic fracture");
  CHECK(l.group("tumor_subtype").class_names[3] == "normal");
}

TEST_CASE("region proposals") {
  synth::CorpusSpec spec;
  spec.n_normal = 3;
  spec.n_abnormal = 3;
  const auto corpus = synth::generate_corpus(spec);
  const auto& e = corpus.manifest.entries[1];
  const auto& img = corpus.images[1];

  const auto gt = propose_regions(img, GroundTruthProposer(corpus.manifest), e.id);
  REQUIRE(gt.size() == e.regions.size());
  CHECK(gt[0].x == e.regions[0].x);
  CHECK(gt[0].w == e.regions[0].w);
  CHECK(gt[0].location == e.regions[0].location);

  std::vector<std::string> warnings;
  const auto empty = propose_regions(img, FixedProposer({}), e.id, &warnings);
  REQUIRE(empty.size() == 1);
  CHECK(empty[0] == whole_image_box(img));

  const auto clipped = propose_regions(img, FixedProposer({{-5, 50, 20, 30, 2, 0.7}}), e.id);
  REQUIRE(clipped.size() == 1);
  CHECK(clipped[0] == RegionBox{0, 50, 15, 14, 2, 0.7});

  warnings.clear();
  const auto broken = propose_regions(img, ThrowingProposer(), e.id, &warnings);
  REQUIRE(broken.size() == 1);
  CHECK(broken[0] == whole_image_box(img));
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("detector offline") != std::string::npos);

  const auto with_whole = propose_regions(img, FixedProposer({{4, 4, 10, 10, -1, 1.0}}), e.id, nullptr, true);
  CHECK(with_whole.size() == 2);
}

TEST_CASE("detection json adapter") {
  const nlohmann::json doc = {
      {"images",
       {{"a", {{{"class", "Pelvis"}, {"box", {1.5, 2.0, 10.0, 12.0}}, {"score", 0.9}},
               {{"class", 3}, {"box", {0, 0, 5, 5}}, {"score", 0.2}}}}}},
      {"detections", {{{"box", {0, 0, 8, 8}}}}}};
  const DetectionJsonProposer p(doc, 0.5);
  const Image img(64, 64, 1);
  const auto a = p.propose(img, "a");
  REQUIRE(a.size() == 1);
  CHECK(a[0].x == 1);
  CHECK(a[0].y == 2);
  CHECK(a[0].w == 10);
  const auto& names = synth::location_names();
  REQUIRE(a[0].location >= 0);
  CHECK(std::string(names[static_cast<std::size_t>(a[0].location)]) == "Pelvis");
  const auto other = p.propose(img, "zzz");
  REQUIRE(other.size() == 1);
  CHECK(other[0].w == 8);
  CHECK_THROWS(DetectionJsonProposer(nlohmann::json::object()));
  CHECK_THROWS(parse_detections(nlohmann::json::array({{{"box", {1, 2}}}})));
}

TEST_CASE("crop without augmentation is a deterministic tight crop") {
  Image img(40, 40, 1);
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j) img.at(i, j) = (i * 40 + j) / 1600.0;
  const RegionBox box{8, 4, 16, 16, -1, 1.0};
  CropOptions o;
  o.out_size = 16;
  const auto a = crop_region(img, box, false, 1, o);
  const auto b = crop_region(img, box, false, 99, o);
  CHECK(a.image == b.image);
  // Same size as the box: pixel-exact copy.
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) CHECK(a.image.at(i, j) == doctest::Approx(img.at(4 + i, 8 + j)).epsilon(1e-12));
  o.out_size = 224;
  CHECK(crop_region(img, box, false, 0, o).image.height() == 224);
  CHECK_THROWS_WITH(crop_region(img, {0, 0, 3, 10, -1, 1.0}, false, 0, o), doctest::Contains("4x4"));
}

TEST_CASE("augmented crop windows respect the IoR floor") {
  const RegionBox box{10, 12, 30, 20, -1, 1.0};
  for (double floor : {0.5, 0.7, 0.9}) {
    Rng rng(static_cast<std::uint64_t>(floor * 100));
    for (int t = 0; t < 1000; ++t) {
      const auto w = sample_crop_window(box, floor, rng);
      // Direct geometric check.
      const double x0 = std::max(w.x, 10.0), x1 = std::min(w.x + w.w, 40.0);
      const double y0 = std::max(w.y, 12.0), y1 = std::min(w.y + w.h, 32.0);
      const double ior = std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0) / 600.0;
      CHECK(ior >= floor - 1e-12);
    }
  }
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const auto w = sample_crop_window(box, 1.0, rng);
    CHECK(w.x <= 10.0);
    CHECK(w.y <= 12.0);
    CHECK(w.x + w.w >= 40.0);
    CHECK(w.y + w.h >= 32.0);
  }
  Image img(64, 64, 1, 0.5);
  CropOptions o;
  o.out_size = 24;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto c = crop_region(img, box, true, s, o);
    CHECK(std::abs(c.rotation_deg) <= 10.0);
    CHECK(std::abs(c.brightness) <= 0.1);
    CHECK(std::abs(c.contrast - 1.0) <= 0.1);
    CHECK(intersection_over_region(c.window, box) >= 0.7);
  }
}

TEST_CASE("masked multitask loss closed forms") {
  nn::Matrix z = nn::Matrix::Random(3, 38);
  std::vector<HeadTargets> t(3, all_masked());
  nn::Matrix dz;
  const auto none = masked_multitask_loss(z, t, &dz);
  CHECK(none.total == 0.0);
  CHECK(dz.cwiseAbs().maxCoeff() == 0.0);

  nn::Matrix one = nn::Matrix::Zero(1, 38);
  std::vector<HeadTargets> implant_only{all_masked()};
  implant_only[0][kImplant] = LabeledTarget::of(1);
  CHECK(masked_multitask_loss(one, implant_only).total == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("masked multitask loss matches a per-sample reference") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 7;
    nn::Matrix z(n, 38);
    for (long i = 0; i < z.size(); ++i) z.data()[i] = 2.0 * rng.normal();
    std::vector<HeadTargets> t(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      t[static_cast<std::size_t>(i)][kAbnormality] = LabeledTarget::of(static_cast<double>(rng.below(2)));
      t[static_cast<std::size_t>(i)][kTumorSubtype] = LabeledTarget::of(static_cast<double>(rng.below(4)));
      t[static_cast<std::size_t>(i)][kLocation] = LabeledTarget::of(static_cast<double>(rng.below(29)));
      t[static_cast<std::size_t>(i)][kFracture] =
          i % 2 ? LabeledTarget::unknown() : LabeledTarget::of(static_cast<double>(rng.below(3)));
      t[static_cast<std::size_t>(i)][kImplant] =
          rng.bernoulli(0.3) ? LabeledTarget::unknown() : LabeledTarget::of(static_cast<double>(rng.below(2)));
    }
    nn::Matrix dz;
    const auto got = masked_multitask_loss(z, t, &dz);
    double total = 0.0;
    for (int h = 0; h < kHeadCount; ++h) {
      const double ref = reference_head_loss(z, t, h);
      CHECK(got.per_head[static_cast<std::size_t>(h)] == doctest::Approx(ref).epsilon(1e-12));
      total += ref;
    }
    CHECK(got.total == doctest::Approx(total).epsilon(1e-12));
    CHECK(got.active[kFracture] == (n + 1) / 2);
    // Central differences on the logits.
    for (int k = 0; k < 10; ++k) {
      const long i = static_cast<long>(rng.below(static_cast<std::uint64_t>(n)));
      const long c = static_cast<long>(rng.below(38));
      nn::Matrix zp = z, zm = z;
      const double h = 1e-6;
      zp(i, c) += h;
      zm(i, c) -= h;
      const double fd = (masked_multitask_loss(zp, t).total - masked_multitask_loss(zm, t).total) / (2 * h);
      CHECK(std::abs(dz(i, c) - fd) <= 1e-4 * std::abs(fd) + 1e-8);
    }
  }
}

TEST_CASE("fully masked head gets exactly zero gradient on its parameters") {
  Classifier model(tiny_conv(), 38, 4);
  Rng rng(9);
  std::vector<Image> imgs;
  std::vector<HeadTargets> t;
  for (int i = 0; i < 4; ++i) {
    Image img(16, 16, 1);
    for (auto& v : img.data()) v = rng.uniform();
    imgs.push_back(img);
    HeadTargets y;
    y[kAbnormality] = LabeledTarget::of(i % 2);
    y[kTumorSubtype] = LabeledTarget::of(i % 4);
    y[kLocation] = LabeledTarget::of(i * 7 % 29);
    y[kFracture] = LabeledTarget::unknown();
    y[kImplant] = LabeledTarget::of(1 - i % 2);
    t.push_back(y);
  }
  nn::Matrix z(4, 38);
  std::vector<Classifier::Cache> caches(4);
  for (int i = 0; i < 4; ++i) z.row(i) = model.forward(imgs[static_cast<std::size_t>(i)], caches[static_cast<std::size_t>(i)]);
  nn::Matrix dz;
  masked_multitask_loss(z, t, &dz);
  nn::Gradients g(model.params());
  for (int i = 0; i < 4; ++i) model.backward(caches[static_cast<std::size_t>(i)], dz.row(i), g);
  const auto& f = head_layout().group("fracture");
  const auto& head = model.head();
  CHECK(g[head.weight].middleCols(f.offset, f.arity).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g[head.bias].middleCols(f.offset, f.arity).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g[head.weight].cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("aggregation rules") {
  const auto normal = region_with({0.1, 0.1, 0.1, 0.7});
  const auto benign = region_with({0.2, 0.1, 0.6, 0.1});
  auto p = aggregate_image({normal, benign});
  CHECK(p.tumor_positive);
  CHECK(p.malignancy == Malignancy::kBenign);

  p = aggregate_image({region_with({0.6, 0.1, 0.2, 0.1})});
  CHECK(p.tumor_positive);
  CHECK(p.malignancy == Malignancy::kMalignant);
  CHECK(p.max_p_malignant == 0.6);

  p = aggregate_image({normal, normal});
  CHECK_FALSE(p.tumor_positive);
  CHECK(p.malignancy == Malignancy::kNone);

  // Exactly 0.5 does not exceed 0.5.
  p = aggregate_image({region_with({0.5, 0.0, 0.4, 0.1})});
  CHECK(p.malignancy == Malignancy::kBenign);

  // Malignant probability may come from a region that is not itself triggering.
  p = aggregate_image({benign, region_with({0.45, 0.0, 0.0, 0.55})});
  CHECK(p.max_p_malignant == 0.45);

  AggregationOptions abn;
  abn.trigger = TumorTrigger::kAbnormality;
  CHECK(aggregate_image({region_with({0.1, 0.1, 0.1, 0.7}, 0.8)}, abn).tumor_positive);
  CHECK_FALSE(aggregate_image({region_with({0.1, 0.6, 0.2, 0.1}, 0.3)}, abn).tumor_positive);
  CHECK(tumor_trigger_from_string(to_string(TumorTrigger::kAbnormality)) == TumorTrigger::kAbnormality);
  CHECK_THROWS(tumor_trigger_from_string("maybe"));
}

TEST_CASE("aggregation is order invariant and monotone") {
  Rng rng(21);
  const auto random_region = [&rng] {
    std::vector<double> s(4);
    double z = 0;
    for (auto& v : s) z += (v = rng.uniform() + 1e-3);
    for (auto& v : s) v /= z;
    return region_with(s, rng.uniform());
  };
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<RegionPrediction> regions;
    for (int i = 0; i < 1 + trial % 6; ++i) regions.push_back(random_region());
    AggregationOptions o;
    o.threshold = rng.uniform(0.1, 0.9);
    const auto base = aggregate_image(regions, o);
    CHECK((base.malignancy == Malignancy::kNone || base.tumor_positive));
    auto shuffled = regions;
    rng.shuffle(shuffled);
    const auto perm = aggregate_image(shuffled, o);
    CHECK(perm.tumor_positive == base.tumor_positive);
    CHECK(perm.malignancy == base.malignancy);
    CHECK(perm.max_p_malignant == base.max_p_malignant);
    CHECK(to_json(perm)["image_level"] == to_json(base)["image_level"]);

    // Raise one region's P(malignant), renormalising the rest.
    auto raised = regions;
    auto& s = raised[rng.below(raised.size())].probabilities[kTumorSubtype];
    const double target = s[0] + (1.0 - s[0]) * rng.uniform();
    const double rest = 1.0 - s[0];
    for (int c = 1; c < 4; ++c) s[static_cast<std::size_t>(c)] *= (1.0 - target) / rest;
    s[0] = target;
    const auto after = aggregate_image(raised, o);
    if (base.malignancy == Malignancy::kMalignant) CHECK(after.malignancy == Malignancy::kMalignant);
    CHECK(after.max_p_malignant >= base.max_p_malignant);
  }
}

TEST_CASE("head probabilities are normalised") {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    nn::Matrix z(1, 38);
    for (long i = 0; i < 38; ++i) z(0, i) = 20.0 * rng.normal();
    const auto p = head_probabilities(z);
    for (int h : {kTumorSubtype, kLocation, kFracture}) {
      double sum = 0;
      for (double v : p[static_cast<std::size_t>(h)]) sum += v;
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    for (int h : {kAbnormality, kImplant}) {
      CHECK(p[static_cast<std::size_t>(h)][0] >= 0.0);
      CHECK(p[static_cast<std::size_t>(h)][0] <= 1.0);
    }
  }
}

TEST_CASE("head metrics ignore masked labels") {
  Rng rng(8);
  std::vector<nn::Matrix> logits;
  std::vector<HeadTargets> targets;
  std::vector<nn::Matrix> kept_logits;
  std::vector<HeadTargets> kept_targets;
  for (int i = 0; i < 60; ++i) {
    nn::Matrix z(1, 38);
    for (long c = 0; c < 38; ++c) z(0, c) = rng.normal();
    HeadTargets t;
    t[kAbnormality] = LabeledTarget::of(i % 2);
    t[kTumorSubtype] = LabeledTarget::of(i % 4);
    t[kLocation] = LabeledTarget::of(i % 29);
    t[kFracture] = i % 3 == 0 ? LabeledTarget::unknown() : LabeledTarget::of(i % 3);
    t[kImplant] = LabeledTarget::of(i % 5 == 0);
    logits.push_back(z);
    targets.push_back(t);
  }
  const auto all = evaluate_heads(logits, targets);
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!targets[i][kFracture].masked) {
      kept_logits.push_back(logits[i]);
      kept_targets.push_back(targets[i]);
    }
  const auto subset = evaluate_heads(kept_logits, kept_targets);
  CHECK(all[kFracture].auroc == subset[kFracture].auroc);
  CHECK(all[kFracture].f1 == subset[kFracture].f1);
  CHECK(all[kFracture].n == 40);
  CHECK(all[kFracture].confusion == subset[kFracture].confusion);

  auto untrained = evaluate_heads(logits, targets, {}, {true, true, true, false, true});
  CHECK_FALSE(untrained[kFracture].trained);
  CHECK(to_json(untrained[kFracture])["status"] == "untrained");
}

TEST_CASE("multihead training end to end on a small corpus") {
  synth::CorpusSpec spec;
  spec.n_normal = 30;
  spec.n_abnormal = 30;
  spec.height = 32;
  spec.width = 32;
  spec.mix = {{synth::AnomalyKind::kTumorBlob, 0.5}, {synth::AnomalyKind::kImplantBar, 0.5}};
  spec.seed = 4;
  const auto corpus = synth::generate_corpus(spec);
  const MemorySource src(corpus.manifest, corpus.images);
  SplitOptions so;
  so.folds = 2;
  so.seed = 1;
  so.stratify_key = "abnormality";
  so.group_key = "patient_id";
  const auto plan = make_splits(corpus.manifest, so);

  MultiheadConfig cfg;
  cfg.backbone = tiny_conv();
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.base_lr = 1e-3;
  cfg.layerwise_lr_decay = 1.0;
  const auto dir = std::filesystem::path(RADMAE_TEST_DATA_DIR) / "multihead_run";
  std::filesystem::remove_all(dir);
  MultiheadOptions opts;
  opts.run_dir = dir;
  const auto report = train_multihead(src, corpus.manifest, plan, cfg, opts);
  REQUIRE(report.folds.size() == 2);
  // Without fractures in the mix every fracture label is masked.
  CHECK_FALSE(report.trained[kFracture]);
  CHECK(report.trained[kImplant]);
  const auto j = to_json(report);
  CHECK(j["heads"]["fracture"]["status"] == "untrained");
  for (const auto& f : report.folds) CHECK(f.fit.history.size() == 2);

  const auto loaded = load_multihead(dir / "fold0" / "best.ckpt");
  CHECK(loaded.metadata["multihead"] == to_json(multihead_config_from_json(to_json(cfg))));
  CHECK(loaded.crop.out_size == 16);
  const auto& e = corpus.manifest.entries[0];
  const auto boxes = propose_regions(corpus.images[0], GroundTruthProposer(corpus.manifest), e.id);
  const auto a = predict_regions(loaded.model, corpus.images[0], boxes, loaded.crop);
  const auto b = predict_regions(report.folds[0].model, corpus.images[0], boxes, loaded.crop);
  REQUIRE(a.size() == b.size());
  CHECK(a[0].probabilities == b[0].probabilities);
  CHECK_THROWS(predict_regions(Classifier(tiny_conv(), 3), corpus.images[0], boxes, loaded.crop));
}
