#include "radmae/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "radmae/error.hpp"
#include "radmae/random.hpp"

namespace radmae {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kBinary: return "binary";
    case TaskKind::kMulticlass: return "multiclass";
    case TaskKind::kRegression: return "regression";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "binary") return TaskKind::kBinary;
  if (s == "multiclass") return TaskKind::kMulticlass;
  if (s == "regression") return TaskKind::kRegression;
  fail_parse("unknown task kind '" + s + "'");
}

int TaskDeclaration::cardinality() const {
  switch (kind) {
    case TaskKind::kBinary: return 2;
    case TaskKind::kMulticlass: return static_cast<int>(class_names.size());
    case TaskKind::kRegression: return 1;
  }
  return 0;
}

std::optional<std::string> ManifestEntry::field(const std::string& key) const {
  if (key == "patient_id") return patient_id;
  if (key == "id") return id;
  if (auto it = fields.find(key); it != fields.end()) return it->second;
  return std::nullopt;
}

const ManifestEntry& DatasetManifest::entry(const std::string& id) const { return entries[index_of(id)]; }

std::size_t DatasetManifest::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].id == id) return i;
  throw Error(ErrorCode::kNotFound, "unknown sample id '" + id + "'");
}

void validate_manifest(const DatasetManifest& manifest) {
  for (const auto& [task_id, decl] : manifest.tasks) {
    if (decl.kind == TaskKind::kMulticlass && decl.class_names.size() < 2)
      fail_parse("task '" + task_id + "' declares fewer than 2 classes");
  }
  std::unordered_set<std::string> seen;
  for (const auto& e : manifest.entries) {
    if (e.id.empty()) fail_parse("entry with empty id");
    if (!seen.insert(e.id).second) fail_parse("duplicate id '" + e.id + "'");
    for (const auto& [task_id, target] : e.labels) {
      auto it = manifest.tasks.find(task_id);
      if (it == manifest.tasks.end()) fail_parse("undeclared task '" + task_id + "' in entry '" + e.id + "'");
      if (target.masked) continue;
      if (!std::isfinite(target.value)) fail_parse("non-finite label in entry '" + e.id + "'");
      if (it->second.kind != TaskKind::kRegression) {
        const double v = target.value;
        if (v != std::floor(v) || v < 0 || v >= it->second.cardinality())
          fail_parse("label " + std::to_string(v) + " out of range for task '" + task_id + "' in entry '" + e.id + "'");
      }
    }
    for (const auto& r : e.regions) {
      if (r.w <= 0 || r.h <= 0) fail_parse("empty region box in entry '" + e.id + "'");
    }
  }
}

DatasetManifest parse_manifest(const json& doc, const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  try {
    if (!doc.contains("tasks") || !doc.contains("entries")) fail_parse("manifest needs 'tasks' and 'entries'");
    for (const auto& t : doc.at("tasks")) {
      const std::string id = t.at("id").get<std::string>();
      TaskDeclaration decl;
      decl.kind = task_kind_from_string(t.at("kind").get<std::string>());
      if (t.contains("classes")) decl.class_names = t.at("classes").get<std::vector<std::string>>();
      if (decl.kind == TaskKind::kBinary && decl.class_names.empty()) decl.class_names = {"negative", "positive"};
      if (decl.kind == TaskKind::kBinary && decl.class_names.size() != 2)
        fail_parse("binary task '" + id + "' must have exactly 2 classes");
      if (decl.kind == TaskKind::kMulticlass && decl.class_names.empty() && t.contains("num_classes")) {
        const int k = t.at("num_classes").get<int>();
        for (int i = 0; i < k; ++i) decl.class_names.push_back(std::to_string(i));
      }
      if (decl.kind == TaskKind::kRegression) decl.class_names.clear();
      if (!m.tasks.emplace(id, decl).second) fail_parse("task '" + id + "' declared twice");
    }
    for (const auto& e : doc.at("entries")) {
      ManifestEntry entry;
      entry.id = e.at("id").get<std::string>();
      entry.path = e.value("path", std::string{});
      if (e.contains("patient_id") && !e.at("patient_id").is_null())
        entry.patient_id = e.at("patient_id").get<std::string>();
      if (e.contains("fields")) entry.fields = e.at("fields").get<std::map<std::string, std::string>>();
      if (e.contains("labels")) {
        for (const auto& [task_id, v] : e.at("labels").items()) {
          if (v.is_null()) {
            entry.labels[task_id] = LabeledTarget::unknown();
          } else if (v.is_object()) {
            entry.labels[task_id] = LabeledTarget{v.value("value", 0.0), v.value("masked", false)};
          } else {
            entry.labels[task_id] = LabeledTarget::of(v.get<double>());
          }
        }
      }
      if (e.contains("regions")) {
        for (const auto& r : e.at("regions")) {
          const auto box = r.at("box").get<std::vector<int>>();
          if (box.size() != 4) fail_parse("region box must be [x, y, w, h]");
          entry.regions.push_back({box[0], box[1], box[2], box[3], r.value("location", -1)});
        }
      }
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& ex) {
    fail_parse(std::string("manifest: ") + ex.what());
  }
  validate_manifest(m);
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& ex) {
    fail_parse("manifest " + path.string() + ": " + ex.what());
  }
  return parse_manifest(doc, path.parent_path());
}

json manifest_to_json(const DatasetManifest& manifest) {
  json doc;
  doc["format"] = "radmae-manifest/1";
  doc["tasks"] = json::array();
  for (const auto& [id, decl] : manifest.tasks) {
    json t{{"id", id}, {"kind", to_string(decl.kind)}};
    if (decl.kind != TaskKind::kRegression) t["classes"] = decl.class_names;
    doc["tasks"].push_back(std::move(t));
  }
  doc["entries"] = json::array();
  for (const auto& e : manifest.entries) {
    json j{{"id", e.id}, {"path", e.path}};
    if (e.patient_id) j["patient_id"] = *e.patient_id;
    if (!e.fields.empty()) j["fields"] = e.fields;
    json labels = json::object();
    for (const auto& [task_id, target] : e.labels) {
      if (target.masked) {
        labels[task_id] = nullptr;
      } else if (manifest.tasks.count(task_id) && manifest.tasks.at(task_id).kind != TaskKind::kRegression) {
        labels[task_id] = target.class_index();
      } else {
        labels[task_id] = target.value;
      }
    }
    j["labels"] = std::move(labels);
    if (!e.regions.empty()) {
      json regions = json::array();
      for (const auto& r : e.regions) regions.push_back({{"box", {r.x, r.y, r.w, r.h}}, {"location", r.location}});
      j["regions"] = std::move(regions);
    }
    doc["entries"].push_back(std::move(j));
  }
  return doc;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail_io("cannot write manifest " + path.string());
  out << manifest_to_json(manifest).dump(1) << '\n';
}

namespace {

ImageSample ingest_raster(const Image& raw, int height, int width, int channels) {
  ImageSample s;
  s.pixels = convert_channels(resize_bilinear(raw, height, width), channels);
  for (double& v : s.pixels.data()) v = std::clamp(v, 0.0, 1.0);
  return s;
}

}  // namespace

ImageSample ingest_image(const std::filesystem::path& path, int height, int width, int channels) {
  if (height <= 0 || width <= 0) fail("target size must be positive");
  ImageSample s = ingest_raster(read_image(path), height, width, channels);
  s.id = path.stem().string();
  return s;
}

ImageSample ingest_image(std::span<const std::uint8_t> bytes, int height, int width, int channels) {
  if (height <= 0 || width <= 0) fail("target size must be positive");
  return ingest_raster(decode_image(bytes), height, width, channels);
}

// ---------------------------------------------------------------------------
// Splitting

std::vector<std::size_t> apportion(const std::vector<std::size_t>& sizes, std::size_t total) {
  const std::size_t sum = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  std::vector<std::size_t> share(sizes.size(), 0);
  if (sum == 0) return share;
  if (total > sum) fail("cannot apportion more items than available");
  std::vector<std::pair<std::size_t, std::size_t>> remainders;  // (remainder, index)
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    share[i] = total * sizes[i] / sum;
    assigned += share[i];
    remainders.emplace_back(total * sizes[i] % sum, i);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < total; ++r, ++assigned) share[remainders[r].second] += 1;
  return share;
}

std::vector<std::string> SplitPlan::pool_ids() const {
  std::vector<std::string> out;
  for (const auto& f : folds) out.insert(out.end(), f.val_ids.begin(), f.val_ids.end());
  return out;
}

namespace {

struct Unit {
  std::vector<std::size_t> members;  // entry indices
  int stratum = 0;
  std::string group;
};

int stratum_of(const ManifestEntry& e, const std::optional<std::string>& key) {
  if (!key) return 0;
  auto it = e.labels.find(*key);
  if (it == e.labels.end() || it->second.masked) return -1;
  return it->second.class_index();
}

// Orders ids by manifest position so plans serialise identically.
std::vector<std::string> ordered_ids(const DatasetManifest& m, std::vector<std::size_t> idx) {
  std::sort(idx.begin(), idx.end());
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(m.entries[i].id);
  return out;
}

// Greedy placement of groups into the test bucket (0) and k folds. Groups
// heavy in rare classes go first; each goes where it least increases the
// squared deviation of the bucket's class and size fractions from its share.
std::vector<std::size_t> assign_groups(const DatasetManifest& manifest, const std::vector<Unit>& units,
                                       const std::optional<std::string>& stratify, double test_fraction, std::size_t k) {
  const std::size_t buckets = k + 1;
  std::vector<std::map<int, double>> unit_class(units.size());
  std::map<int, double> total;
  double n = 0.0;
  for (std::size_t u = 0; u < units.size(); ++u) {
    for (auto i : units[u].members) unit_class[u][stratum_of(manifest.entries[i], stratify)] += 1.0;
    for (const auto& [c, cnt] : unit_class[u]) total[c] += cnt;
    n += static_cast<double>(units[u].members.size());
  }
  std::vector<double> share(buckets, (1.0 - test_fraction) / static_cast<double>(k));
  share[0] = test_fraction;

  std::vector<double> rarity(units.size(), 0.0);
  for (std::size_t u = 0; u < units.size(); ++u)
    for (const auto& [c, cnt] : unit_class[u]) rarity[u] += cnt / total[c];
  std::vector<std::size_t> order(units.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rarity[a] > rarity[b]; });

  const auto sq_step = [](double before, double add) { return (before + add) * (before + add) - before * before; };
  std::vector<std::map<int, double>> have(buckets);
  std::vector<double> size(buckets, 0.0);
  std::vector<std::size_t> count(buckets, 0), out(units.size(), 0);
  std::size_t remaining = units.size();
  for (auto u : order) {
    std::size_t empty = 0;
    for (std::size_t b = 0; b < buckets; ++b) empty += count[b] == 0;
    const double m = static_cast<double>(units[u].members.size());
    std::optional<std::size_t> best;
    double best_cost = 0.0;
    for (std::size_t b = 0; b < buckets; ++b) {
      // Once only enough groups remain to seed the empty buckets, they must go there.
      if (count[b] > 0 && remaining <= empty) continue;
      double cost = sq_step(size[b] - share[b] * n, m) / n;
      for (const auto& [c, cnt] : unit_class[u]) {
        const double h = have[b].count(c) ? have[b].at(c) : 0.0;
        cost += sq_step(h - share[b] * total[c], cnt) / total[c];
      }
      cost /= share[b] * share[b];
      if (!best || cost < best_cost) {
        best = b;
        best_cost = cost;
      }
    }
    for (const auto& [c, cnt] : unit_class[u]) have[*best][c] += cnt;
    size[*best] += m;
    ++count[*best];
    out[u] = *best;
    --remaining;
  }
  return out;
}

}  // namespace

SplitPlan make_splits(const DatasetManifest& manifest, const SplitOptions& opt) {
  if (!(opt.test_fraction > 0.0 && opt.test_fraction < 1.0)) fail("test_frac must be in (0, 1)");
  if (opt.folds < 2) fail("k must be at least 2");
  const std::size_t n = manifest.entries.size();
  if (n == 0) fail("cannot split an empty manifest");

  SplitPlan plan;
  plan.seed = opt.seed;
  plan.requested_test_fraction = opt.test_fraction;

  std::optional<std::string> stratify = opt.stratify_key;
  if (stratify) {
    auto it = manifest.tasks.find(*stratify);
    if (it == manifest.tasks.end()) fail("stratify key '" + *stratify + "' is not a declared task");
    if (it->second.kind == TaskKind::kRegression) {
      plan.notes.push_back("regression task '" + *stratify + "': split unstratified");
      stratify.reset();
    }
  }
  plan.stratify_key = stratify;

  std::optional<std::string> group = opt.group_key;
  if (group) {
    std::size_t with_field = 0;
    for (const auto& e : manifest.entries) with_field += e.field(*group).has_value();
    if (with_field == 0) {
      plan.notes.push_back("no entry carries '" + *group + "': fell back to image-level splitting");
      group.reset();
    } else if (with_field != n) {
      fail("group key '" + *group + "' missing on " + std::to_string(n - with_field) + " entries");
    }
  }
  plan.group_key = group;

  // Build split units: whole groups, or single entries.
  std::vector<Unit> units;
  if (group) {
    std::map<std::string, std::size_t> unit_of;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string g = *manifest.entries[i].field(*group);
      auto [it, inserted] = unit_of.emplace(g, units.size());
      if (inserted) units.push_back(Unit{{}, 0, g});
      units[it->second].members.push_back(i);
    }
    for (auto& u : units) {
      std::map<int, std::size_t> counts;
      for (auto i : u.members) counts[stratum_of(manifest.entries[i], stratify)]++;
      u.stratum = std::max_element(counts.begin(), counts.end(), [](auto a, auto b) { return a.second < b.second; })->first;
    }
    // Stable order independent of map iteration: by first member.
    std::sort(units.begin(), units.end(), [](const Unit& a, const Unit& b) { return a.members[0] < b.members[0]; });
  } else {
    for (std::size_t i = 0; i < n; ++i) units.push_back(Unit{{i}, stratum_of(manifest.entries[i], stratify), {}});
  }
  for (const auto& e : manifest.entries) {
    plan.strata[e.id] = stratum_of(e, stratify);
    if (group) plan.groups[e.id] = *e.field(*group);
  }

  Rng rng(opt.seed);
  rng.shuffle(units);

  std::map<int, std::vector<std::size_t>> by_stratum;  // stratum -> unit indices in shuffled order
  for (std::size_t u = 0; u < units.size(); ++u) by_stratum[units[u].stratum].push_back(u);

  const auto target_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(opt.test_fraction * n)));
  std::vector<bool> is_test(units.size(), false);
  std::vector<std::size_t> bucket;  // grouped: 0 = test, f + 1 = fold f

  if (!group) {
    std::vector<std::size_t> sizes;
    for (const auto& [s, list] : by_stratum) sizes.push_back(list.size());
    const auto quota = apportion(sizes, std::min(target_test, n - 1));
    std::size_t k = 0;
    for (const auto& [s, list] : by_stratum) {
      for (std::size_t r = 0; r < quota[k]; ++r) is_test[list[r]] = true;
      ++k;
    }
  } else {
    bucket = assign_groups(manifest, units, stratify, opt.test_fraction, static_cast<std::size_t>(opt.folds));
    for (std::size_t u = 0; u < units.size(); ++u) is_test[u] = bucket[u] == 0;
  }

  std::vector<std::size_t> test_idx;
  std::vector<std::size_t> pool_units;
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (is_test[u]) {
      test_idx.insert(test_idx.end(), units[u].members.begin(), units[u].members.end());
    } else {
      pool_units.push_back(u);
    }
  }
  plan.test_ids = ordered_ids(manifest, test_idx);
  plan.actual_test_fraction = static_cast<double>(test_idx.size()) / n;
  if (plan.actual_test_fraction > 2.0 * opt.test_fraction || plan.actual_test_fraction < 0.5 * opt.test_fraction) {
    const std::string msg = "test fraction " + std::to_string(plan.actual_test_fraction) + " deviates from requested " +
                            std::to_string(opt.test_fraction) + " beyond 2x (group sizes)";
    plan.notes.push_back(msg);
    warn(msg);
  }

  if (pool_units.size() < static_cast<std::size_t>(opt.folds))
    fail("only " + std::to_string(pool_units.size()) + " split units remain for " + std::to_string(opt.folds) + " folds");

  const auto k = static_cast<std::size_t>(opt.folds);
  std::vector<std::vector<std::size_t>> fold_members(k);

  if (!group) {
    // Deal class by class with a running counter: per-class and total fold
    // sizes both differ by at most one.
    std::stable_sort(pool_units.begin(), pool_units.end(),
                     [&](auto a, auto b) { return units[a].stratum < units[b].stratum; });
    std::size_t counter = 0;
    for (auto u : pool_units) fold_members[counter++ % k].push_back(units[u].members[0]);
  } else {
    for (auto u : pool_units)
      fold_members[bucket[u] - 1].insert(fold_members[bucket[u] - 1].end(), units[u].members.begin(), units[u].members.end());
  }

  std::vector<std::size_t> pool_idx;
  for (const auto& fm : fold_members) pool_idx.insert(pool_idx.end(), fm.begin(), fm.end());
  for (std::size_t f = 0; f < k; ++f) {
    std::unordered_set<std::size_t> val(fold_members[f].begin(), fold_members[f].end());
    std::vector<std::size_t> train;
    for (auto i : pool_idx)
      if (!val.count(i)) train.push_back(i);
    plan.folds.push_back(Fold{ordered_ids(manifest, train), ordered_ids(manifest, fold_members[f])});
  }

  if (stratify) {
    const auto& decl = manifest.tasks.at(*stratify);
    std::set<int> present;
    for (const auto& e : manifest.entries) {
      const int s = stratum_of(e, stratify);
      if (s >= 0) present.insert(s);
    }
    for (int c : present) {
      for (std::size_t f = 0; f < k; ++f) {
        const bool found = std::any_of(plan.folds[f].train_ids.begin(), plan.folds[f].train_ids.end(),
                                       [&](const std::string& id) { return plan.strata.at(id) == c; });
        if (!found)
          fail("empty class after split: class '" + decl.class_names.at(c) + "' absent from training set of fold " +
               std::to_string(f));
      }
    }
  }
  return plan;
}

SplitPlan subsample_training(const SplitPlan& plan, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) fail("fraction must be in (0, 1]");
  SplitPlan out = plan;
  const auto pool = plan.pool_ids();
  const std::size_t n = pool.size();
  const auto target = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  if (fraction == 1.0) {
    out.notes.push_back("subsample fraction=1 seed=" + std::to_string(seed) + ": training pool unchanged");
    return out;
  }

  std::map<int, std::vector<std::string>> by_stratum;
  for (const auto& id : pool) {
    auto it = plan.strata.find(id);
    by_stratum[it == plan.strata.end() ? 0 : it->second].push_back(id);
  }
  std::vector<std::size_t> sizes;
  for (const auto& [s, ids] : by_stratum) sizes.push_back(ids.size());
  const auto quota = apportion(sizes, target);

  Rng rng(seed);
  std::unordered_set<std::string> selected;
  std::size_t k = 0;
  for (auto& [s, ids] : by_stratum) {
    if (quota[k] == 0 && s >= 0)
      fail("fraction " + std::to_string(fraction) + " yields zero samples for class " + std::to_string(s));
    std::vector<std::string> shuffled = ids;
    rng.shuffle(shuffled);
    selected.insert(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(quota[k]));
    ++k;
  }

  for (const auto& id : pool)
    if (!selected.count(id)) out.test_ids.push_back(id);
  for (auto& fold : out.folds) {
    std::erase_if(fold.train_ids, [&](const std::string& id) { return !selected.count(id); });
    std::erase_if(fold.val_ids, [&](const std::string& id) { return !selected.count(id); });
  }
  out.notes.push_back("subsample fraction=" + std::to_string(fraction) + " seed=" + std::to_string(seed) + ": kept " +
                      std::to_string(selected.size()) + " of " + std::to_string(n) +
                      " pool ids; remainder added to the held-out test set");
  return out;
}

json split_plan_to_json(const SplitPlan& plan) {
  json doc;
  doc["seed"] = plan.seed;
  doc["group_key"] = plan.group_key ? json(*plan.group_key) : json(nullptr);
  doc["stratify_key"] = plan.stratify_key ? json(*plan.stratify_key) : json(nullptr);
  doc["requested_test_fraction"] = plan.requested_test_fraction;
  doc["actual_test_fraction"] = plan.actual_test_fraction;
  doc["test_ids"] = plan.test_ids;
  doc["folds"] = json::array();
  for (const auto& f : plan.folds) doc["folds"].push_back({{"train_ids", f.train_ids}, {"val_ids", f.val_ids}});
  doc["strata"] = plan.strata;
  doc["groups"] = plan.groups;
  doc["notes"] = plan.notes;
  return doc;
}

SplitPlan split_plan_from_json(const json& doc) {
  SplitPlan plan;
  try {
    plan.seed = doc.at("seed").get<std::uint64_t>();
    if (!doc.at("group_key").is_null()) plan.group_key = doc.at("group_key").get<std::string>();
    if (!doc.at("stratify_key").is_null()) plan.stratify_key = doc.at("stratify_key").get<std::string>();
    plan.requested_test_fraction = doc.value("requested_test_fraction", 0.0);
    plan.actual_test_fraction = doc.value("actual_test_fraction", 0.0);
    plan.test_ids = doc.at("test_ids").get<std::vector<std::string>>();
    for (const auto& f : doc.at("folds"))
      plan.folds.push_back({f.at("train_ids").get<std::vector<std::string>>(), f.at("val_ids").get<std::vector<std::string>>()});
    plan.strata = doc.value("strata", std::map<std::string, int>{});
    plan.groups = doc.value("groups", std::map<std::string, std::string>{});
    plan.notes = doc.value("notes", std::vector<std::string>{});
  } catch (const json::exception& ex) {
    fail_parse(std::string("split plan: ") + ex.what());
  }
  return plan;
}

}  // namespace radmae
