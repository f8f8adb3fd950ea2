#include "radmae/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>

#include "radmae/error.hpp"

namespace radmae {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

void save_checkpoint(const fs::path& dir, const CheckpointMeta& meta, const nn::ParameterSet& params) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail_io("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    index.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"offset", offset},
                     {"layer", p.layer}, {"decay", p.decay}});
    offset += static_cast<std::uint64_t>(p.value.size());
  }
  json doc{{"format", "radmae-checkpoint/1"}, {"kind", meta.kind}, {"config", meta.config}, {"extra", meta.extra},
           {"step", meta.step}, {"epoch", meta.epoch}, {"dtype", "float64-le"}, {"params", index}};

  // Write to temporaries then rename, so a crash never leaves a torn checkpoint.
  const auto blob_tmp = dir / "params.bin.tmp";
  {
    std::ofstream out(blob_tmp, std::ios::binary);
    if (!out) fail_io("cannot write " + blob_tmp.string());
    for (const auto& p : params)
      out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!out) fail_io("short write to " + blob_tmp.string());
  }
  const auto meta_tmp = dir / "meta.json.tmp";
  {
    std::ofstream out(meta_tmp);
    if (!out) fail_io("cannot write " + meta_tmp.string());
    out << doc.dump(1) << '\n';
  }
  fs::rename(blob_tmp, dir / "params.bin");
  fs::rename(meta_tmp, dir / "meta.json");
}

CheckpointMeta read_checkpoint_meta(const fs::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) fail_io("no checkpoint at " + dir.string());
  json doc;
  try {
    doc = json::parse(in);
    if (doc.value("format", "") != "radmae-checkpoint/1") fail_parse("unrecognised checkpoint format in " + dir.string());
    CheckpointMeta meta;
    meta.kind = doc.at("kind").get<std::string>();
    meta.config = doc.at("config");
    meta.extra = doc.value("extra", json::object());
    meta.step = doc.value("step", std::uint64_t{0});
    meta.epoch = doc.value("epoch", 0);
    return meta;
  } catch (const json::exception& ex) {
    fail_parse("checkpoint meta " + dir.string() + ": " + ex.what());
  }
}

LoadReport load_parameters(const fs::path& dir, nn::ParameterSet& params, bool strict, const std::string& source_prefix,
                           const std::string& target_prefix) {
  std::ifstream in(dir / "meta.json");
  if (!in) fail_io("no checkpoint at " + dir.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& ex) {
    fail_parse("checkpoint meta " + dir.string() + ": " + ex.what());
  }
  std::ifstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) fail_io("missing params.bin in " + dir.string());

  LoadReport report;
  std::map<std::string, bool> found;
  for (const auto& entry : doc.at("params")) {
    std::string name = entry.at("name").get<std::string>();
    if (!source_prefix.empty()) {
      if (name.rfind(source_prefix, 0) != 0) {
        ++report.skipped;
        continue;
      }
      name = target_prefix + name.substr(source_prefix.size());
    }
    auto idx = params.find(name);
    if (!idx) {
      ++report.skipped;
      continue;
    }
    const auto shape = entry.at("shape").get<std::vector<long>>();
    auto& value = params[*idx].value;
    if (shape.size() != 2 || shape[0] != value.rows() || shape[1] != value.cols())
      fail("shape mismatch for parameter " + name + " in " + dir.string());
    const auto offset = entry.at("offset").get<std::uint64_t>();
    blob.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
    blob.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.size() * sizeof(double)));
    if (!blob) fail_io("truncated params.bin in " + dir.string());
    found[name] = true;
    ++report.loaded;
  }
  for (const auto& p : params) {
    if (!found.count(p.name)) {
      ++report.missing;
      if (strict) fail("checkpoint " + dir.string() + " lacks parameter " + p.name);
    }
  }
  return report;
}

}  // namespace radmae
