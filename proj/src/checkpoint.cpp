#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "tueforge/optim.hpp"

namespace tueforge {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {
constexpr int kFormatVersion = 1;
}

void save_checkpoint(const std::string& dir, const ParamSet& ps, const std::string& extra_json) {
  fs::create_directories(dir);
  json meta;
  meta["format_version"] = kFormatVersion;
  meta["dtype"] = "float32";
  meta["step"] = ps.step();
  json entries = json::array();
  for (const auto& e : ps.entries()) {
    json je;
    je["name"] = e.name;
    je["shape"] = e.value.shape;
    entries.push_back(std::move(je));
  }
  meta["entries"] = std::move(entries);
  meta["extra"] = json::parse(extra_json);

  {
    std::ofstream f(fs::path(dir) / "meta.json");
    if (!f) throw std::runtime_error("save_checkpoint: cannot write meta.json in " + dir);
    f << meta.dump(2) << "\n";
  }
  {
    std::ofstream f(fs::path(dir) / "params.bin", std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot write params.bin in " + dir);
    for (const auto& e : ps.entries())
      f.write(reinterpret_cast<const char*>(e.value.ptr()), static_cast<std::streamsize>(e.value.size() * 4));
    if (!f) throw std::runtime_error("save_checkpoint: short write to params.bin in " + dir);
  }
}

ParamSet load_checkpoint(const std::string& dir, std::string* extra_json) {
  fs::path meta_path = fs::path(dir) / "meta.json";
  fs::path bin_path = fs::path(dir) / "params.bin";
  if (!fs::exists(meta_path)) throw std::runtime_error("load_checkpoint: missing " + meta_path.string());
  if (!fs::exists(bin_path)) throw std::runtime_error("load_checkpoint: missing " + bin_path.string());

  json meta;
  {
    std::ifstream f(meta_path);
    f >> meta;
  }
  if (meta.value("format_version", -1) != kFormatVersion)
    throw std::runtime_error("load_checkpoint: unsupported format_version in " + meta_path.string());
  if (meta.value("dtype", "") != std::string("float32"))
    throw std::runtime_error("load_checkpoint: unsupported dtype in " + meta_path.string());

  ParamSet ps;
  ps.set_step(meta.value("step", 0));
  int64_t total = 0;
  std::vector<std::pair<std::string, Shape>> layout;
  for (const auto& je : meta.at("entries")) {
    Shape s = je.at("shape").get<Shape>();
    layout.emplace_back(je.at("name").get<std::string>(), s);
    total += shape_numel(s);
  }
  auto file_bytes = static_cast<int64_t>(fs::file_size(bin_path));
  if (file_bytes != total * 4)
    throw std::runtime_error("load_checkpoint: params.bin holds " + std::to_string(file_bytes) + " bytes, expected " +
                             std::to_string(total * 4));

  std::ifstream f(bin_path, std::ios::binary);
  for (auto& [name, shape] : layout) {
    Tensor<float> t(shape);
    f.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * 4));
    if (!f) throw std::runtime_error("load_checkpoint: short read from " + bin_path.string());
    ps.add(name, std::move(t));
  }
  if (extra_json) *extra_json = meta.at("extra").dump();
  return ps;
}

}  // namespace tueforge
