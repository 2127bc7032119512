#include "tueforge/synthvideo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tueforge/kernels.hpp"

namespace tueforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kMinConsecIou = 0.3;

struct TargetStyle {
  double c1[3], c2[3];
  double cell;     // checker cell size in target-local px
  double aspect;   // h / w
};

// smooth per-channel background: coarse random grid upsampled bilinearly
Tensor<float> make_background(int size, Rng& rng) {
  const int grid = 9;
  Tensor<float> coarse(Shape{3, grid, grid});
  for (int64_t i = 0; i < coarse.size(); ++i) coarse[i] = rng.uniformf(0.10f, 0.90f);
  return kernels::resize_bilinear(coarse, size, size);
}

TargetStyle draw_style(Rng& rng) {
  TargetStyle s{};
  for (;;) {
    double dist = 0.0;
    for (int c = 0; c < 3; ++c) {
      s.c1[c] = rng.uniform(0.05, 0.95);
      s.c2[c] = rng.uniform(0.05, 0.95);
      dist += std::abs(s.c1[c] - s.c2[c]);
    }
    if (dist >= 0.8) break;  // keep the checker visibly two-toned
  }
  s.cell = rng.uniform(2.5, 4.5);
  s.aspect = rng.uniform(0.75, 1.3333);
  return s;
}

// render the checker target over the background; positions are continuous
void render_frame(Image8& out, const Tensor<float>& bg, const TargetStyle& style, const BBox& b, double gain) {
  int size = out.h;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double px = x + 0.5, py = y + 0.5;
      bool inside = px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h;
      for (int c = 0; c < 3; ++c) {
        double v;
        if (inside) {
          int iu = static_cast<int>(std::floor((px - b.x) / style.cell));
          int iv = static_cast<int>(std::floor((py - b.y) / style.cell));
          const double* col = ((iu + iv) & 1) ? style.c2 : style.c1;
          v = std::clamp(col[c] * gain, 0.0, 1.0);
        } else {
          v = bg.at(c, y, x);
        }
        out.at(y, x, c) = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
}

BBox box_from_state(double cx, double cy, double w, double h) { return {cx - w / 2.0, cy - h / 2.0, w, h}; }

}  // namespace

std::vector<VideoRecord> generate_dataset(const SynthConfig& cfg, uint64_t seed) {
  if (cfg.n_videos < 1 || cfg.n_frames < 2) throw std::invalid_argument("generate_dataset: need >=1 video, >=2 frames");
  if (cfg.frame_size < 32) throw std::invalid_argument("generate_dataset: frame_size must be >= 32");
  if (!(cfg.target_min >= 4.0) || !(cfg.target_max >= cfg.target_min) ||
      cfg.target_max * 2.0 > static_cast<double>(cfg.frame_size))
    throw std::invalid_argument("generate_dataset: target size range does not fit the frame");

  std::vector<VideoRecord> videos;
  videos.reserve(static_cast<size_t>(cfg.n_videos));
  uint64_t split_tag = detail::fnv1a(cfg.split);

  for (int vi = 0; vi < cfg.n_videos; ++vi) {
    Rng rng(derive_seed(seed, "synthvideo", split_tag, static_cast<uint64_t>(vi)));
    VideoRecord rec;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s-%04d", cfg.split.c_str(), vi);
      rec.id = buf;
    }
    auto bg = make_background(cfg.frame_size, rng);
    auto style = draw_style(rng);

    double base = rng.uniform(cfg.target_min, cfg.target_max);
    double w0 = style.aspect >= 1.0 ? base : base / style.aspect;
    double h0 = w0 * style.aspect;
    // keep the initial box inside the frame with margin
    double margin = 2.0;
    double cx = rng.uniform(w0 / 2.0 + margin, cfg.frame_size - w0 / 2.0 - margin);
    double cy = rng.uniform(h0 / 2.0 + margin, cfg.frame_size - h0 / 2.0 - margin);
    double log_scale = 0.0;

    const double ls_min = std::log(0.5), ls_max = std::log(2.0);
    rec.frames.reserve(static_cast<size_t>(cfg.n_frames));
    rec.boxes.reserve(static_cast<size_t>(cfg.n_frames));

    for (int fi = 0; fi < cfg.n_frames; ++fi) {
      if (fi > 0) {
        BBox prev = rec.boxes.back();
        for (int attempt = 0;; ++attempt) {
          double dx = rng.uniform(-cfg.step_px, cfg.step_px);
          double dy = rng.uniform(-cfg.step_px, cfg.step_px);
          double dls = rng.uniform(-cfg.scale_step, cfg.scale_step);
          double nls = std::clamp(log_scale + dls, ls_min, ls_max);
          double s = std::exp(nls);
          double w = w0 * s, h = h0 * s;
          // cap the scale so the target always fits the frame
          double fit = std::min((cfg.frame_size - 2.0 * margin) / w, (cfg.frame_size - 2.0 * margin) / h);
          if (fit < 1.0) {
            s *= fit;
            nls = std::log(s);
            w = w0 * s;
            h = h0 * s;
          }
          double nx = cx + dx, ny = cy + dy;
          // reflect at the boundary instead of walking out of frame
          double lo_x = w / 2.0 + margin, hi_x = cfg.frame_size - w / 2.0 - margin;
          double lo_y = h / 2.0 + margin, hi_y = cfg.frame_size - h / 2.0 - margin;
          if (nx < lo_x) nx = lo_x + (lo_x - nx);
          if (nx > hi_x) nx = hi_x - (nx - hi_x);
          if (ny < lo_y) ny = lo_y + (lo_y - ny);
          if (ny > hi_y) ny = hi_y - (ny - hi_y);
          nx = std::clamp(nx, lo_x, hi_x);
          ny = std::clamp(ny, lo_y, hi_y);
          BBox cand = box_from_state(nx, ny, w, h);
          if (iou(prev, cand) > kMinConsecIou) {
            cx = nx;
            cy = ny;
            log_scale = nls;
            break;
          }
          if (attempt >= 32)
            throw std::runtime_error("generate_dataset: could not keep consecutive overlap for " + rec.id);
        }
      }
      double s = std::exp(log_scale);
      BBox b = box_from_state(cx, cy, w0 * s, h0 * s);
      double gain = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter);
      Image8 frame(cfg.frame_size, cfg.frame_size);
      render_frame(frame, bg, style, b, gain);
      rec.frames.push_back(std::move(frame));
      rec.boxes.push_back(b);
    }
    videos.push_back(std::move(rec));
  }
  return videos;
}

DatasetManifest make_manifest(const SynthConfig& cfg, uint64_t seed, const std::vector<VideoRecord>& videos) {
  DatasetManifest m;
  m.split = cfg.split;
  m.frame_size = cfg.frame_size;
  m.seed = seed;
  std::ostringstream prov;
  prov << "synthvideo-v" << m.version << " seed=" << seed << " split=" << cfg.split << " videos=" << cfg.n_videos
       << " frames=" << cfg.n_frames << " size=" << cfg.frame_size;
  m.provenance = prov.str();
  for (auto& v : videos) m.videos.push_back({v.id, static_cast<int>(v.frames.size())});
  return m;
}

bool is_clean_provenance(const std::string& provenance) { return provenance.rfind("synthvideo", 0) == 0; }

void save_dataset(const std::string& root, const DatasetManifest& manifest, const std::vector<VideoRecord>& videos) {
  if (manifest.videos.size() != videos.size())
    throw std::invalid_argument("save_dataset: manifest lists " + std::to_string(manifest.videos.size()) +
                                " videos, got " + std::to_string(videos.size()));
  fs::create_directories(root);
  json jm;
  jm["version"] = manifest.version;
  jm["split"] = manifest.split;
  jm["frame_size"] = manifest.frame_size;
  jm["seed"] = manifest.seed;
  jm["provenance"] = manifest.provenance;
  json jv = json::array();
  for (auto& v : manifest.videos) jv.push_back({{"id", v.id}, {"frames", v.frames}});
  jm["videos"] = std::move(jv);
  {
    std::ofstream f(fs::path(root) / "manifest.json");
    if (!f) throw std::runtime_error("save_dataset: cannot write manifest in " + root);
    f << jm.dump(2) << "\n";
  }
  for (auto& v : videos) {
    fs::path vdir = fs::path(root) / v.id;
    fs::create_directories(vdir);
    for (size_t fi = 0; fi < v.frames.size(); ++fi) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%04d.png", static_cast<int>(fi));
      write_png((vdir / name).string(), v.frames[fi]);
    }
    json jb = json::array();
    for (auto& b : v.boxes) jb.push_back({b.x, b.y, b.w, b.h});
    std::ofstream f(vdir / "boxes.json");
    if (!f) throw std::runtime_error("save_dataset: cannot write boxes for " + v.id);
    f << jb.dump() << "\n";
  }
}

DatasetManifest load_manifest(const std::string& root) {
  fs::path mpath = fs::path(root) / "manifest.json";
  if (!fs::exists(mpath)) throw std::runtime_error("load_dataset: missing " + mpath.string());
  json jm;
  {
    std::ifstream f(mpath);
    f >> jm;
  }
  DatasetManifest m;
  m.version = jm.at("version").get<int>();
  if (m.version != 1) throw std::runtime_error("load_dataset: unsupported manifest version in " + mpath.string());
  m.split = jm.at("split").get<std::string>();
  m.frame_size = jm.at("frame_size").get<int>();
  m.seed = jm.at("seed").get<uint64_t>();
  m.provenance = jm.at("provenance").get<std::string>();
  for (auto& v : jm.at("videos")) m.videos.push_back({v.at("id").get<std::string>(), v.at("frames").get<int>()});
  return m;
}

std::pair<DatasetManifest, std::vector<VideoRecord>> load_dataset(const std::string& root) {
  DatasetManifest m = load_manifest(root);
  std::vector<VideoRecord> videos;
  videos.reserve(m.videos.size());
  for (auto& mv : m.videos) {
    VideoRecord rec;
    rec.id = mv.id;
    fs::path vdir = fs::path(root) / mv.id;
    for (int fi = 0; fi < mv.frames; ++fi) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%04d.png", fi);
      fs::path fp = vdir / name;
      if (!fs::exists(fp)) throw std::runtime_error("load_dataset: missing frame " + fp.string());
      Image8 im = read_png(fp.string());
      if (im.h != m.frame_size || im.w != m.frame_size)
        throw std::runtime_error("load_dataset: frame size mismatch in " + fp.string());
      rec.frames.push_back(std::move(im));
    }
    json jb;
    {
      std::ifstream f(vdir / "boxes.json");
      if (!f) throw std::runtime_error("load_dataset: missing boxes.json for " + mv.id);
      f >> jb;
    }
    if (static_cast<int>(jb.size()) != mv.frames)
      throw std::runtime_error("load_dataset: box count mismatch for " + mv.id);
    for (auto& b : jb) rec.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                            b.at(3).get<double>()});
    videos.push_back(std::move(rec));
  }
  return {std::move(m), std::move(videos)};
}

std::pair<int, int> sample_pair(int n_frames, int max_gap, Rng& rng) {
  if (n_frames < 2) throw std::invalid_argument("sample_pair: need at least two frames");
  if (max_gap < 1) throw std::invalid_argument("sample_pair: max_gap must be >= 1");
  // count admissible partners per template index, then draw uniformly over
  // the flattened set of ordered pairs
  int64_t total = 0;
  std::vector<int64_t> count(static_cast<size_t>(n_frames));
  for (int i = 0; i < n_frames; ++i) {
    int lo = std::max(0, i - max_gap), hi = std::min(n_frames - 1, i + max_gap);
    count[static_cast<size_t>(i)] = hi - lo;  // window minus self
    total += count[static_cast<size_t>(i)];
  }
  int64_t k = static_cast<int64_t>(rng.below(static_cast<uint64_t>(total)));
  for (int i = 0; i < n_frames; ++i) {
    if (k >= count[static_cast<size_t>(i)]) {
      k -= count[static_cast<size_t>(i)];
      continue;
    }
    int lo = std::max(0, i - max_gap);
    int j = lo + static_cast<int>(k);
    if (j >= i) ++j;  // skip the template frame itself
    return {i, j};
  }
  throw std::logic_error("sample_pair: enumeration out of range");
}

}  // namespace tueforge
