#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tueforge/geometry.hpp"
#include "tueforge/image.hpp"
#include "tueforge/rng.hpp"

namespace tueforge {

struct VideoRecord {
  std::string id;
  std::vector<Image8> frames;
  std::vector<BBox> boxes;  // one ground-truth box per frame
};

struct ManifestVideo {
  std::string id;
  int frames = 0;
};

struct DatasetManifest {
  int version = 1;
  std::string split;
  int frame_size = 0;
  uint64_t seed = 0;
  std::string provenance;
  std::vector<ManifestVideo> videos;
};

struct SynthConfig {
  int n_videos = 200;
  int n_frames = 20;
  int frame_size = 64;
  std::string split = "train";
  double target_min = 12.0;
  double target_max = 20.0;
  double step_px = 2.2;       // translation random walk scale per frame
  double scale_step = 0.02;   // log-scale random walk bound per frame
  double jitter = 0.10;       // per-frame target brightness jitter
};

// Checkerboard targets drifting over smooth value-noise backgrounds.
// Pure function of (config, seed): regeneration is bit-identical, and
// consecutive ground-truth boxes always overlap with IoU > 0.3.
std::vector<VideoRecord> generate_dataset(const SynthConfig& cfg, uint64_t seed);

DatasetManifest make_manifest(const SynthConfig& cfg, uint64_t seed, const std::vector<VideoRecord>& videos);

// Layout: root/manifest.json, root/<id>/frame_%04d.png, root/<id>/boxes.json
void save_dataset(const std::string& root, const DatasetManifest& manifest, const std::vector<VideoRecord>& videos);
std::pair<DatasetManifest, std::vector<VideoRecord>> load_dataset(const std::string& root);
DatasetManifest load_manifest(const std::string& root);

// uniform over ordered frame pairs (i,j), i != j, |i-j| <= max_gap
std::pair<int, int> sample_pair(int n_frames, int max_gap, Rng& rng);

// true while the corpus has never been through a protection stage; the
// protection ops refuse anything else so perturbations cannot stack
bool is_clean_provenance(const std::string& provenance);

}  // namespace tueforge
