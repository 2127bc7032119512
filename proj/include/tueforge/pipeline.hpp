#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tueforge/embaseline.hpp"
#include "tueforge/synthvideo.hpp"
#include "tueforge/tracker.hpp"
#include "tueforge/tuegen.hpp"

namespace tueforge {

inline constexpr const char* kVersion = "tueforge 0.1.0";

// ---- stage 1: joint generator/surrogate optimization ----

struct TrainConfig {
  int epochs = 15;
  float lr_gen = 1e-4f;    // generator Adam rate (alpha_s)
  float lr_surr = 1e-3f;   // surrogate Adam rate (alpha_g)
  float lambda_tcl = 0.05f;
  double tau = 0.2;        // contrastive temperature
  int batch = 16;
  int max_gap = 10;
  double shift_frac = 0.2;
  uint64_t seed = 1;
  GenConfig gen;
};

struct GenTrainResult {
  Generator gen;
  ParamSet surrogate;
  std::vector<double> gen_epoch_loss;   // mean joint loss (BCE + lambda*TCL) per epoch
  std::vector<double> surr_epoch_loss;  // mean response BCE per epoch (the surrogate's objective)
  std::vector<double> step_bce;         // response BCE per iteration, for descent checks
  double seconds = 0;                   // compute wall time
};

// Joint loop over the clean corpus: every iteration draws a batch of
// template/search pairs, builds the perturbed crops once, takes a generator
// Adam step on BCE + lambda*TCL and a surrogate Adam step on the BCE alone.
// Refuses non-clean corpora; a non-finite loss aborts with the step index.
GenTrainResult train_generator(const std::vector<VideoRecord>& videos, const DatasetManifest& manifest,
                               const TrainConfig& cfg);

// ---- stage 2: inference-only dataset protection ----

struct ProtectResult {
  std::vector<VideoRecord> videos;  // perturbed and re-quantized frames
  DatasetManifest manifest;         // provenance "tue-protected <- <old>"
  double seconds = 0;
};

// Per frame: crop the target box, run the generator, paste the bounded field
// back over the box, quantize to 8 bits. Pixels outside the boxes are
// untouched. Works on corpora the generator never saw.
ProtectResult protect_dataset(const Generator& gen, const std::vector<VideoRecord>& videos,
                              const DatasetManifest& manifest);

// ---- stages 1-4 as a grid ----

struct DataConfig {
  SynthConfig train;          // train-corpus shape; split forced to "train"
  int test_videos = 50;
  uint64_t seed = 1;          // train/test corpora derive from this
  uint64_t holdout_seed = 9;  // independently seeded corpus for the zero-shot arm
  bool holdout = true;
};

struct ExperimentConfig {
  DataConfig data;
  std::vector<std::string> methods = {"clean", "em", "tue", "tue-notcl"};
  std::vector<std::string> archs = {"conv", "attn"};
  std::vector<uint64_t> seeds = {1, 2, 3};
  TrainConfig train;
  EmOpts em;
  TrackTrainOpts victim;
  TrackInferOpts eval;
  std::string out_dir;
  bool save_datasets = false;  // write protected corpora as PNG trees too
};

// Strict JSON (re)parsing: unknown keys and malformed values throw
// std::invalid_argument naming the offending key.
ExperimentConfig experiment_config_from_json_text(const std::string& text);
std::string experiment_config_to_json_text(const ExperimentConfig& cfg);

struct MetricRow {
  std::string method;               // clean | em | em-context | tue | tue-notcl
  std::string arch;                 // conv | attn
  std::string dataset;              // main | holdout
  std::string dataset_provenance;   // provenance of the corpus the victim trained on
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  TrackMetrics metrics;             // on the clean test corpus
  double final_train_loss = 0;
  double smoothed_train_loss = 0;   // mean of the last three epoch means
  std::vector<double> victim_epoch_loss;
  double protect_seconds = 0;       // protection compute attributed to this cell
  double victim_seconds = 0;
  double eval_seconds = 0;
};

// per (method, arch, dataset) aggregate over seeds
struct MethodAggregate {
  std::string method, arch, dataset;
  int n = 0;
  double median_ao = 0;
  double abs_drop = 0;  // clean median AO minus this median (same arch, same dataset)
  double rel_drop = 0;  // 1 - median/clean_median
};

struct TueArtifact {  // one generator training run
  std::string method;  // tue | tue-notcl
  uint64_t seed = 0;
  std::vector<double> gen_epoch_loss, surr_epoch_loss;
  std::vector<double> step_bce;
  double train_seconds = 0, protect_seconds = 0;
  int64_t checkpoint_bytes = 0;  // saved generator directory
};

struct EmArtifact {  // one error-minimizing protection run
  std::string method;  // em | em-context
  uint64_t seed = 0;
  double protect_seconds = 0;  // alternation + paste compute
  int64_t tile_bytes = 0;      // saved tile-set directory
};

struct ExperimentReport {
  std::string config_text;  // resolved config as canonical JSON
  std::vector<MetricRow> rows;
  std::vector<MethodAggregate> aggregates;
  std::vector<TueArtifact> tue_artifacts;
  std::vector<EmArtifact> em_artifacts;
  bool partial = false;     // some cell failed; its row carries the error
  double total_seconds = 0;

  // Canonical JSON. With include_wallclock=false every timing field is
  // dropped, and two runs with the same config and seeds must match byte
  // for byte.
  std::string json_text(bool include_wallclock) const;
};

// Executes the full grid: corpora, per-(method, seed) protection shared
// across architectures, per-cell victim training and clean-test evaluation,
// the zero-shot holdout arm, and the aggregate table. A failing stage marks
// its cells and sets `partial` instead of aborting the grid.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// report.json (with wall-clock), curves/*.csv, run-meta.json
void write_report(const std::string& out_dir, const ExperimentReport& rep);

// recursive regular-file byte count
int64_t dir_bytes(const std::string& path);

// `run-meta.json` with the resolved config, version, and wall time
void write_run_meta(const std::string& dir, const std::string& config_json_text, double seconds);

}  // namespace tueforge
