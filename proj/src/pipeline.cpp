#include "tueforge/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <numeric>
#include <stdexcept>
#include <tuple>
#include <utility>

#include <json.hpp>

#include "tueforge/optim.hpp"

namespace tueforge {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double secs_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (!(cfg.lr_gen > 0.0f)) throw std::invalid_argument("train config: lr_gen must be positive");
  if (!(cfg.lr_surr > 0.0f)) throw std::invalid_argument("train config: lr_surr must be positive");
  if (!(cfg.lambda_tcl >= 0.0f)) throw std::invalid_argument("train config: lambda_tcl must be >= 0");
  if (!(cfg.tau > 0.0)) throw std::invalid_argument("train config: tau must be positive");
  if (cfg.batch < 1) throw std::invalid_argument("train config: batch must be >= 1");
  if (cfg.max_gap < 1) throw std::invalid_argument("train config: max_gap must be >= 1");
}

double mean_tail(const std::vector<double>& v, size_t k) {
  if (v.empty()) return 0.0;
  size_t n = std::min(k, v.size());
  double s = 0.0;
  for (size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(n);
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// shortest round-trip decimal, locale independent
std::string num_str(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

// ---- stage 1 ----

GenTrainResult train_generator(const std::vector<VideoRecord>& videos, const DatasetManifest& manifest,
                               const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (videos.empty()) throw std::invalid_argument("train_generator: empty corpus");
  if (!is_clean_provenance(manifest.provenance))
    throw std::invalid_argument("train_generator: dataset provenance '" + manifest.provenance + "' is not clean");

  GenTrainResult res;
  res.gen = init_generator(cfg.gen, derive_seed(cfg.seed, "tuegen-init"));
  res.surrogate = init_tracker(Arch::ConvSiamese, derive_seed(cfg.seed, "tuegen-surrogate"));
  const TrackerLayout lay = layout_for(Arch::ConvSiamese);
  const int n = static_cast<int>(videos.size());

  auto t0 = Clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "tuegen-epoch", static_cast<uint64_t>(epoch)));
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());

    double joint_sum = 0.0, bce_sum = 0.0;
    int steps = 0;
    for (int start = 0; start < n; start += cfg.batch) {
      const int bsz = std::min(cfg.batch, n - start);
      try {
        // One graph per step. The perturbed crops are built once and feed
        // both updates: the generator trains on response BCE plus the
        // contrastive term, the surrogate on the response BCE alone. The
        // contrastive branch runs through a frozen surrogate binder so its
        // gradient never reaches the surrogate weights.
        Graph<float> g;
        ParamBinder<float> pg(g, res.gen.w, true);
        ParamBinder<float> ps_train(g, res.surrogate, true);
        ParamBinder<float> ps_frozen(g, res.surrogate, false);

        std::vector<TuePairSpec<float>> specs;
        std::vector<std::pair<double, double>> targets;
        specs.reserve(static_cast<size_t>(bsz));
        for (int bi = 0; bi < bsz; ++bi) {
          const int vi = order[static_cast<size_t>(start + bi)];
          const VideoRecord& v = videos[static_cast<size_t>(vi)];
          PairSample s = draw_pair_sample(v, vi, lay, cfg.max_gap, cfg.shift_frac, rng);
          TuePairSpec<float> sp;
          sp.z = crop_template(v, s, lay);
          sp.x = crop_search(v, s, lay);
          sp.target_in_x = target_rect_in_search(s, lay);
          sp.e = crop_exact(sp.x, sp.target_in_x, cfg.gen.input_size);
          const Image8& f = v.frames[0];
          sp.cond_z = normalize_bbox(s.box_i, f.w, f.h);
          sp.cond_x = normalize_bbox(s.box_j, f.w, f.h);
          specs.push_back(std::move(sp));
          targets.emplace_back(s.target_px, s.target_py);
        }

        auto pairs = tue_batch_graph(g, pg, cfg.gen, specs);
        std::vector<TclItem<float>> items;
        Var<float> bce{};
        for (int i = 0; i < bsz; ++i) {
          auto resp = nets::response_map(g, ps_train, Arch::ConvSiamese, pairs[i].z_hat, pairs[i].x_hat);
          auto li = balanced_bce(g, resp, gt_response(lay, targets[i].first, targets[i].second));
          bce = i == 0 ? li : g.add(bce, li);
          items.push_back({pairs[i].z_hat, pairs[i].e_hat, pairs[i].z, pairs[i].e});
        }
        auto mean_bce = g.mul_scalar(bce, 1.0f / static_cast<float>(bsz));
        Var<float> loss = mean_bce;
        if (cfg.lambda_tcl > 0.0f)
          loss = g.add(mean_bce, g.mul_scalar(tcl_loss(g, ps_frozen, items, cfg.tau), cfg.lambda_tcl));

        std::map<std::string, Var<float>> wrt = pg.bound();
        for (const auto& [name, v] : ps_train.bound()) wrt.emplace(name, v);
        auto [val, grads] = eval_and_grad(g, loss, wrt);
        const double step_bce = static_cast<double>(g.scalar_value(mean_bce));

        GradMap gen_grads, surr_grads;
        for (auto& [name, t] : grads) {
          if (name.rfind("gen.", 0) == 0)
            gen_grads.emplace(name, std::move(t));
          else
            surr_grads.emplace(name, std::move(t));
        }
        adam_step(res.gen.w, gen_grads, cfg.lr_gen);
        adam_step(res.surrogate, surr_grads, cfg.lr_surr);

        joint_sum += static_cast<double>(val);
        bce_sum += step_bce;
        res.step_bce.push_back(step_bce);
        ++steps;
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("train_generator: epoch " + std::to_string(epoch + 1) + " step " +
                                 std::to_string(steps + 1) + ": " + e.what());
      }
    }
    res.gen_epoch_loss.push_back(joint_sum / steps);
    res.surr_epoch_loss.push_back(bce_sum / steps);
  }
  res.seconds = secs_since(t0);
  return res;
}

// ---- stage 2 ----

ProtectResult protect_dataset(const Generator& gen, const std::vector<VideoRecord>& videos,
                              const DatasetManifest& manifest) {
  if (!is_clean_provenance(manifest.provenance))
    throw std::invalid_argument("protect_dataset: dataset provenance '" + manifest.provenance + "' is not clean");

  ProtectResult res;
  res.videos.reserve(videos.size());
  auto t0 = Clock::now();
  for (const VideoRecord& v : videos) {
    if (v.boxes.size() != v.frames.size())
      throw std::invalid_argument("protect_dataset: video '" + v.id + "' has " + std::to_string(v.boxes.size()) +
                                  " boxes for " + std::to_string(v.frames.size()) + " frames");
    VideoRecord out;
    out.id = v.id;
    out.boxes = v.boxes;
    out.frames.reserve(v.frames.size());

    // one stacked generator pass over the whole video
    std::vector<Tensor<float>> imgs, patches;
    std::vector<NormBBox> conds;
    for (size_t f = 0; f < v.frames.size(); ++f) {
      Tensor<float> img = to_float_chw(v.frames[f]);
      patches.push_back(crop_exact(img, v.boxes[f], gen.cfg.input_size));
      conds.push_back(normalize_bbox(v.boxes[f], v.frames[f].w, v.frames[f].h));
      imgs.push_back(std::move(img));
    }
    auto fields = generator_forward_batch(gen, patches, conds);
    for (size_t f = 0; f < v.frames.size(); ++f) out.frames.push_back(to_image8(paste(imgs[f], fields[f], v.boxes[f])));
    res.videos.push_back(std::move(out));
  }
  res.seconds = secs_since(t0);
  res.manifest = manifest;
  res.manifest.provenance = "tue-protected <- " + manifest.provenance;
  return res;
}

// ---- config (de)serialization ----

namespace {

std::string key_path(const std::string& where, const std::string& key) {
  return where.empty() ? key : where + "." + key;
}

void require_object(const json& j, const std::string& where) {
  if (!j.is_object())
    throw std::invalid_argument("config: '" + (where.empty() ? std::string("<root>") : where) + "' must be an object");
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) throw std::invalid_argument("config: unknown key '" + key_path(where, it.key()) + "'");
  }
}

template <class T>
void read_field(const json& j, const std::string& where, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    throw std::invalid_argument("config: bad value for '" + key_path(where, key) + "'");
  }
}

std::string canonical_method(std::string m) {
  if (m == "em+context") return "em-context";
  if (m == "tue-no-tcl") return "tue-notcl";
  return m;
}

bool known_method(const std::string& m) {
  return m == "clean" || m == "em" || m == "em-context" || m == "tue" || m == "tue-notcl";
}

}  // namespace

ExperimentConfig experiment_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: parse error: ") + e.what());
  }
  require_object(j, "");
  check_keys(j, "",
             {"dataset", "methods", "archs", "seeds", "train", "protect", "victim", "eval", "out_dir", "save_datasets"});

  ExperimentConfig cfg;
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    require_object(d, "dataset");
    check_keys(d, "dataset",
               {"videos", "frames", "size", "test_videos", "seed", "holdout_seed", "holdout", "target_min",
                "target_max", "step_px", "scale_step", "jitter"});
    read_field(d, "dataset", "videos", cfg.data.train.n_videos);
    read_field(d, "dataset", "frames", cfg.data.train.n_frames);
    read_field(d, "dataset", "size", cfg.data.train.frame_size);
    read_field(d, "dataset", "test_videos", cfg.data.test_videos);
    read_field(d, "dataset", "seed", cfg.data.seed);
    read_field(d, "dataset", "holdout_seed", cfg.data.holdout_seed);
    read_field(d, "dataset", "holdout", cfg.data.holdout);
    read_field(d, "dataset", "target_min", cfg.data.train.target_min);
    read_field(d, "dataset", "target_max", cfg.data.train.target_max);
    read_field(d, "dataset", "step_px", cfg.data.train.step_px);
    read_field(d, "dataset", "scale_step", cfg.data.train.scale_step);
    read_field(d, "dataset", "jitter", cfg.data.train.jitter);
  }
  if (j.contains("methods")) {
    std::vector<std::string> ms;
    read_field(j, "", "methods", ms);
    for (auto& m : ms) {
      m = canonical_method(m);
      if (!known_method(m)) throw std::invalid_argument("config: unknown method '" + m + "'");
    }
    cfg.methods = std::move(ms);
  }
  if (j.contains("archs")) {
    std::vector<std::string> as;
    read_field(j, "", "archs", as);
    for (auto& a : as) {
      try {
        a = arch_to_string(arch_from_string(a));
      } catch (const std::exception&) {
        throw std::invalid_argument("config: unknown arch '" + a + "'");
      }
    }
    cfg.archs = std::move(as);
  }
  read_field(j, "", "seeds", cfg.seeds);
  if (j.contains("train")) {
    const json& t = j.at("train");
    require_object(t, "train");
    check_keys(t, "train",
               {"epochs", "lr_gen", "lr_surr", "lambda_tcl", "tau", "batch", "max_gap", "shift_frac", "seed", "gen"});
    read_field(t, "train", "epochs", cfg.train.epochs);
    read_field(t, "train", "lr_gen", cfg.train.lr_gen);
    read_field(t, "train", "lr_surr", cfg.train.lr_surr);
    read_field(t, "train", "lambda_tcl", cfg.train.lambda_tcl);
    read_field(t, "train", "tau", cfg.train.tau);
    read_field(t, "train", "batch", cfg.train.batch);
    read_field(t, "train", "max_gap", cfg.train.max_gap);
    read_field(t, "train", "shift_frac", cfg.train.shift_frac);
    read_field(t, "train", "seed", cfg.train.seed);
    if (t.contains("gen")) {
      const json& g = t.at("gen");
      require_object(g, "train.gen");
      check_keys(g, "train.gen", {"input_size", "patch", "depth", "heads", "width", "cond_width", "mlp_hidden"});
      read_field(g, "train.gen", "input_size", cfg.train.gen.input_size);
      read_field(g, "train.gen", "patch", cfg.train.gen.patch);
      read_field(g, "train.gen", "depth", cfg.train.gen.depth);
      read_field(g, "train.gen", "heads", cfg.train.gen.heads);
      read_field(g, "train.gen", "width", cfg.train.gen.width);
      read_field(g, "train.gen", "cond_width", cfg.train.gen.cond_width);
      read_field(g, "train.gen", "mlp_hidden", cfg.train.gen.mlp_hidden);
    }
  }
  if (j.contains("protect")) {
    const json& p = j.at("protect");
    require_object(p, "protect");
    check_keys(p, "protect", {"inner_steps", "alpha", "outer_epochs", "with_context", "seed", "batch", "lr", "max_gap"});
    read_field(p, "protect", "inner_steps", cfg.em.inner_steps);
    read_field(p, "protect", "alpha", cfg.em.alpha);
    read_field(p, "protect", "outer_epochs", cfg.em.outer_epochs);
    read_field(p, "protect", "with_context", cfg.em.with_context);
    read_field(p, "protect", "seed", cfg.em.seed);
    read_field(p, "protect", "batch", cfg.em.batch);
    read_field(p, "protect", "lr", cfg.em.lr);
    read_field(p, "protect", "max_gap", cfg.em.max_gap);
  }
  if (j.contains("victim")) {
    const json& v = j.at("victim");
    require_object(v, "victim");
    check_keys(v, "victim", {"epochs", "batch", "lr", "max_gap", "shift_frac", "seed"});
    read_field(v, "victim", "epochs", cfg.victim.epochs);
    read_field(v, "victim", "batch", cfg.victim.batch);
    read_field(v, "victim", "lr", cfg.victim.lr);
    read_field(v, "victim", "max_gap", cfg.victim.max_gap);
    read_field(v, "victim", "shift_frac", cfg.victim.shift_frac);
    read_field(v, "victim", "seed", cfg.victim.seed);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    require_object(e, "eval");
    check_keys(e, "eval", {"scales", "scale_penalty", "scale_damping"});
    read_field(e, "eval", "scales", cfg.eval.scales);
    read_field(e, "eval", "scale_penalty", cfg.eval.scale_penalty);
    read_field(e, "eval", "scale_damping", cfg.eval.scale_damping);
  }
  read_field(j, "", "out_dir", cfg.out_dir);
  read_field(j, "", "save_datasets", cfg.save_datasets);
  return cfg;
}

std::string experiment_config_to_json_text(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = {{"videos", cfg.data.train.n_videos},
                  {"frames", cfg.data.train.n_frames},
                  {"size", cfg.data.train.frame_size},
                  {"test_videos", cfg.data.test_videos},
                  {"seed", cfg.data.seed},
                  {"holdout_seed", cfg.data.holdout_seed},
                  {"holdout", cfg.data.holdout},
                  {"target_min", cfg.data.train.target_min},
                  {"target_max", cfg.data.train.target_max},
                  {"step_px", cfg.data.train.step_px},
                  {"scale_step", cfg.data.train.scale_step},
                  {"jitter", cfg.data.train.jitter}};
  j["methods"] = cfg.methods;
  j["archs"] = cfg.archs;
  j["seeds"] = cfg.seeds;
  j["train"] = {{"epochs", cfg.train.epochs},
                {"lr_gen", cfg.train.lr_gen},
                {"lr_surr", cfg.train.lr_surr},
                {"lambda_tcl", cfg.train.lambda_tcl},
                {"tau", cfg.train.tau},
                {"batch", cfg.train.batch},
                {"max_gap", cfg.train.max_gap},
                {"shift_frac", cfg.train.shift_frac},
                {"seed", cfg.train.seed},
                {"gen",
                 {{"input_size", cfg.train.gen.input_size},
                  {"patch", cfg.train.gen.patch},
                  {"depth", cfg.train.gen.depth},
                  {"heads", cfg.train.gen.heads},
                  {"width", cfg.train.gen.width},
                  {"cond_width", cfg.train.gen.cond_width},
                  {"mlp_hidden", cfg.train.gen.mlp_hidden}}}};
  j["protect"] = {{"inner_steps", cfg.em.inner_steps}, {"alpha", cfg.em.alpha},
                  {"outer_epochs", cfg.em.outer_epochs}, {"with_context", cfg.em.with_context},
                  {"seed", cfg.em.seed},                 {"batch", cfg.em.batch},
                  {"lr", cfg.em.lr},                     {"max_gap", cfg.em.max_gap}};
  j["victim"] = {{"epochs", cfg.victim.epochs}, {"batch", cfg.victim.batch},
                 {"lr", cfg.victim.lr},         {"max_gap", cfg.victim.max_gap},
                 {"shift_frac", cfg.victim.shift_frac}, {"seed", cfg.victim.seed}};
  j["eval"] = {{"scales", cfg.eval.scales},
               {"scale_penalty", cfg.eval.scale_penalty},
               {"scale_damping", cfg.eval.scale_damping}};
  j["out_dir"] = cfg.out_dir;
  j["save_datasets"] = cfg.save_datasets;
  return j.dump(2) + "\n";
}

// ---- grid execution ----

namespace {

// everything one protection run hands to the victim cells behind it
struct ProtCell {
  bool ok = false;
  std::string error;
  std::vector<VideoRecord> videos;  // empty for clean (the cell reads the corpus directly)
  DatasetManifest manifest;
  double seconds = 0;
};

void check_stage_isolation(const std::string& method, const std::string& provenance) {
  bool ok = method == "clean"          ? is_clean_provenance(provenance)
            : method == "em"           ? provenance.rfind("em-protected ", 0) == 0
            : method == "em-context"   ? provenance.rfind("em-protected+ctx ", 0) == 0
                                       : provenance.rfind("tue-protected ", 0) == 0;
  if (!ok)
    throw std::logic_error("run_experiment: method '" + method + "' got a corpus with provenance '" + provenance + "'");
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  if (cfg.methods.empty()) throw std::invalid_argument("run_experiment: methods must not be empty");
  if (cfg.archs.empty()) throw std::invalid_argument("run_experiment: archs must not be empty");
  if (cfg.seeds.empty()) throw std::invalid_argument("run_experiment: seeds must not be empty");
  bool has_clean = false, has_tue = false;
  for (const std::string& m : cfg.methods) {
    if (!known_method(m)) throw std::invalid_argument("run_experiment: unknown method '" + m + "'");
    has_clean |= m == "clean";
    has_tue |= m == "tue" || m == "tue-notcl";
  }
  if (!has_clean)
    throw std::invalid_argument("run_experiment: methods must include 'clean' (the drop columns are relative to it)");
  std::vector<Arch> archs;
  for (const std::string& a : cfg.archs) archs.push_back(arch_from_string(a));
  if (has_tue) validate_train_config(cfg.train);

  ExperimentReport rep;
  rep.config_text = experiment_config_to_json_text(cfg);
  auto t_total = Clock::now();

  // artifact directory: the requested one, or a scratch area that only
  // exists long enough to measure checkpoint sizes
  const bool keep = !cfg.out_dir.empty();
  fs::path art_root;
  if (keep) {
    art_root = cfg.out_dir;
  } else {
    art_root = fs::temp_directory_path() /
               ("tueforge-scratch-" + std::to_string(Clock::now().time_since_epoch().count()));
  }
  fs::create_directories(art_root);

  // corpora
  SynthConfig tr_cfg = cfg.data.train;
  tr_cfg.split = "train";
  const uint64_t tr_seed = derive_seed(cfg.data.seed, "corpus", 0);
  const auto train_videos = generate_dataset(tr_cfg, tr_seed);
  const auto train_manifest = make_manifest(tr_cfg, tr_seed, train_videos);

  SynthConfig te_cfg = tr_cfg;
  te_cfg.split = "test";
  te_cfg.n_videos = cfg.data.test_videos;
  const auto test_videos = generate_dataset(te_cfg, derive_seed(cfg.data.seed, "corpus", 1));

  const bool want_holdout = cfg.data.holdout && std::find(cfg.methods.begin(), cfg.methods.end(), "tue") != cfg.methods.end();
  std::vector<VideoRecord> holdout_videos;
  DatasetManifest holdout_manifest;
  if (want_holdout) {
    SynthConfig ho_cfg = tr_cfg;
    ho_cfg.split = "holdout";
    const uint64_t ho_seed = derive_seed(cfg.data.holdout_seed, "corpus", 0);
    holdout_videos = generate_dataset(ho_cfg, ho_seed);
    holdout_manifest = make_manifest(ho_cfg, ho_seed, holdout_videos);
  }

  std::map<uint64_t, Generator> tue_generators;  // kept for the zero-shot holdout arm

  auto run_victim_cell = [&](MetricRow& row, const std::vector<VideoRecord>& corpus, Arch arch, uint64_t victim_seed) {
    TrackTrainOpts vo = cfg.victim;
    vo.seed = victim_seed;
    auto tv = Clock::now();
    TrackTrainResult tr = train_tracker(corpus, arch, vo);
    row.victim_seconds = secs_since(tv);
    row.victim_epoch_loss = tr.epoch_loss;
    row.final_train_loss = tr.epoch_loss.empty() ? 0.0 : tr.epoch_loss.back();
    row.smoothed_train_loss = mean_tail(tr.epoch_loss, 3);
    auto te = Clock::now();
    row.metrics = evaluate_tracker(tr.params, arch, test_videos, te_cfg.frame_size, cfg.eval);
    row.eval_seconds = secs_since(te);
    row.ok = true;
  };

  for (const std::string& method : cfg.methods) {
    for (uint64_t seed : cfg.seeds) {
      // protection once per (method, seed); both architectures reuse it
      ProtCell cell;
      try {
        if (method == "clean") {
          cell.manifest = train_manifest;
        } else if (method == "em" || method == "em-context") {
          EmOpts eo = cfg.em;
          eo.seed = seed;
          eo.with_context = method == "em-context";
          EmProtectResult r = em_protect_dataset(train_videos, train_manifest, eo);
          cell.videos = std::move(r.videos);
          cell.manifest = std::move(r.manifest);
          cell.seconds = r.optimize_seconds;
          EmArtifact ea;
          ea.method = method;
          ea.seed = seed;
          ea.protect_seconds = r.optimize_seconds;
          const fs::path dir = art_root / ("em-tiles-" + method + "-seed" + std::to_string(seed));
          save_noise_tiles(dir.string(), r.tiles, eo.with_context, eo.budget);
          ea.tile_bytes = dir_bytes(dir.string());
          if (!keep) fs::remove_all(dir);
          rep.em_artifacts.push_back(std::move(ea));
        } else {
          TrainConfig tc = cfg.train;
          tc.seed = derive_seed(seed, "tue-train");
          if (method == "tue-notcl") tc.lambda_tcl = 0.0f;
          GenTrainResult g = train_generator(train_videos, train_manifest, tc);
          ProtectResult p = protect_dataset(g.gen, train_videos, train_manifest);
          cell.videos = std::move(p.videos);
          cell.manifest = std::move(p.manifest);
          cell.seconds = g.seconds + p.seconds;
          TueArtifact ta;
          ta.method = method;
          ta.seed = seed;
          ta.gen_epoch_loss = g.gen_epoch_loss;
          ta.surr_epoch_loss = g.surr_epoch_loss;
          ta.step_bce = g.step_bce;
          ta.train_seconds = g.seconds;
          ta.protect_seconds = p.seconds;
          const fs::path dir = art_root / ("generator-" + method + "-seed" + std::to_string(seed));
          save_generator(dir.string(), g.gen);
          ta.checkpoint_bytes = dir_bytes(dir.string());
          if (!keep) fs::remove_all(dir);
          rep.tue_artifacts.push_back(std::move(ta));
          if (method == "tue") tue_generators.emplace(seed, std::move(g.gen));
        }
        if (cfg.save_datasets && keep && method != "clean")
          save_dataset((art_root / ("data-" + method + "-seed" + std::to_string(seed))).string(), cell.manifest,
                       cell.videos);
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
        rep.partial = true;
      }

      const std::vector<VideoRecord>& corpus = method == "clean" ? train_videos : cell.videos;
      for (size_t ai = 0; ai < archs.size(); ++ai) {
        MetricRow row;
        row.method = method;
        row.arch = cfg.archs[ai];
        row.dataset = "main";
        row.seed = seed;
        if (!cell.ok) {
          row.error = "protection: " + cell.error;
          rep.rows.push_back(std::move(row));
          continue;
        }
        row.dataset_provenance = cell.manifest.provenance;
        row.protect_seconds = cell.seconds;
        try {
          check_stage_isolation(method, cell.manifest.provenance);
          // same victim seed for every method: an uncontaminated comparison
          // of what the corpus alone changes
          run_victim_cell(row, corpus, archs[ai], derive_seed(seed, "victim", static_cast<uint64_t>(archs[ai]), 0));
        } catch (const std::exception& e) {
          row.ok = false;
          row.error = e.what();
          rep.partial = true;
        }
        rep.rows.push_back(std::move(row));
      }
    }
  }

  // zero-shot arm: protect a corpus the generator never saw, then compare a
  // victim trained on it against one trained on the same corpus clean
  if (want_holdout) {
    const uint64_t s0 = cfg.seeds.front();
    const Arch ha = archs.front();
    const uint64_t victim_seed = derive_seed(s0, "victim", static_cast<uint64_t>(ha), 1);

    MetricRow rc;
    rc.method = "clean";
    rc.arch = cfg.archs.front();
    rc.dataset = "holdout";
    rc.seed = s0;
    rc.dataset_provenance = holdout_manifest.provenance;
    try {
      run_victim_cell(rc, holdout_videos, ha, victim_seed);
    } catch (const std::exception& e) {
      rc.ok = false;
      rc.error = e.what();
      rep.partial = true;
    }
    rep.rows.push_back(std::move(rc));

    MetricRow rt;
    rt.method = "tue";
    rt.arch = cfg.archs.front();
    rt.dataset = "holdout";
    rt.seed = s0;
    try {
      auto it = tue_generators.find(s0);
      if (it == tue_generators.end())
        throw std::runtime_error("holdout: no generator for seed " + std::to_string(s0) +
                                 " (its training stage failed)");
      ProtectResult p = protect_dataset(it->second, holdout_videos, holdout_manifest);
      rt.protect_seconds = p.seconds;
      rt.dataset_provenance = p.manifest.provenance;
      check_stage_isolation("tue", p.manifest.provenance);
      run_victim_cell(rt, p.videos, ha, victim_seed);
    } catch (const std::exception& e) {
      rt.ok = false;
      rt.error = e.what();
      rep.partial = true;
    }
    rep.rows.push_back(std::move(rt));
  }

  // aggregates: median over seeds, drops relative to the clean median of the
  // same architecture and dataset
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
  for (const MetricRow& r : rep.rows)
    if (r.ok) groups[{r.method, r.arch, r.dataset}].push_back(r.metrics.ao);
  std::map<std::pair<std::string, std::string>, double> clean_median;
  for (const auto& [key, aos] : groups)
    if (std::get<0>(key) == "clean") clean_median[{std::get<1>(key), std::get<2>(key)}] = median_of(aos);
  for (const auto& [key, aos] : groups) {
    MethodAggregate a;
    a.method = std::get<0>(key);
    a.arch = std::get<1>(key);
    a.dataset = std::get<2>(key);
    a.n = static_cast<int>(aos.size());
    a.median_ao = median_of(aos);
    if (a.method != "clean") {
      auto it = clean_median.find({a.arch, a.dataset});
      if (it != clean_median.end() && it->second > 0.0) {
        a.abs_drop = it->second - a.median_ao;
        a.rel_drop = 1.0 - a.median_ao / it->second;
      }
    }
    rep.aggregates.push_back(std::move(a));
  }

  if (!keep) {
    std::error_code ec;
    fs::remove_all(art_root, ec);
  }
  rep.total_seconds = secs_since(t_total);
  return rep;
}

// ---- report serialization ----

std::string ExperimentReport::json_text(bool include_wallclock) const {
  json j;
  j["version"] = kVersion;
  j["config"] = json::parse(config_text);
  j["partial"] = partial;
  json jrows = json::array();
  for (const MetricRow& r : rows) {
    json rj;
    rj["method"] = r.method;
    rj["arch"] = r.arch;
    rj["dataset"] = r.dataset;
    rj["dataset_provenance"] = r.dataset_provenance;
    rj["seed"] = r.seed;
    rj["ok"] = r.ok;
    rj["error"] = r.error;
    rj["metrics"] = {{"ao", r.metrics.ao},
                     {"sr05", r.metrics.sr05},
                     {"sr075", r.metrics.sr075},
                     {"auc", r.metrics.auc},
                     {"prec", r.metrics.prec}};
    rj["final_train_loss"] = r.final_train_loss;
    rj["smoothed_train_loss"] = r.smoothed_train_loss;
    rj["victim_epoch_loss"] = r.victim_epoch_loss;
    if (include_wallclock) {
      rj["protect_seconds"] = r.protect_seconds;
      rj["victim_seconds"] = r.victim_seconds;
      rj["eval_seconds"] = r.eval_seconds;
    }
    jrows.push_back(std::move(rj));
  }
  j["rows"] = std::move(jrows);
  json jagg = json::array();
  for (const MethodAggregate& a : aggregates)
    jagg.push_back({{"method", a.method},
                    {"arch", a.arch},
                    {"dataset", a.dataset},
                    {"n", a.n},
                    {"median_ao", a.median_ao},
                    {"abs_drop", a.abs_drop},
                    {"rel_drop", a.rel_drop}});
  j["aggregates"] = std::move(jagg);
  json jtue = json::array();
  for (const TueArtifact& t : tue_artifacts) {
    json tj;
    tj["method"] = t.method;
    tj["seed"] = t.seed;
    tj["gen_epoch_loss"] = t.gen_epoch_loss;
    tj["surr_epoch_loss"] = t.surr_epoch_loss;
    tj["step_bce"] = t.step_bce;
    tj["checkpoint_bytes"] = t.checkpoint_bytes;
    if (include_wallclock) {
      tj["train_seconds"] = t.train_seconds;
      tj["protect_seconds"] = t.protect_seconds;
    }
    jtue.push_back(std::move(tj));
  }
  j["tue_artifacts"] = std::move(jtue);
  json jem = json::array();
  for (const EmArtifact& e : em_artifacts) {
    json ej;
    ej["method"] = e.method;
    ej["seed"] = e.seed;
    ej["tile_bytes"] = e.tile_bytes;
    if (include_wallclock) ej["protect_seconds"] = e.protect_seconds;
    jem.push_back(std::move(ej));
  }
  j["em_artifacts"] = std::move(jem);
  if (include_wallclock) j["total_seconds"] = total_seconds;
  return j.dump(2) + "\n";
}

void write_report(const std::string& out_dir, const ExperimentReport& rep) {
  if (out_dir.empty()) throw std::invalid_argument("write_report: empty output directory");
  const fs::path root = out_dir;
  fs::create_directories(root / "curves");
  {
    std::ofstream f(root / "report.json");
    if (!f) throw std::runtime_error("write_report: cannot write report.json in " + out_dir);
    f << rep.json_text(true);
  }
  for (const TueArtifact& t : rep.tue_artifacts) {
    std::ofstream f(root / "curves" / ("generator-" + t.method + "-seed" + std::to_string(t.seed) + ".csv"));
    f << "epoch,joint_loss,response_bce\n";
    for (size_t i = 0; i < t.gen_epoch_loss.size(); ++i)
      f << i + 1 << "," << num_str(t.gen_epoch_loss[i]) << ","
        << num_str(i < t.surr_epoch_loss.size() ? t.surr_epoch_loss[i] : 0.0) << "\n";
  }
  for (const MetricRow& r : rep.rows) {
    if (r.victim_epoch_loss.empty()) continue;
    std::ofstream f(root / "curves" /
                    ("victim-" + r.method + "-" + r.arch + "-" + r.dataset + "-seed" + std::to_string(r.seed) + ".csv"));
    f << "epoch,loss\n";
    for (size_t i = 0; i < r.victim_epoch_loss.size(); ++i) f << i + 1 << "," << num_str(r.victim_epoch_loss[i]) << "\n";
  }
  write_run_meta(out_dir, rep.config_text, rep.total_seconds);
}

int64_t dir_bytes(const std::string& path) {
  if (!fs::exists(path)) return 0;
  int64_t total = 0;
  for (const auto& entry : fs::recursive_directory_iterator(path))
    if (entry.is_regular_file()) total += static_cast<int64_t>(entry.file_size());
  return total;
}

void write_run_meta(const std::string& dir, const std::string& config_json_text, double seconds) {
  fs::create_directories(dir);
  json j;
  j["version"] = kVersion;
  try {
    j["config"] = json::parse(config_json_text);
  } catch (const json::exception&) {
    j["config"] = config_json_text;
  }
  j["wall_seconds"] = seconds;
  std::ofstream f(fs::path(dir) / "run-meta.json");
  if (!f) throw std::runtime_error("write_run_meta: cannot write run-meta.json in " + dir);
  f << j.dump(2) << "\n";
}

}  // namespace tueforge
