#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <thread>

#include <Eigen/Geometry>
#include <json.hpp>

#include "equidesc/bench.hpp"
#include "equidesc/network.hpp"
#include "equidesc/orient.hpp"
#include "equidesc/signal.hpp"
#include "equidesc/train.hpp"
#include "manifest.hpp"

namespace equidesc::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// Stream tags for derive_rng; the init tag matches the trainer's.
constexpr std::uint32_t kInitTag = 3;
constexpr std::uint32_t kRotateTag = 101;
constexpr std::uint32_t kKeypointTag = 102;
constexpr std::uint32_t kRandomTag = 103;
constexpr std::uint32_t kPatchTag = 104;
constexpr std::uint32_t kCheckTag = 105;

void EnsureDir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("unwritable output directory '" + dir + "'");
  const fs::path probe = fs::path(dir) / ".equidesc_write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw Error("unwritable output directory '" + dir + "'");
  }
  fs::remove(probe, ec);
}

std::string Join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::string Num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void WriteText(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

void Require(bool ok, const std::string& message) {
  if (!ok) throw UsageError(message);
}

void AddSceneInputs(RunManifest& m, const std::string& dir) {
  m.add_input(Join(dir, "scene.json"));
  const nlohmann::json index = nlohmann::json::parse(std::ifstream(Join(dir, "scene.json")));
  for (const auto& e : index.at("pairs")) {
    for (const char* key : {"source", "target", "pose"}) {
      m.add_input(Join(dir, e.at(key).get<std::string>()));
    }
  }
}

std::string PairStem(std::size_t p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pair_%03zu", p);
  return buf;
}

double Median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> Ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * (i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double Spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const std::vector<double> ra = Ranks(a), rb = Ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return saa > 0.0 && sbb > 0.0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

// Runs f(i) for i in [0, n) on up to `threads` workers with a fixed
// assignment, so results stored by index do not depend on scheduling.
template <typename F>
void ParallelFor(std::size_t n, int threads, F&& f) {
  const int workers = static_cast<int>(std::min<std::size_t>(std::max(threads, 1), std::max<std::size_t>(n, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += workers) f(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (std::thread& th : pool) th.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------- synth

std::shared_ptr<Command> Synth(CLI::App& app) {
  struct Opts {
    SceneSpec spec;
    std::uint64_t seed = 0;
    std::string out_dir;
  };
  auto o = std::make_shared<Opts>();
  auto cmd = std::make_shared<Command>();
  CLI::App* sub = app.add_subcommand("synth", "Generate a synthetic fragment-pair scene");
  sub->add_option("--pairs", o->spec.pairs, "Number of fragment pairs")->capture_default_str();
  sub->add_option("--points", o->spec.points, "Points per fragment")->capture_default_str();
  sub->add_option("--noise", o->spec.noise, "Gaussian point noise (m)")->capture_default_str();
  sub->add_option("--overlap", o->spec.overlap, "Target overlap fraction")->capture_default_str();
  sub->add_option("--size", o->spec.size, "Fragment side length (m)")->capture_default_str();
  sub->add_option("--max-tilt", o->spec.max_tilt, "Largest target pose rotation (rad)")
      ->capture_default_str();
  sub->add_option("--seed", o->seed, "Random seed")->capture_default_str();
  sub->add_option("--out-dir", o->out_dir, "Output directory")->required();
  cmd->app = sub;
  cmd->validate = [o] { o->spec.validate(); };
  cmd->run = [o] {
    EnsureDir(o->out_dir);
    Rng rng(o->seed);
    const std::vector<FragmentPair> pairs = generate_synthetic_scene(rng, o->spec);
    save_scene(pairs, o->out_dir);

    RunManifest m("synth", o->seed);
    m.config() = {{"pairs", o->spec.pairs},   {"points", o->spec.points},
                  {"noise", o->spec.noise},   {"overlap", o->spec.overlap},
                  {"size", o->spec.size},     {"max_tilt", o->spec.max_tilt},
                  {"out_dir", o->out_dir}};
    m.add_output(Join(o->out_dir, "scene.json"));
    json overlaps = json::array();
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      m.add_output(Join(o->out_dir, PairStem(p) + "_source.ply"));
      m.add_output(Join(o->out_dir, PairStem(p) + "_target.ply"));
      m.add_output(Join(o->out_dir, PairStem(p) + ".pose"));
      overlaps.push_back(pairs[p].overlap);
    }
    json result = {{"pairs", pairs.size()}, {"overlaps", overlaps}};
    m.set_result(result);
    m.write(Join(o->out_dir, "manifest.json"));
    std::cout << result.dump() << std::endl;
  };
  return cmd;
}

// ---------------------------------------------------------------- train

std::shared_ptr<Command> Train(CLI::App& app) {
  struct Opts {
    std::vector<std::string> data;
    std::string out_dir;
    std::string preset = "full";
    double lr = 0.0;
    int batch = 0;
    int decay_every = 0;
    double decay_factor = 0.0;
    int epochs = 0;
    int iterations = 0;
    int patches = 200;
    int max_points = 0;
    std::uint64_t seed = 0;
    std::string resume;
    bool no_augment = false;
    int save_every = 0;
    int progress = 0;
    // Resolved in validate.
    ModelConfig model;
    TrainConfig train;
  };
  auto o = std::make_shared<Opts>();
  auto cmd = std::make_shared<Command>();
  CLI::App* sub = app.add_subcommand("train", "Unsupervised training on scene patches");
  sub->add_option("--data", o->data, "Scene directories with training fragments")->required();
  sub->add_option("--out-dir", o->out_dir, "Output directory")->required();
  sub->add_option("--preset", o->preset, "full (b=24, batch 32, 14 epochs) or desk (b=8, batch 4, 2000 iterations)")
      ->capture_default_str();
  auto* lr = sub->add_option("--lr", o->lr, "Initial learning rate (full: 0.001)");
  auto* batch = sub->add_option("--batch", o->batch, "Batch size (full: 32)");
  auto* decay = sub->add_option("--decay-every", o->decay_every, "Halve the rate every N iterations (full: 4000)");
  auto* factor = sub->add_option("--decay-factor", o->decay_factor, "Decay factor (0.5)");
  auto* epochs = sub->add_option("--epochs", o->epochs, "Epochs when --iterations is 0 (full: 14)");
  auto* iters = sub->add_option("--iterations", o->iterations, "Fixed iteration count; 0 derives it from epochs");
  auto* maxp = sub->add_option("--max-points", o->max_points, "Points kept per patch (1024)");
  sub->add_option("--patches", o->patches, "Training patches drawn from the scenes")->capture_default_str();
  sub->add_option("--seed", o->seed, "Random seed")->capture_default_str();
  sub->add_option("--resume", o->resume, "Checkpoint with optimizer state to continue from");
  sub->add_flag("--no-augment", o->no_augment, "Disable random rotation of training patches");
  sub->add_option("--save-every", o->save_every, "Also write the checkpoint every N iterations")
      ->capture_default_str();
  sub->add_option("--progress", o->progress, "Print the loss every N iterations")->capture_default_str();
  cmd->app = sub;
  cmd->validate = [o, lr, batch, decay, factor, epochs, iters, maxp] {
    if (o->preset == "desk") {
      o->model = ModelConfig::desk();
      o->train = TrainConfig::desk();
    } else if (o->preset == "full") {
      o->model = ModelConfig::full();
      o->train = TrainConfig::full();
    } else {
      throw UsageError("--preset must be desk or full");
    }
    if (lr->count()) o->train.learning_rate = o->lr;
    if (batch->count()) o->train.batch_size = o->batch;
    if (decay->count()) o->train.decay_interval = o->decay_every;
    if (factor->count()) o->train.decay_factor = o->decay_factor;
    if (epochs->count()) o->train.epochs = o->epochs;
    if (iters->count()) o->train.iterations = o->iterations;
    if (maxp->count()) o->train.max_points = o->max_points;
    if (o->no_augment) o->train.augment = false;
    o->train.seed = o->seed;
    o->train.validate();
    Require(o->patches >= 1, "--patches must be >= 1");
    Require(o->save_every >= 0, "--save-every must be >= 0");
    Require(o->progress >= 0, "--progress must be >= 0");
  };
  cmd->run = [o] {
    std::vector<FragmentPair> pairs;
    RunManifest m("train", o->seed);
    for (const std::string& dir : o->data) {
      if (!fs::exists(Join(dir, "scene.json"))) throw Error("missing training data in '" + dir + "'");
      for (FragmentPair& p : load_scene(dir)) pairs.push_back(std::move(p));
      AddSceneInputs(m, dir);
    }
    ModelConfig model = o->model;
    std::optional<Checkpoint> resume;
    if (!o->resume.empty()) {
      resume = load_checkpoint_full(o->resume);
      if (!resume->optimizer) throw Error("checkpoint '" + o->resume + "' has no optimizer state");
      model = resume->weights.config;
      m.add_input(o->resume);
    }
    EnsureDir(o->out_dir);
    EvalConfig eval;
    eval.support_radius = model.support_radius;
    Rng patch_rng = derive_rng(o->seed, kPatchTag, 0);
    const std::vector<Patch> patches = extract_training_patches(pairs, o->patches, eval, patch_rng);

    const std::string ckpt = Join(o->out_dir, "checkpoint.ckpt");
    auto callback = [&](const LossRecord& r, const ModelWeights& w, const OptimizerState& opt) {
      if (o->progress && (r.iteration + 1) % o->progress == 0) {
        std::cout << json{{"iteration", r.iteration}, {"lr", r.learning_rate}, {"loss", r.loss}}.dump()
                  << std::endl;
      }
      if (o->save_every && (r.iteration + 1) % o->save_every == 0) save_checkpoint(w, ckpt, &opt);
      return true;
    };
    const TrainResult result =
        train(patches, model, o->train, resume ? &resume->weights : nullptr,
              resume ? &*resume->optimizer : nullptr, callback);
    save_checkpoint(result.weights, ckpt, &result.optimizer);
    write_loss_csv(result.history, Join(o->out_dir, "loss.csv"));

    m.config() = {{"data", o->data},
                  {"out_dir", o->out_dir},
                  {"preset", o->preset},
                  {"model", json::parse(model_config_to_json(model))},
                  {"lr", o->train.learning_rate},
                  {"batch", o->train.batch_size},
                  {"decay_every", o->train.decay_interval},
                  {"decay_factor", o->train.decay_factor},
                  {"epochs", o->train.epochs},
                  {"iterations", o->train.iterations},
                  {"max_points", o->train.max_points},
                  {"augment", o->train.augment},
                  {"patches", o->patches},
                  {"resume", o->resume},
                  {"threads", 1}};
    m.add_output(ckpt);
    m.add_output(Join(o->out_dir, "loss.csv"));
    json summary = {{"iterations_run", result.history.size()},
                    {"optimizer_step", result.optimizer.step}};
    if (!result.history.empty()) {
      summary["initial_loss"] = result.history.front().loss;
      summary["final_loss"] = result.history.back().loss;
    }
    m.set_result(summary);
    m.write(Join(o->out_dir, "manifest.json"));
    std::cout << summary.dump() << std::endl;
  };
  return cmd;
}

// ---------------------------------------------------------------- describe

struct PreprocessOpts {
  double voxel = 0.02;
  int normal_k = 17;
  bool raw_input = false;
};

void AddPreprocessOptions(CLI::App* sub, PreprocessOpts& p) {
  sub->add_option("--voxel", p.voxel, "Voxel filter size (m)")->capture_default_str();
  sub->add_option("--normal-k", p.normal_k, "Neighbors for normal estimation")->capture_default_str();
  sub->add_flag("--no-preprocess", p.raw_input, "Use the cloud as given");
}

PointCloud Prepare(const PointCloud& cloud, const PreprocessOpts& p) {
  if (p.raw_input) return cloud;
  EvalConfig cfg;
  cfg.voxel = p.voxel;
  cfg.normal_k = p.normal_k;
  return preprocess(cloud, cfg);
}

std::shared_ptr<Command> Describe(CLI::App& app) {
  struct Opts {
    std::string cloud;
    std::string checkpoint;
    std::string keypoints;
    std::size_t sample_n = 0;
    std::uint64_t seed = 0;
    std::string mode = "lrf";
    std::string out;
    int threads = 1;
    PreprocessOpts pre;
  };
  auto o = std::make_shared<Opts>();
  auto cmd = std::make_shared<Command>();
  CLI::App* sub = app.add_subcommand("describe", "Compute descriptors at keypoints of a cloud");
  sub->add_option("--cloud", o->cloud, "Input cloud (.ply, .xyz)")->required();
  sub->add_option("--checkpoint", o->checkpoint, "Trained weights")->required();
  auto* kp = sub->add_option("--keypoints", o->keypoints, "Keypoint coordinates (.ply, .xyz)");
  auto* sn = sub->add_option("--sample-n", o->sample_n, "Sample this many keypoints instead");
  kp->excludes(sn);
  sub->add_option("--seed", o->seed, "Random seed for keypoint sampling")->capture_default_str();
  sub->add_option("--mode", o->mode, "raw, self or lrf")->capture_default_str();
  sub->add_option("--out", o->out, "Output descriptor file")->required();
  sub->add_option("--threads", o->threads, "Worker threads")->capture_default_str();
  AddPreprocessOptions(sub, o->pre);
  cmd->app = sub;
  cmd->validate = [o, kp, sn] {
    Require(kp->count() + sn->count() == 1, "give exactly one of --keypoints or --sample-n");
    Require(!sn->count() || o->sample_n >= 1, "--sample-n must be >= 1");
    parse_orient_mode(o->mode);
    Require(o->threads >= 1, "--threads must be >= 1");
    Require(o->pre.voxel > 0.0, "--voxel must be positive");
    Require(o->pre.normal_k >= 3, "--normal-k must be >= 3");
  };
  cmd->run = [o] {
    const OrientMode mode = parse_orient_mode(o->mode);
    const PointCloud cloud = load_cloud(o->cloud);
    if (cloud.empty()) throw Error("cloud '" + o->cloud + "' is empty");
    const PointCloud prepared = Prepare(cloud, o->pre);
    std::vector<Vec3> keypoints;
    if (!o->keypoints.empty()) {
      keypoints = load_cloud(o->keypoints).points;
      Vec3 lo = cloud.points[0], hi = lo;
      for (const Vec3& p : cloud.points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
      const double slack = 1e-6 * std::max(1.0, (hi - lo).norm());
      for (std::size_t i = 0; i < keypoints.size(); ++i) {
        const Vec3& k = keypoints[i];
        if ((k.array() < lo.array() - slack).any() || (k.array() > hi.array() + slack).any()) {
          throw Error("keypoint " + std::to_string(i) + " lies outside the cloud bounds");
        }
      }
    } else {
      Rng rng = derive_rng(o->seed, kKeypointTag, 0);
      for (std::size_t i : sample_keypoints(prepared, o->sample_n, rng)) {
        keypoints.push_back(prepared.points[i]);
      }
    }
    const ModelWeights w = load_checkpoint(o->checkpoint);
    const DescriptorSet set = describe_keypoints(prepared, keypoints, w, mode, o->threads);
    const fs::path parent = fs::path(o->out).parent_path();
    if (!parent.empty()) EnsureDir(parent.string());
    save_descriptor_file(set, o->out);

    RunManifest m("describe", o->seed);
    m.config() = {{"cloud", o->cloud},          {"checkpoint", o->checkpoint},
                  {"keypoints", o->keypoints},  {"sample_n", o->sample_n},
                  {"mode", to_string(mode)},    {"out", o->out},
                  {"voxel", o->pre.voxel},      {"normal_k", o->pre.normal_k},
                  {"preprocess", !o->pre.raw_input}};
    m.add_input(o->cloud);
    m.add_input(o->checkpoint);
    if (!o->keypoints.empty()) m.add_input(o->keypoints);
    m.add_output(o->out);
    json summary = {{"requested", keypoints.size()},
                    {"described", set.descriptors.size()},
                    {"skipped", set.skipped}};
    m.set_result(summary);
    m.write(o->out + ".manifest.json");
    for (std::size_t i : set.skipped) {
      std::cerr << json{{"warning", "keypoint skipped: insufficient support or orientation failed"},
                        {"keypoint", i}}
                       .dump()
                << std::endl;
    }
    std::cout << summary.dump() << std::endl;
  };
  return cmd;
}

// ---------------------------------------------------------------- evaluate

struct EvalOpts {
  std::string scene;
  std::string out_dir;
  std::string desc_dir;
  std::string checkpoint;
  std::string mode;
  std::size_t sample_n = 5000;
  std::uint64_t seed = 0;
  bool rotate = false;
  int random_dim = 512;
  double quantum = 0.01;
  int threads = 1;
  bool save_descriptors = false;
  std::string save_scene;
  EvalConfig cfg;
  PreprocessOpts pre;
};

void AddEvalOptions(CLI::App* sub, EvalOpts& o, bool rotate_flag) {
  sub->add_option("--scene", o.scene, "Scene directory (synth output layout)")->required();
  sub->add_option("--out-dir", o.out_dir, "Output directory")->required();
  sub->add_option("--desc-dir", o.desc_dir,
                  "Precomputed descriptor files pair_NNN_source.desc / pair_NNN_target.desc");
  sub->add_option("--checkpoint", o.checkpoint, "Trained weights for raw, self or lrf modes");
  sub->add_option("--mode", o.mode, "raw, self, lrf, oracle or random (default lrf)");
  sub->add_option("--sample-n", o.sample_n, "Keypoints per fragment")->capture_default_str();
  sub->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  if (rotate_flag) {
    sub->add_flag("--rotate", o.rotate, "Rotate every fragment by a random rotation first");
  }
  sub->add_option("--save-scene", o.save_scene, "Also write the evaluated (rotated) scene here");
  sub->add_option("--tau1", o.cfg.tau1, "Correct-match distance (m)")->capture_default_str();
  sub->add_option("--tau2", o.cfg.tau2, "Inlier ratio threshold")->capture_default_str();
  sub->add_option("--min-overlap", o.cfg.min_overlap, "Pairs below this overlap are skipped")
      ->capture_default_str();
  sub->add_flag("--mutual", o.cfg.mutual, "Keep only reciprocal matches");
  sub->add_option("--random-dim", o.random_dim, "Length of random descriptors")->capture_default_str();
  sub->add_option("--quantum", o.quantum, "Rounding step of oracle descriptors (m)")->capture_default_str();
  sub->add_option("--threads", o.threads, "Worker threads")->capture_default_str();
  sub->add_flag("--save-descriptors", o.save_descriptors, "Write descriptor files to out-dir/descriptors");
  AddPreprocessOptions(sub, o.pre);
}

void ValidateEval(EvalOpts& o) {
  o.cfg.voxel = o.pre.voxel;
  o.cfg.normal_k = o.pre.normal_k;
  o.cfg.n_keypoints = static_cast<int>(std::min<std::size_t>(o.sample_n, 1u << 30));
  o.cfg.validate();
  Require(o.threads >= 1, "--threads must be >= 1");
  if (!o.desc_dir.empty()) {
    Require(o.checkpoint.empty() && o.mode.empty(),
            "--desc-dir cannot be combined with --checkpoint or --mode");
    Require(!o.rotate, "--rotate needs descriptors computed after rotation; drop --desc-dir");
    return;
  }
  if (o.mode.empty()) o.mode = "lrf";
  if (o.mode == "oracle" || o.mode == "random") {
    Require(o.random_dim >= 1, "--random-dim must be >= 1");
    Require(o.quantum > 0.0, "--quantum must be positive");
    return;
  }
  parse_orient_mode(o.mode);
  Require(!o.checkpoint.empty(), "--checkpoint is required for mode " + o.mode);
}

void RunEval(const EvalOpts& o, const std::string& command) {
  std::vector<FragmentPair> pairs = load_scene(o.scene);
  RunManifest m(command, o.seed);
  AddSceneInputs(m, o.scene);
  if (o.rotate) {
    Rng rng = derive_rng(o.seed, kRotateTag, 0);
    pairs = make_rotated_benchmark(pairs, rng);
  }
  EnsureDir(o.out_dir);
  if (!o.save_scene.empty()) save_scene(pairs, o.save_scene);

  std::optional<ModelWeights> weights;
  if (!o.checkpoint.empty()) {
    weights = load_checkpoint(o.checkpoint);
    m.add_input(o.checkpoint);
  }
  const std::string desc_out = Join(o.out_dir, "descriptors");
  if (o.save_descriptors) EnsureDir(desc_out);

  std::vector<PairDescriptors> described;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    DescriptorSet sets[2];
    for (int side = 0; side < 2; ++side) {
      const std::string name = PairStem(p) + (side ? "_target.desc" : "_source.desc");
      if (!o.desc_dir.empty()) {
        sets[side] = load_descriptor_file(Join(o.desc_dir, name));
        m.add_input(Join(o.desc_dir, name));
        continue;
      }
      const PointCloud& raw = side ? pairs[p].target : pairs[p].source;
      const PointCloud cloud = Prepare(raw, o.pre);
      Rng rng = derive_rng(o.seed, kKeypointTag, 2 * p + side);
      std::vector<Vec3> keypoints;
      for (std::size_t i : sample_keypoints(cloud, std::min(o.sample_n, cloud.size()), rng)) {
        keypoints.push_back(cloud.points[i]);
      }
      if (o.mode == "oracle") {
        sets[side] = oracle_descriptor_set(keypoints, side ? pairs[p].gt_pose : Mat4::Identity(),
                                           o.quantum);
      } else if (o.mode == "random") {
        Rng drng = derive_rng(o.seed, kRandomTag, 2 * p + side);
        sets[side] = random_descriptor_set(keypoints, o.random_dim, drng);
      } else {
        sets[side] = describe_keypoints(cloud, keypoints, *weights, parse_orient_mode(o.mode), o.threads);
      }
      if (o.save_descriptors) save_descriptor_file(sets[side], Join(desc_out, name));
    }
    described.push_back(make_pair_descriptors(sets[0], sets[1], pairs[p]));
  }
  const RecallResult r = registration_recall(described, o.cfg, o.threads);

  json metrics;
  metrics["recall"] = r.recall;
  metrics["evaluated"] = r.evaluated;
  metrics["registered"] = r.registered;
  metrics["tau1"] = o.cfg.tau1;
  metrics["tau2"] = o.cfg.tau2;
  metrics["min_overlap"] = o.cfg.min_overlap;
  metrics["mode"] = o.desc_dir.empty() ? o.mode : "files";
  metrics["rotated"] = o.rotate;
  metrics["pairs"] = json::array();
  std::string pairs_csv = "pair,overlap,evaluated,matches,correct,inlier_ratio,registered\n";
  for (const PairResult& pr : r.pairs) {
    metrics["pairs"].push_back({{"pair", pr.pair},
                                {"overlap", described[pr.pair].overlap},
                                {"evaluated", pr.evaluated},
                                {"matches", pr.matches},
                                {"correct", pr.correct},
                                {"inlier_ratio", pr.inlier_ratio},
                                {"registered", pr.registered}});
    pairs_csv += std::to_string(pr.pair) + "," + Num(described[pr.pair].overlap) + "," +
                 (pr.evaluated ? "1" : "0") + "," + std::to_string(pr.matches) + "," +
                 std::to_string(pr.correct) + "," + Num(pr.inlier_ratio) + "," +
                 (pr.registered ? "1" : "0") + "\n";
  }
  std::string curve_csv = "tau2,recall\n";
  for (const auto& [t2, rec] : r.curve) curve_csv += Num(t2) + "," + Num(rec) + "\n";

  WriteText(Join(o.out_dir, "metrics.json"), metrics.dump(2) + "\n");
  WriteText(Join(o.out_dir, "pairs.csv"), pairs_csv);
  WriteText(Join(o.out_dir, "curve.csv"), curve_csv);

  m.config() = {{"scene", o.scene},         {"out_dir", o.out_dir},
                {"desc_dir", o.desc_dir},   {"checkpoint", o.checkpoint},
                {"mode", o.mode},           {"sample_n", o.sample_n},
                {"rotate", o.rotate},       {"tau1", o.cfg.tau1},
                {"tau2", o.cfg.tau2},       {"min_overlap", o.cfg.min_overlap},
                {"mutual", o.cfg.mutual},   {"voxel", o.pre.voxel},
                {"normal_k", o.pre.normal_k}, {"preprocess", !o.pre.raw_input},
                {"random_dim", o.random_dim}, {"quantum", o.quantum}};
  for (const char* f : {"metrics.json", "pairs.csv", "curve.csv"}) m.add_output(Join(o.out_dir, f));
  m.set_result({{"recall", r.recall}, {"evaluated", r.evaluated}, {"registered", r.registered}});
  m.write(Join(o.out_dir, "manifest.json"));
  std::cout << json{{"recall", r.recall}, {"evaluated", r.evaluated}, {"registered", r.registered}}.dump()
            << std::endl;
}

std::shared_ptr<Command> Evaluate(CLI::App& app) {
  auto o = std::make_shared<EvalOpts>();
  auto cmd = std::make_shared<Command>();
  CLI::App* sub = app.add_subcommand("evaluate", "Registration recall on a scene");
  AddEvalOptions(sub, *o, true);
  cmd->app = sub;
  cmd->validate = [o] { ValidateEval(*o); };
  cmd->run = [o] { RunEval(*o, "evaluate"); };
  return cmd;
}

std::shared_ptr<Command> RotateBenchmark(CLI::App& app) {
  auto o = std::make_shared<EvalOpts>();
  auto cmd = std::make_shared<Command>();
  CLI::App* sub =
      app.add_subcommand("rotate-benchmark", "evaluate --rotate: recall after random fragment rotations");
  AddEvalOptions(sub, *o, false);
  cmd->app = sub;
  cmd->validate = [o] {
    o->rotate = true;
    ValidateEval(*o);
  };
  cmd->run = [o] { RunEval(*o, "rotate-benchmark"); };
  return cmd;
}

// ---------------------------------------------------------------- check

std::shared_ptr<Command> Check(CLI::App& app) {
  struct Opts {
    std::string checkpoint;
    std::uint64_t seed = 0;
    int axes = 10;
    int angles = 12;
    int points = 3000;
    double thickness = 0.02;
    std::string out_dir;
    int threads = 1;
    bool strict = false;
  };
  auto o = std::make_shared<Opts>();
  auto cmd = std::make_shared<Command>();
  CLI::App* sub = app.add_subcommand("check", "Equivariance sweep of the encoder");
  sub->add_option("--checkpoint", o->checkpoint, "Weights (default: fresh desk weights from --seed)");
  sub->add_option("--seed", o->seed, "Random seed")->capture_default_str();
  sub->add_option("--axes", o->axes, "Random rotation axes")->capture_default_str();
  sub->add_option("--angles", o->angles, "Angles from 0 to pi")->capture_default_str();
  sub->add_option("--points", o->points, "Points per synthetic patch")->capture_default_str();
  sub->add_option("--thickness", o->thickness, "Patch thickness along the normal (m)")
      ->capture_default_str();
  sub->add_option("--out-dir", o->out_dir, "Output directory")->required();
  sub->add_option("--threads", o->threads, "Worker threads")->capture_default_str();
  sub->add_flag("--strict", o->strict, "Exit with status 1 when a property fails");
  cmd->app = sub;
  cmd->validate = [o] {
    Require(o->axes >= 1, "--axes must be >= 1");
    Require(o->angles >= 2, "--angles must be >= 2");
    Require(o->points >= 6, "--points must be >= 6");
    Require(o->thickness >= 0.0, "--thickness must be >= 0");
    Require(o->threads >= 1, "--threads must be >= 1");
  };
  cmd->run = [o] {
    RunManifest m("check", o->seed);
    ModelWeights w;
    if (!o->checkpoint.empty()) {
      w = load_checkpoint(o->checkpoint);
      m.add_input(o->checkpoint);
    } else {
      Rng init = derive_rng(o->seed, kInitTag, 0);
      w = init_weights(ModelConfig::desk(), init);
    }
    EnsureDir(o->out_dir);
    const FilterSpectra spectra = compute_filter_spectra(w);
    const SupportSpec support = w.config.support();
    const int na = o->angles;
    std::vector<double> angle(na);
    for (int i = 0; i < na; ++i) angle[i] = M_PI * i / (na - 1);
    // [axis][angle]
    std::vector<std::vector<double>> oriented(o->axes, std::vector<double>(na));
    std::vector<std::vector<double>> unoriented = oriented;

    ParallelFor(o->axes, o->threads, [&](std::size_t a) {
      Rng rng = derive_rng(o->seed, kCheckTag, a);
      const PointCloud patch =
          sample_smooth_patch(rng, o->points, support.radius + 0.05, o->thickness);
      std::normal_distribution<double> g(0.0, 1.0);
      const Vec3 axis = Vec3(g(rng), g(rng), g(rng)).normalized();
      std::vector<SphericalSignal> signals;
      std::vector<Mat3> rotations;
      for (int i = 0; i < na; ++i) {
        rotations.push_back(Eigen::AngleAxisd(angle[i], axis).toRotationMatrix());
        signals.push_back(build_spherical_signal(rotate_point_cloud(patch, rotations[i], Vec3::Zero()),
                                                 Vec3::Zero(), support));
      }
      const std::vector<Descriptor> d = encoder_forward_batch(signals, w, spectra);
      const Descriptor zero{d[0].bandwidth, d[0].channels, std::vector<double>(d[0].values.size(), 0.0)};
      const double scale = descriptor_distance(d[0], zero);
      if (!(scale > 0.0)) throw Error("check: the encoder output is zero for a test patch");
      for (int i = 0; i < na; ++i) {
        oriented[a][i] = descriptor_distance(canonicalize(d[i], matrix_to_zyz(rotations[i])), d[0]) / scale;
        unoriented[a][i] = descriptor_distance(d[i], d[0]) / scale;
      }
    });

    std::string samples = "angle,axis,oriented,unoriented\n";
    std::string curve = "angle,oriented_median,unoriented_median,oriented_max,unoriented_max\n";
    std::vector<double> om(na), um(na), all_oriented;
    double worst_angle_median = 0.0;
    for (int i = 0; i < na; ++i) {
      std::vector<double> oc, uc;
      for (int a = 0; a < o->axes; ++a) {
        oc.push_back(oriented[a][i]);
        uc.push_back(unoriented[a][i]);
        all_oriented.push_back(oriented[a][i]);
        samples += Num(angle[i]) + "," + std::to_string(a) + "," + Num(oriented[a][i]) + "," +
                   Num(unoriented[a][i]) + "\n";
      }
      om[i] = Median(oc);
      um[i] = Median(uc);
      worst_angle_median = std::max(worst_angle_median, om[i]);
      curve += Num(angle[i]) + "," + Num(om[i]) + "," + Num(um[i]) + "," +
               Num(*std::max_element(oc.begin(), oc.end())) + "," +
               Num(*std::max_element(uc.begin(), uc.end())) + "\n";
    }
    const double median_oriented = Median(all_oriented);
    const double rho = Spearman(angle, um);
    const double ratio_at_pi = om[na - 1] > 0.0 ? um[na - 1] / om[na - 1] : INFINITY;
    const bool flat = worst_angle_median <= 0.10;
    const bool overall = median_oriented <= 0.10;
    const bool grows = rho > 0.5;
    const bool separated = ratio_at_pi >= 3.0;
    json report = {{"median_oriented", median_oriented},
                   {"max_angle_median_oriented", worst_angle_median},
                   {"spearman_unoriented", rho},
                   {"unoriented_over_oriented_at_pi", ratio_at_pi},
                   {"checks",
                    {{"median_oriented_le_0.10", overall},
                     {"every_angle_median_le_0.10", flat},
                     {"unoriented_spearman_gt_0.5", grows},
                     {"ratio_at_pi_ge_3", separated}}},
                   {"pass", overall && flat && grows && separated}};
    WriteText(Join(o->out_dir, "check.csv"), curve);
    WriteText(Join(o->out_dir, "check_samples.csv"), samples);
    WriteText(Join(o->out_dir, "report.json"), report.dump(2) + "\n");

    m.config() = {{"checkpoint", o->checkpoint}, {"axes", o->axes},       {"angles", o->angles},
                  {"points", o->points},         {"thickness", o->thickness},
                  {"out_dir", o->out_dir}};
    for (const char* f : {"check.csv", "check_samples.csv", "report.json"}) {
      m.add_output(Join(o->out_dir, f));
    }
    m.set_result(report);
    m.write(Join(o->out_dir, "manifest.json"));
    std::cout << report.dump() << std::endl;
    if (o->strict && !report["pass"].get<bool>()) throw Error("check: equivariance properties failed");
  };
  return cmd;
}

// ---------------------------------------------------------------- inspect

std::shared_ptr<Command> InspectCheckpoint(CLI::App& app) {
  struct Opts {
    std::string checkpoint;
  };
  auto o = std::make_shared<Opts>();
  auto cmd = std::make_shared<Command>();
  CLI::App* sub = app.add_subcommand("inspect-checkpoint", "Summarize a checkpoint as JSON");
  sub->add_option("checkpoint", o->checkpoint, "Checkpoint file")->required();
  cmd->app = sub;
  cmd->validate = [] {};
  cmd->run = [o] {
    const Checkpoint c = load_checkpoint_full(o->checkpoint);
    json out;
    out["checkpoint"] = o->checkpoint;
    out["sha256"] = sha256_file(o->checkpoint);
    out["config"] = json::parse(model_config_to_json(c.weights.config));
    out["parameter_count"] = c.weights.parameter_count();
    out["descriptor_size"] = c.weights.config.encoder.descriptor_size();
    out["tensors"] = json::array();
    for (const Tensor& t : c.weights.tensors) {
      double lo = INFINITY, hi = -INFINITY, sum = 0.0;
      for (float v : t.data) {
        lo = std::min<double>(lo, v);
        hi = std::max<double>(hi, v);
        sum += v;
      }
      out["tensors"].push_back({{"name", t.name},
                                {"shape", t.shape},
                                {"min", t.data.empty() ? 0.0 : lo},
                                {"max", t.data.empty() ? 0.0 : hi},
                                {"mean", t.data.empty() ? 0.0 : sum / t.data.size()}});
    }
    if (c.optimizer) {
      out["optimizer_step"] = c.optimizer->step;
    } else {
      out["optimizer_step"] = nullptr;
    }
    std::cout << out.dump(2) << std::endl;
  };
  return cmd;
}

}  // namespace

std::vector<std::shared_ptr<Command>> register_commands(CLI::App& app) {
  return {Synth(app), Train(app), Describe(app), Evaluate(app), RotateBenchmark(app), Check(app),
          InspectCheckpoint(app)};
}

}  // namespace equidesc::cli
