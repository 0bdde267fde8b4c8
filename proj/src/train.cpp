#include "equidesc/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

namespace equidesc {
namespace {

// Independent stream for (seed, tag, index); keeps iterations reproducible
// regardless of where a run starts.
Rng StreamRng(std::uint64_t seed, std::uint32_t tag, std::uint64_t index) {
  return derive_rng(seed, tag, index);
}

constexpr std::uint32_t kEpochTag = 1;
constexpr std::uint32_t kIterationTag = 2;
constexpr std::uint32_t kInitTag = 3;

Eigen::Matrix3Xd ToMatrix(const PointCloud& c) {
  Eigen::Matrix3Xd m(3, c.size());
  for (std::size_t i = 0; i < c.size(); ++i) m.col(i) = c.points[i];
  return m;
}

// Index of the closest column of `set` to p; strict comparison keeps the
// lowest index on ties.
Eigen::Index Nearest(const Eigen::Matrix3Xd& set, const Vec3& p, double* dist2) {
  Eigen::Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < set.cols(); ++j) {
    const double d = (set.col(j) - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  *dist2 = best_d;
  return best;
}

}  // namespace

double chamfer_loss(const Eigen::Matrix3Xd& s, const Eigen::Matrix3Xd& t,
                    Eigen::Matrix3Xd* grad_s) {
  if (s.cols() == 0 || t.cols() == 0) throw InvalidArgument("chamfer_loss: empty point set");
  if (grad_s) grad_s->setZero(3, s.cols());
  const double ws = 1.0 / static_cast<double>(s.cols());
  const double wt = 1.0 / static_cast<double>(t.cols());
  double forward = 0.0, backward = 0.0;
  for (Eigen::Index i = 0; i < s.cols(); ++i) {
    double d2;
    const Eigen::Index j = Nearest(t, s.col(i), &d2);
    const double d = std::sqrt(d2);
    forward += d;
    if (grad_s && d > 0.0) grad_s->col(i) += ws * (s.col(i) - t.col(j)) / d;
  }
  for (Eigen::Index j = 0; j < t.cols(); ++j) {
    double d2;
    const Eigen::Index i = Nearest(s, t.col(j), &d2);
    const double d = std::sqrt(d2);
    backward += d;
    if (grad_s && d > 0.0) grad_s->col(i) += wt * (s.col(i) - t.col(j)) / d;
  }
  // Divisions rather than weighted products keep the sum free of fused
  // multiply-adds, so swapping the arguments gives the identical value.
  return forward / static_cast<double>(s.cols()) + backward / static_cast<double>(t.cols());
}

double chamfer_loss(const PointCloud& s, const PointCloud& t) {
  return chamfer_loss(ToMatrix(s), ToMatrix(t));
}

Patch extract_patch(const PointCloud& cloud, const Vec3& center, double radius) {
  if (!(radius > 0.0)) throw InvalidArgument("extract_patch: radius must be positive");
  Patch p;
  const double r2 = radius * radius;
  for (const Vec3& q : cloud.points) {
    const Vec3 d = q - center;
    if (d.squaredNorm() <= r2) p.points.push_back(d);
  }
  return p;
}

TrainingSample make_training_sample(const Patch& patch, const ModelConfig& config,
                                    int max_points, bool augment, Rng& rng) {
  const SupportSpec spec = config.support();
  std::vector<Vec3> pts;
  const double r2 = spec.radius * spec.radius;
  for (const Vec3& p : patch.points) {
    if (!p.allFinite()) throw InvalidArgument("make_training_sample: non-finite point");
    if (p.squaredNorm() <= r2) pts.push_back(p);
  }
  if (pts.empty()) throw InvalidArgument("make_training_sample: no point within the support");
  if (max_points > 0 && pts.size() > static_cast<std::size_t>(max_points)) {
    // Partial Fisher-Yates: the first max_points entries form the subsample.
    for (int i = 0; i < max_points; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pts.size() - 1);
      std::swap(pts[i], pts[pick(rng)]);
    }
    pts.resize(max_points);
  }
  if (augment) {
    const Mat3 r = sample_uniform_rotation(rng).to_matrix();
    for (Vec3& p : pts) p = r * p;
  }
  PointCloud cloud;
  cloud.points = pts;
  TrainingSample s;
  s.signal = build_spherical_signal(cloud, Vec3::Zero(), spec);
  s.target.resize(3, static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) s.target.col(i) = pts[i] / spec.radius;
  return s;
}

// ---------------------------------------------------------------------------

GradientTape::GradientTape(const ModelWeights& w)
    : w_(w),
      grid_(make_fold_grid(w.config.grid_size)),
      spectra_(compute_filter_spectra(w)),
      params_(DecoderParams::from(w)) {}

double GradientTape::forward(const std::vector<TrainingSample>& batch) {
  if (batch.empty()) throw InvalidArgument("GradientTape: empty batch");
  std::vector<SphericalSignal> signals;
  signals.reserve(batch.size());
  for (const TrainingSample& s : batch) signals.push_back(s.signal);
  descriptors_ = encoder_forward_batch(signals, w_, spectra_, &encoder_trace_);
  const double scale = 1.0 / static_cast<double>(batch.size());
  decoder_traces_.assign(batch.size(), {});
  outputs_.assign(batch.size(), {});
  loss_grads_.assign(batch.size(), {});
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Eigen::Map<const Eigen::VectorXd> d(descriptors_[b].values.data(),
                                              static_cast<Eigen::Index>(descriptors_[b].values.size()));
    outputs_[b] = decoder_forward_matrix(d, grid_, params_, &decoder_traces_[b]);
    Eigen::Matrix3Xd g;
    loss += scale * chamfer_loss(outputs_[b], batch[b].target, &g);
    loss_grads_[b] = scale * g;
  }
  return loss;
}

Gradients GradientTape::backward() const {
  Gradients grads;
  backward_from(loss_grads_, grads);
  return grads;
}

void GradientTape::backward(Gradients& grads) const { backward_from(loss_grads_, grads); }

Gradients GradientTape::backward_from(const std::vector<Eigen::Matrix3Xd>& grad_outputs) const {
  Gradients grads;
  backward_from(grad_outputs, grads);
  return grads;
}

void GradientTape::backward_from(const std::vector<Eigen::Matrix3Xd>& grad_outputs,
                                 Gradients& grads) const {
  if (grad_outputs.size() != outputs_.size()) {
    throw InvalidArgument("GradientTape: one output gradient per recorded sample required");
  }
  grads.tensors.resize(w_.tensors.size());
  for (std::size_t t = 0; t < w_.tensors.size(); ++t) {
    grads.tensors[t].assign(w_.tensors[t].numel(), 0.0);
  }
  const int first = 2 * static_cast<int>(w_.config.encoder.layer_bandwidths.size());
  std::vector<std::vector<double>> grad_desc(outputs_.size());
  for (std::size_t b = 0; b < outputs_.size(); ++b) {
    const Eigen::VectorXd g =
        decoder_backward(decoder_traces_[b], params_, grad_outputs[b], first, grads);
    grad_desc[b].assign(g.data(), g.data() + g.size());
  }
  SpectraGradient sg = SpectraGradient::zeros_like(spectra_);
  encoder_backward(encoder_trace_, w_, spectra_, grad_desc, grads, sg);
  accumulate_filter_gradients(w_, sg, grads);
  for (std::size_t t = 0; t < grads.tensors.size(); ++t) {
    for (double v : grads.tensors[t]) {
      if (!std::isfinite(v)) {
        throw NonFiniteError("non-finite gradient in tensor " + w_.tensors[t].name);
      }
    }
  }
}

// ---------------------------------------------------------------------------

void adam_step(std::vector<double>& params, const std::vector<double>& grads,
               std::vector<double>& m, std::vector<double>& v, std::int64_t step, double lr,
               const AdamParams& p) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw InvalidArgument("adam_step: size mismatch");
  }
  if (step < 1) throw InvalidArgument("adam_step: step is 1-based");
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * grads[i];
    v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * grads[i] * grads[i];
    params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + p.epsilon);
  }
}

void adam_step(ModelWeights& w, const Gradients& grads, OptimizerState& state, double lr,
               const AdamParams& p) {
  if (grads.tensors.size() != w.tensors.size()) {
    throw InvalidArgument("adam_step: gradients do not match the weights");
  }
  if (state.m.empty()) {
    for (const Tensor& t : w.tensors) {
      state.m.emplace_back(t.numel(), 0.0);
      state.v.emplace_back(t.numel(), 0.0);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < w.tensors.size(); ++t) {
    std::vector<float>& data = w.tensors[t].data;
    const std::vector<double>& g = grads.tensors[t];
    std::vector<double>& m = state.m[t];
    std::vector<double>& v = state.v[t];
    if (g.size() != data.size() || m.size() != data.size() || v.size() != data.size()) {
      throw InvalidArgument("adam_step: size mismatch in " + w.tensors[t].name);
    }
    // Same arithmetic as the vector overload, without the round trip copy.
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
      v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
      const double x = data[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + p.epsilon);
      data[i] = static_cast<float>(x);
    }
  }
}

// ---------------------------------------------------------------------------

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::full() {
  TrainConfig c;
  c.batch_size = 32;
  c.decay_interval = 4000;
  c.epochs = 14;
  c.iterations = 0;
  return c;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("train: learning_rate must be positive");
  }
  if (decay_interval < 1) throw InvalidArgument("train: decay_interval must be >= 1");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) {
    throw InvalidArgument("train: decay_factor must be in (0, 1]");
  }
  if (epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
  if (iterations < 0) throw InvalidArgument("train: iterations must be >= 0");
  if (max_points < 1) throw InvalidArgument("train: max_points must be >= 1");
}

int TrainConfig::total_iterations(std::size_t dataset_size) const {
  if (iterations > 0) return iterations;
  const std::size_t per_epoch = (dataset_size + batch_size - 1) / batch_size;
  return static_cast<int>(per_epoch * epochs);
}

double TrainConfig::learning_rate_at(int iteration) const {
  return learning_rate * std::pow(decay_factor, iteration / decay_interval);
}

TrainResult train(const std::vector<Patch>& data, const ModelConfig& model,
                  const TrainConfig& config, const ModelWeights* start,
                  const OptimizerState* resume, const TrainCallback& callback) {
  if (data.empty()) throw InvalidArgument("train: empty dataset");
  model.validate();
  config.validate();
  TrainResult result;
  if (start) {
    start->validate();
    result.weights = *start;
  } else {
    Rng init = StreamRng(config.seed, kInitTag, 0);
    result.weights = init_weights(model, init);
  }
  if (resume) result.optimizer = *resume;

  const std::size_t n = data.size();
  const int total = config.total_iterations(n);
  std::vector<std::size_t> order(n);
  std::int64_t cached_epoch = -1;
  Gradients grads;  // reused across iterations
  for (int it = static_cast<int>(result.optimizer.step); it < total; ++it) {
    std::vector<TrainingSample> batch;
    Rng rng = StreamRng(config.seed, kIterationTag, it);
    for (int b = 0; b < config.batch_size; ++b) {
      const std::int64_t slot = static_cast<std::int64_t>(it) * config.batch_size + b;
      const std::int64_t epoch = slot / static_cast<std::int64_t>(n);
      if (epoch != cached_epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle = StreamRng(config.seed, kEpochTag, epoch);
        std::shuffle(order.begin(), order.end(), shuffle);
        cached_epoch = epoch;
      }
      const Patch& patch = data[order[slot % n]];
      batch.push_back(make_training_sample(patch, model, config.max_points, config.augment, rng));
    }
    GradientTape tape(result.weights);
    const double loss = tape.forward(batch);
    if (!std::isfinite(loss)) {
      throw NonFiniteError("non-finite loss at iteration " + std::to_string(it));
    }
    tape.backward(grads);
    const double lr = config.learning_rate_at(it);
    adam_step(result.weights, grads, result.optimizer, lr);
    const LossRecord record{it, lr, loss};
    result.history.push_back(record);
    if (callback && !callback(record, result.weights, result.optimizer)) break;
  }
  return result;
}

void write_loss_csv(const std::vector<LossRecord>& history, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("write_loss_csv: cannot open " + path);
  out << "iteration,lr,loss\n" << std::setprecision(17);
  for (const LossRecord& r : history) {
    out << r.iteration << ',' << r.learning_rate << ',' << r.loss << '\n';
  }
  if (!out) throw Error("write_loss_csv: write failed for " + path);
}

}  // namespace equidesc
