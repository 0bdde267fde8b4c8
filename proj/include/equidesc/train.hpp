#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "equidesc/core.hpp"
#include "equidesc/network.hpp"
#include "equidesc/signal.hpp"

namespace equidesc {

/// Raised when a loss or gradient stops being finite during training.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Symmetric Chamfer distance with unsquared Euclidean distances:
/// mean over s of the distance to the closest point of t, plus the same with
/// the roles swapped. Throws InvalidArgument on an empty set.
double chamfer_loss(const PointCloud& s, const PointCloud& t);

/// Matrix form (points are columns). When `grad_s` is non-null it receives
/// dL/ds. Ties go to the lowest index; a zero-length difference contributes
/// a zero subgradient.
double chamfer_loss(const Eigen::Matrix3Xd& s, const Eigen::Matrix3Xd& t,
                    Eigen::Matrix3Xd* grad_s = nullptr);

/// Points of a keypoint neighborhood, as offsets from the keypoint in meters.
struct Patch {
  std::vector<Vec3> points;
};

/// Offsets of every point within `radius` (closed ball) of `center`.
Patch extract_patch(const PointCloud& cloud, const Vec3& center, double radius);

/// Encoder input and reconstruction target for one patch.
struct TrainingSample {
  SphericalSignal signal;
  Eigen::Matrix3Xd target;  // in-support points divided by the support radius
};

/// Randomly subsamples to at most `max_points`, optionally applies a Haar
/// rotation, then bins the result. Throws InvalidArgument when no point lies
/// within the support.
TrainingSample make_training_sample(const Patch& patch, const ModelConfig& config,
                                    int max_points, bool augment, Rng& rng);

/// Records one batched forward pass of encoder, decoder and Chamfer loss and
/// replays it in reverse.
class GradientTape {
 public:
  explicit GradientTape(const ModelWeights& w);

  /// Mean Chamfer loss over the batch.
  double forward(const std::vector<TrainingSample>& batch);

  /// Gradients of the recorded mean loss. Throws NonFiniteError naming the
  /// first tensor with a non-finite entry.
  Gradients backward() const;
  /// Same, overwriting `grads` so its storage can be reused.
  void backward(Gradients& grads) const;

  /// Gradients for an arbitrary upstream gradient on the decoder outputs.
  Gradients backward_from(const std::vector<Eigen::Matrix3Xd>& grad_outputs) const;
  void backward_from(const std::vector<Eigen::Matrix3Xd>& grad_outputs, Gradients& grads) const;

  const std::vector<Eigen::Matrix3Xd>& outputs() const { return outputs_; }
  const std::vector<Descriptor>& descriptors() const { return descriptors_; }

 private:
  const ModelWeights& w_;
  FoldGrid grid_;
  FilterSpectra spectra_;
  DecoderParams params_;
  EncoderTrace encoder_trace_;
  std::vector<DecoderTrace> decoder_traces_;
  std::vector<Descriptor> descriptors_;
  std::vector<Eigen::Matrix3Xd> outputs_;
  std::vector<Eigen::Matrix3Xd> loss_grads_;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update. `step` is the 1-based index of this update.
void adam_step(std::vector<double>& params, const std::vector<double>& grads,
               std::vector<double>& m, std::vector<double>& v, std::int64_t step, double lr,
               const AdamParams& p = {});

/// Adam over all model tensors; increments state.step and allocates the
/// moments on first use.
void adam_step(ModelWeights& w, const Gradients& grads, OptimizerState& state, double lr,
               const AdamParams& p = {});

struct TrainConfig {
  int batch_size = 4;
  double learning_rate = 0.001;
  int decay_interval = 1000;  // iterations
  double decay_factor = 0.5;
  int epochs = 14;
  int iterations = 2000;  // 0 derives the count from epochs
  int max_points = 1024;
  std::uint64_t seed = 0;
  bool augment = true;  // fresh Haar rotation per sample and iteration

  static TrainConfig desk();
  static TrainConfig full();
  void validate() const;

  /// Total iterations for a dataset of the given size.
  int total_iterations(std::size_t dataset_size) const;
  /// lr0 * factor^floor(iteration / decay_interval).
  double learning_rate_at(int iteration) const;
};

struct LossRecord {
  int iteration = 0;
  double learning_rate = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  ModelWeights weights;
  OptimizerState optimizer;
  std::vector<LossRecord> history;
};

/// Called after every iteration; returning false stops training early.
using TrainCallback = std::function<bool(const LossRecord&, const ModelWeights&,
                                         const OptimizerState&)>;

/// Unsupervised training. Each iteration draws a batch from a per-epoch
/// permutation, builds signals, encodes, decodes and takes one Adam step on
/// the mean Chamfer loss. Randomness for iteration t is derived from
/// (seed, t) only, so a run resumed from a checkpoint at iteration t matches
/// the uninterrupted run. Weights are initialized from the seed unless
/// `start` is given; `resume` continues an optimizer state.
TrainResult train(const std::vector<Patch>& data, const ModelConfig& model,
                  const TrainConfig& config, const ModelWeights* start = nullptr,
                  const OptimizerState* resume = nullptr,
                  const TrainCallback& callback = nullptr);

/// "iteration,lr,loss" CSV with full-precision values.
void write_loss_csv(const std::vector<LossRecord>& history, const std::string& path);

}  // namespace equidesc
