#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "equidesc/core.hpp"
#include "equidesc/harmonic.hpp"
#include "equidesc/signal.hpp"

namespace equidesc {

/// One correlation layer of the encoder.
struct LayerShape {
  bool spherical = false;  // S2 input (first layer) or SO(3) input
  int in_bandwidth = 0;
  int out_bandwidth = 0;
  int in_channels = 0;
  int out_channels = 0;
  bool relu = true;

  /// Number of grid samples of one filter (input grid).
  std::size_t filter_grid_size() const;
};

/// Spherical encoder: one S2 correlation layer followed by SO(3) layers.
/// layer_bandwidths[i] = (input b, output b) of layer i; channels[i] is the
/// output channel count of layer i. The last layer is linear.
struct EncoderConfig {
  int input_shells = 4;
  std::vector<std::pair<int, int>> layer_bandwidths;
  std::vector<int> channels;

  std::vector<LayerShape> layers() const;
  int final_bandwidth() const;
  /// (2 b_final)^3 times the final channel count.
  std::size_t descriptor_size() const;
  void validate() const;
};

struct DecoderConfig {
  std::vector<int> hidden = {256, 128, 64};
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  int grid_size = 256;          // M, samples of the folding grid
  double support_radius = 0.30;  // meters; decoder outputs are in units of it

  /// b 8,8,8 -> 4, channels K -> 40 -> 40 -> 40 -> 1, M = 256.
  static ModelConfig desk();
  /// b 24,24,24 -> 4, channels K -> 40 -> 40 -> 40 -> 1, M = 256.
  static ModelConfig full();
  /// Small network for gradient checks: b = 2 throughout, K = 2,
  /// channels 2 -> 4 -> 4 -> 4 -> 1, decoder 32/16/8, M = 16.
  static ModelConfig tiny();

  /// Binning used to build the encoder input: radius, K shells, first-layer b.
  SupportSpec support() const;
  void validate() const;
};

/// Named float32 tensor; shape is row-major.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;

  std::size_t numel() const;
};

/// All trainable parameters. Tensor order is fixed by the config:
/// encoder.<i>.filter [C_out, C_in, grid...], encoder.<i>.bias [C_out] for
/// every layer, then decoder.<j>.weight [out, in], decoder.<j>.bias [out].
struct ModelWeights {
  ModelConfig config;
  std::vector<Tensor> tensors;

  Tensor& encoder_filter(int layer) { return tensors[2 * layer]; }
  const Tensor& encoder_filter(int layer) const { return tensors[2 * layer]; }
  Tensor& encoder_bias(int layer) { return tensors[2 * layer + 1]; }
  const Tensor& encoder_bias(int layer) const { return tensors[2 * layer + 1]; }
  Tensor& decoder_weight(int layer);
  const Tensor& decoder_weight(int layer) const;
  Tensor& decoder_bias(int layer);
  const Tensor& decoder_bias(int layer) const;

  std::size_t parameter_count() const;
  /// Throws InvalidArgument when tensors disagree with the config or hold
  /// non-finite values.
  void validate() const;
};

/// Names and shapes implied by a config, in storage order.
std::vector<std::pair<std::string, std::vector<int>>> expected_tensor_shapes(
    const ModelConfig& config);

/// Flattened final SO(3) feature map.
struct Descriptor {
  int bandwidth = 0;
  int channels = 1;
  std::vector<double> values;

  So3Signal as_signal() const;
  static Descriptor from_signal(const So3Signal& s);
};

/// Points (a_x, a_y) in the unit square, deformed by the decoder.
struct FoldGrid {
  std::vector<Eigen::Vector2d> samples;
  std::size_t size() const { return samples.size(); }
};

/// First M points, row-major, of the smallest r x r lattice with r^2 >= M
/// spanning [0,1]^2 (a single point sits at the center).
FoldGrid make_fold_grid(int m);

/// Effective fan-in of a correlation layer: C_in times the sum of squared
/// quadrature weights over the filter grid. Each output sample is a weighted
/// sum of w_q psi(q) h(R q), so this keeps the He variance argument intact.
double filter_fan_in(const LayerShape& layer);

/// Zero-mean Gaussian weights with variance 2 / fan_in (filter_fan_in for
/// encoder filters, the input width for decoder matrices); zero biases.
ModelWeights init_weights(const ModelConfig& config, Rng& rng);

/// Per-degree filter spectra of every encoder layer, laid out for the batched
/// block products: psi[layer][l] has C_in * n_l rows and C_out * (2l+1)
/// columns with block (i, o) = conj-transpose of the filter coefficients of
/// (o, i); n_l = 2l+1 for SO(3) layers and 1 for the S2 layer.
struct FilterSpectra {
  std::vector<std::vector<Eigen::MatrixXcd>> psi;
};

FilterSpectra compute_filter_spectra(const ModelWeights& w);

/// Activations recorded by a batched encoder pass for reverse mode.
struct EncoderTrace {
  int batch = 0;
  // inputs[layer][l]: batch * (2l+1) rows, C_in * n_l columns.
  std::vector<std::vector<Eigen::MatrixXcd>> inputs;
  // preact[layer]: batch x C_out x output grid, pre-nonlinearity.
  std::vector<std::vector<double>> preact;
};

struct EncoderOutput {
  Descriptor descriptor;
  std::vector<So3Signal> feature_maps;  // one per layer, after the nonlinearity
};

/// Layer 1: s2_correlation + bias + ReLU; later layers: so3_correlation +
/// bias + ReLU, the final layer linear. Uses the spectral backend.
EncoderOutput encoder_forward(const SphericalSignal& signal, const ModelWeights& w);

/// Batched encoder. `spectra` must come from compute_filter_spectra(w). When
/// `trace` is non-null the activations needed by encoder_backward are kept.
std::vector<Descriptor> encoder_forward_batch(const std::vector<SphericalSignal>& signals,
                                              const ModelWeights& w,
                                              const FilterSpectra& spectra,
                                              EncoderTrace* trace = nullptr);

/// Parameter gradients aligned with ModelWeights::tensors.
struct Gradients {
  std::vector<std::vector<double>> tensors;

  static Gradients zeros_like(const ModelWeights& w);
  double squared_norm() const;
};

/// Gradients of the filter spectra, same layout as FilterSpectra.
struct SpectraGradient {
  std::vector<std::vector<Eigen::MatrixXcd>> psi;
  static SpectraGradient zeros_like(const FilterSpectra& s);
};

/// Reverse pass through a recorded batch: accumulates bias gradients into
/// `grads` and filter-spectrum gradients into `spectra_grad`.
/// grad_descriptors[s] is dL/d(descriptor values) of sample s.
void encoder_backward(const EncoderTrace& trace, const ModelWeights& w,
                      const FilterSpectra& spectra,
                      const std::vector<std::vector<double>>& grad_descriptors,
                      Gradients& grads, SpectraGradient& spectra_grad);

/// Maps filter-spectrum gradients back onto the grid-domain filter tensors
/// (adjoint of compute_filter_spectra) and adds them to `grads`.
void accumulate_filter_gradients(const ModelWeights& w, const SpectraGradient& spectra_grad,
                                 Gradients& grads);

/// Decoder parameters converted to double precision once per step.
struct DecoderParams {
  std::vector<Eigen::MatrixXd> weights;  // [out, in]
  std::vector<Eigen::VectorXd> biases;
  static DecoderParams from(const ModelWeights& w);
};

struct DecoderTrace {
  Eigen::VectorXd descriptor;
  Eigen::MatrixXd grid;                  // 2 x M
  std::vector<Eigen::MatrixXd> outputs;  // post-activation per layer, width x M
};

/// Folding decoder: per grid point, (d, a_x, a_y) through FC layers with ReLU
/// on all but the last and tanh on the last. Output is 3 x M, in units of
/// the support radius.
Eigen::MatrixXd decoder_forward_matrix(const Eigen::VectorXd& descriptor,
                                       const FoldGrid& grid, const DecoderParams& p,
                                       DecoderTrace* trace = nullptr);

PointCloud decoder_forward(const Descriptor& d, const FoldGrid& grid, const ModelWeights& w);

/// Reverse pass through the decoder; adds parameter gradients into `grads`
/// and returns dL/d(descriptor).
Eigen::VectorXd decoder_backward(const DecoderTrace& trace, const DecoderParams& p,
                                 const Eigen::MatrixXd& grad_output, int first_tensor,
                                 Gradients& grads);

/// Adam moments saved with a checkpoint so training can resume.
struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};
class CorruptManifestError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class ShapeMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedPayloadError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Config as a compact JSON object and back; parse errors raise InvalidArgument.
std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

/// Single-line JSON manifest ("equidesc-ckpt-v1": config, tensor names,
/// shapes, byte offsets relative to the payload) followed by a newline and
/// the little-endian float32 tensors in manifest order.
void save_checkpoint(const ModelWeights& w, const std::string& path,
                     const OptimizerState* optimizer = nullptr);

struct Checkpoint {
  ModelWeights weights;
  std::optional<OptimizerState> optimizer;
};

Checkpoint load_checkpoint_full(const std::string& path);
ModelWeights load_checkpoint(const std::string& path);

}  // namespace equidesc
