#include "equidesc/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

namespace equidesc {
namespace {

using Json = nlohmann::json;

constexpr const char* kCheckpointFormat = "equidesc-ckpt-v1";

std::size_t SpectralSize(const LayerShape& layer, int degrees) {
  return layer.spherical ? SpectralS2::channel_size(degrees)
                         : SpectralSo3::channel_size(degrees);
}

std::size_t OutputGridSize(const LayerShape& layer) {
  const std::size_t n = 2 * layer.out_bandwidth;
  return n * n * n;
}

void Analyze(const LayerShape& layer, const double* grid, Complex* coeffs, bool weights,
             bool scale) {
  if (layer.spherical) {
    S2Transform::get(layer.in_bandwidth)
        .analyze(grid, coeffs, layer.out_bandwidth, weights, scale);
  } else {
    So3Transform::get(layer.in_bandwidth)
        .analyze(grid, coeffs, layer.out_bandwidth, weights, scale);
  }
}

void Synthesize(const LayerShape& layer, const Complex* coeffs, double* grid, bool weights,
                bool scale) {
  if (layer.spherical) {
    S2Transform::get(layer.in_bandwidth)
        .synthesize(coeffs, layer.out_bandwidth, grid, weights, scale);
  } else {
    So3Transform::get(layer.in_bandwidth)
        .synthesize(coeffs, layer.out_bandwidth, grid, weights, scale);
  }
}

// Column count of one input channel's degree-l block.
int InputWidth(const LayerShape& layer, int l) { return layer.spherical ? 1 : 2 * l + 1; }

// Index of coefficient (p, q) of degree l in a channel's coefficient array.
std::size_t InputCoeffIndex(const LayerShape& layer, int l, int p, int q) {
  if (layer.spherical) return SpectralS2::block_offset(l) + p + l;
  return SpectralSo3::block_offset(l) + (p + l) * (2 * l + 1) + (q + l);
}

void WriteLeFloats(std::ostream& out, const float* data, std::size_t count) {
  std::string buffer(count * 4, '\0');
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    for (int b = 0; b < 4; ++b) buffer[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  out.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
}

void ReadLeFloats(const char* src, float* data, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
    }
    std::memcpy(&data[i], &bits, 4);
  }
}

Json ConfigToJson(const ModelConfig& c) {
  Json enc;
  enc["input_shells"] = c.encoder.input_shells;
  enc["layer_bandwidths"] = Json::array();
  for (const auto& [bi, bo] : c.encoder.layer_bandwidths) {
    enc["layer_bandwidths"].push_back({bi, bo});
  }
  enc["channels"] = c.encoder.channels;
  Json j;
  j["encoder"] = enc;
  j["decoder"] = {{"hidden", c.decoder.hidden}};
  j["grid_size"] = c.grid_size;
  j["support_radius"] = c.support_radius;
  return j;
}

ModelConfig ConfigFromJson(const Json& j) {
  ModelConfig c;
  const Json& enc = j.at("encoder");
  c.encoder.input_shells = enc.at("input_shells").get<int>();
  for (const Json& pair : enc.at("layer_bandwidths")) {
    if (!pair.is_array() || pair.size() != 2) {
      throw InvalidArgument("layer_bandwidths entries must be [in, out] pairs");
    }
    c.encoder.layer_bandwidths.emplace_back(pair[0].get<int>(), pair[1].get<int>());
  }
  c.encoder.channels = enc.at("channels").get<std::vector<int>>();
  c.decoder.hidden = j.at("decoder").at("hidden").get<std::vector<int>>();
  c.grid_size = j.at("grid_size").get<int>();
  c.support_radius = j.at("support_radius").get<double>();
  c.validate();
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::size_t LayerShape::filter_grid_size() const {
  const std::size_t n = 2 * in_bandwidth;
  return spherical ? n * n : n * n * n;
}

std::vector<LayerShape> EncoderConfig::layers() const {
  std::vector<LayerShape> out;
  int in_channels = input_shells;
  for (std::size_t i = 0; i < layer_bandwidths.size(); ++i) {
    LayerShape s;
    s.spherical = (i == 0);
    s.in_bandwidth = layer_bandwidths[i].first;
    s.out_bandwidth = layer_bandwidths[i].second;
    s.in_channels = in_channels;
    s.out_channels = channels[i];
    s.relu = (i + 1 < layer_bandwidths.size());
    in_channels = s.out_channels;
    out.push_back(s);
  }
  return out;
}

int EncoderConfig::final_bandwidth() const { return layer_bandwidths.back().second; }

std::size_t EncoderConfig::descriptor_size() const {
  const std::size_t n = 2 * final_bandwidth();
  return n * n * n * channels.back();
}

void EncoderConfig::validate() const {
  if (input_shells < 1) throw InvalidArgument("encoder: input_shells must be >= 1");
  if (layer_bandwidths.empty()) throw InvalidArgument("encoder: needs at least one layer");
  if (channels.size() != layer_bandwidths.size()) {
    throw InvalidArgument("encoder: one channel count per layer required");
  }
  for (std::size_t i = 0; i < layer_bandwidths.size(); ++i) {
    const auto [bi, bo] = layer_bandwidths[i];
    if (bi < 1 || bo < 1 || bo > bi || bi > 32) {
      throw InvalidArgument("encoder: layer bandwidths must satisfy 1 <= out <= in <= 32");
    }
    if (i > 0 && bi != layer_bandwidths[i - 1].second) {
      throw InvalidArgument("encoder: layer input bandwidth must equal previous output");
    }
    if (channels[i] < 1) throw InvalidArgument("encoder: channel counts must be >= 1");
  }
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.encoder.input_shells = 4;
  c.encoder.layer_bandwidths = {{8, 8}, {8, 8}, {8, 8}, {8, 4}};
  c.encoder.channels = {40, 40, 40, 1};
  return c;
}

ModelConfig ModelConfig::full() {
  ModelConfig c = desk();
  c.encoder.layer_bandwidths = {{24, 24}, {24, 24}, {24, 24}, {24, 4}};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.encoder.input_shells = 2;
  c.encoder.layer_bandwidths = {{2, 2}, {2, 2}, {2, 2}, {2, 2}};
  c.encoder.channels = {4, 4, 4, 1};
  c.decoder.hidden = {32, 16, 8};
  c.grid_size = 16;
  return c;
}

SupportSpec ModelConfig::support() const {
  SupportSpec s;
  s.radius = support_radius;
  s.shells = encoder.input_shells;
  s.bandwidth = encoder.layer_bandwidths.at(0).first;
  return s;
}

void ModelConfig::validate() const {
  encoder.validate();
  if (decoder.hidden.empty()) throw InvalidArgument("decoder: needs hidden layers");
  for (int h : decoder.hidden) {
    if (h < 1) throw InvalidArgument("decoder: widths must be >= 1");
  }
  if (grid_size < 1) throw InvalidArgument("grid_size must be >= 1");
  if (!(support_radius > 0.0) || !std::isfinite(support_radius)) {
    throw InvalidArgument("support_radius must be positive");
  }
}

std::string model_config_to_json(const ModelConfig& config) {
  return ConfigToJson(config).dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return ConfigFromJson(Json::parse(text));
  } catch (const Json::exception& e) {
    throw InvalidArgument(std::string("model config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Weights

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::vector<std::pair<std::string, std::vector<int>>> expected_tensor_shapes(
    const ModelConfig& config) {
  std::vector<std::pair<std::string, std::vector<int>>> out;
  const auto layers = config.encoder.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerShape& s = layers[i];
    const int n = 2 * s.in_bandwidth;
    std::vector<int> shape = {s.out_channels, s.in_channels, n, n};
    if (!s.spherical) shape.push_back(n);
    const std::string prefix = "encoder." + std::to_string(i);
    out.emplace_back(prefix + ".filter", shape);
    out.emplace_back(prefix + ".bias", std::vector<int>{s.out_channels});
  }
  int width = static_cast<int>(config.encoder.descriptor_size()) + 2;
  std::vector<int> widths = config.decoder.hidden;
  widths.push_back(3);
  for (std::size_t j = 0; j < widths.size(); ++j) {
    const std::string prefix = "decoder." + std::to_string(j);
    out.emplace_back(prefix + ".weight", std::vector<int>{widths[j], width});
    out.emplace_back(prefix + ".bias", std::vector<int>{widths[j]});
    width = widths[j];
  }
  return out;
}

Tensor& ModelWeights::decoder_weight(int layer) {
  return tensors[2 * config.encoder.layer_bandwidths.size() + 2 * layer];
}
const Tensor& ModelWeights::decoder_weight(int layer) const {
  return tensors[2 * config.encoder.layer_bandwidths.size() + 2 * layer];
}
Tensor& ModelWeights::decoder_bias(int layer) {
  return tensors[2 * config.encoder.layer_bandwidths.size() + 2 * layer + 1];
}
const Tensor& ModelWeights::decoder_bias(int layer) const {
  return tensors[2 * config.encoder.layer_bandwidths.size() + 2 * layer + 1];
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors) n += t.numel();
  return n;
}

void ModelWeights::validate() const {
  config.validate();
  const auto expected = expected_tensor_shapes(config);
  if (expected.size() != tensors.size()) {
    throw InvalidArgument("model weights: wrong number of tensors");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != expected[i].first || tensors[i].shape != expected[i].second ||
        tensors[i].data.size() != tensors[i].numel()) {
      throw InvalidArgument("model weights: tensor " + expected[i].first +
                            " does not match the config");
    }
    for (float v : tensors[i].data) {
      if (!std::isfinite(v)) {
        throw InvalidArgument("model weights: non-finite value in " + tensors[i].name);
      }
    }
  }
}

So3Signal Descriptor::as_signal() const {
  So3Signal s(bandwidth, channels);
  if (values.size() != s.values.size()) {
    throw InvalidArgument("descriptor length does not match its bandwidth");
  }
  s.values = values;
  return s;
}

Descriptor Descriptor::from_signal(const So3Signal& s) {
  Descriptor d;
  d.bandwidth = s.bandwidth;
  d.channels = s.channels;
  d.values = s.values;
  return d;
}

FoldGrid make_fold_grid(int m) {
  if (m < 1) throw InvalidArgument("fold grid needs at least one sample");
  const int r = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(m))));
  FoldGrid grid;
  grid.samples.reserve(m);
  for (int idx = 0; idx < m; ++idx) {
    if (r == 1) {
      grid.samples.emplace_back(0.5, 0.5);
      continue;
    }
    const int row = idx / r;
    const int col = idx % r;
    grid.samples.emplace_back(static_cast<double>(col) / (r - 1),
                              static_cast<double>(row) / (r - 1));
  }
  return grid;
}

double filter_fan_in(const LayerShape& layer) {
  const int n = 2 * layer.in_bandwidth;
  double sum_w2 = 0.0;
  if (layer.spherical) {
    for (double w : make_dh_grid(layer.in_bandwidth).weights) sum_w2 += n * w * w;
  } else {
    for (double w : make_so3_grid(layer.in_bandwidth).weights) sum_w2 += n * n * w * w;
  }
  return layer.in_channels * sum_w2;
}

ModelWeights init_weights(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelWeights w;
  w.config = config;
  const auto layers = config.encoder.layers();
  const auto shapes = expected_tensor_shapes(config);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t t = 0; t < shapes.size(); ++t) {
    Tensor tensor;
    tensor.name = shapes[t].first;
    tensor.shape = shapes[t].second;
    tensor.data.assign(tensor.numel(), 0.0f);
    const bool is_bias = (t % 2 == 1);
    if (!is_bias) {
      double fan_in;
      if (t < 2 * layers.size()) {
        fan_in = filter_fan_in(layers[t / 2]);
      } else {
        fan_in = tensor.shape[1];
      }
      const double sigma = std::sqrt(2.0 / fan_in);
      for (float& v : tensor.data) v = static_cast<float>(sigma * normal(rng));
    }
    w.tensors.push_back(std::move(tensor));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Encoder

FilterSpectra compute_filter_spectra(const ModelWeights& w) {
  const auto layers = w.config.encoder.layers();
  FilterSpectra spectra;
  spectra.psi.resize(layers.size());
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const LayerShape& s = layers[li];
    const int bo = s.out_bandwidth;
    auto& blocks = spectra.psi[li];
    blocks.resize(bo);
    for (int l = 0; l < bo; ++l) {
      blocks[l] = Eigen::MatrixXcd::Zero(s.in_channels * InputWidth(s, l),
                                         s.out_channels * (2 * l + 1));
    }
    const Tensor& filter = w.encoder_filter(static_cast<int>(li));
    const std::size_t gs = s.filter_grid_size();
    std::vector<double> grid(gs);
    std::vector<Complex> coeffs(SpectralSize(s, bo));
    for (int o = 0; o < s.out_channels; ++o) {
      for (int i = 0; i < s.in_channels; ++i) {
        const float* src = filter.data.data() + (static_cast<std::size_t>(o) * s.in_channels + i) * gs;
        std::copy(src, src + gs, grid.begin());
        Analyze(s, grid.data(), coeffs.data(), true, false);
        for (int l = 0; l < bo; ++l) {
          const int wq = InputWidth(s, l);
          for (int q = 0; q < wq; ++q) {
            const int qq = s.spherical ? 0 : q - l;
            for (int m = -l; m <= l; ++m) {
              blocks[l](i * wq + q, o * (2 * l + 1) + m + l) =
                  std::conj(coeffs[InputCoeffIndex(s, l, m, qq)]);
            }
          }
        }
      }
    }
  }
  return spectra;
}

std::vector<Descriptor> encoder_forward_batch(const std::vector<SphericalSignal>& signals,
                                              const ModelWeights& w,
                                              const FilterSpectra& spectra,
                                              EncoderTrace* trace) {
  const auto layers = w.config.encoder.layers();
  const int batch = static_cast<int>(signals.size());
  if (batch == 0) return {};
  for (const SphericalSignal& f : signals) {
    if (f.bandwidth != layers[0].in_bandwidth || f.channels != w.config.encoder.input_shells ||
        f.values.size() != f.grid_size() * f.channels) {
      throw InvalidArgument("encoder: input signal shape does not match the config");
    }
  }
  if (spectra.psi.size() != layers.size()) {
    throw InvalidArgument("encoder: filter spectra do not match the config");
  }
  if (trace) {
    trace->batch = batch;
    trace->inputs.assign(layers.size(), {});
    trace->preact.assign(layers.size(), {});
  }

  std::vector<double> act;  // previous layer output, [sample][channel][grid]
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const LayerShape& s = layers[li];
    const int bo = s.out_bandwidth;
    const std::size_t in_grid =
        s.spherical ? static_cast<std::size_t>(4) * s.in_bandwidth * s.in_bandwidth
                    : static_cast<std::size_t>(8) * s.in_bandwidth * s.in_bandwidth *
                          s.in_bandwidth;
    std::vector<Eigen::MatrixXcd> x(bo);
    for (int l = 0; l < bo; ++l) {
      x[l].resize(static_cast<Eigen::Index>(batch) * (2 * l + 1),
                  s.in_channels * InputWidth(s, l));
    }
    std::vector<Complex> coeffs(SpectralSize(s, bo));
    for (int b = 0; b < batch; ++b) {
      for (int i = 0; i < s.in_channels; ++i) {
        const double* grid = s.spherical
                                 ? signals[b].values.data() + i * in_grid
                                 : act.data() + (static_cast<std::size_t>(b) * s.in_channels + i) * in_grid;
        Analyze(s, grid, coeffs.data(), true, false);
        for (int l = 0; l < bo; ++l) {
          const int wq = InputWidth(s, l);
          for (int p = -l; p <= l; ++p) {
            for (int q = 0; q < wq; ++q) {
              const int qq = s.spherical ? 0 : q - l;
              x[l](b * (2 * l + 1) + p + l, i * wq + q) = coeffs[InputCoeffIndex(s, l, p, qq)];
            }
          }
        }
      }
    }

    const So3Transform& out_t = So3Transform::get(bo);
    const std::size_t out_grid = OutputGridSize(s);
    std::vector<double> next(static_cast<std::size_t>(batch) * s.out_channels * out_grid);
    std::vector<Eigen::MatrixXcd> y(bo);
    for (int l = 0; l < bo; ++l) y[l].noalias() = x[l] * spectra.psi[li][l];
    std::vector<Complex> out_coeffs(SpectralSo3::channel_size(bo));
    const Tensor& bias = w.encoder_bias(static_cast<int>(li));
    for (int b = 0; b < batch; ++b) {
      for (int o = 0; o < s.out_channels; ++o) {
        for (int l = 0; l < bo; ++l) {
          const int wl = 2 * l + 1;
          Complex* dst = out_coeffs.data() + SpectralSo3::block_offset(l);
          for (int p = 0; p < wl; ++p) {
            for (int m = 0; m < wl; ++m) dst[p * wl + m] = y[l](b * wl + p, o * wl + m);
          }
        }
        double* grid = next.data() + (static_cast<std::size_t>(b) * s.out_channels + o) * out_grid;
        out_t.synthesize(out_coeffs.data(), bo, grid, false, true);
        const double beta = bias.data[o];
        for (std::size_t q = 0; q < out_grid; ++q) grid[q] += beta;
      }
    }
    if (trace) {
      trace->inputs[li] = std::move(x);
      trace->preact[li] = next;
    }
    if (s.relu) {
      for (double& v : next) v = v > 0.0 ? v : 0.0;
    }
    act = std::move(next);
  }

  const LayerShape& last = layers.back();
  const std::size_t per_sample = OutputGridSize(last) * last.out_channels;
  std::vector<Descriptor> out(batch);
  for (int b = 0; b < batch; ++b) {
    out[b].bandwidth = last.out_bandwidth;
    out[b].channels = last.out_channels;
    out[b].values.assign(act.begin() + b * per_sample, act.begin() + (b + 1) * per_sample);
  }
  return out;
}

EncoderOutput encoder_forward(const SphericalSignal& signal, const ModelWeights& w) {
  const FilterSpectra spectra = compute_filter_spectra(w);
  EncoderTrace trace;
  auto descriptors = encoder_forward_batch({signal}, w, spectra, &trace);
  EncoderOutput out;
  out.descriptor = std::move(descriptors[0]);
  const auto layers = w.config.encoder.layers();
  for (std::size_t li = 0; li < layers.size(); ++li) {
    So3Signal map(layers[li].out_bandwidth, layers[li].out_channels);
    map.values = trace.preact[li];
    if (layers[li].relu) {
      for (double& v : map.values) v = v > 0.0 ? v : 0.0;
    }
    out.feature_maps.push_back(std::move(map));
  }
  return out;
}

Gradients Gradients::zeros_like(const ModelWeights& w) {
  Gradients g;
  for (const Tensor& t : w.tensors) g.tensors.emplace_back(t.numel(), 0.0);
  return g;
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& t : tensors) {
    for (double v : t) s += v * v;
  }
  return s;
}

SpectraGradient SpectraGradient::zeros_like(const FilterSpectra& s) {
  SpectraGradient g;
  g.psi.resize(s.psi.size());
  for (std::size_t i = 0; i < s.psi.size(); ++i) {
    for (const auto& m : s.psi[i]) g.psi[i].push_back(Eigen::MatrixXcd::Zero(m.rows(), m.cols()));
  }
  return g;
}

void encoder_backward(const EncoderTrace& trace, const ModelWeights& w,
                      const FilterSpectra& spectra,
                      const std::vector<std::vector<double>>& grad_descriptors,
                      Gradients& grads, SpectraGradient& spectra_grad) {
  const auto layers = w.config.encoder.layers();
  const int batch = trace.batch;
  if (static_cast<int>(grad_descriptors.size()) != batch) {
    throw InvalidArgument("encoder_backward: one descriptor gradient per sample required");
  }
  const LayerShape& last = layers.back();
  const std::size_t per_sample = OutputGridSize(last) * last.out_channels;
  std::vector<double> grad(static_cast<std::size_t>(batch) * per_sample);
  for (int b = 0; b < batch; ++b) {
    if (grad_descriptors[b].size() != per_sample) {
      throw InvalidArgument("encoder_backward: descriptor gradient has the wrong length");
    }
    std::copy(grad_descriptors[b].begin(), grad_descriptors[b].end(),
              grad.begin() + b * per_sample);
  }

  for (int li = static_cast<int>(layers.size()) - 1; li >= 0; --li) {
    const LayerShape& s = layers[li];
    const int bo = s.out_bandwidth;
    const std::size_t out_grid = OutputGridSize(s);
    const std::vector<double>& pre = trace.preact[li];
    if (s.relu) {
      for (std::size_t q = 0; q < grad.size(); ++q) {
        if (!(pre[q] > 0.0)) grad[q] = 0.0;
      }
    }
    std::vector<double>& bias_grad = grads.tensors[2 * li + 1];
    std::vector<Eigen::MatrixXcd> gy(bo);
    for (int l = 0; l < bo; ++l) {
      gy[l].resize(static_cast<Eigen::Index>(batch) * (2 * l + 1),
                   s.out_channels * (2 * l + 1));
    }
    const So3Transform& out_t = So3Transform::get(bo);
    std::vector<Complex> coeffs(SpectralSo3::channel_size(bo));
    for (int b = 0; b < batch; ++b) {
      for (int o = 0; o < s.out_channels; ++o) {
        const double* g = grad.data() + (static_cast<std::size_t>(b) * s.out_channels + o) * out_grid;
        double sum = 0.0;
        for (std::size_t q = 0; q < out_grid; ++q) sum += g[q];
        bias_grad[o] += sum;
        out_t.analyze(g, coeffs.data(), bo, false, true);
        for (int l = 0; l < bo; ++l) {
          const int wl = 2 * l + 1;
          const Complex* src = coeffs.data() + SpectralSo3::block_offset(l);
          for (int p = 0; p < wl; ++p) {
            for (int m = 0; m < wl; ++m) gy[l](b * wl + p, o * wl + m) = src[p * wl + m];
          }
        }
      }
    }
    for (int l = 0; l < bo; ++l) {
      spectra_grad.psi[li][l].noalias() += trace.inputs[li][l].adjoint() * gy[l];
    }
    if (li == 0) break;

    // Gradient with respect to the previous layer's (post-nonlinearity) output.
    const std::size_t in_grid = static_cast<std::size_t>(8) * s.in_bandwidth *
                                s.in_bandwidth * s.in_bandwidth;
    std::vector<double> prev(static_cast<std::size_t>(batch) * s.in_channels * in_grid);
    std::vector<Eigen::MatrixXcd> gx(bo);
    for (int l = 0; l < bo; ++l) gx[l].noalias() = gy[l] * spectra.psi[li][l].adjoint();
    std::vector<Complex> in_coeffs(SpectralSo3::channel_size(bo));
    const So3Transform& in_t = So3Transform::get(s.in_bandwidth);
    for (int b = 0; b < batch; ++b) {
      for (int i = 0; i < s.in_channels; ++i) {
        for (int l = 0; l < bo; ++l) {
          const int wl = 2 * l + 1;
          Complex* dst = in_coeffs.data() + SpectralSo3::block_offset(l);
          for (int p = 0; p < wl; ++p) {
            for (int q = 0; q < wl; ++q) dst[p * wl + q] = gx[l](b * wl + p, i * wl + q);
          }
        }
        in_t.synthesize(in_coeffs.data(), bo,
                        prev.data() + (static_cast<std::size_t>(b) * s.in_channels + i) * in_grid,
                        true, false);
      }
    }
    grad = std::move(prev);
  }
}

void accumulate_filter_gradients(const ModelWeights& w, const SpectraGradient& spectra_grad,
                                 Gradients& grads) {
  const auto layers = w.config.encoder.layers();
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const LayerShape& s = layers[li];
    const int bo = s.out_bandwidth;
    const std::size_t gs = s.filter_grid_size();
    std::vector<Complex> coeffs(SpectralSize(s, bo));
    std::vector<double> grid(gs);
    std::vector<double>& dst = grads.tensors[2 * li];
    for (int o = 0; o < s.out_channels; ++o) {
      for (int i = 0; i < s.in_channels; ++i) {
        for (int l = 0; l < bo; ++l) {
          const int wq = InputWidth(s, l);
          for (int q = 0; q < wq; ++q) {
            const int qq = s.spherical ? 0 : q - l;
            for (int m = -l; m <= l; ++m) {
              coeffs[InputCoeffIndex(s, l, m, qq)] =
                  std::conj(spectra_grad.psi[li][l](i * wq + q, o * (2 * l + 1) + m + l));
            }
          }
        }
        Synthesize(s, coeffs.data(), grid.data(), true, false);
        double* out = dst.data() + (static_cast<std::size_t>(o) * s.in_channels + i) * gs;
        for (std::size_t q = 0; q < gs; ++q) out[q] += grid[q];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Decoder

DecoderParams DecoderParams::from(const ModelWeights& w) {
  DecoderParams p;
  const int layers = static_cast<int>(w.config.decoder.hidden.size()) + 1;
  for (int j = 0; j < layers; ++j) {
    const Tensor& wt = w.decoder_weight(j);
    const Tensor& bt = w.decoder_bias(j);
    Eigen::MatrixXd m(wt.shape[0], wt.shape[1]);
    for (int r = 0; r < wt.shape[0]; ++r) {
      for (int c = 0; c < wt.shape[1]; ++c) m(r, c) = wt.data[static_cast<std::size_t>(r) * wt.shape[1] + c];
    }
    Eigen::VectorXd b(bt.shape[0]);
    for (int r = 0; r < bt.shape[0]; ++r) b(r) = bt.data[r];
    p.weights.push_back(std::move(m));
    p.biases.push_back(std::move(b));
  }
  return p;
}

Eigen::MatrixXd decoder_forward_matrix(const Eigen::VectorXd& descriptor,
                                       const FoldGrid& grid, const DecoderParams& p,
                                       DecoderTrace* trace) {
  const Eigen::Index dim = descriptor.size();
  if (p.weights.empty() || p.weights[0].cols() != dim + 2) {
    throw InvalidArgument("decoder: descriptor length does not match the weights");
  }
  const Eigen::Index m = static_cast<Eigen::Index>(grid.size());
  if (m == 0) throw InvalidArgument("decoder: empty fold grid");
  Eigen::MatrixXd a(2, m);
  for (Eigen::Index i = 0; i < m; ++i) a.col(i) = grid.samples[i];
  // The descriptor part of the first layer is shared by every grid point.
  const Eigen::VectorXd shared = p.weights[0].leftCols(dim) * descriptor + p.biases[0];
  Eigen::MatrixXd h = p.weights[0].rightCols(2) * a;
  h.colwise() += shared;
  if (trace) {
    trace->descriptor = descriptor;
    trace->grid = a;
    trace->outputs.clear();
  }
  const std::size_t layers = p.weights.size();
  for (std::size_t j = 0;; ++j) {
    if (j + 1 == layers) {
      h = h.array().tanh().matrix();
    } else {
      h = h.cwiseMax(0.0);
    }
    if (trace) trace->outputs.push_back(h);
    if (j + 1 == layers) break;
    Eigen::MatrixXd next = p.weights[j + 1] * h;
    next.colwise() += p.biases[j + 1];
    h = std::move(next);
  }
  return h;
}

PointCloud decoder_forward(const Descriptor& d, const FoldGrid& grid, const ModelWeights& w) {
  const Eigen::Map<const Eigen::VectorXd> desc(d.values.data(),
                                               static_cast<Eigen::Index>(d.values.size()));
  const Eigen::MatrixXd out = decoder_forward_matrix(desc, grid, DecoderParams::from(w));
  PointCloud cloud;
  cloud.points.reserve(out.cols());
  for (Eigen::Index i = 0; i < out.cols(); ++i) cloud.points.emplace_back(out.col(i));
  return cloud;
}

Eigen::VectorXd decoder_backward(const DecoderTrace& trace, const DecoderParams& p,
                                 const Eigen::MatrixXd& grad_output, int first_tensor,
                                 Gradients& grads) {
  const int layers = static_cast<int>(p.weights.size());
  const Eigen::Index dim = trace.descriptor.size();
  const Eigen::MatrixXd& y = trace.outputs.back();
  Eigen::MatrixXd g = grad_output.cwiseProduct((1.0 - y.array().square()).matrix());
  Eigen::VectorXd grad_desc;
  for (int j = layers - 1; j >= 0; --j) {
    std::vector<double>& gw = grads.tensors[first_tensor + 2 * j];
    std::vector<double>& gb = grads.tensors[first_tensor + 2 * j + 1];
    const Eigen::VectorXd row_sum = g.rowwise().sum();
    for (Eigen::Index r = 0; r < row_sum.size(); ++r) gb[r] += row_sum(r);
    Eigen::MatrixXd dw;
    if (j > 0) {
      dw.noalias() = g * trace.outputs[j - 1].transpose();
    } else {
      dw.resize(g.rows(), dim + 2);
      dw.leftCols(dim).noalias() = row_sum * trace.descriptor.transpose();
      dw.rightCols(2).noalias() = g * trace.grid.transpose();
    }
    const Eigen::Index cols = dw.cols();
    for (Eigen::Index r = 0; r < dw.rows(); ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) gw[r * cols + c] += dw(r, c);
    }
    if (j > 0) {
      Eigen::MatrixXd back = p.weights[j].transpose() * g;
      const Eigen::MatrixXd& a = trace.outputs[j - 1];
      g = back.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
    } else {
      grad_desc = p.weights[0].leftCols(dim).transpose() * row_sum;
    }
  }
  return grad_desc;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const ModelWeights& w, const std::string& path,
                     const OptimizerState* optimizer) {
  w.validate();
  Json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["config"] = ConfigToJson(w.config);
  manifest["tensors"] = Json::array();
  std::size_t offset = 0;
  auto add = [&](const std::string& name, const std::vector<int>& shape, std::size_t numel) {
    manifest["tensors"].push_back({{"name", name}, {"shape", shape}, {"offset", offset}});
    offset += numel * 4;
  };
  for (const Tensor& t : w.tensors) add(t.name, t.shape, t.numel());
  if (optimizer) {
    if (optimizer->m.size() != w.tensors.size() || optimizer->v.size() != w.tensors.size()) {
      throw InvalidArgument("save_checkpoint: optimizer state does not match the weights");
    }
    manifest["optimizer_step"] = optimizer->step;
    for (const Tensor& t : w.tensors) add("adam.m." + t.name, t.shape, t.numel());
    for (const Tensor& t : w.tensors) add("adam.v." + t.name, t.shape, t.numel());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("save_checkpoint: cannot open " + path);
  out << manifest.dump() << '\n';
  for (const Tensor& t : w.tensors) WriteLeFloats(out, t.data.data(), t.data.size());
  if (optimizer) {
    for (const auto* moments : {&optimizer->m, &optimizer->v}) {
      for (const auto& vec : *moments) {
        std::vector<float> f(vec.begin(), vec.end());
        WriteLeFloats(out, f.data(), f.size());
      }
    }
  }
  if (!out) throw Error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint_full(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_checkpoint: cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t newline = bytes.find('\n');
  if (newline == std::string::npos) {
    throw CorruptManifestError("corrupt manifest: no manifest line terminator");
  }
  Json manifest;
  ModelConfig config;
  try {
    manifest = Json::parse(bytes.substr(0, newline));
    if (manifest.at("format").get<std::string>() != kCheckpointFormat) {
      throw CorruptManifestError("corrupt manifest: unknown format tag");
    }
    config = ConfigFromJson(manifest.at("config"));
  } catch (const Json::exception& e) {
    throw CorruptManifestError(std::string("corrupt manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw CorruptManifestError(std::string("corrupt manifest: ") + e.what());
  }

  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  bool has_optimizer = false;
  std::int64_t step = 0;
  try {
    for (const Json& t : manifest.at("tensors")) {
      entries.push_back({t.at("name").get<std::string>(), t.at("shape").get<std::vector<int>>(),
                         t.at("offset").get<std::size_t>()});
    }
    if (manifest.contains("optimizer_step")) {
      has_optimizer = true;
      step = manifest.at("optimizer_step").get<std::int64_t>();
    }
  } catch (const Json::exception& e) {
    throw CorruptManifestError(std::string("corrupt manifest: ") + e.what());
  }

  const auto expected = expected_tensor_shapes(config);
  const std::size_t n_expected = expected.size() * (has_optimizer ? 3 : 1);
  if (entries.size() != n_expected) {
    throw CorruptManifestError("corrupt manifest: expected " + std::to_string(n_expected) +
                               " tensors, found " + std::to_string(entries.size()));
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, shape] = expected[i % expected.size()];
    const std::string prefix = i < expected.size() ? "" : (i < 2 * expected.size() ? "adam.m." : "adam.v.");
    if (entries[i].name != prefix + name) {
      throw CorruptManifestError("corrupt manifest: unexpected tensor " + entries[i].name);
    }
    if (entries[i].shape != shape) {
      throw ShapeMismatchError("shape mismatch for tensor " + entries[i].name);
    }
    if (entries[i].offset != offset) {
      throw CorruptManifestError("corrupt manifest: bad offset for tensor " + entries[i].name);
    }
    std::size_t numel = 1;
    for (int d : shape) numel *= static_cast<std::size_t>(d);
    offset += numel * 4;
  }
  const std::size_t payload = bytes.size() - newline - 1;
  if (payload < offset) {
    throw TruncatedPayloadError("truncated payload: expected " + std::to_string(offset) +
                                " bytes, found " + std::to_string(payload));
  }
  if (payload > offset) {
    throw CorruptManifestError("corrupt manifest: trailing bytes after payload");
  }

  const char* base = bytes.data() + newline + 1;
  Checkpoint ck;
  ck.weights.config = config;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    Tensor t;
    t.name = expected[i].first;
    t.shape = expected[i].second;
    t.data.resize(t.numel());
    ReadLeFloats(base + entries[i].offset, t.data.data(), t.data.size());
    ck.weights.tensors.push_back(std::move(t));
  }
  if (has_optimizer) {
    OptimizerState opt;
    opt.step = step;
    for (std::size_t i = expected.size(); i < entries.size(); ++i) {
      const Tensor& like = ck.weights.tensors[i % expected.size()];
      std::vector<float> f(like.numel());
      ReadLeFloats(base + entries[i].offset, f.data(), f.size());
      (i < 2 * expected.size() ? opt.m : opt.v).emplace_back(f.begin(), f.end());
    }
    ck.optimizer = std::move(opt);
  }
  try {
    ck.weights.validate();
  } catch (const InvalidArgument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

ModelWeights load_checkpoint(const std::string& path) {
  return load_checkpoint_full(path).weights;
}

}  // namespace equidesc
