#include "equidesc/network.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

namespace equidesc {
namespace {

std::string TempPath(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("equidesc_net_" + name)).string();
}

SphericalSignal RandomSignal(int b, int channels, Rng& rng) {
  SphericalSignal f(b, channels);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (double& v : f.values) v = u(rng);
  return f;
}

// Filter tensor slice (o, i) as a standalone signal.
SphericalSignal S2Filter(const ModelWeights& w, int o, int i) {
  const LayerShape s = w.config.encoder.layers()[0];
  SphericalSignal f(s.in_bandwidth, 1);
  const Tensor& t = w.encoder_filter(0);
  const std::size_t gs = s.filter_grid_size();
  for (std::size_t q = 0; q < gs; ++q) f.values[q] = t.data[(o * s.in_channels + i) * gs + q];
  return f;
}

So3Signal So3Filter(const ModelWeights& w, int layer, int o, int i) {
  const LayerShape s = w.config.encoder.layers()[layer];
  So3Signal f(s.in_bandwidth, 1);
  const Tensor& t = w.encoder_filter(layer);
  const std::size_t gs = s.filter_grid_size();
  for (std::size_t q = 0; q < gs; ++q) f.values[q] = t.data[(o * s.in_channels + i) * gs + q];
  return f;
}

SphericalSignal Channel(const SphericalSignal& f, int c) {
  SphericalSignal out(f.bandwidth, 1);
  std::copy(f.values.begin() + c * f.grid_size(), f.values.begin() + (c + 1) * f.grid_size(),
            out.values.begin());
  return out;
}

So3Signal Channel(const So3Signal& h, int c) {
  So3Signal out(h.bandwidth, 1);
  std::copy(h.channel(c), h.channel(c) + h.grid_size(), out.values.begin());
  return out;
}

// Reference encoder built from the standalone correlation routines.
std::vector<So3Signal> ReferenceForward(const SphericalSignal& f, const ModelWeights& w) {
  const auto layers = w.config.encoder.layers();
  std::vector<So3Signal> maps;
  So3Signal prev;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const LayerShape& s = layers[li];
    So3Signal out(s.out_bandwidth, s.out_channels);
    for (int o = 0; o < s.out_channels; ++o) {
      for (int i = 0; i < s.in_channels; ++i) {
        const So3Signal term =
            li == 0 ? s2_correlation(Channel(f, i), S2Filter(w, o, i), s.out_bandwidth)
                    : so3_correlation(Channel(prev, i), So3Filter(w, li, o, i), s.out_bandwidth);
        for (std::size_t q = 0; q < out.grid_size(); ++q) out.channel(o)[q] += term.values[q];
      }
      for (std::size_t q = 0; q < out.grid_size(); ++q) {
        double& v = out.channel(o)[q];
        v += w.encoder_bias(li).data[o];
        if (s.relu) v = std::max(v, 0.0);
      }
    }
    maps.push_back(out);
    prev = out;
  }
  return maps;
}

ModelConfig SmallConfig() {
  ModelConfig c;
  c.encoder.input_shells = 2;
  c.encoder.layer_bandwidths = {{4, 4}, {4, 3}, {3, 2}};
  c.encoder.channels = {3, 3, 1};
  c.decoder.hidden = {16, 8};
  c.grid_size = 9;
  return c;
}

TEST(NetworkConfig, PresetsValidate) {
  for (const ModelConfig& c : {ModelConfig::desk(), ModelConfig::full(), ModelConfig::tiny()}) {
    EXPECT_NO_THROW(c.validate());
  }
  const ModelConfig desk = ModelConfig::desk();
  EXPECT_EQ(desk.encoder.descriptor_size(), 512u);
  EXPECT_EQ(desk.grid_size, 256);
  const auto layers = desk.encoder.layers();
  ASSERT_EQ(layers.size(), 4u);
  EXPECT_TRUE(layers[0].spherical);
  EXPECT_FALSE(layers[1].spherical);
  EXPECT_EQ(layers[0].in_channels, 4);
  EXPECT_EQ(layers[3].out_channels, 1);
  EXPECT_FALSE(layers[3].relu);
  EXPECT_TRUE(layers[2].relu);
}

TEST(NetworkConfig, RejectsInconsistentBandwidths) {
  ModelConfig c = ModelConfig::desk();
  c.encoder.layer_bandwidths[1] = {6, 6};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ModelConfig::desk();
  c.encoder.layer_bandwidths[3] = {8, 9};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ModelConfig::desk();
  c.encoder.channels.pop_back();
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(NetworkConfig, JsonRoundTrip) {
  const ModelConfig c = SmallConfig();
  const ModelConfig back = model_config_from_json(model_config_to_json(c));
  EXPECT_EQ(back.encoder.layer_bandwidths, c.encoder.layer_bandwidths);
  EXPECT_EQ(back.encoder.channels, c.encoder.channels);
  EXPECT_EQ(back.decoder.hidden, c.decoder.hidden);
  EXPECT_EQ(back.support_radius, c.support_radius);
  EXPECT_THROW(model_config_from_json("{\"encoder\": 3}"), InvalidArgument);
}

TEST(NetworkWeights, ShapesFollowConfig) {
  Rng rng(1);
  const ModelWeights w = init_weights(ModelConfig::desk(), rng);
  EXPECT_NO_THROW(w.validate());
  EXPECT_EQ(w.encoder_filter(0).shape, (std::vector<int>{40, 4, 16, 16}));
  EXPECT_EQ(w.encoder_filter(1).shape, (std::vector<int>{40, 40, 16, 16, 16}));
  EXPECT_EQ(w.decoder_weight(0).shape, (std::vector<int>{256, 514}));
  EXPECT_EQ(w.decoder_weight(3).shape, (std::vector<int>{3, 64}));
  EXPECT_EQ(w.decoder_bias(3).shape, (std::vector<int>{3}));
}

TEST(NetworkWeights, InitIsSeededAndScaled) {
  Rng a(7), b(7), c(8);
  const ModelConfig config = ModelConfig::desk();
  const ModelWeights wa = init_weights(config, a);
  const ModelWeights wb = init_weights(config, b);
  const ModelWeights wc = init_weights(config, c);
  EXPECT_EQ(wa.tensors[2].data, wb.tensors[2].data);
  EXPECT_NE(wa.tensors[2].data, wc.tensors[2].data);

  const auto layers = config.encoder.layers();
  for (std::size_t t = 0; t < wa.tensors.size(); t += 2) {
    const Tensor& tensor = wa.tensors[t];
    const double fan_in =
        t < 2 * layers.size() ? filter_fan_in(layers[t / 2]) : tensor.shape[1];
    double sum = 0.0, sum2 = 0.0;
    for (float v : tensor.data) {
      sum += v;
      sum2 += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(tensor.data.size());
    const double var = sum2 / n - (sum / n) * (sum / n);
    EXPECT_NEAR(var / (2.0 / fan_in), 1.0, 0.10) << tensor.name;
    for (float v : wa.tensors[t + 1].data) EXPECT_EQ(v, 0.0f);
  }
}

TEST(NetworkEncoder, ZeroWeightsGiveZeroDescriptor) {
  ModelConfig config = SmallConfig();
  Rng rng(3);
  ModelWeights w = init_weights(config, rng);
  for (Tensor& t : w.tensors) std::fill(t.data.begin(), t.data.end(), 0.0f);
  const EncoderOutput out = encoder_forward(RandomSignal(4, 2, rng), w);
  EXPECT_EQ(out.descriptor.values.size(), config.encoder.descriptor_size());
  for (double v : out.descriptor.values) EXPECT_EQ(v, 0.0);
}

TEST(NetworkEncoder, MatchesStandaloneCorrelations) {
  const ModelConfig config = SmallConfig();
  Rng rng(11);
  ModelWeights w = init_weights(config, rng);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (int li = 0; li < 3; ++li) {
    for (float& v : w.encoder_bias(li).data) v = static_cast<float>(normal(rng));
  }
  const SphericalSignal f = RandomSignal(4, 2, rng);
  const EncoderOutput out = encoder_forward(f, w);
  const auto ref = ReferenceForward(f, w);
  ASSERT_EQ(out.feature_maps.size(), ref.size());
  for (std::size_t li = 0; li < ref.size(); ++li) {
    double scale = 0.0, err = 0.0;
    for (std::size_t q = 0; q < ref[li].values.size(); ++q) {
      scale = std::max(scale, std::abs(ref[li].values[q]));
      err = std::max(err, std::abs(ref[li].values[q] - out.feature_maps[li].values[q]));
    }
    EXPECT_LT(err, 1e-9 * std::max(scale, 1.0)) << "layer " << li;
  }
  EXPECT_EQ(out.descriptor.values, out.feature_maps.back().values);
}

TEST(NetworkEncoder, BatchMatchesSingle) {
  const ModelConfig config = SmallConfig();
  Rng rng(5);
  const ModelWeights w = init_weights(config, rng);
  const std::vector<SphericalSignal> inputs = {RandomSignal(4, 2, rng), RandomSignal(4, 2, rng),
                                               RandomSignal(4, 2, rng)};
  const auto batch = encoder_forward_batch(inputs, w, compute_filter_spectra(w));
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const Descriptor single = encoder_forward(inputs[s], w).descriptor;
    for (std::size_t q = 0; q < single.values.size(); ++q) {
      EXPECT_NEAR(batch[s].values[q], single.values[q], 1e-12);
    }
  }
}

TEST(NetworkEncoder, EquivariantToGridAlignedRotations) {
  // A shift by whole alpha cells rotates every layer's output grid by the
  // same angle, so descriptors shift columns exactly.
  ModelConfig config = SmallConfig();
  config.encoder.layer_bandwidths = {{4, 4}, {4, 4}, {4, 4}};
  Rng rng(9);
  const ModelWeights w = init_weights(config, rng);
  const SphericalSignal f = RandomSignal(4, 2, rng);
  const int shift = 3;
  const double angle = 2.0 * M_PI * shift / 8.0;
  const SphericalSignal g = rotate_s2_signal(f, RotationZYZ{angle, 0.0, 0.0});
  const So3Signal a = encoder_forward(f, w).descriptor.as_signal();
  const So3Signal b = encoder_forward(g, w).descriptor.as_signal();
  const So3Signal expected = rotate_so3_signal(a, RotationZYZ{angle, 0.0, 0.0});
  for (std::size_t q = 0; q < a.values.size(); ++q) {
    EXPECT_NEAR(b.values[q], expected.values[q], 1e-9);
  }
}

TEST(NetworkEncoder, RejectsWrongInputShape) {
  Rng rng(2);
  const ModelWeights w = init_weights(SmallConfig(), rng);
  EXPECT_THROW(encoder_forward(RandomSignal(8, 2, rng), w), InvalidArgument);
  EXPECT_THROW(encoder_forward(RandomSignal(4, 3, rng), w), InvalidArgument);
}

TEST(NetworkDecoder, ZeroWeightsGiveTanhOfBias) {
  const ModelConfig config = ModelConfig::desk();
  Rng rng(4);
  ModelWeights w = init_weights(config, rng);
  const int last = static_cast<int>(config.decoder.hidden.size());
  for (int j = 0; j <= last; ++j) {
    std::fill(w.decoder_weight(j).data.begin(), w.decoder_weight(j).data.end(), 0.0f);
  }
  w.decoder_bias(last).data = {0.25f, -0.5f, 1.5f};
  Descriptor d;
  d.bandwidth = 4;
  d.values.assign(512, 1.0);
  const PointCloud out = decoder_forward(d, make_fold_grid(config.grid_size), w);
  ASSERT_EQ(out.points.size(), 256u);
  for (const Vec3& p : out.points) {
    EXPECT_NEAR(p.x(), std::tanh(0.25), 1e-7);
    EXPECT_NEAR(p.y(), std::tanh(-0.5), 1e-7);
    EXPECT_NEAR(p.z(), std::tanh(1.5), 1e-7);
  }
}

TEST(NetworkDecoder, FoldGridLayout) {
  const FoldGrid g = make_fold_grid(256);
  ASSERT_EQ(g.size(), 256u);
  EXPECT_EQ(g.samples.front(), Eigen::Vector2d(0.0, 0.0));
  EXPECT_EQ(g.samples.back(), Eigen::Vector2d(1.0, 1.0));
  EXPECT_NEAR(g.samples[1].x(), 1.0 / 15.0, 1e-15);
  const FoldGrid one = make_fold_grid(1);
  EXPECT_EQ(one.samples[0], Eigen::Vector2d(0.5, 0.5));
  const FoldGrid five = make_fold_grid(5);
  EXPECT_EQ(five.size(), 5u);
  EXPECT_EQ(five.samples[3], Eigen::Vector2d(0.0, 0.5));
  EXPECT_THROW(make_fold_grid(0), InvalidArgument);
}

// Loss = <G, output>; checks reverse mode against central differences.
TEST(NetworkDecoder, BackwardMatchesFiniteDifferences) {
  ModelConfig config = ModelConfig::tiny();
  Rng rng(12);
  ModelWeights w = init_weights(config, rng);
  for (int j = 0; j < 4; ++j) {
    for (float& v : w.decoder_bias(j).data) v = 0.1f;
  }
  const FoldGrid grid = make_fold_grid(config.grid_size);
  const int dim = static_cast<int>(config.encoder.descriptor_size());
  Eigen::VectorXd d = Eigen::VectorXd::Random(dim);
  const Eigen::MatrixXd g = Eigen::MatrixXd::Random(3, config.grid_size);
  DecoderParams p = DecoderParams::from(w);
  DecoderTrace trace;
  decoder_forward_matrix(d, grid, p, &trace);
  Gradients grads = Gradients::zeros_like(w);
  const int first = 2 * static_cast<int>(config.encoder.layer_bandwidths.size());
  const Eigen::VectorXd gd = decoder_backward(trace, p, g, first, grads);
  auto loss = [&](const DecoderParams& q, const Eigen::VectorXd& x) {
    return (decoder_forward_matrix(x, grid, q).array() * g.array()).sum();
  };
  const double h = 1e-6;
  for (int k = 0; k < 5; ++k) {
    Eigen::VectorXd dp = d, dm = d;
    dp(k * 7) += h;
    dm(k * 7) -= h;
    EXPECT_NEAR((loss(p, dp) - loss(p, dm)) / (2 * h), gd(k * 7), 1e-6);
  }
  for (int j = 0; j < 4; ++j) {
    for (int k = 0; k < 3; ++k) {
      const int r = k % static_cast<int>(p.weights[j].rows());
      const int c = (5 * k + 1) % static_cast<int>(p.weights[j].cols());
      DecoderParams pp = p, pm = p;
      pp.weights[j](r, c) += h;
      pm.weights[j](r, c) -= h;
      EXPECT_NEAR((loss(pp, d) - loss(pm, d)) / (2 * h),
                  grads.tensors[first + 2 * j][r * p.weights[j].cols() + c], 1e-6);
      pp = p;
      pm = p;
      pp.biases[j](r) += h;
      pm.biases[j](r) -= h;
      EXPECT_NEAR((loss(pp, d) - loss(pm, d)) / (2 * h), grads.tensors[first + 2 * j + 1][r],
                  1e-6);
    }
  }
}

TEST(NetworkEncoder, BackwardMatchesFiniteDifferences) {
  const ModelConfig config = SmallConfig();
  Rng rng(21);
  ModelWeights w = init_weights(config, rng);
  for (int li = 0; li < 3; ++li) {
    for (float& v : w.encoder_bias(li).data) v = 0.05f;
  }
  const std::vector<SphericalSignal> inputs = {RandomSignal(4, 2, rng), RandomSignal(4, 2, rng)};
  const std::size_t dsize = config.encoder.descriptor_size();
  std::vector<std::vector<double>> gdesc(2, std::vector<double>(dsize));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : gdesc) {
    for (double& x : v) x = normal(rng);
  }
  // Evaluate in double precision by perturbing a copy whose floats hold the
  // perturbed value. Steps stay above float resolution but small enough that
  // few ReLU units change sign; a bias moves every grid sample at once, and
  // at 1e-3 enough of them cross zero to bend the difference quotient.
  auto loss = [&](const ModelWeights& m) {
    const auto out = encoder_forward_batch(inputs, m, compute_filter_spectra(m));
    double s = 0.0;
    for (int b = 0; b < 2; ++b) {
      for (std::size_t q = 0; q < dsize; ++q) s += out[b].values[q] * gdesc[b][q];
    }
    return s;
  };
  const FilterSpectra spectra = compute_filter_spectra(w);
  EncoderTrace trace;
  encoder_forward_batch(inputs, w, spectra, &trace);
  Gradients grads = Gradients::zeros_like(w);
  SpectraGradient sg = SpectraGradient::zeros_like(spectra);
  encoder_backward(trace, w, spectra, gdesc, grads, sg);
  accumulate_filter_gradients(w, sg, grads);

  int checked = 0;
  for (int t = 0; t < 6; ++t) {
    const std::size_t n = w.tensors[t].data.size();
    for (int k = 0; k < 6; ++k) {
      const std::size_t idx = (static_cast<std::size_t>(k) * 2654435761u) % n;
      const float orig = w.tensors[t].data[idx];
      const float h = 1e-4f * std::max(1.0f, std::abs(orig));
      ModelWeights wp = w, wm = w;
      wp.tensors[t].data[idx] = orig + h;
      wm.tensors[t].data[idx] = orig - h;
      const double step = static_cast<double>(wp.tensors[t].data[idx]) - wm.tensors[t].data[idx];
      const double fd = (loss(wp) - loss(wm)) / step;
      const double an = grads.tensors[t][idx];
      EXPECT_NEAR(fd, an, 2e-3 * std::max(1.0, std::abs(an))) << w.tensors[t].name << "[" << idx << "]";
      ++checked;
    }
  }
  EXPECT_EQ(checked, 36);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(31);
    weights_ = init_weights(SmallConfig(), rng);
    path_ = TempPath("ckpt.bin");
  }
  void TearDown() override { std::remove(path_.c_str()); }

  std::string ReadAll() const {
    std::ifstream in(path_, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }
  void WriteAll(const std::string& s) const {
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    out << s;
  }

  ModelWeights weights_;
  std::string path_;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  save_checkpoint(weights_, path_);
  const Checkpoint ck = load_checkpoint_full(path_);
  EXPECT_FALSE(ck.optimizer.has_value());
  ASSERT_EQ(ck.weights.tensors.size(), weights_.tensors.size());
  for (std::size_t i = 0; i < weights_.tensors.size(); ++i) {
    EXPECT_EQ(ck.weights.tensors[i].name, weights_.tensors[i].name);
    EXPECT_EQ(ck.weights.tensors[i].shape, weights_.tensors[i].shape);
    EXPECT_EQ(ck.weights.tensors[i].data, weights_.tensors[i].data);
  }
  EXPECT_EQ(ck.weights.config.encoder.layer_bandwidths, weights_.config.encoder.layer_bandwidths);
}

TEST_F(CheckpointTest, OptimizerStateRoundTrips) {
  OptimizerState opt;
  opt.step = 17;
  for (const Tensor& t : weights_.tensors) {
    opt.m.emplace_back(t.numel(), 0.5);
    opt.v.emplace_back(t.numel(), 0.25);
  }
  save_checkpoint(weights_, path_, &opt);
  const Checkpoint ck = load_checkpoint_full(path_);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 17);
  EXPECT_EQ(ck.optimizer->m, opt.m);
  EXPECT_EQ(ck.optimizer->v, opt.v);
}

TEST_F(CheckpointTest, PayloadIsLittleEndianFloat32) {
  weights_.tensors[0].data[0] = 1.0f;
  save_checkpoint(weights_, path_);
  const std::string bytes = ReadAll();
  const std::size_t start = bytes.find('\n') + 1;
  // 1.0f = 0x3f800000
  EXPECT_EQ(static_cast<unsigned char>(bytes[start + 0]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[start + 2]), 0x80);
  EXPECT_EQ(static_cast<unsigned char>(bytes[start + 3]), 0x3f);
  EXPECT_EQ(bytes.size() - start, 4 * weights_.parameter_count());
}

TEST_F(CheckpointTest, CorruptManifestIsReported) {
  save_checkpoint(weights_, path_);
  std::string bytes = ReadAll();
  bytes[0] = '#';
  WriteAll(bytes);
  EXPECT_THROW(load_checkpoint(path_), CorruptManifestError);
  WriteAll("no newline at all");
  EXPECT_THROW(load_checkpoint(path_), CorruptManifestError);
}

TEST_F(CheckpointTest, ShapeMismatchIsReported) {
  save_checkpoint(weights_, path_);
  std::string bytes = ReadAll();
  const std::size_t pos = bytes.find("[3,2,8,8]");
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, 9, "[3,2,8,9]");
  WriteAll(bytes);
  EXPECT_THROW(load_checkpoint(path_), ShapeMismatchError);
}

TEST_F(CheckpointTest, TruncatedPayloadIsReported) {
  save_checkpoint(weights_, path_);
  const std::string bytes = ReadAll();
  WriteAll(bytes.substr(0, bytes.size() - 10));
  EXPECT_THROW(load_checkpoint(path_), TruncatedPayloadError);
}

TEST_F(CheckpointTest, ErrorsAreDistinct) {
  save_checkpoint(weights_, path_);
  const std::string good = ReadAll();
  WriteAll(good.substr(0, good.size() - 4));
  try {
    load_checkpoint(path_);
    FAIL() << "expected an exception";
  } catch (const ShapeMismatchError&) {
    FAIL() << "wrong error kind";
  } catch (const CorruptManifestError&) {
    FAIL() << "wrong error kind";
  } catch (const TruncatedPayloadError&) {
  }
}

}  // namespace
}  // namespace equidesc
