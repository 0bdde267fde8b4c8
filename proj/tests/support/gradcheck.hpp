#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "equidesc/train.hpp"

namespace equidesc::testing {

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

/// Random points inside the support ball of `config`.
inline Patch RandomBallPatch(const ModelConfig& config, int count, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Patch p;
  while (static_cast<int>(p.points.size()) < count) {
    const Vec3 q(u(rng), u(rng), u(rng));
    if (q.norm() <= 1.0) p.points.push_back(q * config.support_radius);
  }
  return p;
}

/// Reverse-mode gradient of the Chamfer training loss against central
/// differences on `count` parameters of the tiny configuration. The tensor is
/// drawn uniformly, then the entry, so every tensor kind is exercised. The
/// difference quotient uses the float step actually realized.
inline std::vector<GradCheckEntry> RunGradientCheck(int count, std::uint64_t seed,
                                                    double h = 1e-4) {
  const ModelConfig config = ModelConfig::tiny();
  Rng rng(seed);
  ModelWeights w = init_weights(config, rng);
  std::normal_distribution<double> small(0.0, 0.05);
  for (std::size_t t = 1; t < w.tensors.size(); t += 2) {
    for (float& v : w.tensors[t].data) v = static_cast<float>(small(rng));
  }
  const Patch patch = RandomBallPatch(config, 20, rng);
  Rng sample_rng(seed + 1);
  const std::vector<TrainingSample> batch = {
      make_training_sample(patch, config, 1024, false, sample_rng)};

  GradientTape tape(w);
  tape.forward(batch);
  const Gradients grads = tape.backward();

  auto loss_at = [&](const ModelWeights& m) {
    GradientTape t(m);
    return t.forward(batch);
  };
  std::vector<GradCheckEntry> out;
  std::uniform_int_distribution<std::size_t> pick_tensor(0, w.tensors.size() - 1);
  for (int c = 0; c < count; ++c) {
    const std::size_t t = pick_tensor(rng);
    std::uniform_int_distribution<std::size_t> pick(0, w.tensors[t].data.size() - 1);
    const std::size_t i = pick(rng);
    ModelWeights plus = w, minus = w;
    const float x = w.tensors[t].data[i];
    plus.tensors[t].data[i] = static_cast<float>(x + h);
    minus.tensors[t].data[i] = static_cast<float>(x - h);
    const double step =
        static_cast<double>(plus.tensors[t].data[i]) - static_cast<double>(minus.tensors[t].data[i]);
    GradCheckEntry e;
    e.tensor = w.tensors[t].name;
    e.index = i;
    e.analytic = grads.tensors[t][i];
    e.numeric = (loss_at(plus) - loss_at(minus)) / step;
    // Entries with both values below 1e-8 count as agreeing zeros.
    const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-8});
    e.rel_error = std::abs(e.analytic - e.numeric) / denom;
    out.push_back(e);
  }
  return out;
}

}  // namespace equidesc::testing
