#include "equidesc/orient.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "equidesc/signal.hpp"

namespace equidesc {
namespace {

// Pure z rotation by a whole number of alpha cells, as that number.
std::optional<int> GridAlignedShift(const RotationZYZ& r, int n) {
  const Mat3 m = r.to_matrix();
  if (std::abs(m(2, 2) - 1.0) > 1e-12) return std::nullopt;
  const double theta = std::atan2(m(1, 0), m(0, 0));
  const double cells = theta * n / (2.0 * M_PI);
  const double rounded = std::round(cells);
  if (std::abs(cells - rounded) > 1e-9) return std::nullopt;
  return static_cast<int>(rounded);
}

std::size_t SupportCount(const PointCloud& cloud, const Vec3& center, double radius) {
  const double r2 = radius * radius;
  std::size_t n = 0;
  for (const Vec3& p : cloud.points) n += (p - center).squaredNorm() <= r2;
  return n;
}

}  // namespace

void OrientConfig::validate(std::size_t total_bins) const {
  if (top_k < 1 || static_cast<std::size_t>(top_k) > total_bins) {
    throw InvalidArgument("orient: top_k must lie in [1, number of bins]");
  }
}

RotationZYZ bin_rotation(int bandwidth, int j, int k, int l) {
  // Same expressions as make_so3_grid so the angles match bit for bit.
  const int n = 2 * bandwidth;
  return {2.0 * M_PI * j / n, M_PI * (2 * k + 1) / (4.0 * bandwidth), 2.0 * M_PI * l / n};
}

Mat3 chordal_mean(const std::vector<Mat3>& rotations) {
  if (rotations.empty()) throw InvalidArgument("chordal_mean: no rotations");
  Mat3 sum = Mat3::Zero();
  for (const Mat3& r : rotations) sum += r;
  Eigen::JacobiSVD<Mat3> svd(sum, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

RotationZYZ self_orient(const Descriptor& d, const OrientConfig& cfg) {
  const So3Signal h = d.as_signal();
  if (h.channels != 1) throw InvalidArgument("self_orient: expects a single-channel map");
  const std::size_t total = h.values.size();
  cfg.validate(total);
  for (double v : h.values) {
    if (!std::isfinite(v)) throw InvalidArgument("self_orient: non-finite descriptor");
  }
  const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
  if (*lo == *hi) throw InvalidArgument("degenerate feature map");

  const int n = h.size();
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return h.values[a] > h.values[b]; });
  order.resize(cfg.top_k);
  std::vector<char> is_top(total, 0);
  for (std::size_t i : order) is_top[i] = 1;

  auto neighborhood = [&](std::size_t flat) {
    const int j = static_cast<int>(flat / (n * n));
    const int k = static_cast<int>((flat / n) % n);
    const int l = static_cast<int>(flat % n);
    std::vector<std::size_t> out;
    for (int dj = -1; dj <= 1; ++dj) {
      for (int dk = -1; dk <= 1; ++dk) {
        const int kk = k + dk;
        if (kk < 0 || kk >= n) continue;
        for (int dl = -1; dl <= 1; ++dl) {
          const int jj = ((j + dj) % n + n) % n;
          const int ll = ((l + dl) % n + n) % n;
          out.push_back(h.index(0, jj, kk, ll));
        }
      }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  };

  std::size_t best = 0;
  int best_count = -1;
  double best_value = 0.0;
  double best_sum = 0.0;
  std::vector<std::size_t> best_members;
  for (std::size_t center : order) {
    std::vector<std::size_t> members;
    double value = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (std::size_t q : neighborhood(center)) {
      if (!is_top[q]) continue;
      members.push_back(q);
      value = std::max(value, h.values[q]);
      sum += h.values[q];
    }
    const int count = static_cast<int>(members.size());
    // Neighborhoods sharing count and maximum usually differ in their sum,
    // which unlike the index is preserved by grid rotations.
    bool better = count > best_count;
    if (count == best_count) {
      better = value > best_value ||
               (value == best_value && (sum > best_sum || (sum == best_sum && center < best)));
    }
    if (better) {
      best = center;
      best_count = count;
      best_value = value;
      best_sum = sum;
      best_members = std::move(members);
    }
  }

  auto rotation_of = [&](std::size_t flat) {
    return bin_rotation(h.bandwidth, static_cast<int>(flat / (n * n)),
                        static_cast<int>((flat / n) % n), static_cast<int>(flat % n));
  };
  if (best_members.size() == 1) return rotation_of(best_members[0]);
  std::vector<Mat3> mats;
  for (std::size_t q : best_members) mats.push_back(rotation_of(q).to_matrix());
  return matrix_to_zyz(chordal_mean(mats));
}

Descriptor canonicalize(const Descriptor& d, const RotationZYZ& r) {
  const So3Signal h = d.as_signal();
  const RotationZYZ inv = inverse(r);
  const bool aligned = GridAlignedShift(inv, h.size()).has_value();
  const So3Signal out = rotate_so3_signal(
      h, inv, aligned ? RotationMethod::kInterpolate : RotationMethod::kSpectral);
  return Descriptor::from_signal(out);
}

LocalFrame compute_lrf(const PointCloud& cloud, const Vec3& center, double radius) {
  if (!(radius > 0.0)) throw InvalidArgument("compute_lrf: radius must be positive");
  const double r2 = radius * radius;
  const double inner2 = 0.09 * r2;
  std::vector<Vec3> support;
  std::vector<Vec3> inner;
  for (const Vec3& p : cloud.points) {
    const Vec3 d = p - center;
    const double n2 = d.squaredNorm();
    if (n2 <= r2) support.push_back(d);
    if (n2 <= inner2) inner.push_back(d);
  }
  if (support.size() < 6) throw InvalidArgument("compute_lrf: too few points");
  if (inner.size() < 3) throw InvalidArgument("compute_lrf: too few points for the normal");

  Vec3 mean = Vec3::Zero();
  for (const Vec3& p : inner) mean += p;
  mean /= static_cast<double>(inner.size());
  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : inner) cov += (p - mean) * (p - mean).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  const Vec3 ev = eig.eigenvalues();
  if (!(ev(1) > 0.0) || ev(0) / ev(1) > 0.99) {
    throw InvalidArgument("compute_lrf: ambiguous normal");
  }
  Vec3 z = eig.eigenvectors().col(0).normalized();
  Vec3 reference;
  if (cloud.sensor_origin) {
    reference = *cloud.sensor_origin - center;
  } else {
    reference = Vec3::Zero();
    for (const Vec3& p : support) reference += p;
    reference /= static_cast<double>(support.size());
  }
  if (z.dot(reference) < 0.0) z = -z;

  const double annulus2 = 0.85 * 0.85 * r2;
  int pick = -1;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < support.size(); ++i) {
    if (support[i].squaredNorm() < annulus2) continue;
    const double h = support[i].dot(z);
    if (h > best) {
      best = h;
      pick = static_cast<int>(i);
    }
  }
  if (pick < 0) {
    for (std::size_t i = 0; i < support.size(); ++i) {
      const double h = support[i].dot(z);
      if (h > best) {
        best = h;
        pick = static_cast<int>(i);
      }
    }
    if (best < 1e-9 * radius) throw InvalidArgument("compute_lrf: ambiguous tangent direction");
  }
  const Vec3 t = support[pick] - support[pick].dot(z) * z;
  if (t.norm() < 1e-12 * radius) {
    throw InvalidArgument("compute_lrf: ambiguous tangent direction");
  }
  const Vec3 x = t.normalized();
  const Vec3 y = z.cross(x);
  LocalFrame f;
  f.rotation.row(0) = x.transpose();
  f.rotation.row(1) = y.transpose();
  f.rotation.row(2) = z.transpose();
  return f;
}

RotationZYZ frame_rotation(const LocalFrame& frame) {
  return matrix_to_zyz(frame.rotation.transpose());
}

std::string to_string(OrientMode mode) {
  switch (mode) {
    case OrientMode::kNone:
      return "raw";
    case OrientMode::kSelf:
      return "self";
    case OrientMode::kLrf:
      return "lrf";
  }
  return "raw";
}

OrientMode parse_orient_mode(const std::string& name) {
  if (name == "raw" || name == "none") return OrientMode::kNone;
  if (name == "self") return OrientMode::kSelf;
  if (name == "lrf") return OrientMode::kLrf;
  throw InvalidArgument("unknown orientation mode '" + name + "' (expected raw, self or lrf)");
}

Descriptor invariant_descriptor(const PointCloud& cloud, const Vec3& center,
                                const ModelWeights& w, OrientMode mode,
                                const OrientConfig& cfg) {
  if (SupportCount(cloud, center, w.config.support_radius) < kMinSupportPoints) {
    throw InvalidArgument("insufficient support");
  }
  std::optional<LocalFrame> frame;
  if (mode == OrientMode::kLrf) frame = compute_lrf(cloud, center, w.config.support_radius);
  const SphericalSignal f = build_spherical_signal(cloud, center, w.config.support());
  const Descriptor raw = encoder_forward(f, w).descriptor;
  switch (mode) {
    case OrientMode::kNone:
      return raw;
    case OrientMode::kSelf:
      return canonicalize(raw, self_orient(raw, cfg));
    case OrientMode::kLrf:
      return canonicalize(raw, frame_rotation(*frame));
  }
  return raw;
}

std::vector<std::optional<Descriptor>> invariant_descriptors(
    const PointCloud& cloud, const std::vector<Vec3>& centers, const ModelWeights& w,
    OrientMode mode, const OrientConfig& cfg, int threads, int chunk) {
  if (threads < 1) throw InvalidArgument("invariant_descriptors: threads must be >= 1");
  if (chunk < 1) throw InvalidArgument("invariant_descriptors: chunk must be >= 1");
  const FilterSpectra spectra = compute_filter_spectra(w);
  const SupportSpec spec = w.config.support();
  std::vector<std::optional<Descriptor>> out(centers.size());
  const std::size_t chunks = (centers.size() + chunk - 1) / chunk;

  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = std::min(centers.size(), begin + chunk);
    std::vector<std::size_t> ids;
    std::vector<std::optional<LocalFrame>> frames;
    std::vector<SphericalSignal> signals;
    for (std::size_t i = begin; i < end; ++i) {
      if (SupportCount(cloud, centers[i], w.config.support_radius) < kMinSupportPoints) continue;
      std::optional<LocalFrame> frame;
      if (mode == OrientMode::kLrf) {
        try {
          frame = compute_lrf(cloud, centers[i], w.config.support_radius);
        } catch (const InvalidArgument&) {
          continue;
        }
      }
      ids.push_back(i);
      frames.push_back(frame);
      signals.push_back(build_spherical_signal(cloud, centers[i], spec));
    }
    if (ids.empty()) return;
    const std::vector<Descriptor> raw = encoder_forward_batch(signals, w, spectra);
    for (std::size_t s = 0; s < ids.size(); ++s) {
      try {
        switch (mode) {
          case OrientMode::kNone:
            out[ids[s]] = raw[s];
            break;
          case OrientMode::kSelf:
            out[ids[s]] = canonicalize(raw[s], self_orient(raw[s], cfg));
            break;
          case OrientMode::kLrf:
            out[ids[s]] = canonicalize(raw[s], frame_rotation(*frames[s]));
            break;
        }
      } catch (const InvalidArgument&) {
        out[ids[s]].reset();
      }
    }
  };

  if (threads == 1 || chunks <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
    return out;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t c = t; c < chunks; c += threads) run_chunk(c);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (std::thread& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

double descriptor_distance(const Descriptor& a, const Descriptor& b) {
  if (a.values.size() != b.values.size()) {
    throw InvalidArgument("descriptor_distance: length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace equidesc
