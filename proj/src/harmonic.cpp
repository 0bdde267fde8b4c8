#include "equidesc/harmonic.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

#include <fftw3.h>

namespace equidesc {
namespace {

constexpr double kPi = std::numbers::pi;

void RequireBandwidth(int bandwidth, const char* what) {
  if (bandwidth < 1) {
    throw InvalidArgument(std::string(what) + ": bandwidth must be >= 1");
  }
}

// d^j_{j,n}(beta) = (-1)^{j-n} sqrt(C(2j, j+n)) cos(beta/2)^{j+n} sin(beta/2)^{j-n}
double TopRowSeed(int j, int n, double beta) {
  const double log_binom = std::lgamma(2.0 * j + 1.0) - std::lgamma(j + n + 1.0) -
                           std::lgamma(j - n + 1.0);
  const double c = std::cos(0.5 * beta);
  const double s = std::sin(0.5 * beta);
  const double sign = ((j - n) % 2 == 0) ? 1.0 : -1.0;
  return sign * std::exp(0.5 * log_binom) * std::pow(c, j + n) * std::pow(s, j - n);
}

// d^{l0}_{mn} with l0 = max(|m|, |n|).
double Seed(int m, int n, double beta) {
  if (std::abs(n) > std::abs(m)) {
    // d_{mn} = (-1)^{m-n} d_{nm}
    const double sign = ((m - n) % 2 == 0) ? 1.0 : -1.0;
    return sign * Seed(n, m, beta);
  }
  const int l0 = std::abs(m);
  if (m >= 0) return TopRowSeed(l0, n, beta);
  // d_{-l0,n} = (-1)^{l0+n} d_{l0,-n}
  const double sign = ((l0 + n) % 2 == 0) ? 1.0 : -1.0;
  return sign * TopRowSeed(l0, -n, beta);
}

Complex Phase(double angle) { return {std::cos(angle), std::sin(angle)}; }

int Mod(int a, int n) {
  const int r = a % n;
  return r < 0 ? r + n : r;
}

void CheckSo3(const So3Signal& h, const char* what) {
  RequireBandwidth(h.bandwidth, what);
  if (h.channels < 1 || h.values.size() != h.grid_size() * h.channels) {
    throw InvalidArgument(std::string(what) + ": malformed SO(3) signal");
  }
}

void CheckS2(const SphericalSignal& f, const char* what) {
  RequireBandwidth(f.bandwidth, what);
  if (f.channels < 1 || f.values.size() != f.grid_size() * f.channels) {
    throw InvalidArgument(std::string(what) + ": malformed spherical signal");
  }
}

int ResolveOutBandwidth(int in_bandwidth, int out_bandwidth, const char* what) {
  if (out_bandwidth == 0) return in_bandwidth;
  if (out_bandwidth < 0 || out_bandwidth > in_bandwidth) {
    throw InvalidArgument(std::string(what) + ": output bandwidth " +
                          std::to_string(out_bandwidth) + " outside [1, " +
                          std::to_string(in_bandwidth) + "]");
  }
  return out_bandwidth;
}

std::mutex& PlannerMutex() {
  static std::mutex mutex;
  return mutex;
}

// conj(D^l(r)) applied on the left of every block: c_{pn} = sum_m conj(D_{pm}) a_{mn}.
void RotateSo3Coefficients(const Complex* in, Complex* out, int bandwidth,
                           const RotationZYZ& r) {
  const auto d = wigner_d_all(bandwidth, r.beta);
  for (int l = 0; l < bandwidth; ++l) {
    const int w = 2 * l + 1;
    const std::size_t off = SpectralSo3::block_offset(l);
    for (int p = -l; p <= l; ++p) {
      const Complex left = Phase(p * r.alpha);
      for (int n = -l; n <= l; ++n) {
        Complex acc = 0.0;
        for (int m = -l; m <= l; ++m) {
          acc += d[l](p + l, m + l) * Phase(m * r.gamma) * in[off + (m + l) * w + (n + l)];
        }
        out[off + (p + l) * w + (n + l)] = left * acc;
      }
    }
  }
}

void RotateS2Coefficients(const Complex* in, Complex* out, int bandwidth,
                          const RotationZYZ& r) {
  const auto d = wigner_d_all(bandwidth, r.beta);
  for (int l = 0; l < bandwidth; ++l) {
    const std::size_t off = SpectralS2::block_offset(l);
    for (int p = -l; p <= l; ++p) {
      Complex acc = 0.0;
      for (int m = -l; m <= l; ++m) {
        acc += d[l](p + l, m + l) * Phase(m * r.gamma) * in[off + m + l];
      }
      out[off + p + l] = Phase(p * r.alpha) * acc;
    }
  }
}

struct InterpAxis {
  int i0, i1;
  double t;
};

// Fractional grid coordinates within this distance of a sample are treated as
// on the sample, so grid-aligned rotations reduce to exact index permutations.
constexpr double kSnap = 1e-9;

double Snap(double x) {
  const double r = std::round(x);
  return std::abs(x - r) < kSnap ? r : x;
}

InterpAxis PeriodicAxis(double angle, int n) {
  const double a = Snap(wrap_angle(angle) / (2.0 * kPi / n));
  const int i0 = static_cast<int>(std::floor(a));
  return {Mod(i0, n), Mod(i0 + 1, n), a - std::floor(a)};
}

InterpAxis BetaAxis(double beta, int n) {
  const double b =
      std::clamp(Snap(beta / (kPi / n) - 0.5), 0.0, static_cast<double>(n - 1));
  const int i0 = std::min(static_cast<int>(std::floor(b)), n - 1);
  return {i0, std::min(i0 + 1, n - 1), b - i0};
}

}  // namespace

So3Signal::So3Signal(int bandwidth, int channels)
    : bandwidth(bandwidth),
      channels(channels),
      values(static_cast<std::size_t>(channels) * 8 * bandwidth * bandwidth *
                 bandwidth,
             0.0) {}

SpectralSo3::SpectralSo3(int bandwidth, int channels)
    : bandwidth(bandwidth),
      channels(channels),
      coeffs(static_cast<std::size_t>(channels) * channel_size(bandwidth)) {}

SpectralS2::SpectralS2(int bandwidth, int channels)
    : bandwidth(bandwidth),
      channels(channels),
      coeffs(static_cast<std::size_t>(channels) * channel_size(bandwidth)) {}

std::vector<Eigen::MatrixXd> wigner_d_all(int max_degree, double beta) {
  if (max_degree < 0) throw InvalidArgument("wigner_d_all: negative degree");
  std::vector<Eigen::MatrixXd> d(max_degree);
  for (int l = 0; l < max_degree; ++l) d[l] = Eigen::MatrixXd::Zero(2 * l + 1, 2 * l + 1);
  const double cb = std::cos(beta);
  const int top = max_degree - 1;
  for (int m = -top; m <= top; ++m) {
    for (int n = -top; n <= top; ++n) {
      const int l0 = std::max(std::abs(m), std::abs(n));
      double prev = 0.0;
      double cur = Seed(m, n, beta);
      d[l0](m + l0, n + l0) = cur;
      for (int l = l0; l + 1 < max_degree; ++l) {
        const double lp = l + 1.0;
        const double denom = std::sqrt((lp * lp - m * m) * (lp * lp - n * n));
        double next;
        if (l == 0) {
          next = cb * cur;
        } else {
          const double a = lp * (2.0 * l + 1.0) / denom;
          const double b = lp * std::sqrt((1.0 * l * l - m * m) * (1.0 * l * l - n * n)) /
                           (l * denom);
          next = a * (cb - static_cast<double>(m) * n / (l * lp)) * cur - b * prev;
        }
        prev = cur;
        cur = next;
        d[l + 1](m + l + 1, n + l + 1) = cur;
      }
    }
  }
  return d;
}

Eigen::MatrixXd wigner_d(int l, double beta) {
  if (l < 0) throw InvalidArgument("wigner_d: negative degree");
  return wigner_d_all(l + 1, beta)[l];
}

Eigen::MatrixXcd wigner_D(int l, const RotationZYZ& r) {
  const Eigen::MatrixXd d = wigner_d(l, r.beta);
  Eigen::MatrixXcd out(2 * l + 1, 2 * l + 1);
  for (int m = -l; m <= l; ++m) {
    for (int n = -l; n <= l; ++n) {
      out(m + l, n + l) = Phase(-m * r.alpha) * d(m + l, n + l) * Phase(-n * r.gamma);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// SO(3) transform

So3Transform::So3Transform(int bandwidth) : bandwidth_(bandwidth), n_(2 * bandwidth) {
  RequireBandwidth(bandwidth, "So3Transform");
  const So3Grid grid = make_so3_grid(bandwidth);
  row_weights_ = grid.weights;
  const std::size_t block = SpectralSo3::channel_size(bandwidth);
  d_table_.assign(n_ * block, 0.0);
  for (int k = 0; k < n_; ++k) {
    const auto d = wigner_d_all(bandwidth, grid.betas[k]);
    double* row = d_table_.data() + k * block;
    for (int l = 0; l < bandwidth; ++l) {
      const int w = 2 * l + 1;
      double* dst = row + SpectralSo3::block_offset(l);
      for (int m = 0; m < w; ++m) {
        for (int n = 0; n < w; ++n) dst[m * w + n] = d[l](m, n);
      }
    }
  }

  const int n = n_;
  const int half = n / 2 + 1;
  const std::size_t real_size = static_cast<std::size_t>(n) * n * n;
  const std::size_t complex_size = static_cast<std::size_t>(n) * n * half;
  double* real = fftw_alloc_real(real_size);
  fftw_complex* spec = fftw_alloc_complex(complex_size);
  const int dims[2] = {n, n};
  // Transform t = beta row k; element (j, i) sits at j n^2 + k n + i.
  const int real_embed[2] = {n, n * n};
  const int spec_embed[2] = {n, half};
  {
    std::lock_guard<std::mutex> lock(PlannerMutex());
    forward_plan_ = fftw_plan_many_dft_r2c(2, dims, n, real, real_embed, 1, n, spec,
                                           spec_embed, 1, n * half,
                                           FFTW_ESTIMATE | FFTW_UNALIGNED);
    inverse_plan_ = fftw_plan_many_dft_c2r(2, dims, n, spec, spec_embed, 1, n * half,
                                           real, real_embed, 1, n,
                                           FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  fftw_free(real);
  fftw_free(spec);
  if (forward_plan_ == nullptr || inverse_plan_ == nullptr) {
    throw Error("So3Transform: FFT planning failed");
  }
}

So3Transform::~So3Transform() {
  std::lock_guard<std::mutex> lock(PlannerMutex());
  if (forward_plan_) fftw_destroy_plan(static_cast<fftw_plan>(forward_plan_));
  if (inverse_plan_) fftw_destroy_plan(static_cast<fftw_plan>(inverse_plan_));
}

const So3Transform& So3Transform::get(int bandwidth) {
  RequireBandwidth(bandwidth, "So3Transform");
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<So3Transform>> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto& slot = cache[bandwidth];
  if (!slot) slot = std::make_unique<So3Transform>(bandwidth);
  return *slot;
}

void So3Transform::analyze(const double* grid, Complex* coeffs, int max_degree,
                           bool quadrature_weights, bool degree_scale) const {
  if (max_degree < 0 || max_degree > bandwidth_) {
    throw InvalidArgument("So3Transform::analyze: degree out of range");
  }
  const int n = n_;
  const int half = n / 2 + 1;
  const int b = bandwidth_;
  const int zw = 2 * b - 1;
  std::vector<Complex> spec(static_cast<std::size_t>(n) * n * half);
  fftw_execute_dft_r2c(static_cast<fftw_plan>(forward_plan_), const_cast<double*>(grid),
                       reinterpret_cast<fftw_complex*>(spec.data()));
  std::fill(coeffs, coeffs + SpectralSo3::block_offset(max_degree), Complex(0.0));
  std::vector<Complex> z(static_cast<std::size_t>(zw) * zw);
  const std::size_t block = SpectralSo3::channel_size(b);
  for (int k = 0; k < n; ++k) {
    const Complex* y = spec.data() + static_cast<std::size_t>(k) * n * half;
    // z(m, n) = sum_{j,i} x exp(+i (m alpha_j + n gamma_i))
    for (int m = -(b - 1); m <= b - 1; ++m) {
      Complex* zr = z.data() + (m + b - 1) * zw + (b - 1);
      for (int q = 0; q <= b - 1; ++q) zr[q] = std::conj(y[Mod(m, n) * half + q]);
      for (int q = 1; q <= b - 1; ++q) zr[-q] = y[Mod(-m, n) * half + q];
    }
    const double s = quadrature_weights ? row_weights_[k] : 1.0;
    const double* dk = d_table_.data() + k * block;
    for (int l = 0; l < max_degree; ++l) {
      const int w = 2 * l + 1;
      const std::size_t off = SpectralSo3::block_offset(l);
      for (int m = -l; m <= l; ++m) {
        const Complex* zr = z.data() + (m + b - 1) * zw + (b - 1) - l;
        const double* dr = dk + off + (m + l) * w;
        Complex* cr = coeffs + off + (m + l) * w;
        for (int q = 0; q < w; ++q) cr[q] += (s * dr[q]) * zr[q];
      }
    }
  }
  if (degree_scale) {
    for (int l = 0; l < max_degree; ++l) {
      const std::size_t off = SpectralSo3::block_offset(l);
      const std::size_t end = SpectralSo3::block_offset(l + 1);
      for (std::size_t i = off; i < end; ++i) coeffs[i] *= (2.0 * l + 1.0);
    }
  }
}

void So3Transform::synthesize(const Complex* coeffs, int max_degree, double* grid,
                              bool quadrature_weights, bool degree_scale) const {
  if (max_degree < 0 || max_degree > bandwidth_) {
    throw InvalidArgument("So3Transform::synthesize: degree out of range");
  }
  const int n = n_;
  const int half = n / 2 + 1;
  const int b = bandwidth_;
  const int zw = 2 * b - 1;
  const std::size_t block = SpectralSo3::channel_size(b);
  std::vector<Complex> spec(static_cast<std::size_t>(n) * n * half, Complex(0.0));
  std::vector<Complex> z(static_cast<std::size_t>(zw) * zw);
  for (int k = 0; k < n; ++k) {
    std::fill(z.begin(), z.end(), Complex(0.0));
    const double* dk = d_table_.data() + k * block;
    for (int l = 0; l < max_degree; ++l) {
      const int w = 2 * l + 1;
      const double scale = degree_scale ? 2.0 * l + 1.0 : 1.0;
      const std::size_t off = SpectralSo3::block_offset(l);
      for (int m = -l; m <= l; ++m) {
        Complex* zr = z.data() + (m + b - 1) * zw + (b - 1) - l;
        const double* dr = dk + off + (m + l) * w;
        const Complex* cr = coeffs + off + (m + l) * w;
        for (int q = 0; q < w; ++q) zr[q] += (scale * dr[q]) * cr[q];
      }
    }
    const double s = quadrature_weights ? row_weights_[k] : 1.0;
    Complex* y = spec.data() + static_cast<std::size_t>(k) * n * half;
    // Keep the real part: symmetrize z(m, n) with conj z(-m, -n).
    for (int m = -(b - 1); m <= b - 1; ++m) {
      for (int q = 0; q <= b - 1; ++q) {
        const Complex a = z[(m + b - 1) * zw + (q + b - 1)];
        const Complex c = z[(-m + b - 1) * zw + (-q + b - 1)];
        y[Mod(m, n) * half + q] = std::conj(0.5 * s * (a + std::conj(c)));
      }
    }
  }
  fftw_execute_dft_c2r(static_cast<fftw_plan>(inverse_plan_),
                       reinterpret_cast<fftw_complex*>(spec.data()), grid);
}

// ---------------------------------------------------------------------------
// S2 transform

S2Transform::S2Transform(int bandwidth) : bandwidth_(bandwidth), n_(2 * bandwidth) {
  RequireBandwidth(bandwidth, "S2Transform");
  const DhGrid grid = make_dh_grid(bandwidth);
  row_weights_ = grid.weights;
  const std::size_t block = SpectralS2::channel_size(bandwidth);
  d_table_.assign(n_ * block, 0.0);
  for (int k = 0; k < n_; ++k) {
    const auto d = wigner_d_all(bandwidth, grid.betas[k]);
    for (int l = 0; l < bandwidth; ++l) {
      for (int m = -l; m <= l; ++m) {
        d_table_[k * block + SpectralS2::block_offset(l) + m + l] = d[l](m + l, l);
      }
    }
  }
  const int n = n_;
  const int half = n / 2 + 1;
  double* real = fftw_alloc_real(static_cast<std::size_t>(n) * n);
  fftw_complex* spec = fftw_alloc_complex(static_cast<std::size_t>(n) * half);
  const int dims[1] = {n};
  {
    std::lock_guard<std::mutex> lock(PlannerMutex());
    // Transform t = beta row k; alpha sample j sits at j n + k.
    forward_plan_ = fftw_plan_many_dft_r2c(1, dims, n, real, nullptr, n, 1, spec,
                                           nullptr, 1, half,
                                           FFTW_ESTIMATE | FFTW_UNALIGNED);
    inverse_plan_ = fftw_plan_many_dft_c2r(1, dims, n, spec, nullptr, 1, half, real,
                                           nullptr, n, 1,
                                           FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  fftw_free(real);
  fftw_free(spec);
  if (forward_plan_ == nullptr || inverse_plan_ == nullptr) {
    throw Error("S2Transform: FFT planning failed");
  }
}

S2Transform::~S2Transform() {
  std::lock_guard<std::mutex> lock(PlannerMutex());
  if (forward_plan_) fftw_destroy_plan(static_cast<fftw_plan>(forward_plan_));
  if (inverse_plan_) fftw_destroy_plan(static_cast<fftw_plan>(inverse_plan_));
}

const S2Transform& S2Transform::get(int bandwidth) {
  RequireBandwidth(bandwidth, "S2Transform");
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<S2Transform>> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto& slot = cache[bandwidth];
  if (!slot) slot = std::make_unique<S2Transform>(bandwidth);
  return *slot;
}

void S2Transform::analyze(const double* grid, Complex* coeffs, int max_degree,
                          bool quadrature_weights, bool degree_scale) const {
  if (max_degree < 0 || max_degree > bandwidth_) {
    throw InvalidArgument("S2Transform::analyze: degree out of range");
  }
  const int n = n_;
  const int half = n / 2 + 1;
  const int b = bandwidth_;
  std::vector<Complex> spec(static_cast<std::size_t>(n) * half);
  fftw_execute_dft_r2c(static_cast<fftw_plan>(forward_plan_), const_cast<double*>(grid),
                       reinterpret_cast<fftw_complex*>(spec.data()));
  std::fill(coeffs, coeffs + SpectralS2::block_offset(max_degree), Complex(0.0));
  const std::size_t block = SpectralS2::channel_size(b);
  std::vector<Complex> z(2 * b - 1);
  for (int k = 0; k < n; ++k) {
    const Complex* y = spec.data() + static_cast<std::size_t>(k) * half;
    for (int m = 0; m <= b - 1; ++m) z[m + b - 1] = std::conj(y[m]);
    for (int m = 1; m <= b - 1; ++m) z[-m + b - 1] = y[m];
    const double s = quadrature_weights ? row_weights_[k] : 1.0;
    const double* dk = d_table_.data() + k * block;
    for (int l = 0; l < max_degree; ++l) {
      const std::size_t off = SpectralS2::block_offset(l);
      for (int m = -l; m <= l; ++m) {
        coeffs[off + m + l] += (s * dk[off + m + l]) * z[m + b - 1];
      }
    }
  }
  if (degree_scale) {
    for (int l = 0; l < max_degree; ++l) {
      for (std::size_t i = SpectralS2::block_offset(l); i < SpectralS2::block_offset(l + 1);
           ++i) {
        coeffs[i] *= (2.0 * l + 1.0);
      }
    }
  }
}

void S2Transform::synthesize(const Complex* coeffs, int max_degree, double* grid,
                             bool quadrature_weights, bool degree_scale) const {
  if (max_degree < 0 || max_degree > bandwidth_) {
    throw InvalidArgument("S2Transform::synthesize: degree out of range");
  }
  const int n = n_;
  const int half = n / 2 + 1;
  const int b = bandwidth_;
  const std::size_t block = SpectralS2::channel_size(b);
  std::vector<Complex> spec(static_cast<std::size_t>(n) * half, Complex(0.0));
  std::vector<Complex> z(2 * b - 1);
  for (int k = 0; k < n; ++k) {
    std::fill(z.begin(), z.end(), Complex(0.0));
    const double* dk = d_table_.data() + k * block;
    for (int l = 0; l < max_degree; ++l) {
      const double scale = degree_scale ? 2.0 * l + 1.0 : 1.0;
      const std::size_t off = SpectralS2::block_offset(l);
      for (int m = -l; m <= l; ++m) {
        z[m + b - 1] += (scale * dk[off + m + l]) * coeffs[off + m + l];
      }
    }
    const double s = quadrature_weights ? row_weights_[k] : 1.0;
    Complex* y = spec.data() + static_cast<std::size_t>(k) * half;
    for (int m = 0; m <= b - 1; ++m) {
      y[m] = std::conj(0.5 * s * (z[m + b - 1] + std::conj(z[-m + b - 1])));
    }
  }
  fftw_execute_dft_c2r(static_cast<fftw_plan>(inverse_plan_),
                       reinterpret_cast<fftw_complex*>(spec.data()), grid);
}

// ---------------------------------------------------------------------------

SpectralS2 s2_fft(const SphericalSignal& f) {
  CheckS2(f, "s2_fft");
  const S2Transform& t = S2Transform::get(f.bandwidth);
  SpectralS2 out(f.bandwidth, f.channels);
  for (int c = 0; c < f.channels; ++c) {
    t.analyze(f.values.data() + c * f.grid_size(),
              out.coeffs.data() + c * SpectralS2::channel_size(f.bandwidth), f.bandwidth,
              true, false);
  }
  return out;
}

SphericalSignal s2_ifft(const SpectralS2& s) {
  RequireBandwidth(s.bandwidth, "s2_ifft");
  if (s.channels < 1 ||
      s.coeffs.size() != SpectralS2::channel_size(s.bandwidth) * s.channels) {
    throw InvalidArgument("s2_ifft: malformed coefficients");
  }
  const S2Transform& t = S2Transform::get(s.bandwidth);
  SphericalSignal out(s.bandwidth, s.channels);
  for (int c = 0; c < s.channels; ++c) {
    t.synthesize(s.coeffs.data() + c * SpectralS2::channel_size(s.bandwidth), s.bandwidth,
                 out.values.data() + c * out.grid_size(), false, true);
  }
  return out;
}

SpectralSo3 so3_fft(const So3Signal& h) {
  CheckSo3(h, "so3_fft");
  const So3Transform& t = So3Transform::get(h.bandwidth);
  SpectralSo3 out(h.bandwidth, h.channels);
  for (int c = 0; c < h.channels; ++c) {
    t.analyze(h.channel(c), out.channel(c), h.bandwidth, true, false);
  }
  return out;
}

So3Signal so3_ifft(const SpectralSo3& s) {
  RequireBandwidth(s.bandwidth, "so3_ifft");
  if (s.channels < 1 ||
      s.coeffs.size() != SpectralSo3::channel_size(s.bandwidth) * s.channels) {
    throw InvalidArgument("so3_ifft: malformed coefficients");
  }
  const So3Transform& t = So3Transform::get(s.bandwidth);
  So3Signal out(s.bandwidth, s.channels);
  for (int c = 0; c < s.channels; ++c) {
    t.synthesize(s.channel(c), s.bandwidth, out.channel(c), false, true);
  }
  return out;
}

SphericalSignal bandlimit(const SphericalSignal& f, int bandwidth) {
  CheckS2(f, "bandlimit");
  if (bandwidth < 1 || bandwidth > f.bandwidth) {
    throw InvalidArgument("bandlimit: target bandwidth out of range");
  }
  const SpectralS2 full = s2_fft(f);
  SpectralS2 cut(bandwidth, f.channels);
  for (int c = 0; c < f.channels; ++c) {
    std::copy_n(full.coeffs.data() + c * SpectralS2::channel_size(f.bandwidth),
                SpectralS2::channel_size(bandwidth),
                cut.coeffs.data() + c * SpectralS2::channel_size(bandwidth));
  }
  return s2_ifft(cut);
}

So3Signal bandlimit(const So3Signal& h, int bandwidth) {
  CheckSo3(h, "bandlimit");
  if (bandwidth < 1 || bandwidth > h.bandwidth) {
    throw InvalidArgument("bandlimit: target bandwidth out of range");
  }
  const SpectralSo3 full = so3_fft(h);
  SpectralSo3 cut(bandwidth, h.channels);
  for (int c = 0; c < h.channels; ++c) {
    std::copy_n(full.channel(c), SpectralSo3::channel_size(bandwidth), cut.channel(c));
  }
  return so3_ifft(cut);
}

double weighted_energy(const So3Signal& h) {
  CheckSo3(h, "weighted_energy");
  const So3Grid grid = make_so3_grid(h.bandwidth);
  const int n = h.size();
  double total = 0.0;
  for (int c = 0; c < h.channels; ++c) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        for (int l = 0; l < n; ++l) {
          const double v = h.at(c, j, k, l);
          total += grid.weights[k] * v * v;
        }
      }
    }
  }
  return total;
}

double weighted_energy(const SphericalSignal& f) {
  CheckS2(f, "weighted_energy");
  const DhGrid grid = make_dh_grid(f.bandwidth);
  const int n = f.size();
  double total = 0.0;
  for (int c = 0; c < f.channels; ++c) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) total += grid.weights[k] * f.at(c, j, k) * f.at(c, j, k);
    }
  }
  return total;
}

double spectral_energy(const SpectralSo3& s) {
  double total = 0.0;
  for (int c = 0; c < s.channels; ++c) {
    for (int l = 0; l < s.bandwidth; ++l) {
      for (int m = -l; m <= l; ++m) {
        for (int n = -l; n <= l; ++n) total += (2 * l + 1) * std::norm(s.at(c, l, m, n));
      }
    }
  }
  return total;
}

double spectral_energy(const SpectralS2& s) {
  double total = 0.0;
  for (int c = 0; c < s.channels; ++c) {
    for (int l = 0; l < s.bandwidth; ++l) {
      for (int m = -l; m <= l; ++m) total += (2 * l + 1) * std::norm(s.at(c, l, m));
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Rotation

SphericalSignal rotate_s2_signal(const SphericalSignal& f, const RotationZYZ& r,
                                 RotationMethod method) {
  CheckS2(f, "rotate_s2_signal");
  if (method == RotationMethod::kSpectral) {
    SpectralS2 s = s2_fft(f);
    SpectralS2 rotated(s.bandwidth, s.channels);
    const std::size_t cs = SpectralS2::channel_size(s.bandwidth);
    for (int c = 0; c < s.channels; ++c) {
      RotateS2Coefficients(s.coeffs.data() + c * cs, rotated.coeffs.data() + c * cs,
                           s.bandwidth, r);
    }
    return s2_ifft(rotated);
  }
  const DhGrid grid = make_dh_grid(f.bandwidth);
  const Mat3 rt = r.to_matrix().transpose();
  const int n = f.size();
  SphericalSignal out(f.bandwidth, f.channels);
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < n; ++k) {
      const double sb = std::sin(grid.betas[k]);
      const Vec3 x(sb * std::cos(grid.alphas[j]), sb * std::sin(grid.alphas[j]),
                   std::cos(grid.betas[k]));
      const Vec3 y = rt * x;
      const InterpAxis a = PeriodicAxis(std::atan2(y.y(), y.x()), n);
      const InterpAxis b = BetaAxis(std::acos(std::clamp(y.z(), -1.0, 1.0)), n);
      for (int c = 0; c < f.channels; ++c) {
        const double v0 = (1 - b.t) * f.at(c, a.i0, b.i0) + b.t * f.at(c, a.i0, b.i1);
        const double v1 = (1 - b.t) * f.at(c, a.i1, b.i0) + b.t * f.at(c, a.i1, b.i1);
        out.at(c, j, k) = (1 - a.t) * v0 + a.t * v1;
      }
    }
  }
  return out;
}

So3Signal rotate_so3_signal(const So3Signal& h, const RotationZYZ& r,
                            RotationMethod method) {
  CheckSo3(h, "rotate_so3_signal");
  if (method == RotationMethod::kSpectral) {
    SpectralSo3 s = so3_fft(h);
    SpectralSo3 rotated(s.bandwidth, s.channels);
    for (int c = 0; c < s.channels; ++c) {
      RotateSo3Coefficients(s.channel(c), rotated.channel(c), s.bandwidth, r);
    }
    return so3_ifft(rotated);
  }
  const So3Grid grid = make_so3_grid(h.bandwidth);
  const Mat3 rt = r.to_matrix().transpose();
  const int n = h.size();
  So3Signal out(h.bandwidth, h.channels);
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < n; ++k) {
      for (int l = 0; l < n; ++l) {
        Mat3 x = rt * zyz_to_matrix(grid.sample(j, k, l));
        const RotationZYZ e = matrix_to_zyz(x);
        const InterpAxis a = PeriodicAxis(e.alpha, n);
        const InterpAxis b = BetaAxis(e.beta, n);
        const InterpAxis g = PeriodicAxis(e.gamma, n);
        for (int c = 0; c < h.channels; ++c) {
          double acc = 0.0;
          for (int da = 0; da < 2; ++da) {
            const int ia = da ? a.i1 : a.i0;
            const double wa = da ? a.t : 1 - a.t;
            for (int db = 0; db < 2; ++db) {
              const int ib = db ? b.i1 : b.i0;
              const double wb = db ? b.t : 1 - b.t;
              const double v =
                  (1 - g.t) * h.at(c, ia, ib, g.i0) + g.t * h.at(c, ia, ib, g.i1);
              acc += wa * wb * v;
            }
          }
          out.at(c, j, k, l) = acc;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Correlation

So3Signal s2_correlation(const SphericalSignal& f, const SphericalSignal& psi,
                         int out_bandwidth, CorrelationBackend backend) {
  CheckS2(f, "s2_correlation");
  CheckS2(psi, "s2_correlation");
  if (f.bandwidth != psi.bandwidth || f.channels != psi.channels) {
    throw InvalidArgument("s2_correlation: signal and filter shapes differ");
  }
  const int bo = ResolveOutBandwidth(f.bandwidth, out_bandwidth, "s2_correlation");
  const int channels = f.channels;

  if (backend == CorrelationBackend::kSpectral) {
    const SpectralS2 fh = s2_fft(f);
    const SpectralS2 ph = s2_fft(psi);
    SpectralSo3 out(bo, 1);
    for (int c = 0; c < channels; ++c) {
      for (int l = 0; l < bo; ++l) {
        for (int p = -l; p <= l; ++p) {
          for (int m = -l; m <= l; ++m) {
            out.at(0, l, p, m) += fh.at(c, l, p) * std::conj(ph.at(c, l, m));
          }
        }
      }
    }
    return so3_ifft(out);
  }

  const SphericalSignal fb = bo == f.bandwidth ? f : bandlimit(f, bo);
  const SpectralS2 ph = s2_fft(bo == psi.bandwidth ? psi : bandlimit(psi, bo));
  const S2Transform& t = S2Transform::get(bo);
  const So3Grid grid = make_so3_grid(bo);
  const DhGrid sphere = make_dh_grid(bo);
  const int n = 2 * bo;
  const std::size_t cs = SpectralS2::channel_size(bo);
  const std::size_t gs = fb.grid_size();
  So3Signal out(bo, 1);
  std::vector<Complex> rotated(cs);
  std::vector<double> phi(gs * channels);
  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) {
      // phi = L_{Ry(beta_k) Rz(gamma_l)} psi; the alpha factor is a column shift.
      const RotationZYZ r{0.0, grid.betas[k], grid.gammas[l]};
      for (int c = 0; c < channels; ++c) {
        RotateS2Coefficients(ph.coeffs.data() + c * cs, rotated.data(), bo, r);
        t.synthesize(rotated.data(), bo, phi.data() + c * gs, false, true);
      }
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
          for (int jp = 0; jp < n; ++jp) {
            const double* pr = phi.data() + c * gs + jp * n;
            const double* fr = fb.values.data() + fb.index(c, (jp + j) % n, 0);
            for (int kp = 0; kp < n; ++kp) acc += sphere.weights[kp] * pr[kp] * fr[kp];
          }
        }
        out.at(0, j, k, l) = acc;
      }
    }
  }
  return out;
}

So3Signal so3_correlation(const So3Signal& h, const So3Signal& psi, int out_bandwidth,
                          CorrelationBackend backend) {
  CheckSo3(h, "so3_correlation");
  CheckSo3(psi, "so3_correlation");
  if (h.bandwidth != psi.bandwidth || h.channels != psi.channels) {
    throw InvalidArgument("so3_correlation: signal and filter shapes differ");
  }
  const int bo = ResolveOutBandwidth(h.bandwidth, out_bandwidth, "so3_correlation");
  const int channels = h.channels;

  if (backend == CorrelationBackend::kSpectral) {
    const SpectralSo3 hh = so3_fft(h);
    const SpectralSo3 ph = so3_fft(psi);
    SpectralSo3 out(bo, 1);
    for (int c = 0; c < channels; ++c) {
      for (int l = 0; l < bo; ++l) {
        for (int p = -l; p <= l; ++p) {
          for (int m = -l; m <= l; ++m) {
            Complex acc = 0.0;
            for (int q = -l; q <= l; ++q) {
              acc += hh.at(c, l, p, q) * std::conj(ph.at(c, l, m, q));
            }
            out.at(0, l, p, m) += acc;
          }
        }
      }
    }
    return so3_ifft(out);
  }

  const So3Signal hb = bo == h.bandwidth ? h : bandlimit(h, bo);
  const SpectralSo3 ph = so3_fft(bo == psi.bandwidth ? psi : bandlimit(psi, bo));
  const So3Transform& t = So3Transform::get(bo);
  const So3Grid grid = make_so3_grid(bo);
  const int n = 2 * bo;
  const std::size_t cs = SpectralSo3::channel_size(bo);
  const std::size_t gs = hb.grid_size();
  const std::size_t slab = static_cast<std::size_t>(n) * n;
  So3Signal out(bo, 1);
  std::vector<Complex> rotated(cs);
  std::vector<double> phi(gs * channels);
  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) {
      const RotationZYZ r{0.0, grid.betas[k], grid.gammas[l]};
      for (int c = 0; c < channels; ++c) {
        RotateSo3Coefficients(ph.channel(c), rotated.data(), bo, r);
        t.synthesize(rotated.data(), bo, phi.data() + c * gs, false, true);
      }
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
          for (int jp = 0; jp < n; ++jp) {
            const double* pr = phi.data() + c * gs + jp * slab;
            const double* hr = hb.channel(c) + ((jp + j) % n) * slab;
            for (int kp = 0; kp < n; ++kp) {
              const double w = grid.weights[kp];
              for (int lp = 0; lp < n; ++lp) {
                acc += w * pr[kp * n + lp] * hr[kp * n + lp];
              }
            }
          }
        }
        out.at(0, j, k, l) = acc;
      }
    }
  }
  return out;
}

}  // namespace equidesc
