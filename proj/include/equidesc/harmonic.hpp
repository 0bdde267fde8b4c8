#pragma once

#include <complex>
#include <vector>

#include <Eigen/Core>

#include "equidesc/core.hpp"
#include "equidesc/signal.hpp"

namespace equidesc {

using Complex = std::complex<double>;

/// Multi-channel real signal on the equiangular SO(3) grid of bandwidth b.
/// values[((c * 2b + j) * 2b + k) * 2b + l] is channel c at
/// (alpha_j, beta_k, gamma_l).
struct So3Signal {
  int bandwidth = 0;
  int channels = 0;
  std::vector<double> values;

  So3Signal() = default;
  So3Signal(int bandwidth, int channels);

  int size() const { return 2 * bandwidth; }
  std::size_t grid_size() const {
    const std::size_t n = size();
    return n * n * n;
  }
  std::size_t index(int c, int j, int k, int l) const {
    const std::size_t n = size();
    return ((static_cast<std::size_t>(c) * n + j) * n + k) * n + l;
  }
  double& at(int c, int j, int k, int l) { return values[index(c, j, k, l)]; }
  double at(int c, int j, int k, int l) const {
    return values[index(c, j, k, l)];
  }
  const double* channel(int c) const { return values.data() + c * grid_size(); }
  double* channel(int c) { return values.data() + c * grid_size(); }
};

/// Generalized Fourier coefficients of an SO(3) signal.
///
/// With D^l_{mn}(a, b, g) = exp(-i m a) d^l_{mn}(b) exp(-i n g), a signal is
/// h = sum_l (2l + 1) sum_{mn} c^l_{mn} D^l_{mn} and
/// c^l_{mn} = integral of h * conj(D^l_{mn}) under the normalized Haar measure.
/// Block l is a row-major (2l+1) x (2l+1) matrix indexed by (m + l, n + l).
struct SpectralSo3 {
  int bandwidth = 0;
  int channels = 0;
  std::vector<Complex> coeffs;

  SpectralSo3() = default;
  SpectralSo3(int bandwidth, int channels);

  static std::size_t block_offset(int l) {
    return static_cast<std::size_t>(l) * (4 * l * l - 1) / 3;
  }
  static std::size_t channel_size(int bandwidth) { return block_offset(bandwidth); }

  Complex& at(int c, int l, int m, int n) {
    return coeffs[c * channel_size(bandwidth) + block_offset(l) +
                  (m + l) * (2 * l + 1) + (n + l)];
  }
  Complex at(int c, int l, int m, int n) const {
    return coeffs[c * channel_size(bandwidth) + block_offset(l) +
                  (m + l) * (2 * l + 1) + (n + l)];
  }
  Complex* channel(int c) { return coeffs.data() + c * channel_size(bandwidth); }
  const Complex* channel(int c) const {
    return coeffs.data() + c * channel_size(bandwidth);
  }
};

/// Spherical coefficients in the D^l_{m0} basis, i.e. the SO(3) transform of
/// the signal lifted to SO(3) through x = R e_z. Block l holds m = -l..l.
struct SpectralS2 {
  int bandwidth = 0;
  int channels = 0;
  std::vector<Complex> coeffs;

  SpectralS2() = default;
  SpectralS2(int bandwidth, int channels);

  static std::size_t block_offset(int l) { return static_cast<std::size_t>(l) * l; }
  static std::size_t channel_size(int bandwidth) {
    return static_cast<std::size_t>(bandwidth) * bandwidth;
  }
  Complex& at(int c, int l, int m) {
    return coeffs[c * channel_size(bandwidth) + block_offset(l) + (m + l)];
  }
  Complex at(int c, int l, int m) const {
    return coeffs[c * channel_size(bandwidth) + block_offset(l) + (m + l)];
  }
};

/// Real Wigner d-matrix d^l(beta), indexed (m + l, n + l), computed with the
/// three-term recursion in l.
Eigen::MatrixXd wigner_d(int l, double beta);

/// d^0(beta) .. d^{max_degree - 1}(beta) from a single recursion pass.
std::vector<Eigen::MatrixXd> wigner_d_all(int max_degree, double beta);

/// Wigner D^l(R) with the convention documented on SpectralSo3.
Eigen::MatrixXcd wigner_D(int l, const RotationZYZ& r);

/// Transform engine for one SO(3) bandwidth. Instances are cached and shared;
/// all methods are const and safe to call concurrently.
///
/// `analyze` computes sum_q w_q x_q conj(D^l_{mn}(q)) for l < max_degree, with
/// w_q the grid quadrature weights when `quadrature_weights` is set (else 1),
/// and scales block l by (2l+1) when `degree_scale` is set. `synthesize`
/// computes Re sum_{l,m,n} s_l c^l_{mn} D^l_{mn}(q) * w_q with the same two
/// switches. The forward transform is analyze(weights, no scale) and the
/// inverse is synthesize(no weights, scale); the other two combinations are
/// their adjoints under the real inner product.
class So3Transform {
 public:
  static const So3Transform& get(int bandwidth);

  explicit So3Transform(int bandwidth);
  ~So3Transform();
  So3Transform(const So3Transform&) = delete;
  So3Transform& operator=(const So3Transform&) = delete;

  int bandwidth() const { return bandwidth_; }

  void analyze(const double* grid, Complex* coeffs, int max_degree,
               bool quadrature_weights, bool degree_scale) const;
  void synthesize(const Complex* coeffs, int max_degree, double* grid,
                  bool quadrature_weights, bool degree_scale) const;

 private:
  int bandwidth_;
  int n_;
  std::vector<double> row_weights_;
  std::vector<double> d_table_;  // [k][block_offset(l) + (m+l)(2l+1) + n+l]
  void* forward_plan_ = nullptr;
  void* inverse_plan_ = nullptr;
};

/// Transform engine for spherical signals on the Driscoll-Healy grid; same
/// switch semantics as So3Transform with D^l_{m0} in place of D^l_{mn}.
class S2Transform {
 public:
  static const S2Transform& get(int bandwidth);

  explicit S2Transform(int bandwidth);
  ~S2Transform();
  S2Transform(const S2Transform&) = delete;
  S2Transform& operator=(const S2Transform&) = delete;

  int bandwidth() const { return bandwidth_; }

  void analyze(const double* grid, Complex* coeffs, int max_degree,
               bool quadrature_weights, bool degree_scale) const;
  void synthesize(const Complex* coeffs, int max_degree, double* grid,
                  bool quadrature_weights, bool degree_scale) const;

 private:
  int bandwidth_;
  int n_;
  std::vector<double> row_weights_;
  std::vector<double> d_table_;  // [k][l*l + m + l] = d^l_{m0}(beta_k)
  void* forward_plan_ = nullptr;
  void* inverse_plan_ = nullptr;
};

SpectralS2 s2_fft(const SphericalSignal& f);
SphericalSignal s2_ifft(const SpectralS2& s);
SpectralSo3 so3_fft(const So3Signal& h);
So3Signal so3_ifft(const SpectralSo3& s);

/// Keeps degrees below `bandwidth` and resamples on the smaller grid.
SphericalSignal bandlimit(const SphericalSignal& f, int bandwidth);
So3Signal bandlimit(const So3Signal& h, int bandwidth);

/// Sum over channels of the quadrature of h^2.
double weighted_energy(const So3Signal& h);
double weighted_energy(const SphericalSignal& f);
/// Sum over channels and degrees of (2l+1) |c^l|_F^2.
double spectral_energy(const SpectralSo3& s);
double spectral_energy(const SpectralS2& s);

enum class RotationMethod {
  kInterpolate,  // bilinear / trilinear, periodic in alpha and gamma, clamped in beta
  kSpectral,     // Wigner-D modulation of the band-limited expansion
};

enum class CorrelationBackend {
  kDirect,    // quadrature of <L_R psi, f> at every output rotation
  kSpectral,  // per-degree block products of generalized Fourier coefficients
};

/// [L_R f](x) = f(R^-1 x).
SphericalSignal rotate_s2_signal(const SphericalSignal& f, const RotationZYZ& r,
                                 RotationMethod method = RotationMethod::kInterpolate);

/// [L_R h](Q) = h(R^-1 Q).
So3Signal rotate_so3_signal(const So3Signal& h, const RotationZYZ& r,
                            RotationMethod method = RotationMethod::kInterpolate);

/// out(R) = sum_k integral psi_k(R^-1 x) f_k(x) dx over the normalized sphere
/// measure. The result is band-limited to `out_bandwidth` (0 keeps the input
/// bandwidth): both backends drop degrees >= out_bandwidth before sampling on
/// the output grid. Throws InvalidArgument on mismatched shapes.
So3Signal s2_correlation(const SphericalSignal& f, const SphericalSignal& psi,
                         int out_bandwidth = 0,
                         CorrelationBackend backend = CorrelationBackend::kSpectral);

/// out(R) = sum_k integral psi_k(R^-1 Q) h_k(Q) dQ over the normalized Haar
/// measure, with the same band-limiting rule as s2_correlation.
So3Signal so3_correlation(const So3Signal& h, const So3Signal& psi,
                          int out_bandwidth = 0,
                          CorrelationBackend backend = CorrelationBackend::kSpectral);

}  // namespace equidesc
