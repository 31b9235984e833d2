#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <stdexcept>
#include <utility>

namespace so3kit {

inline constexpr double kPi = 3.14159265358979323846;

/// Rotation angles about the x, y, and z axes respectively.
struct EulerAngles {
  double alpha = 0;
  double beta = 0;
  double gamma = 0;
};

using Rotation3 = Eigen::Matrix3d;

/// Spherical coordinates of an edge: radius, azimuth alpha in [0,2pi), and
/// beta the angle from the south pole (beta = pi - theta).
struct SphericalAngles {
  double r = 0;
  double alpha = 0;
  double beta = 0;
};

inline Rotation3 euler_to_rotation(const EulerAngles& a) {
  if (!std::isfinite(a.alpha) || !std::isfinite(a.beta) || !std::isfinite(a.gamma))
    throw std::domain_error("euler_to_rotation: non-finite angle");
  Rotation3 rx, ry, rz;
  double ca = std::cos(a.alpha), sa = std::sin(a.alpha);
  double cb = std::cos(a.beta), sb = std::sin(a.beta);
  double cg = std::cos(a.gamma), sg = std::sin(a.gamma);
  rx << 1, 0, 0, 0, ca, -sa, 0, sa, ca;
  ry << cb, 0, sb, 0, 1, 0, -sb, 0, cb;
  rz << cg, -sg, 0, sg, cg, 0, 0, 0, 1;
  return rx * ry * rz;
}

inline SphericalAngles cart_to_spherical(const Eigen::Vector3d& v) {
  if (!v.allFinite()) throw std::domain_error("cart_to_spherical: non-finite input");
  double r = v.norm();
  if (r < 1e-12) throw std::domain_error("cart_to_spherical: degenerate direction (zero vector)");
  double alpha = std::atan2(v.y(), v.x());
  if (alpha < 0) alpha += 2 * kPi;
  double theta = std::acos(std::clamp(v.z() / r, -1.0, 1.0));
  return SphericalAngles{r, alpha, kPi - theta};
}

inline Eigen::Vector3d spherical_to_cart(const SphericalAngles& s) {
  double theta = kPi - s.beta;
  return {s.r * std::sin(theta) * std::cos(s.alpha), s.r * std::sin(theta) * std::sin(s.alpha),
          s.r * std::cos(theta)};
}

/// (2J-1)!! = (2J-1)(2J-3)...1
inline double semifactorial(int x) {
  double f = 1.0;
  for (int n = x; n > 1; n -= 2) f *= n;
  return f;
}

/// (J+m)(J+m-1)...(J-m+1), the reciprocal of (J-m)!/(J+m)!.
inline double falling_factorial(int J, int m) {
  double f = 1.0;
  for (int n = J + m; n > J - m; --n) f *= n;
  return f;
}

/// Associated Legendre polynomials at a fixed argument, memoized by (J,m)
/// for the lifetime of the batch. Includes the Condon-Shortley (-1)^m via
/// the m=J boundary formula.
class AlpBatch {
 public:
  explicit AlpBatch(double x) : x_(x) {
    if (std::abs(x) > 1.0 + 1e-12) throw std::domain_error("alp: |x| > 1");
    x_ = std::clamp(x, -1.0, 1.0);
  }

  double alp(int J, int m) {
    int m_abs = std::abs(m);
    if (m_abs > J) throw std::out_of_range("alp: |m| > J");
    auto it = memo_.find({J, m});
    if (it != memo_.end()) return it->second;
    double y;
    if (J == 0) {
      y = 1.0;
    } else if (m_abs == J) {
      y = ((J % 2) ? -1.0 : 1.0) * semifactorial(2 * J - 1) *
          std::pow(1.0 - x_ * x_, m_abs / 2.0);
      if (m < 0) y *= neg_coeff(J, m_abs);
    } else {
      // first term alone is the m=J-1 case; second term adds the J-2 ALP
      y = ((2.0 * J - 1.0) / (J - m_abs)) * x_ * alp(J - 1, m_abs);
      if (J - m_abs > 1) y -= ((J + m_abs - 1.0) / (J - m_abs)) * alp(J - 2, m_abs);
      if (m < 0) y *= neg_coeff(J, m_abs);
    }
    memo_[{J, m}] = y;
    return y;
  }

  void clear() { memo_.clear(); }

 private:
  static double neg_coeff(int J, int m_abs) {
    return ((m_abs % 2) ? -1.0 : 1.0) / falling_factorial(J, m_abs);
  }

  double x_;
  std::map<std::pair<int, int>, double> memo_;
};

inline double alp(int J, int m, double x) { return AlpBatch(x).alp(J, m); }

namespace detail {
inline double sh_element(int J, int m, double theta, double phi, AlpBatch& batch) {
  if (std::abs(m) > J) throw std::out_of_range("spherical_harmonic: |m| > J");
  double N = std::sqrt((2.0 * J + 1.0) / (4.0 * kPi));
  double leg = batch.alp(J, std::abs(m));
  if (m == 0) return N * leg;
  double Y = (m > 0) ? std::cos(m * phi) * leg : std::sin(std::abs(m) * phi) * leg;
  // sqrt(2) accounts for splitting the complex harmonic into sine and cosine
  N *= std::sqrt(2.0 / falling_factorial(J, std::abs(m)));
  return N * Y;
}
}  // namespace detail

/// Real (tesseral) spherical harmonic. The radius field of `angles` is
/// ignored; theta = pi - beta, phi = alpha.
inline double spherical_harmonic(int J, int m, const SphericalAngles& angles) {
  double theta = kPi - angles.beta;
  AlpBatch batch(std::cos(theta));
  return detail::sh_element(J, m, theta, angles.alpha, batch);
}

/// Stacks Y_m for m = -J..J into a type-J spherical tensor.
inline Eigen::VectorXd sh_vector(int J, const Eigen::Vector3d& direction) {
  if (std::abs(direction.norm() - 1.0) > 1e-9)
    throw std::invalid_argument("sh_vector: direction must be a unit vector");
  SphericalAngles s = cart_to_spherical(direction);
  double theta = kPi - s.beta;
  AlpBatch batch(std::cos(theta));
  Eigen::VectorXd out(2 * J + 1);
  for (int m = -J; m <= J; ++m) out(m + J) = detail::sh_element(J, m, theta, s.alpha, batch);
  return out;
}

namespace detail {
/// Fixed deterministic unit directions on a golden-ratio spiral.
inline std::vector<Eigen::Vector3d> fibonacci_directions(int n) {
  const double golden_angle = kPi * (3.0 - std::sqrt(5.0));
  std::vector<Eigen::Vector3d> dirs;
  dirs.reserve(n);
  for (int i = 0; i < n; ++i) {
    double z = 1.0 - 2.0 * (i + 0.5) / n;
    double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    double phi = golden_angle * i;
    dirs.emplace_back(rho * std::cos(phi), rho * std::sin(phi), z);
  }
  return dirs;
}
}  // namespace detail

/// Degree-l Wigner-D matrix for a rotation, built as the least-squares
/// solution of Y(R x_i) = D Y(x_i) over a fixed direction sample. The fit
/// residual doubles as a consistency check on the harmonic conventions.
inline Eigen::MatrixXd wigner_d(int l, const Rotation3& R) {
  int d = 2 * l + 1;
  if (l == 0) return Eigen::MatrixXd::Ones(1, 1);
  int n = std::max(2 * d, 16);
  auto dirs = detail::fibonacci_directions(n);
  Eigen::MatrixXd A(n, d), B(n, d);
  for (int i = 0; i < n; ++i) {
    A.row(i) = sh_vector(l, dirs[i]).transpose();
    Eigen::Vector3d rd = R * dirs[i];
    rd.normalize();
    B.row(i) = sh_vector(l, rd).transpose();
  }
  // rows are samples: B = A D^T
  Eigen::MatrixXd Dt = A.colPivHouseholderQr().solve(B);
  double resid = (A * Dt - B).cwiseAbs().maxCoeff();
  if (resid > 1e-8)
    throw std::runtime_error("wigner_d: fit residual " + std::to_string(resid) +
                             " exceeds 1e-8 (harmonic convention inconsistency)");
  return Dt.transpose();
}

inline Eigen::MatrixXd wigner_d(int l, const EulerAngles& angles) {
  return wigner_d(l, euler_to_rotation(angles));
}

}  // namespace so3kit
