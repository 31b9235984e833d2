#include <catch2/catch_amalgamated.hpp>

#include <so3kit/so3.hpp>

#include <random>

using namespace so3kit;

namespace {

// Rodrigues-formula oracle for the ALP recursion: P_l(x) by explicit
// polynomial coefficients, differentiated m times, with the Condon-Shortley
// (-1)^m factor. Independent of the recursion under test.
std::vector<double> legendre_coeffs(int l) {
  // P_0 = 1, P_1 = x, (l+1)P_{l+1} = (2l+1)x P_l - l P_{l-1}
  std::vector<double> pm1 = {1.0};
  if (l == 0) return pm1;
  std::vector<double> p = {0.0, 1.0};
  for (int n = 1; n < l; ++n) {
    std::vector<double> next(n + 2, 0.0);
    for (int i = 0; i <= n; ++i) next[i + 1] += (2.0 * n + 1.0) / (n + 1.0) * p[i];
    for (int i = 0; i < static_cast<int>(pm1.size()); ++i)
      next[i] -= static_cast<double>(n) / (n + 1.0) * pm1[i];
    pm1 = std::move(p);
    p = std::move(next);
  }
  return p;
}

std::vector<double> poly_derivative(std::vector<double> c, int times) {
  for (int t = 0; t < times; ++t) {
    std::vector<double> d(c.size() > 1 ? c.size() - 1 : 1, 0.0);
    for (std::size_t i = 1; i < c.size(); ++i) d[i - 1] = c[i] * static_cast<double>(i);
    c = std::move(d);
  }
  return c;
}

double poly_eval(const std::vector<double>& c, double x) {
  double acc = 0;
  for (std::size_t i = c.size(); i-- > 0;) acc = acc * x + c[i];
  return acc;
}

double rodrigues_alp(int J, int m, double x) {
  int ma = std::abs(m);
  std::vector<double> d = poly_derivative(legendre_coeffs(J), ma);
  double y = ((ma % 2) ? -1.0 : 1.0) * std::pow(1.0 - x * x, ma / 2.0) * poly_eval(d, x);
  if (m < 0) y *= ((ma % 2) ? -1.0 : 1.0) / falling_factorial(J, ma);
  return y;
}

}  // namespace

TEST_CASE("euler_to_rotation basics") {
  Rotation3 I = euler_to_rotation({0, 0, 0});
  REQUIRE((I - Rotation3::Identity()).cwiseAbs().maxCoeff() == 0.0);

  // gamma = pi/2 is a rotation about z mapping e_x to e_y
  Rotation3 rz = euler_to_rotation({0, 0, kPi / 2});
  Eigen::Vector3d ey = rz * Eigen::Vector3d::UnitX();
  REQUIRE((ey - Eigen::Vector3d::UnitY()).cwiseAbs().maxCoeff() < 1e-15);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(0.0, 2 * kPi);
  for (int t = 0; t < 10; ++t) {
    EulerAngles a{dist(rng), dist(rng), dist(rng)};
    Rotation3 R = euler_to_rotation(a);
    REQUIRE((R.transpose() * R - Rotation3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE(R.determinant() == Catch::Approx(1.0).margin(1e-12));
    // composition via direct matrix multiply
    EulerAngles b{dist(rng), dist(rng), dist(rng)};
    Rotation3 Rb = euler_to_rotation(b);
    REQUIRE(((R * Rb).transpose() * (R * Rb) - Rotation3::Identity()).cwiseAbs().maxCoeff() <
            1e-12);
  }
  REQUIRE_THROWS_AS(euler_to_rotation({std::nan(""), 0, 0}), std::domain_error);
}

TEST_CASE("cart_to_spherical conventions") {
  SphericalAngles north = cart_to_spherical({0, 0, 1});
  REQUIRE(north.r == Catch::Approx(1.0));
  REQUIRE(north.beta == Catch::Approx(kPi));  // theta = pi - beta = 0

  SphericalAngles ex = cart_to_spherical({1, 0, 0});
  REQUIRE(ex.alpha == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(ex.beta == Catch::Approx(kPi / 2));

  REQUIRE_THROWS_AS(cart_to_spherical({0, 0, 0}), std::domain_error);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    Eigen::Vector3d v{dist(rng), dist(rng), dist(rng)};
    if (v.norm() < 1e-6) continue;
    Eigen::Vector3d back = spherical_to_cart(cart_to_spherical(v));
    REQUIRE((back - v).norm() < 1e-10 * (1 + v.norm()));
    SphericalAngles s = cart_to_spherical(v);
    REQUIRE(s.alpha >= 0.0);
    REQUIRE(s.alpha < 2 * kPi);
  }
}

TEST_CASE("alp closed-form examples") {
  REQUIRE(alp(0, 0, 0.3) == 1.0);
  REQUIRE(alp(0, 0, -0.9) == 1.0);
  for (double x : {-0.8, 0.0, 0.3, 0.99})
    REQUIRE(alp(1, 1, x) == Catch::Approx(-std::sqrt(1.0 - x * x)).margin(1e-14));
  REQUIRE(alp(2, 0, 0.5) == Catch::Approx(-0.125).margin(1e-15));
  REQUIRE_THROWS_AS(alp(1, 2, 0.0), std::out_of_range);
  REQUIRE_THROWS_AS(alp(2, 0, 1.5), std::domain_error);
}

TEST_CASE("alp recursion matches Rodrigues oracle, J <= 5, 101-point grid") {
  for (int J = 0; J <= 5; ++J)
    for (int m = -J; m <= J; ++m)
      for (int i = 0; i <= 100; ++i) {
        double x = -1.0 + 2.0 * i / 100.0;
        double got = alp(J, m, x);
        double want = rodrigues_alp(J, m, x);
        REQUIRE(std::abs(got - want) <= 1e-10 * (1.0 + std::abs(want)));
      }
}

TEST_CASE("spherical harmonic values") {
  SphericalAngles dir = cart_to_spherical({0.3, -0.2, 0.9});
  REQUIRE(spherical_harmonic(0, 0, dir) == Catch::Approx(0.2820948).margin(1e-7));

  // north pole: theta = 0, all m != 0 vanish
  SphericalAngles pole = cart_to_spherical({0, 0, 1});
  for (int J = 1; J <= 4; ++J)
    for (int m = -J; m <= J; ++m) {
      double y = spherical_harmonic(J, m, pole);
      if (m == 0)
        REQUIRE(std::abs(y) > 0.1);
      else
        REQUIRE(std::abs(y) < 1e-12);
    }
  REQUIRE_THROWS_AS(spherical_harmonic(1, 2, dir), std::out_of_range);
}

TEST_CASE("sh_vector basics") {
  Eigen::VectorXd y0 = sh_vector(0, Eigen::Vector3d(0, 1, 0));
  REQUIRE(y0.size() == 1);
  REQUIRE(y0(0) == Catch::Approx(std::sqrt(1.0 / (4 * kPi))).margin(1e-14));

  Eigen::VectorXd y2 = sh_vector(2, Eigen::Vector3d(0, 0, 1));
  for (int m = -2; m <= 2; ++m)
    if (m != 0) REQUIRE(std::abs(y2(m + 2)) < 1e-12);
  REQUIRE(std::abs(y2(2)) > 0.1);

  REQUIRE_THROWS_AS(sh_vector(1, Eigen::Vector3d(1, 1, 0)), std::invalid_argument);
}

TEST_CASE("spherical harmonics are equivariant under wigner_d") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> dist(0.0, 2 * kPi);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    EulerAngles a{dist(rng), dist(rng), dist(rng)};
    Rotation3 R = euler_to_rotation(a);
    Eigen::Vector3d x{g(rng), g(rng), g(rng)};
    x.normalize();
    for (int l = 0; l <= 4; ++l) {
      Eigen::MatrixXd D = wigner_d(l, R);
      Eigen::VectorXd y = sh_vector(l, x);
      Eigen::Vector3d rx = R * x;
      rx.normalize();
      Eigen::VectorXd ry = sh_vector(l, rx);
      REQUIRE((ry - D * y).norm() <= 1e-9 * (1 + y.norm()));
    }
  }
}

TEST_CASE("Monte-Carlo orthonormality of real spherical harmonics") {
  const int n = 100000;
  const int lmax = 3;
  // flat index over (l, m), l <= lmax
  std::vector<std::pair<int, int>> lm;
  for (int l = 0; l <= lmax; ++l)
    for (int m = -l; m <= l; ++m) lm.push_back({l, m});
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> acc(lm.size() * lm.size(), 0.0);
  for (int s = 0; s < n; ++s) {
    Eigen::Vector3d x{g(rng), g(rng), g(rng)};
    x.normalize();
    SphericalAngles sph = cart_to_spherical(x);
    double theta = kPi - sph.beta;
    AlpBatch batch(std::cos(theta));
    std::vector<double> vals(lm.size());
    for (std::size_t i = 0; i < lm.size(); ++i)
      vals[i] = detail::sh_element(lm[i].first, lm[i].second, theta, sph.alpha, batch);
    for (std::size_t i = 0; i < lm.size(); ++i)
      for (std::size_t j = i; j < lm.size(); ++j) acc[i * lm.size() + j] += vals[i] * vals[j];
  }
  double w = 4 * kPi / n;
  for (std::size_t i = 0; i < lm.size(); ++i)
    for (std::size_t j = i; j < lm.size(); ++j) {
      double integral = w * acc[i * lm.size() + j];
      double want = (i == j) ? 1.0 : 0.0;
      REQUIRE(std::abs(integral - want) < 2e-2);
    }
}

TEST_CASE("wigner_d structure") {
  REQUIRE(wigner_d(0, EulerAngles{1.0, 2.0, 3.0})(0, 0) == 1.0);
  for (int l = 1; l <= 3; ++l) {
    Eigen::MatrixXd D = wigner_d(l, EulerAngles{0, 0, 0});
    REQUIRE((D - Eigen::MatrixXd::Identity(2 * l + 1, 2 * l + 1)).cwiseAbs().maxCoeff() < 1e-10);
  }

  // l = 1 equals the permuted rotation matrix: real l=1 harmonics order the
  // Cartesian axes as (m=-1 <- -y, m=0 <- z, m=1 <- -x)
  Eigen::Matrix3d P;
  P << 0, -1, 0, 0, 0, 1, -1, 0, 0;
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> dist(0.0, 2 * kPi);
  for (int t = 0; t < 10; ++t) {
    EulerAngles a{dist(rng), dist(rng), dist(rng)};
    Rotation3 R = euler_to_rotation(a);
    Eigen::MatrixXd D = wigner_d(1, R);
    REQUIRE((D - P * R * P.transpose()).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("wigner_d orthogonality and homomorphism") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> dist(0.0, 2 * kPi);
  for (int t = 0; t < 5; ++t) {
    EulerAngles a{dist(rng), dist(rng), dist(rng)};
    EulerAngles b{dist(rng), dist(rng), dist(rng)};
    Rotation3 Ra = euler_to_rotation(a), Rb = euler_to_rotation(b);
    for (int l = 1; l <= 4; ++l) {
      Eigen::MatrixXd Da = wigner_d(l, Ra), Db = wigner_d(l, Rb);
      int d = 2 * l + 1;
      REQUIRE((Da.transpose() * Da - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() <
              1e-9);
      Eigen::MatrixXd Dab = wigner_d(l, Rotation3(Ra * Rb));
      REQUIRE((Da * Db - Dab).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}
