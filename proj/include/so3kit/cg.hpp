#pragma once

#include <Eigen/Dense>
#include <map>
#include <mutex>
#include <random>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "so3kit/array.hpp"
#include "so3kit/graph.hpp"
#include "so3kit/so3.hpp"

namespace so3kit {

inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

/// One coefficient matrix of the homogeneous Sylvester system
/// kron(D_k,D_l)·X = X·D_J, vectorized column-major:
/// kron(I_{2J+1}, kron(D_k,D_l)) - kron(D_J^T, I_{(2l+1)(2k+1)}).
inline Eigen::MatrixXd sylvester_submatrix(int J, int k, int l, const EulerAngles& angles) {
  if (J < std::abs(k - l) || J > k + l)
    throw std::invalid_argument("sylvester_submatrix: J outside |k-l|..k+l");
  Eigen::MatrixXd dk = wigner_d(k, angles);
  Eigen::MatrixXd dl = wigner_d(l, angles);
  Eigen::MatrixXd dj = wigner_d(J, angles);
  int n = (2 * k + 1) * (2 * l + 1);
  Eigen::MatrixXd a = kron(dk, dl);
  return kron(Eigen::MatrixXd::Identity(2 * J + 1, 2 * J + 1), a) -
         kron(dj.transpose(), Eigen::MatrixXd::Identity(n, n));
}

/// Unit vector spanning the common null space of the stacked matrices.
/// Sign-fixed: the first entry with magnitude above 1e-8 is positive.
/// Errors if the null-space dimension is not exactly 1.
inline Eigen::VectorXd null_space(const std::vector<Eigen::MatrixXd>& mats) {
  if (mats.size() < 3) throw std::invalid_argument("null_space: need at least 3 matrices");
  Eigen::Index n = mats[0].cols();
  Eigen::MatrixXd stacked(static_cast<Eigen::Index>(mats.size()) * mats[0].rows(), n);
  for (std::size_t i = 0; i < mats.size(); ++i) {
    if (mats[i].rows() != mats[0].rows() || mats[i].cols() != n)
      throw std::invalid_argument("null_space: inconsistent matrix sides");
    stacked.middleRows(static_cast<Eigen::Index>(i) * mats[0].rows(), mats[0].rows()) = mats[i];
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(stacked, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(n - 1) >= 1e-10)
    throw std::runtime_error("null_space: no null vector (smallest singular value " +
                             std::to_string(sv(n - 1)) + ")");
  if (n > 1) {
    double next = sv(n - 2);
    if (next < 1e-10 || next / std::max(sv(n - 1), 1e-300) < 1e4)
      throw std::runtime_error("null_space: degenerate null space (dimension > 1)");
  }
  Eigen::VectorXd v = svd.matrixV().col(n - 1);
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (std::abs(v(i)) > 1e-8) {
      if (v(i) < 0) v = -v;
      break;
    }
  return v;
}

/// Clebsch-Gordan change-of-basis block: the (2l+1)(2k+1) x (2J+1) slice
/// whose columns span the type-J subspace of the k (x) l tensor product.
struct CGBlock {
  int k = 0, l = 0, J = 0;
  Eigen::MatrixXd q_t;
};

namespace detail {

inline std::vector<EulerAngles> cg_solve_angles() {
  // one fixed triple plus five drawn from a fixed seed
  std::vector<EulerAngles> out = {{4.41301023, 5.56684102, 4.59384642}};
  std::mt19937_64 rng(0x5e3c6u);
  std::uniform_real_distribution<double> dist(0.0, 2 * kPi);
  for (int i = 0; i < 5; ++i) {
    double a = dist(rng), b = dist(rng), g = dist(rng);
    out.push_back({a, b, g});
  }
  return out;
}

inline std::vector<EulerAngles> cg_verify_angles() {
  std::mt19937_64 rng(0xc6ba515u);
  std::uniform_real_distribution<double> dist(0.0, 2 * kPi);
  std::vector<EulerAngles> out;
  for (int i = 0; i < 4; ++i) {
    double a = dist(rng), b = dist(rng), g = dist(rng);
    out.push_back({a, b, g});
  }
  return out;
}

}  // namespace detail

/// Solves the stacked Sylvester system for (k,l,J), verifies the
/// intertwining identity on fresh rotations, and caches for the process
/// lifetime.
inline const CGBlock& basis_q_j(int k, int l, int J) {
  if (J < std::abs(k - l) || J > k + l)
    throw std::invalid_argument("basis_q_j: J outside |k-l|..k+l");
  static std::map<std::tuple<int, int, int>, CGBlock> cache;
  static std::mutex mtx;
  std::lock_guard<std::mutex> lock(mtx);
  auto key = std::make_tuple(k, l, J);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  std::vector<Eigen::MatrixXd> mats;
  for (const auto& ang : detail::cg_solve_angles()) mats.push_back(sylvester_submatrix(J, k, l, ang));
  Eigen::VectorXd v = null_space(mats);
  int n = (2 * k + 1) * (2 * l + 1);
  Eigen::MatrixXd q_t = Eigen::Map<const Eigen::MatrixXd>(v.data(), n, 2 * J + 1);
  // the unit null vector spreads Frobenius norm 1 over 2J+1 equal-norm
  // orthogonal columns; rescale so the columns are orthonormal
  q_t *= std::sqrt(2.0 * J + 1.0);
  for (const auto& ang : detail::cg_verify_angles()) {
    Eigen::MatrixXd a = kron(wigner_d(k, ang), wigner_d(l, ang));
    double resid = (a * q_t - q_t * wigner_d(J, ang)).cwiseAbs().maxCoeff();
    if (resid > 1e-8)
      throw std::runtime_error("basis_q_j: intertwining verification failed for (" +
                               std::to_string(k) + "," + std::to_string(l) + "," +
                               std::to_string(J) + "), residual " + std::to_string(resid));
  }
  auto [ins, ok] = cache.emplace(key, CGBlock{k, l, J, std::move(q_t)});
  (void)ok;
  return ins->second;
}

/// Orthogonal change of basis for the full k (x) l product: rows are the
/// coupled (J,m) basis vectors stacked over ascending J, so that
/// kron(D_k,D_l) = Q^T · blockdiag(D_J) · Q.
inline Eigen::MatrixXd full_q(int k, int l) {
  int n = (2 * k + 1) * (2 * l + 1);
  Eigen::MatrixXd q(n, n);
  int row = 0;
  for (int J = std::abs(k - l); J <= k + l; ++J) {
    const CGBlock& b = basis_q_j(k, l, J);
    q.middleRows(row, 2 * J + 1) = b.q_t.transpose();
    row += 2 * J + 1;
  }
  return q;
}

/// Decomposes the tensor product of a type-k and a type-l tensor into its
/// type-J components, J = |k-l|..k+l.
inline std::vector<Eigen::VectorXd> cg_decompose(int k, const Eigen::VectorXd& s, int l,
                                                 const Eigen::VectorXd& t) {
  if (s.size() != 2 * k + 1 || t.size() != 2 * l + 1)
    throw std::invalid_argument("cg_decompose: tensor length does not match degree");
  // vec_col(t s^T) = s (x) t, matching the Sylvester vectorization
  Eigen::MatrixXd outer = t * s.transpose();
  Eigen::Map<const Eigen::VectorXd> u(outer.data(), outer.size());
  std::vector<Eigen::VectorXd> out;
  for (int J = std::abs(k - l); J <= k + l; ++J)
    out.push_back(basis_q_j(k, l, J).q_t.transpose() * u);
  return out;
}

/// Angular basis kernels W_J = unvec(q_t · Y^(J)), one (2l+1) x (2k+1)
/// matrix per J. Each satisfies W_J(R x) = D_l · W_J(x) · D_k^T.
inline std::vector<Eigen::MatrixXd> basis_kernels(const Eigen::Vector3d& direction, int k, int l) {
  std::vector<Eigen::MatrixXd> out;
  for (int J = std::abs(k - l); J <= k + l; ++J) {
    Eigen::VectorXd w = basis_q_j(k, l, J).q_t * sh_vector(J, direction);
    out.push_back(Eigen::Map<const Eigen::MatrixXd>(w.data(), 2 * l + 1, 2 * k + 1));
  }
  return out;
}

/// Per-edge precomputed angular data: raw spherical harmonics for
/// J = 0..2·max_degree and, for every (k,l) pair, the stacked basis kernels
/// laid out as (edges, num_bases, (2l+1)(2k+1)) with each W_J row-major.
struct EdgeBasis {
  std::size_t num_edges = 0;
  int max_degree = 0;
  std::map<int, ad::Array> sh;                     // J -> (E, 2J+1)
  std::map<std::pair<int, int>, ad::Array> stacks; // (k,l) -> (E, B, (2l+1)(2k+1))

  const ad::Array& stack(int k, int l) const {
    auto it = stacks.find({k, l});
    if (it == stacks.end())
      throw std::out_of_range("EdgeBasis: missing kernel stack for (" + std::to_string(k) + "," +
                              std::to_string(l) + ")");
    return it->second;
  }
};

inline EdgeBasis precompute_edge_basis(const GeometricGraph& graph, int max_degree) {
  EdgeBasis eb;
  eb.num_edges = graph.edges.size();
  eb.max_degree = max_degree;
  std::size_t E = eb.num_edges;
  for (int J = 0; J <= 2 * max_degree; ++J) eb.sh[J] = ad::Array::zeros({E, 2 * J + 1u});
  for (std::size_t e = 0; e < E; ++e) {
    const auto& edge = graph.edges[e];
    if (edge.dist < 1e-9)
      throw std::runtime_error("precompute_edge_basis: degenerate edge " + std::to_string(e));
    double theta = kPi - edge.sph.beta;
    AlpBatch batch(std::cos(theta));  // memo shared across all J for this edge
    for (int J = 0; J <= 2 * max_degree; ++J)
      for (int m = -J; m <= J; ++m)
        eb.sh[J].data[e * (2 * J + 1) + (m + J)] =
            detail::sh_element(J, m, theta, edge.sph.alpha, batch);
  }
  for (int k = 0; k <= max_degree; ++k)
    for (int l = 0; l <= max_degree; ++l) {
      std::size_t B = 2 * std::min(k, l) + 1u;
      std::size_t kl = (2 * l + 1u) * (2 * k + 1u);
      ad::Array st = ad::Array::zeros({E, B, kl});
      for (std::size_t b = 0; b < B; ++b) {
        int J = std::abs(k - l) + static_cast<int>(b);
        const Eigen::MatrixXd& q_t = basis_q_j(k, l, J).q_t;
        for (std::size_t e = 0; e < E; ++e) {
          Eigen::Map<const Eigen::VectorXd> y(eb.sh[J].data.data() + e * (2 * J + 1), 2 * J + 1);
          Eigen::VectorXd w = q_t * y;
          Eigen::Map<const Eigen::MatrixXd> wm(w.data(), 2 * l + 1, 2 * k + 1);
          for (int a = 0; a < 2 * l + 1; ++a)
            for (int c = 0; c < 2 * k + 1; ++c)
              st.data[(e * B + b) * kl + a * (2 * k + 1) + c] = wm(a, c);
        }
      }
      eb.stacks[{k, l}] = std::move(st);
    }
  return eb;
}

}  // namespace so3kit
