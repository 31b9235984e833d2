#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "so3kit/cg.hpp"
#include "so3kit/graph.hpp"
#include "so3kit/layers.hpp"
#include "so3kit/optim.hpp"
#include "so3kit/so3.hpp"

namespace so3kit {

using FeatureArrays = std::map<int, ad::Array>;

inline EulerAngles random_euler(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.0, 2 * kPi);
  double a = dist(rng), b = dist(rng), g = dist(rng);
  return {a, b, g};
}

/// Rigid motion of a graph: positions mapped to R p + t, edges rebuilt,
/// per-degree feature channels rotated by the matching Wigner-D.
inline GeometricGraph transform_graph(const GeometricGraph& g, const Rotation3& R,
                                      const Eigen::Vector3d& t = Eigen::Vector3d::Zero()) {
  GeometricGraph out;
  for (const auto& p : g.positions) out.positions.push_back(R * p + t);
  for (const auto& e : g.edges) {
    auto ne = detail::make_edge(out.positions, e.src, e.dst, e.bond);
    ne.scalars = e.scalars;
    ne.scalars[0] = ne.dist;
    out.edges.push_back(std::move(ne));
  }
  for (const auto& [deg, arr] : g.node_features) {
    if (deg == 0) {
      out.node_features[deg] = arr;
      continue;
    }
    Eigen::MatrixXd D = wigner_d(deg, R);
    std::size_t dim = 2 * deg + 1, rows = arr.size() / dim;
    ad::Array rot = ad::Array::zeros(arr.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      Eigen::Map<const Eigen::VectorXd> v(arr.data.data() + r * dim, dim);
      Eigen::Map<Eigen::VectorXd>(rot.data.data() + r * dim, dim) = D * v;
    }
    out.node_features[deg] = std::move(rot);
  }
  out.targets = g.targets;
  return out;
}

/// Relabels nodes: node i becomes perm[i].
inline GeometricGraph permute_graph(const GeometricGraph& g, const std::vector<std::size_t>& perm) {
  GeometricGraph out;
  out.positions.resize(g.num_nodes());
  for (std::size_t i = 0; i < g.num_nodes(); ++i) out.positions[perm[i]] = g.positions[i];
  for (const auto& [deg, arr] : g.node_features) {
    std::size_t inner = arr.size() / arr.shape[0];
    ad::Array p = ad::Array::zeros(arr.shape);
    for (std::size_t i = 0; i < g.num_nodes(); ++i)
      std::copy(arr.data.begin() + i * inner, arr.data.begin() + (i + 1) * inner,
                p.data.begin() + perm[i] * inner);
    out.node_features[deg] = std::move(p);
  }
  for (const auto& e : g.edges) {
    auto ne = detail::make_edge(out.positions, perm[e.src], perm[e.dst], e.bond);
    ne.scalars = e.scalars;
    out.edges.push_back(std::move(ne));
  }
  out.targets = g.targets;
  return out;
}

inline FeatureArrays rotate_features(const FeatureArrays& feats, const Rotation3& R) {
  FeatureArrays out;
  for (const auto& [deg, arr] : feats) {
    if (deg == 0) {
      out[deg] = arr;
      continue;
    }
    Eigen::MatrixXd D = wigner_d(deg, R);
    std::size_t dim = 2 * deg + 1, rows = arr.size() / dim;
    ad::Array rot = ad::Array::zeros(arr.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      Eigen::Map<const Eigen::VectorXd> v(arr.data.data() + r * dim, dim);
      Eigen::Map<Eigen::VectorXd>(rot.data.data() + r * dim, dim) = D * v;
    }
    out[deg] = std::move(rot);
  }
  return out;
}

// -------- equivariance audit --------

struct EquivarianceReport {
  struct Entry {
    std::string layer;
    int degree;
    double max_resid = 0;
    double mean_resid = 0;
    bool pass = true;
  };
  std::vector<Entry> entries;
  std::size_t trials = 0;
  double tol = 0;

  bool pass() const {
    for (const auto& e : entries)
      if (!e.pass) return false;
    return true;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["trials"] = trials;
    j["tol"] = tol;
    j["pass"] = pass();
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries)
      j["entries"].push_back({{"layer", e.layer},
                              {"degree", e.degree},
                              {"max_residual", e.max_resid},
                              {"mean_residual", e.mean_resid},
                              {"pass", e.pass}});
    return j;
  }
};

/// A layer under audit: plain arrays in, plain arrays out.
using LayerFn =
    std::function<FeatureArrays(const GeometricGraph&, const FeatureArrays&)>;

/// Rotates graph and inputs, runs the layer, and compares against the
/// Wigner-D-rotated reference output. Residuals are relative:
/// max|f(Rg) - D f(g)| / (1 + max|f(g)|), per degree.
inline EquivarianceReport check_equivariance(const std::string& name, const LayerFn& fn,
                                             const GeometricGraph& g, const FeatureArrays& feats,
                                             std::size_t trials, double tol,
                                             std::mt19937_64& rng) {
  EquivarianceReport rep;
  rep.trials = trials;
  rep.tol = tol;
  FeatureArrays base = fn(g, feats);
  std::map<int, EquivarianceReport::Entry> acc;
  for (const auto& [deg, arr] : base) {
    acc[deg] = {name, deg, 0.0, 0.0, true};
  }
  for (std::size_t trial = 0; trial < trials; ++trial) {
    EulerAngles ang = random_euler(rng);
    Rotation3 R = euler_to_rotation(ang);
    FeatureArrays rotated = fn(transform_graph(g, R), rotate_features(feats, R));
    FeatureArrays expected = rotate_features(base, R);
    for (const auto& [deg, arr] : base) {
      const ad::Array& got = rotated.at(deg);
      const ad::Array& want = expected.at(deg);
      double scale = 0;
      for (double v : arr.data) scale = std::max(scale, std::abs(v));
      double resid = 0;
      for (std::size_t i = 0; i < want.size(); ++i)
        resid = std::max(resid, std::abs(got.data[i] - want.data[i]));
      resid /= 1.0 + scale;
      acc[deg].max_resid = std::max(acc[deg].max_resid, resid);
      acc[deg].mean_resid += resid / trials;
    }
  }
  for (auto& [deg, e] : acc) {
    e.pass = e.max_resid <= tol;
    rep.entries.push_back(e);
  }
  return rep;
}

// -------- finite differences --------

/// Central differences of a deterministic scalar function over every entry
/// of every parameter. Mutates and restores the store in place.
inline std::map<std::string, ad::Array> finite_diff_grad(const std::function<double()>& f,
                                                         ad::ParameterStore& ps,
                                                         double step = 1e-5) {
  std::map<std::string, ad::Array> grads;
  for (auto& [name, p] : ps.items()) {
    ad::Array g = ad::Array::zeros(p.shape);
    for (std::size_t i = 0; i < p.size(); ++i) {
      double orig = p.data[i];
      p.data[i] = orig + step;
      double fp = f();
      p.data[i] = orig - step;
      double fm = f();
      p.data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_diff_grad: non-finite objective at " + name);
      g.data[i] = (fp - fm) / (2 * step);
    }
    grads.emplace(name, std::move(g));
  }
  return grads;
}

/// Same oracle restricted to chosen (parameter, flat index) entries.
inline double finite_diff_entry(const std::function<double()>& f, ad::ParameterStore& ps,
                                const std::string& name, std::size_t index, double step = 1e-5) {
  ad::Array& p = ps.at(name);
  double orig = p.data.at(index);
  p.data[index] = orig + step;
  double fp = f();
  p.data[index] = orig - step;
  double fm = f();
  p.data[index] = orig;
  if (!std::isfinite(fp) || !std::isfinite(fm))
    throw std::runtime_error("finite_diff_entry: non-finite objective at " + name);
  return (fp - fm) / (2 * step);
}

// -------- brute-force tensor-product oracle --------

/// Type-l component of Y^(J) (x) f^(k) by explicit triple loop over CG
/// entries; the independent check on the kernel assembly path.
inline Eigen::VectorXd brute_force_type_component(int J, const Eigen::VectorXd& Y, int k,
                                                  const Eigen::VectorXd& f, int l) {
  if (J < std::abs(k - l) || J > k + l)
    throw std::invalid_argument("brute_force_type_component: triangle violation");
  if (Y.size() != 2 * J + 1 || f.size() != 2 * k + 1)
    throw std::invalid_argument("brute_force_type_component: tensor length mismatch");
  const Eigen::MatrixXd& q_t = basis_q_j(k, l, J).q_t;
  int dl = 2 * l + 1;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dl);
  for (int ml = 0; ml < dl; ++ml)
    for (int mk = 0; mk < 2 * k + 1; ++mk)
      for (int m = 0; m < 2 * J + 1; ++m)
        out(ml) += q_t(mk * dl + ml, m) * Y(m) * f(mk);
  return out;
}

// -------- synthetic data --------

/// Random point clouds of 4-8 atoms with the invariant target
/// sum over pairs of z_i z_j / ||x_i - x_j||. Complete graphs via a large
/// cutoff.
inline std::vector<GeometricGraph> synthetic_dataset(std::size_t n_molecules, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> n_atoms(4, 8);
  std::uniform_int_distribution<std::size_t> species(0, qm9_species().size() - 1);
  std::uniform_real_distribution<double> coord(-2.0, 2.0);
  std::vector<GeometricGraph> out;
  for (std::size_t mi = 0; mi < n_molecules; ++mi) {
    Molecule mol;
    int n = n_atoms(rng);
    for (int i = 0; i < n; ++i) {
      Atom a;
      a.symbol = qm9_species()[species(rng)];
      // resample until comfortably separated from earlier atoms
      for (int attempt = 0;; ++attempt) {
        a.position = {coord(rng), coord(rng), coord(rng)};
        bool ok = true;
        for (const auto& b : mol.atoms)
          if ((b.position - a.position).norm() < 0.5) ok = false;
        if (ok || attempt > 200) break;
      }
      mol.atoms.push_back(a);
    }
    GeometricGraph g = build_graph(mol, BondSource::cutoff(100.0));
    double target = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        target += atomic_number(mol.atoms[i].symbol) * atomic_number(mol.atoms[j].symbol) /
                  (mol.atoms[i].position - mol.atoms[j].position).norm();
    g.targets["energy"] = target;
    out.push_back(std::move(g));
  }
  return out;
}

// -------- training --------

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 200;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;
  std::string optimizer = "adam";  // adam | sgd
  std::string checkpoint_path;

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
    if (c.optimizer != "adam" && c.optimizer != "sgd")
      throw std::invalid_argument("unknown optimizer: " + c.optimizer);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"model", model.to_json()}, {"epochs", epochs},       {"lr", lr},
            {"seed", seed},             {"batch_size", batch_size}, {"optimizer", optimizer},
            {"checkpoint_path", checkpoint_path}};
  }
};

struct TrainRun {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double lr = 0;
  std::vector<double> loss_trace;  // per-epoch full-set MSE on standardized targets
  double initial_mse = 0;
  double final_mse = 0;
  std::string checkpoint_path;

  nlohmann::json to_json() const {
    return {{"seed", seed},           {"epochs", epochs},       {"lr", lr},
            {"loss_trace", loss_trace}, {"initial_mse", initial_mse}, {"final_mse", final_mse},
            {"checkpoint", checkpoint_path}};
  }
};

namespace detail {
inline double graph_target(const GeometricGraph& g) {
  if (g.targets.empty()) throw std::invalid_argument("train: graph has no target");
  return g.targets.begin()->second;
}
}  // namespace detail

/// Mini-batch training on MSE against standardized targets. Deterministic:
/// seeded init, fixed sequential batches, fixed accumulation order.
inline TrainRun train(const std::vector<GeometricGraph>& dataset, const TrainConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  ad::ParameterStore ps;
  std::mt19937_64 rng(cfg.seed);
  init_model(ps, cfg.model, rng);

  double mean = 0, var = 0;
  for (const auto& g : dataset) mean += detail::graph_target(g);
  mean /= dataset.size();
  for (const auto& g : dataset) {
    double d = detail::graph_target(g) - mean;
    var += d * d;
  }
  double stddev = std::sqrt(var / dataset.size());
  if (stddev < 1e-12) stddev = 1.0;

  std::vector<EdgeBasis> bases;
  bases.reserve(dataset.size());
  for (const auto& g : dataset) bases.push_back(precompute_edge_basis(g, cfg.model.max_degree));

  auto forward = [&](std::size_t i, ad::Tape& tape) {
    LayerContext ctx{tape, ps};
    ad::Node pred = model_forward(ctx, cfg.model, dataset[i], bases[i]);
    double t = (detail::graph_target(dataset[i]) - mean) / stddev;
    ad::Node err = ad::sub(pred, tape.constant(ad::Array::scalar(t)));
    return ad::mul(err, err);
  };
  auto full_mse = [&]() {
    double acc = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      ad::Tape tape;
      acc += tape.val(forward(i, tape)).data[0];
    }
    return acc / dataset.size();
  };

  TrainRun run;
  run.seed = cfg.seed;
  run.epochs = cfg.epochs;
  run.lr = cfg.lr;
  run.initial_mse = full_mse();

  ad::AdamOptimizer adam;
  adam.lr = cfg.lr;
  ad::SgdOptimizer sgd;
  sgd.lr = cfg.lr;
  std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0;
    for (std::size_t start = 0; start < dataset.size(); start += bs) {
      std::size_t end = std::min(start + bs, dataset.size());
      std::map<std::string, ad::Array> grads;
      double batch_loss = 0;
      for (std::size_t i = start; i < end; ++i) {
        ad::Tape tape;
        ad::Node loss = forward(i, tape);
        batch_loss += tape.val(loss).data[0];
        tape.backward(loss);
        for (auto& [name, g] : tape.named_grads()) {
          auto [it, fresh] = grads.emplace(name, g);
          if (!fresh)
            for (std::size_t j = 0; j < g.size(); ++j) it->second.data[j] += g.data[j];
        }
      }
      double scale = 1.0 / (end - start);
      for (auto& [name, g] : grads)
        for (auto& v : g.data) v *= scale;
      if (cfg.optimizer == "adam")
        adam.step(ps, grads);
      else
        sgd.step(ps, grads);
      epoch_loss += batch_loss;
    }
    epoch_loss /= dataset.size();
    if (!std::isfinite(epoch_loss))
      throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch));
    run.loss_trace.push_back(epoch_loss);
  }

  run.final_mse = full_mse();
  if (!cfg.checkpoint_path.empty()) {
    nlohmann::json extra = {{"model_config", cfg.model.to_json()},
                            {"target_mean", mean},
                            {"target_std", stddev}};
    save_checkpoint(cfg.checkpoint_path, ps,
                    cfg.optimizer == "adam" ? &adam : nullptr, extra);
    run.checkpoint_path = cfg.checkpoint_path;
  }
  return run;
}

/// Inference with a trained checkpoint; undoes target standardization.
inline double predict(ad::Checkpoint& ck, const GeometricGraph& g) {
  ModelConfig cfg = ModelConfig::from_json(ck.extra.at("model_config"));
  EdgeBasis basis = precompute_edge_basis(g, cfg.max_degree);
  ad::Tape tape;
  LayerContext ctx{tape, ck.params};
  ad::Node pred = model_forward(ctx, cfg, g, basis);
  double y = tape.val(pred).data[0];
  double mean = ck.extra.value("target_mean", 0.0);
  double stddev = ck.extra.value("target_std", 1.0);
  return y * stddev + mean;
}

}  // namespace so3kit
