// so3kit command line: CG tables, spherical harmonic evaluation, property
// checks, training, and inference behind one binary.
//
// Exit codes: 0 success, 1 property failure, 2 configuration/usage error.

#include <so3kit/harness.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace so3kit;
namespace fs = std::filesystem;

namespace {

int thread_cap() {
  if (const char* env = std::getenv("SO3KIT_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

void print_config(const nlohmann::json& resolved) {
  nlohmann::json j = resolved;
  j["threads"] = thread_cap();
  std::cerr << "config: " << j.dump() << "\n";
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int run_cg_table(int max_degree, const std::string& out_path) {
  print_config({{"command", "cg-table"}, {"max_degree", max_degree}, {"out", out_path}});
  std::ofstream out(out_path);
  if (!out.good()) throw std::runtime_error("cannot write " + out_path);
  for (int k = 0; k <= max_degree; ++k)
    for (int l = 0; l <= max_degree; ++l)
      for (int J = std::abs(k - l); J <= k + l; ++J) {
        const CGBlock& b = basis_q_j(k, l, J);
        nlohmann::json row = {{"k", k},
                              {"l", l},
                              {"J", J},
                              {"rows", b.q_t.rows()},
                              {"cols", b.q_t.cols()}};
        std::vector<double> data;
        data.reserve(static_cast<std::size_t>(b.q_t.size()));
        for (Eigen::Index r = 0; r < b.q_t.rows(); ++r)
          for (Eigen::Index c = 0; c < b.q_t.cols(); ++c) data.push_back(b.q_t(r, c));
        row["data"] = data;
        out << row.dump() << "\n";
      }
  return 0;
}

int run_sh_eval(int degree, const std::string& dir_csv) {
  print_config({{"command", "sh-eval"}, {"degree", degree}, {"dir", dir_csv}});
  Eigen::Vector3d dir;
  {
    std::stringstream ss(dir_csv);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',') && i < 3) dir(i++) = std::stod(tok);
    if (i != 3) throw std::invalid_argument("--dir expects x,y,z");
  }
  if (dir.norm() < 1e-12 || !dir.allFinite()) {
    std::cerr << "error: degenerate direction (zero or non-finite vector)\n";
    return 2;
  }
  dir.normalize();
  Eigen::VectorXd y = sh_vector(degree, dir);
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (i) std::printf(" ");
    std::printf("%.7g", y(i));
  }
  std::printf("\n");
  return 0;
}

GeometricGraph make_check_graph(std::mt19937_64& rng, int n_atoms) {
  std::uniform_int_distribution<std::size_t> species(0, qm9_species().size() - 1);
  std::uniform_real_distribution<double> coord(-2.0, 2.0);
  Molecule mol;
  for (int i = 0; i < n_atoms; ++i) {
    Atom a;
    a.symbol = qm9_species()[species(rng)];
    for (int attempt = 0;; ++attempt) {
      a.position = {coord(rng), coord(rng), coord(rng)};
      bool ok = true;
      for (const auto& b : mol.atoms)
        if ((b.position - a.position).norm() < 0.7) ok = false;
      if (ok || attempt > 200) break;
    }
    mol.atoms.push_back(a);
  }
  return build_graph(mol, BondSource::cutoff(100.0));
}

constexpr std::size_t kEdgeScalarDim = 5;

FeatureArrays random_feats(const Fiber& fib, std::size_t n, std::mt19937_64& rng) {
  FeatureArrays out;
  for (const auto& e : fib.entries)
    out[e.degree] = ad::random_normal({n, e.multiplicity, 2 * e.degree + 1u}, 0.0, 1.0, rng);
  return out;
}

int run_check(const std::string& target, std::size_t trials, double tol,
              const std::string& report_path) {
  print_config({{"command", "check"},
                {"target", target},
                {"trials", trials},
                {"tol", tol},
                {"report", report_path}});
  std::mt19937_64 rng(0x50f7);
  nlohmann::json report = {{"target", target}, {"trials", trials}, {"tol", tol}};
  bool pass = true;
  double worst = 0;

  if (target == "math") {
    std::uniform_real_distribution<double> ang(0.0, 2 * kPi);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t t = 0; t < trials; ++t) {
      Rotation3 R = euler_to_rotation({ang(rng), ang(rng), ang(rng)});
      Eigen::Vector3d x{nd(rng), nd(rng), nd(rng)};
      x.normalize();
      for (int l = 0; l <= 4; ++l) {
        Eigen::VectorXd y = sh_vector(l, x);
        Eigen::Vector3d rx = R * x;
        rx.normalize();
        double resid = (sh_vector(l, rx) - wigner_d(l, R) * y).norm() / (1 + y.norm());
        worst = std::max(worst, resid);
      }
      for (int k = 0; k <= 2; ++k)
        for (int l = 0; l <= 2; ++l) {
          EulerAngles a{ang(rng), ang(rng), ang(rng)};
          Eigen::MatrixXd Q = full_q(k, l);
          int n = (2 * k + 1) * (2 * l + 1);
          Eigen::MatrixXd bd = Eigen::MatrixXd::Zero(n, n);
          int row = 0;
          for (int J = std::abs(k - l); J <= k + l; ++J) {
            bd.block(row, row, 2 * J + 1, 2 * J + 1) = wigner_d(J, a);
            row += 2 * J + 1;
          }
          double resid = (kron(wigner_d(k, a), wigner_d(l, a)) - Q.transpose() * bd * Q)
                             .cwiseAbs()
                             .maxCoeff();
          worst = std::max(worst, resid);
        }
    }
    pass = worst <= tol;
    report["max_residual"] = worst;
  } else if (target == "tfn" || target == "attention") {
    Fiber fib = Fiber::uniform(2, 2);
    ad::ParameterStore ps;
    LayerFn fn;
    if (target == "tfn") {
      init_tfn(ps, "tfn", fib, fib, kEdgeScalarDim, SelfInteraction::linear, rng);
      fn = [&](const GeometricGraph& g, const FeatureArrays& feats) {
        EdgeBasis eb = precompute_edge_basis(g, 2);
        ad::Tape tape;
        LayerContext ctx{tape, ps};
        DegreeMap fmap;
        for (const auto& [deg, arr] : feats) fmap[deg] = ctx.constant(arr);
        DegreeMap out = tfn_layer(ctx, g, eb, fmap, fib, fib, "tfn",
                                  ctx.constant(edge_scalar_array(g, kEdgeScalarDim)),
                                  SelfInteraction::linear);
        FeatureArrays res;
        for (const auto& [deg, node] : out) res[deg] = tape.val(node);
        return res;
      };
    } else {
      AttentionCfg acfg{2, 1.0, XijMode::cat};
      init_attention(ps, "att", fib, fib, acfg, kEdgeScalarDim, rng);
      fn = [&, acfg](const GeometricGraph& g, const FeatureArrays& feats) {
        EdgeBasis eb = precompute_edge_basis(g, 2);
        ad::Tape tape;
        LayerContext ctx{tape, ps};
        DegreeMap fmap;
        for (const auto& [deg, arr] : feats) fmap[deg] = ctx.constant(arr);
        DegreeMap out = attention_block(ctx, g, eb, fmap, fib, fib, acfg, "att",
                                        ctx.constant(edge_scalar_array(g, kEdgeScalarDim)));
        FeatureArrays res;
        for (const auto& [deg, node] : out) res[deg] = tape.val(node);
        return res;
      };
    }
    GeometricGraph g = make_check_graph(rng, 5);
    FeatureArrays feats = random_feats(fib, g.num_nodes(), rng);
    auto rep = check_equivariance(target, fn, g, feats, trials, tol, rng);
    for (const auto& e : rep.entries) worst = std::max(worst, e.max_resid);
    pass = rep.pass();
    report = rep.to_json();
    report["target"] = target;
  } else if (target == "model") {
    ModelConfig cfg;
    cfg.max_degree = 1;
    cfg.num_blocks = 2;
    cfg.num_channels = 4;
    cfg.n_heads = 2;
    cfg.div = 1;
    cfg.decoder_channels = 8;
    ad::ParameterStore ps;
    init_model(ps, cfg, rng);
    for (std::size_t t = 0; t < trials; ++t) {
      GeometricGraph g = make_check_graph(rng, 5);
      EdgeBasis eb = precompute_edge_basis(g, cfg.max_degree);
      ad::Tape tape;
      LayerContext ctx{tape, ps};
      double y = tape.val(model_forward(ctx, cfg, g, eb)).data[0];
      Rotation3 R = euler_to_rotation(random_euler(rng));
      GeometricGraph rg = transform_graph(g, R, Eigen::Vector3d(0.3, -0.8, 1.1));
      EdgeBasis reb = precompute_edge_basis(rg, cfg.max_degree);
      ad::Tape rtape;
      LayerContext rctx{rtape, ps};
      double yr = rtape.val(model_forward(rctx, cfg, rg, reb)).data[0];
      worst = std::max(worst, std::abs(yr - y) / (1 + std::abs(y)));
    }
    pass = worst <= tol;
    report["max_residual"] = worst;
  } else {
    throw CLI::ValidationError("--target must be one of math|tfn|attention|model");
  }

  report["pass"] = pass;
  if (!report_path.empty()) {
    std::ofstream f(report_path);
    f << report.dump(2) << "\n";
  }
  std::cout << report.dump() << "\n";
  return pass ? 0 : 1;
}

std::vector<GeometricGraph> load_dataset(const std::string& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    auto ext = entry.path().extension().string();
    if (ext == ".xyz" || ext == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::invalid_argument("no .xyz or .json files in " + dir);
  std::vector<GeometricGraph> out;
  for (const auto& p : files) {
    if (p.extension() == ".json") {
      out.push_back(load_graph_json(nlohmann::json::parse(read_file(p.string()))));
    } else {
      Molecule m = parse_qm9_xyz(read_file(p.string()));
      GeometricGraph g = build_graph(m, BondSource::cutoff(100.0));
      if (m.properties.empty())
        throw std::invalid_argument(p.string() + ": no property line to use as target");
      g.targets["energy"] = m.properties.front();
      out.push_back(std::move(g));
    }
  }
  return out;
}

int run_train(const std::string& data_dir, const std::string& config_path, std::uint64_t seed,
              bool seed_given) {
  TrainConfig cfg;
  if (!config_path.empty())
    cfg = TrainConfig::from_json(nlohmann::json::parse(read_file(config_path)));
  if (seed_given) cfg.seed = seed;  // flag overrides file
  print_config({{"command", "train"},
                {"data", data_dir},
                {"config", config_path},
                {"resolved", cfg.to_json()}});
  auto dataset = load_dataset(data_dir);
  TrainRun run = train(dataset, cfg);
  std::cout << run.to_json().dump() << "\n";
  return 0;
}

int run_predict(const std::string& checkpoint_path, const std::string& input_path) {
  print_config(
      {{"command", "predict"}, {"checkpoint", checkpoint_path}, {"input", input_path}});
  ad::Checkpoint ck = ad::load_checkpoint(checkpoint_path);
  GeometricGraph g = load_graph_json(nlohmann::json::parse(read_file(input_path)));
  std::printf("%.17g\n", predict(ck, g));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"so3kit: SO(3)-equivariant graph network toolkit"};
  app.require_subcommand(1);

  auto* cg = app.add_subcommand("cg-table", "emit Clebsch-Gordan blocks as JSON lines");
  int max_degree = 3;
  std::string cg_out = "cg_table.jsonl";
  cg->add_option("--max-degree", max_degree, "largest input degree")->check(CLI::Range(0, 6));
  cg->add_option("--out", cg_out, "output file");

  auto* sh = app.add_subcommand("sh-eval", "evaluate a real spherical harmonic vector");
  int sh_degree = 0;
  std::string sh_dir = "0,0,1";
  sh->add_option("--degree", sh_degree, "harmonic degree J")->check(CLI::Range(0, 10));
  sh->add_option("--dir", sh_dir, "direction as x,y,z");

  auto* chk = app.add_subcommand("check", "run a property suite");
  std::string target = "math", report_path;
  std::size_t trials = 10;
  double tol = 1e-7;
  chk->add_option("--target", target, "math|tfn|attention|model");
  chk->add_option("--trials", trials, "number of random trials");
  chk->add_option("--tol", tol, "residual tolerance");
  chk->add_option("--report", report_path, "write a JSON report here");

  auto* tr = app.add_subcommand("train", "train on a directory of molecules/graphs");
  std::string data_dir, config_path;
  std::uint64_t seed = 0;
  tr->add_option("--data", data_dir, "directory of .xyz or graph .json files")->required();
  tr->add_option("--config", config_path, "JSON training config");
  auto* seed_opt = tr->add_option("--seed", seed, "RNG seed (overrides config file)");

  auto* pr = app.add_subcommand("predict", "predict one scalar from a saved graph");
  std::string ck_path, input_path;
  pr->add_option("--checkpoint", ck_path, "trained checkpoint file")->required();
  pr->add_option("--input", input_path, "graph JSON file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (cg->parsed()) return run_cg_table(max_degree, cg_out);
    if (sh->parsed()) return run_sh_eval(sh_degree, sh_dir);
    if (chk->parsed()) return run_check(target, trials, tol, report_path);
    if (tr->parsed()) return run_train(data_dir, config_path, seed, seed_opt->count() > 0);
    if (pr->parsed()) return run_predict(ck_path, input_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
