#pragma once

#include <Eigen/Dense>
#include <cctype>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "so3kit/array.hpp"
#include "so3kit/so3.hpp"

namespace so3kit {

enum class BondType { single, double_, triple, aromatic, none };

inline std::string bond_name(BondType b) {
  switch (b) {
    case BondType::single: return "single";
    case BondType::double_: return "double";
    case BondType::triple: return "triple";
    case BondType::aromatic: return "aromatic";
    case BondType::none: return "none";
  }
  return "none";
}

inline BondType bond_from_name(const std::string& s) {
  if (s == "single") return BondType::single;
  if (s == "double") return BondType::double_;
  if (s == "triple") return BondType::triple;
  if (s == "aromatic") return BondType::aromatic;
  if (s == "none") return BondType::none;
  throw std::invalid_argument("unknown bond type: " + s);
}

inline const std::vector<std::string>& qm9_species() {
  static const std::vector<std::string> s = {"H", "C", "N", "O", "F"};
  return s;
}

inline int atomic_number(const std::string& symbol) {
  static const std::map<std::string, int> table = {
      {"H", 1}, {"C", 6}, {"N", 7}, {"O", 8}, {"F", 9}};
  auto it = table.find(symbol);
  if (it == table.end()) throw std::invalid_argument("unknown species: " + symbol);
  return it->second;
}

struct Atom {
  std::string symbol;
  Eigen::Vector3d position;
  std::optional<double> charge;
};

struct Bond {
  std::size_t i, j;
  BondType type = BondType::single;
};

struct Molecule {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
  std::vector<double> properties;
};

namespace detail {

/// QM9 files write some exponents as `*^`; normalize to standard notation.
inline std::string normalize_exponent(std::string tok) {
  auto pos = tok.find("*^");
  if (pos != std::string::npos) tok.replace(pos, 2, "e");
  return tok;
}

inline double parse_double(const std::string& tok, int line_no) {
  std::string norm = normalize_exponent(tok);
  std::size_t used = 0;
  double v;
  try {
    v = std::stod(norm, &used);
  } catch (const std::exception&) {
    throw std::runtime_error("parse error at line " + std::to_string(line_no) +
                             ": malformed float '" + tok + "'");
  }
  if (used != norm.size())
    throw std::runtime_error("parse error at line " + std::to_string(line_no) +
                             ": malformed float '" + tok + "'");
  return v;
}

}  // namespace detail

/// QM9-style XYZ: line 1 atom count, line 2 whitespace-separated properties
/// (non-numeric tokens skipped), then one `symbol x y z [charge]` line per
/// atom. Trailing lines (frequencies, SMILES) are ignored.
inline Molecule parse_qm9_xyz(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  auto next_line = [&](const char* what) {
    if (!std::getline(is, line))
      throw std::runtime_error("parse error at line " + std::to_string(line_no + 1) +
                               ": expected " + std::string(what));
    ++line_no;
  };
  next_line("atom count");
  std::size_t count = 0;
  {
    std::istringstream ls(line);
    long long c = -1;
    if (!(ls >> c) || c < 1)
      throw std::runtime_error("parse error at line 1: bad atom count");
    count = static_cast<std::size_t>(c);
  }
  next_line("property line");
  Molecule mol;
  {
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      try {
        mol.properties.push_back(detail::parse_double(tok, line_no));
      } catch (const std::runtime_error&) {
        // non-numeric tag (e.g. dataset name); skip
      }
    }
  }
  for (std::size_t a = 0; a < count; ++a) {
    next_line("atom line");
    std::istringstream ls(line);
    std::string sym, xs, ys, zs, cs;
    if (!(ls >> sym >> xs >> ys >> zs))
      throw std::runtime_error("parse error at line " + std::to_string(line_no) +
                               ": expected atom line");
    Atom atom;
    atom.symbol = sym;
    atomic_number(sym);  // validates species
    atom.position = {detail::parse_double(xs, line_no), detail::parse_double(ys, line_no),
                     detail::parse_double(zs, line_no)};
    if (ls >> cs) atom.charge = detail::parse_double(cs, line_no);
    mol.atoms.push_back(std::move(atom));
  }
  return mol;
}

/// Node positions plus per-degree feature arrays (shape (N, m, 2d+1)) and
/// directed edges with precomputed geometry. Displacement is destination
/// position minus source position.
struct GeometricGraph {
  std::vector<Eigen::Vector3d> positions;
  std::map<int, ad::Array> node_features;
  struct Edge {
    std::size_t src, dst;
    Eigen::Vector3d disp;
    double dist;
    SphericalAngles sph;
    std::vector<double> scalars;  // [distance, bond one-hot x4]
    BondType bond = BondType::none;
  };
  std::vector<Edge> edges;
  std::map<std::string, double> targets;

  std::size_t num_nodes() const { return positions.size(); }

  std::vector<std::size_t> edge_src() const {
    std::vector<std::size_t> v;
    v.reserve(edges.size());
    for (const auto& e : edges) v.push_back(e.src);
    return v;
  }
  std::vector<std::size_t> edge_dst() const {
    std::vector<std::size_t> v;
    v.reserve(edges.size());
    for (const auto& e : edges) v.push_back(e.dst);
    return v;
  }
};

namespace detail {

inline GeometricGraph::Edge make_edge(const std::vector<Eigen::Vector3d>& pos, std::size_t src,
                                      std::size_t dst, BondType bond) {
  GeometricGraph::Edge e;
  e.src = src;
  e.dst = dst;
  e.disp = pos[dst] - pos[src];
  e.dist = e.disp.norm();
  if (e.dist < 1e-9)
    throw std::runtime_error("degenerate edge between coincident atoms " + std::to_string(src) +
                             " and " + std::to_string(dst));
  e.sph = cart_to_spherical(e.disp);
  e.bond = bond;
  e.scalars = {e.dist, 0, 0, 0, 0};
  if (bond != BondType::none) e.scalars[1 + static_cast<int>(bond)] = 1.0;
  return e;
}

}  // namespace detail

struct BondSource {
  enum class Mode { explicit_bonds, cutoff } mode = Mode::explicit_bonds;
  double radius = 0;  // Angstrom, cutoff mode only

  static BondSource explicit_bonds() { return BondSource{Mode::explicit_bonds, 0}; }
  static BondSource cutoff(double radius) { return BondSource{Mode::cutoff, radius}; }
};

inline GeometricGraph build_graph(const Molecule& mol, const BondSource& src) {
  GeometricGraph g;
  std::size_t n = mol.atoms.size();
  for (const auto& a : mol.atoms) g.positions.push_back(a.position);
  // 6 type-0 channels: 5-dim species one-hot plus atomic number
  ad::Array feats = ad::Array::zeros({n, 6, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& sp = qm9_species();
    for (std::size_t s = 0; s < sp.size(); ++s)
      if (mol.atoms[i].symbol == sp[s]) feats.data[i * 6 + s] = 1.0;
    feats.data[i * 6 + 5] = atomic_number(mol.atoms[i].symbol);
  }
  g.node_features[0] = std::move(feats);
  if (src.mode == BondSource::Mode::explicit_bonds) {
    if (mol.bonds.empty() && n > 1)
      throw std::invalid_argument("build_graph: explicit mode requires a bond list");
    for (const auto& b : mol.bonds) {
      if (b.i >= n || b.j >= n || b.i == b.j)
        throw std::invalid_argument("build_graph: bad bond endpoints");
      g.edges.push_back(detail::make_edge(g.positions, b.i, b.j, b.type));
      g.edges.push_back(detail::make_edge(g.positions, b.j, b.i, b.type));
    }
  } else {
    if (!(src.radius > 0)) throw std::invalid_argument("build_graph: cutoff radius must be > 0");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if ((g.positions[j] - g.positions[i]).norm() <= src.radius) {
          g.edges.push_back(detail::make_edge(g.positions, i, j, BondType::none));
          g.edges.push_back(detail::make_edge(g.positions, j, i, BondType::none));
        }
  }
  return g;
}

// -------- graph JSON schema, version 1 --------
// { "version":1, "positions":[[x,y,z],...],
//   "node_features":{"0":[[per-node m*(2d+1) floats],...]},
//   "edges":[{"src":i,"dst":j,"bond":"single"}],
//   "targets":{"name":value} }

inline nlohmann::json save_graph_json(const GeometricGraph& g) {
  nlohmann::json j;
  j["version"] = 1;
  j["positions"] = nlohmann::json::array();
  for (const auto& p : g.positions) j["positions"].push_back({p.x(), p.y(), p.z()});
  j["node_features"] = nlohmann::json::object();
  for (const auto& [deg, arr] : g.node_features) {
    if (arr.rank() != 3 || arr.shape[0] != g.num_nodes())
      throw std::invalid_argument("save_graph_json: feature array shape mismatch");
    std::size_t per = arr.shape[1] * arr.shape[2];
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < g.num_nodes(); ++i)
      rows.push_back(std::vector<double>(arr.data.begin() + i * per,
                                         arr.data.begin() + (i + 1) * per));
    j["node_features"][std::to_string(deg)] = std::move(rows);
  }
  j["edges"] = nlohmann::json::array();
  // one entry per undirected pair; the reverse edge is implied
  for (const auto& e : g.edges)
    if (e.src < e.dst)
      j["edges"].push_back({{"src", e.src}, {"dst", e.dst}, {"bond", bond_name(e.bond)}});
  j["targets"] = g.targets;
  return j;
}

inline GeometricGraph load_graph_json(const nlohmann::json& j) {
  auto require = [&j](const char* key) -> const nlohmann::json& {
    if (!j.contains(key))
      throw std::runtime_error(std::string("graph json: missing key at /") + key);
    return j.at(key);
  };
  if (require("version").get<int>() != 1)
    throw std::runtime_error("graph json: unsupported version at /version");
  GeometricGraph g;
  const auto& pos = require("positions");
  if (!pos.is_array()) throw std::runtime_error("graph json: expected array at /positions");
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const auto& p = pos[i];
    if (!p.is_array() || p.size() != 3)
      throw std::runtime_error("graph json: expected [x,y,z] at /positions/" + std::to_string(i));
    g.positions.emplace_back(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
  }
  const auto& nf = require("node_features");
  for (auto it = nf.begin(); it != nf.end(); ++it) {
    int deg = std::stoi(it.key());
    const auto& rows = it.value();
    if (!rows.is_array() || rows.size() != g.num_nodes())
      throw std::runtime_error("graph json: feature row count mismatch at /node_features/" +
                               it.key());
    std::size_t width = rows.empty() ? 0 : rows[0].size();
    std::size_t dim = 2 * static_cast<std::size_t>(deg) + 1;
    if (width % dim != 0)
      throw std::runtime_error("graph json: feature width not a multiple of 2d+1 at"
                               " /node_features/" + it.key());
    ad::Array arr = ad::Array::zeros({g.num_nodes(), width / dim, dim});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != width)
        throw std::runtime_error("graph json: ragged feature rows at /node_features/" + it.key() +
                                 "/" + std::to_string(i));
      for (std::size_t c = 0; c < width; ++c) arr.data[i * width + c] = rows[i][c].get<double>();
    }
    g.node_features[deg] = std::move(arr);
  }
  for (std::size_t i = 0; i < require("edges").size(); ++i) {
    const auto& e = j["edges"][i];
    auto ptr = "/edges/" + std::to_string(i);
    for (const char* k : {"src", "dst", "bond"})
      if (!e.contains(k))
        throw std::runtime_error("graph json: missing key at " + ptr + "/" + k);
    std::size_t src = e["src"].get<std::size_t>();
    std::size_t dst = e["dst"].get<std::size_t>();
    if (src >= g.num_nodes() || dst >= g.num_nodes() || src == dst)
      throw std::runtime_error("graph json: bad edge endpoints at " + ptr);
    BondType bond = bond_from_name(e["bond"].get<std::string>());
    g.edges.push_back(detail::make_edge(g.positions, src, dst, bond));
    g.edges.push_back(detail::make_edge(g.positions, dst, src, bond));
  }
  if (j.contains("targets"))
    for (auto it = j["targets"].begin(); it != j["targets"].end(); ++it)
      g.targets[it.key()] = it.value().get<double>();
  return g;
}

}  // namespace so3kit
