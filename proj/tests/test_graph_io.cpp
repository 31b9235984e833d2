#include <catch2/catch_amalgamated.hpp>

#include <so3kit/graph.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

using namespace so3kit;

#ifndef TEST_DATA_DIR
#define TEST_DATA_DIR "tests/data"
#endif

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// FNV-1a 64 over a canonical rendering of the parsed molecule
std::uint64_t structural_hash(const Molecule& m) {
  std::ostringstream os;
  os << m.atoms.size() << ";" << m.properties.size() << ";";
  for (double p : m.properties) {
    char b[40];
    std::snprintf(b, sizeof b, "%.12g", p);
    os << b << ";";
  }
  for (const auto& a : m.atoms) {
    char b[128];
    std::snprintf(b, sizeof b, "%s:%.12g:%.12g:%.12g:%.12g;", a.symbol.c_str(), a.position.x(),
                  a.position.y(), a.position.z(), a.charge.value_or(0.0));
    os << b;
  }
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

TEST_CASE("parse_qm9_xyz basics") {
  Molecule m = parse_qm9_xyz("1\nfree atom\nH\t0.1\t-0.2\t0.3\n");
  REQUIRE(m.atoms.size() == 1);
  REQUIRE(m.atoms[0].symbol == "H");
  REQUIRE(m.atoms[0].position.y() == -0.2);
  REQUIRE_FALSE(m.atoms[0].charge.has_value());

  // *^ exponent normalization
  Molecule e = parse_qm9_xyz("1\ntag\t1.2*^-3\nC\t0\t0\t0\t-4.5*^-2\n");
  REQUIRE(e.properties.size() == 1);
  REQUIRE(e.properties[0] == 0.0012);
  REQUIRE(e.atoms[0].charge.value() == -0.045);
}

TEST_CASE("parse errors carry line numbers") {
  // atom count 5 but only 4 atom lines: failure surfaces at line 7
  std::string text = "5\nprops\nH 0 0 0\nH 1 0 0\nH 0 1 0\nH 0 0 1\n";
  try {
    parse_qm9_xyz(text);
    FAIL("expected parse error");
  } catch (const std::runtime_error& err) {
    REQUIRE(std::string(err.what()).find("line 7") != std::string::npos);
  }

  REQUIRE_THROWS_AS(parse_qm9_xyz("1\np\nXx 0 0 0\n"), std::invalid_argument);  // species
  REQUIRE_THROWS_AS(parse_qm9_xyz("1\np\nH zero 0 0\n"), std::runtime_error);  // float
  REQUIRE_THROWS_AS(parse_qm9_xyz("0\np\n"), std::runtime_error);              // count
}

TEST_CASE("corpus of 20 QM9-format files parses to golden hashes") {
  const std::map<std::string, std::uint64_t> golden = {
      {"mol_00.xyz", 0x9bc37b782020badeull}, {"mol_01.xyz", 0xcb3d5c9dd794d2c9ull},
      {"mol_02.xyz", 0x727be445fead3a09ull}, {"mol_03.xyz", 0x675921b1946c4acfull},
      {"mol_04.xyz", 0x5129de7a4552059aull}, {"mol_05.xyz", 0xf1bf8a33a1b2b9ceull},
      {"mol_06.xyz", 0x43b51e0cf6e427a1ull}, {"mol_07.xyz", 0xd7e7e48475ddc86full},
      {"mol_08.xyz", 0xc2e8c7790fc9e67eull}, {"mol_09.xyz", 0x47035663b524e292ull},
      {"mol_10.xyz", 0xc00e527e64475044ull}, {"mol_11.xyz", 0x435c5827eed60417ull},
      {"mol_12.xyz", 0x826f8def33f0892dull}, {"mol_13.xyz", 0x50a698e00da2f0a4ull},
      {"mol_14.xyz", 0x1849165431f6b3b1ull}, {"mol_15.xyz", 0x3655b5f725414a1full},
      {"mol_16.xyz", 0xcc8a1f0af9c2f500ull}, {"mol_17.xyz", 0x93c4cf909336630bull},
      {"mol_18.xyz", 0x9eacc452eca22e3bull}, {"mol_19.xyz", 0x7ae35fe4c7ff02d3ull}};
  for (const auto& [name, want] : golden) {
    Molecule m = parse_qm9_xyz(read_file(std::string(TEST_DATA_DIR) + "/" + name));
    INFO(name);
    REQUIRE(structural_hash(m) == want);
  }
}

TEST_CASE("build_graph geometry and features") {
  Molecule diatomic;
  diatomic.atoms = {{"H", {0, 0, 0}, {}}, {"F", {0.9, 0, 0}, {}}};
  diatomic.bonds = {{0, 1, BondType::single}};
  GeometricGraph g = build_graph(diatomic, BondSource::explicit_bonds());
  REQUIRE(g.edges.size() == 2);
  REQUIRE((g.edges[0].disp + g.edges[1].disp).norm() == 0.0);
  REQUIRE(g.edges[0].dist == g.edges[1].dist);
  REQUIRE(g.edges[0].scalars == std::vector<double>{0.9, 1, 0, 0, 0});

  // methane: 4 explicit bonds -> 8 directed edges; carbon feature row
  Molecule methane;
  methane.atoms = {{"C", {0, 0, 0}, {}},
                   {"H", {0.63, 0.63, 0.63}, {}},
                   {"H", {-0.63, -0.63, 0.63}, {}},
                   {"H", {-0.63, 0.63, -0.63}, {}},
                   {"H", {0.63, -0.63, -0.63}, {}}};
  for (std::size_t h = 1; h <= 4; ++h) methane.bonds.push_back({0, h, BondType::single});
  GeometricGraph gm = build_graph(methane, BondSource::explicit_bonds());
  REQUIRE(gm.edges.size() == 8);
  const ad::Array& f = gm.node_features.at(0);
  REQUIRE(f.shape == std::vector<std::size_t>{5, 6, 1});
  REQUIRE(f.data[0] == 0.0);  // H slot
  REQUIRE(f.data[1] == 1.0);  // C one-hot
  REQUIRE(f.data[5] == 6.0);  // atomic number
  REQUIRE(f.data[6] == 1.0);  // first hydrogen's H slot
  REQUIRE(f.data[11] == 1.0);

  // cutoff below every pair distance: no edges
  GeometricGraph sparse = build_graph(methane, BondSource::cutoff(0.5));
  REQUIRE(sparse.edges.empty());

  Molecule unbonded;
  unbonded.atoms = methane.atoms;
  REQUIRE_THROWS_AS(build_graph(unbonded, BondSource::explicit_bonds()), std::invalid_argument);

  Molecule coincident;
  coincident.atoms = {{"H", {0, 0, 0}, {}}, {"H", {0, 0, 0}, {}}};
  coincident.bonds = {{0, 1, BondType::single}};
  REQUIRE_THROWS_AS(build_graph(coincident, BondSource::explicit_bonds()), std::runtime_error);
}

TEST_CASE("reverse edges negate displacements exactly") {
  Molecule m;
  m.atoms = {{"C", {0.12, -0.7, 1.1}, {}}, {"N", {1.4, 0.2, -0.3}, {}}, {"O", {-1.0, 0.9, 0.4}, {}}};
  GeometricGraph g = build_graph(m, BondSource::cutoff(10.0));
  REQUIRE(g.edges.size() == 6);
  for (const auto& e : g.edges) {
    bool found = false;
    for (const auto& r : g.edges)
      if (r.src == e.dst && r.dst == e.src) {
        found = true;
        REQUIRE((r.disp + e.disp).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(r.dist == e.dist);
      }
    REQUIRE(found);
  }
}

TEST_CASE("graph json round-trips bit exactly") {
  Molecule m;
  m.atoms = {{"C", {0.1, -0.25, 1.0 / 3.0}, {}}, {"O", {1.2345678901234, 0.2, -0.3}, {}}};
  m.bonds = {{0, 1, BondType::double_}};
  GeometricGraph g = build_graph(m, BondSource::explicit_bonds());
  g.targets["energy"] = -0.125;

  nlohmann::json j = save_graph_json(g);
  GeometricGraph back = load_graph_json(j);
  REQUIRE(back.num_nodes() == 2);
  for (std::size_t i = 0; i < 2; ++i)
    REQUIRE((back.positions[i] - g.positions[i]).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(back.node_features.at(0).data == g.node_features.at(0).data);
  REQUIRE(back.edges.size() == 2);
  REQUIRE(back.edges[0].bond == BondType::double_);
  REQUIRE(back.edges[0].scalars == g.edges[0].scalars);
  REQUIRE(back.targets.at("energy") == -0.125);
  // serialize again: identical JSON
  REQUIRE(save_graph_json(back).dump() == j.dump());

  // 0-edge graph round-trips
  GeometricGraph lone;
  lone.positions = {Eigen::Vector3d(1, 2, 3)};
  lone.node_features[0] = ad::Array::zeros({1, 6, 1});
  GeometricGraph lback = load_graph_json(save_graph_json(lone));
  REQUIRE(lback.num_nodes() == 1);
  REQUIRE(lback.edges.empty());
}

TEST_CASE("graph json schema errors name the offending pointer") {
  nlohmann::json j = {{"version", 1}, {"node_features", nlohmann::json::object()},
                      {"edges", nlohmann::json::array()}};
  try {
    load_graph_json(j);
    FAIL("expected schema error");
  } catch (const std::runtime_error& err) {
    REQUIRE(std::string(err.what()).find("/positions") != std::string::npos);
  }

  nlohmann::json bad_ver = {{"version", 2},
                            {"positions", nlohmann::json::array()},
                            {"node_features", nlohmann::json::object()},
                            {"edges", nlohmann::json::array()}};
  REQUIRE_THROWS_AS(load_graph_json(bad_ver), std::runtime_error);

  nlohmann::json bad_edge = {{"version", 1},
                             {"positions", {{0, 0, 0}, {1, 0, 0}}},
                             {"node_features", nlohmann::json::object()},
                             {"edges", {{{"src", 0}, {"dst", 5}, {"bond", "single"}}}}};
  try {
    load_graph_json(bad_edge);
    FAIL("expected edge error");
  } catch (const std::runtime_error& err) {
    REQUIRE(std::string(err.what()).find("/edges/0") != std::string::npos);
  }
}

TEST_CASE("rotation recomputes displacements consistently") {
  Molecule m;
  m.atoms = {{"N", {0.4, 0.1, -0.9}, {}}, {"H", {1.2, -0.5, 0.3}, {}}};
  m.bonds = {{0, 1, BondType::single}};
  GeometricGraph g = build_graph(m, BondSource::explicit_bonds());
  Rotation3 R = euler_to_rotation({0.4, 1.1, 2.5});
  Molecule rm = m;
  for (auto& a : rm.atoms) a.position = R * a.position;
  GeometricGraph rg = build_graph(rm, BondSource::explicit_bonds());
  for (std::size_t e = 0; e < g.edges.size(); ++e)
    REQUIRE((rg.edges[e].disp - R * g.edges[e].disp).cwiseAbs().maxCoeff() < 1e-15);
}
