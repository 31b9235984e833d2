#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "so3kit/array.hpp"

namespace so3kit::ad {

/// Named trainable tensors, ordered by name so iteration (and hence every
/// update and serialization) is deterministic.
class ParameterStore {
 public:
  Array& add(const std::string& name, Array value) {
    auto [it, fresh] = params_.emplace(name, std::move(value));
    if (!fresh) throw std::invalid_argument("ParameterStore: duplicate name " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Array& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterStore: unknown name " + name);
    return it->second;
  }
  const Array& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterStore: unknown name " + name);
    return it->second;
  }

  std::map<std::string, Array>& items() { return params_; }
  const std::map<std::string, Array>& items() const { return params_; }
  std::size_t count() const { return params_.size(); }

 private:
  std::map<std::string, Array> params_;
};

/// Uniform fan-in init, bound 1/sqrt(fan_in), as used for linear layers.
inline Array kaiming_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                             std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return random_uniform(std::move(shape), -bound, bound, rng);
}

struct SgdOptimizer {
  double lr = 1e-3;

  void step(ParameterStore& params, const std::map<std::string, Array>& grads) {
    for (auto& [name, p] : params.items()) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const Array& g = it->second;
      if (!p.same_shape(g))
        throw std::invalid_argument("sgd: gradient shape mismatch for " + name);
      for (std::size_t i = 0; i < p.size(); ++i) p.data[i] -= lr * g.data[i];
    }
  }
};

struct AdamOptimizer {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::map<std::string, Array> m, v;

  void step(ParameterStore& params, const std::map<std::string, Array>& grads) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : params.items()) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const Array& g = it->second;
      if (!p.same_shape(g))
        throw std::invalid_argument("adam: gradient shape mismatch for " + name);
      Array& mi = m.try_emplace(name, Array::zeros(p.shape)).first->second;
      Array& vi = v.try_emplace(name, Array::zeros(p.shape)).first->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        mi.data[i] = beta1 * mi.data[i] + (1.0 - beta1) * g.data[i];
        vi.data[i] = beta2 * vi.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
        double mhat = mi.data[i] / bc1;
        double vhat = vi.data[i] / bc2;
        p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// -------- checkpoint serialization --------
//
// Layout: 8-byte magic "SO3KITCK", uint32 format version, uint64 manifest
// byte length, UTF-8 JSON manifest, then a little-endian float64 blob.
// The manifest lists every tensor (parameters, then optimizer state) with
// its shape and offset into the blob, plus optimizer scalars and a
// free-form "extra" object for model config or preprocessing stats.

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[9] = "SO3KITCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParameterStore& params,
                            const AdamOptimizer* adam = nullptr,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["extra"] = extra;
  std::vector<double> blob;
  auto put = [&blob](nlohmann::json& list, const std::string& name, const Array& a) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = a.shape;
    e["offset"] = blob.size();
    blob.insert(blob.end(), a.data.begin(), a.data.end());
    list.push_back(std::move(e));
  };
  manifest["params"] = nlohmann::json::array();
  for (const auto& [name, a] : params.items()) put(manifest["params"], name, a);
  if (adam) {
    manifest["optimizer"] = {{"type", "adam"}, {"lr", adam->lr},   {"beta1", adam->beta1},
                             {"beta2", adam->beta2}, {"eps", adam->eps}, {"t", adam->t}};
    manifest["state"] = nlohmann::json::array();
    for (const auto& [name, a] : adam->m) put(manifest["state"], "m/" + name, a);
    for (const auto& [name, a] : adam->v) put(manifest["state"], "v/" + name, a);
  } else {
    manifest["optimizer"] = nullptr;
  }
  std::string mj = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u64(os, mj.size());
  os.write(mj.data(), static_cast<std::streamsize>(mj.size()));
  os.write(reinterpret_cast<const char*>(blob.data()),
           static_cast<std::streamsize>(blob.size() * sizeof(double)));
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

struct Checkpoint {
  ParameterStore params;
  bool has_adam = false;
  AdamOptimizer adam;
  nlohmann::json extra;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint32_t ver = detail::read_u32(is);
  if (ver != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ver));
  std::uint64_t mlen = detail::read_u64(is);
  std::string mj(mlen, '\0');
  is.read(mj.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw std::runtime_error("checkpoint: truncated manifest in " + path);
  nlohmann::json manifest = nlohmann::json::parse(mj);
  std::vector<double> blob;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0)
      throw std::runtime_error("checkpoint: blob size not a multiple of 8 in " + path);
    blob.resize(rest.size() / sizeof(double));
    std::memcpy(blob.data(), rest.data(), rest.size());
  }
  auto fetch = [&blob, &path](const nlohmann::json& e) {
    std::vector<std::size_t> shape = e.at("shape").get<std::vector<std::size_t>>();
    std::size_t off = e.at("offset").get<std::size_t>();
    std::size_t n = Array::numel(shape);
    if (off + n > blob.size()) throw std::runtime_error("checkpoint: blob overrun in " + path);
    return Array(std::move(shape),
                 std::vector<double>(blob.begin() + off, blob.begin() + off + n));
  };
  Checkpoint ck;
  ck.extra = manifest.value("extra", nlohmann::json::object());
  for (const auto& e : manifest.at("params"))
    ck.params.add(e.at("name").get<std::string>(), fetch(e));
  if (!manifest.at("optimizer").is_null()) {
    const auto& o = manifest["optimizer"];
    ck.has_adam = true;
    ck.adam.lr = o.at("lr").get<double>();
    ck.adam.beta1 = o.at("beta1").get<double>();
    ck.adam.beta2 = o.at("beta2").get<double>();
    ck.adam.eps = o.at("eps").get<double>();
    ck.adam.t = o.at("t").get<std::int64_t>();
    for (const auto& e : manifest.value("state", nlohmann::json::array())) {
      std::string name = e.at("name").get<std::string>();
      if (name.rfind("m/", 0) == 0)
        ck.adam.m.emplace(name.substr(2), fetch(e));
      else if (name.rfind("v/", 0) == 0)
        ck.adam.v.emplace(name.substr(2), fetch(e));
    }
  }
  return ck;
}

}  // namespace so3kit::ad
