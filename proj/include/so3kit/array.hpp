#pragma once

#include <cstddef>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace so3kit::ad {

/// Dense row-major array of 64-bit reals.
struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Array() = default;
  Array(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw std::invalid_argument("Array: shape/data size mismatch");
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
  }

  static Array zeros(std::vector<std::size_t> s) {
    std::size_t n = numel(s);
    return Array(std::move(s), std::vector<double>(n, 0.0));
  }

  static Array full(std::vector<std::size_t> s, double v) {
    std::size_t n = numel(s);
    return Array(std::move(s), std::vector<double>(n, v));
  }

  static Array scalar(double v) { return Array({}, {v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t extent(std::size_t axis) const {
    if (axis >= shape.size()) throw std::out_of_range("Array: axis out of range");
    return shape[axis];
  }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Array& o) const { return shape == o.shape; }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + ")";
  }
};

/// Row-major strides for a shape.
inline std::vector<std::size_t> strides_of(const std::vector<std::size_t>& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

inline Array random_uniform(std::vector<std::size_t> shape, double lo, double hi,
                            std::mt19937_64& rng) {
  Array a = Array::zeros(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : a.data) v = dist(rng);
  return a;
}

inline Array random_normal(std::vector<std::size_t> shape, double mean, double stddev,
                           std::mt19937_64& rng) {
  Array a = Array::zeros(std::move(shape));
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : a.data) v = dist(rng);
  return a;
}

}  // namespace so3kit::ad
