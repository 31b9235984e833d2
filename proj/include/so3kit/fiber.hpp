#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

namespace so3kit {

/// Channel structure of an equivariant feature: ordered (multiplicity,
/// degree) pairs with unique ascending degrees.
struct Fiber {
  struct Entry {
    std::size_t multiplicity;
    int degree;
  };
  std::vector<Entry> entries;

  Fiber() = default;
  Fiber(std::initializer_list<Entry> e) : entries(e) { validate(); }
  explicit Fiber(std::vector<Entry> e) : entries(std::move(e)) { validate(); }

  void validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].multiplicity == 0 || entries[i].degree < 0)
        throw std::invalid_argument("Fiber: bad entry");
      if (i && entries[i].degree <= entries[i - 1].degree)
        throw std::invalid_argument("Fiber: degrees must be unique ascending");
    }
  }

  std::size_t multiplicity(int degree) const {
    for (const auto& e : entries)
      if (e.degree == degree) return e.multiplicity;
    return 0;
  }

  bool has(int degree) const { return multiplicity(degree) != 0; }

  std::size_t n_features() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.multiplicity * (2 * e.degree + 1);
    return n;
  }

  int max_degree() const {
    return entries.empty() ? -1 : entries.back().degree;
  }

  std::vector<int> degrees() const {
    std::vector<int> d;
    for (const auto& e : entries) d.push_back(e.degree);
    return d;
  }

  /// Same multiplicity m for every degree 0..max_d.
  static Fiber uniform(std::size_t m, int max_d) {
    std::vector<Entry> e;
    for (int d = 0; d <= max_d; ++d) e.push_back({m, d});
    return Fiber(std::move(e));
  }
};

}  // namespace so3kit
