#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <stdexcept>

#include "so3kit/array.hpp"

namespace so3kit::ad {

class Tape;

/// Handle to a value recorded on a tape.
struct Node {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

/// Reverse-mode tape over dense arrays. Nodes are recorded in creation
/// order; backward visits them in reverse, which is a valid topological
/// order since parents always precede children. Child order is fixed, so
/// gradient accumulation is deterministic.
class Tape {
 public:
  Node constant(Array v) { return Node{this, push(std::move(v), {}, nullptr)}; }

  /// Leaf tracked under a name; gradients retrievable per name after backward.
  Node param(const std::string& name, Array v) {
    Node n = constant(std::move(v));
    if (!named_.emplace(name, n.id).second)
      throw std::invalid_argument("Tape: duplicate parameter name " + name);
    return n;
  }

  const Array& val(Node n) const { return recs_.at(n.id).value; }
  const Array& val(int id) const { return recs_.at(id).value; }

  void backward(Node loss) {
    if (ran_backward_) throw std::logic_error("Tape: backward called twice without reset");
    if (!val(loss).shape.empty() && val(loss).size() != 1)
      throw std::invalid_argument("Tape: backward requires a scalar loss");
    ran_backward_ = true;
    grads_.clear();
    grads_.resize(recs_.size());
    for (std::size_t i = 0; i < recs_.size(); ++i) grads_[i] = Array::zeros(recs_[i].value.shape);
    for (auto& v : grads_[loss.id].data) v = 1.0;
    for (int i = static_cast<int>(recs_.size()) - 1; i >= 0; --i)
      if (recs_[i].back) recs_[i].back(*this, i);
  }

  const Array& grad(Node n) const {
    if (!ran_backward_) throw std::logic_error("Tape: grad requested before backward");
    return grads_.at(n.id);
  }

  std::map<std::string, Array> named_grads() const {
    std::map<std::string, Array> out;
    for (const auto& [name, id] : named_) out.emplace(name, grads_.at(id));
    return out;
  }

  std::size_t num_nodes() const { return recs_.size(); }

  // -- internal plumbing used by the op free functions --
  struct Rec {
    Array value;
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;
  };

  int push(Array v, std::vector<int> parents, std::function<void(Tape&, int)> back) {
    recs_.push_back(Rec{std::move(v), std::move(parents), std::move(back)});
    return static_cast<int>(recs_.size()) - 1;
  }

  Array& grad_ref(int id) { return grads_.at(id); }
  const Rec& rec(int id) const { return recs_.at(id); }

 private:
  // deque: references returned by val() stay valid as later nodes are pushed
  std::deque<Rec> recs_;
  std::vector<Array> grads_;
  std::map<std::string, int> named_;
  bool ran_backward_ = false;
};

namespace detail {

inline void check_same_tape(Node a, Node b) {
  if (a.tape != b.tape) throw std::invalid_argument("ops: nodes from different tapes");
}

/// Broadcast result shape (NumPy rules after left-padding with 1s).
inline std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                                const std::vector<std::size_t>& b,
                                                const char* op) {
  std::size_t r = std::max(a.size(), b.size());
  std::vector<std::size_t> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                  Array::shape_str(a) + " vs " + Array::shape_str(b));
    // a size-1 axis stretches to the other extent, including 0 (empty axes stay empty)
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

/// Strides into `shape` viewed as broadcast to `out` (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const std::vector<std::size_t>& shape,
                                                  const std::vector<std::size_t>& out) {
  auto st = strides_of(shape);
  std::size_t pad = out.size() - shape.size();
  std::vector<std::size_t> bs(out.size(), 0);
  for (std::size_t i = 0; i < shape.size(); ++i)
    bs[pad + i] = (shape[i] == 1 && out[pad + i] != 1) ? 0 : st[i];
  return bs;
}

template <typename F>
void for_each_broadcast(const std::vector<std::size_t>& out_shape,
                        const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  std::size_t n = Array::numel(out_shape);
  std::size_t r = out_shape.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    f(lin, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

/// Reduce a gradient over broadcast axes back to the original shape.
inline Array reduce_to_shape(const Array& g, const std::vector<std::size_t>& shape) {
  if (g.shape == shape) return g;
  Array out = Array::zeros(shape);
  auto sg = strides_of(g.shape);
  auto so = broadcast_strides(shape, g.shape);
  std::size_t r = g.shape.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ig = 0, io = 0;
  std::size_t n = g.size();
  for (std::size_t lin = 0; lin < n; ++lin) {
    out.data[io] += g.data[ig];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ig += sg[d];
      io += so[d];
      if (idx[d] < g.shape[d]) break;
      ig -= sg[d] * g.shape[d];
      io -= so[d] * g.shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

inline Node binary_ew(Node a, Node b, const char* name, double (*fwd)(double, double),
                      // dval/da and dval/db as functions of (av, bv)
                      double (*dfa)(double, double), double (*dfb)(double, double)) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  auto out_shape = broadcast_shape(av.shape, bv.shape, name);
  Array out = Array::zeros(out_shape);
  auto sa = broadcast_strides(av.shape, out_shape);
  auto sb = broadcast_strides(bv.shape, out_shape);
  for_each_broadcast(out_shape, sa, sb, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
    out.data[lin] = fwd(av.data[ia], bv.data[ib]);
  });
  int aid = a.id, bid = b.id;
  int id = t.push(std::move(out), {aid, bid}, [=](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    const Array& av2 = tp.val(aid);
    const Array& bv2 = tp.val(bid);
    Array ga = Array::zeros(g.shape), gb = Array::zeros(g.shape);
    auto sa2 = broadcast_strides(av2.shape, g.shape);
    auto sb2 = broadcast_strides(bv2.shape, g.shape);
    for_each_broadcast(g.shape, sa2, sb2, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
      ga.data[lin] = g.data[lin] * dfa(av2.data[ia], bv2.data[ib]);
      gb.data[lin] = g.data[lin] * dfb(av2.data[ia], bv2.data[ib]);
    });
    Array ra = reduce_to_shape(ga, av2.shape);
    Array rb = reduce_to_shape(gb, bv2.shape);
    for (std::size_t i = 0; i < ra.size(); ++i) tp.grad_ref(aid).data[i] += ra.data[i];
    for (std::size_t i = 0; i < rb.size(); ++i) tp.grad_ref(bid).data[i] += rb.data[i];
  });
  return Node{&t, id};
}

inline Node unary_ew(Node a, std::function<double(double)> fwd,
                     std::function<double(double)> dfa) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  Array out = Array::zeros(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = fwd(av.data[i]);
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, dfa](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    const Array& av2 = tp.val(aid);
    for (std::size_t i = 0; i < g.size(); ++i)
      tp.grad_ref(aid).data[i] += g.data[i] * dfa(av2.data[i]);
  });
  return Node{&t, id};
}

}  // namespace detail

inline Node add(Node a, Node b) {
  return detail::binary_ew(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Node sub(Node a, Node b) {
  return detail::binary_ew(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Node mul(Node a, Node b) {
  return detail::binary_ew(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Node div(Node a, Node b) {
  return detail::binary_ew(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Node smul(Node a, double s) {
  return detail::unary_ew(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Node relu(Node a) {
  return detail::unary_ew(a, [](double x) { return x > 0 ? x : 0.0; },
                          [](double x) { return x > 0 ? 1.0 : 0.0; });
}

inline Node leaky_relu(Node a, double slope) {
  return detail::unary_ew(a, [slope](double x) { return x > 0 ? x : slope * x; },
                          [slope](double x) { return x > 0 ? 1.0 : slope; });
}

inline Node exp_(Node a) {
  return detail::unary_ew(a, [](double x) { return std::exp(x); },
                          [](double x) { return std::exp(x); });
}

inline Node sqrt_(Node a) {
  return detail::unary_ew(a, [](double x) { return std::sqrt(x); },
                          [](double x) { return 0.5 / std::sqrt(x); });
}

/// Clamp magnitude to at least eps, preserving sign. Clamped entries get
/// zero gradient.
inline Node signed_clamp_min(Node a, double eps) {
  return detail::unary_ew(
      a,
      [eps](double x) {
        double s = x < 0 ? -1.0 : 1.0;
        return s * std::max(std::abs(x), eps);
      },
      [eps](double x) { return std::abs(x) >= eps ? 1.0 : 0.0; });
}

/// Matrix multiply. Supports (m,n)x(n,p), batched (...,m,n)x(...,n,p) with
/// identical leading extents, and a 2D operand broadcast across the other's
/// batch dims.
inline Node matmul(Node a, Node b) {
  detail::check_same_tape(a, b);
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  if (av.rank() < 2 || bv.rank() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                Array::shape_str(av.shape) + " x " + Array::shape_str(bv.shape));
  std::size_t m = av.shape[av.rank() - 2], n = av.shape[av.rank() - 1];
  std::size_t n2 = bv.shape[bv.rank() - 2], p = bv.shape[bv.rank() - 1];
  if (n != n2)
    throw std::invalid_argument("matmul: inner dims differ, " + Array::shape_str(av.shape) +
                                " x " + Array::shape_str(bv.shape));
  std::vector<std::size_t> abatch(av.shape.begin(), av.shape.end() - 2);
  std::vector<std::size_t> bbatch(bv.shape.begin(), bv.shape.end() - 2);
  std::vector<std::size_t> batch;
  if (abatch == bbatch) batch = abatch;
  else if (abatch.empty()) batch = bbatch;
  else if (bbatch.empty()) batch = abatch;
  else
    throw std::invalid_argument("matmul: incompatible batch dims, " + Array::shape_str(av.shape) +
                                " x " + Array::shape_str(bv.shape));
  std::size_t nb = Array::numel(batch);
  bool a_bcast = abatch.empty() && !batch.empty();
  bool b_bcast = bbatch.empty() && !batch.empty();
  std::vector<std::size_t> out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(p);
  Array out = Array::zeros(out_shape);
  for (std::size_t k = 0; k < nb; ++k) {
    ConstMatMap A(av.data.data() + (a_bcast ? 0 : k * m * n), m, n);
    ConstMatMap B(bv.data.data() + (b_bcast ? 0 : k * n * p), n, p);
    MatMap C(out.data.data() + k * m * p, m, p);
    C.noalias() = A * B;
  }
  int aid = a.id, bid = b.id;
  int id = t.push(std::move(out), {aid, bid},
                  [aid, bid, m, n, p, nb, a_bcast, b_bcast](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    const Array& av2 = tp.val(aid);
    const Array& bv2 = tp.val(bid);
    for (std::size_t k = 0; k < nb; ++k) {
      ConstMatMap G(g.data.data() + k * m * p, m, p);
      ConstMatMap A(av2.data.data() + (a_bcast ? 0 : k * m * n), m, n);
      ConstMatMap B(bv2.data.data() + (b_bcast ? 0 : k * n * p), n, p);
      MatMap GA(tp.grad_ref(aid).data.data() + (a_bcast ? 0 : k * m * n), m, n);
      MatMap GB(tp.grad_ref(bid).data.data() + (b_bcast ? 0 : k * n * p), n, p);
      GA.noalias() += G * B.transpose();
      GB.noalias() += A.transpose() * G;
    }
  });
  return Node{&t, id};
}

/// Pairwise contraction of one axis of `a` against one axis of `b`.
/// Output shape: a.shape minus axis_a, followed by b.shape minus axis_b.
inline Node contract(Node a, Node b, std::size_t axis_a, std::size_t axis_b) {
  detail::check_same_tape(a, b);
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  if (axis_a >= av.rank() || axis_b >= bv.rank())
    throw std::invalid_argument("contract: axis out of range");
  if (av.shape[axis_a] != bv.shape[axis_b])
    throw std::invalid_argument("contract: contracted extents differ, " +
                                Array::shape_str(av.shape) + " vs " + Array::shape_str(bv.shape));
  std::size_t c = av.shape[axis_a];
  std::vector<std::size_t> out_shape;
  for (std::size_t i = 0; i < av.rank(); ++i)
    if (i != axis_a) out_shape.push_back(av.shape[i]);
  for (std::size_t i = 0; i < bv.rank(); ++i)
    if (i != axis_b) out_shape.push_back(bv.shape[i]);
  std::size_t na = av.size() / c, nbn = bv.size() / c;
  auto sta = strides_of(av.shape);
  auto stb = strides_of(bv.shape);
  // offsets of the na (resp. nb) free-index positions, in row-major order of
  // the remaining axes
  auto free_offsets = [](const Array& x, std::size_t axis, const std::vector<std::size_t>& st) {
    std::vector<std::size_t> offs;
    offs.reserve(x.size() / x.shape[axis]);
    std::vector<std::size_t> idx(x.rank(), 0);
    std::size_t off = 0;
    std::size_t count = x.size() / x.shape[axis];
    for (std::size_t l = 0; l < count; ++l) {
      offs.push_back(off);
      for (std::size_t d = x.rank(); d-- > 0;) {
        if (d == axis) continue;
        ++idx[d];
        off += st[d];
        if (idx[d] < x.shape[d]) break;
        off -= st[d] * x.shape[d];
        idx[d] = 0;
      }
    }
    return offs;
  };
  auto offs_a = free_offsets(av, axis_a, sta);
  auto offs_b = free_offsets(bv, axis_b, stb);
  Array out = Array::zeros(out_shape);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nbn; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < c; ++k)
        acc += av.data[offs_a[i] + k * sta[axis_a]] * bv.data[offs_b[j] + k * stb[axis_b]];
      out.data[i * nbn + j] = acc;
    }
  int aid = a.id, bid = b.id;
  int id = t.push(std::move(out), {aid, bid},
                  [=](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    const Array& av2 = tp.val(aid);
    const Array& bv2 = tp.val(bid);
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nbn; ++j) {
        double gv = g.data[i * nbn + j];
        for (std::size_t k = 0; k < c; ++k) {
          tp.grad_ref(aid).data[offs_a[i] + k * sta[axis_a]] +=
              gv * bv2.data[offs_b[j] + k * stb[axis_b]];
          tp.grad_ref(bid).data[offs_b[j] + k * stb[axis_b]] +=
              gv * av2.data[offs_a[i] + k * sta[axis_a]];
        }
      }
  });
  return Node{&t, id};
}

inline Node reshape(Node a, std::vector<std::size_t> shape) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (Array::numel(shape) != av.size())
    throw std::invalid_argument("reshape: element count mismatch, " +
                                Array::shape_str(av.shape) + " -> " + Array::shape_str(shape));
  Array out(shape, av.data);
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    for (std::size_t i = 0; i < g.size(); ++i) tp.grad_ref(aid).data[i] += g.data[i];
  });
  return Node{&t, id};
}

inline Node transpose(Node a, std::vector<std::size_t> perm) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (perm.size() != av.rank()) throw std::invalid_argument("transpose: bad permutation size");
  std::vector<std::size_t> out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = av.shape[perm[i]];
  auto st_in = strides_of(av.shape);
  // stride of output axis i in the input buffer
  std::vector<std::size_t> st_perm(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) st_perm[i] = st_in[perm[i]];
  Array out = Array::zeros(out_shape);
  std::vector<std::size_t> idx(perm.size(), 0);
  std::size_t src = 0;
  for (std::size_t lin = 0; lin < out.size(); ++lin) {
    out.data[lin] = av.data[src];
    for (std::size_t d = perm.size(); d-- > 0;) {
      ++idx[d];
      src += st_perm[d];
      if (idx[d] < out_shape[d]) break;
      src -= st_perm[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, out_shape, st_perm](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    std::vector<std::size_t> idx2(out_shape.size(), 0);
    std::size_t src = 0;
    for (std::size_t lin = 0; lin < g.size(); ++lin) {
      tp.grad_ref(aid).data[src] += g.data[lin];
      for (std::size_t d = out_shape.size(); d-- > 0;) {
        ++idx2[d];
        src += st_perm[d];
        if (idx2[d] < out_shape[d]) break;
        src -= st_perm[d] * out_shape[d];
        idx2[d] = 0;
      }
    }
  });
  return Node{&t, id};
}

inline Node concat(const std::vector<Node>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input");
  Tape& t = *parts[0].tape;
  std::vector<std::size_t> shape = t.val(parts[0]).shape;
  if (axis >= shape.size()) throw std::invalid_argument("concat: axis out of range");
  std::size_t total = 0;
  for (auto p : parts) {
    const auto& s = t.val(p).shape;
    for (std::size_t d = 0; d < shape.size(); ++d)
      if (d != axis && s[d] != shape[d])
        throw std::invalid_argument("concat: shape mismatch " + Array::shape_str(s) + " vs " +
                                    Array::shape_str(shape));
    total += s[axis];
  }
  shape[axis] = total;
  Array out = Array::zeros(shape);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  std::size_t offset = 0;
  std::vector<int> pids;
  std::vector<std::size_t> extents;
  for (auto p : parts) {
    const Array& pv = t.val(p);
    std::size_t e = pv.shape[axis];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pv.data.begin() + o * e * inner, pv.data.begin() + (o + 1) * e * inner,
                out.data.begin() + (o * total + offset) * inner);
    offset += e;
    pids.push_back(p.id);
    extents.push_back(e);
  }
  int id = t.push(std::move(out), pids, [pids, extents, outer, inner, total](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < pids.size(); ++pi) {
      std::size_t e = extents[pi];
      Array& pg = tp.grad_ref(pids[pi]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < e * inner; ++i)
          pg.data[o * e * inner + i] += g.data[(o * total + off) * inner + i];
      off += e;
    }
  });
  return Node{&t, id};
}

inline Node slice(Node a, std::size_t axis, std::size_t start, std::size_t len) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (axis >= av.rank() || start + len > av.shape[axis])
    throw std::invalid_argument("slice: out of range");
  std::vector<std::size_t> shape = av.shape;
  shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= av.shape[d];
  for (std::size_t d = axis + 1; d < av.rank(); ++d) inner *= av.shape[d];
  std::size_t full = av.shape[axis];
  Array out = Array::zeros(shape);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(av.data.begin() + (o * full + start) * inner,
              av.data.begin() + (o * full + start + len) * inner,
              out.data.begin() + o * len * inner);
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, outer, inner, full, start, len](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    Array& pg = tp.grad_ref(aid);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len * inner; ++i)
        pg.data[(o * full + start) * inner + i] += g.data[o * len * inner + i];
  });
  return Node{&t, id};
}

namespace detail {
inline Node reduce_axis(Node a, std::size_t axis, bool mean) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (axis >= av.rank()) throw std::invalid_argument("sum/mean: axis out of range");
  std::vector<std::size_t> shape;
  for (std::size_t d = 0; d < av.rank(); ++d)
    if (d != axis) shape.push_back(av.shape[d]);
  std::size_t outer = 1, inner = 1, e = av.shape[axis];
  for (std::size_t d = 0; d < axis; ++d) outer *= av.shape[d];
  for (std::size_t d = axis + 1; d < av.rank(); ++d) inner *= av.shape[d];
  double scale = mean ? 1.0 / static_cast<double>(e) : 1.0;
  Array out = Array::zeros(shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < e; ++k)
      for (std::size_t i = 0; i < inner; ++i)
        out.data[o * inner + i] += scale * av.data[(o * e + k) * inner + i];
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, outer, inner, e, scale](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    Array& pg = tp.grad_ref(aid);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < e; ++k)
        for (std::size_t i = 0; i < inner; ++i)
          pg.data[(o * e + k) * inner + i] += scale * g.data[o * inner + i];
  });
  return Node{&t, id};
}
}  // namespace detail

inline Node sum(Node a, std::size_t axis) { return detail::reduce_axis(a, axis, false); }
inline Node mean(Node a, std::size_t axis) { return detail::reduce_axis(a, axis, true); }

/// Max over axis 0; the gradient flows to the first attaining row.
inline Node max_axis0(Node a) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (av.rank() == 0 || av.shape[0] == 0) throw std::invalid_argument("max_axis0: empty input");
  std::size_t rows = av.shape[0];
  std::size_t inner = av.size() / rows;
  std::vector<std::size_t> shape(av.shape.begin() + 1, av.shape.end());
  Array out = Array::zeros(shape);
  std::vector<std::size_t> arg(inner, 0);
  for (std::size_t i = 0; i < inner; ++i) {
    double best = av.data[i];
    for (std::size_t r = 1; r < rows; ++r)
      if (av.data[r * inner + i] > best) {
        best = av.data[r * inner + i];
        arg[i] = r;
      }
    out.data[i] = best;
  }
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, arg, inner](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    for (std::size_t i = 0; i < inner; ++i)
      tp.grad_ref(aid).data[arg[i] * inner + i] += g.data[i];
  });
  return Node{&t, id};
}

inline Node sum_all(Node a) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  double acc = 0;
  for (double v : av.data) acc += v;
  int aid = a.id;
  int id = t.push(Array::scalar(acc), {aid}, [aid](Tape& tp, int self) {
    double g = tp.grad_ref(self).data[0];
    for (auto& v : tp.grad_ref(aid).data) v += g;
  });
  return Node{&t, id};
}

inline Node mean_all(Node a) {
  return smul(sum_all(a), 1.0 / static_cast<double>(a.tape->val(a).size()));
}

/// L2 norm over the last axis, clamped from below at eps; keeps a trailing
/// axis of extent 1. Clamped rows get zero gradient.
inline Node l2_norm_last(Node a, double eps = 1e-12) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (av.rank() == 0) throw std::invalid_argument("l2_norm_last: scalar input");
  std::size_t e = av.shape.back();
  std::size_t rows = av.size() / e;
  std::vector<std::size_t> shape = av.shape;
  shape.back() = 1;
  Array out = Array::zeros(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0;
    for (std::size_t i = 0; i < e; ++i) acc += av.data[r * e + i] * av.data[r * e + i];
    out.data[r] = std::max(std::sqrt(acc), eps);
  }
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, e, rows, eps](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    const Array& av2 = tp.val(aid);
    Array& pg = tp.grad_ref(aid);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0;
      for (std::size_t i = 0; i < e; ++i) acc += av2.data[r * e + i] * av2.data[r * e + i];
      double nrm = std::sqrt(acc);
      if (nrm <= eps) continue;
      for (std::size_t i = 0; i < e; ++i)
        pg.data[r * e + i] += g.data[r] * av2.data[r * e + i] / nrm;
    }
  });
  return Node{&t, id};
}

/// Layer normalization over the last axis: zero mean, unit (population)
/// variance per row.
inline Node layer_norm_last(Node a, double eps = 1e-12) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  std::size_t e = av.shape.back();
  std::size_t rows = av.size() / e;
  Array out = Array::zeros(av.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0;
    for (std::size_t i = 0; i < e; ++i) m += av.data[r * e + i];
    m /= static_cast<double>(e);
    double var = 0;
    for (std::size_t i = 0; i < e; ++i) {
      double d = av.data[r * e + i] - m;
      var += d * d;
    }
    var /= static_cast<double>(e);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < e; ++i) out.data[r * e + i] = (av.data[r * e + i] - m) * inv;
  }
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, e, rows, eps](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    const Array& av2 = tp.val(aid);
    const Array& y = tp.rec(self).value;
    Array& pg = tp.grad_ref(aid);
    (void)av2;
    double en = static_cast<double>(e);
    for (std::size_t r = 0; r < rows; ++r) {
      double m = 0;
      for (std::size_t i = 0; i < e; ++i) m += av2.data[r * e + i];
      m /= en;
      double var = 0;
      for (std::size_t i = 0; i < e; ++i) {
        double d = av2.data[r * e + i] - m;
        var += d * d;
      }
      var /= en;
      double inv = 1.0 / std::sqrt(var + eps);
      double gsum = 0, gysum = 0;
      for (std::size_t i = 0; i < e; ++i) {
        gsum += g.data[r * e + i];
        gysum += g.data[r * e + i] * y.data[r * e + i];
      }
      for (std::size_t i = 0; i < e; ++i)
        pg.data[r * e + i] +=
            inv * (g.data[r * e + i] - gsum / en - y.data[r * e + i] * gysum / en);
    }
  });
  return Node{&t, id};
}

/// Softmax over the last axis.
inline Node softmax_last(Node a) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  std::size_t e = av.shape.back();
  std::size_t rows = av.size() / e;
  Array out = Array::zeros(av.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = av.data[r * e];
    for (std::size_t i = 1; i < e; ++i) mx = std::max(mx, av.data[r * e + i]);
    double z = 0;
    for (std::size_t i = 0; i < e; ++i) z += std::exp(av.data[r * e + i] - mx);
    for (std::size_t i = 0; i < e; ++i) out.data[r * e + i] = std::exp(av.data[r * e + i] - mx) / z;
  }
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, e, rows](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    const Array& y = tp.rec(self).value;
    Array& pg = tp.grad_ref(aid);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0;
      for (std::size_t i = 0; i < e; ++i) dot += g.data[r * e + i] * y.data[r * e + i];
      for (std::size_t i = 0; i < e; ++i)
        pg.data[r * e + i] += y.data[r * e + i] * (g.data[r * e + i] - dot);
    }
  });
  return Node{&t, id};
}

/// Softmax along axis 0, applied independently within each segment (rows
/// sharing a segment id) and each trailing column. Empty segments are a
/// no-op by construction.
inline Node softmax_segments(Node a, const std::vector<std::size_t>& seg) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (av.rank() == 0 || av.shape[0] != seg.size())
    throw std::invalid_argument("softmax_segments: segment ids must match axis 0");
  std::size_t rows = av.shape[0];
  std::size_t cols = rows ? av.size() / rows : 1;
  std::size_t nseg = 0;
  for (auto s : seg) nseg = std::max(nseg, s + 1);
  Array out = Array::zeros(av.shape);
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<double> mx(nseg, -std::numeric_limits<double>::infinity());
    std::vector<double> z(nseg, 0.0);
    for (std::size_t r = 0; r < rows; ++r) mx[seg[r]] = std::max(mx[seg[r]], av.data[r * cols + c]);
    for (std::size_t r = 0; r < rows; ++r)
      z[seg[r]] += std::exp(av.data[r * cols + c] - mx[seg[r]]);
    for (std::size_t r = 0; r < rows; ++r)
      out.data[r * cols + c] = std::exp(av.data[r * cols + c] - mx[seg[r]]) / z[seg[r]];
  }
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, seg, rows, cols, nseg](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    const Array& y = tp.rec(self).value;
    Array& pg = tp.grad_ref(aid);
    for (std::size_t c = 0; c < cols; ++c) {
      std::vector<double> dot(nseg, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        dot[seg[r]] += g.data[r * cols + c] * y.data[r * cols + c];
      for (std::size_t r = 0; r < rows; ++r)
        pg.data[r * cols + c] += y.data[r * cols + c] * (g.data[r * cols + c] - dot[seg[r]]);
    }
  });
  return Node{&t, id};
}

/// Row gather along axis 0.
inline Node gather_rows(Node a, const std::vector<std::size_t>& idx) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (av.rank() == 0) throw std::invalid_argument("gather_rows: scalar input");
  std::size_t inner = av.shape[0] ? av.size() / av.shape[0] : 0;
  std::vector<std::size_t> shape = av.shape;
  shape[0] = idx.size();
  Array out = Array::zeros(shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= av.shape[0]) throw std::out_of_range("gather_rows: index out of range");
    std::copy(av.data.begin() + idx[r] * inner, av.data.begin() + (idx[r] + 1) * inner,
              out.data.begin() + r * inner);
  }
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, idx, inner](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    Array& pg = tp.grad_ref(aid);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < inner; ++i)
        pg.data[idx[r] * inner + i] += g.data[r * inner + i];
  });
  return Node{&t, id};
}

namespace detail {
inline Node segment_reduce(Node a, const std::vector<std::size_t>& seg, std::size_t nseg,
                           bool mean) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (av.rank() == 0 || av.shape[0] != seg.size())
    throw std::invalid_argument("segment_reduce: segment ids must match axis 0");
  std::size_t rows = av.shape[0];
  std::size_t inner = rows ? av.size() / rows : Array::numel(av.shape) /
                                                    std::max<std::size_t>(av.shape[0], 1);
  std::vector<std::size_t> shape = av.shape;
  shape[0] = nseg;
  inner = 1;
  for (std::size_t d = 1; d < av.rank(); ++d) inner *= av.shape[d];
  std::vector<double> count(nseg, 0.0);
  for (auto s : seg) {
    if (s >= nseg) throw std::out_of_range("segment_reduce: segment id out of range");
    count[s] += 1.0;
  }
  // empty segments reduce to zero; mean divides by max(count, 1)
  std::vector<double> scale(nseg, 1.0);
  if (mean)
    for (std::size_t s = 0; s < nseg; ++s) scale[s] = 1.0 / std::max(count[s], 1.0);
  Array out = Array::zeros(shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < inner; ++i)
      out.data[seg[r] * inner + i] += scale[seg[r]] * av.data[r * inner + i];
  int aid = a.id;
  int id = t.push(std::move(out), {aid}, [aid, seg, inner, scale](Tape& tp, int self) {
    const Array& g = tp.grad_ref(self);
    Array& pg = tp.grad_ref(aid);
    for (std::size_t r = 0; r < seg.size(); ++r)
      for (std::size_t i = 0; i < inner; ++i)
        pg.data[r * inner + i] += scale[seg[r]] * g.data[seg[r] * inner + i];
  });
  return Node{&t, id};
}
}  // namespace detail

inline Node segment_sum(Node a, const std::vector<std::size_t>& seg, std::size_t nseg) {
  return detail::segment_reduce(a, seg, nseg, false);
}
inline Node segment_mean(Node a, const std::vector<std::size_t>& seg, std::size_t nseg) {
  return detail::segment_reduce(a, seg, nseg, true);
}

}  // namespace so3kit::ad
