#pragma once

#include <cmath>
#include <map>
#include <string>

#include <json.hpp>

#include "so3kit/cg.hpp"
#include "so3kit/fiber.hpp"
#include "so3kit/graph.hpp"
#include "so3kit/optim.hpp"
#include "so3kit/tape.hpp"

namespace so3kit {

using ad::Node;

/// Binds a tape to a parameter store for one forward pass; parameter nodes
/// are created on first use so a tensor used twice shares one leaf.
struct LayerContext {
  ad::Tape& tape;
  ad::ParameterStore& ps;
  std::map<std::string, Node> pcache;

  Node param(const std::string& name) {
    auto it = pcache.find(name);
    if (it != pcache.end()) return it->second;
    Node n = tape.param(name, ps.at(name));
    pcache.emplace(name, n);
    return n;
  }

  Node constant(ad::Array v) { return tape.constant(std::move(v)); }
};

/// Per-degree feature arrays of shape (entities, multiplicity, 2d+1).
using DegreeMap = std::map<int, Node>;

// -------- linear + radial FFN --------

inline void init_linear(ad::ParameterStore& ps, const std::string& prefix, std::size_t in,
                        std::size_t out, std::mt19937_64& rng) {
  ps.add(prefix + ".w", ad::kaiming_uniform({in, out}, in, rng));
  ps.add(prefix + ".b", ad::kaiming_uniform({out}, in, rng));
}

inline Node linear(LayerContext& ctx, const std::string& prefix, Node x) {
  return ad::add(ad::matmul(x, ctx.param(prefix + ".w")), ctx.param(prefix + ".b"));
}

inline void init_radial_net(ad::ParameterStore& ps, const std::string& prefix, std::size_t in_dim,
                            std::size_t out_dim, std::mt19937_64& rng) {
  init_linear(ps, prefix + ".l0", in_dim, 32, rng);
  init_linear(ps, prefix + ".l1", 32, 32, rng);
  init_linear(ps, prefix + ".l2", 32, out_dim, rng);
}

/// FFN over invariant edge scalars: in -> 32 -> layer_norm -> relu ->
/// 32 -> layer_norm -> relu -> out.
inline Node radial_net(LayerContext& ctx, const std::string& prefix, Node edge_scalars) {
  Node h = linear(ctx, prefix + ".l0", edge_scalars);
  h = ad::relu(ad::layer_norm_last(h));
  h = linear(ctx, prefix + ".l1", h);
  h = ad::relu(ad::layer_norm_last(h));
  return linear(ctx, prefix + ".l2", h);
}

// -------- displacement injection --------

enum class XijMode { none, cat, add };

inline XijMode xij_from_name(const std::string& s) {
  if (s == "none") return XijMode::none;
  if (s == "cat") return XijMode::cat;
  if (s == "add") return XijMode::add;
  throw std::invalid_argument("unknown x_ij mode: " + s);
}

/// Displacements as type-1 spherical tensors (E,1,3): the real l=1
/// harmonics order the Cartesian components as (-y, z, -x).
inline ad::Array edge_disp_type1(const GeometricGraph& g) {
  std::size_t E = g.edges.size();
  ad::Array a = ad::Array::zeros({E, 1, 3});
  for (std::size_t e = 0; e < E; ++e) {
    const auto& d = g.edges[e].disp;
    a.data[e * 3 + 0] = -d.y();
    a.data[e * 3 + 1] = d.z();
    a.data[e * 3 + 2] = -d.x();
  }
  return a;
}

/// Input fiber as seen by an edge convolution after x_ij injection.
inline Fiber effective_fiber(const Fiber& f_in, XijMode mode) {
  if (mode == XijMode::add && !f_in.has(1))
    throw std::invalid_argument("x_ij add mode requires a type-1 input channel");
  if (mode != XijMode::cat) return f_in;
  std::vector<Fiber::Entry> e;
  bool placed = false;
  for (const auto& ent : f_in.entries) {
    if (ent.degree == 1) {
      e.push_back({ent.multiplicity + 1, 1});
      placed = true;
    } else {
      if (!placed && ent.degree > 1) {
        e.push_back({1, 1});
        placed = true;
      }
      e.push_back(ent);
    }
  }
  if (!placed) e.push_back({1, 1});
  Fiber out(e);
  out.validate();
  return out;
}

/// Gathers per-node features onto edges (source side) and injects the
/// displacement into the type-1 channels per mode.
inline DegreeMap gather_sources(LayerContext& ctx, const GeometricGraph& g, const DegreeMap& feats,
                                const Fiber& f_in, XijMode mode) {
  auto src = g.edge_src();
  DegreeMap out;
  for (const auto& ent : f_in.entries) out[ent.degree] = ad::gather_rows(feats.at(ent.degree), src);
  if (mode == XijMode::none) return out;
  Node disp = ctx.constant(edge_disp_type1(g));
  if (mode == XijMode::cat) {
    if (out.count(1))
      out[1] = ad::concat({out[1], disp}, 1);
    else
      out[1] = disp;
  } else {
    std::size_t m = f_in.multiplicity(1);
    Node first = ad::add(ad::slice(out[1], 1, 0, 1), disp);
    out[1] = (m > 1) ? ad::concat({first, ad::slice(out[1], 1, 1, m - 1)}, 1) : first;
  }
  return out;
}

// -------- equivariant convolution --------

namespace detail {
inline std::string rn_name(const std::string& prefix, int k, int l) {
  return prefix + ".rn." + std::to_string(k) + "_" + std::to_string(l);
}
}  // namespace detail

/// f_in_eff must already account for x_ij injection.
inline void init_conv(ad::ParameterStore& ps, const std::string& prefix, const Fiber& f_in_eff,
                      const Fiber& f_out, std::size_t edge_scalar_dim, std::mt19937_64& rng) {
  for (const auto& o : f_out.entries)
    for (const auto& i : f_in_eff.entries) {
      std::size_t B = 2 * std::min(i.degree, o.degree) + 1;
      init_radial_net(ps, detail::rn_name(prefix, i.degree, o.degree), edge_scalar_dim,
                      B * i.multiplicity * o.multiplicity, rng);
    }
}

/// Radial-weighted sum of basis kernels reshaped into the block kernel of
/// shape (E, mo(2l+1), mi(2k+1)). rw is (E, mo·mi, B); basis is the
/// EdgeBasis stack (E, B, (2l+1)(2k+1)).
inline Node assemble_kernel(Node rw, Node basis, std::size_t mi, std::size_t mo, int k, int l) {
  std::size_t E = rw.tape->val(rw).shape[0];
  std::size_t dl = 2 * l + 1, dk = 2 * k + 1;
  Node km = ad::matmul(rw, basis);  // (E, mo*mi, dl*dk)
  km = ad::reshape(km, {E, mo, mi, dl, dk});
  km = ad::transpose(km, {0, 1, 3, 2, 4});
  return ad::reshape(km, {E, mo * dl, mi * dk});
}

/// Per-edge messages per output degree: sum over input degrees of the
/// equivariant kernel applied to the gathered source channels. Avoids
/// materializing the block kernel by contracting basis with features first.
inline DegreeMap conv_messages(LayerContext& ctx, const GeometricGraph& g, const EdgeBasis& basis,
                               const DegreeMap& feats, const Fiber& f_in, const Fiber& f_out,
                               const std::string& prefix, Node edge_scalars, XijMode mode) {
  Fiber f_eff = effective_fiber(f_in, mode);
  DegreeMap src = gather_sources(ctx, g, feats, f_in, mode);
  std::size_t E = g.edges.size();
  DegreeMap out;
  for (const auto& o : f_out.entries) {
    int l = o.degree;
    std::size_t mo = o.multiplicity, dl = 2 * l + 1;
    Node msg;
    bool first = true;
    for (const auto& i : f_eff.entries) {
      int k = i.degree;
      std::size_t mi = i.multiplicity, dk = 2 * k + 1;
      std::size_t B = 2 * std::min(k, l) + 1;
      Node rw = radial_net(ctx, detail::rn_name(prefix, k, l), edge_scalars);
      rw = ad::reshape(rw, {E, mo, mi * B});  // row-major [co][ci][J]
      Node bas = ad::reshape(ctx.constant(basis.stack(k, l)), {E, B * dl, dk});
      Node tmp = ad::matmul(bas, ad::transpose(src.at(k), {0, 2, 1}));  // (E, B*dl, mi)
      tmp = ad::reshape(tmp, {E, B, dl, mi});
      tmp = ad::transpose(tmp, {0, 3, 1, 2});  // (E, mi, B, dl)
      tmp = ad::reshape(tmp, {E, mi * B, dl});
      Node m = ad::matmul(rw, tmp);  // (E, mo, dl)
      msg = first ? m : ad::add(msg, m);
      first = false;
    }
    out[l] = msg;
  }
  return out;
}

// -------- TFN layer --------

enum class SelfInteraction { none, linear, channel_mix };

inline void init_tfn(ad::ParameterStore& ps, const std::string& prefix, const Fiber& f_in,
                     const Fiber& f_out, std::size_t edge_scalar_dim, SelfInteraction si,
                     std::mt19937_64& rng) {
  init_conv(ps, prefix, f_in, f_out, edge_scalar_dim, rng);
  for (const auto& o : f_out.entries) {
    if (si == SelfInteraction::linear && f_in.has(o.degree)) {
      std::size_t mi = f_in.multiplicity(o.degree);
      ps.add(prefix + ".si.d" + std::to_string(o.degree),
             ad::random_normal({o.multiplicity, mi}, 0.0, 1.0 / std::sqrt(double(mi)), rng));
    } else if (si == SelfInteraction::channel_mix) {
      ps.add(prefix + ".mix.d" + std::to_string(o.degree),
             ad::random_normal({o.multiplicity, o.multiplicity}, 0.0,
                               1.0 / std::sqrt(double(o.multiplicity)), rng));
    }
  }
}

/// Mean-aggregated equivariant graph convolution. channel_mix multiplies
/// each per-edge message by an mo x mo matrix before aggregation; linear
/// self-interaction adds W·input for degrees present in the input.
inline DegreeMap tfn_layer(LayerContext& ctx, const GeometricGraph& g, const EdgeBasis& basis,
                           const DegreeMap& feats, const Fiber& f_in, const Fiber& f_out,
                           const std::string& prefix, Node edge_scalars, SelfInteraction si) {
  DegreeMap msgs =
      conv_messages(ctx, g, basis, feats, f_in, f_out, prefix, edge_scalars, XijMode::none);
  auto dst = g.edge_dst();
  std::size_t N = g.num_nodes();
  DegreeMap out;
  for (const auto& o : f_out.entries) {
    int l = o.degree;
    Node m = msgs.at(l);
    if (si == SelfInteraction::channel_mix)
      m = ad::matmul(ctx.param(prefix + ".mix.d" + std::to_string(l)), m);
    Node agg = ad::segment_mean(m, dst, N);
    if (si == SelfInteraction::linear && f_in.has(l))
      agg = ad::add(agg, ad::matmul(ctx.param(prefix + ".si.d" + std::to_string(l)), feats.at(l)));
    out[l] = agg;
  }
  return out;
}

// -------- attention --------

struct AttentionCfg {
  std::size_t n_heads = 1;
  double div = 1;
  XijMode x_ij = XijMode::none;
};

/// Value fiber: floor(mo/div) channels per output degree, at least 1.
inline Fiber mid_fiber(const Fiber& f_out, double div) {
  std::vector<Fiber::Entry> e;
  for (const auto& o : f_out.entries)
    e.push_back({std::max<std::size_t>(1, static_cast<std::size_t>(o.multiplicity / div)),
                 o.degree});
  return Fiber(e);
}

/// Key/query fiber: the value fiber restricted to degrees present in the
/// input (queries are built from node features).
inline Fiber restrict_fiber(const Fiber& f, const Fiber& to) {
  std::vector<Fiber::Entry> e;
  for (const auto& ent : f.entries)
    if (to.has(ent.degree)) e.push_back(ent);
  return Fiber(e);
}

inline void check_heads(const Fiber& f, std::size_t H, const char* what) {
  for (const auto& e : f.entries)
    if (e.multiplicity % H != 0)
      throw std::invalid_argument(std::string(what) +
                                  ": multiplicity not divisible by n_heads");
}

/// Per degree, split channels into H head groups and flatten; concatenate
/// across degrees ascending. Output (entities, H, n_features/H).
inline Node fiber2head(const DegreeMap& emb, const Fiber& fib, std::size_t H) {
  check_heads(fib, H, "fiber2head");
  std::vector<Node> parts;
  for (const auto& e : fib.entries) {
    Node x = emb.at(e.degree);
    std::size_t n = x.tape->val(x).shape[0];
    parts.push_back(ad::reshape(x, {n, H, (e.multiplicity / H) * (2 * e.degree + 1u)}));
  }
  return parts.size() == 1 ? parts[0] : ad::concat(parts, 2);
}

struct AttentionScores {
  Node raw;   // (E, H) scaled dot products
  Node attn;  // (E, H) softmax over edges sharing a destination, per head
};

inline AttentionScores attention_scores(const GeometricGraph& g, Node q_heads, Node k_heads,
                                        std::size_t d) {
  auto dst = g.edge_dst();
  Node qe = ad::gather_rows(q_heads, dst);
  Node raw = ad::smul(ad::sum(ad::mul(qe, k_heads), 2), 1.0 / std::sqrt(double(d)));
  return {raw, ad::softmax_segments(raw, dst)};
}

/// Softmax-weighted sum of per-edge value messages over incoming edges
/// (sum, not mean), heads folded back into the channel axis.
inline DegreeMap attention_aggregate(const GeometricGraph& g, Node attn, const DegreeMap& values,
                                     const Fiber& f_mid_out, std::size_t H) {
  std::size_t E = g.edges.size(), N = g.num_nodes();
  Node vh = fiber2head(values, f_mid_out, H);  // (E, H, cv)
  Node w = ad::mul(ad::reshape(attn, {E, H, 1}), vh);
  Node agg = ad::segment_sum(w, g.edge_dst(), N);  // (N, H, cv)
  DegreeMap out;
  std::size_t off = 0;
  for (const auto& e : f_mid_out.entries) {
    std::size_t len = (e.multiplicity / H) * (2 * e.degree + 1);
    out[e.degree] = ad::reshape(ad::slice(agg, 2, off, len), {N, e.multiplicity,
                                                              2 * e.degree + 1u});
    off += len;
  }
  return out;
}

inline void init_attentive_self_interaction(ad::ParameterStore& ps, const std::string& prefix,
                                            const Fiber& f_in, const Fiber& f_mid_out,
                                            const Fiber& f_out, std::mt19937_64& rng) {
  for (const auto& o : f_out.entries) {
    std::size_t mcat = f_in.multiplicity(o.degree) + f_mid_out.multiplicity(o.degree);
    if (mcat == 0)
      throw std::invalid_argument("attentive self-interaction: degree " +
                                  std::to_string(o.degree) + " absent from inputs and messages");
    init_linear(ps, prefix + ".asi.d" + std::to_string(o.degree), mcat * mcat,
                mcat * o.multiplicity, rng);
  }
}

/// Recombines concatenated input+message channels per degree with weights
/// from a row-softmaxed FFN over all pairwise channel dot products.
inline DegreeMap attentive_self_interaction(LayerContext& ctx, const std::string& prefix,
                                            const Fiber& f_in, const Fiber& f_mid_out,
                                            const Fiber& f_out, const DegreeMap& feats,
                                            const DegreeMap& msgs) {
  DegreeMap out;
  for (const auto& o : f_out.entries) {
    int l = o.degree;
    std::size_t mo = o.multiplicity;
    std::vector<Node> cats;
    if (f_in.has(l)) cats.push_back(feats.at(l));
    if (f_mid_out.has(l)) cats.push_back(msgs.at(l));
    Node cat = cats.size() == 1 ? cats[0] : ad::concat(cats, 1);  // (N, mcat, 2l+1)
    std::size_t mcat = f_in.multiplicity(l) + f_mid_out.multiplicity(l);
    std::size_t N = ctx.tape.val(cat).shape[0];
    Node dots = ad::matmul(cat, ad::transpose(cat, {0, 2, 1}));  // (N, mcat, mcat)
    dots = ad::signed_clamp_min(ad::reshape(dots, {N, mcat * mcat}), 1e-12);
    Node h = ad::leaky_relu(ad::layer_norm_last(dots), 0.01);
    h = linear(ctx, prefix + ".asi.d" + std::to_string(l), h);  // (N, mcat*mo)
    Node w = ad::softmax_last(ad::reshape(h, {N, mo, mcat}));
    out[l] = ad::matmul(w, cat);  // (N, mo, 2l+1)
  }
  return out;
}

inline void init_attention(ad::ParameterStore& ps, const std::string& prefix, const Fiber& f_in,
                           const Fiber& f_out, const AttentionCfg& cfg, std::size_t edge_scalar_dim,
                           std::mt19937_64& rng) {
  Fiber f_eff = effective_fiber(f_in, cfg.x_ij);
  Fiber f_mid_out = mid_fiber(f_out, cfg.div);
  Fiber f_mid_in = restrict_fiber(f_mid_out, f_in);
  check_heads(f_mid_in, cfg.n_heads, "attention keys/queries");
  check_heads(f_mid_out, cfg.n_heads, "attention values");
  init_conv(ps, prefix + ".key", f_eff, f_mid_in, edge_scalar_dim, rng);
  init_conv(ps, prefix + ".value", f_eff, f_mid_out, edge_scalar_dim, rng);
  for (const auto& e : f_mid_in.entries) {
    std::size_t mi = f_in.multiplicity(e.degree);
    ps.add(prefix + ".q.d" + std::to_string(e.degree),
           ad::random_normal({e.multiplicity, mi}, 0.0, 1.0 / std::sqrt(double(mi)), rng));
  }
  init_attentive_self_interaction(ps, prefix, f_in, f_mid_out, f_out, rng);
}

/// One multi-head SE(3) attention block: node-based queries, edge-based
/// keys/values, segmented softmax over incoming edges, attentive
/// self-interaction to the output fiber.
inline DegreeMap attention_block(LayerContext& ctx, const GeometricGraph& g,
                                 const EdgeBasis& basis, const DegreeMap& feats,
                                 const Fiber& f_in, const Fiber& f_out, const AttentionCfg& cfg,
                                 const std::string& prefix, Node edge_scalars) {
  Fiber f_mid_out = mid_fiber(f_out, cfg.div);
  Fiber f_mid_in = restrict_fiber(f_mid_out, f_in);
  DegreeMap keys = conv_messages(ctx, g, basis, feats, f_in, f_mid_in, prefix + ".key",
                                 edge_scalars, cfg.x_ij);
  DegreeMap vals = conv_messages(ctx, g, basis, feats, f_in, f_mid_out, prefix + ".value",
                                 edge_scalars, cfg.x_ij);
  DegreeMap q;
  for (const auto& e : f_mid_in.entries)
    q[e.degree] =
        ad::matmul(ctx.param(prefix + ".q.d" + std::to_string(e.degree)), feats.at(e.degree));
  Node qh = fiber2head(q, f_mid_in, cfg.n_heads);
  Node kh = fiber2head(keys, f_mid_in, cfg.n_heads);
  AttentionScores sc = attention_scores(g, qh, kh, f_mid_in.n_features());
  DegreeMap msgs = attention_aggregate(g, sc.attn, vals, f_mid_out, cfg.n_heads);
  return attentive_self_interaction(ctx, prefix, f_in, f_mid_out, f_out, feats, msgs);
}

// -------- norm nonlinearity --------

inline void init_norm_nonlinearity(ad::ParameterStore& ps, const std::string& prefix,
                                   const Fiber& fib, std::mt19937_64& rng) {
  for (const auto& e : fib.entries)
    init_linear(ps, prefix + ".nl.d" + std::to_string(e.degree), e.multiplicity, e.multiplicity,
                rng);
}

/// Scales each channel's unit direction by an FFN of the channel norms.
inline DegreeMap norm_nonlinearity(LayerContext& ctx, const std::string& prefix, const Fiber& fib,
                                   const DegreeMap& feats) {
  DegreeMap out;
  for (const auto& e : fib.entries) {
    Node f = feats.at(e.degree);
    std::size_t N = ctx.tape.val(f).shape[0];
    Node nrm = ad::l2_norm_last(f, 1e-12);  // (N, m, 1)
    Node phase = ad::div(f, nrm);
    Node s = ad::relu(ad::layer_norm_last(ad::reshape(nrm, {N, e.multiplicity})));
    s = linear(ctx, prefix + ".nl.d" + std::to_string(e.degree), s);  // (N, m)
    out[e.degree] = ad::mul(phase, ad::reshape(s, {N, e.multiplicity, 1}));
  }
  return out;
}

// -------- pooling --------

enum class PoolMode { max, avg };

inline PoolMode pool_from_name(const std::string& s) {
  if (s == "max") return PoolMode::max;
  if (s == "avg") return PoolMode::avg;
  throw std::invalid_argument("unknown pooling mode: " + s);
}

/// Pools type-0 channels over nodes; higher degrees are rejected since
/// pooling them would break invariance.
inline Node pool_type0(LayerContext& ctx, const DegreeMap& feats, PoolMode mode) {
  for (const auto& [deg, node] : feats)
    if (deg != 0) throw std::invalid_argument("pool: non-scalar degree " + std::to_string(deg));
  Node f = feats.at(0);
  const auto& shape = ctx.tape.val(f).shape;
  Node x = ad::reshape(f, {shape[0], shape[1]});
  return mode == PoolMode::max ? ad::max_axis0(x) : ad::mean(x, 0);
}

// -------- full model --------

struct ModelConfig {
  int max_degree = 3;
  std::size_t num_blocks = 7;
  std::size_t num_channels = 32;
  std::size_t n_heads = 8;
  double div = 2;
  std::string x_ij = "cat";
  std::string pooling = "max";
  std::size_t decoder_channels = 128;
  std::size_t in_channels = 6;       // type-0 node channels
  std::size_t edge_scalar_dim = 5;   // distance + bond one-hot

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.max_degree = j.value("max_degree", c.max_degree);
    c.num_blocks = j.value("num_blocks", c.num_blocks);
    c.num_channels = j.value("num_channels", c.num_channels);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.div = j.value("div", c.div);
    c.x_ij = j.value("x_ij", c.x_ij);
    c.pooling = j.value("pooling", c.pooling);
    c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.edge_scalar_dim = j.value("edge_scalar_dim", c.edge_scalar_dim);
    xij_from_name(c.x_ij);
    pool_from_name(c.pooling);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"max_degree", max_degree},
            {"num_blocks", num_blocks},
            {"num_channels", num_channels},
            {"n_heads", n_heads},
            {"div", div},
            {"x_ij", x_ij},
            {"pooling", pooling},
            {"decoder_channels", decoder_channels},
            {"in_channels", in_channels},
            {"edge_scalar_dim", edge_scalar_dim}};
  }

  Fiber input_fiber() const { return Fiber({{in_channels, 0}}); }
  Fiber hidden_fiber() const { return Fiber::uniform(num_channels, max_degree); }
};

inline void init_model(ad::ParameterStore& ps, const ModelConfig& cfg, std::mt19937_64& rng) {
  Fiber hidden = cfg.hidden_fiber();
  AttentionCfg acfg{cfg.n_heads, cfg.div, xij_from_name(cfg.x_ij)};
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    Fiber fi = (b == 0) ? cfg.input_fiber() : hidden;
    std::string prefix = "block" + std::to_string(b);
    init_attention(ps, prefix, fi, hidden, acfg, cfg.edge_scalar_dim, rng);
    init_norm_nonlinearity(ps, prefix + ".norm", hidden, rng);
  }
  init_tfn(ps, "dec.tfn", hidden, Fiber({{cfg.decoder_channels, 0}}), cfg.edge_scalar_dim,
           SelfInteraction::linear, rng);
  init_linear(ps, "dec.fc1", cfg.decoder_channels, cfg.decoder_channels, rng);
  init_linear(ps, "dec.fc2", cfg.decoder_channels, 1, rng);
}

inline ad::Array edge_scalar_array(const GeometricGraph& g, std::size_t dim) {
  ad::Array a = ad::Array::zeros({g.edges.size(), dim});
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto& s = g.edges[e].scalars;
    if (s.size() != dim)
      throw std::invalid_argument("edge scalar width " + std::to_string(s.size()) +
                                  " does not match configured dim " + std::to_string(dim));
    for (std::size_t i = 0; i < dim; ++i) a.data[e * dim + i] = s[i];
  }
  return a;
}

/// Attention encoder + TFN decoder + pool + scalar head.
inline Node model_forward(LayerContext& ctx, const ModelConfig& cfg, const GeometricGraph& g,
                          const EdgeBasis& basis) {
  if (!g.node_features.count(0))
    throw std::invalid_argument("model_forward: graph lacks type-0 node features");
  Fiber hidden = cfg.hidden_fiber();
  AttentionCfg acfg{cfg.n_heads, cfg.div, xij_from_name(cfg.x_ij)};
  Node edge_scalars = ctx.constant(edge_scalar_array(g, cfg.edge_scalar_dim));
  DegreeMap feats;
  feats[0] = ctx.constant(g.node_features.at(0));
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    Fiber fi = (b == 0) ? cfg.input_fiber() : hidden;
    std::string prefix = "block" + std::to_string(b);
    feats = attention_block(ctx, g, basis, feats, fi, hidden, acfg, prefix, edge_scalars);
    feats = norm_nonlinearity(ctx, prefix + ".norm", hidden, feats);
  }
  DegreeMap dec = tfn_layer(ctx, g, basis, feats, hidden, Fiber({{cfg.decoder_channels, 0}}),
                            "dec.tfn", edge_scalars, SelfInteraction::linear);
  Node pooled = ad::reshape(pool_type0(ctx, dec, pool_from_name(cfg.pooling)),
                            {1, cfg.decoder_channels});
  Node h = ad::relu(linear(ctx, "dec.fc1", pooled));
  Node y = linear(ctx, "dec.fc2", h);  // (1,1)
  return ad::reshape(y, {});
}

}  // namespace so3kit
