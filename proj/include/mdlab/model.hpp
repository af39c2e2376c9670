#pragma once

// Toy bidirectional diffusion transformer.
//
//   x_0      = token embedding rows | visual inputs * vis_proj + vis_bias
//   x        = x + Attn(RMSNorm(x))      (bidirectional, RoPE on q/k)
//   x        = x + W2 silu(W1 RMSNorm(x))
//   h_final  = RMSNorm(x_L)
//   logits   = h_final * tok_embed^T     (tied head)
//
// Everything is templated on the scalar so the trainer can run gradient
// checks in double while inference runs in float.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdlab/error.hpp"
#include "mdlab/numkit.hpp"
#include "mdlab/rng.hpp"
#include "mdlab/rope.hpp"

namespace mdlab::model {

using num::BasicMatrix;
using num::Matrix;

struct ModelSpec {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t mlp_hidden = 64;
  std::size_t d_visual = 16;
  int pad_id = 0;
  int eot_id = 1;
  int mask_id = 2;
  double rms_eps = 1e-5;

  std::size_t d_head() const { return n_heads ? d_model / n_heads : 0; }
  bool is_special(int id) const { return id == pad_id || id == eot_id || id == mask_id; }
  bool operator==(const ModelSpec&) const = default;
};

inline std::vector<std::string> validate(const ModelSpec& s, const std::string& path = "model") {
  std::vector<std::string> out;
  auto bad = [&](const std::string& f, const std::string& m) { out.push_back(path + "." + f + ": " + m); };
  if (s.vocab_size < 4) bad("vocab_size", "must be >= 4");
  if (s.d_model == 0) bad("d_model", "must be > 0");
  if (s.n_heads == 0 || s.d_model % s.n_heads != 0) bad("n_heads", "must divide d_model");
  else if (s.d_head() % 2 != 0) bad("n_heads", "d_head = d_model / n_heads must be even");
  if (s.n_layers == 0) bad("n_layers", "must be > 0");
  if (s.mlp_hidden == 0) bad("mlp_hidden", "must be > 0");
  if (s.d_visual == 0) bad("d_visual", "must be > 0");
  const auto v = static_cast<long>(s.vocab_size);
  for (auto [name, id] : {std::pair{"pad_id", s.pad_id}, {"eot_id", s.eot_id}, {"mask_id", s.mask_id}})
    if (id < 0 || id >= v) bad(name, "must lie in [0, vocab_size)");
  if (s.pad_id == s.eot_id || s.pad_id == s.mask_id || s.eot_id == s.mask_id)
    bad("mask_id", "special ids must be distinct");
  if (!(s.rms_eps > 0)) bad("rms_eps", "must be > 0");
  return out;
}

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"vocab_size", s.vocab_size}, {"d_model", s.d_model}, {"n_heads", s.n_heads},
       {"n_layers", s.n_layers},     {"mlp_hidden", s.mlp_hidden}, {"d_visual", s.d_visual},
       {"pad_id", s.pad_id},         {"eot_id", s.eot_id},         {"mask_id", s.mask_id},
       {"rms_eps", s.rms_eps}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  ModelSpec d;
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.d_model = j.value("d_model", d.d_model);
  s.n_heads = j.value("n_heads", d.n_heads);
  s.n_layers = j.value("n_layers", d.n_layers);
  s.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  s.d_visual = j.value("d_visual", d.d_visual);
  s.pad_id = j.value("pad_id", d.pad_id);
  s.eot_id = j.value("eot_id", d.eot_id);
  s.mask_id = j.value("mask_id", d.mask_id);
  s.rms_eps = j.value("rms_eps", d.rms_eps);
}

template <typename T>
struct LayerWeights {
  BasicMatrix<T> attn_norm;  // 1 x d
  BasicMatrix<T> wq, wk, wv, wo;  // d x d
  BasicMatrix<T> mlp_norm;   // 1 x d
  BasicMatrix<T> w1;         // d x hidden
  BasicMatrix<T> w2;         // hidden x d
};

template <typename T>
struct Weights {
  BasicMatrix<T> tok_embed;  // V x d
  BasicMatrix<T> vis_proj;   // d_visual x d
  BasicMatrix<T> vis_bias;   // 1 x d
  std::vector<LayerWeights<T>> layers;
  BasicMatrix<T> final_norm;  // 1 x d

  static Weights zeros(const ModelSpec& s) {
    Weights w;
    const std::size_t d = s.d_model;
    w.tok_embed = BasicMatrix<T>(s.vocab_size, d);
    w.vis_proj = BasicMatrix<T>(s.d_visual, d);
    w.vis_bias = BasicMatrix<T>(1, d);
    w.layers.resize(s.n_layers);
    for (auto& l : w.layers) {
      l.attn_norm = BasicMatrix<T>(1, d);
      l.wq = l.wk = l.wv = l.wo = BasicMatrix<T>(d, d);
      l.mlp_norm = BasicMatrix<T>(1, d);
      l.w1 = BasicMatrix<T>(d, s.mlp_hidden);
      l.w2 = BasicMatrix<T>(s.mlp_hidden, d);
    }
    w.final_norm = BasicMatrix<T>(1, d);
    return w;
  }

  // f(name, matrix, rank) in a fixed order; rank 1 marks gain/bias vectors.
  template <typename F>
  void visit(F&& f) {
    f(std::string("tok_embed"), tok_embed, 2);
    f(std::string("vis_proj"), vis_proj, 2);
    f(std::string("vis_bias"), vis_bias, 1);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      auto& l = layers[i];
      f(p + "attn_norm", l.attn_norm, 1);
      f(p + "wq", l.wq, 2);
      f(p + "wk", l.wk, 2);
      f(p + "wv", l.wv, 2);
      f(p + "wo", l.wo, 2);
      f(p + "mlp_norm", l.mlp_norm, 1);
      f(p + "w1", l.w1, 2);
      f(p + "w2", l.w2, 2);
    }
    f(std::string("final_norm"), final_norm, 1);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<Weights*>(this)->visit([&](const std::string& n, BasicMatrix<T>& m, int r) {
      f(n, static_cast<const BasicMatrix<T>&>(m), r);
    });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const BasicMatrix<T>& m, int) { n += m.size(); });
    return n;
  }

  template <typename U>
  Weights<U> cast() const {
    Weights<U> out;
    out.tok_embed = tok_embed.template cast<U>();
    out.vis_proj = vis_proj.template cast<U>();
    out.vis_bias = vis_bias.template cast<U>();
    out.final_norm = final_norm.template cast<U>();
    for (const auto& l : layers) {
      LayerWeights<U> c;
      c.attn_norm = l.attn_norm.template cast<U>();
      c.wq = l.wq.template cast<U>();
      c.wk = l.wk.template cast<U>();
      c.wv = l.wv.template cast<U>();
      c.wo = l.wo.template cast<U>();
      c.mlp_norm = l.mlp_norm.template cast<U>();
      c.w1 = l.w1.template cast<U>();
      c.w2 = l.w2.template cast<U>();
      out.layers.push_back(std::move(c));
    }
    return out;
  }

  bool operator==(const Weights& o) const {
    bool eq = true;
    auto& self = *this;
    std::vector<const BasicMatrix<T>*> mine, theirs;
    self.visit([&](const std::string&, const BasicMatrix<T>& m, int) { mine.push_back(&m); });
    o.visit([&](const std::string&, const BasicMatrix<T>& m, int) { theirs.push_back(&m); });
    if (mine.size() != theirs.size()) return false;
    for (std::size_t i = 0; i < mine.size(); ++i) eq = eq && (*mine[i] == *theirs[i]);
    return eq;
  }
};

template <typename T>
Weights<T> init_weights(const ModelSpec& s, std::uint64_t seed) {
  Weights<T> w = Weights<T>::zeros(s);
  Rng rng(hash_string(seed, "init"));
  auto gaussian = [&](BasicMatrix<T>& m, double std) {
    for (auto& x : m.values()) x = static_cast<T>(std * rng.normal());
  };
  const double d = static_cast<double>(s.d_model);
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(s.n_layers));
  gaussian(w.tok_embed, 1.0 / std::sqrt(d));
  gaussian(w.vis_proj, 1.0 / std::sqrt(static_cast<double>(s.d_visual)));
  for (auto& l : w.layers) {
    l.attn_norm.fill(T{1});
    l.mlp_norm.fill(T{1});
    gaussian(l.wq, 1.0 / std::sqrt(d));
    gaussian(l.wk, 1.0 / std::sqrt(d));
    gaussian(l.wv, 1.0 / std::sqrt(d));
    gaussian(l.wo, out_scale / std::sqrt(d));
    gaussian(l.w1, 1.0 / std::sqrt(d));
    gaussian(l.w2, out_scale / std::sqrt(static_cast<double>(s.mlp_hidden)));
  }
  w.final_norm.fill(T{1});
  return w;
}

struct SegmentSpan {
  std::size_t start = 0;
  std::size_t len = 0;
  std::size_t end() const { return start + len; }
  bool contains(std::size_t j) const { return j >= start && j < end(); }
  bool operator==(const SegmentSpan&) const = default;
};

// Flat sequence: visual | prompt | generation, in that order and contiguous.
struct SequenceLayout {
  SegmentSpan visual, prompt, generation;
  std::vector<int> tokens;   // length J; visual positions carry pad_id
  Matrix visual_inputs;      // visual.len x d_visual
  std::size_t position_offset = 0;

  std::size_t length() const { return tokens.size(); }

  Segment segment_of(std::size_t j) const {
    if (visual.contains(j)) return Segment::visual;
    if (prompt.contains(j)) return Segment::prompt;
    return Segment::generation;
  }

  std::vector<std::size_t> masked_positions(int mask_id) const {
    std::vector<std::size_t> out;
    for (std::size_t j = generation.start; j < generation.end(); ++j)
      if (tokens[j] == mask_id) out.push_back(j);
    return out;
  }

  std::span<const int> generated() const { return {tokens.data() + generation.start, generation.len}; }

  static SequenceLayout make(const Matrix& visual_inputs, std::span<const int> prompt_ids,
                             std::span<const int> generation_ids, int pad_id) {
    SequenceLayout l;
    l.visual = {0, visual_inputs.rows()};
    l.prompt = {l.visual.end(), prompt_ids.size()};
    l.generation = {l.prompt.end(), generation_ids.size()};
    l.tokens.assign(l.visual.len, pad_id);
    l.tokens.insert(l.tokens.end(), prompt_ids.begin(), prompt_ids.end());
    l.tokens.insert(l.tokens.end(), generation_ids.begin(), generation_ids.end());
    l.visual_inputs = visual_inputs;
    return l;
  }

  bool operator==(const SequenceLayout&) const = default;
};

inline void validate_layout(const SequenceLayout& l, const ModelSpec& s) {
  if (l.visual.start != 0 || l.prompt.start != l.visual.end() || l.generation.start != l.prompt.end() ||
      l.generation.end() != l.tokens.size())
    throw std::invalid_argument("layout: segments must be contiguous visual -> prompt -> generation covering the sequence");
  if (l.visual.len > 0 && (l.visual_inputs.rows() != l.visual.len || l.visual_inputs.cols() != s.d_visual))
    throw std::invalid_argument("layout: visual inputs " + l.visual_inputs.shape() + " do not match visual span " +
                                std::to_string(l.visual.len) + " x d_visual " + std::to_string(s.d_visual));
  for (std::size_t j = l.prompt.start; j < l.tokens.size(); ++j) {
    const int id = l.tokens[j];
    if (id < 0 || static_cast<std::size_t>(id) >= s.vocab_size)
      throw std::invalid_argument("layout: token id " + std::to_string(id) + " at position " + std::to_string(j) +
                                  " outside vocabulary of size " + std::to_string(s.vocab_size));
  }
  for (std::size_t j = l.prompt.start; j < l.prompt.end(); ++j)
    if (l.tokens[j] == s.mask_id)
      throw std::invalid_argument("layout: mask token outside the generation span at position " + std::to_string(j));
}

template <typename T>
BasicMatrix<T> embed(const SequenceLayout& layout, const ModelSpec& spec, const Weights<T>& w) {
  validate_layout(layout, spec);
  const std::size_t d = spec.d_model;
  BasicMatrix<T> x(layout.length(), d);
  for (std::size_t j = 0; j < layout.length(); ++j) {
    if (layout.visual.contains(j)) {
      const auto in = layout.visual_inputs.row(j - layout.visual.start);
      for (std::size_t c = 0; c < d; ++c) {
        double acc = static_cast<double>(w.vis_bias(0, c));
        for (std::size_t r = 0; r < spec.d_visual; ++r)
          acc += static_cast<double>(in[r]) * static_cast<double>(w.vis_proj(r, c));
        x(j, c) = static_cast<T>(acc);
      }
    } else {
      const auto src = w.tok_embed.row(static_cast<std::size_t>(layout.tokens[j]));
      std::copy(src.begin(), src.end(), x.row(j).begin());
    }
  }
  return x;
}

// Intervention on hidden states of masked positions. Layer l in [1, L]; layer
// L is the final hidden state (after the final norm unless before_final_norm()).
template <typename T>
class HiddenHook {
 public:
  virtual ~HiddenHook() = default;
  virtual bool applies_at(std::size_t layer) const = 0;
  virtual void apply(std::size_t layer, std::span<T> h) const = 0;
  virtual bool before_final_norm() const { return false; }
};

template <typename T>
struct LayerCache {
  BasicMatrix<T> x_in, xn1;
  std::vector<double> inv1;
  BasicMatrix<T> q, k, v;  // q and k after rotation
  std::vector<BasicMatrix<T>> probs;  // per head, J x J
  BasicMatrix<T> attn;     // J x d, heads concatenated
  BasicMatrix<T> x_mid, xn2;
  std::vector<double> inv2;
  BasicMatrix<T> pre, act;  // J x hidden
};

template <typename T>
struct Activations {
  std::vector<LayerCache<T>> layers;
  BasicMatrix<T> x_last;  // last block output, final-norm input
  std::vector<double> inv_final;
};

template <typename T>
struct ForwardTrace {
  std::vector<BasicMatrix<T>> hidden;  // L+1 entries of J x d; [L] is post final norm, pre-hook
  BasicMatrix<T> final_hidden;         // J x d fed to the head (post-hook)
  BasicMatrix<T> logits;               // J x V (only rows in logit_rows when restricted)
  std::vector<std::vector<BasicMatrix<T>>> attention;  // [layer][head] J x J when recorded
};

struct ForwardOptions {
  bool record_attention = false;
  bool record_hidden = true;
  // Rows for which logits are produced; empty means every row.
  std::vector<std::size_t> logit_rows;
};

// Per-position cos/sin for each rotary pair.
struct RotaryCache {
  std::size_t pairs = 0;
  std::vector<double> cos, sin;  // J x pairs

  RotaryCache(const rope::PositionEncoding& pe, std::span<const Segment> segments, std::span<const std::size_t> positions) {
    pairs = pe.d_head() / 2;
    cos.resize(positions.size() * pairs);
    sin.resize(positions.size() * pairs);
    for (std::size_t j = 0; j < positions.size(); ++j) {
      const auto& t = pe.table_for(segments[j]);
      for (std::size_t i = 0; i < pairs; ++i) {
        const double a = t.angle(i, static_cast<double>(positions[j]));
        cos[j * pairs + i] = std::cos(a);
        sin[j * pairs + i] = std::sin(a);
      }
    }
  }

  // Rotates each head slice of row j; sign = -1 applies the inverse rotation.
  template <typename T>
  void rotate_row(std::span<T> row, std::size_t j, std::size_t n_heads, double sign = 1.0) const {
    const std::size_t dh = 2 * pairs;
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* v = row.data() + h * dh;
      for (std::size_t i = 0; i < pairs; ++i) {
        const double c = cos[j * pairs + i];
        const double s = sign * sin[j * pairs + i];
        const double x0 = v[2 * i];
        const double x1 = v[2 * i + 1];
        v[2 * i] = static_cast<T>(x0 * c - x1 * s);
        v[2 * i + 1] = static_cast<T>(x0 * s + x1 * c);
      }
    }
  }
};

namespace detail {

template <typename T>
void rms_rows(const BasicMatrix<T>& x, const BasicMatrix<T>& gain, double eps, BasicMatrix<T>& y, std::vector<double>& inv) {
  y = BasicMatrix<T>(x.rows(), x.cols());
  inv.resize(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) inv[r] = num::rms_norm(x.row(r), gain.row(0), y.row(r), eps);
}

inline double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

template <typename T>
void check_finite(const BasicMatrix<T>& m, std::size_t layer) {
  if (!num::all_finite(m.values()))
    throw NumericalError("non-finite activation at layer " + std::to_string(layer));
}

}  // namespace detail

// Core forward over precomputed input rows x0 (J x d).
template <typename T>
ForwardTrace<T> forward_embedded(const ModelSpec& spec, const Weights<T>& w, BasicMatrix<T> x,
                                 std::span<const Segment> segments, std::span<const std::size_t> positions,
                                 const rope::PositionEncoding& pe, std::span<const std::size_t> hook_rows,
                                 const HiddenHook<T>* hook, const ForwardOptions& opts,
                                 Activations<T>* cache = nullptr) {
  const std::size_t J = x.rows();
  const std::size_t d = spec.d_model;
  const std::size_t H = spec.n_heads;
  const std::size_t dh = spec.d_head();
  const std::size_t L = spec.n_layers;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (pe.d_head() != dh) throw std::invalid_argument("forward: rotary table d_head does not match model");

  RotaryCache rot(pe, segments, positions);
  ForwardTrace<T> trace;
  detail::check_finite(x, 0);
  if (opts.record_hidden) trace.hidden.push_back(x);
  if (cache) cache->layers.resize(L);

  auto apply_hook = [&](std::size_t layer, BasicMatrix<T>& m) {
    if (!hook || !hook->applies_at(layer)) return;
    for (std::size_t j : hook_rows) hook->apply(layer, m.row(j));
  };

  for (std::size_t l = 0; l < L; ++l) {
    const auto& lw = w.layers[l];
    LayerCache<T> local;
    LayerCache<T>& c = cache ? cache->layers[l] : local;
    c.x_in = x;
    detail::rms_rows(x, lw.attn_norm, spec.rms_eps, c.xn1, c.inv1);
    c.q = num::matmul(c.xn1, lw.wq);
    c.k = num::matmul(c.xn1, lw.wk);
    c.v = num::matmul(c.xn1, lw.wv);
    for (std::size_t j = 0; j < J; ++j) {
      rot.rotate_row(c.q.row(j), j, H);
      rot.rotate_row(c.k.row(j), j, H);
    }
    c.attn = BasicMatrix<T>(J, d);
    c.probs.assign(H, BasicMatrix<T>());
    std::vector<double> acc(dh);
    for (std::size_t h = 0; h < H; ++h) {
      BasicMatrix<T> p(J, J);
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < J; ++i) {
        const auto qi = c.q.row(i).subspan(off, dh);
        for (std::size_t j = 0; j < J; ++j) p(i, j) = static_cast<T>(scale * num::dot(qi, std::span<const T>(c.k.row(j).subspan(off, dh))));
        num::softmax_inplace(p.row(i));
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < J; ++j) {
          const double pij = p(i, j);
          const T* vj = c.v.row(j).data() + off;
          for (std::size_t e = 0; e < dh; ++e) acc[e] += pij * static_cast<double>(vj[e]);
        }
        for (std::size_t e = 0; e < dh; ++e) c.attn(i, off + e) = static_cast<T>(acc[e]);
      }
      c.probs[h] = std::move(p);
    }
    if (opts.record_attention) trace.attention.push_back(c.probs);
    BasicMatrix<T> o = num::matmul(c.attn, lw.wo);
    c.x_mid = x;
    for (std::size_t i = 0; i < c.x_mid.size(); ++i) c.x_mid.values()[i] += o.values()[i];
    detail::rms_rows(c.x_mid, lw.mlp_norm, spec.rms_eps, c.xn2, c.inv2);
    c.pre = num::matmul(c.xn2, lw.w1);
    c.act = c.pre;
    for (auto& a : c.act.values()) a = static_cast<T>(static_cast<double>(a) * detail::sigmoid(static_cast<double>(a)));
    BasicMatrix<T> m = num::matmul(c.act, lw.w2);
    x = c.x_mid;
    for (std::size_t i = 0; i < x.size(); ++i) x.values()[i] += m.values()[i];
    detail::check_finite(x, l + 1);
    if (l + 1 < L) {
      apply_hook(l + 1, x);
      if (opts.record_hidden) trace.hidden.push_back(x);
    }
  }

  BasicMatrix<T> xf;
  std::vector<double> inv_f;
  if (hook && hook->before_final_norm() && hook->applies_at(L)) {
    BasicMatrix<T> unhooked;
    std::vector<double> tmp;
    detail::rms_rows(x, w.final_norm, spec.rms_eps, unhooked, tmp);
    if (opts.record_hidden) trace.hidden.push_back(unhooked);
    apply_hook(L, x);
    detail::rms_rows(x, w.final_norm, spec.rms_eps, xf, inv_f);
    trace.final_hidden = xf;
  } else {
    detail::rms_rows(x, w.final_norm, spec.rms_eps, xf, inv_f);
    if (opts.record_hidden) trace.hidden.push_back(xf);
    trace.final_hidden = xf;
    if (!(hook && hook->before_final_norm())) apply_hook(L, trace.final_hidden);
  }
  detail::check_finite(trace.final_hidden, L);
  if (cache) {
    cache->x_last = x;
    cache->inv_final = inv_f;
  }

  if (opts.logit_rows.empty()) {
    trace.logits = num::matmul_bt(trace.final_hidden, w.tok_embed);
  } else {
    BasicMatrix<T> sel(opts.logit_rows.size(), d);
    for (std::size_t r = 0; r < opts.logit_rows.size(); ++r) {
      const auto src = trace.final_hidden.row(opts.logit_rows[r]);
      std::copy(src.begin(), src.end(), sel.row(r).begin());
    }
    trace.logits = num::matmul_bt(sel, w.tok_embed);
  }
  return trace;
}

template <typename T>
ForwardTrace<T> forward(const ModelSpec& spec, const Weights<T>& w, const SequenceLayout& layout,
                        const rope::PositionEncoding& pe, const HiddenHook<T>* hook = nullptr,
                        const ForwardOptions& opts = {}, Activations<T>* cache = nullptr) {
  BasicMatrix<T> x = embed(layout, spec, w);
  std::vector<Segment> segs(layout.length());
  std::vector<std::size_t> pos(layout.length());
  for (std::size_t j = 0; j < layout.length(); ++j) {
    segs[j] = layout.segment_of(j);
    pos[j] = j + layout.position_offset;
  }
  const auto masked = layout.masked_positions(spec.mask_id);
  return forward_embedded(spec, w, std::move(x), segs, pos, pe, masked, hook, opts, cache);
}

template <typename T>
struct UncontextualizedResult {
  std::vector<std::vector<T>> states;  // L+1 states h_0..h_L, each d
  std::vector<T> logits;               // V
};

// A single embedding vector forwarded alone at position 0.
template <typename T>
UncontextualizedResult<T> uncontextualized_forward(const ModelSpec& spec, const Weights<T>& w, std::span<const T> e,
                                                   const rope::PositionEncoding& pe) {
  if (e.size() != spec.d_model) throw std::invalid_argument("uncontextualized_forward: embedding must have d_model entries");
  BasicMatrix<T> x(1, spec.d_model, std::vector<T>(e.begin(), e.end()));
  const Segment seg = Segment::generation;
  const std::size_t pos = 0;
  auto tr = forward_embedded<T>(spec, w, std::move(x), std::span<const Segment>(&seg, 1),
                                std::span<const std::size_t>(&pos, 1), pe, {}, nullptr, ForwardOptions{});
  UncontextualizedResult<T> out;
  for (const auto& h : tr.hidden) out.states.emplace_back(h.row(0).begin(), h.row(0).end());
  out.logits.assign(tr.logits.row(0).begin(), tr.logits.row(0).end());
  return out;
}

}  // namespace mdlab::model
