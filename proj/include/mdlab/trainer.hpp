#pragma once

// Masked-diffusion training of the toy model with hand-written reverse-mode
// gradients and Adam.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdlab/corpus.hpp"
#include "mdlab/error.hpp"
#include "mdlab/model.hpp"
#include "mdlab/numkit.hpp"
#include "mdlab/rng.hpp"
#include "mdlab/rope.hpp"

namespace mdlab::train {

using model::Activations;
using model::ModelSpec;
using model::Weights;
using num::BasicMatrix;

enum class Weighting { inverse_t, uniform };

NLOHMANN_JSON_SERIALIZE_ENUM(Weighting, {{Weighting::inverse_t, "inverse_t"}, {Weighting::uniform, "uniform"}})

struct TrainConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::size_t batch_size = 16;
  std::size_t total_steps = 1500;
  std::size_t warmup_steps = 50;
  Weighting weighting = Weighting::inverse_t;
  // Fraction of samples trained with visual and prompt dropped and every
  // response position masked: the only context a lone mask token ever sees.
  double context_dropout = 0.0;
  std::uint64_t seed = 1;
  bool operator==(const TrainConfig&) const = default;
};

inline std::vector<std::string> validate(const TrainConfig& c, const std::string& path = "train") {
  std::vector<std::string> out;
  auto bad = [&](const std::string& f, const std::string& m) { out.push_back(path + "." + f + ": " + m); };
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) bad("lr", "must be finite and >= 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) bad("beta1", "must lie in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) bad("beta2", "must lie in [0, 1)");
  if (!(c.eps > 0.0)) bad("eps", "must be > 0");
  if (!(c.grad_clip >= 0.0)) bad("grad_clip", "must be >= 0");
  if (c.batch_size < 1) bad("batch_size", "must be >= 1");
  if (c.total_steps < 1) bad("total_steps", "must be >= 1");
  if (!(c.context_dropout >= 0.0 && c.context_dropout <= 1.0)) bad("context_dropout", "must lie in [0, 1]");
  return out;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"grad_clip", c.grad_clip},
       {"batch_size", c.batch_size}, {"total_steps", c.total_steps}, {"warmup_steps", c.warmup_steps},
       {"weighting", c.weighting}, {"context_dropout", c.context_dropout}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.weighting = j.value("weighting", d.weighting);
  c.context_dropout = j.value("context_dropout", d.context_dropout);
  c.seed = j.value("seed", d.seed);
}

struct Corrupted {
  std::vector<int> tokens;    // response with masked entries replaced by mask_id
  std::vector<bool> masked;
};

// Each response position is masked independently with probability t.
inline Corrupted mask_forward_process(std::span<const int> response, double t, int mask_id, Rng& rng) {
  if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("mask_forward_process: t must lie in (0, 1], got " + std::to_string(t));
  Corrupted c;
  c.tokens.assign(response.begin(), response.end());
  c.masked.assign(response.size(), false);
  for (std::size_t i = 0; i < response.size(); ++i) {
    if (t >= 1.0 || rng.uniform() < t) {
      c.masked[i] = true;
      c.tokens[i] = mask_id;
    }
  }
  return c;
}

struct Example {
  model::SequenceLayout layout;  // corrupted sequence
  std::vector<int> targets;      // per position; -1 where no loss applies
  double t = 1.0;
};

inline Example make_example(const corpus::SceneSample& s, double t, int mask_id, Rng& rng) {
  const auto c = mask_forward_process(s.response, t, mask_id, rng);
  Example ex;
  ex.layout = model::SequenceLayout::make(s.visual, s.prompt, c.tokens, corpus::vocab::pad);
  ex.targets.assign(ex.layout.length(), -1);
  for (std::size_t i = 0; i < c.masked.size(); ++i)
    if (c.masked[i]) ex.targets[ex.layout.generation.start + i] = s.response[i];
  ex.t = t;
  return ex;
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  Weights<T> grads;
  std::size_t contributing = 0;
};

namespace detail {

template <typename T>
void add_into(BasicMatrix<T>& acc, const BasicMatrix<T>& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc.values()[i] += g.values()[i];
}

// Backward of y = gain * x * inv per row.
template <typename T>
void rms_backward(const BasicMatrix<T>& x, const BasicMatrix<T>& gain, const std::vector<double>& inv,
                  const BasicMatrix<T>& dy, BasicMatrix<T>& dx_accum, BasicMatrix<T>& dgain) {
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double iv = inv[r];
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += static_cast<double>(gain(0, i)) * dy(r, i) * x(r, i);
    const double k = iv * iv * iv / static_cast<double>(d) * s;
    for (std::size_t i = 0; i < d; ++i) {
      dx_accum(r, i) += static_cast<T>(iv * gain(0, i) * dy(r, i) - k * x(r, i));
      dgain(0, i) += static_cast<T>(static_cast<double>(dy(r, i)) * x(r, i) * iv);
    }
  }
}

}  // namespace detail

// Per-example loss (1/t or uniform weight) * sum of masked cross-entropies / |masked|,
// accumulated into `grads` scaled by `scale`.
template <typename T>
double example_loss_and_grads(const ModelSpec& spec, const Weights<T>& w, const Example& ex, Weighting weighting,
                              const rope::PositionEncoding& pe, double scale, Weights<T>& grads) {
  std::vector<std::size_t> rows;
  for (std::size_t j = 0; j < ex.targets.size(); ++j)
    if (ex.targets[j] >= 0) rows.push_back(j);
  if (rows.empty()) return 0.0;

  model::ForwardOptions opts;
  opts.record_hidden = false;
  opts.logit_rows = rows;
  Activations<T> cache;
  auto tr = model::forward<T>(spec, w, ex.layout, pe, nullptr, opts, &cache);

  const double weight = (weighting == Weighting::inverse_t ? 1.0 / ex.t : 1.0) / static_cast<double>(rows.size());
  const std::size_t V = spec.vocab_size;
  const std::size_t d = spec.d_model;
  const std::size_t J = ex.layout.length();
  const std::size_t H = spec.n_heads;
  const std::size_t dh = spec.d_head();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  double loss = 0.0;
  BasicMatrix<T> dlogits(rows.size(), V);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto lr = tr.logits.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : lr) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (auto v : lr) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    const auto target = static_cast<std::size_t>(ex.targets[rows[r]]);
    loss += lse - static_cast<double>(lr[target]);
    for (std::size_t v = 0; v < V; ++v) {
      const double p = std::exp(static_cast<double>(lr[v]) - lse);
      dlogits(r, v) = static_cast<T>(scale * weight * (p - (v == target ? 1.0 : 0.0)));
    }
  }
  loss *= weight;

  // Tied head.
  BasicMatrix<T> dxf(J, d);
  {
    BasicMatrix<T> sel(rows.size(), d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto src = tr.final_hidden.row(rows[r]);
      std::copy(src.begin(), src.end(), sel.row(r).begin());
    }
    detail::add_into(grads.tok_embed, num::matmul_at(dlogits, sel));
    BasicMatrix<T> dsel = num::matmul(dlogits, w.tok_embed);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) dxf(rows[r], c) += dsel(r, c);
  }

  BasicMatrix<T> dx(J, d);
  detail::rms_backward(cache.x_last, w.final_norm, cache.inv_final, dxf, dx, grads.final_norm);

  model::RotaryCache rot(pe, [&] {
    std::vector<Segment> s(J);
    for (std::size_t j = 0; j < J; ++j) s[j] = ex.layout.segment_of(j);
    return s;
  }(), [&] {
    std::vector<std::size_t> p(J);
    for (std::size_t j = 0; j < J; ++j) p[j] = j + ex.layout.position_offset;
    return p;
  }());

  for (std::size_t li = spec.n_layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    auto& lg = grads.layers[li];
    const auto& c = cache.layers[li];

    // MLP: x_out = x_mid + silu(xn2 W1) W2
    detail::add_into(lg.w2, num::matmul_at(c.act, dx));
    BasicMatrix<T> dact = num::matmul_bt(dx, lw.w2);
    for (std::size_t i = 0; i < dact.size(); ++i) {
      const double a = c.pre.values()[i];
      const double sg = 1.0 / (1.0 + std::exp(-a));
      dact.values()[i] = static_cast<T>(static_cast<double>(dact.values()[i]) * sg * (1.0 + a * (1.0 - sg)));
    }
    detail::add_into(lg.w1, num::matmul_at(c.xn2, dact));
    BasicMatrix<T> dxn2 = num::matmul_bt(dact, lw.w1);
    BasicMatrix<T> dx_mid = dx;
    detail::rms_backward(c.x_mid, lw.mlp_norm, c.inv2, dxn2, dx_mid, lg.mlp_norm);

    // Attention: x_mid = x_in + attn Wo
    detail::add_into(lg.wo, num::matmul_at(c.attn, dx_mid));
    BasicMatrix<T> dattn = num::matmul_bt(dx_mid, lw.wo);
    BasicMatrix<T> dq(J, d), dk(J, d), dv(J, d);
    std::vector<double> dp(J);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      const auto& P = c.probs[h];
      for (std::size_t i = 0; i < J; ++i) {
        const auto doi = std::span<const T>(dattn.row(i).subspan(off, dh));
        double rowsum = 0.0;
        for (std::size_t j = 0; j < J; ++j) {
          dp[j] = num::dot(doi, std::span<const T>(c.v.row(j).subspan(off, dh)));
          rowsum += dp[j] * P(i, j);
        }
        for (std::size_t j = 0; j < J; ++j) {
          const double pij = P(i, j);
          // dV_j += P_ij dO_i
          for (std::size_t e = 0; e < dh; ++e) dv(j, off + e) += static_cast<T>(pij * doi[e]);
          const double ds = pij * (dp[j] - rowsum) * attn_scale;
          if (ds == 0.0) continue;
          for (std::size_t e = 0; e < dh; ++e) {
            dq(i, off + e) += static_cast<T>(ds * c.k(j, off + e));
            dk(j, off + e) += static_cast<T>(ds * c.q(i, off + e));
          }
        }
      }
    }
    for (std::size_t j = 0; j < J; ++j) {
      rot.rotate_row(dq.row(j), j, H, -1.0);
      rot.rotate_row(dk.row(j), j, H, -1.0);
    }
    detail::add_into(lg.wq, num::matmul_at(c.xn1, dq));
    detail::add_into(lg.wk, num::matmul_at(c.xn1, dk));
    detail::add_into(lg.wv, num::matmul_at(c.xn1, dv));
    BasicMatrix<T> dxn1 = num::matmul_bt(dq, lw.wq);
    detail::add_into(dxn1, num::matmul_bt(dk, lw.wk));
    detail::add_into(dxn1, num::matmul_bt(dv, lw.wv));
    dx = dx_mid;
    detail::rms_backward(c.x_in, lw.attn_norm, c.inv1, dxn1, dx, lg.attn_norm);
  }

  // Embedding rows and the visual projector.
  for (std::size_t j = 0; j < J; ++j) {
    if (ex.layout.visual.contains(j)) {
      const auto in = ex.layout.visual_inputs.row(j - ex.layout.visual.start);
      for (std::size_t r = 0; r < spec.d_visual; ++r)
        for (std::size_t cc = 0; cc < d; ++cc) grads.vis_proj(r, cc) += static_cast<T>(static_cast<double>(in[r]) * dx(j, cc));
      for (std::size_t cc = 0; cc < d; ++cc) grads.vis_bias(0, cc) += dx(j, cc);
    } else {
      const auto id = static_cast<std::size_t>(ex.layout.tokens[j]);
      for (std::size_t cc = 0; cc < d; ++cc) grads.tok_embed(id, cc) += dx(j, cc);
    }
  }
  return loss;
}

// Mean over contributing examples of the weighted masked cross-entropy.
// Examples without masked positions are skipped.
template <typename T>
LossResult<T> loss_and_grads(const ModelSpec& spec, const Weights<T>& w, std::span<const Example> batch,
                             Weighting weighting, const rope::PositionEncoding& pe) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grads: empty batch");
  LossResult<T> out;
  out.grads = Weights<T>::zeros(spec);
  for (const auto& ex : batch)
    for (int t : ex.targets)
      if (t >= 0) {
        ++out.contributing;
        break;
      }
  if (out.contributing == 0) return out;
  const double scale = 1.0 / static_cast<double>(out.contributing);
  for (const auto& ex : batch) out.loss += example_loss_and_grads(spec, w, ex, weighting, pe, scale, out.grads);
  out.loss *= scale;
  return out;
}

template <typename T>
double loss_only(const ModelSpec& spec, const Weights<T>& w, std::span<const Example> batch, Weighting weighting,
                 const rope::PositionEncoding& pe) {
  return loss_and_grads(spec, w, batch, weighting, pe).loss;
}

struct LogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  Weights<float> weights;
  std::vector<LogEntry> log;
  double seconds = 0.0;
};

inline std::string log_csv(const std::vector<LogEntry>& log) {
  std::string out = "step,loss,grad_norm\n";
  char buf[96];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", e.step, e.loss, e.grad_norm);
    out += buf;
  }
  return out;
}

inline std::vector<Example> sample_batch(const corpus::CorpusGenerator& gen, const TrainConfig& cfg, int mask_id,
                                         std::size_t step) {
  std::vector<Example> batch;
  batch.reserve(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    Rng rng(hash_combine(hash_combine(cfg.seed, step), i));
    auto scene = gen.sample(rng);
    double t = rng.uniform_open_closed();
    if (cfg.context_dropout > 0.0 && rng.uniform() < cfg.context_dropout) {
      scene.visual = BasicMatrix<float>(0, scene.visual.cols());
      scene.prompt.clear();
      t = 1.0;
    }
    batch.push_back(make_example(scene, t, mask_id, rng));
  }
  return batch;
}

using ProgressFn = std::function<void(const LogEntry&)>;

// Adam with linear warmup and global-norm clipping. Aborts when the loss
// stays above 10 ln V for 100 consecutive steps.
inline TrainResult train(const ModelSpec& spec, const corpus::CorpusConfig& corpus_cfg, const TrainConfig& cfg,
                         std::uint64_t init_seed, const ProgressFn& progress = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const corpus::CorpusGenerator gen(corpus_cfg, spec.d_visual);
  const rope::PositionEncoding pe(spec.d_head(), rope::RopeScalerSpec{});
  TrainResult res;
  res.weights = model::init_weights<float>(spec, init_seed);
  auto m = Weights<float>::zeros(spec);
  auto v = Weights<float>::zeros(spec);
  const double diverge = 10.0 * std::log(static_cast<double>(spec.vocab_size));
  std::size_t above = 0;

  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    const auto batch = sample_batch(gen, cfg, spec.mask_id, step);
    auto lg = loss_and_grads<float>(spec, res.weights, batch, cfg.weighting, pe);

    double sq = 0.0;
    lg.grads.visit([&](const std::string&, const BasicMatrix<float>& g, int) {
      for (float x : g.values()) sq += static_cast<double>(x) * x;
    });
    const double gnorm = std::sqrt(sq);
    if (!std::isfinite(gnorm) || !std::isfinite(lg.loss))
      throw NumericalError("train: non-finite loss or gradient at step " + std::to_string(step));
    const double clip = (cfg.grad_clip > 0 && gnorm > cfg.grad_clip) ? cfg.grad_clip / gnorm : 1.0;
    const double warm = cfg.warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps)) : 1.0;
    const double lr = cfg.lr * warm;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));

    std::vector<BasicMatrix<float>*> ps, gs, ms, vs;
    res.weights.visit([&](const std::string&, BasicMatrix<float>& x, int) { ps.push_back(&x); });
    lg.grads.visit([&](const std::string&, BasicMatrix<float>& x, int) { gs.push_back(&x); });
    m.visit([&](const std::string&, BasicMatrix<float>& x, int) { ms.push_back(&x); });
    v.visit([&](const std::string&, BasicMatrix<float>& x, int) { vs.push_back(&x); });
    for (std::size_t t = 0; t < ps.size(); ++t) {
      auto pv = ps[t]->values();
      auto gv = gs[t]->values();
      auto mv = ms[t]->values();
      auto vv = vs[t]->values();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double g = static_cast<double>(gv[i]) * clip;
        mv[i] = static_cast<float>(cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * g);
        vv[i] = static_cast<float>(cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g * g);
        const double upd = lr * (mv[i] / bc1) / (std::sqrt(vv[i] / bc2) + cfg.eps);
        pv[i] = static_cast<float>(static_cast<double>(pv[i]) - upd);
      }
    }

    LogEntry e{step, lg.loss, gnorm};
    res.log.push_back(e);
    if (progress) progress(e);
    above = lg.loss > diverge ? above + 1 : 0;
    if (above >= 100)
      throw NumericalError("train: diverged, loss " + std::to_string(lg.loss) + " above 10 ln V for 100 steps (step " +
                           std::to_string(step) + ", grad norm " + std::to_string(gnorm) + ")");
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace mdlab::train
