#pragma once

// Mask prior suppression.
//
// A prior embedding (by default the content-vocabulary mean) is forwarded
// alone through the model; its layer states h_1..h_L give a mean mu and a
// PCA basis U (d x k). The final state's projection z = U^T (h_L - mu),
// normalised, is the prior direction u. For a hidden state h with
// z = U^T (h - mu) and c = <z, u> / |z|, suppression removes
// lambda * max(0, c) * <z, u> along U u.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <ranges>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdlab/container.hpp"
#include "mdlab/error.hpp"
#include "mdlab/model.hpp"
#include "mdlab/numkit.hpp"
#include "mdlab/rng.hpp"

namespace mdlab::prior {

using num::Matrix;

enum class PriorKind { vocab_mean, freq_weighted, topk, random };

NLOHMANN_JSON_SERIALIZE_ENUM(PriorKind, {{PriorKind::vocab_mean, "vocab_mean"},
                                         {PriorKind::freq_weighted, "freq_weighted"},
                                         {PriorKind::topk, "topk"},
                                         {PriorKind::random, "random"}})

struct PriorSource {
  PriorKind kind = PriorKind::vocab_mean;
  std::size_t topk = 5;       // tokens averaged by the topk source
  std::uint64_t seed = 0;     // random source
  bool operator==(const PriorSource&) const = default;
};

inline void to_json(nlohmann::json& j, const PriorSource& s) {
  j = {{"kind", s.kind}, {"topk", s.topk}, {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, PriorSource& s) {
  PriorSource d;
  s.kind = j.value("kind", d.kind);
  s.topk = j.value("topk", d.topk);
  s.seed = j.value("seed", d.seed);
}

inline std::string describe(const PriorSource& s) {
  switch (s.kind) {
    case PriorKind::vocab_mean: return "vocab_mean";
    case PriorKind::freq_weighted: return "freq_weighted";
    case PriorKind::topk: return "topk(" + std::to_string(s.topk) + ")";
    case PriorKind::random: return "random(" + std::to_string(s.seed) + ")";
  }
  return "?";
}

enum class Reconstruction { residual_preserving, literal };

NLOHMANN_JSON_SERIALIZE_ENUM(Reconstruction, {{Reconstruction::residual_preserving, "residual_preserving"},
                                              {Reconstruction::literal, "literal"}})

struct SuppressionSpec {
  double lambda = 0.0;
  // Layers in [1, L] where suppression runs; empty means the final layer only.
  std::vector<std::size_t> layers;
  Reconstruction reconstruction = Reconstruction::residual_preserving;
  bool before_final_norm = false;

  std::vector<std::size_t> resolved_layers(std::size_t n_layers) const {
    if (layers.empty()) return {n_layers};
    return layers;
  }
  double per_layer_lambda(std::size_t n_layers) const {
    return lambda / static_cast<double>(resolved_layers(n_layers).size());
  }
  bool operator==(const SuppressionSpec&) const = default;
};

inline std::vector<std::string> validate(const SuppressionSpec& s, std::size_t n_layers,
                                         const std::string& path = "suppression") {
  std::vector<std::string> out;
  if (!(s.lambda >= 0.0) || !std::isfinite(s.lambda)) out.push_back(path + ".lambda: must be finite and >= 0");
  std::set<std::size_t> seen;
  for (auto l : s.layers) {
    if (l < 1 || l > n_layers) out.push_back(path + ".layers: layer " + std::to_string(l) + " outside [1, " + std::to_string(n_layers) + "]");
    if (!seen.insert(l).second) out.push_back(path + ".layers: duplicate layer " + std::to_string(l));
  }
  return out;
}

inline void to_json(nlohmann::json& j, const SuppressionSpec& s) {
  j = {{"lambda", s.lambda}, {"layers", s.layers}, {"reconstruction", s.reconstruction},
       {"before_final_norm", s.before_final_norm}};
}
inline void from_json(const nlohmann::json& j, SuppressionSpec& s) {
  SuppressionSpec d;
  s.lambda = j.value("lambda", d.lambda);
  s.layers = j.value("layers", d.layers);
  s.reconstruction = j.value("reconstruction", d.reconstruction);
  s.before_final_norm = j.value("before_final_norm", d.before_final_norm);
}

struct PriorSubspace {
  std::vector<float> mu;           // d
  Matrix basis;                    // d x k
  std::vector<double> prior_dir;   // k, unit
  std::vector<float> embedding;    // the prior embedding that was forwarded
  std::vector<float> final_state;  // its final-layer state h_L
  std::vector<double> eigenvalues;
  bool degenerate = false;         // PCA produced fewer than the requested components
  PriorSource source;

  std::size_t k() const { return basis.cols(); }
  std::size_t d() const { return basis.rows(); }

  // U u in feature space.
  std::vector<double> direction() const {
    std::vector<double> v(d(), 0.0);
    for (std::size_t i = 0; i < d(); ++i)
      for (std::size_t c = 0; c < k(); ++c) v[i] += static_cast<double>(basis(i, c)) * prior_dir[c];
    return v;
  }
};

inline std::vector<std::size_t> content_ids(const model::ModelSpec& spec) {
  std::vector<std::size_t> ids;
  for (std::size_t v = 0; v < spec.vocab_size; ++v)
    if (!spec.is_special(static_cast<int>(v))) ids.push_back(v);
  return ids;
}

// Mean embedding over content tokens (special ids excluded).
inline std::vector<float> vocab_mean(const model::ModelSpec& spec, const model::Weights<float>& w) {
  const auto ids = content_ids(spec);
  if (ids.empty()) throw std::invalid_argument("vocab_mean: empty content vocabulary");
  std::vector<double> acc(spec.d_model, 0.0);
  for (auto v : ids)
    for (std::size_t c = 0; c < spec.d_model; ++c) acc[c] += w.tok_embed(v, c);
  std::vector<float> out(spec.d_model);
  for (std::size_t c = 0; c < spec.d_model; ++c) out[c] = static_cast<float>(acc[c] / static_cast<double>(ids.size()));
  return out;
}

// Frequency-weighted mean; `freqs` is indexed by token id, specials ignored.
inline std::vector<float> freq_weighted_prior(const model::ModelSpec& spec, const model::Weights<float>& w,
                                              std::span<const double> freqs) {
  if (freqs.size() != spec.vocab_size) throw std::invalid_argument("freq_weighted: need one frequency per vocabulary id");
  std::vector<double> acc(spec.d_model, 0.0);
  double total = 0.0;
  for (auto v : content_ids(spec)) {
    if (freqs[v] < 0) throw std::invalid_argument("freq_weighted: negative frequency");
    total += freqs[v];
    for (std::size_t c = 0; c < spec.d_model; ++c) acc[c] += freqs[v] * w.tok_embed(v, c);
  }
  if (!(total > 0)) throw std::invalid_argument("freq_weighted: content frequencies sum to zero");
  std::vector<float> out(spec.d_model);
  for (std::size_t c = 0; c < spec.d_model; ++c) out[c] = static_cast<float>(acc[c] / total);
  return out;
}

// The n content tokens with the highest logits, ties to the lower id.
inline std::vector<std::size_t> top_content_tokens(const model::ModelSpec& spec, std::span<const float> logits, std::size_t n) {
  auto ids = content_ids(spec);
  if (n == 0 || n > ids.size())
    throw std::invalid_argument("topk: n=" + std::to_string(n) + " outside [1, " + std::to_string(ids.size()) + "]");
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  ids.resize(n);
  return ids;
}

inline std::vector<float> topk_prior(const model::ModelSpec& spec, const model::Weights<float>& w,
                                     std::span<const float> mask_logits, std::size_t n) {
  const auto ids = top_content_tokens(spec, mask_logits, n);
  std::vector<double> acc(spec.d_model, 0.0);
  for (auto v : ids)
    for (std::size_t c = 0; c < spec.d_model; ++c) acc[c] += w.tok_embed(v, c);
  std::vector<float> out(spec.d_model);
  for (std::size_t c = 0; c < spec.d_model; ++c) out[c] = static_cast<float>(acc[c] / static_cast<double>(n));
  return out;
}

inline std::vector<float> random_prior(const model::ModelSpec& spec, const model::Weights<float>& w, std::uint64_t seed) {
  const auto mean = vocab_mean(spec, w);
  Rng rng(hash_string(seed, "random-prior"));
  std::vector<double> g(spec.d_model);
  for (auto& x : g) x = rng.normal();
  const double ng = num::norm(g);
  const double target = num::norm(mean);
  std::vector<float> out(spec.d_model);
  for (std::size_t c = 0; c < spec.d_model; ++c) out[c] = static_cast<float>(g[c] / ng * target);
  return out;
}

struct PriorInputs {
  std::vector<double> corpus_freqs;  // needed by freq_weighted
  std::vector<float> mask_logits;    // needed by topk
};

inline std::vector<float> prior_embedding(const PriorSource& src, const model::ModelSpec& spec,
                                          const model::Weights<float>& w, const PriorInputs& in = {}) {
  switch (src.kind) {
    case PriorKind::vocab_mean: return vocab_mean(spec, w);
    case PriorKind::freq_weighted:
      if (in.corpus_freqs.empty()) throw std::invalid_argument("freq_weighted prior requires corpus token frequencies");
      return freq_weighted_prior(spec, w, in.corpus_freqs);
    case PriorKind::topk:
      if (in.mask_logits.empty()) throw std::invalid_argument("topk prior requires the uncontextualized mask logits");
      return topk_prior(spec, w, in.mask_logits, src.topk);
    case PriorKind::random: return random_prior(spec, w, src.seed);
  }
  return {};
}

// z = U^T (h - mu)
template <std::ranges::contiguous_range R>
std::vector<double> project(const R& h, const PriorSubspace& sub) {
  if (h.size() != sub.d()) throw std::invalid_argument("project: hidden size does not match subspace");
  std::vector<double> z(sub.k(), 0.0);
  for (std::size_t i = 0; i < sub.d(); ++i) {
    const double dev = static_cast<double>(h[i]) - static_cast<double>(sub.mu[i]);
    for (std::size_t c = 0; c < sub.k(); ++c) z[c] += static_cast<double>(sub.basis(i, c)) * dev;
  }
  return z;
}

inline PriorSubspace build_subspace(std::span<const float> prior_emb, const model::ModelSpec& spec,
                                    const model::Weights<float>& w, const rope::PositionEncoding& pe, std::size_t k,
                                    PriorSource source = {}) {
  if (k < 1) throw std::invalid_argument("build_subspace: k must be >= 1");
  const auto run = model::uncontextualized_forward<float>(spec, w, prior_emb, pe);
  const std::size_t L = spec.n_layers;
  if (L < 2) throw NumericalError("build_subspace: need at least 2 layer states");
  Matrix states(L, spec.d_model);
  for (std::size_t l = 1; l <= L; ++l) std::copy(run.states[l].begin(), run.states[l].end(), states.row(l - 1).begin());

  const std::size_t k_eff = std::min({k, L, spec.d_model});
  auto pca = num::pca_fit(states, k_eff);
  if (pca.k() == 0) throw NumericalError("build_subspace: degenerate prior, layer states have zero covariance");

  PriorSubspace sub;
  sub.mu = pca.mean;
  sub.basis = pca.basis;
  sub.eigenvalues = pca.eigenvalues;
  sub.degenerate = pca.degenerate || k_eff < k;
  sub.embedding.assign(prior_emb.begin(), prior_emb.end());
  sub.final_state = run.states[L];
  sub.source = source;
  auto z = project(std::span<const float>(sub.final_state), sub);
  const double nz = num::norm(z);
  if (nz < 1e-9) throw NumericalError("build_subspace: degenerate prior, final state has no component in the subspace");
  sub.prior_dir.resize(z.size());
  for (std::size_t c = 0; c < z.size(); ++c) sub.prior_dir[c] = z[c] / nz;
  return sub;
}

// c = <z, u> / |z|, 0 when |z| < 1e-12.
template <std::ranges::contiguous_range R>
double cosine_to_prior(const R& h, const PriorSubspace& sub) {
  const auto z = project(h, sub);
  const double nz = num::norm(z);
  if (nz < 1e-12) return 0.0;
  return std::clamp(num::dot(z, sub.prior_dir) / nz, -1.0, 1.0);
}

template <typename T>
void suppress_inplace(std::span<T> h, const PriorSubspace& sub, double lambda,
                      Reconstruction mode = Reconstruction::residual_preserving) {
  const auto z = project(h, sub);
  const double nz = num::norm(z);
  if (nz < 1e-12) return;
  const double zu = num::dot(z, sub.prior_dir);
  const double c = std::clamp(zu / nz, -1.0, 1.0);
  const double alpha = lambda * std::max(0.0, c);
  if (alpha == 0.0 && mode == Reconstruction::residual_preserving) return;
  if (mode == Reconstruction::residual_preserving) {
    // h~ = h + U (z~ - z),  z~ - z = -alpha <z,u> u
    for (std::size_t i = 0; i < sub.d(); ++i) {
      double delta = 0.0;
      for (std::size_t col = 0; col < sub.k(); ++col) delta += static_cast<double>(sub.basis(i, col)) * sub.prior_dir[col];
      h[i] = static_cast<T>(static_cast<double>(h[i]) - alpha * zu * delta);
    }
  } else {
    // h~ = U z~ + mu
    std::vector<double> zt(z);
    for (std::size_t col = 0; col < sub.k(); ++col) zt[col] -= alpha * zu * sub.prior_dir[col];
    for (std::size_t i = 0; i < sub.d(); ++i) {
      double v = sub.mu[i];
      for (std::size_t col = 0; col < sub.k(); ++col) v += static_cast<double>(sub.basis(i, col)) * zt[col];
      h[i] = static_cast<T>(v);
    }
  }
}

template <typename T>
std::vector<T> suppress(std::span<const T> h, const PriorSubspace& sub, double lambda,
                        Reconstruction mode = Reconstruction::residual_preserving) {
  std::vector<T> out(h.begin(), h.end());
  suppress_inplace(std::span<T>(out), sub, lambda, mode);
  return out;
}

// Suppression as a forward hook over the masked positions, with the lambda
// budget split evenly over the configured layers.
class SuppressionHook final : public model::HiddenHook<float> {
 public:
  SuppressionHook(const PriorSubspace& sub, SuppressionSpec spec, std::size_t n_layers)
      : sub_(sub), spec_(std::move(spec)), layers_(spec_.resolved_layers(n_layers)),
        lambda_(spec_.per_layer_lambda(n_layers)) {}

  bool applies_at(std::size_t layer) const override {
    return std::find(layers_.begin(), layers_.end(), layer) != layers_.end();
  }
  void apply(std::size_t, std::span<float> h) const override { suppress_inplace(h, sub_, lambda_, spec_.reconstruction); }
  bool before_final_norm() const override { return spec_.before_final_norm; }

 private:
  const PriorSubspace& sub_;
  SuppressionSpec spec_;
  std::vector<std::size_t> layers_;
  double lambda_;
};

inline io::Container to_container(const PriorSubspace& sub) {
  io::Container c;
  nlohmann::json meta = {{"k", sub.k()},
                         {"source", sub.source},
                         {"degenerate", sub.degenerate},
                         {"eigenvalues", sub.eigenvalues},
                         {"prior_dir", sub.prior_dir}};
  c.config_text = meta.dump(2);
  c.sections.push_back(io::vector_section("mu", sub.mu));
  c.sections.push_back(io::to_section("basis", sub.basis, 2));
  std::vector<float> u(sub.prior_dir.begin(), sub.prior_dir.end());
  c.sections.push_back(io::vector_section("prior_dir", u));
  c.sections.push_back(io::vector_section("embedding", sub.embedding));
  c.sections.push_back(io::vector_section("final_state", sub.final_state));
  return c;
}

inline PriorSubspace from_container(const io::Container& c) {
  PriorSubspace sub;
  const auto meta = nlohmann::json::parse(c.config_text);
  sub.mu = c.at("mu").values;
  sub.basis = io::to_matrix(c.at("basis"));
  sub.embedding = c.at("embedding").values;
  sub.final_state = c.at("final_state").values;
  sub.source = meta.value("source", PriorSource{});
  sub.degenerate = meta.value("degenerate", false);
  sub.eigenvalues = meta.value("eigenvalues", std::vector<double>{});
  // The double-precision direction lives in the metadata; the f32 section is a mirror.
  sub.prior_dir = meta.value("prior_dir", std::vector<double>{});
  if (sub.prior_dir.size() != sub.k()) throw std::runtime_error("prior sidecar: prior_dir does not match basis");
  return sub;
}

}  // namespace mdlab::prior
