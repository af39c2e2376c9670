#pragma once

// Diagnostics over decode traces: lexical repetition metrics, prior drift,
// PCA trajectories, attention by relative distance, attention mass per step
// and RoPE frequency-band decomposition of attention logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mdlab/decode.hpp"
#include "mdlab/model.hpp"
#include "mdlab/numkit.hpp"
#include "mdlab/prior.hpp"
#include "mdlab/rng.hpp"
#include "mdlab/rope.hpp"

namespace mdlab::analysis {

using num::Matrix;

// ---------------------------------------------------------------- lexical

inline double distinct_n(std::span<const int> tokens, std::size_t n) {
  if (n == 0 || tokens.size() < n)
    throw std::invalid_argument("distinct_n: sequence of length " + std::to_string(tokens.size()) + " too short for n=" + std::to_string(n));
  std::set<std::vector<int>> seen;
  const std::size_t total = tokens.size() - n + 1;
  for (std::size_t i = 0; i < total; ++i) seen.emplace(tokens.begin() + static_cast<std::ptrdiff_t>(i), tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
  return static_cast<double>(seen.size()) / static_cast<double>(total);
}

// Adjacent equal pairs over len - 1.
inline double repetition_ratio(std::span<const int> tokens) {
  if (tokens.size() < 2) throw std::invalid_argument("repetition_ratio: need at least 2 tokens");
  std::size_t rep = 0;
  for (std::size_t i = 1; i < tokens.size(); ++i) rep += tokens[i] == tokens[i - 1];
  return static_cast<double>(rep) / static_cast<double>(tokens.size() - 1);
}

inline std::vector<int> truncate_at(std::span<const int> tokens, int eot_id) {
  auto it = std::find(tokens.begin(), tokens.end(), eot_id);
  return {tokens.begin(), it};
}

struct TextMetrics {
  double distinct1 = 0, distinct2 = 0, distinct3 = 0, repetition = 0;
  std::size_t length = 0;
};

// NaN for metrics the (possibly truncated) sequence is too short for.
inline TextMetrics text_metrics(std::span<const int> tokens, bool eot_truncate, int eot_id) {
  std::vector<int> seq = eot_truncate ? truncate_at(tokens, eot_id) : std::vector<int>(tokens.begin(), tokens.end());
  TextMetrics m;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.length = seq.size();
  m.distinct1 = seq.size() >= 1 ? distinct_n(seq, 1) : nan;
  m.distinct2 = seq.size() >= 2 ? distinct_n(seq, 2) : nan;
  m.distinct3 = seq.size() >= 3 ? distinct_n(seq, 3) : nan;
  m.repetition = seq.size() >= 2 ? repetition_ratio(seq) : nan;
  return m;
}

// ---------------------------------------------------------------- drift

struct DriftRecord {
  std::size_t step = 0;
  std::size_t position = 0;
  double c_subspace = 0;   // cosine to the prior direction inside the subspace
  double c_raw_embed = 0;  // cosine to the prior embedding
  double c_raw_final = 0;  // cosine to the prior's final-layer state
};

struct DriftResult {
  std::vector<DriftRecord> masked;    // contextualized mask states
  std::vector<DriftRecord> baseline;  // random content tokens in the same positions
};

inline DriftRecord drift_record(std::size_t step, std::size_t pos, std::span<const float> h, const prior::PriorSubspace& sub) {
  return {step, pos, prior::cosine_to_prior(h, sub), num::cosine(h, sub.embedding), num::cosine(h, sub.final_state)};
}

// Sequence state going into each step, rebuilt from the commits.
inline std::vector<model::SequenceLayout> step_layouts(const decode::DecodeTrace& trace) {
  std::vector<model::SequenceLayout> out;
  model::SequenceLayout cur = trace.initial;
  for (const auto& s : trace.steps) {
    out.push_back(cur);
    for (auto [pos, tok] : s.committed) cur.tokens[pos] = tok;
  }
  return out;
}

// Masked-position records use the states fed to the head (post-suppression
// when suppression is active). The baseline replaces every masked position
// by a uniformly drawn content token and forwards the sequence unmodified.
inline DriftResult drift_trace(const decode::DecodeTrace& trace, const prior::PriorSubspace& sub,
                               const model::ModelSpec& spec, const model::Weights<float>& w,
                               const rope::PositionEncoding& pe, std::uint64_t seed = 0) {
  DriftResult out;
  const auto content = prior::content_ids(spec);
  const auto layouts = step_layouts(trace);
  for (std::size_t si = 0; si < trace.steps.size(); ++si) {
    const auto& s = trace.steps[si];
    if (s.hidden_post.empty()) throw std::invalid_argument("drift_trace: trace carries no hidden states");
    for (std::size_t r = 0; r < s.masked.size(); ++r)
      out.masked.push_back(drift_record(s.step, s.masked[r], s.hidden_post.row(r), sub));

    model::SequenceLayout rnd = layouts[si];
    Rng rng(hash_combine(hash_string(seed, "drift-baseline"), s.step));
    for (auto pos : s.masked) rnd.tokens[pos] = static_cast<int>(content[rng.below(content.size())]);
    model::ForwardOptions opts;
    opts.logit_rows = {s.masked.front()};
    const auto tr = model::forward<float>(spec, w, rnd, pe, nullptr, opts);
    for (auto pos : s.masked) out.baseline.push_back(drift_record(s.step, pos, tr.final_hidden.row(pos), sub));
  }
  return out;
}

struct DriftSummary {
  double subspace = 0, raw_embed = 0, raw_final = 0;
  std::size_t count = 0;
};

inline DriftSummary summarize(std::span<const DriftRecord> recs) {
  DriftSummary s;
  for (const auto& r : recs) {
    s.subspace += r.c_subspace;
    s.raw_embed += r.c_raw_embed;
    s.raw_final += r.c_raw_final;
  }
  s.count = recs.size();
  if (s.count) {
    s.subspace /= static_cast<double>(s.count);
    s.raw_embed /= static_cast<double>(s.count);
    s.raw_final /= static_cast<double>(s.count);
  }
  return s;
}

inline std::map<std::size_t, DriftSummary> summarize_by_step(std::span<const DriftRecord> recs) {
  std::map<std::size_t, std::vector<DriftRecord>> grouped;
  for (const auto& r : recs) grouped[r.step].push_back(r);
  std::map<std::size_t, DriftSummary> out;
  for (const auto& [step, v] : grouped) out[step] = summarize(v);
  return out;
}

// ---------------------------------------------------------------- PCA trajectory

struct TrajectoryRow {
  std::size_t layer = 0;
  std::string source;  // "mask" or "prior"
  std::array<double, 3> pc{};
};

struct Trajectory {
  std::vector<TrajectoryRow> rows;
  num::PcaResult pca;
  Matrix states;  // 2L x d, mask layers 1..L then prior layers 1..L
};

// Joint PCA over the layer states (1..L) of the mask embedding and the prior
// embedding, each forwarded alone.
inline Trajectory pca_trajectory(const model::ModelSpec& spec, const model::Weights<float>& w, const rope::PositionEncoding& pe,
                                 std::span<const float> prior_emb, std::size_t k = 3) {
  const auto mask_emb = w.tok_embed.row(static_cast<std::size_t>(spec.mask_id));
  const auto mask_run = model::uncontextualized_forward<float>(spec, w, mask_emb, pe);
  const auto prior_run = model::uncontextualized_forward<float>(spec, w, prior_emb, pe);
  const std::size_t L = spec.n_layers;
  Trajectory t;
  t.states = Matrix(2 * L, spec.d_model);
  for (std::size_t l = 1; l <= L; ++l) {
    std::copy(mask_run.states[l].begin(), mask_run.states[l].end(), t.states.row(l - 1).begin());
    std::copy(prior_run.states[l].begin(), prior_run.states[l].end(), t.states.row(L + l - 1).begin());
  }
  t.pca = num::pca_fit(t.states, std::min({k, 2 * L, spec.d_model}));
  for (std::size_t r = 0; r < 2 * L; ++r) {
    TrajectoryRow row;
    row.layer = (r % L) + 1;
    row.source = r < L ? "mask" : "prior";
    for (std::size_t c = 0; c < t.pca.k() && c < 3; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < spec.d_model; ++i)
        acc += (static_cast<double>(t.states(r, i)) - t.pca.mean[i]) * static_cast<double>(t.pca.basis(i, c));
      row.pc[c] = acc;
    }
    t.rows.push_back(row);
  }
  return t;
}

// ---------------------------------------------------------------- attention

enum class TokenClass { visual = 0, prompt = 1, mask = 2, committed = 3 };

inline const char* to_string(TokenClass c) {
  switch (c) {
    case TokenClass::visual: return "visual";
    case TokenClass::prompt: return "prompt";
    case TokenClass::mask: return "mask";
    case TokenClass::committed: return "committed";
  }
  return "?";
}

struct AttentionRecord {
  std::size_t step = 0, layer = 0, head = 0;
  std::size_t source = 0, target = 0;
  TokenClass source_class = TokenClass::visual, target_class = TokenClass::visual;
  double weight = 0;
  std::vector<double> band_contributions;  // optional pre-softmax logit split
};

inline TokenClass classify(const model::SequenceLayout& layout, std::size_t j, int mask_id) {
  if (layout.visual.contains(j)) return TokenClass::visual;
  if (layout.prompt.contains(j)) return TokenClass::prompt;
  return layout.tokens[j] == mask_id ? TokenClass::mask : TokenClass::committed;
}

// Calls fn(record) for every attention weight recorded in the trace.
template <typename F>
void for_each_attention(const decode::DecodeTrace& trace, int mask_id, F&& fn) {
  const auto layouts = step_layouts(trace);
  for (std::size_t si = 0; si < trace.steps.size(); ++si) {
    const auto& s = trace.steps[si];
    if (s.attention.empty()) throw std::invalid_argument("attention analysis: trace carries no attention maps");
    const auto& lay = layouts[si];
    const std::size_t J = lay.length();
    std::vector<TokenClass> cls(J);
    for (std::size_t j = 0; j < J; ++j) cls[j] = classify(lay, j, mask_id);
    AttentionRecord rec;
    rec.step = s.step;
    for (std::size_t l = 0; l < s.attention.size(); ++l) {
      for (std::size_t h = 0; h < s.attention[l].size(); ++h) {
        const auto& A = s.attention[l][h];
        rec.layer = l + 1;
        rec.head = h;
        for (std::size_t i = 0; i < J; ++i) {
          rec.source = i;
          rec.source_class = cls[i];
          for (std::size_t j = 0; j < J; ++j) {
            rec.target = j;
            rec.target_class = cls[j];
            rec.weight = A(i, j);
            fn(static_cast<const AttentionRecord&>(rec));
          }
        }
      }
    }
  }
}

// Unit bins for distances below 32, then [32, 64), [64, 128), ...
struct DistanceBins {
  std::vector<std::size_t> lower;  // lower edge of each bin

  static DistanceBins standard(std::size_t max_distance) {
    DistanceBins b;
    for (std::size_t d = 0; d < 32 && d <= max_distance; ++d) b.lower.push_back(d);
    for (std::size_t e = 32; e <= max_distance; e *= 2) b.lower.push_back(e);
    return b;
  }

  std::size_t bin_of(std::size_t distance) const {
    auto it = std::upper_bound(lower.begin(), lower.end(), distance);
    if (it == lower.begin()) throw std::out_of_range("distance below first bin");
    return static_cast<std::size_t>(it - lower.begin()) - 1;
  }
  std::size_t upper(std::size_t bin) const {
    if (bin + 1 < lower.size()) return lower[bin + 1];
    return lower[bin] < 32 ? lower[bin] + 1 : lower[bin] * 2;
  }
  std::size_t size() const { return lower.size(); }
};

struct DistanceCell {
  double sum = 0;
  std::size_t count = 0;
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

using ClassPair = std::pair<TokenClass, TokenClass>;

struct DistanceTable {
  DistanceBins bins;
  std::map<ClassPair, std::vector<DistanceCell>> cells;  // per (source, target) class pair, one cell per bin

  void add(const AttentionRecord& r) {
    const std::size_t dist = r.source > r.target ? r.source - r.target : r.target - r.source;
    auto& row = cells[{r.source_class, r.target_class}];
    if (row.empty()) row.resize(bins.size());
    auto& c = row[bins.bin_of(dist)];
    c.sum += r.weight;
    ++c.count;
  }
};

inline DistanceTable attention_by_distance(std::span<const AttentionRecord> records, const DistanceBins& bins) {
  if (records.empty()) throw std::invalid_argument("attention_by_distance: no records");
  DistanceTable t{bins, {}};
  for (const auto& r : records) t.add(r);
  return t;
}

inline DistanceTable attention_by_distance(const decode::DecodeTrace& trace, int mask_id, const DistanceBins& bins) {
  DistanceTable t{bins, {}};
  for_each_attention(trace, mask_id, [&](const AttentionRecord& r) { t.add(r); });
  return t;
}

struct AttentionMassRow {
  std::size_t step = 0;
  std::array<double, 4> mass{};  // indexed by TokenClass
};

// Per generation-span source: attention summed by target class, then
// averaged over sources, layers and heads for each step.
inline std::vector<AttentionMassRow> attention_mass_per_step(std::span<const AttentionRecord> records,
                                                             const model::SequenceLayout& layout) {
  std::map<std::size_t, std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::array<double, 4>>> acc;
  for (const auto& r : records) {
    if (!layout.generation.contains(r.source)) continue;
    acc[r.step][{r.layer, r.head, r.source}][static_cast<std::size_t>(r.target_class)] += r.weight;
  }
  std::vector<AttentionMassRow> out;
  for (const auto& [step, per_src] : acc) {
    AttentionMassRow row;
    row.step = step;
    for (const auto& [key, m] : per_src)
      for (std::size_t c = 0; c < 4; ++c) row.mass[c] += m[c];
    for (auto& m : row.mass) m /= static_cast<double>(per_src.size());
    out.push_back(row);
  }
  return out;
}

inline std::vector<AttentionMassRow> attention_mass_per_step(const decode::DecodeTrace& trace, int mask_id) {
  std::map<std::size_t, std::array<double, 4>> sums;
  std::map<std::size_t, std::size_t> sources;
  std::array<double, 4> cur{};
  std::size_t last_key = std::numeric_limits<std::size_t>::max();
  std::size_t last_step = 0;
  auto flush = [&] {
    if (last_key == std::numeric_limits<std::size_t>::max()) return;
    for (std::size_t c = 0; c < 4; ++c) sums[last_step][c] += cur[c];
    ++sources[last_step];
    cur = {};
  };
  const auto& gen = trace.initial.generation;
  for_each_attention(trace, mask_id, [&](const AttentionRecord& r) {
    if (!gen.contains(r.source)) return;
    const std::size_t key = ((r.step * 1000 + r.layer) * 1000 + r.head) * 100000 + r.source;
    if (key != last_key) {
      flush();
      last_key = key;
      last_step = r.step;
    }
    cur[static_cast<std::size_t>(r.target_class)] += r.weight;
  });
  flush();
  std::vector<AttentionMassRow> out;
  for (const auto& [step, s] : sums) {
    AttentionMassRow row;
    row.step = step;
    for (std::size_t c = 0; c < 4; ++c) row.mass[c] = s[c] / static_cast<double>(sources[step]);
    out.push_back(row);
  }
  return out;
}

struct RelativeChange {
  ClassPair pair;
  std::size_t bin = 0;
  double baseline = 0, intervened = 0;
  bool defined = true;
  double change = 0;  // (intervened - baseline) / baseline
};

// Matched-bin relative change; bins with baseline mean < 1e-9 are undefined.
inline std::vector<RelativeChange> relative_attention_change(const DistanceTable& base, const DistanceTable& inter) {
  if (base.bins.lower != inter.bins.lower) throw std::invalid_argument("relative_attention_change: bin layouts differ");
  std::set<ClassPair> keys_a, keys_b;
  for (const auto& [k, v] : base.cells) keys_a.insert(k);
  for (const auto& [k, v] : inter.cells) keys_b.insert(k);
  if (keys_a != keys_b) throw std::invalid_argument("relative_attention_change: runs cover different segment pairs (mismatched layouts)");
  std::vector<RelativeChange> out;
  for (const auto& [pair, cells] : base.cells) {
    const auto& other = inter.cells.at(pair);
    for (std::size_t b = 0; b < cells.size(); ++b) {
      if (cells[b].count != other[b].count)
        throw std::invalid_argument("relative_attention_change: bin populations differ (mismatched layouts)");
      if (cells[b].count == 0) continue;
      RelativeChange rc{pair, b, cells[b].mean(), other[b].mean()};
      rc.defined = rc.baseline >= 1e-9;
      rc.change = rc.defined ? (rc.intervened - rc.baseline) / rc.baseline : std::numeric_limits<double>::quiet_NaN();
      out.push_back(rc);
    }
  }
  return out;
}

inline std::vector<RelativeChange> relative_attention_change(const decode::DecodeTrace& base, const decode::DecodeTrace& inter,
                                                             int mask_id, const DistanceBins& bins) {
  if (!(base.initial == inter.initial)) throw std::invalid_argument("relative_attention_change: runs do not share a layout");
  return relative_attention_change(attention_by_distance(base, mask_id, bins), attention_by_distance(inter, mask_id, bins));
}

// ---------------------------------------------------------------- frequency bands

// Pre-softmax score <R(m) q, R(n) k> split into contiguous bands of rotary
// pairs; band 0 holds the highest frequencies. Bands sum to the full score.
template <typename T>
std::vector<double> frequency_decomposition(std::span<const T> q, std::span<const T> k, std::size_t m, std::size_t n,
                                            const rope::FrequencyTable& table, std::size_t n_bands = 2) {
  const std::size_t pairs = table.pairs();
  if (n_bands == 0 || pairs % n_bands != 0)
    throw std::invalid_argument("frequency_decomposition: " + std::to_string(pairs) + " rotary pairs not divisible into " +
                                std::to_string(n_bands) + " bands");
  const auto qr = rope::rotated(q, static_cast<double>(m), table);
  const auto kr = rope::rotated(k, static_cast<double>(n), table);
  return band_split<T>(qr, kr, n_bands);
}

// Band split of already-rotated vectors.
template <typename T>
std::vector<double> band_split(std::span<const T> qr, std::span<const T> kr, std::size_t n_bands) {
  const std::size_t pairs = qr.size() / 2;
  const std::size_t per = pairs / n_bands;
  std::vector<double> out(n_bands, 0.0);
  for (std::size_t i = 0; i < pairs; ++i)
    out[i / per] += static_cast<double>(qr[2 * i]) * kr[2 * i] + static_cast<double>(qr[2 * i + 1]) * kr[2 * i + 1];
  return out;
}

// Secondary view: softmax over band-only logits for one query against many keys.
inline std::vector<std::vector<double>> band_attention(std::span<const float> q, const Matrix& keys,
                                                       std::span<const std::size_t> key_positions, std::size_t q_position,
                                                       const rope::FrequencyTable& table, std::size_t n_bands) {
  std::vector<std::vector<double>> logits(n_bands, std::vector<double>(keys.rows()));
  const double scale = 1.0 / std::sqrt(static_cast<double>(table.d_head));
  for (std::size_t j = 0; j < keys.rows(); ++j) {
    const auto parts = frequency_decomposition<float>(q, keys.row(j), q_position, key_positions[j], table, n_bands);
    for (std::size_t b = 0; b < n_bands; ++b) logits[b][j] = parts[b] * scale;
  }
  for (auto& row : logits) num::softmax_inplace(std::span<double>(row));
  return logits;
}

struct BandCell {
  double sum = 0;
  std::size_t count = 0;
};

struct BandTable {
  DistanceBins bins;
  std::size_t n_bands = 2;
  std::vector<std::vector<BandCell>> cells;  // [bin][band]
};

// Scaled per-band logit contributions from generation-span queries to all
// keys, at every step of a trace, re-running the forward to recover the
// rotated queries and keys of every layer and head.
inline BandTable frequency_bands(const decode::DecodeTrace& trace, const model::ModelSpec& spec, const model::Weights<float>& w,
                                 const rope::PositionEncoding& pe, const DistanceBins& bins, std::size_t n_bands = 2) {
  const std::size_t dh = spec.d_head();
  if ((dh / 2) % n_bands != 0) throw std::invalid_argument("frequency_bands: rotary pairs not divisible into bands");
  BandTable t{bins, n_bands, std::vector<std::vector<BandCell>>(bins.size(), std::vector<BandCell>(n_bands))};
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& lay : step_layouts(trace)) {
    model::Activations<float> cache;
    model::ForwardOptions opts;
    opts.record_hidden = false;
    opts.logit_rows = {lay.generation.start};
    model::forward<float>(spec, w, lay, pe, nullptr, opts, &cache);
    for (const auto& c : cache.layers) {
      for (std::size_t h = 0; h < spec.n_heads; ++h) {
        for (std::size_t i = lay.generation.start; i < lay.generation.end(); ++i) {
          const auto qi = std::span<const float>(c.q.row(i)).subspan(h * dh, dh);
          for (std::size_t j = 0; j < lay.length(); ++j) {
            const auto kj = std::span<const float>(c.k.row(j)).subspan(h * dh, dh);
            const auto parts = band_split<float>(qi, kj, n_bands);
            const std::size_t dist = i > j ? i - j : j - i;
            auto& row = t.cells[bins.bin_of(dist)];
            for (std::size_t b = 0; b < n_bands; ++b) {
              row[b].sum += parts[b] * scale;
              ++row[b].count;
            }
          }
        }
      }
    }
  }
  return t;
}

}  // namespace mdlab::analysis
