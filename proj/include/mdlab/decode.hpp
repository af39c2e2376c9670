#pragma once

// Iterative parallel unmasking. The generation span starts all-mask; each of
// T steps runs one forward pass and commits the quota-many most confident
// masked positions to their argmax tokens. Committed tokens never change.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mdlab/model.hpp"
#include "mdlab/prior.hpp"
#include "mdlab/rng.hpp"
#include "mdlab/rope.hpp"

namespace mdlab::decode {

using num::Matrix;

enum class Selection { greedy_confidence, sampled };

NLOHMANN_JSON_SERIALIZE_ENUM(Selection, {{Selection::greedy_confidence, "greedy_confidence"},
                                         {Selection::sampled, "sampled"}})

struct DecodeConfig {
  std::size_t gen_len = 32;
  std::size_t steps = 8;
  rope::RopeScalerSpec scaler;
  std::optional<prior::SuppressionSpec> suppression;
  Selection selection = Selection::greedy_confidence;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  bool record_attention = false;
  bool record_hidden = true;
  bool eot_truncate = false;
};

inline std::vector<std::string> validate(const DecodeConfig& c, const std::string& path = "decode") {
  std::vector<std::string> out;
  if (c.gen_len < 1) out.push_back(path + ".gen_len: must be >= 1");
  if (c.steps < 1) out.push_back(path + ".steps: must be >= 1");
  else if (c.steps > c.gen_len) out.push_back(path + ".steps: must not exceed gen_len (" + std::to_string(c.gen_len) + ")");
  if (!(c.temperature > 0) || !std::isfinite(c.temperature)) out.push_back(path + ".temperature: must be finite and > 0");
  return out;
}

// base = gen_len / steps; the first gen_len % steps steps take one extra.
inline std::vector<std::size_t> quotas(std::size_t gen_len, std::size_t steps) {
  if (steps < 1 || steps > gen_len)
    throw std::invalid_argument("quotas: require 1 <= steps <= gen_len, got steps=" + std::to_string(steps) +
                                " gen_len=" + std::to_string(gen_len));
  std::vector<std::size_t> q(steps, gen_len / steps);
  for (std::size_t t = 0; t < gen_len % steps; ++t) ++q[t];
  return q;
}

struct StepRecord {
  std::size_t step = 0;  // 1-based
  std::vector<std::size_t> masked;  // positions masked going into this step
  std::vector<float> confidences;   // aligned with `masked`
  std::vector<int> candidates;      // argmax (or sampled) token per masked position
  std::vector<std::pair<std::size_t, int>> committed;
  Matrix hidden_pre;   // |masked| x d final states before suppression
  Matrix hidden_post;  // |masked| x d states fed to the head
  std::vector<std::vector<Matrix>> attention;  // [layer][head], when recorded
  std::vector<int> generation;  // generation span after the step

  bool operator==(const StepRecord&) const = default;
};

struct DecodeTrace {
  model::SequenceLayout initial;
  std::vector<StepRecord> steps;
  std::vector<int> tokens;  // final generation span

  bool operator==(const DecodeTrace&) const = default;
};

struct DecodeState {
  model::SequenceLayout layout;
  std::vector<std::size_t> quota;
  std::size_t next_step = 0;

  bool done() const { return next_step >= quota.size(); }
};

inline DecodeState start(const model::SequenceLayout& prefix, const model::ModelSpec& spec, const DecodeConfig& cfg) {
  auto v = validate(cfg);
  if (!v.empty()) throw std::invalid_argument(v.front());
  DecodeState st;
  std::vector<int> gen(cfg.gen_len, spec.mask_id);
  st.layout = model::SequenceLayout::make(prefix.visual_inputs, std::span<const int>(prefix.tokens).subspan(prefix.prompt.start, prefix.prompt.len),
                                          gen, spec.pad_id);
  st.layout.position_offset = prefix.position_offset;
  st.quota = quotas(cfg.gen_len, cfg.steps);
  return st;
}

// Highest logit among candidate tokens (mask and pad excluded), ties to the lower id.
inline int argmax_token(std::span<const float> logits, const model::ModelSpec& spec) {
  int best = -1;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    const int id = static_cast<int>(v);
    if (id == spec.mask_id || id == spec.pad_id) continue;
    if (best < 0 || logits[v] > logits[static_cast<std::size_t>(best)]) best = id;
  }
  return best;
}

// Probabilities over candidate tokens (mask and pad get zero).
inline std::vector<double> candidate_probs(std::span<const float> logits, const model::ModelSpec& spec, double temperature) {
  std::vector<double> p(logits.size(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < logits.size(); ++v)
    if (static_cast<int>(v) != spec.mask_id && static_cast<int>(v) != spec.pad_id) mx = std::max(mx, static_cast<double>(logits[v]) / temperature);
  double sum = 0.0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    if (static_cast<int>(v) == spec.mask_id || static_cast<int>(v) == spec.pad_id) continue;
    p[v] = std::exp(static_cast<double>(logits[v]) / temperature - mx);
    sum += p[v];
  }
  for (auto& x : p) x /= sum;
  return p;
}

inline StepRecord decode_step(DecodeState& st, const model::ModelSpec& spec, const model::Weights<float>& w,
                              const rope::PositionEncoding& pe, const DecodeConfig& cfg,
                              const prior::PriorSubspace* subspace) {
  if (st.done()) throw std::logic_error("decode_step: no steps remain");
  StepRecord rec;
  rec.step = st.next_step + 1;
  rec.masked = st.layout.masked_positions(spec.mask_id);
  if (rec.masked.empty()) throw std::logic_error("decode_step: no masked positions remain");

  std::optional<prior::SuppressionHook> hook;
  if (cfg.suppression && subspace) hook.emplace(*subspace, *cfg.suppression, spec.n_layers);
  if (cfg.suppression && !subspace) throw std::invalid_argument("decode_step: suppression requested without a prior subspace");

  model::ForwardOptions opts;
  opts.record_attention = cfg.record_attention;
  opts.record_hidden = true;
  opts.logit_rows = rec.masked;
  auto tr = model::forward<float>(spec, w, st.layout, pe, hook ? &*hook : nullptr, opts);

  const std::size_t n = rec.masked.size();
  const std::size_t d = spec.d_model;
  if (cfg.record_hidden) {
    rec.hidden_pre = Matrix(n, d);
    rec.hidden_post = Matrix(n, d);
    for (std::size_t r = 0; r < n; ++r) {
      const auto pre = tr.hidden.back().row(rec.masked[r]);
      const auto post = tr.final_hidden.row(rec.masked[r]);
      std::copy(pre.begin(), pre.end(), rec.hidden_pre.row(r).begin());
      std::copy(post.begin(), post.end(), rec.hidden_post.row(r).begin());
    }
  }
  if (cfg.record_attention) rec.attention = std::move(tr.attention);

  rec.confidences.resize(n);
  rec.candidates.resize(n);
  Rng rng(hash_combine(cfg.seed, rec.step));
  for (std::size_t r = 0; r < n; ++r) {
    const auto logits = std::span<const float>(tr.logits.row(r));
    const auto p = candidate_probs(logits, spec, cfg.selection == Selection::sampled ? cfg.temperature : 1.0);
    int tok;
    if (cfg.selection == Selection::greedy_confidence) {
      tok = argmax_token(logits, spec);
    } else {
      double u = rng.uniform(), acc = 0.0;
      tok = -1;
      for (std::size_t v = 0; v < p.size(); ++v) {
        if (p[v] == 0.0) continue;
        acc += p[v];
        tok = static_cast<int>(v);
        if (u < acc) break;
      }
    }
    rec.candidates[r] = tok;
    rec.confidences[r] = static_cast<float>(p[static_cast<std::size_t>(tok)]);
  }

  std::vector<std::size_t> order(n);
  for (std::size_t r = 0; r < n; ++r) order[r] = r;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (rec.confidences[a] != rec.confidences[b]) return rec.confidences[a] > rec.confidences[b];
    return rec.masked[a] < rec.masked[b];
  });
  const std::size_t quota = std::min(st.quota[st.next_step], n);
  for (std::size_t i = 0; i < quota; ++i) {
    const std::size_t r = order[i];
    rec.committed.emplace_back(rec.masked[r], rec.candidates[r]);
  }
  std::sort(rec.committed.begin(), rec.committed.end());
  for (auto [pos, tok] : rec.committed) st.layout.tokens[pos] = tok;
  auto gen = st.layout.generated();
  rec.generation.assign(gen.begin(), gen.end());
  ++st.next_step;
  return rec;
}

// `prefix` supplies visual inputs and prompt; its generation span is replaced
// by gen_len mask tokens.
inline DecodeTrace decode(const model::SequenceLayout& prefix, const model::ModelSpec& spec,
                          const model::Weights<float>& w, const DecodeConfig& cfg,
                          const prior::PriorSubspace* subspace = nullptr) {
  DecodeState st = start(prefix, spec, cfg);
  const rope::PositionEncoding pe(spec.d_head(), cfg.scaler);
  DecodeTrace trace;
  trace.initial = st.layout;
  while (!st.done()) trace.steps.push_back(decode_step(st, spec, w, pe, cfg, subspace));
  auto gen = st.layout.generated();
  trace.tokens.assign(gen.begin(), gen.end());
  return trace;
}

// One JSON object per step: step, committed (position -> token), confidences
// (position -> value), generation, and sidecar section names when tensors are
// kept. A sample index, when given, leads each line and prefixes section names.
inline std::string to_jsonl(const DecodeTrace& trace, const std::string& sidecar = "",
                            std::optional<std::size_t> sample = std::nullopt) {
  std::string out;
  const std::string prefix = sample ? "sample" + std::to_string(*sample) + "." : "";
  for (const auto& s : trace.steps) {
    nlohmann::ordered_json j;
    if (sample) j["sample"] = *sample;
    j["step"] = s.step;
    nlohmann::ordered_json committed = nlohmann::ordered_json::object();
    for (auto [pos, tok] : s.committed) committed[std::to_string(pos)] = tok;
    j["committed"] = committed;
    nlohmann::ordered_json conf = nlohmann::ordered_json::object();
    for (std::size_t r = 0; r < s.masked.size(); ++r) conf[std::to_string(s.masked[r])] = s.confidences[r];
    j["confidences"] = conf;
    j["generation"] = s.generation;
    if (!sidecar.empty()) {
      nlohmann::ordered_json refs;
      refs["file"] = sidecar;
      std::vector<std::string> names;
      if (!s.hidden_pre.empty()) {
        names.push_back(prefix + "step" + std::to_string(s.step) + ".hidden_pre");
        names.push_back(prefix + "step" + std::to_string(s.step) + ".hidden_post");
      }
      for (std::size_t l = 0; l < s.attention.size(); ++l)
        for (std::size_t h = 0; h < s.attention[l].size(); ++h)
          names.push_back(prefix + "step" + std::to_string(s.step) + ".layer" + std::to_string(l + 1) + ".head" + std::to_string(h) + ".attention");
      refs["sections"] = names;
      j["tensors"] = refs;
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void append_tensors(io::Container& c, const DecodeTrace& trace, const std::string& prefix = "") {
  for (const auto& s : trace.steps) {
    const std::string p = prefix + "step" + std::to_string(s.step) + ".";
    std::vector<float> pos(s.masked.begin(), s.masked.end());
    c.sections.push_back(io::vector_section(p + "masked_positions", pos));
    if (!s.hidden_pre.empty()) {
      c.sections.push_back(io::to_section(p + "hidden_pre", s.hidden_pre, 2));
      c.sections.push_back(io::to_section(p + "hidden_post", s.hidden_post, 2));
    }
    for (std::size_t l = 0; l < s.attention.size(); ++l)
      for (std::size_t h = 0; h < s.attention[l].size(); ++h)
        c.sections.push_back(io::to_section(p + "layer" + std::to_string(l + 1) + ".head" + std::to_string(h) + ".attention",
                                            s.attention[l][h], 2));
  }
}

inline io::Container tensors_container(const DecodeTrace& trace) {
  io::Container c;
  c.config_text = "{}";
  append_tensors(c, trace);
  return c;
}

}  // namespace mdlab::decode
