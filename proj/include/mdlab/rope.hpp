#pragma once

// Rotary position embedding with frequency scalers.
//
// Pair i = (v[2i], v[2i+1]) rotates by angle s_i * (m * theta_i), theta_i =
// 10000^(-2i/d_head). The scaler family fills s_i: identity (1), monotonic
// (1 + beta * gate(tau_i), tau_i = i / (d_head/2 - 1)), NTK base change and a
// simplified YaRN ramp. A scaler can be restricted to token segments; tokens
// outside use the unscaled table.

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdlab/numkit.hpp"

namespace mdlab {

enum class Segment { visual = 0, prompt = 1, generation = 2 };

inline const char* to_string(Segment s) {
  switch (s) {
    case Segment::visual: return "visual";
    case Segment::prompt: return "prompt";
    case Segment::generation: return "generation";
  }
  return "?";
}

inline Segment segment_from_string(const std::string& s) {
  if (s == "visual") return Segment::visual;
  if (s == "prompt") return Segment::prompt;
  if (s == "generation") return Segment::generation;
  throw std::invalid_argument("unknown segment '" + s + "'");
}

struct SegmentSet {
  std::array<bool, 3> on{true, true, true};

  static SegmentSet all() { return {}; }
  static SegmentSet none() { return SegmentSet{{false, false, false}}; }
  bool contains(Segment s) const { return on[static_cast<std::size_t>(s)]; }
  bool is_all() const { return on[0] && on[1] && on[2]; }
  bool operator==(const SegmentSet&) const = default;
};

}  // namespace mdlab

namespace mdlab::rope {

enum class ScalerKind { identity, monotonic, ntk, yarn };
enum class GateKind { sigmoid, cosine, exponential, linear, power };

inline constexpr double kBase = 10000.0;

struct RopeScalerSpec {
  ScalerKind kind = ScalerKind::identity;
  double beta = 0.0;
  double eta = 8.0;
  double tau0 = 0.6;
  GateKind gate = GateKind::sigmoid;
  double ntk_factor = 1.0;
  double yarn_low = 8.0;     // wavelengths shorter than this are left alone
  double yarn_high = 256.0;  // wavelengths longer than this are fully interpolated
  SegmentSet segments = SegmentSet::all();

  static RopeScalerSpec monotonic(double beta, double eta, double tau0, GateKind g = GateKind::sigmoid) {
    RopeScalerSpec s;
    s.kind = ScalerKind::monotonic;
    s.beta = beta;
    s.eta = eta;
    s.tau0 = tau0;
    s.gate = g;
    return s;
  }

  bool operator==(const RopeScalerSpec&) const = default;
};

inline std::vector<std::string> validate(const RopeScalerSpec& s, const std::string& path = "scaler") {
  std::vector<std::string> out;
  auto bad = [&](const std::string& field, const std::string& msg) { out.push_back(path + "." + field + ": " + msg); };
  if (!(s.beta >= 0.0) || !std::isfinite(s.beta)) bad("beta", "must be finite and >= 0");
  if (s.kind == ScalerKind::monotonic) {
    if (!(s.eta > 0.0) || !std::isfinite(s.eta)) bad("eta", "must be finite and > 0");
    if (!(s.tau0 >= 0.0 && s.tau0 <= 1.0)) bad("tau0", "must lie in [0, 1]");
    if (s.gate == GateKind::power && s.tau0 == 0.0) bad("gate", "power gate requires tau0 > 0");
  }
  if (s.kind == ScalerKind::ntk || s.kind == ScalerKind::yarn) {
    if (!(s.ntk_factor >= 1.0) || !std::isfinite(s.ntk_factor)) bad("ntk_factor", "must be finite and >= 1");
  }
  if (s.kind == ScalerKind::yarn) {
    if (!(s.yarn_low > 0.0 && s.yarn_low < s.yarn_high)) bad("yarn_low", "require 0 < yarn_low < yarn_high");
  }
  if (s.segments == SegmentSet::none()) bad("segments", "must select at least one segment");
  return out;
}

inline void require_valid(const RopeScalerSpec& s) {
  auto v = validate(s);
  if (!v.empty()) throw std::invalid_argument(v.front());
}

// theta_i = 10000^(-2i/d_head), i in [0, d_head/2).
inline std::vector<double> base_freqs(std::size_t d_head) {
  if (d_head < 2 || d_head % 2 != 0)
    throw std::invalid_argument("base_freqs: d_head must be even and >= 2, got " + std::to_string(d_head));
  std::vector<double> theta(d_head / 2);
  for (std::size_t i = 0; i < theta.size(); ++i)
    theta[i] = std::pow(kBase, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
  return theta;
}

// Monotone non-decreasing gate in [0, 1] with gate(tau0) = 0.5 for every kind.
inline double gate(double tau, const RopeScalerSpec& spec) {
  const double x = spec.eta * (tau - spec.tau0);
  switch (spec.gate) {
    case GateKind::sigmoid:
      return 1.0 / (1.0 + std::exp(-x));
    case GateKind::linear:
      return std::clamp(0.5 + x / 4.0, 0.0, 1.0);
    case GateKind::cosine:
      return 0.5 * (1.0 + std::sin(std::clamp(x / 2.0, -std::numbers::pi / 2, std::numbers::pi / 2)));
    case GateKind::exponential:
      return std::min(1.0, 0.5 * std::exp(x));
    case GateKind::power:
      if (spec.tau0 <= 0.0) throw std::invalid_argument("gate: power gate requires tau0 > 0");
      return std::min(1.0, 0.5 * std::pow(tau / spec.tau0, spec.eta));
  }
  return 0.0;
}

struct FrequencyTable {
  std::size_t d_head = 0;
  std::vector<double> theta;
  std::vector<double> scale;

  std::size_t pairs() const { return theta.size(); }
  double angle(std::size_t i, double position) const { return scale[i] * (position * theta[i]); }
  bool operator==(const FrequencyTable&) const = default;
};

inline FrequencyTable identity_table(std::size_t d_head) {
  FrequencyTable t;
  t.d_head = d_head;
  t.theta = base_freqs(d_head);
  t.scale.assign(t.theta.size(), 1.0);
  return t;
}

inline FrequencyTable scale_factors(std::size_t d_head, const RopeScalerSpec& spec) {
  require_valid(spec);
  FrequencyTable t = identity_table(d_head);
  const std::size_t half = t.pairs();
  switch (spec.kind) {
    case ScalerKind::identity:
      break;
    case ScalerKind::monotonic:
      for (std::size_t i = 0; i < half; ++i) {
        const double tau = half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
        t.scale[i] = 1.0 + spec.beta * gate(tau, spec);
      }
      break;
    case ScalerKind::ntk: {
      // theta'_i = (b * k^(d/(d-2)))^(-2i/d)  =>  s_i = k^(-2i/(d-2))
      if (d_head > 2) {
        const double d = static_cast<double>(d_head);
        for (std::size_t i = 0; i < half; ++i)
          t.scale[i] = std::pow(spec.ntk_factor, -2.0 * static_cast<double>(i) / (d - 2.0));
      }
      break;
    }
    case ScalerKind::yarn:
      for (std::size_t i = 0; i < half; ++i) {
        const double wavelength = 2.0 * std::numbers::pi / t.theta[i];
        const double r = std::clamp((wavelength - spec.yarn_low) / (spec.yarn_high - spec.yarn_low), 0.0, 1.0);
        t.scale[i] = (1.0 - r) + r / spec.ntk_factor;
      }
      break;
  }
  return t;
}

template <typename T>
void apply_rotary(std::span<T> v, double position, const FrequencyTable& table) {
  if (v.size() != table.d_head)
    throw std::invalid_argument("apply_rotary: vector length " + std::to_string(v.size()) +
                                " != d_head " + std::to_string(table.d_head));
  for (std::size_t i = 0; i < table.pairs(); ++i) {
    const double a = table.angle(i, position);
    const double c = std::cos(a);
    const double s = std::sin(a);
    const double x0 = v[2 * i];
    const double x1 = v[2 * i + 1];
    v[2 * i] = static_cast<T>(x0 * c - x1 * s);
    v[2 * i + 1] = static_cast<T>(x0 * s + x1 * c);
  }
}

template <typename T>
std::vector<T> rotated(std::span<const T> v, double position, const FrequencyTable& table) {
  std::vector<T> out(v.begin(), v.end());
  apply_rotary(std::span<T>(out), position, table);
  return out;
}

// <R(m) q, R(n) k>
template <typename T>
double relative_score(std::span<const T> q, std::span<const T> k, std::size_t m, std::size_t n,
                      const FrequencyTable& table) {
  auto qr = rotated(q, static_cast<double>(m), table);
  auto kr = rotated(k, static_cast<double>(n), table);
  return num::dot(std::span<const T>(qr), std::span<const T>(kr));
}

// Unscaled table for tokens outside the scaler's segment set; scaled table inside.
class PositionEncoding {
 public:
  PositionEncoding() = default;
  PositionEncoding(std::size_t d_head, const RopeScalerSpec& spec)
      : spec_(spec), base_(identity_table(d_head)), scaled_(scale_factors(d_head, spec)) {}

  const FrequencyTable& table_for(Segment s) const { return spec_.segments.contains(s) ? scaled_ : base_; }
  const FrequencyTable& base() const { return base_; }
  const FrequencyTable& scaled() const { return scaled_; }
  const RopeScalerSpec& spec() const { return spec_; }
  std::size_t d_head() const { return base_.d_head; }

 private:
  RopeScalerSpec spec_;
  FrequencyTable base_;
  FrequencyTable scaled_;
};

// JSON (run config) mapping with field names kind/beta/eta/tau0/gate/ntk_factor/yarn_low/yarn_high/segments.
NLOHMANN_JSON_SERIALIZE_ENUM(ScalerKind, {{ScalerKind::identity, "identity"},
                                          {ScalerKind::monotonic, "monotonic"},
                                          {ScalerKind::ntk, "ntk"},
                                          {ScalerKind::yarn, "yarn"}})
NLOHMANN_JSON_SERIALIZE_ENUM(GateKind, {{GateKind::sigmoid, "sigmoid"},
                                        {GateKind::cosine, "cosine"},
                                        {GateKind::exponential, "exponential"},
                                        {GateKind::linear, "linear"},
                                        {GateKind::power, "power"}})

inline nlohmann::json segments_to_json(const SegmentSet& s) {
  if (s.is_all()) return "all";
  nlohmann::json arr = nlohmann::json::array();
  for (Segment seg : {Segment::visual, Segment::prompt, Segment::generation})
    if (s.contains(seg)) arr.push_back(to_string(seg));
  return arr;
}

inline SegmentSet segments_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "all") return SegmentSet::all();
    SegmentSet s = SegmentSet::none();
    s.on[static_cast<std::size_t>(segment_from_string(j.get<std::string>()))] = true;
    return s;
  }
  SegmentSet s = SegmentSet::none();
  for (const auto& e : j) s.on[static_cast<std::size_t>(segment_from_string(e.get<std::string>()))] = true;
  return s;
}

inline void to_json(nlohmann::json& j, const RopeScalerSpec& s) {
  j = nlohmann::json{{"kind", s.kind},       {"beta", s.beta},         {"eta", s.eta},
                     {"tau0", s.tau0},       {"gate", s.gate},         {"ntk_factor", s.ntk_factor},
                     {"yarn_low", s.yarn_low}, {"yarn_high", s.yarn_high}, {"segments", segments_to_json(s.segments)}};
}

inline void from_json(const nlohmann::json& j, RopeScalerSpec& s) {
  RopeScalerSpec d;
  s.kind = j.value("kind", d.kind);
  s.beta = j.value("beta", d.beta);
  s.eta = j.value("eta", d.eta);
  s.tau0 = j.value("tau0", d.tau0);
  s.gate = j.value("gate", d.gate);
  s.ntk_factor = j.value("ntk_factor", d.ntk_factor);
  s.yarn_low = j.value("yarn_low", d.yarn_low);
  s.yarn_high = j.value("yarn_high", d.yarn_high);
  s.segments = j.contains("segments") ? segments_from_json(j.at("segments")) : d.segments;
}

}  // namespace mdlab::rope
