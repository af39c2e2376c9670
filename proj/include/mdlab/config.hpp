#pragma once

// Run configuration: a versioned JSON document, optionally layered over a
// named preset, with `--set key=value` overrides applied to the raw document
// before validation so every violation carries a field path.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdlab/corpus.hpp"
#include "mdlab/decode.hpp"
#include "mdlab/error.hpp"
#include "mdlab/model.hpp"
#include "mdlab/prior.hpp"
#include "mdlab/rope.hpp"
#include "mdlab/trainer.hpp"

namespace mdlab::config {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

struct DecodeSection {
  std::size_t gen_len = 32;
  std::size_t steps = 8;
  decode::Selection selection = decode::Selection::greedy_confidence;
  double temperature = 1.0;
  bool record_attention = false;
  bool record_hidden = true;
  bool eot_truncate = false;
  bool save_tensors = false;
  std::size_t n_samples = 20;      // scenes decoded per run or ablation cell
  std::uint64_t scene_seed = 1000; // scene i uses scene_seed + i
};

struct SuppressionSection {
  bool enabled = false;
  prior::SuppressionSpec spec;
};

struct PriorSection {
  prior::PriorSource source;
  std::size_t k = 3;
  std::size_t freq_samples = 2000;  // scenes used to estimate token frequencies
};

struct AnalysisSection {
  std::size_t n_bands = 2;
  std::size_t n_samples = 4;  // decodes traced with attention and hidden states
};

struct AblateSection {
  std::vector<std::size_t> steps;
  std::vector<double> lambda;
  std::vector<double> beta;
  std::vector<prior::PriorKind> prior;
  std::vector<rope::GateKind> gate;
  std::vector<SegmentSet> segments;
};

struct TimingSection {
  std::size_t repeats = 5;
};

struct Paths {
  std::string checkpoint;
  std::string subspace;
  std::string ablate;
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  std::string preset;
  std::uint64_t seed = 1;
  model::ModelSpec model;
  corpus::CorpusConfig corpus;
  train::TrainConfig train;
  DecodeSection decode;
  rope::RopeScalerSpec scaler;
  SuppressionSection suppression;
  PriorSection prior;
  AnalysisSection analysis;
  AblateSection ablate;
  TimingSection timing;
  Paths paths;
};

// ---------------------------------------------------------------- JSON mapping

inline void to_json(json& j, const RunConfig& c) {
  json ab;
  ab["steps"] = c.ablate.steps;
  ab["lambda"] = c.ablate.lambda;
  ab["beta"] = c.ablate.beta;
  ab["prior"] = c.ablate.prior;
  ab["gate"] = c.ablate.gate;
  ab["segments"] = json::array();
  for (const auto& s : c.ablate.segments) ab["segments"].push_back(rope::segments_to_json(s));
  json sup = c.suppression.spec;
  sup["enabled"] = c.suppression.enabled;
  json pr = c.prior.source;
  pr["k"] = c.prior.k;
  pr["freq_samples"] = c.prior.freq_samples;
  j = json{{"schema_version", c.schema_version},
           {"preset", c.preset},
           {"seed", c.seed},
           {"model", c.model},
           {"corpus", c.corpus},
           {"train", c.train},
           {"decode",
            {{"gen_len", c.decode.gen_len},
             {"steps", c.decode.steps},
             {"selection", c.decode.selection},
             {"temperature", c.decode.temperature},
             {"record_attention", c.decode.record_attention},
             {"record_hidden", c.decode.record_hidden},
             {"eot_truncate", c.decode.eot_truncate},
             {"save_tensors", c.decode.save_tensors},
             {"n_samples", c.decode.n_samples},
             {"scene_seed", c.decode.scene_seed}}},
           {"scaler", c.scaler},
           {"suppression", sup},
           {"prior", pr},
           {"analysis", {{"n_bands", c.analysis.n_bands}, {"n_samples", c.analysis.n_samples}}},
           {"ablate", ab},
           {"timing", {{"repeats", c.timing.repeats}}},
           {"paths", {{"checkpoint", c.paths.checkpoint}, {"subspace", c.paths.subspace}, {"ablate", c.paths.ablate}}}};
}

inline void from_json(const json& j, RunConfig& c) {
  RunConfig d;
  c.schema_version = j.value("schema_version", 0);
  c.preset = j.value("preset", d.preset);
  c.seed = j.value("seed", d.seed);
  c.model = j.value("model", json::object()).get<model::ModelSpec>();
  c.corpus = j.value("corpus", json::object()).get<corpus::CorpusConfig>();
  c.train = j.value("train", json::object()).get<train::TrainConfig>();
  const json dj = j.value("decode", json::object());
  c.decode.gen_len = dj.value("gen_len", d.decode.gen_len);
  c.decode.steps = dj.value("steps", d.decode.steps);
  c.decode.selection = dj.value("selection", d.decode.selection);
  c.decode.temperature = dj.value("temperature", d.decode.temperature);
  c.decode.record_attention = dj.value("record_attention", d.decode.record_attention);
  c.decode.record_hidden = dj.value("record_hidden", d.decode.record_hidden);
  c.decode.eot_truncate = dj.value("eot_truncate", d.decode.eot_truncate);
  c.decode.save_tensors = dj.value("save_tensors", d.decode.save_tensors);
  c.decode.n_samples = dj.value("n_samples", d.decode.n_samples);
  c.decode.scene_seed = dj.value("scene_seed", d.decode.scene_seed);
  c.scaler = j.value("scaler", json::object()).get<rope::RopeScalerSpec>();
  const json sj = j.value("suppression", json::object());
  c.suppression.enabled = sj.value("enabled", d.suppression.enabled);
  c.suppression.spec = sj.get<prior::SuppressionSpec>();
  const json pj = j.value("prior", json::object());
  c.prior.source = pj.get<prior::PriorSource>();
  c.prior.k = pj.value("k", d.prior.k);
  c.prior.freq_samples = pj.value("freq_samples", d.prior.freq_samples);
  const json aj = j.value("analysis", json::object());
  c.analysis.n_bands = aj.value("n_bands", d.analysis.n_bands);
  c.analysis.n_samples = aj.value("n_samples", d.analysis.n_samples);
  const json bj = j.value("ablate", json::object());
  c.ablate.steps = bj.value("steps", d.ablate.steps);
  c.ablate.lambda = bj.value("lambda", d.ablate.lambda);
  c.ablate.beta = bj.value("beta", d.ablate.beta);
  c.ablate.prior = bj.value("prior", d.ablate.prior);
  c.ablate.gate = bj.value("gate", d.ablate.gate);
  c.ablate.segments.clear();
  for (const auto& s : bj.value("segments", json::array())) c.ablate.segments.push_back(rope::segments_from_json(s));
  c.timing.repeats = j.value("timing", json::object()).value("repeats", d.timing.repeats);
  const json paths = j.value("paths", json::object());
  c.paths.checkpoint = paths.value("checkpoint", d.paths.checkpoint);
  c.paths.subspace = paths.value("subspace", d.paths.subspace);
  c.paths.ablate = paths.value("ablate", d.paths.ablate);
}

// ---------------------------------------------------------------- presets

// Backbone presets differ only in (lambda, beta, eta); tau0 = 0.6 and k = 3 throughout.
// "toy" is the reference configuration for the shipped checkpoint.
inline const std::map<std::string, std::array<double, 3>>& backbone_presets() {
  static const std::map<std::string, std::array<double, 3>> p{
      {"llada-v", {0.1, 0.01, 8.0}}, {"lavida", {0.3, 0.01, 12.0}}, {"mmada", {0.1, 0.4, 8.0}}, {"lumina", {0.1, 0.4, 12.0}}};
  return p;
}

inline std::vector<std::string> preset_names() {
  std::vector<std::string> out{"toy"};
  for (const auto& [name, v] : backbone_presets()) out.push_back(name);
  return out;
}

inline RunConfig toy_defaults() {
  RunConfig c;
  // Objects in random order with exactly two distinct separators between
  // them: parallel commits then have real alternatives to disagree on.
  c.corpus.placement = corpus::Placement::object;
  c.corpus.separator_rate = 1.0 / 3.0;
  c.corpus.separator_weights = {0.4, 0.3, 0.2, 0.1};
  c.corpus.shuffle_order = true;
  c.corpus.distinct_separators = true;
  c.train.weighting = train::Weighting::uniform;
  c.train.total_steps = 2800;
  c.train.context_dropout = 0.25;
  c.decode.steps = 4;
  c.decode.eot_truncate = true;
  c.scaler = rope::RopeScalerSpec::monotonic(1.0, 2.0, 0.6);
  c.suppression.enabled = true;
  c.suppression.spec.lambda = 0.3;
  c.prior.source.kind = prior::PriorKind::topk;
  c.ablate.steps = {4, 8, 16, 32};
  return c;
}

inline json preset(const std::string& name) {
  RunConfig c = toy_defaults();
  if (name != "toy") {
    auto it = backbone_presets().find(name);
    if (it == backbone_presets().end()) throw ConfigError("preset: unknown preset '" + name + "'");
    const auto [lambda, beta, eta] = it->second;
    c.suppression.spec.lambda = lambda;
    c.scaler = rope::RopeScalerSpec::monotonic(beta, eta, 0.6);
  }
  c.preset = name;
  return c;
}

// ---------------------------------------------------------------- schema

enum class Kind { unsigned_int, integer, number, boolean, string, segments, unsigned_list, number_list, string_list, segments_list };

struct Field {
  Kind kind;
  std::vector<std::string> choices;  // allowed strings for enum-valued fields
};

using Schema = std::map<std::string, std::map<std::string, Field>>;

inline const Schema& schema() {
  static const std::vector<std::string> selections{"greedy_confidence", "sampled"};
  static const std::vector<std::string> scalers{"identity", "monotonic", "ntk", "yarn"};
  static const std::vector<std::string> gates{"sigmoid", "cosine", "exponential", "linear", "power"};
  static const std::vector<std::string> priors{"vocab_mean", "freq_weighted", "topk", "random"};
  static const std::vector<std::string> recon{"residual_preserving", "literal"};
  static const std::vector<std::string> weightings{"inverse_t", "uniform"};
  static const std::vector<std::string> placements{"word", "object"};
  static const Schema s{
      {"model",
       {{"vocab_size", {Kind::unsigned_int}}, {"d_model", {Kind::unsigned_int}}, {"n_heads", {Kind::unsigned_int}},
        {"n_layers", {Kind::unsigned_int}}, {"mlp_hidden", {Kind::unsigned_int}}, {"d_visual", {Kind::unsigned_int}},
        {"pad_id", {Kind::integer}}, {"eot_id", {Kind::integer}}, {"mask_id", {Kind::integer}}, {"rms_eps", {Kind::number}}}},
      {"corpus",
       {{"n_objects", {Kind::unsigned_int}}, {"gen_len", {Kind::unsigned_int}}, {"separator_rate", {Kind::number}},
        {"separator_weights", {Kind::number_list}}, {"attribute_values", {Kind::unsigned_list}},
        {"placement", {Kind::string, placements}}, {"shuffle_order", {Kind::boolean}}, {"distinct_separators", {Kind::boolean}}, {"noise_sigma", {Kind::number}}, {"codebook_seed", {Kind::unsigned_int}}}},
      {"train",
       {{"lr", {Kind::number}}, {"beta1", {Kind::number}}, {"beta2", {Kind::number}}, {"eps", {Kind::number}},
        {"grad_clip", {Kind::number}}, {"batch_size", {Kind::unsigned_int}}, {"total_steps", {Kind::unsigned_int}},
        {"warmup_steps", {Kind::unsigned_int}}, {"weighting", {Kind::string, weightings}}, {"context_dropout", {Kind::number}},
        {"seed", {Kind::unsigned_int}}}},
      {"decode",
       {{"gen_len", {Kind::unsigned_int}}, {"steps", {Kind::unsigned_int}}, {"selection", {Kind::string, selections}},
        {"temperature", {Kind::number}}, {"record_attention", {Kind::boolean}}, {"record_hidden", {Kind::boolean}},
        {"eot_truncate", {Kind::boolean}}, {"save_tensors", {Kind::boolean}}, {"n_samples", {Kind::unsigned_int}},
        {"scene_seed", {Kind::unsigned_int}}}},
      {"scaler",
       {{"kind", {Kind::string, scalers}}, {"beta", {Kind::number}}, {"eta", {Kind::number}}, {"tau0", {Kind::number}},
        {"gate", {Kind::string, gates}}, {"ntk_factor", {Kind::number}}, {"yarn_low", {Kind::number}},
        {"yarn_high", {Kind::number}}, {"segments", {Kind::segments}}}},
      {"suppression",
       {{"enabled", {Kind::boolean}}, {"lambda", {Kind::number}}, {"layers", {Kind::unsigned_list}},
        {"reconstruction", {Kind::string, recon}}, {"before_final_norm", {Kind::boolean}}}},
      {"prior",
       {{"kind", {Kind::string, priors}}, {"topk", {Kind::unsigned_int}}, {"seed", {Kind::unsigned_int}},
        {"k", {Kind::unsigned_int}}, {"freq_samples", {Kind::unsigned_int}}}},
      {"analysis", {{"n_bands", {Kind::unsigned_int}}, {"n_samples", {Kind::unsigned_int}}}},
      {"ablate",
       {{"steps", {Kind::unsigned_list}}, {"lambda", {Kind::number_list}}, {"beta", {Kind::number_list}},
        {"prior", {Kind::string_list, priors}}, {"gate", {Kind::string_list, gates}}, {"segments", {Kind::segments_list}}}},
      {"timing", {{"repeats", {Kind::unsigned_int}}}},
      {"paths", {{"checkpoint", {Kind::string}}, {"subspace", {Kind::string}}, {"ablate", {Kind::string}}}},
  };
  return s;
}

namespace detail {

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : ", ") + s;
  return out;
}

inline bool valid_segments(const json& v) {
  static const std::set<std::string> names{"visual", "prompt", "generation"};
  if (v.is_string()) return v == "all" || names.contains(v.get<std::string>());
  if (!v.is_array() || v.empty()) return false;
  for (const auto& e : v)
    if (!e.is_string() || !names.contains(e.get<std::string>())) return false;
  return true;
}

inline bool non_negative_int(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline void check_value(const std::string& path, const json& v, const Field& f, std::vector<std::string>& out) {
  auto bad = [&](const std::string& m) { out.push_back(path + ": " + m); };
  auto check_choice = [&](const json& e, const std::string& p) {
    if (!e.is_string()) return out.push_back(p + ": expected a string");
    if (!f.choices.empty() && std::find(f.choices.begin(), f.choices.end(), e.get<std::string>()) == f.choices.end())
      out.push_back(p + ": unknown value '" + e.get<std::string>() + "' (expected one of " + join(f.choices) + ")");
  };
  switch (f.kind) {
    case Kind::unsigned_int:
      if (!non_negative_int(v)) bad("expected a non-negative integer");
      break;
    case Kind::integer:
      if (!v.is_number_integer()) bad("expected an integer");
      break;
    case Kind::number:
      if (!v.is_number()) bad("expected a number");
      break;
    case Kind::boolean:
      if (!v.is_boolean()) bad("expected true or false");
      break;
    case Kind::string:
      check_choice(v, path);
      break;
    case Kind::segments:
      if (!valid_segments(v)) bad("expected \"all\" or a nonempty list of visual/prompt/generation");
      break;
    case Kind::unsigned_list:
    case Kind::number_list:
    case Kind::string_list:
    case Kind::segments_list:
      if (!v.is_array()) return bad("expected a list");
      for (std::size_t i = 0; i < v.size(); ++i) {
        const std::string p = path + "[" + std::to_string(i) + "]";
        const json& e = v[i];
        if (f.kind == Kind::unsigned_list && !non_negative_int(e)) out.push_back(p + ": expected a non-negative integer");
        if (f.kind == Kind::number_list && !e.is_number()) out.push_back(p + ": expected a number");
        if (f.kind == Kind::string_list) check_choice(e, p);
        if (f.kind == Kind::segments_list && !valid_segments(e))
          out.push_back(p + ": expected \"all\" or a nonempty list of visual/prompt/generation");
      }
      break;
  }
}

}  // namespace detail

// Structural check of a merged document: known sections and fields, value types, enum spellings.
inline std::vector<std::string> check_schema(const json& doc) {
  std::vector<std::string> out;
  if (!doc.is_object()) return {"config: top level must be an object"};
  if (!doc.contains("schema_version")) out.push_back("schema_version: missing");
  else if (!doc["schema_version"].is_number_integer() || doc["schema_version"].get<long>() != kSchemaVersion)
    out.push_back("schema_version: unsupported (expected " + std::to_string(kSchemaVersion) + ")");
  for (const auto& [key, value] : doc.items()) {
    if (key == "schema_version") continue;
    if (key == "preset") {
      if (!value.is_string()) out.push_back("preset: expected a string");
      continue;
    }
    if (key == "seed") {
      if (!detail::non_negative_int(value)) out.push_back("seed: expected a non-negative integer");
      continue;
    }
    auto sec = schema().find(key);
    if (sec == schema().end()) {
      out.push_back(key + ": unknown section");
      continue;
    }
    if (!value.is_object()) {
      out.push_back(key + ": expected an object");
      continue;
    }
    for (const auto& [field, v] : value.items()) {
      auto f = sec->second.find(field);
      if (f == sec->second.end()) out.push_back(key + "." + field + ": unknown field");
      else detail::check_value(key + "." + field, v, f->second, out);
    }
  }
  if (doc.contains("corpus") && doc["corpus"].is_object())
    for (const char* field : {"separator_weights", "attribute_values"})
      if (doc["corpus"].contains(field) && doc["corpus"][field].is_array() && doc["corpus"][field].size() != 4)
        out.push_back(std::string("corpus.") + field + ": expected exactly 4 entries");
  return out;
}

// Semantic invariants of every referenced type.
inline std::vector<std::string> validate_config(const RunConfig& c) {
  std::vector<std::string> out;
  auto add = [&](std::vector<std::string> v) { out.insert(out.end(), v.begin(), v.end()); };
  add(model::validate(c.model));
  add(corpus::validate(c.corpus, c.model));
  add(train::validate(c.train));
  decode::DecodeConfig dc;
  dc.gen_len = c.decode.gen_len;
  dc.steps = c.decode.steps;
  dc.temperature = c.decode.temperature;
  add(decode::validate(dc));
  if (c.decode.n_samples < 1) out.push_back("decode.n_samples: must be >= 1");
  add(rope::validate(c.scaler));
  add(prior::validate(c.suppression.spec, c.model.n_layers));
  if (c.prior.k < 1) out.push_back("prior.k: must be >= 1");
  const std::size_t content = c.model.vocab_size > 3 ? c.model.vocab_size - 3 : 0;
  if (c.prior.source.topk < 1 || c.prior.source.topk > content)
    out.push_back("prior.topk: must lie in [1, " + std::to_string(content) + "]");
  if (c.prior.freq_samples < 1) out.push_back("prior.freq_samples: must be >= 1");
  const std::size_t pairs = c.model.d_head() / 2;
  if (c.analysis.n_bands < 1 || (pairs > 0 && pairs % c.analysis.n_bands != 0))
    out.push_back("analysis.n_bands: must divide the " + std::to_string(pairs) + " rotary pairs per head");
  if (c.analysis.n_samples < 1) out.push_back("analysis.n_samples: must be >= 1");
  for (std::size_t i = 0; i < c.ablate.steps.size(); ++i)
    if (c.ablate.steps[i] < 1 || c.ablate.steps[i] > c.decode.gen_len)
      out.push_back("ablate.steps[" + std::to_string(i) + "]: must lie in [1, decode.gen_len]");
  for (std::size_t i = 0; i < c.ablate.lambda.size(); ++i)
    if (!(c.ablate.lambda[i] >= 0.0)) out.push_back("ablate.lambda[" + std::to_string(i) + "]: must be >= 0");
  for (std::size_t i = 0; i < c.ablate.beta.size(); ++i)
    if (!(c.ablate.beta[i] >= 0.0)) out.push_back("ablate.beta[" + std::to_string(i) + "]: must be >= 0");
  for (std::size_t i = 0; i < c.ablate.gate.size(); ++i)
    if (c.ablate.gate[i] == rope::GateKind::power && c.scaler.tau0 == 0.0)
      out.push_back("ablate.gate[" + std::to_string(i) + "]: power gate requires scaler.tau0 > 0");
  if (c.timing.repeats < 1) out.push_back("timing.repeats: must be >= 1");
  return out;
}

// ---------------------------------------------------------------- loading

inline std::string location(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

inline json parse_document(const std::string& text, const std::string& origin = "config") {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": parse error at " + location(text, e.byte > 0 ? e.byte - 1 : 0) + ": " + e.what());
  }
}

// "a.b.c=value"; value is JSON when it parses, a plain string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + assignment + ": expected key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set " + assignment + ": empty path component");
    if (!node->is_object()) throw ConfigError("--set " + assignment + ": '" + key.substr(0, start - 1) + "' is not an object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

struct Loaded {
  RunConfig config;
  json document;  // merged, as validated
};

class InvalidConfig : public ConfigError {
 public:
  explicit InvalidConfig(std::vector<std::string> v)
      : ConfigError(detail::join(v)), violations(std::move(v)) {}
  std::vector<std::string> violations;
};

// Preset (if named) <- document <- overrides; throws InvalidConfig with every violation.
inline Loaded resolve(json doc, const std::vector<std::string>& overrides = {}) {
  for (const auto& o : overrides) apply_override(doc, o);
  // The version must come from the document itself, not from a preset.
  if (doc.is_object() && !doc.contains("schema_version")) throw InvalidConfig({"schema_version: missing"});
  json merged = json::object();
  if (doc.is_object() && doc.contains("preset")) {
    if (!doc["preset"].is_string()) throw InvalidConfig({"preset: expected a string"});
    const std::string name = doc["preset"].get<std::string>();
    if (!name.empty()) {
      const auto names = preset_names();
      if (std::find(names.begin(), names.end(), name) == names.end())
        throw InvalidConfig({"preset: unknown preset '" + name + "' (expected one of " + detail::join(names) + ")"});
      merged = preset(name);
    }
  }
  merged.merge_patch(doc);
  auto v = check_schema(merged);
  if (!v.empty()) throw InvalidConfig(v);
  Loaded out;
  out.config = merged.get<RunConfig>();
  v = validate_config(out.config);
  if (!v.empty()) throw InvalidConfig(v);
  out.document = std::move(merged);
  return out;
}

inline Loaded load(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return resolve(parse_document(ss.str(), path), overrides);
}

// Violations of a document without throwing (empty when valid).
inline std::vector<std::string> violations(const json& doc, const std::vector<std::string>& overrides = {}) {
  try {
    resolve(doc, overrides);
    return {};
  } catch (const InvalidConfig& e) {
    return e.violations;
  } catch (const ConfigError& e) {
    return {e.what()};
  }
}

inline decode::DecodeConfig decode_config(const RunConfig& c) {
  decode::DecodeConfig d;
  d.gen_len = c.decode.gen_len;
  d.steps = c.decode.steps;
  d.scaler = c.scaler;
  if (c.suppression.enabled) d.suppression = c.suppression.spec;
  d.selection = c.decode.selection;
  d.temperature = c.decode.temperature;
  d.seed = c.seed;
  d.record_attention = c.decode.record_attention;
  d.record_hidden = c.decode.record_hidden;
  d.eot_truncate = c.decode.eot_truncate;
  return d;
}

}  // namespace mdlab::config
