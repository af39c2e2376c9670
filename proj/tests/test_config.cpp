#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mdlab/config.hpp"

using namespace mdlab;
using namespace mdlab::config;
using nlohmann::json;

namespace {

json base() { return json{{"schema_version", kSchemaVersion}, {"preset", "toy"}}; }

bool mentions(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Config, EveryPresetResolves) {
  for (const auto& name : preset_names()) {
    json doc{{"schema_version", kSchemaVersion}, {"preset", name}};
    EXPECT_TRUE(violations(doc).empty()) << name;
    const auto l = resolve(doc);
    EXPECT_EQ(l.config.preset, name);
    EXPECT_EQ(l.config.prior.k, 3u);
    EXPECT_DOUBLE_EQ(l.config.scaler.tau0, 0.6);
  }
}

TEST(Config, BackbonePresetValues) {
  const std::map<std::string, std::array<double, 3>> expect{
      {"llada-v", {0.1, 0.01, 8}}, {"lavida", {0.3, 0.01, 12}}, {"mmada", {0.1, 0.4, 8}}, {"lumina", {0.1, 0.4, 12}}};
  for (const auto& [name, v] : expect) {
    const auto c = resolve(json{{"schema_version", kSchemaVersion}, {"preset", name}}).config;
    EXPECT_DOUBLE_EQ(c.suppression.spec.lambda, v[0]) << name;
    EXPECT_DOUBLE_EQ(c.scaler.beta, v[1]) << name;
    EXPECT_DOUBLE_EQ(c.scaler.eta, v[2]) << name;
    EXPECT_EQ(c.scaler.kind, rope::ScalerKind::monotonic);
  }
}

TEST(Config, ShippedPresetFilesMatchBuiltins) {
  for (const auto& name : preset_names()) {
    const std::filesystem::path p = std::filesystem::path(MDLAB_PRESETS) / (name + ".json");
    ASSERT_TRUE(std::filesystem::exists(p)) << p;
    const auto from_file = load(p.string());
    const auto builtin = resolve(json{{"schema_version", kSchemaVersion}, {"preset", name}});
    EXPECT_EQ(json(from_file.config), json(builtin.config)) << name;
  }
}

TEST(Config, RoundTripThroughJson) {
  const auto c = resolve(base()).config;
  json j = c;
  j["schema_version"] = kSchemaVersion;
  const auto again = resolve(j).config;
  EXPECT_EQ(json(again), json(c));
}

TEST(Config, OverridesApply) {
  const auto c = resolve(base(), {"decode.steps=16", "scaler.gate=cosine", "suppression.lambda=0.25", "seed=9",
                                  "ablate.steps=[2,4]", "paths.checkpoint=some/where.mdlb"})
                     .config;
  EXPECT_EQ(c.decode.steps, 16u);
  EXPECT_EQ(c.scaler.gate, rope::GateKind::cosine);
  EXPECT_DOUBLE_EQ(c.suppression.spec.lambda, 0.25);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.ablate.steps, (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(c.paths.checkpoint, "some/where.mdlb");
}

TEST(Config, OverrideSyntaxErrors) {
  json d = base();
  EXPECT_THROW(apply_override(d, "decode.steps"), ConfigError);
  EXPECT_THROW(apply_override(d, "=3"), ConfigError);
  EXPECT_THROW(apply_override(d, "decode..steps=3"), ConfigError);
  EXPECT_THROW(apply_override(d, "schema_version.x=3"), ConfigError);
}

TEST(Config, SchemaViolationsCarryFieldPaths) {
  auto v = violations(base(), {"decode.steps=\"four\""});
  EXPECT_TRUE(mentions(v, "decode.steps: expected a non-negative integer"));
  v = violations(base(), {"scaler.gate=triangle"});
  EXPECT_TRUE(mentions(v, "scaler.gate: unknown value 'triangle'"));
  v = violations(base(), {"decode.stepz=4"});
  EXPECT_TRUE(mentions(v, "decode.stepz: unknown field"));
  v = violations(base(), {"decoder.steps=4"});
  EXPECT_TRUE(mentions(v, "decoder: unknown section"));
  v = violations(base(), {"ablate.prior=[\"vocab_mean\",\"mode\"]"});
  EXPECT_TRUE(mentions(v, "ablate.prior[1]: unknown value 'mode'"));
  v = violations(base(), {"corpus.separator_weights=[1,2]"});
  EXPECT_TRUE(mentions(v, "corpus.separator_weights: expected exactly 4 entries"));
  v = violations(base(), {"scaler.segments=[\"visual\",\"audio\"]"});
  EXPECT_TRUE(mentions(v, "scaler.segments"));
}

TEST(Config, SemanticViolationsAreAllReported) {
  const auto v = violations(base(), {"decode.steps=64", "scaler.beta=-1", "suppression.lambda=-0.5", "analysis.n_bands=3",
                                     "train.context_dropout=2"});
  EXPECT_TRUE(mentions(v, "decode.steps"));
  EXPECT_TRUE(mentions(v, "scaler.beta"));
  EXPECT_TRUE(mentions(v, "suppression.lambda"));
  EXPECT_TRUE(mentions(v, "analysis.n_bands"));
  EXPECT_TRUE(mentions(v, "train.context_dropout"));
  EXPECT_GE(v.size(), 5u);
}

TEST(Config, SchemaVersionAndPreset) {
  json d{{"preset", "toy"}};
  EXPECT_TRUE(mentions(violations(d), "schema_version: missing"));
  d["schema_version"] = 99;
  EXPECT_TRUE(mentions(violations(d), "schema_version: unsupported"));
  EXPECT_TRUE(mentions(violations(json{{"schema_version", kSchemaVersion}, {"preset", "gpt"}}), "unknown preset 'gpt'"));
}

TEST(Config, ParseErrorsReportLocation) {
  try {
    parse_document("{\n  \"schema_version\": 1,\n  \"decode\": {\"steps\": 4,}\n}");
    FAIL() << "expected a parse error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_EQ(location("ab\ncd", 4), "line 2, column 2");
  EXPECT_THROW(load("/nonexistent/config.json"), ConfigError);
}

TEST(Config, DecodeConfigMapping) {
  auto c = resolve(base(), {"suppression.enabled=false"}).config;
  auto d = decode_config(c);
  EXPECT_FALSE(d.suppression.has_value());
  c = resolve(base(), {"suppression.enabled=true", "suppression.lambda=0.7", "seed=5"}).config;
  d = decode_config(c);
  ASSERT_TRUE(d.suppression.has_value());
  EXPECT_DOUBLE_EQ(d.suppression->lambda, 0.7);
  EXPECT_EQ(d.seed, 5u);
  EXPECT_EQ(d.scaler, c.scaler);
}
