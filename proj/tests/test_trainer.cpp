#include <gtest/gtest.h>

#include <cmath>

#include "mdlab/corpus.hpp"
#include "mdlab/trainer.hpp"

using namespace mdlab;
using namespace mdlab::train;

namespace {

model::ModelSpec tiny() {
  model::ModelSpec s;
  s.vocab_size = 16;
  s.d_model = 8;
  s.n_heads = 2;
  s.n_layers = 1;
  s.mlp_hidden = 8;
  s.d_visual = 3;
  return s;
}

Example random_example(const model::ModelSpec& s, Rng& rng, double t) {
  num::Matrix vis(3, s.d_visual);
  for (auto& x : vis.values()) x = static_cast<float>(rng.normal());
  const std::vector<int> prompt{7, 8};
  std::vector<int> response(6);
  for (auto& r : response) r = 3 + static_cast<int>(rng.below(s.vocab_size - 3));
  corpus::SceneSample sample;
  sample.visual = vis;
  sample.prompt = prompt;
  sample.response = response;
  return make_example(sample, t, s.mask_id, rng);
}

template <typename T>
std::vector<T*> params(Weights<T>& w) {
  std::vector<T*> out;
  w.visit([&](const std::string&, num::BasicMatrix<T>& m, int) {
    for (auto& x : m.values()) out.push_back(&x);
  });
  return out;
}

}  // namespace

TEST(Gradients, MatchCentralDifferences) {
  const auto s = tiny();
  auto w = model::init_weights<float>(s, 1).cast<double>();
  // non-unit gains and bias so every path carries signal
  Rng rng(2);
  w.visit([&](const std::string&, num::BasicMatrix<double>& m, int rank) {
    if (rank == 1)
      for (auto& x : m.values()) x += 0.2 * rng.normal();
  });
  std::vector<Example> batch;
  for (double t : {0.3, 0.7, 1.0}) batch.push_back(random_example(s, rng, t));
  auto scaler = rope::RopeScalerSpec::monotonic(0.4, 8, 0.6);
  scaler.segments = rope::segments_from_json(nlohmann::json::array({"visual", "generation"}));
  const rope::PositionEncoding pe(s.d_head(), scaler);

  for (auto mode : {Weighting::inverse_t, Weighting::uniform}) {
    auto res = loss_and_grads<double>(s, w, batch, mode, pe);
    auto ps = params(w);
    auto gs = params(res.grads);
    ASSERT_EQ(ps.size(), gs.size());
    const double eps = 1e-3;
    double worst = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const double keep = *ps[i];
      *ps[i] = keep + eps;
      const double up = loss_only<double>(s, w, batch, mode, pe);
      *ps[i] = keep - eps;
      const double down = loss_only<double>(s, w, batch, mode, pe);
      *ps[i] = keep;
      const double fd = (up - down) / (2 * eps);
      const double g = *gs[i];
      // relative error with a floor for entries whose true gradient is ~0
      const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-4});
      worst = std::max(worst, rel);
      EXPECT_LE(rel, 1e-3) << "parameter " << i << " analytic " << g << " numeric " << fd;
    }
    RecordProperty(mode == Weighting::uniform ? "worst_rel_uniform" : "worst_rel_inverse_t", std::to_string(worst));
  }
}

TEST(Loss, UniformLogitsGiveLogV) {
  auto s = tiny();
  auto w = Weights<float>::zeros(s);  // zero embeddings -> zero logits
  for (auto& l : w.layers) l.attn_norm.fill(1), l.mlp_norm.fill(1);
  w.final_norm.fill(1);
  Rng rng(3);
  std::vector<Example> batch{random_example(s, rng, 1.0)};
  const auto r = loss_and_grads<float>(s, w, batch, Weighting::uniform, rope::PositionEncoding(s.d_head(), {}));
  EXPECT_NEAR(r.loss, std::log(16.0), 1e-6);
  // inverse-t weighting at t = 1 is the same
  EXPECT_NEAR(loss_only<float>(s, w, batch, Weighting::inverse_t, rope::PositionEncoding(s.d_head(), {})), std::log(16.0), 1e-6);
}

TEST(Loss, NoMaskedPositionsGiveZero) {
  const auto s = tiny();
  const auto w = model::init_weights<float>(s, 4);
  Rng rng(5);
  auto ex = random_example(s, rng, 1.0);
  std::fill(ex.targets.begin(), ex.targets.end(), -1);
  std::vector<Example> batch{ex, ex};
  const auto r = loss_and_grads<float>(s, w, batch, Weighting::inverse_t, rope::PositionEncoding(s.d_head(), {}));
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.contributing, 0u);
  EXPECT_TRUE(r.grads == Weights<float>::zeros(s));
}

TEST(Loss, InverseTWeighting) {
  auto s = tiny();
  auto w = Weights<float>::zeros(s);
  for (auto& l : w.layers) l.attn_norm.fill(1), l.mlp_norm.fill(1);
  w.final_norm.fill(1);
  Rng rng(6);
  std::vector<Example> batch{random_example(s, rng, 1.0)};
  batch[0].t = 0.25;
  EXPECT_NEAR(loss_only<float>(s, w, batch, Weighting::inverse_t, rope::PositionEncoding(s.d_head(), {})),
              4.0 * std::log(16.0), 1e-5);
}

TEST(ForwardProcess, Limits) {
  Rng rng(7);
  const std::vector<int> r(50, 9);
  const auto all = mask_forward_process(r, 1.0, 2, rng);
  EXPECT_TRUE(std::all_of(all.tokens.begin(), all.tokens.end(), [](int t) { return t == 2; }));
  const auto few = mask_forward_process(r, 1e-12, 2, rng);
  EXPECT_EQ(std::count(few.masked.begin(), few.masked.end(), true), 0);
  EXPECT_THROW(mask_forward_process(r, 0.0, 2, rng), std::invalid_argument);
  EXPECT_THROW(mask_forward_process(r, 1.5, 2, rng), std::invalid_argument);
}

TEST(ForwardProcess, HalfRateMonteCarlo) {
  Rng rng(8);
  const std::vector<int> r(1, 9);
  int masked = 0;
  for (int i = 0; i < 10000; ++i) masked += mask_forward_process(r, 0.5, 2, rng).masked[0];
  EXPECT_NEAR(masked / 10000.0, 0.5, 0.02);
}

TEST(ForwardProcess, NeverTouchesPromptOrVisual) {
  const corpus::CorpusGenerator gen({}, 16);
  Rng rng(9);
  for (int i = 0; i < 50; ++i) {
    const auto sample = gen.sample(rng);
    const auto ex = make_example(sample, 1.0, corpus::vocab::mask, rng);
    for (std::size_t j = 0; j < ex.layout.generation.start; ++j) {
      EXPECT_NE(ex.layout.tokens[j], corpus::vocab::mask);
      EXPECT_EQ(ex.targets[j], -1);
    }
  }
}

TEST(Corpus, DeterministicPerSeed) {
  const corpus::CorpusGenerator gen({}, 16);
  const auto a = gen.sample(std::uint64_t{5}), b = gen.sample(std::uint64_t{5}), c = gen.sample(std::uint64_t{6});
  EXPECT_EQ(a.response, b.response);
  EXPECT_EQ(a.visual, b.visual);
  EXPECT_NE(a.visual, c.visual);
}

TEST(Corpus, ZeroNoiseGivesCodebookRows) {
  corpus::CorpusConfig cfg;
  cfg.noise_sigma = 0;
  const corpus::CorpusGenerator gen(cfg, 16);
  const auto s = gen.sample(std::uint64_t{3});
  for (std::size_t o = 0; o < cfg.n_objects; ++o)
    for (std::size_t a = 0; a < 4; ++a) {
      const auto row = s.visual.row(o * 4 + a);
      const auto code = gen.codebook(a).row(static_cast<std::size_t>(s.objects[o][a]));
      EXPECT_TRUE(std::equal(row.begin(), row.end(), code.begin()));
    }
}

TEST(Corpus, SeparatorFrequencyMatchesRate) {
  corpus::CorpusConfig cfg;
  cfg.gen_len = 64;  // long enough that no response is truncated
  const corpus::CorpusGenerator gen(cfg, 16);
  Rng rng(10);
  std::size_t sep = 0, total = 0;
  std::array<std::size_t, 4> kinds{};
  for (int i = 0; i < 10000; ++i)
    for (int id : gen.sample(rng).response) {
      if (id == corpus::vocab::eot) continue;
      ++total;
      for (std::size_t k = 0; k < 4; ++k)
        if (id == corpus::vocab::separators[k]) ++sep, ++kinds[k];
    }
  EXPECT_NEAR(double(sep) / total, cfg.separator_rate, 0.02);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(double(kinds[k]) / sep, cfg.separator_weights[k], 0.02);
}

TEST(Corpus, ObjectPlacementKeepsAttributesContiguous) {
  corpus::CorpusConfig cfg;
  cfg.placement = corpus::Placement::object;
  cfg.gen_len = 64;
  const corpus::CorpusGenerator gen(cfg, 16);
  Rng rng(12);
  std::size_t sep = 0, total = 0;
  for (int i = 0; i < 5000; ++i) {
    const auto s = gen.sample(rng);
    std::vector<int> content;
    for (std::size_t j = 0; j < s.response.size(); ++j) {
      const int id = s.response[j];
      if (id == corpus::vocab::eot) break;
      ++total;
      if (corpus::vocab::is_separator(id)) {
        ++sep;
        continue;
      }
      // a content word is always followed by the next attribute of its object
      const std::size_t k = content.size() % 4;
      EXPECT_EQ(id, cfg.first_id(k) + s.objects[content.size() / 4][k]);
      if (k < 3) ASSERT_FALSE(corpus::vocab::is_separator(s.response[j + 1]));
      content.push_back(id);
    }
  }
  EXPECT_NEAR(double(sep) / total, cfg.separator_rate, 0.02);
}

TEST(Corpus, DistinctSeparatorsNeverRepeatInSlot) {
  corpus::CorpusConfig cfg;
  cfg.placement = corpus::Placement::object;
  cfg.separator_rate = 1.0 / 3.0;  // two separators per slot
  cfg.distinct_separators = true;
  const corpus::CorpusGenerator gen(cfg, 16);
  Rng rng(5);
  std::size_t pairs = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto s = gen.sample(rng);
    for (std::size_t j = 1; j < s.response.size(); ++j)
      if (corpus::vocab::is_separator(s.response[j]) && corpus::vocab::is_separator(s.response[j - 1])) {
        ++pairs;
        EXPECT_NE(s.response[j], s.response[j - 1]);
      }
  }
  EXPECT_GT(pairs, 1000u);
  cfg.separator_weights = {1.0, 0.0, 0.0, 0.0};
  EXPECT_FALSE(corpus::validate(cfg, model::ModelSpec{}).empty());
}

TEST(Corpus, ResponseReferencesOnlyPresentAttributes) {
  const corpus::CorpusConfig cfg;
  const corpus::CorpusGenerator gen(cfg, 16);
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto s = gen.sample(rng);
    std::set<int> present;
    for (const auto& o : s.objects)
      for (std::size_t a = 0; a < 4; ++a) present.insert(cfg.first_id(a) + o[a]);
    EXPECT_EQ(s.response.size(), cfg.gen_len);
    for (int id : s.response)
      if (id >= corpus::vocab::first_content) EXPECT_TRUE(present.contains(id));
  }
}

TEST(Train, ZeroLearningRateKeepsWeights) {
  model::ModelSpec s;
  s.n_layers = 1;
  TrainConfig cfg;
  cfg.lr = 0;
  cfg.total_steps = 3;
  cfg.batch_size = 2;
  const auto r = train::train(s, {}, cfg, 42);
  EXPECT_TRUE(r.weights == model::init_weights<float>(s, 42));
  EXPECT_EQ(r.log.size(), 3u);
}

TEST(Train, SameSeedSameWeights) {
  model::ModelSpec s;
  s.n_layers = 1;
  TrainConfig cfg;
  cfg.total_steps = 5;
  cfg.batch_size = 2;
  const auto a = train::train(s, {}, cfg, 1);
  const auto b = train::train(s, {}, cfg, 1);
  EXPECT_TRUE(a.weights == b.weights);
  EXPECT_EQ(log_csv(a.log), log_csv(b.log));
  EXPECT_FALSE(a.weights == model::init_weights<float>(s, 1));
}

TEST(Train, DivergenceAborts) {
  model::ModelSpec s;
  s.n_layers = 1;
  TrainConfig cfg;
  cfg.lr = 1e3;
  cfg.grad_clip = 0;
  cfg.warmup_steps = 0;
  cfg.batch_size = 1;
  cfg.total_steps = 400;
  EXPECT_THROW(train::train(s, {}, cfg, 3), NumericalError);
}

TEST(Train, ContextDropoutDropsContextAndMasksEverything) {
  const model::ModelSpec spec;
  const corpus::CorpusGenerator gen(corpus::CorpusConfig{}, spec.d_visual);
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.context_dropout = 1.0;
  for (const auto& ex : sample_batch(gen, cfg, spec.mask_id, 3)) {
    EXPECT_EQ(ex.layout.visual.len, 0u);
    EXPECT_EQ(ex.layout.prompt.len, 0u);
    EXPECT_EQ(ex.t, 1.0);
    EXPECT_EQ(ex.layout.masked_positions(spec.mask_id).size(), ex.layout.generation.len);
  }
  // with no dropout nothing is dropped, and partial dropout drops roughly its share
  cfg.context_dropout = 0.0;
  for (const auto& ex : sample_batch(gen, cfg, spec.mask_id, 3)) EXPECT_GT(ex.layout.visual.len, 0u);
  cfg.context_dropout = 0.25;
  cfg.batch_size = 2000;
  std::size_t dropped = 0;
  for (const auto& ex : sample_batch(gen, cfg, spec.mask_id, 3)) dropped += ex.layout.visual.len == 0;
  EXPECT_NEAR(static_cast<double>(dropped) / 2000.0, 0.25, 0.03);
}

// A fully masked, context-free sequence puts the same state on every position:
// keys differ only by rotation and all values are equal. That state is the
// uncontextualized mask state, which context dropout trains directly.
TEST(Train, FullMaskWithoutContextEqualsLoneMask) {
  model::ModelSpec spec;
  const auto w = model::init_weights<float>(spec, 3);
  const rope::PositionEncoding pe(spec.d_head(), {});
  const std::vector<int> gen(12, spec.mask_id);
  const auto lay = model::SequenceLayout::make(num::Matrix(0, spec.d_visual), std::vector<int>{}, gen, spec.pad_id);
  const auto tr = model::forward<float>(spec, w, lay, pe);
  const auto lone = model::uncontextualized_forward<float>(spec, w, w.tok_embed.row(static_cast<std::size_t>(spec.mask_id)), pe);
  for (std::size_t j = 0; j < gen.size(); ++j)
    for (std::size_t i = 0; i < spec.d_model; ++i) EXPECT_NEAR(tr.final_hidden(j, i), lone.states.back()[i], 1e-5);
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  EXPECT_TRUE(validate(cfg).empty());
  cfg.lr = -1;
  cfg.batch_size = 0;
  cfg.context_dropout = 1.5;
  EXPECT_EQ(validate(cfg).size(), 3u);
}
