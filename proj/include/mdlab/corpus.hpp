#pragma once

// Synthetic captioning corpus. A scene holds a fixed number of objects with
// categorical attributes (size, color, material, shape). Each attribute is
// one visual token: its codebook row plus Gaussian noise. The response lists
// the attribute words object by object; after every content word a separator
// ("," "the" "and" ".") is inserted with a probability chosen so separators
// make up `separator_rate` of the response tokens. Responses are cut at
// gen_len and padded with eot.

#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdlab/model.hpp"
#include "mdlab/numkit.hpp"
#include "mdlab/rng.hpp"

namespace mdlab::corpus {

using num::Matrix;

namespace vocab {
inline constexpr int pad = 0, eot = 1, mask = 2;
inline constexpr int comma = 3, the = 4, and_ = 5, period = 6;
inline constexpr std::array<int, 4> separators{comma, the, and_, period};
inline constexpr std::array<int, 4> prompt{7, 8, 9, 10};  // describe this image :
inline constexpr int first_content = 11;
inline constexpr std::array<const char*, 4> attribute_names{"size", "color", "material", "shape"};

inline bool is_separator(int id) { return id == comma || id == the || id == and_ || id == period; }
}  // namespace vocab

// Where separators may appear: after any content word, or only between objects.
enum class Placement { word, object };

NLOHMANN_JSON_SERIALIZE_ENUM(Placement, {{Placement::word, "word"}, {Placement::object, "object"}})

struct CorpusConfig {
  std::size_t n_objects = 6;
  std::size_t gen_len = 32;
  double separator_rate = 0.3;
  std::array<double, 4> separator_weights{0.55, 0.25, 0.15, 0.05};  // , the and .
  std::array<int, 4> attribute_values{4, 8, 4, 8};                    // size color material shape
  Placement placement = Placement::word;
  bool shuffle_order = false;  // describe objects in a random order rather than visual order
  bool distinct_separators = false;  // no separator directly repeats the one before it
  double noise_sigma = 0.3;
  std::uint64_t codebook_seed = 7;

  // Content ids are laid out attribute by attribute from vocab::first_content.
  int first_id(std::size_t attribute) const {
    int id = vocab::first_content;
    for (std::size_t a = 0; a < attribute; ++a) id += attribute_values[a];
    return id;
  }
  int end_id() const { return first_id(attribute_values.size()); }
  bool operator==(const CorpusConfig&) const = default;
};

namespace vocab {
inline std::string word(int id, const CorpusConfig& cfg = {}) {
  static const char* fixed[] = {"<pad>", "<eot>", "<mask>", ",", "the", "and", ".", "describe", "this", "image", ":"};
  static const std::array<std::vector<const char*>, 4> names{{
      {"tiny", "small", "big", "huge", "short", "tall", "wide", "thin"},
      {"red", "green", "blue", "yellow", "purple", "orange", "black", "white", "gray", "brown", "pink", "cyan", "gold",
       "silver", "teal", "navy"},
      {"metal", "wood", "glass", "stone", "rubber", "paper", "cloth", "clay"},
      {"cube", "sphere", "cone", "ring", "star", "disk", "pyramid", "torus", "cylinder", "prism", "arch", "wedge",
       "spiral", "cross", "heart", "moon"},
  }};
  if (id >= 0 && id < first_content) return fixed[id];
  for (std::size_t a = 0; a < 4; ++a) {
    const int off = id - cfg.first_id(a);
    if (off >= 0 && off < cfg.attribute_values[a]) {
      if (static_cast<std::size_t>(off) < names[a].size()) return names[a][static_cast<std::size_t>(off)];
      return std::string(attribute_names[a]) + std::to_string(off);
    }
  }
  return "<unused" + std::to_string(id) + ">";
}
}  // namespace vocab

inline std::vector<std::string> validate(const CorpusConfig& c, const model::ModelSpec& spec, const std::string& path = "corpus") {
  std::vector<std::string> out;
  if (c.n_objects < 1) out.push_back(path + ".n_objects: must be >= 1");
  if (c.gen_len < 1) out.push_back(path + ".gen_len: must be >= 1");
  if (!(c.separator_rate >= 0.0 && c.separator_rate < 0.5)) out.push_back(path + ".separator_rate: must lie in [0, 0.5)");
  double wsum = 0.0;
  bool wneg = false;
  for (double x : c.separator_weights) {
    wsum += x;
    wneg = wneg || !(x >= 0.0);
  }
  if (wneg || !(wsum > 0.0)) out.push_back(path + ".separator_weights: must be >= 0 with a positive sum");
  else if (c.distinct_separators && std::count_if(c.separator_weights.begin(), c.separator_weights.end(), [](double x) { return x > 0; }) < 2)
    out.push_back(path + ".distinct_separators: needs at least two separators with positive weight");
  for (std::size_t a = 0; a < c.attribute_values.size(); ++a)
    if (c.attribute_values[a] < 1) out.push_back(path + ".attribute_values[" + std::to_string(a) + "]: must be >= 1");
  if (!(c.noise_sigma >= 0.0)) out.push_back(path + ".noise_sigma: must be >= 0");
  if (static_cast<long>(spec.vocab_size) < c.end_id())
    out.push_back(path + ".attribute_values: need " + std::to_string(c.end_id()) + " token ids, vocabulary has " + std::to_string(spec.vocab_size));
  if (spec.pad_id != vocab::pad || spec.eot_id != vocab::eot || spec.mask_id != vocab::mask)
    out.push_back(path + ": corpus expects pad=0, eot=1, mask=2");
  return out;
}

inline void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = {{"n_objects", c.n_objects}, {"gen_len", c.gen_len}, {"separator_rate", c.separator_rate},
       {"separator_weights", c.separator_weights}, {"attribute_values", c.attribute_values},
       {"placement", c.placement},            {"shuffle_order", c.shuffle_order},
       {"distinct_separators", c.distinct_separators},
       {"noise_sigma", c.noise_sigma},        {"codebook_seed", c.codebook_seed}};
}
inline void from_json(const nlohmann::json& j, CorpusConfig& c) {
  CorpusConfig d;
  c.n_objects = j.value("n_objects", d.n_objects);
  c.gen_len = j.value("gen_len", d.gen_len);
  c.separator_rate = j.value("separator_rate", d.separator_rate);
  c.separator_weights = j.value("separator_weights", d.separator_weights);
  c.attribute_values = j.value("attribute_values", d.attribute_values);
  c.placement = j.value("placement", d.placement);
  c.shuffle_order = j.value("shuffle_order", d.shuffle_order);
  c.distinct_separators = j.value("distinct_separators", d.distinct_separators);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.codebook_seed = j.value("codebook_seed", d.codebook_seed);
}

struct SceneSample {
  std::vector<std::array<int, 4>> objects;  // attribute value index per kind
  Matrix visual;                            // (n_objects * 4) x d_visual
  std::vector<int> prompt;
  std::vector<int> response;                // gen_len ids, eot padded

  model::SequenceLayout layout(int pad_id = vocab::pad) const {
    return model::SequenceLayout::make(visual, prompt, response, pad_id);
  }
  // Same scene with an all-mask generation span of the given length.
  model::SequenceLayout prompt_layout(std::size_t gen_len, int mask_id = vocab::mask, int pad_id = vocab::pad) const {
    std::vector<int> gen(gen_len, mask_id);
    return model::SequenceLayout::make(visual, prompt, gen, pad_id);
  }
};

class CorpusGenerator {
 public:
  CorpusGenerator(CorpusConfig cfg, std::size_t d_visual) : cfg_(cfg), d_visual_(d_visual) {
    Rng rng(hash_string(cfg_.codebook_seed, "codebooks"));
    for (std::size_t a = 0; a < codebooks_.size(); ++a) {
      Matrix cb(static_cast<std::size_t>(cfg_.attribute_values[a]), d_visual);
      for (auto& x : cb.values()) x = static_cast<float>(rng.normal() / std::sqrt(static_cast<double>(d_visual)) * 2.0);
      codebooks_[a] = std::move(cb);
    }
  }

  const CorpusConfig& config() const { return cfg_; }
  const Matrix& codebook(std::size_t attribute) const { return codebooks_[attribute]; }
  std::size_t visual_tokens() const { return cfg_.n_objects * codebooks_.size(); }

  // Expected separators per slot so that separators form `separator_rate` of
  // the tokens. A slot follows every content word (word placement) or every
  // object (object placement): m / (k + m) = rate with k words per slot.
  double separators_per_slot() const {
    const double k = cfg_.placement == Placement::word ? 1.0 : static_cast<double>(codebooks_.size());
    const double m = k * cfg_.separator_rate / (1.0 - cfg_.separator_rate);
    // snap rounding noise so e.g. rate 1/3 with object placement gives exactly 2
    return std::abs(m - std::round(m)) < 1e-9 ? std::round(m) : m;
  }

  SceneSample sample(Rng& rng) const {
    SceneSample s;
    s.objects.resize(cfg_.n_objects);
    for (auto& o : s.objects)
      for (std::size_t a = 0; a < o.size(); ++a) o[a] = static_cast<int>(rng.below(static_cast<std::size_t>(cfg_.attribute_values[a])));

    s.visual = Matrix(visual_tokens(), d_visual_);
    std::size_t row = 0;
    for (const auto& o : s.objects) {
      for (std::size_t a = 0; a < o.size(); ++a, ++row) {
        const auto code = codebooks_[a].row(static_cast<std::size_t>(o[a]));
        for (std::size_t c = 0; c < d_visual_; ++c) {
          const double noise = cfg_.noise_sigma > 0 ? cfg_.noise_sigma * rng.normal() : 0.0;
          s.visual(row, c) = static_cast<float>(static_cast<double>(code[c]) + noise);
        }
      }
    }

    s.prompt.assign(vocab::prompt.begin(), vocab::prompt.end());
    // floor(m) separators per slot, plus one more with probability frac(m)
    const double m = separators_per_slot();
    const auto whole = static_cast<std::size_t>(m);
    auto emit_slot = [&] {
      const std::size_t n = whole + (rng.bernoulli(m - static_cast<double>(whole)) ? 1 : 0);
      for (std::size_t i = 0; i < n; ++i) {
        auto w = cfg_.separator_weights;
        if (cfg_.distinct_separators && i > 0)
          for (std::size_t k = 0; k < w.size(); ++k)
            if (vocab::separators[k] == s.response.back()) w[k] = 0.0;
        s.response.push_back(pick_separator(rng, w));
      }
    };
    std::vector<std::size_t> order(s.objects.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (cfg_.shuffle_order)
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (const auto idx : order) {
      const auto& o = s.objects[idx];
      for (std::size_t a = 0; a < o.size(); ++a) {
        s.response.push_back(cfg_.first_id(a) + o[a]);
        if (cfg_.placement == Placement::word) emit_slot();
      }
      if (cfg_.placement == Placement::object) emit_slot();
    }
    if (s.response.size() > cfg_.gen_len) s.response.resize(cfg_.gen_len);
    s.response.resize(cfg_.gen_len, vocab::eot);
    return s;
  }

  SceneSample sample(std::uint64_t seed) const {
    Rng rng(hash_string(seed, "scene"));
    return sample(rng);
  }

  // Relative token frequencies over responses (eot padding included).
  std::vector<double> token_frequencies(std::size_t n_samples, std::uint64_t seed, std::size_t vocab_size) const {
    std::vector<double> f(vocab_size, 0.0);
    Rng rng(hash_string(seed, "freq"));
    double total = 0.0;
    for (std::size_t i = 0; i < n_samples; ++i)
      for (int id : sample(rng).response) {
        f[static_cast<std::size_t>(id)] += 1.0;
        total += 1.0;
      }
    for (auto& x : f) x /= total;
    return f;
  }

 private:
  static int pick_separator(Rng& rng, const std::array<double, 4>& weights) {
    const double total = weights[0] + weights[1] + weights[2] + weights[3];
    double u = rng.uniform() * total, acc = 0.0;
    for (std::size_t i = 0; i < vocab::separators.size(); ++i) {
      acc += weights[i];
      if (u < acc) return vocab::separators[i];
    }
    return vocab::separators.back();
  }

  CorpusConfig cfg_;
  std::size_t d_visual_;
  std::array<Matrix, 4> codebooks_;
};

}  // namespace mdlab::corpus
