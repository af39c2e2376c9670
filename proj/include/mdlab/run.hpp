#pragma once

// Command pipelines behind the CLI. Every command writes into its own output
// directory and finishes by writing manifest.json (config snapshot, inputs and
// outputs with SHA-256 checksums, per-phase wall-clock timings).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "mdlab/analysis.hpp"
#include "mdlab/config.hpp"
#include "mdlab/container.hpp"
#include "mdlab/corpus.hpp"
#include "mdlab/decode.hpp"
#include "mdlab/error.hpp"
#include "mdlab/prior.hpp"
#include "mdlab/trainer.hpp"

namespace mdlab::run {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------- utilities

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(io::read_file(p)); }

// MDLAB_THREADS caps the worker count; unset means hardware concurrency.
inline std::size_t worker_count() {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const char* env = std::getenv("MDLAB_THREADS");
  if (!env || !*env) return hw;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("MDLAB_THREADS: must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<std::size_t>(v);
}

// Runs fn(i) for i in [0, n) on a bounded pool; results land by index, so
// the outcome does not depend on scheduling. The first exception is rethrown.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers = worker_count()) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!error) error = std::current_exception();
            next = n;
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------- manifest

class Manifest {
 public:
  Manifest(fs::path dir, std::string command, const config::Loaded& cfg)
      : dir_(std::move(dir)), command_(std::move(command)), config_(cfg.document), seed_(cfg.config.seed) {}

  const fs::path& dir() const { return dir_; }

  void input(const fs::path& p) { inputs_.push_back({p.string(), sha256_file(p)}); }

  // Writes a file atomically under the run directory and records it.
  void write(const std::string& name, const std::string& bytes) {
    const fs::path p = dir_ / name;
    fs::create_directories(p.parent_path());
    io::write_file_atomic(p, bytes);
    outputs_.push_back({name, sha256_hex(bytes), bytes.size()});
  }
  void save(const std::string& name, const io::Container& c) { write(name, io::serialize(c)); }

  template <typename F>
  auto phase(const std::string& name, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    auto finish = [&] { timings_.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()); };
    if constexpr (std::is_void_v<std::invoke_result_t<F>>) {
      f();
      finish();
    } else {
      auto r = f();
      finish();
      return r;
    }
  }

  void finish() const {
    ordered_json m;
    m["tool"] = "mdlab";
    m["version"] = kToolVersion;
    m["command"] = command_;
    m["seed"] = seed_;
    m["config"] = config_;
    m["inputs"] = ordered_json::array();
    for (const auto& [p, h] : inputs_) m["inputs"].push_back({{"path", p}, {"sha256", h}});
    m["outputs"] = ordered_json::array();
    for (const auto& o : outputs_) m["outputs"].push_back({{"path", o.name}, {"sha256", o.sha}, {"bytes", o.bytes}});
    m["timings"] = ordered_json::object();
    for (const auto& [n, s] : timings_) m["timings"][n] = s;
    io::write_file_atomic(dir_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  struct Output {
    std::string name, sha;
    std::size_t bytes;
  };
  fs::path dir_;
  std::string command_;
  json config_;
  std::uint64_t seed_;
  std::vector<std::pair<std::string, std::string>> inputs_;
  std::vector<Output> outputs_;
  std::vector<std::pair<std::string, double>> timings_;
};

// Violations of a run directory's manifest (empty when every listed file
// exists with a matching checksum).
inline std::vector<std::string> verify_manifest(const fs::path& dir) {
  std::vector<std::string> out;
  const json m = json::parse(io::read_file(dir / "manifest.json"));
  for (const auto& o : m.at("outputs")) {
    const fs::path p = dir / o.at("path").get<std::string>();
    if (!fs::exists(p)) {
      out.push_back(o.at("path").get<std::string>() + ": missing");
      continue;
    }
    if (sha256_file(p) != o.at("sha256").get<std::string>()) out.push_back(o.at("path").get<std::string>() + ": checksum mismatch");
  }
  return out;
}

// ---------------------------------------------------------------- artifacts

struct Checkpoint {
  model::ModelSpec spec;
  model::Weights<float> weights;
  json meta;
};

inline io::Container checkpoint_container(const config::RunConfig& c, const model::Weights<float>& w) {
  io::Container out;
  out.config_text = json{{"model", c.model}, {"corpus", c.corpus}, {"train", c.train}, {"seed", c.seed}}.dump();
  io::append_weights(out, w);
  return out;
}

inline Checkpoint read_checkpoint(const fs::path& p) {
  const auto c = io::load(p);
  Checkpoint ck;
  ck.meta = json::parse(c.config_text);
  ck.spec = ck.meta.at("model").get<model::ModelSpec>();
  ck.weights = io::read_weights(c, ck.spec);
  return ck;
}

inline fs::path require_path(const std::string& value, const std::string& field, const std::string& command) {
  if (value.empty()) throw ConfigError(field + ": required by '" + command + "'");
  const fs::path p(value);
  if (!fs::exists(p)) throw MissingArtifact(field + ": '" + value + "' does not exist");
  return p;
}

inline Checkpoint open_checkpoint(const config::RunConfig& c, Manifest& m, const std::string& command) {
  const auto p = require_path(c.paths.checkpoint, "paths.checkpoint", command);
  m.input(p);
  auto ck = read_checkpoint(p);
  if (!(ck.spec == c.model)) throw ConfigError("model: does not match the checkpoint's model spec");
  return ck;
}

inline prior::PriorSubspace build_prior(const config::RunConfig& c, const model::ModelSpec& spec, const model::Weights<float>& w,
                                        prior::PriorSource src) {
  const rope::PositionEncoding pe(spec.d_head(), c.scaler);
  prior::PriorInputs in;
  if (src.kind == prior::PriorKind::freq_weighted) {
    const corpus::CorpusGenerator gen(c.corpus, spec.d_visual);
    in.corpus_freqs = gen.token_frequencies(c.prior.freq_samples, c.seed, spec.vocab_size);
  }
  if (src.kind == prior::PriorKind::topk) {
    const auto mask = w.tok_embed.row(static_cast<std::size_t>(spec.mask_id));
    in.mask_logits = model::uncontextualized_forward<float>(spec, w, mask, pe).logits;
  }
  const auto emb = prior::prior_embedding(src, spec, w, in);
  return prior::build_subspace(emb, spec, w, pe, c.prior.k, src);
}

// Subspace from paths.subspace when set, otherwise built from the checkpoint.
inline prior::PriorSubspace open_subspace(const config::RunConfig& c, const Checkpoint& ck, Manifest& m) {
  if (!c.paths.subspace.empty()) {
    const auto p = require_path(c.paths.subspace, "paths.subspace", "decode");
    m.input(p);
    auto sub = prior::from_container(io::load(p));
    if (sub.d() != ck.spec.d_model) throw ConfigError("paths.subspace: dimension does not match the checkpoint");
    return sub;
  }
  return build_prior(c, ck.spec, ck.weights, c.prior.source);
}

// ---------------------------------------------------------------- decoding helpers

inline std::vector<corpus::SceneSample> scenes(const config::RunConfig& c, std::size_t d_visual, std::size_t n) {
  const corpus::CorpusGenerator gen(c.corpus, d_visual);
  std::vector<corpus::SceneSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen.sample(c.decode.scene_seed + i));
  return out;
}

inline double effective_lambda(const decode::DecodeConfig& d) { return d.suppression ? d.suppression->lambda : 0.0; }
inline double effective_beta(const decode::DecodeConfig& d) { return d.scaler.kind == rope::ScalerKind::monotonic ? d.scaler.beta : 0.0; }

inline const char* kMetricsHeader = "run_id,steps,gen_len,lambda,beta,distinct1,distinct2,distinct3,repetition_ratio\n";

inline std::string metrics_row(const std::string& run_id, const decode::DecodeConfig& d, const analysis::TextMetrics& m) {
  return run_id + "," + std::to_string(d.steps) + "," + std::to_string(d.gen_len) + "," + fmt(effective_lambda(d)) + "," +
         fmt(effective_beta(d)) + "," + fmt(m.distinct1) + "," + fmt(m.distinct2) + "," + fmt(m.distinct3) + "," +
         fmt(m.repetition) + "\n";
}

inline std::string words(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) out += (out.empty() ? "" : " ") + corpus::vocab::word(t);
  return out;
}

struct Decoded {
  std::vector<decode::DecodeTrace> traces;
  std::vector<analysis::TextMetrics> metrics;
};

inline Decoded decode_all(const std::vector<corpus::SceneSample>& sc, const model::ModelSpec& spec, const model::Weights<float>& w,
                          const decode::DecodeConfig& d, const prior::PriorSubspace* sub) {
  Decoded out;
  out.traces.resize(sc.size());
  out.metrics.resize(sc.size());
  parallel_for(sc.size(), [&](std::size_t i) {
    out.traces[i] = decode::decode(sc[i].prompt_layout(d.gen_len, spec.mask_id, spec.pad_id), spec, w, d, sub);
    out.metrics[i] = analysis::text_metrics(out.traces[i].tokens, d.eot_truncate, spec.eot_id);
  });
  return out;
}

// ---------------------------------------------------------------- commands

inline void cmd_train(const config::Loaded& cfg, Manifest& m, std::ostream& log) {
  const auto& c = cfg.config;
  auto res = m.phase("train", [&] {
    return train::train(c.model, c.corpus, c.train, c.seed, [&](const train::LogEntry& e) {
      if (e.step % 100 == 0 || e.step == c.train.total_steps)
        log << "step " << e.step << " loss " << fmt(e.loss) << " grad_norm " << fmt(e.grad_norm) << "\n";
    });
  });
  m.save("checkpoint.mdlb", checkpoint_container(c, res.weights));
  m.write("train_log.csv", train::log_csv(res.log));
}

inline void cmd_subspace(const config::Loaded& cfg, Manifest& m, std::ostream& log) {
  const auto& c = cfg.config;
  const auto ck = open_checkpoint(c, m, "subspace");
  const auto sub = m.phase("subspace", [&] { return build_prior(c, ck.spec, ck.weights, c.prior.source); });
  if (sub.degenerate) log << "warning: prior subspace is degenerate (" << sub.k() << " of " << c.prior.k << " components)\n";
  m.save("subspace.mdlb", prior::to_container(sub));
}

inline void cmd_decode(const config::Loaded& cfg, Manifest& m, std::ostream&) {
  const auto& c = cfg.config;
  const auto ck = open_checkpoint(c, m, "decode");
  std::optional<prior::PriorSubspace> sub;
  if (c.suppression.enabled) sub = m.phase("subspace", [&] { return open_subspace(c, ck, m); });
  auto d = config::decode_config(c);
  const auto sc = scenes(c, ck.spec.d_visual, c.decode.n_samples);
  const auto out = m.phase("decode", [&] { return decode_all(sc, ck.spec, ck.weights, d, sub ? &*sub : nullptr); });
  std::string jsonl, metrics = kMetricsHeader, text;
  io::Container tensors;
  tensors.config_text = "{}";
  for (std::size_t i = 0; i < sc.size(); ++i) {
    jsonl += decode::to_jsonl(out.traces[i], c.decode.save_tensors ? "tensors.mdlb" : "", i);
    metrics += metrics_row("sample" + std::to_string(i), d, out.metrics[i]);
    text += words(out.traces[i].tokens) + "\n";
    if (c.decode.save_tensors) decode::append_tensors(tensors, out.traces[i], "sample" + std::to_string(i) + ".");
  }
  m.write("trace.jsonl", jsonl);
  m.write("metrics.csv", metrics);
  m.write("generations.txt", text);
  if (c.decode.save_tensors) m.save("tensors.mdlb", tensors);
}

inline void cmd_analyze(const config::Loaded& cfg, Manifest& m, std::ostream&) {
  const auto& c = cfg.config;
  const auto ck = open_checkpoint(c, m, "analyze");
  const auto& spec = ck.spec;
  const auto& w = ck.weights;
  // The drift reference is always needed; suppression uses it only when enabled.
  const auto sub = m.phase("subspace", [&] { return open_subspace(c, ck, m); });
  auto d = config::decode_config(c);
  d.record_attention = true;
  d.record_hidden = true;
  const auto sc = scenes(c, spec.d_visual, c.analysis.n_samples);
  const auto out = m.phase("decode", [&] { return decode_all(sc, spec, w, d, d.suppression ? &sub : nullptr); });
  const rope::PositionEncoding pe(spec.d_head(), d.scaler);
  const std::size_t J = out.traces.front().initial.length();
  const auto bins = analysis::DistanceBins::standard(J - 1);

  m.phase("analysis", [&] {
    std::string metrics = kMetricsHeader;
    for (std::size_t i = 0; i < sc.size(); ++i) metrics += metrics_row("sample" + std::to_string(i), d, out.metrics[i]);
    m.write("metrics.csv", metrics);

    // attention by distance, pooled and per layer
    analysis::DistanceTable pooled{bins, {}};
    std::map<std::size_t, analysis::DistanceTable> per_layer;
    for (const auto& tr : out.traces)
      analysis::for_each_attention(tr, spec.mask_id, [&](const analysis::AttentionRecord& r) {
        pooled.add(r);
        per_layer.try_emplace(r.layer, analysis::DistanceTable{bins, {}}).first->second.add(r);
      });
    auto table_rows = [&](const analysis::DistanceTable& t, const std::string& lead) {
      std::string s;
      for (const auto& [pair, cells] : t.cells)
        for (std::size_t b = 0; b < cells.size(); ++b)
          s += lead + std::to_string(bins.lower[b]) + "," + analysis::to_string(pair.first) + "," +
               analysis::to_string(pair.second) + "," + fmt(cells[b].mean()) + "," + std::to_string(cells[b].count) + "\n";
      return s;
    };
    m.write("attn_distance.csv", "distance_bin,src_segment,tgt_segment,mean_attention,count\n" + table_rows(pooled, ""));
    std::string by_layer = "layer,distance_bin,src_segment,tgt_segment,mean_attention,count\n";
    for (const auto& [l, t] : per_layer) by_layer += table_rows(t, std::to_string(l) + ",");
    m.write("attn_distance_by_layer.csv", by_layer);

    // attention mass per step, averaged over samples
    std::map<std::size_t, std::array<double, 4>> mass;
    for (const auto& tr : out.traces)
      for (const auto& row : analysis::attention_mass_per_step(tr, spec.mask_id))
        for (std::size_t k = 0; k < 4; ++k) mass[row.step][k] += row.mass[k] / static_cast<double>(out.traces.size());
    std::string ms = "step,tgt_class,mean_mass\n";
    for (const auto& [step, v] : mass)
      for (std::size_t k = 0; k < 4; ++k)
        ms += std::to_string(step) + "," + analysis::to_string(static_cast<analysis::TokenClass>(k)) + "," + fmt(v[k]) + "\n";
    m.write("attn_mass.csv", ms);

    // drift, masked states and the random-token baseline
    std::string drift = "step,position,c_subspace,c_raw_embed,c_raw_final\n", base = drift;
    for (std::size_t i = 0; i < out.traces.size(); ++i) {
      const auto dr = analysis::drift_trace(out.traces[i], sub, spec, w, pe, hash_combine(c.seed, i));
      for (const auto& r : dr.masked)
        drift += std::to_string(r.step) + "," + std::to_string(r.position) + "," + fmt(r.c_subspace) + "," + fmt(r.c_raw_embed) + "," + fmt(r.c_raw_final) + "\n";
      for (const auto& r : dr.baseline)
        base += std::to_string(r.step) + "," + std::to_string(r.position) + "," + fmt(r.c_subspace) + "," + fmt(r.c_raw_embed) + "," + fmt(r.c_raw_final) + "\n";
    }
    m.write("drift.csv", drift);
    m.write("drift_baseline.csv", base);

    const auto traj = analysis::pca_trajectory(spec, w, pe, sub.embedding);
    std::string pt = "layer,source,pc1,pc2,pc3\n";
    for (const auto& r : traj.rows)
      pt += std::to_string(r.layer) + "," + r.source + "," + fmt(r.pc[0]) + "," + fmt(r.pc[1]) + "," + fmt(r.pc[2]) + "\n";
    m.write("pca_traj.csv", pt);

    analysis::BandTable bands{bins, c.analysis.n_bands, std::vector<std::vector<analysis::BandCell>>(bins.size(), std::vector<analysis::BandCell>(c.analysis.n_bands))};
    for (const auto& tr : out.traces) {
      const auto t = analysis::frequency_bands(tr, spec, w, pe, bins, c.analysis.n_bands);
      for (std::size_t b = 0; b < bins.size(); ++b)
        for (std::size_t k = 0; k < c.analysis.n_bands; ++k) {
          bands.cells[b][k].sum += t.cells[b][k].sum;
          bands.cells[b][k].count += t.cells[b][k].count;
        }
    }
    std::string fb = "distance_bin,band,mean_logit_contribution\n";
    for (std::size_t b = 0; b < bins.size(); ++b)
      for (std::size_t k = 0; k < c.analysis.n_bands; ++k) {
        const auto& cell = bands.cells[b][k];
        if (cell.count == 0) continue;
        fb += std::to_string(bins.lower[b]) + "," + std::to_string(k) + "," + fmt(cell.sum / static_cast<double>(cell.count)) + "\n";
      }
    m.write("freq_bands.csv", fb);
  });
}

struct Cell {
  std::size_t steps = 0;
  double lambda = 0, beta = 0;
  prior::PriorKind prior = prior::PriorKind::vocab_mean;
  rope::GateKind gate = rope::GateKind::sigmoid;
  SegmentSet segments = SegmentSet::all();

  json coordinates() const {
    return json{{"steps", steps}, {"lambda", lambda}, {"beta", beta}, {"prior", prior}, {"gate", gate},
                {"segments", rope::segments_to_json(segments)}};
  }
};

inline std::vector<Cell> ablation_grid(const config::RunConfig& c) {
  const auto& a = c.ablate;
  auto or_base = []<typename T>(const std::vector<T>& v, T base) { return v.empty() ? std::vector<T>{base} : v; };
  const auto steps = or_base(a.steps, c.decode.steps);
  const auto lambdas = or_base(a.lambda, c.suppression.enabled ? c.suppression.spec.lambda : 0.0);
  const auto betas = or_base(a.beta, c.scaler.kind == rope::ScalerKind::monotonic ? c.scaler.beta : 0.0);
  const auto priors = or_base(a.prior, c.prior.source.kind);
  const auto gates = or_base(a.gate, c.scaler.gate);
  const auto segs = or_base(a.segments, c.scaler.segments);
  std::vector<Cell> cells;
  for (auto t : steps)
    for (auto l : lambdas)
      for (auto b : betas)
        for (auto p : priors)
          for (auto g : gates)
            for (const auto& s : segs) cells.push_back({t, l, b, p, g, s});
  return cells;
}

// Cell seeds hash the run seed with the cell coordinates, so a cell's result
// does not depend on which other cells run or in what order. Scenes are
// shared across cells (decode.scene_seed) to keep comparisons paired.
inline std::uint64_t cell_seed(std::uint64_t seed, const Cell& cell) { return hash_string(seed, cell.coordinates().dump()); }

inline void cmd_ablate(const config::Loaded& cfg, Manifest& m, std::ostream& log) {
  const auto& c = cfg.config;
  const auto ck = open_checkpoint(c, m, "ablate");
  const auto cells = ablation_grid(c);
  std::map<prior::PriorKind, prior::PriorSubspace> subs;
  m.phase("subspace", [&] {
    for (const auto& cell : cells)
      if (cell.lambda > 0 && !subs.contains(cell.prior)) {
        auto src = c.prior.source;
        src.kind = cell.prior;
        subs.emplace(cell.prior, build_prior(c, ck.spec, ck.weights, src));
      }
  });
  const auto sc = scenes(c, ck.spec.d_visual, c.decode.n_samples);
  std::vector<std::string> metrics(cells.size()), meta(cells.size());
  m.phase("decode", [&] {
    // cells run in parallel; the samples inside a cell run in order
    parallel_for(cells.size(), [&](std::size_t i) {
      const Cell& cell = cells[i];
      auto d = config::decode_config(c);
      d.steps = cell.steps;
      d.record_hidden = false;
      d.record_attention = false;
      d.seed = cell_seed(c.seed, cell);
      d.suppression.reset();
      if (cell.lambda > 0) {
        d.suppression = c.suppression.spec;
        d.suppression->lambda = cell.lambda;
      }
      d.scaler = cell.beta > 0 ? rope::RopeScalerSpec::monotonic(cell.beta, c.scaler.eta, c.scaler.tau0, cell.gate) : rope::RopeScalerSpec{};
      if (cell.beta > 0) d.scaler.segments = cell.segments;
      const prior::PriorSubspace* sub = cell.lambda > 0 ? &subs.at(cell.prior) : nullptr;
      std::string rows = kMetricsHeader;
      analysis::TextMetrics mean;
      for (std::size_t s = 0; s < sc.size(); ++s) {
        const auto tr = decode::decode(sc[s].prompt_layout(d.gen_len, ck.spec.mask_id, ck.spec.pad_id), ck.spec, ck.weights, d, sub);
        const auto tm = analysis::text_metrics(tr.tokens, d.eot_truncate, ck.spec.eot_id);
        rows += metrics_row("sample" + std::to_string(s), d, tm);
      }
      metrics[i] = std::move(rows);
      json j{{"cell", i}, {"coordinates", cell.coordinates()}, {"seed", d.seed}, {"samples", sc.size()}};
      meta[i] = j.dump(2) + "\n";
    }, worker_count());
  });
  for (std::size_t i = 0; i < cells.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "cell_%03zu", i);
    m.write(std::string(name) + "/metrics.csv", metrics[i]);
    m.write(std::string(name) + "/cell.json", meta[i]);
  }
  log << cells.size() << " cells\n";
}

struct MetricsSummary {
  std::size_t n = 0;
  double distinct1 = 0, distinct2 = 0, distinct3 = 0, repetition = 0;
};

// Means over rows of a metrics.csv; NaN entries (too-short sequences) are skipped per column.
inline MetricsSummary summarize_metrics(const std::string& csv) {
  MetricsSummary s;
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> sums{};
  std::size_t pos = csv.find('\n');
  while (pos != std::string::npos && pos + 1 < csv.size()) {
    const std::size_t end = csv.find('\n', pos + 1);
    const std::string line = csv.substr(pos + 1, end - pos - 1);
    pos = end;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t a = 0;
    for (std::size_t b; (b = line.find(',', a)) != std::string::npos; a = b + 1) f.push_back(line.substr(a, b - a));
    f.push_back(line.substr(a));
    if (f.size() != 9) throw std::runtime_error("metrics.csv: malformed row '" + line + "'");
    for (std::size_t k = 0; k < 4; ++k) {
      const double v = std::strtod(f[5 + k].c_str(), nullptr);
      if (std::isnan(v)) continue;
      sums[k] += v;
      ++counts[k];
    }
    ++s.n;
  }
  auto mean = [&](std::size_t k) { return counts[k] ? sums[k] / static_cast<double>(counts[k]) : std::numeric_limits<double>::quiet_NaN(); };
  s.distinct1 = mean(0);
  s.distinct2 = mean(1);
  s.distinct3 = mean(2);
  s.repetition = mean(3);
  return s;
}

inline void cmd_report(const config::Loaded& cfg, Manifest& m, std::ostream&) {
  const auto& c = cfg.config;
  const auto dir = require_path(c.paths.ablate, "paths.ablate", "report");
  std::vector<fs::path> cell_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && e.path().filename().string().starts_with("cell_")) cell_dirs.push_back(e.path());
  std::sort(cell_dirs.begin(), cell_dirs.end());
  if (cell_dirs.empty()) throw MissingArtifact("paths.ablate: no cell directories under '" + dir.string() + "'");

  ordered_json report;
  report["source"] = dir.string();
  report["cells"] = ordered_json::array();
  std::map<std::size_t, std::vector<MetricsSummary>> by_steps;
  for (const auto& cd : cell_dirs) {
    m.input(cd / "metrics.csv");
    const auto meta = json::parse(io::read_file(cd / "cell.json"));
    const auto s = summarize_metrics(io::read_file(cd / "metrics.csv"));
    ordered_json row;
    row["cell"] = cd.filename().string();
    row["coordinates"] = meta.at("coordinates");
    row["samples"] = s.n;
    row["distinct1"] = s.distinct1;
    row["distinct2"] = s.distinct2;
    row["distinct3"] = s.distinct3;
    row["repetition_ratio"] = s.repetition;
    report["cells"].push_back(row);
    by_steps[meta.at("coordinates").at("steps").get<std::size_t>()].push_back(s);
  }
  // distinct-n vs T, averaged over the cells sharing a step count
  ordered_json table = ordered_json::array();
  std::vector<std::pair<double, double>> trend;  // (distinct2, repetition) by ascending T
  for (const auto& [steps, v] : by_steps) {
    MetricsSummary avg;
    for (const auto& s : v) {
      avg.distinct1 += s.distinct1 / static_cast<double>(v.size());
      avg.distinct2 += s.distinct2 / static_cast<double>(v.size());
      avg.distinct3 += s.distinct3 / static_cast<double>(v.size());
      avg.repetition += s.repetition / static_cast<double>(v.size());
    }
    table.push_back({{"steps", steps}, {"cells", v.size()}, {"distinct1", avg.distinct1}, {"distinct2", avg.distinct2},
                     {"distinct3", avg.distinct3}, {"repetition_ratio", avg.repetition}});
    trend.emplace_back(avg.distinct2, avg.repetition);
  }
  report["by_steps"] = table;
  bool d2_up = trend.size() > 1, rep_down = trend.size() > 1;
  for (std::size_t i = 1; i < trend.size(); ++i) {
    d2_up = d2_up && trend[i].first > trend[i - 1].first;
    rep_down = rep_down && trend[i].second < trend[i - 1].second;
  }
  // fewer steps -> lower distinct-2 and higher repetition
  report["trend"] = {{"distinct2_strictly_increasing_in_steps", d2_up}, {"repetition_strictly_decreasing_in_steps", rep_down}};
  m.write("report.json", report.dump(2) + "\n");
}

inline void cmd_timing(const config::Loaded& cfg, Manifest& m, std::ostream& log) {
  const auto& c = cfg.config;
  const auto ck = open_checkpoint(c, m, "timing");
  const auto sub = open_subspace(c, ck, m);
  auto base = config::decode_config(c);
  base.record_hidden = false;
  base.record_attention = false;
  base.suppression.reset();
  base.scaler = {};
  auto inter = base;
  inter.suppression = c.suppression.spec;
  if (!(inter.suppression->lambda > 0)) inter.suppression->lambda = 0.1;
  inter.scaler = c.scaler.kind == rope::ScalerKind::monotonic && c.scaler.beta > 0 ? c.scaler : rope::RopeScalerSpec::monotonic(0.01, 8.0, 0.6);
  const auto sc = scenes(c, ck.spec.d_visual, std::min<std::size_t>(c.decode.n_samples, 4));

  // interleaved repeats; the per-configuration minimum over repeats damps scheduler noise
  double best_base = std::numeric_limits<double>::infinity(), best_inter = best_base;
  auto time_one = [&](const decode::DecodeConfig& d, const prior::PriorSubspace* s) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& scene : sc) decode::decode(scene.prompt_layout(d.gen_len, ck.spec.mask_id, ck.spec.pad_id), ck.spec, ck.weights, d, s);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / static_cast<double>(sc.size() * d.steps);
  };
  m.phase("timing", [&] {
    time_one(base, nullptr);  // warm-up
    for (std::size_t r = 0; r < c.timing.repeats; ++r) {
      best_base = std::min(best_base, time_one(base, nullptr));
      best_inter = std::min(best_inter, time_one(inter, &sub));
    }
  });
  const double overhead = best_inter / best_base - 1.0;
  ordered_json j;
  j["steps"] = base.steps;
  j["gen_len"] = base.gen_len;
  j["scenes"] = sc.size();
  j["repeats"] = c.timing.repeats;
  j["baseline_seconds_per_step"] = best_base;
  j["intervention_seconds_per_step"] = best_inter;
  j["relative_overhead"] = overhead;
  j["lambda"] = inter.suppression->lambda;
  j["beta"] = inter.scaler.beta;
  m.write("timing.json", j.dump(2) + "\n");
  log << "relative per-step overhead " << fmt(100.0 * overhead) << "%\n";
}

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"train", "subspace", "decode", "analyze", "ablate", "report", "timing"};
  return c;
}

// Runs one command into `out`; exceptions propagate to the caller.
inline void run(const std::string& command, const config::Loaded& cfg, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  Manifest m(out, command, cfg);
  if (command == "train") cmd_train(cfg, m, log);
  else if (command == "subspace") cmd_subspace(cfg, m, log);
  else if (command == "decode") cmd_decode(cfg, m, log);
  else if (command == "analyze") cmd_analyze(cfg, m, log);
  else if (command == "ablate") cmd_ablate(cfg, m, log);
  else if (command == "report") cmd_report(cfg, m, log);
  else if (command == "timing") cmd_timing(cfg, m, log);
  else throw ConfigError("command: unknown command '" + command + "'");
  m.finish();
}

}  // namespace mdlab::run
