#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "spillover/config.hpp"
#include "spillover/dataset.hpp"
#include "spillover/geometry.hpp"
#include "spillover/interventions.hpp"
#include "spillover/metrics.hpp"

#ifndef SPILLOVER_VERSION
#define SPILLOVER_VERSION "0.0.0"
#endif

namespace spillover {

inline constexpr int kStoreVersion = 1;
inline constexpr double kRevertTolerance = 1e-9;

// --- dataset with provenance ------------------------------------------------------

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

struct Dataset {
  std::string path;
  std::string sha256;
  std::vector<TripletExample> examples;
};

inline Dataset open_dataset(const std::filesystem::path& path) {
  Dataset d;
  d.path = path.string();
  d.sha256 = sha256_hex(detail::read_file(path));
  d.examples = load_dataset(path);
  return d;
}

// --- records ----------------------------------------------------------------------

struct ExperimentSpec {
  std::string backend_id;
  Technique technique = Technique::logit_steering;
  BiasDimension target = BiasDimension::gender;
  std::uint64_t seed = 0;
  std::string dataset_path;

  bool operator==(const ExperimentSpec&) const = default;
};

using ExperimentKey = std::tuple<std::string, std::size_t, std::size_t>;
using RecordKey = std::tuple<std::string, std::size_t, std::size_t, std::size_t>;

inline ExperimentKey key_of(const ExperimentSpec& s) { return {s.backend_id, index_of(s.technique), index_of(s.target)}; }

struct ScoreDeltas {
  double d_lms = 0.0;
  double d_ss = 0.0;
  double d_icat = 0.0;
  bool operator==(const ScoreDeltas&) const = default;
};

struct AuditRecord {
  ExperimentSpec spec;
  BiasDimension eval_dimension = BiasDimension::gender;
  DimensionScores baseline;
  DimensionScores intervened;
  ScoreDeltas deltas;

  RecordKey key() const {
    return {spec.backend_id, index_of(spec.technique), index_of(spec.target), index_of(eval_dimension)};
  }
  bool operator==(const AuditRecord&) const = default;
};

using DimensionTable = PerDimension<DimensionScores>;

inline AuditRecord make_record(const ExperimentSpec& spec, const DimensionScores& baseline,
                               const DimensionScores& intervened) {
  if (baseline.dimension != intervened.dimension) throw Error("baseline/intervened dimension mismatch");
  return {spec, baseline.dimension, baseline, intervened,
          {intervened.lms - baseline.lms, intervened.ss - baseline.ss, intervened.icat - baseline.icat}};
}

inline std::vector<AuditRecord> make_records(const ExperimentSpec& spec, const DimensionTable& baseline,
                                             const DimensionTable& intervened) {
  std::vector<AuditRecord> out;
  for (auto d : kAllDimensions) out.push_back(make_record(spec, baseline[d], intervened[d]));
  return out;
}

enum class ExperimentState { ok, skipped, failed };

inline std::string_view to_string(ExperimentState s) {
  switch (s) {
    case ExperimentState::ok: return "ok";
    case ExperimentState::skipped: return "skipped";
    case ExperimentState::failed: return "failed";
  }
  return "unknown";
}

inline ExperimentState parse_state(std::string_view s) {
  for (auto st : {ExperimentState::ok, ExperimentState::skipped, ExperimentState::failed})
    if (s == to_string(st)) return st;
  throw Error("unknown experiment status '" + std::string(s) + "'");
}

struct ExperimentStatus {
  ExperimentSpec spec;
  ExperimentState state = ExperimentState::ok;
  std::string message;
  bool operator==(const ExperimentStatus&) const = default;
};

struct StoreHeader {
  int version = kStoreVersion;
  std::string dataset_sha256;
  std::string created;
  std::string tool = std::string("spillover-audit ") + SPILLOVER_VERSION;
  bool operator==(const StoreHeader&) const = default;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class ResultStore {
 public:
  StoreHeader header;
  std::map<std::string, DimensionTable> baselines;

  // Returns true when an existing record was replaced.
  bool upsert(AuditRecord r) {
    auto key = r.key();
    auto [it, inserted] = records_.insert_or_assign(std::move(key), std::move(r));
    if (!inserted) {
      ++replacements_;
      warn("replaced existing record for " + describe(it->second));
    }
    return !inserted;
  }

  void set_status(ExperimentStatus s) { statuses_.insert_or_assign(key_of(s.spec), std::move(s)); }

  std::vector<AuditRecord> records() const {
    std::vector<AuditRecord> out;
    out.reserve(records_.size());
    for (const auto& [k, r] : records_) out.push_back(r);
    return out;
  }

  std::vector<ExperimentStatus> statuses() const {
    std::vector<ExperimentStatus> out;
    for (const auto& [k, s] : statuses_) out.push_back(s);
    return out;
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t replacements() const { return replacements_; }

  std::size_t count(ExperimentState s) const {
    return static_cast<std::size_t>(
        std::count_if(statuses_.begin(), statuses_.end(), [&](const auto& kv) { return kv.second.state == s; }));
  }

  bool operator==(const ResultStore& o) const {
    return header == o.header && baselines == o.baselines && records_ == o.records_ && statuses_ == o.statuses_;
  }

  static std::string describe(const AuditRecord& r) {
    return r.spec.backend_id + "/" + std::string(to_string(r.spec.technique)) + "/" +
           std::string(to_string(r.spec.target)) + "->" + std::string(to_string(r.eval_dimension));
  }

 private:
  std::map<RecordKey, AuditRecord> records_;
  std::map<ExperimentKey, ExperimentStatus> statuses_;
  std::size_t replacements_ = 0;
};

// --- serialization ----------------------------------------------------------------

inline nlohmann::json to_json(const DimensionScores& s) {
  return {{"n", s.n}, {"lms", s.lms}, {"ss", s.ss}, {"icat", s.icat}};
}

inline DimensionScores dimension_scores_from_json(const nlohmann::json& j, BiasDimension d) {
  DimensionScores s;
  s.dimension = d;
  s.n = j.at("n").get<std::size_t>();
  s.lms = j.at("lms").get<double>();
  s.ss = j.at("ss").get<double>();
  s.icat = j.at("icat").get<double>();
  return s;
}

inline nlohmann::json to_json(const ExperimentSpec& s) {
  return {{"backend", s.backend_id},
          {"technique", to_string(s.technique)},
          {"target", to_string(s.target)},
          {"seed", s.seed},
          {"dataset", s.dataset_path}};
}

inline ExperimentSpec experiment_spec_from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  s.backend_id = j.at("backend").get<std::string>();
  s.technique = parse_technique(j.at("technique").get<std::string>());
  s.target = parse_dimension(j.at("target").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.dataset_path = j.value("dataset", std::string{});
  return s;
}

inline nlohmann::json to_json(const AuditRecord& r) {
  return {{"spec", to_json(r.spec)},
          {"eval_dimension", to_string(r.eval_dimension)},
          {"baseline", to_json(r.baseline)},
          {"intervened", to_json(r.intervened)},
          {"deltas", {{"d_lms", r.deltas.d_lms}, {"d_ss", r.deltas.d_ss}, {"d_icat", r.deltas.d_icat}}}};
}

inline AuditRecord audit_record_from_json(const nlohmann::json& j) {
  AuditRecord r;
  r.spec = experiment_spec_from_json(j.at("spec"));
  r.eval_dimension = parse_dimension(j.at("eval_dimension").get<std::string>());
  r.baseline = dimension_scores_from_json(j.at("baseline"), r.eval_dimension);
  r.intervened = dimension_scores_from_json(j.at("intervened"), r.eval_dimension);
  const auto& d = j.at("deltas");
  r.deltas = {d.at("d_lms").get<double>(), d.at("d_ss").get<double>(), d.at("d_icat").get<double>()};
  const auto expect = make_record(r.spec, r.baseline, r.intervened).deltas;
  if (std::abs(expect.d_lms - r.deltas.d_lms) > 1e-9 || std::abs(expect.d_ss - r.deltas.d_ss) > 1e-9 ||
      std::abs(expect.d_icat - r.deltas.d_icat) > 1e-9)
    throw Error("deltas do not equal intervened - baseline");
  return r;
}

inline nlohmann::json table_to_json(const DimensionTable& t) {
  nlohmann::json j = nlohmann::json::object();
  for (auto d : kAllDimensions) j[std::string(to_string(d))] = to_json(t[d]);
  return j;
}

inline DimensionTable table_from_json(const nlohmann::json& j) {
  DimensionTable t;
  for (auto d : kAllDimensions) t[d] = dimension_scores_from_json(j.at(std::string(to_string(d))), d);
  return t;
}

inline nlohmann::json header_to_json(const ResultStore& store) {
  nlohmann::json baselines = nlohmann::json::object();
  for (const auto& [id, t] : store.baselines) baselines[id] = table_to_json(t);
  nlohmann::json experiments = nlohmann::json::array();
  for (const auto& s : store.statuses())
    experiments.push_back({{"spec", to_json(s.spec)}, {"status", to_string(s.state)}, {"message", s.message}});
  return {{"version", store.header.version},
          {"dataset_sha256", store.header.dataset_sha256},
          {"created", store.header.created},
          {"tool", store.header.tool},
          {"baselines", baselines},
          {"experiments", experiments}};
}

inline void store_write(const ResultStore& store, std::ostream& out) {
  out << header_to_json(store).dump() << '\n';
  for (const auto& r : store.records()) out << to_json(r).dump() << '\n';
}

// Writes to a sibling temporary and renames, so a crash never leaves a
// truncated store behind.
inline void store_write(const ResultStore& store, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write result store '" + tmp.string() + "'");
    store_write(store, out);
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline ResultStore store_parse(const std::string& text, const std::string& origin = "<store>") {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) { throw Error(origin + ":" + std::to_string(line_no) + ": " + msg); };

  ResultStore store;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank(line)) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        if (!j.is_object() || !j.contains("version")) fail("first line must be the store header");
        const int version = j.at("version").get<int>();
        if (version != kStoreVersion)
          fail("store version " + std::to_string(version) + " is not supported (expected " +
               std::to_string(kStoreVersion) + ")");
        store.header.version = version;
        store.header.dataset_sha256 = j.value("dataset_sha256", std::string{});
        store.header.created = j.value("created", std::string{});
        store.header.tool = j.value("tool", std::string{});
        if (j.contains("baselines"))
          for (const auto& [id, t] : j["baselines"].items()) store.baselines[id] = table_from_json(t);
        if (j.contains("experiments"))
          for (const auto& e : j["experiments"])
            store.set_status({experiment_spec_from_json(e.at("spec")), parse_state(e.at("status").get<std::string>()),
                              e.value("message", std::string{})});
        have_header = true;
        continue;
      }
      store.upsert(audit_record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("invalid record: ") + e.what());
    } catch (const Error& e) {
      const std::string msg = e.what();
      if (msg.rfind(origin + ":", 0) == 0) throw;
      fail(msg);
    }
  }
  if (!have_header) throw Error(origin + ": empty result store (no header)");
  return store;
}

inline ResultStore store_read(const std::filesystem::path& path) {
  return store_parse(detail::read_file(path), path.string());
}

// --- stage 1 and 2 ------------------------------------------------------------------

inline DimensionTable evaluate_all(Backend& backend, const std::vector<TripletExample>& examples,
                                   const InterventionSpec& spec = NoIntervention{}) {
  PerDimension<std::vector<CompletionScores>> scores;
  {
    ActiveIntervention active(backend, spec);
    for (const auto& ex : examples) scores[ex.dimension].push_back(active.score(ex));
    active.release();
  }
  DimensionTable out;
  for (auto d : kAllDimensions) {
    if (scores[d].empty()) throw Error("dataset has no examples for dimension " + std::string(to_string(d)));
    out[d] = evaluate_dimension(scores[d], d);
  }
  return out;
}

inline void require_all_dimensions(const std::vector<TripletExample>& examples) {
  const auto counts = counts_by_dimension(examples);
  for (auto d : kAllDimensions)
    if (counts[d] == 0) throw Error("dataset has no examples for dimension " + std::string(to_string(d)));
}

inline DimensionTable run_baseline(Backend& backend, const std::vector<TripletExample>& examples) {
  require_all_dimensions(examples);
  return evaluate_all(backend, examples);
}

inline std::vector<ContrastivePair> pairs_for(const std::vector<ContrastivePair>& pairs, BiasDimension d) {
  std::vector<ContrastivePair> out;
  for (const auto& p : pairs)
    if (p.dimension == d) out.push_back(p);
  return out;
}

// Builds the intervention for `target`. Throws CapabilityError when the
// backend lacks what the technique needs.
inline InterventionSpec build_intervention(Backend& backend, const std::vector<TripletExample>& examples,
                                           Technique technique, BiasDimension target, const AuditConfig& cfg,
                                           std::uint64_t seed) {
  const auto info = backend.info();
  auto need = [&](Capability c) {
    if (!info.has(c))
      throw CapabilityError(info.name + " lacks capability '" + std::string(to_string(c)) + "' required by " +
                            std::string(to_string(technique)));
  };
  switch (technique) {
    case Technique::logit_steering:
    case Technique::activation_patching: {
      need(Capability::intervene);
      need(Capability::hidden_states);
      const auto dir = compute_bias_direction(target, cfg.pairs, backend);
      if (technique == Technique::logit_steering) return build_logit_steering(dir, info, cfg.alpha);
      return build_activation_patching(dir, info, cfg.alpha);
    }
    case Technique::prompt_debiasing:
      need(Capability::prompt_mask);
      return build_prompt_debias(target, cfg.prompts);
    case Technique::biasedit: {
      need(Capability::edit);
      if (!backend.gradient_model())
        throw CapabilityError(info.name + " exposes no gradients; BiasEdit needs an in-process model");
      const auto split = split_for_editing(examples_for(examples, target), seed);
      auto be = cfg.biasedit;
      be.seed = seed;
      return WeightEdit{train_biasedit(backend, split, be).delta};
    }
  }
  throw Error("unknown technique");
}

inline DimensionTable run_intervention(Backend& backend, const std::vector<TripletExample>& examples,
                                       Technique technique, BiasDimension target, const AuditConfig& cfg,
                                       std::uint64_t seed) {
  require_all_dimensions(examples);
  const auto spec = build_intervention(backend, examples, technique, target, cfg, seed);
  return evaluate_all(backend, examples, spec);
}

// Runs one experiment against a cached baseline and returns its status;
// records go to `sink` only on success.
inline ExperimentStatus run_experiment(Backend& backend, const Dataset& data, const ExperimentSpec& spec,
                                       const DimensionTable& baseline, const AuditConfig& cfg,
                                       std::vector<AuditRecord>& sink) {
  try {
    const auto intervened = run_intervention(backend, data.examples, spec.technique, spec.target, cfg, spec.seed);
    if (spec.technique == Technique::biasedit) {
      const auto again = evaluate_all(backend, data.examples);
      for (auto d : kAllDimensions) {
        if (std::abs(again[d].lms - baseline[d].lms) > kRevertTolerance ||
            std::abs(again[d].ss - baseline[d].ss) > kRevertTolerance ||
            std::abs(again[d].icat - baseline[d].icat) > kRevertTolerance)
          return {spec, ExperimentState::failed, "weight edit revert did not restore the baseline"};
      }
    }
    sink = make_records(spec, baseline, intervened);
    return {spec, ExperimentState::ok, ""};
  } catch (const CapabilityError& e) {
    return {spec, ExperimentState::skipped, e.what()};
  } catch (const std::exception& e) {
    return {spec, ExperimentState::failed, e.what()};
  }
}

// --- grid -------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t top, const std::string& backend_id, Technique t, BiasDimension d) {
  const std::string key = backend_id + '\x1f' + std::string(to_string(t)) + '\x1f' + std::string(to_string(d));
  return splitmix64(fnv1a64(key) ^ splitmix64(top));
}

struct BackendSource {
  std::string id;
  BackendFactory factory;
};

// Models file: one model spec per line, optionally "id=spec"; '#' starts a
// comment. Without an explicit id the spec string itself is the id.
// Relative ref: paths resolve against `base_dir`.
inline std::vector<BackendSource> parse_models_file(const std::string& text, const std::filesystem::path& base_dir = {}) {
  std::vector<BackendSource> out;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos && line.find_first_not_of(" \t") == hash) continue;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    line = line.substr(b, line.find_last_not_of(" \t\r") - b + 1);
    std::string id = line, spec = line;
    if (const auto eq = line.find('='); eq != std::string::npos && line.compare(0, 4, "ref:") != 0 &&
                                        line.compare(0, 7, "bridge:") != 0) {
      id = line.substr(0, eq);
      spec = line.substr(eq + 1);
    }
    try {
      out.push_back({id, parse_model_spec(spec, base_dir)});
    } catch (const std::exception& e) {
      throw Error("models file line " + std::to_string(line_no) + ": " + e.what());
    }
    for (std::size_t i = 0; i + 1 < out.size(); ++i)
      if (out[i].id == id) throw Error("models file line " + std::to_string(line_no) + ": duplicate model id " + id);
  }
  if (out.empty()) throw Error("models file lists no models");
  return out;
}

struct GridOptions {
  std::size_t jobs = 1;
  std::function<void(const std::string&)> progress;
};

namespace detail {

// One backend handle per (worker, source); handles are never shared
// between threads.
class HandlePool {
 public:
  Backend& get(const BackendSource& src) {
    auto& slot = handles_[src.id];
    if (!slot) slot = src.factory();
    return *slot;
  }

 private:
  std::map<std::string, std::unique_ptr<Backend>> handles_;
};

inline void parallel_for(std::vector<HandlePool>& pools, std::size_t n, const std::function<void(HandlePool&, std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  auto work = [&](HandlePool& pool) {
    for (std::size_t i = next++; i < n; i = next++) fn(pool, i);
  };
  if (pools.size() == 1) {
    work(pools[0]);
    return;
  }
  std::vector<std::thread> threads;
  for (auto& p : pools) threads.emplace_back(work, std::ref(p));
  for (auto& t : threads) t.join();
}

}  // namespace detail

inline ResultStore run_grid(const std::vector<BackendSource>& backends, const Dataset& data, const AuditConfig& cfg,
                            const GridOptions& opts = {}) {
  if (backends.empty()) throw Error("grid needs at least one backend");
  if (cfg.techniques.empty()) throw Error("grid needs at least one technique");
  if (cfg.targets.empty()) throw Error("grid needs at least one target dimension");
  require_all_dimensions(data.examples);

  ResultStore store;
  store.header.dataset_sha256 = data.sha256;
  store.header.created = utc_timestamp();
  std::mutex writer;
  auto report = [&](const std::string& msg) {
    if (opts.progress) opts.progress(msg);
  };

  std::vector<detail::HandlePool> pools(std::max<std::size_t>(1, opts.jobs));

  // Stage 1, once per backend.
  std::map<std::string, std::string> baseline_error;
  detail::parallel_for(pools, backends.size(), [&](detail::HandlePool& pool, std::size_t i) {
    const auto& src = backends[i];
    try {
      auto table = run_baseline(pool.get(src), data.examples);
      std::lock_guard lock(writer);
      store.baselines[src.id] = table;
      report("baseline " + src.id + " done");
    } catch (const std::exception& e) {
      std::lock_guard lock(writer);
      baseline_error[src.id] = e.what();
      report("baseline " + src.id + " failed: " + e.what());
    }
  });

  std::vector<ExperimentSpec> specs;
  for (const auto& src : backends)
    for (auto t : cfg.techniques)
      for (auto d : cfg.targets) specs.push_back({src.id, t, d, derive_seed(cfg.seed, src.id, t, d), data.path});

  std::map<std::string, const BackendSource*> by_id;
  for (const auto& s : backends) by_id[s.id] = &s;

  detail::parallel_for(pools, specs.size(), [&](detail::HandlePool& pool, std::size_t i) {
    const auto& spec = specs[i];
    std::vector<AuditRecord> records;
    ExperimentStatus status;
    if (auto it = baseline_error.find(spec.backend_id); it != baseline_error.end()) {
      status = {spec, ExperimentState::failed, "baseline failed: " + it->second};
    } else {
      DimensionTable baseline;
      {
        std::lock_guard lock(writer);
        baseline = store.baselines.at(spec.backend_id);
      }
      try {
        status = run_experiment(pool.get(*by_id.at(spec.backend_id)), data, spec, baseline, cfg, records);
      } catch (const std::exception& e) {
        status = {spec, ExperimentState::failed, e.what()};
      }
    }
    std::lock_guard lock(writer);
    for (auto& r : records) store.upsert(std::move(r));
    report(spec.backend_id + " " + std::string(to_string(spec.technique)) + " " + std::string(to_string(spec.target)) +
           ": " + std::string(to_string(status.state)) + (status.message.empty() ? "" : " (" + status.message + ")"));
    store.set_status(std::move(status));
  });
  return store;
}

}  // namespace spillover
