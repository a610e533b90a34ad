#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "spillover/config.hpp"
#include "spillover/dataset.hpp"
#include "spillover/pipeline.hpp"
#include "spillover/reference_backend.hpp"

namespace testing_support {

using namespace spillover;

inline std::filesystem::path data_dir() { return SPILLOVER_DATA_DIR; }
inline std::filesystem::path data_file(const std::string& name) { return data_dir() / name; }
inline std::string audit_binary() { return SPILLOVER_AUDIT_BIN; }

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("spillover-test-" + tag + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Collects warnings for the lifetime of the object.
class WarningCapture {
 public:
  WarningCapture() {
    previous_ = set_warning_sink([this](const std::string& m) {
      std::lock_guard lock(mu_);
      messages_.push_back(m);
    });
  }
  ~WarningCapture() { set_warning_sink(std::move(previous_)); }
  std::vector<std::string> messages() const {
    std::lock_guard lock(mu_);
    return messages_;
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::string> messages_;
  WarningSink previous_;
};

// Forwards to a reference backend but advertises only some capabilities.
class RestrictedBackend : public Backend {
 public:
  RestrictedBackend(std::unique_ptr<Backend> inner, std::set<Capability> caps)
      : inner_(std::move(inner)), caps_(std::move(caps)) {}

  BackendInfo info() override {
    auto i = inner_->info();
    i.capabilities = caps_;
    i.name = "restricted";
    return i;
  }
  HiddenStates hidden_states(std::string_view text) override { return inner_->hidden_states(text); }
  ScoreResult score(const ScoreRequest& r) override { return inner_->score(r); }
  EditHandle apply_edit(const EditDelta& d) override {
    if (!caps_.contains(Capability::edit)) throw CapabilityError("restricted backend cannot edit");
    return inner_->apply_edit(d);
  }
  void revert(EditHandle h) override { inner_->revert(h); }

 private:
  std::unique_ptr<Backend> inner_;
  std::set<Capability> caps_;
};

inline reference::ModelConfig small_config(std::uint64_t seed = 0) {
  reference::ModelConfig c;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.seed = seed;
  return c;
}

inline reference::ModelConfig fixture_config() {
  auto c = reference::ModelConfig{};
  c.max_seq_len = 512;
  return c;
}

inline std::string random_text(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyz      .,";
  std::uniform_int_distribution<std::size_t> len(min_len, max_len), pick(0, alphabet.size() - 1);
  std::string s;
  const auto n = len(rng);
  for (std::size_t i = 0; i < n; ++i) s += alphabet[pick(rng)];
  if (s.front() == ' ') s.front() = 'x';
  return s;
}

inline TripletExample random_example(std::mt19937_64& rng, const std::string& id,
                                     BiasDimension dim = BiasDimension::gender) {
  return {id, dim, random_text(rng, 8, 16), random_text(rng, 6, 12), random_text(rng, 6, 12), random_text(rng, 6, 12)};
}

inline std::vector<TripletExample> fixture_examples() { return load_dataset(data_file("fixture_dev.json")); }

// Trained on the planted corpus once per process.
inline const reference::ReferenceModel& planted_model() {
  static const reference::ReferenceModel model = [] {
    const auto path = data_file("planted_model.json");
    const auto spec = reference_spec_from_json(nlohmann::json::parse(detail::read_file(path)), path.parent_path());
    reference::ReferenceModel m(spec.model);
    reference::train_next_byte(m, read_lines(spec.corpus), *spec.train);
    return m;
  }();
  return model;
}

// Synthetic record with given SS/ICAT values; LMS fixed at 100 unless set.
inline AuditRecord synthetic_record(const std::string& backend, Technique t, BiasDimension target,
                                    BiasDimension eval, double base_ss, double new_ss, double d_icat = 0.0,
                                    double base_lms = 100.0, double new_lms = 100.0) {
  ExperimentSpec spec{backend, t, target, 0, "synthetic"};
  DimensionScores b{eval, 10, base_lms, base_ss, 50.0};
  DimensionScores i{eval, 10, new_lms, new_ss, 50.0 + d_icat};
  return make_record(spec, b, i);
}

}  // namespace testing_support
