#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spillover/common.hpp"
#include "spillover/linalg.hpp"
#include "spillover/tensor.hpp"

namespace spillover {

enum class Capability { hidden_states, intervene, edit, prompt_mask };

inline constexpr std::string_view to_string(Capability c) {
  switch (c) {
    case Capability::hidden_states: return "hidden_states";
    case Capability::intervene: return "intervene";
    case Capability::edit: return "edit";
    case Capability::prompt_mask: return "prompt_mask";
  }
  return "unknown";
}

inline std::optional<Capability> try_parse_capability(std::string_view s) {
  for (auto c : {Capability::hidden_states, Capability::intervene, Capability::edit, Capability::prompt_mask})
    if (s == to_string(c)) return c;
  return std::nullopt;
}

// Raised when a backend is asked for something it does not advertise.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

struct BackendInfo {
  std::string name;
  std::size_t n_layers = 0;
  std::size_t hidden_dim = 0;
  std::set<Capability> capabilities;
  std::map<std::string, std::string> metadata;

  bool has(Capability c) const { return capabilities.contains(c); }
  bool operator==(const BackendInfo&) const = default;
};

// Block-output activations for every layer and token position.
class HiddenStates {
 public:
  HiddenStates() = default;
  HiddenStates(std::size_t n_layers, std::size_t n_tokens, std::size_t dim)
      : n_layers_(n_layers), n_tokens_(n_tokens), dim_(dim), data_(n_layers * n_tokens * dim, 0.0) {}

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_tokens() const { return n_tokens_; }
  std::size_t dim() const { return dim_; }

  std::span<double> at(std::size_t layer, std::size_t token) {
    return {data_.data() + (layer * n_tokens_ + token) * dim_, dim_};
  }
  std::span<const double> at(std::size_t layer, std::size_t token) const {
    return {data_.data() + (layer * n_tokens_ + token) * dim_, dim_};
  }

  // Mean over token positions of one layer.
  Vector mean_pooled(std::size_t layer) const {
    if (n_tokens_ == 0) throw Error("mean-pooling zero token positions");
    Vector out(dim_, 0.0);
    for (std::size_t t = 0; t < n_tokens_; ++t) {
      auto v = at(layer, t);
      for (std::size_t i = 0; i < dim_; ++i) out[i] += v[i];
    }
    for (auto& x : out) x /= static_cast<double>(n_tokens_);
    return out;
  }

  bool operator==(const HiddenStates&) const = default;

 private:
  std::size_t n_layers_ = 0, n_tokens_ = 0, dim_ = 0;
  std::vector<double> data_;
};

// h <- h - alpha (h.v) v at each listed block output, for each vector in turn.
struct ProjectionIntervention {
  std::vector<Vector> vectors;
  std::vector<std::size_t> layers;
  double alpha = 1.0;

  bool operator==(const ProjectionIntervention&) const = default;
};

struct ScoreRequest {
  std::string context;
  std::string completion;
  std::string masked_prefix;  // conditions the completion, contributes no loss
  std::optional<ProjectionIntervention> projection;
};

struct ScoreResult {
  double total_nll = 0.0;
  std::size_t token_count = 0;

  double mean_nll() const { return total_nll / static_cast<double>(token_count); }
  bool operator==(const ScoreResult&) const = default;
};

struct EditTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;

  bool operator==(const EditTensor&) const = default;
};

// Additive update to one block's MLP parameters.
struct EditDelta {
  std::size_t layer_index = 0;
  std::vector<EditTensor> tensors;

  bool operator==(const EditDelta&) const = default;
};

using EditHandle = std::uint64_t;

namespace reference {
class ReferenceModel;
}

// One model behind a uniform contract. A handle serves one call at a time.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual BackendInfo info() = 0;
  virtual HiddenStates hidden_states(std::string_view text) = 0;
  virtual ScoreResult score(const ScoreRequest& request) = 0;
  virtual EditHandle apply_edit(const EditDelta& delta) = 0;
  virtual void revert(EditHandle handle) = 0;

  // Non-null only for backends whose parameters can be differentiated
  // in-process.
  virtual reference::ReferenceModel* gradient_model() { return nullptr; }
};

}  // namespace spillover
