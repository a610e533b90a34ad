#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "spillover/backend.hpp"
#include "spillover/geometry.hpp"
#include "spillover/reference_model.hpp"

namespace spillover {

namespace detail {

inline void validate_projection(const ProjectionIntervention& p, std::size_t n_layers, std::size_t dim) {
  if (!std::isfinite(p.alpha)) throw Error("projection alpha must be finite");
  if (p.vectors.empty()) throw Error("projection needs at least one vector");
  if (p.layers.empty()) throw Error("projection needs at least one layer");
  for (const auto& v : p.vectors) {
    if (v.size() != dim) throw Error("projection vector has the wrong dimension");
    if (std::fabs(norm2(v) - 1.0) > kUnitNormTolerance) throw Error("projection vector is not unit length");
  }
  for (auto l : p.layers)
    if (l >= n_layers) throw Error("projection layer " + std::to_string(l) + " out of range");
}

}  // namespace detail

// Rewrites every token row of a block output in place.
inline void apply_projection(Tensor& hidden, const ProjectionIntervention& p) {
  for (std::size_t t = 0; t < hidden.rows(); ++t) {
    double* h = hidden.row(t);
    for (const auto& v : p.vectors) {
      double c = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) c += h[i] * v[i];
      c *= p.alpha;
      for (std::size_t i = 0; i < v.size(); ++i) h[i] -= c * v[i];
    }
  }
}

// Tokens for BOS + prefix + context + " " + completion and the index of the
// first completion token.
struct ScoringSequence {
  std::vector<int> tokens;
  std::size_t completion_begin = 0;
};

inline ScoringSequence scoring_sequence(const ScoreRequest& req) {
  if (req.completion.empty()) throw Error("cannot score an empty completion");
  ScoringSequence s;
  s.tokens.push_back(reference::kBos);
  auto append = [&](std::string_view text) {
    for (unsigned char c : text) s.tokens.push_back(c);
  };
  append(req.masked_prefix);
  append(req.context);
  if (!req.context.empty()) append(" ");
  s.completion_begin = s.tokens.size();
  append(req.completion);
  return s;
}

class ReferenceBackend : public Backend {
 public:
  explicit ReferenceBackend(reference::ModelConfig cfg, std::string name = "reference")
      : model_(cfg), name_(std::move(name)) {}
  ReferenceBackend(reference::ReferenceModel model, std::string name = "reference")
      : model_(std::move(model)), name_(std::move(name)) {}

  BackendInfo info() override {
    BackendInfo i;
    i.name = name_;
    i.n_layers = model_.config().n_layers;
    i.hidden_dim = model_.config().hidden_dim;
    i.capabilities = {Capability::hidden_states, Capability::intervene, Capability::edit, Capability::prompt_mask};
    i.metadata = {{"hidden_state_site", "block_output_post_residual"},
                  {"tokenizer", "bytes+bos"},
                  {"max_seq_len", std::to_string(model_.config().max_seq_len)}};
    return i;
  }

  HiddenStates hidden_states(std::string_view text) override {
    if (text.empty()) throw Error("hidden_states of empty text");
    std::vector<int> tokens{reference::kBos};
    for (int t : reference::encode_bytes(text)) tokens.push_back(t);
    // Only the final row of logits is needed; the hidden states are the point.
    const auto out = model_.forward(tokens, {}, tokens.size() - 1);
    const std::size_t L = out.hidden.size(), d = model_.config().hidden_dim, n = tokens.size() - 1;
    HiddenStates hs(L, n, d);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t t = 0; t < n; ++t) {
        const double* src = out.hidden[l].row(t + 1);
        std::copy(src, src + d, hs.at(l, t).begin());
      }
    return hs;
  }

  ScoreResult score(const ScoreRequest& req) override {
    const auto seq = scoring_sequence(req);
    reference::BlockHook hook;
    if (req.projection) {
      detail::validate_projection(*req.projection, model_.config().n_layers, model_.config().hidden_dim);
      hook = [&p = *req.projection](std::size_t layer, Tensor& hidden) {
        if (std::find(p.layers.begin(), p.layers.end(), layer) != p.layers.end()) apply_projection(hidden, p);
      };
    }
    const std::size_t from = seq.completion_begin - 1;
    const auto out = model_.forward(seq.tokens, hook, from);
    ScoreResult r;
    for (std::size_t t = seq.completion_begin; t < seq.tokens.size(); ++t) {
      const auto ls = reference::log_softmax({out.logits.row(t - 1 - from), reference::kVocabSize});
      r.total_nll -= ls[static_cast<std::size_t>(seq.tokens[t])];
      ++r.token_count;
    }
    return r;
  }

  EditHandle apply_edit(const EditDelta& delta) override {
    if (delta.layer_index >= model_.config().n_layers)
      throw Error("edit layer " + std::to_string(delta.layer_index) + " out of range");
    auto targets = model_.params().blocks[delta.layer_index].mlp();
    if (delta.tensors.size() != targets.size()) throw Error("edit must carry exactly the four MLP tensors");
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto& t = delta.tensors[k];
      if (!t.name.empty() && t.name != reference::kMlpTensorNames[k])
        throw Error("edit tensor " + std::to_string(k) + " is '" + t.name + "', expected " +
                    std::string(reference::kMlpTensorNames[k]));
      if (t.shape != targets[k]->shape || t.values.size() != targets[k]->size())
        throw Error("edit tensor " + std::string(reference::kMlpTensorNames[k]) + " has shape " +
                    shape_string(t.shape) + ", expected " + shape_string(targets[k]->shape));
    }
    Saved saved{next_handle_++, delta.layer_index, {}};
    for (std::size_t k = 0; k < targets.size(); ++k) {
      saved.originals[k] = *targets[k];
      for (std::size_t i = 0; i < targets[k]->size(); ++i) targets[k]->data[i] += delta.tensors[k].values[i];
    }
    edits_.push_back(std::move(saved));
    return edits_.back().handle;
  }

  // Edits revert in LIFO order; the originals are restored verbatim.
  void revert(EditHandle handle) override {
    if (edits_.empty() || edits_.back().handle != handle)
      throw Error("revert of stale or out-of-order edit handle " + std::to_string(handle));
    auto targets = model_.params().blocks[edits_.back().layer].mlp();
    for (std::size_t k = 0; k < targets.size(); ++k) *targets[k] = std::move(edits_.back().originals[k]);
    edits_.pop_back();
  }

  reference::ReferenceModel* gradient_model() override { return &model_; }

  reference::ReferenceModel& model() { return model_; }

 private:
  struct Saved {
    EditHandle handle;
    std::size_t layer;
    std::array<Tensor, 4> originals;
  };

  reference::ReferenceModel model_;
  std::string name_;
  std::vector<Saved> edits_;
  EditHandle next_handle_ = 1;
};

}  // namespace spillover
