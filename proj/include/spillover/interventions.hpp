#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "spillover/backend.hpp"
#include "spillover/dataset.hpp"
#include "spillover/geometry.hpp"
#include "spillover/metrics.hpp"
#include "spillover/reference_backend.hpp"
#include "spillover/reference_model.hpp"

namespace spillover {

struct NoIntervention {
  bool operator==(const NoIntervention&) const = default;
};

// Projection removal at one block (the penultimate one by construction).
struct LogitSteer {
  BiasDirection direction;
  std::size_t layer = 0;
  double alpha = 1.0;
  bool operator==(const LogitSteer&) const = default;
};

// The same removal applied at several blocks at once.
struct ActivationPatch {
  BiasDirection direction;
  std::vector<std::size_t> layers;
  double alpha = 1.0;
  bool operator==(const ActivationPatch&) const = default;
};

// Instruction prepended to the context and masked out of the loss.
struct PromptDebias {
  std::string prompt;
  bool operator==(const PromptDebias&) const = default;
};

struct WeightEdit {
  EditDelta delta;
  bool operator==(const WeightEdit&) const = default;
};

using InterventionSpec = std::variant<NoIntervention, LogitSteer, ActivationPatch, PromptDebias, WeightEdit>;

using PromptTemplates = PerDimension<std::string>;

inline constexpr double kDefaultAlpha = 1.0;

inline LogitSteer build_logit_steering(const BiasDirection& direction, const BackendInfo& info,
                                       double alpha = kDefaultAlpha) {
  if (info.n_layers < 2) throw Error("logit steering needs a model with at least 2 layers");
  if (!std::isfinite(alpha)) throw Error("alpha must be finite");
  if (direction.v.size() != info.hidden_dim) throw Error("bias direction does not match the model width");
  return {direction, info.n_layers - 2, alpha};
}

// Patches the last min(5, n_layers) blocks.
inline ActivationPatch build_activation_patching(const BiasDirection& direction, const BackendInfo& info,
                                                 double alpha = kDefaultAlpha) {
  if (info.n_layers == 0) throw Error("activation patching on an empty model");
  if (!std::isfinite(alpha)) throw Error("alpha must be finite");
  if (direction.v.size() != info.hidden_dim) throw Error("bias direction does not match the model width");
  ActivationPatch p{direction, {}, alpha};
  const std::size_t n = std::min<std::size_t>(5, info.n_layers);
  for (std::size_t l = info.n_layers - n; l < info.n_layers; ++l) p.layers.push_back(l);
  return p;
}

inline PromptDebias build_prompt_debias(BiasDimension dim, const PromptTemplates& templates) {
  const std::string& text = templates[dim];
  if (detail::blank(text)) throw Error("no prompt template for " + std::string(to_string(dim)));
  return {text};
}

namespace detail {

inline std::optional<ProjectionIntervention> projection_of(const InterventionSpec& spec) {
  if (const auto* s = std::get_if<LogitSteer>(&spec)) return ProjectionIntervention{{s->direction.v}, {s->layer}, s->alpha};
  if (const auto* p = std::get_if<ActivationPatch>(&spec)) {
    if (p->layers.empty()) throw Error("activation patch without layers");
    for (std::size_t i = 1; i < p->layers.size(); ++i)
      if (p->layers[i] <= p->layers[i - 1]) throw Error("activation patch layers must be strictly increasing");
    return ProjectionIntervention{{p->direction.v}, p->layers, p->alpha};
  }
  return std::nullopt;
}

}  // namespace detail

// Holds an intervention active on a backend for its lifetime: weight edits
// are applied on construction and reverted on destruction.
class ActiveIntervention {
 public:
  ActiveIntervention(Backend& backend, const InterventionSpec& spec)
      : backend_(backend), projection_(detail::projection_of(spec)) {
    const auto info = backend.info();
    if (projection_ && !info.has(Capability::intervene))
      throw CapabilityError(info.name + " does not support activation interventions");
    if (const auto* p = std::get_if<PromptDebias>(&spec)) {
      if (!p->prompt.empty() && !info.has(Capability::prompt_mask))
        throw CapabilityError(info.name + " does not support masked prompts");
      prefix_ = p->prompt;
    }
    if (const auto* e = std::get_if<WeightEdit>(&spec)) {
      if (!info.has(Capability::edit)) throw CapabilityError(info.name + " does not support weight edits");
      handle_ = backend.apply_edit(e->delta);
    }
  }

  ActiveIntervention(const ActiveIntervention&) = delete;
  ActiveIntervention& operator=(const ActiveIntervention&) = delete;

  ~ActiveIntervention() {
    if (handle_) {
      try {
        backend_.revert(*handle_);
      } catch (const std::exception& e) {
        warn(std::string("failed to revert weight edit: ") + e.what());
      }
    }
  }

  // Reverts now and reports failures, rather than from the destructor.
  void release() {
    if (handle_) {
      auto h = *handle_;
      handle_.reset();
      backend_.revert(h);
    }
  }

  ScoreResult score(const std::string& context, const std::string& completion) {
    return backend_.score({context, completion, prefix_, projection_});
  }

  CompletionScores score(const TripletExample& ex) {
    CompletionScores s;
    s.example_id = ex.id;
    s.dimension = ex.dimension;
    s.p_stereo = -score(ex.context, ex.stereotype).mean_nll();
    s.p_anti = -score(ex.context, ex.anti_stereotype).mean_nll();
    s.p_unrelated = -score(ex.context, ex.unrelated).mean_nll();
    return s;
  }

 private:
  Backend& backend_;
  std::optional<ProjectionIntervention> projection_;
  std::string prefix_;
  std::optional<EditHandle> handle_;
};

inline CompletionScores score_triplet(Backend& backend, const TripletExample& ex,
                                      const InterventionSpec& spec = NoIntervention{}) {
  ActiveIntervention active(backend, spec);
  auto s = active.score(ex);
  active.release();
  return s;
}

// --- BiasEdit-lite ---------------------------------------------------------------

// Symmetric: zero iff both completions are equally likely.
inline double debias_loss(const CompletionScores& s) {
  const double d = s.p_stereo - s.p_anti;
  return d * d;
}

inline double retention_loss(const CompletionScores& current, const CompletionScores& original) {
  if (current.example_id != original.example_id)
    throw Error("retention_loss compares '" + current.example_id + "' with '" + original.example_id + "'");
  const double d = current.p_unrelated - original.p_unrelated;
  return d * d;
}

struct BiasEditConfig {
  double learning_rate = 1e-2;
  std::size_t steps = 200;
  double retention_weight = 1.0;
  std::optional<std::size_t> target_layer;  // unset: penultimate block
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error("BiasEdit learning_rate must be positive");
    if (!(retention_weight >= 0.0)) throw Error("BiasEdit retention_weight must be non-negative");
  }
  bool operator==(const BiasEditConfig&) const = default;
};

using MlpTensors = std::array<Tensor, 4>;

struct LayerGradient {
  MlpTensors grads;
  CompletionScores current;
  double debias = 0.0;
  double retention = 0.0;
  double objective() const { return debias + retention; }  // retention already weighted
};

namespace detail {

// Mean log-probability of the completion and, optionally, its derivative
// with respect to the produced logits.
struct CompletionPass {
  double mean_logprob = 0.0;
  reference::ForwardCache cache;
  Tensor dlogits;
};

inline CompletionPass completion_pass(const reference::ReferenceModel& model, const std::string& context,
                                      const std::string& completion, bool with_grad) {
  const auto seq = scoring_sequence({context, completion, {}, std::nullopt});
  const std::size_t from = seq.completion_begin - 1;
  CompletionPass pass;
  const auto out = model.forward(seq.tokens, {}, from, with_grad ? &pass.cache : nullptr);
  const std::size_t n = seq.tokens.size() - seq.completion_begin;
  if (with_grad) pass.dlogits = Tensor({out.logits.rows(), reference::kVocabSize});
  double total = 0.0;
  for (std::size_t t = seq.completion_begin; t < seq.tokens.size(); ++t) {
    const std::size_t r = t - 1 - from;
    const auto ls = reference::log_softmax({out.logits.row(r), reference::kVocabSize});
    const auto target = static_cast<std::size_t>(seq.tokens[t]);
    total += ls[target];
    if (with_grad) {
      double* dl = pass.dlogits.row(r);
      for (std::size_t k = 0; k < reference::kVocabSize; ++k) dl[k] = -std::exp(ls[k]) / static_cast<double>(n);
      dl[target] += 1.0 / static_cast<double>(n);
    }
  }
  pass.mean_logprob = total / static_cast<double>(n);
  return pass;
}

}  // namespace detail

inline CompletionScores model_scores(const reference::ReferenceModel& model, const TripletExample& ex) {
  return {ex.id, ex.dimension, detail::completion_pass(model, ex.context, ex.stereotype, false).mean_logprob,
          detail::completion_pass(model, ex.context, ex.anti_stereotype, false).mean_logprob,
          detail::completion_pass(model, ex.context, ex.unrelated, false).mean_logprob};
}

// Gradient of debias_loss + retention_weight * retention_loss with respect
// to the MLP parameters of `layer`, by backpropagation through the blocks
// above it and the output head.
inline LayerGradient layer_gradient(const reference::ReferenceModel& model, const TripletExample& ex,
                                    const CompletionScores& original, std::size_t layer, double retention_weight) {
  if (layer >= model.config().n_layers) throw Error("layer " + std::to_string(layer) + " out of range");
  if (original.example_id != ex.id) throw Error("original scores belong to a different example");
  auto stereo = detail::completion_pass(model, ex.context, ex.stereotype, true);
  auto anti = detail::completion_pass(model, ex.context, ex.anti_stereotype, true);
  auto unrel = detail::completion_pass(model, ex.context, ex.unrelated, true);

  LayerGradient g;
  g.current = {ex.id, ex.dimension, stereo.mean_logprob, anti.mean_logprob, unrel.mean_logprob};
  g.debias = debias_loss(g.current);
  g.retention = retention_weight * retention_loss(g.current, original);

  const double gap = stereo.mean_logprob - anti.mean_logprob;
  const double drift = unrel.mean_logprob - original.p_unrelated;
  reference::ModelParams grads = model.params().zeros_like();
  auto push = [&](detail::CompletionPass& pass, double coefficient) {
    if (coefficient == 0.0) return;
    for (auto& x : pass.dlogits.data) x *= coefficient;
    model.backward(pass.cache, pass.dlogits, grads, layer);
  };
  push(stereo, 2.0 * gap);
  push(anti, -2.0 * gap);
  push(unrel, 2.0 * retention_weight * drift);

  auto mlp = grads.blocks[layer].mlp();
  for (std::size_t k = 0; k < 4; ++k) g.grads[k] = std::move(*mlp[k]);
  return g;
}

struct BiasEditResult {
  EditDelta delta;
  std::vector<double> train_debias;     // mean over train, after k updates (k = 0..steps)
  std::vector<double> train_objective;  // same indexing
  std::vector<double> dev_objective;    // same indexing
  std::size_t best_step = 0;
};

// Plain gradient descent on the target block's MLP weights; keeps the
// parameters of the step with the best dev objective. The model is left
// unchanged; the result carries the update as an EditDelta.
inline BiasEditResult train_biasedit(Backend& backend, const DatasetSplit& split, const BiasEditConfig& cfg) {
  cfg.validate();
  const auto info = backend.info();
  reference::ReferenceModel* model = backend.gradient_model();
  if (!model || !info.has(Capability::edit))
    throw CapabilityError(info.name + " cannot be edited by gradient (BiasEdit needs an in-process model)");
  if (split.train.empty()) throw Error("BiasEdit needs a non-empty train split");
  const std::size_t layer = cfg.target_layer.value_or(info.n_layers >= 2 ? info.n_layers - 2 : 0);
  if (layer >= info.n_layers) throw Error("BiasEdit target layer out of range");

  auto live = model->params().blocks[layer].mlp();
  MlpTensors original;
  for (std::size_t k = 0; k < 4; ++k) original[k] = *live[k];
  auto restore = [&](const MlpTensors& from) {
    for (std::size_t k = 0; k < 4; ++k) *live[k] = from[k];
  };

  std::vector<CompletionScores> train_orig, dev_orig;
  for (const auto& ex : split.train) train_orig.push_back(model_scores(*model, ex));
  for (const auto& ex : split.dev) dev_orig.push_back(model_scores(*model, ex));

  const double lambda = cfg.retention_weight;
  auto dev_objective = [&]() {
    const auto& set = split.dev.empty() ? split.train : split.dev;
    const auto& orig = split.dev.empty() ? train_orig : dev_orig;
    double sum = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const auto s = model_scores(*model, set[i]);
      sum += debias_loss(s) + lambda * retention_loss(s, orig[i]);
    }
    return sum / static_cast<double>(set.size());
  };

  BiasEditResult result;
  MlpTensors best = original;
  double best_dev = dev_objective();
  result.dev_objective.push_back(best_dev);
  const double n = static_cast<double>(split.train.size());

  for (std::size_t step = 0;; ++step) {
    MlpTensors grad;
    for (std::size_t k = 0; k < 4; ++k) grad[k] = Tensor(original[k].shape);
    double debias = 0.0, objective = 0.0;
    for (std::size_t i = 0; i < split.train.size(); ++i) {
      auto g = layer_gradient(*model, split.train[i], train_orig[i], layer, lambda);
      debias += g.debias / n;
      objective += g.objective() / n;
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t j = 0; j < grad[k].size(); ++j) grad[k].data[j] += g.grads[k].data[j] / n;
    }
    if (!std::isfinite(objective)) {
      restore(original);
      throw Error("BiasEdit diverged at step " + std::to_string(step) + "; last finite step was " +
                  std::to_string(step == 0 ? 0 : step - 1));
    }
    result.train_debias.push_back(debias);
    result.train_objective.push_back(objective);
    if (step == cfg.steps) break;

    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t j = 0; j < grad[k].size(); ++j) live[k]->data[j] -= cfg.learning_rate * grad[k].data[j];

    const double dev = dev_objective();
    result.dev_objective.push_back(dev);
    if (dev < best_dev) {
      best_dev = dev;
      result.best_step = step + 1;
      for (std::size_t k = 0; k < 4; ++k) best[k] = *live[k];
    }
  }

  restore(original);
  result.delta.layer_index = layer;
  for (std::size_t k = 0; k < 4; ++k) {
    EditTensor t{std::string(reference::kMlpTensorNames[k]), original[k].shape, {}};
    t.values.resize(original[k].size());
    for (std::size_t j = 0; j < t.values.size(); ++j) t.values[j] = best[k].data[j] - original[k].data[j];
    result.delta.tensors.push_back(std::move(t));
  }
  return result;
}

inline double delta_norm(const EditDelta& delta) {
  double s = 0.0;
  for (const auto& t : delta.tensors)
    for (double x : t.values) s += x * x;
  return std::sqrt(s);
}

}  // namespace spillover
