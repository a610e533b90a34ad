#pragma once

// Small decoder-only transformer (pre-LN, GELU MLP, learned positions,
// byte-level vocabulary) with a hand-written backward pass. It is the
// in-process backend for every test and the only model BiasEdit-lite can
// differentiate through.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spillover/common.hpp"
#include "spillover/tensor.hpp"

namespace spillover::reference {

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr std::size_t kVocabSize = 258;
inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t hidden_dim = 32;
  std::size_t n_heads = 4;
  std::size_t mlp_dim = 0;  // 0 means 4 * hidden_dim
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 0;

  std::size_t ffn_dim() const { return mlp_dim ? mlp_dim : 4 * hidden_dim; }

  void validate() const {
    if (n_layers < 5) throw Error("reference model needs n_layers >= 5");
    if (hidden_dim == 0 || n_heads == 0 || hidden_dim % n_heads != 0)
      throw Error("hidden_dim must be a positive multiple of n_heads");
    if (max_seq_len < 2) throw Error("max_seq_len must be at least 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline std::vector<int> encode_bytes(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;  // [d, 3d]: q | k | v
  Tensor proj_weight, proj_bias;
  Tensor ln2_gain, ln2_bias;
  Tensor fc_weight, fc_bias;    // [d, ffn]
  Tensor out_weight, out_bias;  // [ffn, d]

  template <typename F>
  void visit(F&& f) {
    f("ln1.gain", ln1_gain);
    f("ln1.bias", ln1_bias);
    f("attn.qkv.weight", qkv_weight);
    f("attn.qkv.bias", qkv_bias);
    f("attn.proj.weight", proj_weight);
    f("attn.proj.bias", proj_bias);
    f("ln2.gain", ln2_gain);
    f("ln2.bias", ln2_bias);
    f("mlp.fc.weight", fc_weight);
    f("mlp.fc.bias", fc_bias);
    f("mlp.out.weight", out_weight);
    f("mlp.out.bias", out_bias);
  }

  // The editable MLP parameters, in wire order.
  std::array<Tensor*, 4> mlp() { return {&fc_weight, &fc_bias, &out_weight, &out_bias}; }
  std::array<const Tensor*, 4> mlp() const { return {&fc_weight, &fc_bias, &out_weight, &out_bias}; }
};

inline constexpr std::array<std::string_view, 4> kMlpTensorNames = {"mlp.fc.weight", "mlp.fc.bias",
                                                                    "mlp.out.weight", "mlp.out.bias"};

struct ModelParams {
  Tensor token_embedding;     // [V, d]
  Tensor position_embedding;  // [T, d]
  std::vector<BlockParams> blocks;
  Tensor final_gain, final_bias;
  Tensor head_weight, head_bias;  // [d, V]

  template <typename F>
  void visit(F&& f) {
    f(std::string("token_embedding"), token_embedding);
    f(std::string("position_embedding"), position_embedding);
    for (std::size_t l = 0; l < blocks.size(); ++l)
      blocks[l].visit([&](std::string_view name, Tensor& t) { f("blocks." + std::to_string(l) + "." + std::string(name), t); });
    f(std::string("final.gain"), final_gain);
    f(std::string("final.bias"), final_bias);
    f(std::string("head.weight"), head_weight);
    f(std::string("head.bias"), head_bias);
  }

  // Same shapes, all zeros.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.visit([](const std::string&, Tensor& t) { std::fill(t.data.begin(), t.data.end(), 0.0); });
    return z;
  }
};

inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim, f = cfg.ffn_dim(), V = kVocabSize;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Tensor& t, double sd) {
    for (auto& x : t.data) x = sd * normal(rng);
  };
  auto ones = [](std::size_t n) {
    Tensor t({n});
    std::fill(t.data.begin(), t.data.end(), 1.0);
    return t;
  };
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  ModelParams p;
  p.token_embedding = Tensor({V, d});
  fill(p.token_embedding, 0.5);
  p.position_embedding = Tensor({cfg.max_seq_len, d});
  fill(p.position_embedding, 0.1);
  p.blocks.resize(cfg.n_layers);
  for (auto& b : p.blocks) {
    b.ln1_gain = ones(d);
    b.ln1_bias = Tensor({d});
    b.qkv_weight = Tensor({d, 3 * d});
    fill(b.qkv_weight, 1.0 / std::sqrt(static_cast<double>(d)));
    b.qkv_bias = Tensor({3 * d});
    b.proj_weight = Tensor({d, d});
    fill(b.proj_weight, residual_scale / std::sqrt(static_cast<double>(d)));
    b.proj_bias = Tensor({d});
    b.ln2_gain = ones(d);
    b.ln2_bias = Tensor({d});
    b.fc_weight = Tensor({d, f});
    fill(b.fc_weight, 1.0 / std::sqrt(static_cast<double>(d)));
    b.fc_bias = Tensor({f});
    fill(b.fc_bias, 0.02);
    b.out_weight = Tensor({f, d});
    fill(b.out_weight, residual_scale / std::sqrt(static_cast<double>(f)));
    b.out_bias = Tensor({d});
  }
  p.final_gain = ones(d);
  p.final_bias = Tensor({d});
  p.head_weight = Tensor({d, V});
  fill(p.head_weight, 1.0 / std::sqrt(static_cast<double>(d)));
  p.head_bias = Tensor({V});
  return p;
}

// Called with the [T, d] output of block `layer` (after its residual
// addition); may rewrite it in place before block `layer + 1` sees it.
using BlockHook = std::function<void(std::size_t layer, Tensor& hidden)>;

struct BlockCache {
  Tensor ln1_hat, ln1_out;
  std::vector<double> ln1_rstd;
  Tensor qkv;
  Tensor attn_probs;  // [heads, T, T], causal (upper triangle zero)
  Tensor attn_mix;    // [T, d] head outputs before the projection
  Tensor ln2_hat, ln2_out;
  std::vector<double> ln2_rstd;
  Tensor fc_pre, fc_act;
};

struct ForwardCache {
  std::vector<int> tokens;
  std::vector<BlockCache> blocks;
  Tensor final_hat, final_out;
  std::vector<double> final_rstd;
  std::size_t logits_from = 0;
  bool hooked = false;
};

struct ForwardOutput {
  Tensor logits;               // rows logits_from..T-1
  std::vector<Tensor> hidden;  // per block output, [T, d]
};

namespace kernels {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

inline double gelu_grad(double x) {
  const double th = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// y[T, out] = x[T, in] W[in, out] + b
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t T = x.rows(), in = w.rows(), out = w.cols();
  Tensor y({T, out});
  for (std::size_t t = 0; t < T; ++t) {
    double* yr = y.row(t);
    std::copy(b.data.begin(), b.data.end(), yr);
    const double* xr = x.row(t);
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* wr = w.row(i);
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
    }
  }
  return y;
}

// Accumulates dW, db and returns dx for y = x W + b.
inline Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor& db) {
  const std::size_t T = x.rows(), in = w.rows(), out = w.cols();
  Tensor dx({T, in});
  for (std::size_t t = 0; t < T; ++t) {
    const double* dyr = dy.row(t);
    const double* xr = x.row(t);
    double* dxr = dx.row(t);
    for (std::size_t o = 0; o < out; ++o) db.data[o] += dyr[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* wr = w.row(i);
      double* dwr = dw.row(i);
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) {
        dwr[o] += xi * dyr[o];
        acc += dyr[o] * wr[o];
      }
      dxr[i] = acc;
    }
  }
  return dx;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Tensor& hat,
                         std::vector<double>& rstd) {
  const std::size_t T = x.rows(), d = x.cols();
  Tensor y({T, d});
  hat = Tensor({T, d});
  rstd.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double* xr = x.row(t);
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[t] = r;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - mu) * r;
      hat.row(t)[i] = h;
      y.row(t)[i] = h * gain.data[i] + bias.data[i];
    }
  }
  return y;
}

inline Tensor layer_norm_backward(const Tensor& dy, const Tensor& hat, const std::vector<double>& rstd,
                                  const Tensor& gain, Tensor& dgain, Tensor& dbias) {
  const std::size_t T = dy.rows(), d = dy.cols();
  Tensor dx({T, d});
  std::vector<double> dhat(d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* dyr = dy.row(t);
    const double* hr = hat.row(t);
    double mean_dhat = 0.0, mean_dhat_h = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dgain.data[i] += dyr[i] * hr[i];
      dbias.data[i] += dyr[i];
      dhat[i] = dyr[i] * gain.data[i];
      mean_dhat += dhat[i];
      mean_dhat_h += dhat[i] * hr[i];
    }
    mean_dhat /= static_cast<double>(d);
    mean_dhat_h /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) dx.row(t)[i] = rstd[t] * (dhat[i] - mean_dhat - hr[i] * mean_dhat_h);
  }
  return dx;
}

inline void add_in_place(Tensor& a, const Tensor& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace kernels

// Log-softmax of one logits row, numerically stable.
inline std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

class ReferenceModel {
 public:
  explicit ReferenceModel(ModelConfig cfg) : config_(cfg), params_(init_params(cfg)) {}
  ReferenceModel(ModelConfig cfg, ModelParams params) : config_(cfg), params_(std::move(params)) { cfg.validate(); }

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  // Logits are produced only for rows >= logits_from (scoring needs a
  // suffix). Pass a cache to enable backward().
  ForwardOutput forward(std::span<const int> tokens, const BlockHook& hook = {}, std::size_t logits_from = 0,
                        ForwardCache* cache = nullptr) const {
    const std::size_t T = tokens.size();
    if (T == 0) throw Error("forward on an empty token sequence");
    if (T > config_.max_seq_len)
      throw Error("sequence of " + std::to_string(T) + " tokens exceeds max_seq_len " +
                  std::to_string(config_.max_seq_len));
    if (logits_from > T) throw Error("logits_from beyond sequence end");
    const std::size_t d = config_.hidden_dim, H = config_.n_heads, hd = d / H, L = config_.n_layers;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor x({T, d});
    for (std::size_t t = 0; t < T; ++t) {
      const int tok = tokens[t];
      if (tok < 0 || static_cast<std::size_t>(tok) >= kVocabSize) throw Error("token id out of range");
      const double* te = params_.token_embedding.row(static_cast<std::size_t>(tok));
      const double* pe = params_.position_embedding.row(t);
      for (std::size_t i = 0; i < d; ++i) x.row(t)[i] = te[i] + pe[i];
    }

    if (cache) {
      cache->tokens.assign(tokens.begin(), tokens.end());
      cache->blocks.assign(L, {});
      cache->logits_from = logits_from;
      cache->hooked = static_cast<bool>(hook);
    }

    ForwardOutput out;
    out.hidden.reserve(L);
    BlockCache scratch;
    for (std::size_t l = 0; l < L; ++l) {
      const BlockParams& B = params_.blocks[l];
      BlockCache& c = cache ? cache->blocks[l] : scratch;

      c.ln1_out = kernels::layer_norm(x, B.ln1_gain, B.ln1_bias, c.ln1_hat, c.ln1_rstd);
      c.qkv = kernels::linear(c.ln1_out, B.qkv_weight, B.qkv_bias);
      c.attn_probs = Tensor({H, T, T});
      c.attn_mix = Tensor({T, d});
      std::vector<double> row(T);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        for (std::size_t i = 0; i < T; ++i) {
          const double* qi = c.qkv.row(i) + qo;
          double mx = -INFINITY;
          for (std::size_t j = 0; j <= i; ++j) {
            const double* kj = c.qkv.row(j) + ko;
            double s = 0.0;
            for (std::size_t e = 0; e < hd; ++e) s += qi[e] * kj[e];
            row[j] = s * scale;
            mx = std::max(mx, row[j]);
          }
          double z = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
          }
          double* probs = c.attn_probs.data.data() + (h * T + i) * T;
          double* mix = c.attn_mix.row(i) + h * hd;
          for (std::size_t j = 0; j <= i; ++j) {
            const double pij = row[j] / z;
            probs[j] = pij;
            const double* vj = c.qkv.row(j) + vo;
            for (std::size_t e = 0; e < hd; ++e) mix[e] += pij * vj[e];
          }
        }
      }
      Tensor mid = kernels::linear(c.attn_mix, B.proj_weight, B.proj_bias);
      kernels::add_in_place(mid, x);

      c.ln2_out = kernels::layer_norm(mid, B.ln2_gain, B.ln2_bias, c.ln2_hat, c.ln2_rstd);
      c.fc_pre = kernels::linear(c.ln2_out, B.fc_weight, B.fc_bias);
      c.fc_act = c.fc_pre;
      for (auto& v : c.fc_act.data) v = kernels::gelu(v);
      x = kernels::linear(c.fc_act, B.out_weight, B.out_bias);
      kernels::add_in_place(x, mid);

      if (hook) hook(l, x);
      out.hidden.push_back(x);
    }

    Tensor fhat;
    std::vector<double> frstd;
    Tensor fin = kernels::layer_norm(x, params_.final_gain, params_.final_bias, fhat, frstd);

    const std::size_t n_rows = T - logits_from;
    out.logits = Tensor({n_rows, kVocabSize});
    for (std::size_t r = 0; r < n_rows; ++r) {
      double* lr = out.logits.row(r);
      std::copy(params_.head_bias.data.begin(), params_.head_bias.data.end(), lr);
      const double* fr = fin.row(logits_from + r);
      for (std::size_t i = 0; i < d; ++i) {
        const double fi = fr[i];
        const double* wr = params_.head_weight.row(i);
        for (std::size_t v = 0; v < kVocabSize; ++v) lr[v] += fi * wr[v];
      }
    }

    if (cache) {
      cache->final_hat = std::move(fhat);
      cache->final_rstd = std::move(frstd);
      cache->final_out = std::move(fin);
    }
    return out;
  }

  // Accumulates into `grads` the gradient of a scalar whose derivative with
  // respect to the produced logits is `dlogits`. Only blocks >= first_layer
  // (and the embeddings when first_layer == 0) receive gradients.
  void backward(const ForwardCache& cache, const Tensor& dlogits, ModelParams& grads,
                std::size_t first_layer = 0) const {
    if (cache.hooked) throw Error("backward through a hooked forward pass is not supported");
    const std::size_t T = cache.tokens.size();
    const std::size_t d = config_.hidden_dim, H = config_.n_heads, hd = d / H, L = config_.n_layers;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    if (dlogits.rows() != T - cache.logits_from || dlogits.cols() != kVocabSize)
      throw Error("dlogits shape does not match the cached forward pass");
    if (first_layer >= L) throw Error("first_layer out of range");

    Tensor dfin({T, d});
    for (std::size_t r = 0; r < dlogits.rows(); ++r) {
      const std::size_t t = cache.logits_from + r;
      const double* dl = dlogits.row(r);
      const double* fr = cache.final_out.row(t);
      double* dfr = dfin.row(t);
      for (std::size_t v = 0; v < kVocabSize; ++v) grads.head_bias.data[v] += dl[v];
      for (std::size_t i = 0; i < d; ++i) {
        const double fi = fr[i];
        const double* wr = params_.head_weight.row(i);
        double* gw = grads.head_weight.row(i);
        double acc = 0.0;
        for (std::size_t v = 0; v < kVocabSize; ++v) {
          gw[v] += fi * dl[v];
          acc += dl[v] * wr[v];
        }
        dfr[i] = acc;
      }
    }
    Tensor dx = kernels::layer_norm_backward(dfin, cache.final_hat, cache.final_rstd, params_.final_gain,
                                             grads.final_gain, grads.final_bias);

    for (std::size_t l = L; l-- > first_layer;) {
      const BlockParams& B = params_.blocks[l];
      BlockParams& G = grads.blocks[l];
      const BlockCache& c = cache.blocks[l];

      Tensor dact = kernels::linear_backward(c.fc_act, B.out_weight, dx, G.out_weight, G.out_bias);
      for (std::size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= kernels::gelu_grad(c.fc_pre.data[i]);
      Tensor dln2 = kernels::linear_backward(c.ln2_out, B.fc_weight, dact, G.fc_weight, G.fc_bias);
      Tensor dmid = kernels::layer_norm_backward(dln2, c.ln2_hat, c.ln2_rstd, B.ln2_gain, G.ln2_gain, G.ln2_bias);
      kernels::add_in_place(dmid, dx);

      Tensor dmix = kernels::linear_backward(c.attn_mix, B.proj_weight, dmid, G.proj_weight, G.proj_bias);
      Tensor dqkv({T, 3 * d});
      std::vector<double> dp(T);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        for (std::size_t i = 0; i < T; ++i) {
          const double* probs = c.attn_probs.data.data() + (h * T + i) * T;
          const double* dout = dmix.row(i) + h * hd;
          double weighted = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const double* vj = c.qkv.row(j) + vo;
            double s = 0.0;
            for (std::size_t e = 0; e < hd; ++e) s += dout[e] * vj[e];
            dp[j] = s;
            weighted += probs[j] * s;
            double* dvj = dqkv.row(j) + vo;
            for (std::size_t e = 0; e < hd; ++e) dvj[e] += probs[j] * dout[e];
          }
          const double* qi = c.qkv.row(i) + qo;
          double* dqi = dqkv.row(i) + qo;
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = probs[j] * (dp[j] - weighted) * scale;
            const double* kj = c.qkv.row(j) + ko;
            double* dkj = dqkv.row(j) + ko;
            for (std::size_t e = 0; e < hd; ++e) {
              dqi[e] += ds * kj[e];
              dkj[e] += ds * qi[e];
            }
          }
        }
      }
      Tensor dln1 = kernels::linear_backward(c.ln1_out, B.qkv_weight, dqkv, G.qkv_weight, G.qkv_bias);
      dx = kernels::layer_norm_backward(dln1, c.ln1_hat, c.ln1_rstd, B.ln1_gain, G.ln1_gain, G.ln1_bias);
      kernels::add_in_place(dx, dmid);
    }

    if (first_layer == 0) {
      for (std::size_t t = 0; t < T; ++t) {
        double* te = grads.token_embedding.row(static_cast<std::size_t>(cache.tokens[t]));
        double* pe = grads.position_embedding.row(t);
        for (std::size_t i = 0; i < d; ++i) {
          te[i] += dx.row(t)[i];
          pe[i] += dx.row(t)[i];
        }
      }
    }
  }

 private:
  ModelConfig config_;
  ModelParams params_;
};

// --- next-byte pretraining --------------------------------------------------

struct TrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

// Adam on mean next-token NLL over BOS + line + EOS sequences. Returns the
// per-step batch loss.
inline std::vector<double> train_next_byte(ReferenceModel& model, const std::vector<std::string>& corpus,
                                           const TrainConfig& cfg) {
  if (corpus.empty()) throw Error("training corpus is empty");
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ModelParams m = model.params().zeros_like();
  ModelParams v = model.params().zeros_like();
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> history;
  history.reserve(cfg.steps);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    ModelParams grads = model.params().zeros_like();
    double loss = 0.0;
    std::size_t n_tokens = 0;
    std::vector<std::vector<int>> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& line = corpus[rng() % corpus.size()];
      std::vector<int> seq{kBos};
      for (int t : encode_bytes(line)) seq.push_back(t);
      seq.push_back(kEos);
      if (seq.size() > model.config().max_seq_len) seq.resize(model.config().max_seq_len);
      n_tokens += seq.size() - 1;
      batch.push_back(std::move(seq));
    }
    for (const auto& seq : batch) {
      ForwardCache cache;
      const auto out = model.forward(seq, {}, 0, &cache);
      Tensor dlogits({seq.size(), kVocabSize});
      for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
        const auto ls = log_softmax({out.logits.row(t), kVocabSize});
        const auto target = static_cast<std::size_t>(seq[t + 1]);
        loss -= ls[target];
        double* dl = dlogits.row(t);
        for (std::size_t k = 0; k < kVocabSize; ++k) dl[k] = std::exp(ls[k]) / static_cast<double>(n_tokens);
        dl[target] -= 1.0 / static_cast<double>(n_tokens);
      }
      model.backward(cache, dlogits, grads);
    }
    history.push_back(loss / static_cast<double>(n_tokens));

    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    std::vector<Tensor*> ps, gs, ms, vs;
    model.params().visit([&](const std::string&, Tensor& t) { ps.push_back(&t); });
    grads.visit([&](const std::string&, Tensor& t) { gs.push_back(&t); });
    m.visit([&](const std::string&, Tensor& t) { ms.push_back(&t); });
    v.visit([&](const std::string&, Tensor& t) { vs.push_back(&t); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      for (std::size_t i = 0; i < ps[k]->data.size(); ++i) {
        const double g = gs[k]->data[i];
        double& mi = ms[k]->data[i];
        double& vi = vs[k]->data[i];
        mi = beta1 * mi + (1.0 - beta1) * g;
        vi = beta2 * vi + (1.0 - beta2) * g * g;
        ps[k]->data[i] -= cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + eps);
      }
    }
  }
  return history;
}

}  // namespace spillover::reference
