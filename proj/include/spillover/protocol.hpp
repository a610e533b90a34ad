#pragma once

// Newline-delimited JSON protocol spoken between the audit engine and a
// model process on its stdin/stdout.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "spillover/backend.hpp"
#include "spillover/common.hpp"

namespace spillover::protocol {

enum ErrorCode : int {
  kUnknownMethod = 1,
  kCapabilityViolation = 2,
  kInvalidRequest = 3,
  kInternal = 4,
};

class BridgeError : public Error {
 public:
  BridgeError(int code, const std::string& message) : Error(message), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

// --- base64 float32 arrays ----------------------------------------------------

inline std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw Error("base64 payload length is not a multiple of 4");
  std::vector<unsigned char> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw Error("invalid base64 payload");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

inline std::string encode_float32_le(const std::vector<double>& values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return base64_encode(bytes);
}

inline std::vector<double> decode_float32_le(const std::string& text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % 4 != 0) throw Error("float32 payload is not a multiple of 4 bytes");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

// --- codecs -------------------------------------------------------------------

inline nlohmann::json encode_info(const BackendInfo& info) {
  nlohmann::json caps = nlohmann::json::array();
  for (auto c : info.capabilities) caps.push_back(to_string(c));
  return {{"name", info.name},
          {"n_layers", info.n_layers},
          {"hidden_dim", info.hidden_dim},
          {"capabilities", caps},
          {"metadata", info.metadata}};
}

inline BackendInfo decode_info(const nlohmann::json& j) {
  BackendInfo info;
  info.name = j.at("name").get<std::string>();
  info.n_layers = j.at("n_layers").get<std::size_t>();
  info.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  for (const auto& c : j.at("capabilities"))
    if (auto cap = try_parse_capability(c.get<std::string>())) info.capabilities.insert(*cap);
  if (j.contains("metadata"))
    for (const auto& [k, v] : j["metadata"].items()) info.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
  if (info.n_layers == 0 || info.hidden_dim == 0) throw Error("bridge info reports an empty model");
  return info;
}

inline nlohmann::json encode_hidden_states(const HiddenStates& hs) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < hs.n_layers(); ++l) {
    nlohmann::json tokens = nlohmann::json::array();
    for (std::size_t t = 0; t < hs.n_tokens(); ++t) {
      auto v = hs.at(l, t);
      tokens.push_back(std::vector<double>(v.begin(), v.end()));
    }
    layers.push_back(std::move(tokens));
  }
  return {{"layers", layers}};
}

inline HiddenStates decode_hidden_states(const nlohmann::json& j) {
  const auto& layers = j.at("layers");
  if (!layers.is_array() || layers.empty()) throw Error("hidden_states result has no layers");
  const std::size_t L = layers.size(), T = layers[0].size();
  const std::size_t d = T ? layers[0][0].size() : 0;
  HiddenStates hs(L, T, d);
  for (std::size_t l = 0; l < L; ++l) {
    if (layers[l].size() != T) throw Error("hidden_states layers disagree on token count");
    for (std::size_t t = 0; t < T; ++t) {
      const auto v = layers[l][t].get<std::vector<double>>();
      if (v.size() != d) throw Error("hidden_states vectors disagree on dimension");
      std::copy(v.begin(), v.end(), hs.at(l, t).begin());
    }
  }
  return hs;
}

inline nlohmann::json encode_projection(const ProjectionIntervention& p) {
  return {{"kind", "project"}, {"vectors", p.vectors}, {"layers", p.layers}, {"alpha", p.alpha}};
}

inline ProjectionIntervention decode_projection(const nlohmann::json& j) {
  if (j.value("kind", std::string{}) != "project") throw Error("unsupported intervention kind");
  ProjectionIntervention p;
  p.vectors = j.at("vectors").get<std::vector<Vector>>();
  p.layers = j.at("layers").get<std::vector<std::size_t>>();
  p.alpha = j.at("alpha").get<double>();
  return p;
}

inline nlohmann::json encode_score_request(const ScoreRequest& r) {
  nlohmann::json j = {{"context", r.context}, {"completion", r.completion}};
  if (!r.masked_prefix.empty()) j["masked_prefix"] = r.masked_prefix;
  if (r.projection) j["intervention"] = encode_projection(*r.projection);
  return j;
}

inline ScoreRequest decode_score_request(const nlohmann::json& j) {
  ScoreRequest r;
  r.context = j.at("context").get<std::string>();
  r.completion = j.at("completion").get<std::string>();
  r.masked_prefix = j.value("masked_prefix", std::string{});
  if (j.contains("intervention") && !j["intervention"].is_null()) r.projection = decode_projection(j["intervention"]);
  return r;
}

inline nlohmann::json encode_score_result(const ScoreResult& r) {
  return {{"total_nll", r.total_nll}, {"token_count", r.token_count}};
}

inline ScoreResult decode_score_result(const nlohmann::json& j) {
  ScoreResult r;
  r.total_nll = j.at("total_nll").get<double>();
  r.token_count = j.at("token_count").get<std::size_t>();
  if (r.token_count == 0) throw Error("score result with zero tokens");
  return r;
}

// Tensors travel as float32; decoding widens back to double.
inline nlohmann::json encode_edit(const EditDelta& e) {
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& t : e.tensors)
    deltas.push_back({{"name", t.name}, {"shape", t.shape}, {"data", encode_float32_le(t.values)}});
  return {{"layer", e.layer_index}, {"deltas", deltas}};
}

inline EditDelta decode_edit(const nlohmann::json& j) {
  EditDelta e;
  e.layer_index = j.at("layer").get<std::size_t>();
  for (const auto& d : j.at("deltas")) {
    EditTensor t;
    t.name = d.value("name", std::string{});
    t.shape = d.at("shape").get<std::vector<std::size_t>>();
    t.values = decode_float32_le(d.at("data").get<std::string>());
    if (t.values.size() != Tensor::element_count(t.shape))
      throw Error("edit tensor '" + t.name + "' payload does not match its shape");
    e.tensors.push_back(std::move(t));
  }
  return e;
}

}  // namespace spillover::protocol
