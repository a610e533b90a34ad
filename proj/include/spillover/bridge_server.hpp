#pragma once

#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "spillover/backend.hpp"
#include "spillover/protocol.hpp"

namespace spillover::protocol {

namespace detail {

inline void require(const BackendInfo& info, Capability c) {
  if (!info.has(c)) throw CapabilityError(info.name + " lacks capability " + std::string(to_string(c)));
}

inline nlohmann::json dispatch(Backend& backend, const std::string& method, const nlohmann::json& params,
                               bool& stop) {
  const BackendInfo info = backend.info();
  if (method == "info") return encode_info(info);
  if (method == "hidden_states") {
    require(info, Capability::hidden_states);
    return encode_hidden_states(backend.hidden_states(params.at("text").get<std::string>()));
  }
  if (method == "score") {
    const ScoreRequest req = decode_score_request(params);
    if (!req.masked_prefix.empty()) require(info, Capability::prompt_mask);
    if (req.projection) require(info, Capability::intervene);
    return encode_score_result(backend.score(req));
  }
  if (method == "apply_edit") {
    require(info, Capability::edit);
    return {{"handle", backend.apply_edit(decode_edit(params))}};
  }
  if (method == "revert") {
    require(info, Capability::edit);
    backend.revert(params.at("handle").get<EditHandle>());
    return nlohmann::json::object();
  }
  if (method == "shutdown") {
    stop = true;
    return nlohmann::json::object();
  }
  throw BridgeError(kUnknownMethod, "unknown method '" + method + "'");
}

}  // namespace detail

// Answers one request line. Sets `stop` after a shutdown request.
inline std::string handle_request(Backend& backend, const std::string& line, bool& stop) {
  nlohmann::json id = nullptr;
  auto fail = [&](int code, const std::string& message) {
    return nlohmann::json{{"id", id}, {"error", {{"code", code}, {"message", message}}}}.dump();
  };
  nlohmann::json request;
  try {
    request = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    return fail(kInvalidRequest, std::string("malformed request: ") + e.what());
  }
  if (!request.is_object() || !request.contains("method") || !request["method"].is_string())
    return fail(kInvalidRequest, "request lacks a method");
  id = request.value("id", nlohmann::json(nullptr));
  const nlohmann::json params = request.value("params", nlohmann::json::object());
  try {
    auto result = detail::dispatch(backend, request["method"].get<std::string>(), params, stop);
    return nlohmann::json{{"id", id}, {"result", result}}.dump();
  } catch (const BridgeError& e) {
    return fail(e.code(), e.what());
  } catch (const CapabilityError& e) {
    return fail(kCapabilityViolation, e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(kInvalidRequest, std::string("bad params: ") + e.what());
  } catch (const Error& e) {
    return fail(kInvalidRequest, e.what());
  } catch (const std::exception& e) {
    return fail(kInternal, e.what());
  }
}

// Serves requests until shutdown or end of input.
inline void serve(Backend& backend, std::istream& in, std::ostream& out) {
  std::string line;
  bool stop = false;
  while (!stop && std::getline(in, line)) {
    if (line.empty()) continue;
    out << handle_request(backend, line, stop) << '\n';
    out.flush();
  }
}

}  // namespace spillover::protocol
