#pragma once

#include <cerrno>
#include <csignal>
#include <cstring>
#include <optional>
#include <string>

#include <json.hpp>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include "spillover/backend.hpp"
#include "spillover/protocol.hpp"

extern char** environ;

namespace spillover {

// Backend living in a child process, reached over the bridge protocol.
class BridgeClient : public Backend {
 public:
  explicit BridgeClient(std::string command) : command_(std::move(command)) {
    std::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0) throw Error(std::string("pipe: ") + std::strerror(errno));
    if (pipe(from_child) != 0) {
      close(to_child[0]);
      close(to_child[1]);
      throw Error(std::string("pipe: ") + std::strerror(errno));
    }
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);
    posix_spawn_file_actions_addclose(&actions, to_child[1]);
    posix_spawn_file_actions_addclose(&actions, from_child[0]);
    std::string sh = "/bin/sh", dash_c = "-c";
    char* argv[] = {sh.data(), dash_c.data(), command_.data(), nullptr};
    const int rc = posix_spawn(&pid_, "/bin/sh", &actions, nullptr, argv, environ);
    posix_spawn_file_actions_destroy(&actions);
    close(to_child[0]);
    close(from_child[1]);
    if (rc != 0) {
      close(to_child[1]);
      close(from_child[0]);
      throw Error("cannot launch bridge '" + command_ + "': " + std::strerror(rc));
    }
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
  }

  BridgeClient(const BridgeClient&) = delete;
  BridgeClient& operator=(const BridgeClient&) = delete;

  ~BridgeClient() override {
    try {
      if (alive_) call("shutdown", nlohmann::json::object());
    } catch (...) {
    }
    if (write_fd_ >= 0) close(write_fd_);
    if (read_fd_ >= 0) close(read_fd_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  BackendInfo info() override {
    if (!info_) info_ = protocol::decode_info(call("info", nlohmann::json::object()));
    return *info_;
  }

  HiddenStates hidden_states(std::string_view text) override {
    require(Capability::hidden_states);
    return protocol::decode_hidden_states(call("hidden_states", {{"text", std::string(text)}}));
  }

  ScoreResult score(const ScoreRequest& request) override {
    if (!request.masked_prefix.empty()) require(Capability::prompt_mask);
    if (request.projection) require(Capability::intervene);
    return protocol::decode_score_result(call("score", protocol::encode_score_request(request)));
  }

  EditHandle apply_edit(const EditDelta& delta) override {
    require(Capability::edit);
    return call("apply_edit", protocol::encode_edit(delta)).at("handle").get<EditHandle>();
  }

  void revert(EditHandle handle) override {
    require(Capability::edit);
    call("revert", {{"handle", handle}});
  }

  // Raw request; returns the result object or throws with the remote code.
  nlohmann::json call(const std::string& method, const nlohmann::json& params) {
    if (!alive_) throw protocol::BridgeError(protocol::kInternal, "bridge '" + command_ + "' is not running");
    const std::int64_t id = next_id_++;
    send_line(nlohmann::json{{"id", id}, {"method", method}, {"params", params}}.dump());
    const std::string line = read_line();
    nlohmann::json response;
    try {
      response = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw protocol::BridgeError(protocol::kInternal, "malformed bridge response: " + std::string(e.what()));
    }
    if (response.value("id", nlohmann::json(nullptr)) != id)
      throw protocol::BridgeError(protocol::kInternal, "bridge response id mismatch");
    if (response.contains("error")) {
      const auto& err = response["error"];
      const int code = err.value("code", static_cast<int>(protocol::kInternal));
      const std::string message = err.value("message", std::string("unspecified bridge error"));
      if (code == protocol::kCapabilityViolation) throw CapabilityError(message);
      throw protocol::BridgeError(code, message);
    }
    if (method == "shutdown") alive_ = false;
    return response.value("result", nlohmann::json::object());
  }

 private:
  void require(Capability c) {
    if (!info().has(c)) throw CapabilityError(info().name + " lacks capability " + std::string(to_string(c)));
  }

  void send_line(std::string line) {
    line += '\n';
    std::size_t off = 0;
    while (off < line.size()) {
      const ssize_t n = ::write(write_fd_, line.data() + off, line.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        alive_ = false;
        throw protocol::BridgeError(protocol::kInternal, "bridge write failed: " + std::string(std::strerror(errno)));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::string read_line() {
    for (;;) {
      if (auto pos = buffer_.find('\n'); pos != std::string::npos) {
        std::string line = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        return line;
      }
      char chunk[65536];
      const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        alive_ = false;
        throw protocol::BridgeError(protocol::kInternal, "bridge '" + command_ + "' closed its output");
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  std::string command_;
  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  bool alive_ = true;
  std::int64_t next_id_ = 1;
  std::string buffer_;
  std::optional<BackendInfo> info_;
};

}  // namespace spillover
