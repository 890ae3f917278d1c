// Copyright 2026 The Koji Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "koji/executor.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

extern char** environ;

namespace koji {

namespace fs = std::filesystem;

std::string_view to_string(TerminationKind kind) {
  switch (kind) {
    case TerminationKind::Succeeded: return "Succeeded";
    case TerminationKind::Failed: return "Failed";
    case TerminationKind::Killed: return "Killed";
  }
  return "Unknown";
}

std::string_view to_string(ExecErrc code) {
  switch (code) {
    case ExecErrc::ImageNotFound: return "ImageNotFound";
    case ExecErrc::SpawnFailure: return "SpawnFailure";
    case ExecErrc::PortUnavailable: return "PortUnavailable";
    case ExecErrc::UnboundName: return "UnboundName";
  }
  return "Unknown";
}

// ---------------------------------------------------------------------------
// Invocation rendering
// ---------------------------------------------------------------------------

Invocation build_invocation(const ContainerLogic& logic, const ResolvedInputs& inputs,
                            const OutputDestinations& outputs) {
  Invocation inv;
  inv.argv.push_back(logic.image);

  auto locator_of = [](const std::map<std::string, std::string>& table, const ContainerPort& p,
                       const char* side) -> const std::string& {
    auto it = table.find(p.name);
    if (it == table.end())
      throw ExecError(ExecErrc::UnboundName, std::string("container ") + side + " '" + p.name +
                                                 "' has no resolved locator");
    return it->second;
  };

  for (const auto& p : logic.inputs) {
    const std::string& loc = locator_of(inputs, p, "input");
    if (p.flag) {
      if (p.flag->empty())
        inv.argv.push_back(loc);
      else
        inv.argv.push_back("--" + *p.flag + "=" + loc);
    }
    if (p.env) inv.env[*p.env] = loc;
  }
  for (const auto& p : logic.outputs) {
    const std::string& loc = locator_of(outputs, p, "output");
    if (p.flag) {
      if (p.flag->empty())
        inv.argv.push_back(loc);
      else
        inv.argv.push_back("--" + *p.flag + "=" + loc);
    }
    if (p.env) inv.env[*p.env] = loc;
  }
  for (const auto& f : logic.flags) {
    if (f.value)
      inv.argv.push_back("--" + f.name + "=" + *f.value);
    else
      inv.argv.push_back("--" + f.name);
  }
  for (const auto& v : logic.env) inv.env[v.name] = v.value.value_or("");
  return inv;
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

namespace {

// All declared file outputs must exist at their destination after success;
// the declared directory flag must match what is on disk.
std::optional<std::string> verify_file_outputs(const ExecutionRequest& req) {
  for (const auto& port : req.outputs) {
    if (!port.resource.is_file()) continue;
    auto it = req.destinations.find(port.name);
    if (it == req.destinations.end()) return "output '" + port.name + "' has no destination";
    const fs::path dest = it->second;
    auto st = fs::symlink_status(dest);
    if (st.type() == fs::file_type::not_found)
      return "output '" + port.name + "' missing at " + dest.string();
    const bool want_dir = port.resource.file().directory;
    const bool is_dir = st.type() == fs::file_type::directory;
    if (want_dir != is_dir)
      return "output '" + port.name + "' is a " + (is_dir ? "directory" : "file") + " but " +
             (want_dir ? "a directory" : "a file") + " was declared";
  }
  return std::nullopt;
}

bool parse_endpoint(const std::string& endpoint, std::string& host, std::uint16_t& port) {
  auto colon = endpoint.rfind(':');
  if (colon == std::string::npos) return false;
  host = endpoint.substr(0, colon);
  try {
    unsigned long p = std::stoul(endpoint.substr(colon + 1));
    if (p == 0 || p > 65535) return false;
    port = static_cast<std::uint16_t>(p);
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

}  // namespace

std::string reserve_loopback_endpoint() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw ExecError(ExecErrc::PortUnavailable, "socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw ExecError(ExecErrc::PortUnavailable, "cannot bind a loopback port");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  std::uint16_t port = ntohs(addr.sin_port);
  ::close(fd);
  return "127.0.0.1:" + std::to_string(port);
}

bool endpoint_connectable(const std::string& endpoint, std::chrono::milliseconds timeout) {
  std::string host;
  std::uint16_t port = 0;
  if (!parse_endpoint(endpoint, host, port)) return false;

  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK, 0);
  if (fd < 0) return false;
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    return false;
  }

  int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  if (rc == 0) {
    ::close(fd);
    return true;
  }
  if (errno != EINPROGRESS) {
    ::close(fd);
    return false;
  }
  pollfd pfd{fd, POLLOUT, 0};
  rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
  bool ok = false;
  if (rc == 1) {
    int err = 0;
    socklen_t len = sizeof(err);
    ok = ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) == 0 && err == 0;
  }
  ::close(fd);
  return ok;
}

// ---------------------------------------------------------------------------
// Local process backend
// ---------------------------------------------------------------------------

namespace {

std::string resolve_image(const std::string& image) {
  auto executable = [](const std::string& p) {
    return ::access(p.c_str(), X_OK) == 0 && fs::is_regular_file(fs::symlink_status(p));
  };
  if (image.find('/') != std::string::npos) {
    if (executable(image)) return image;
    throw ExecError(ExecErrc::ImageNotFound, "image '" + image + "' is not an executable file");
  }
  const char* path = ::getenv("PATH");
  std::istringstream dirs(path ? path : "");
  std::string dir;
  while (std::getline(dirs, dir, ':')) {
    if (dir.empty()) dir = ".";
    std::string candidate = dir + "/" + image;
    if (executable(candidate)) return candidate;
  }
  throw ExecError(ExecErrc::ImageNotFound, "image '" + image + "' not found on PATH");
}

class LocalHandle : public ProcessHandle {
 public:
  LocalHandle(pid_t pid, ExecutionRequest req) : pid_(pid), req_(std::move(req)) {}

  ~LocalHandle() override {
    std::unique_lock lk(mu_);
    if (result_) return;
    lk.unlock();
    kill();
    wait();
  }

  Termination wait() override {
    std::unique_lock lk(mu_);
    if (result_) return *result_;
    if (reaping_) {
      cv_.wait(lk, [&] { return result_.has_value(); });
      return *result_;
    }
    reaping_ = true;
    for (;;) {
      lk.unlock();
      int status = 0;
      pid_t r = ::waitpid(pid_, &status, WNOHANG);
      lk.lock();
      if (r == pid_) {
        result_ = classify(status);
        cv_.notify_all();
        return *result_;
      }
      if (r < 0) {
        result_ = Termination{TerminationKind::Failed,
                              std::string("waitpid failed: ") + std::strerror(errno)};
        cv_.notify_all();
        return *result_;
      }
      if (kill_requested_ && !sigkill_sent_ &&
          std::chrono::steady_clock::now() >= kill_deadline_) {
        ::kill(pid_, SIGKILL);
        sigkill_sent_ = true;
      }
      lk.unlock();
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
      lk.lock();
    }
  }

  void kill() override {
    std::lock_guard lk(mu_);
    if (result_ || kill_requested_) return;
    kill_requested_ = true;
    kill_deadline_ = std::chrono::steady_clock::now() + req_.kill_grace;
    ::kill(pid_, SIGTERM);
  }

 private:
  // Caller holds mu_.
  Termination classify(int status) const {
    if (kill_requested_) return {TerminationKind::Killed, ""};
    if (WIFEXITED(status)) {
      if (WEXITSTATUS(status) == 0) {
        if (auto missing = verify_file_outputs(req_))
          return {TerminationKind::Failed, *missing};
        return {TerminationKind::Succeeded, ""};
      }
      return {TerminationKind::Failed,
              "exit status " + std::to_string(WEXITSTATUS(status))};
    }
    if (WIFSIGNALED(status))
      return {TerminationKind::Failed, std::string("killed by signal ") +
                                           std::to_string(WTERMSIG(status))};
    return {TerminationKind::Failed, "unrecognized wait status"};
  }

  pid_t pid_;
  ExecutionRequest req_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<Termination> result_;
  bool reaping_ = false;
  bool kill_requested_ = false;
  bool sigkill_sent_ = false;
  std::chrono::steady_clock::time_point kill_deadline_;
};

}  // namespace

std::unique_ptr<ProcessHandle> LocalProcessBackend::execute(const ExecutionRequest& request) {
  const ContainerLogic* logic = request.logic.container();
  if (logic == nullptr)
    throw ExecError(ExecErrc::SpawnFailure,
                    "local backend runs container logic only (step '" + request.step_label + "')");

  Invocation inv = build_invocation(*logic, request.resolved_inputs, request.destinations);
  const std::string image_path = resolve_image(logic->image);

  fs::create_directories(request.scratch_dir);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  const std::string out_log = (request.scratch_dir / "stdout.log").string();
  const std::string err_log = (request.scratch_dir / "stderr.log").string();
  posix_spawn_file_actions_addopen(&actions, 1, out_log.c_str(), O_WRONLY | O_CREAT | O_TRUNC,
                                   0644);
  posix_spawn_file_actions_addopen(&actions, 2, err_log.c_str(), O_WRONLY | O_CREAT | O_TRUNC,
                                   0644);
  posix_spawn_file_actions_addchdir_np(&actions, request.scratch_dir.c_str());

  std::vector<char*> argv;
  for (auto& a : inv.argv) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);

  std::vector<std::string> env_storage;
  for (char** e = environ; *e != nullptr; ++e) {
    std::string_view entry(*e);
    auto eq = entry.find('=');
    std::string key(entry.substr(0, eq == std::string_view::npos ? entry.size() : eq));
    if (inv.env.find(key) == inv.env.end()) env_storage.emplace_back(entry);
  }
  for (const auto& [k, v] : inv.env) env_storage.push_back(k + "=" + v);
  std::vector<char*> envp;
  for (auto& e : env_storage) envp.push_back(const_cast<char*>(e.c_str()));
  envp.push_back(nullptr);

  pid_t pid = 0;
  int rc = ::posix_spawn(&pid, image_path.c_str(), &actions, nullptr, argv.data(), envp.data());
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0)
    throw ExecError(ExecErrc::SpawnFailure,
                    "cannot spawn '" + image_path + "': " + std::strerror(rc));
  return std::make_unique<LocalHandle>(pid, request);
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

TransformLogic mock_script(std::vector<ScriptedBehavior> attempts) {
  return TransformLogic{ScriptedLogic{std::move(attempts)}};
}

namespace {

class MockHandle : public ProcessHandle {
 public:
  MockHandle(ExecutionRequest req, std::shared_ptr<std::atomic<std::uint64_t>> probe_failures)
      : req_(std::move(req)), probe_failures_(std::move(probe_failures)) {
    worker_ = std::thread([this] { run(); });
  }

  ~MockHandle() override {
    kill();
    if (worker_.joinable()) worker_.join();
  }

  Termination wait() override {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return result_.has_value(); });
    return *result_;
  }

  void kill() override {
    {
      std::lock_guard lk(mu_);
      kill_requested_ = true;
    }
    cv_.notify_all();
  }

 private:
  enum class Pause { Completed, Killed, ProbeFailed };

  void finish(TerminationKind kind, std::string reason = "") {
    {
      std::lock_guard lk(mu_);
      result_ = Termination{kind, std::move(reason)};
    }
    cv_.notify_all();
  }

  // Sleeps in small slices, watching for kill and re-probing every service
  // input. A service gets a short startup grace before its first accepted
  // connection; after that, a refused probe means this attempt observed a
  // dependency torn down too early, which the engine's collection rule
  // forbids, and the attempt fails loudly.
  Pause pause_with_probes(std::chrono::milliseconds total) {
    const auto deadline = std::chrono::steady_clock::now() + total;
    for (;;) {
      for (std::size_t i = 0; i < service_inputs_.size(); ++i) {
        if (endpoint_connectable(service_inputs_[i], std::chrono::milliseconds(250))) {
          input_alive_[i] = true;
          continue;
        }
        const bool grace_over =
            std::chrono::steady_clock::now() - attempt_start_ > std::chrono::seconds(2);
        if (input_alive_[i] || grace_over) {
          probe_failures_->fetch_add(1);
          return Pause::ProbeFailed;
        }
      }
      const auto now = std::chrono::steady_clock::now();
      if (now >= deadline) return Pause::Completed;
      const auto slice = std::min(std::chrono::milliseconds(10),
                                  std::chrono::duration_cast<std::chrono::milliseconds>(
                                      deadline - now));
      std::unique_lock lk(mu_);
      if (cv_.wait_for(lk, slice, [&] { return kill_requested_; })) return Pause::Killed;
    }
  }

  bool write_outputs(const ScriptedBehavior& b, std::string& error) {
    for (const auto& port : req_.outputs) {
      if (!port.resource.is_file()) continue;
      auto content = b.outputs.find(port.name);
      if (content == b.outputs.end()) continue;  // deliberately omitted
      auto dest_it = req_.destinations.find(port.name);
      if (dest_it == req_.destinations.end()) {
        error = "output '" + port.name + "' has no destination";
        return false;
      }
      const fs::path dest = dest_it->second;
      std::error_code ec;
      fs::create_directories(dest.parent_path(), ec);
      if (port.resource.file().directory) {
        fs::create_directories(dest, ec);
        std::ofstream(dest / "data", std::ios::binary) << content->second;
      } else {
        std::ofstream(dest, std::ios::binary) << content->second;
      }
    }
    return true;
  }

  void run() {
    const ScriptedLogic* script = req_.logic.scripted();
    if (script == nullptr || script->attempts.empty()) {
      finish(TerminationKind::Failed, "no scripted behavior for step '" + req_.step_label + "'");
      return;
    }
    const std::size_t idx =
        std::min(static_cast<std::size_t>(req_.attempt), script->attempts.size() - 1);
    const ScriptedBehavior b = script->attempts[idx];

    for (const auto& port : req_.inputs) {
      if (!port.resource.is_service()) continue;
      auto it = req_.resolved_inputs.find(port.name);
      if (it == req_.resolved_inputs.end()) {
        finish(TerminationKind::Failed, "service input '" + port.name + "' has no locator");
        return;
      }
      service_inputs_.push_back(it->second);
    }
    input_alive_.assign(service_inputs_.size(), false);
    attempt_start_ = std::chrono::steady_clock::now();

    switch (b.kind) {
      case ScriptedBehavior::Kind::Succeed: {
        switch (pause_with_probes(b.delay)) {
          case Pause::Killed: finish(TerminationKind::Killed); return;
          case Pause::ProbeFailed:
            finish(TerminationKind::Failed, "service input unreachable");
            return;
          case Pause::Completed: break;
        }
        std::string error;
        if (!write_outputs(b, error)) {
          finish(TerminationKind::Failed, error);
          return;
        }
        if (auto missing = verify_file_outputs(req_)) {
          finish(TerminationKind::Failed, *missing);
          return;
        }
        finish(TerminationKind::Succeeded);
        return;
      }
      case ScriptedBehavior::Kind::Fail: {
        switch (pause_with_probes(b.delay)) {
          case Pause::Killed: finish(TerminationKind::Killed); return;
          case Pause::ProbeFailed:
            finish(TerminationKind::Failed, "service input unreachable");
            return;
          case Pause::Completed: break;
        }
        finish(TerminationKind::Failed, "scripted failure");
        return;
      }
      case ScriptedBehavior::Kind::Serve: {
        switch (pause_with_probes(b.readiness_delay)) {
          case Pause::Killed: finish(TerminationKind::Killed); return;
          case Pause::ProbeFailed:
            finish(TerminationKind::Failed, "service input unreachable");
            return;
          case Pause::Completed: break;
        }
        std::vector<int> listeners;
        auto close_all = [&] {
          for (int fd : listeners) ::close(fd);
        };
        for (const auto& port : req_.outputs) {
          if (!port.resource.is_service()) continue;
          auto it = req_.destinations.find(port.name);
          std::string host;
          std::uint16_t p = 0;
          if (it == req_.destinations.end() || !parse_endpoint(it->second, host, p)) {
            close_all();
            finish(TerminationKind::Failed, "service output '" + port.name + "' unbound");
            return;
          }
          int fd = ::socket(AF_INET, SOCK_STREAM, 0);
          sockaddr_in addr{};
          addr.sin_family = AF_INET;
          addr.sin_port = htons(p);
          ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
          int one = 1;
          ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
          if (fd < 0 || ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
              ::listen(fd, 16) != 0) {
            if (fd >= 0) ::close(fd);
            close_all();
            finish(TerminationKind::Failed,
                   "cannot bind service endpoint " + it->second);
            return;
          }
          listeners.push_back(fd);
        }
        std::string error;
        if (!write_outputs(b, error)) {
          close_all();
          finish(TerminationKind::Failed, error);
          return;
        }
        // Serve until torn down; one hour stands in for "forever".
        switch (pause_with_probes(std::chrono::hours(1))) {
          case Pause::ProbeFailed:
            close_all();
            finish(TerminationKind::Failed, "service input unreachable");
            return;
          case Pause::Killed:
          case Pause::Completed:
            close_all();
            finish(TerminationKind::Killed);
            return;
        }
      }
    }
  }

  ExecutionRequest req_;
  std::shared_ptr<std::atomic<std::uint64_t>> probe_failures_;
  std::vector<std::string> service_inputs_;
  std::vector<bool> input_alive_;
  std::chrono::steady_clock::time_point attempt_start_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<Termination> result_;
  bool kill_requested_ = false;
};

}  // namespace

std::unique_ptr<ProcessHandle> MockBackend::execute(const ExecutionRequest& request) {
  {
    std::lock_guard lk(mu_);
    spawns_.push_back({request.step_label, request.attempt, std::chrono::steady_clock::now()});
  }
  return std::make_unique<MockHandle>(request, probe_failures_);
}

std::vector<SpawnRecord> MockBackend::spawn_log() const {
  std::lock_guard lk(mu_);
  return spawns_;
}

}  // namespace koji
