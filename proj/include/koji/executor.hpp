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

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "koji/model.hpp"

namespace koji {

// How an attempt ended. Succeeded and Failed reflect the process's own
// outcome; Killed means the engine tore it down, which is the normal end of
// a service and carries no blame.
enum class TerminationKind { Succeeded, Failed, Killed };

std::string_view to_string(TerminationKind kind);

struct Termination {
  TerminationKind kind = TerminationKind::Failed;
  std::string reason;  // set for Failed
};

// Locators: absolute filesystem paths for file resources, "host:port"
// endpoints for services.
using ResolvedInputs = std::map<std::string, std::string>;
using OutputDestinations = std::map<std::string, std::string>;

struct ExecutionRequest {
  std::string step_label;
  int attempt = 0;  // zero-based spawn count for this step
  TransformLogic logic;
  std::vector<TransformPort> inputs;   // declared transform ports
  std::vector<TransformPort> outputs;
  ResolvedInputs resolved_inputs;        // one locator per declared input
  OutputDestinations destinations;       // one destination per declared output
  std::filesystem::path scratch_dir;     // working dir; stdout.log/stderr.log land here
  std::chrono::milliseconds kill_grace{5000};
};

// A running attempt. wait() blocks until termination and is idempotent;
// kill() asks for teardown (graceful, then forced after the grace period)
// and may be called from any thread, including after termination.
class ProcessHandle {
 public:
  virtual ~ProcessHandle() = default;

  virtual Termination wait() = 0;
  virtual void kill() = 0;
};

enum class ExecErrc {
  ImageNotFound,
  SpawnFailure,
  PortUnavailable,
  UnboundName,
};

std::string_view to_string(ExecErrc code);

class ExecError : public std::runtime_error {
 public:
  ExecError(ExecErrc code, const std::string& message)
      : std::runtime_error(message), code(code) {}

  ExecErrc code;
};

class ExecutorBackend {
 public:
  virtual ~ExecutorBackend() = default;

  // Starts one attempt. Throws ExecError when the attempt cannot even
  // begin; failures after a successful spawn surface through wait().
  virtual std::unique_ptr<ProcessHandle> execute(const ExecutionRequest& request) = 0;
};

struct Invocation {
  std::vector<std::string> argv;  // argv[0] is the image
  std::map<std::string, std::string> env;
};

// Renders a container command line: "--<flag>=<locator>" per bound port (a
// port whose flag is the empty string contributes the bare locator as a
// positional argument), then "--<name>=<value>" per static flag ("--<name>"
// when the value is unset). Ports bound to env vars contribute to env
// instead. Ordering follows the declaration order of each list. A port
// naming an unresolved input or output raises UnboundName.
Invocation build_invocation(const ContainerLogic& logic, const ResolvedInputs& inputs,
                            const OutputDestinations& outputs);

// Runs container logic as ordinary local processes: image resolved on PATH,
// stdout/stderr captured to log files, SIGTERM then SIGKILL on kill().
class LocalProcessBackend : public ExecutorBackend {
 public:
  std::unique_ptr<ProcessHandle> execute(const ExecutionRequest& request) override;
};

// Convenience constructor for scripted transforms.
TransformLogic mock_script(std::vector<ScriptedBehavior> attempts);

struct SpawnRecord {
  std::string step_label;
  int attempt = 0;
  std::chrono::steady_clock::time_point at;
};

// Deterministic in-process backend executing ScriptedLogic on threads.
// Service behaviors bind a real loopback listener so consumers can probe
// liveness. Every attempt continuously verifies that its service inputs
// stay connectable; a refused probe fails the attempt and increments
// probe_failures(), making "a process only runs while its service inputs
// exist" a checkable property.
class MockBackend : public ExecutorBackend {
 public:
  std::unique_ptr<ProcessHandle> execute(const ExecutionRequest& request) override;

  std::vector<SpawnRecord> spawn_log() const;
  std::uint64_t probe_failures() const { return probe_failures_->load(); }

 private:
  mutable std::mutex mu_;
  std::vector<SpawnRecord> spawns_;
  std::shared_ptr<std::atomic<std::uint64_t>> probe_failures_ =
      std::make_shared<std::atomic<std::uint64_t>>(0);
};

// Reserves a free loopback port and returns "127.0.0.1:<port>". The port is
// closed again before returning, so a raced port surfaces later as a bind
// failure of the attempt, not as a crash.
std::string reserve_loopback_endpoint();

// True when a TCP connection to "host:port" succeeds within the timeout.
bool endpoint_connectable(const std::string& endpoint, std::chrono::milliseconds timeout);

}  // namespace koji
