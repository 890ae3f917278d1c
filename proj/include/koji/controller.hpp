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
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "koji/cache.hpp"
#include "koji/executor.hpp"
#include "koji/hash.hpp"
#include "koji/model.hpp"

namespace koji {

// One caller-supplied pipeline argument: where the resource is (a path or
// an endpoint) and what its content hash is.
struct ArgumentBinding {
  std::string locator;
  CausalHash hash;
};

struct RunConfig {
  int max_attempts = 3;
  bool enable_cache = true;
  bool readiness_probe = false;  // wait for service endpoints to accept before exposing them
  std::chrono::milliseconds readiness_timeout{10000};
  std::optional<std::chrono::milliseconds> lock_timeout;  // nullopt: wait indefinitely
  std::chrono::milliseconds kill_grace{5000};
  std::chrono::milliseconds retry_backoff{1000};  // linear: backoff * failure count
  std::filesystem::path run_dir;                  // empty: a fresh temp directory
  std::shared_ptr<CacheStore> cache;              // null disables caching entirely
  std::shared_ptr<ExecutorBackend> backend;       // required
  std::shared_ptr<std::atomic<bool>> cancel;      // optional; set to abort the run
};

enum class RunStatus { Delivered, FailedExhausted, Aborted };

std::string_view to_string(RunStatus status);

struct RunReport;

struct AttemptRecord {
  int index = 0;
  TerminationKind termination = TerminationKind::Failed;
  std::string reason;
  double wall_ms = 0;
  std::shared_ptr<RunReport> subpipeline;  // set for subpipeline attempts
};

struct OutputRecord {
  std::string name;
  CausalHash hash;
  bool cache_hit = false;
};

struct StepRecord {
  std::string label;
  int executions = 0;  // spawned attempts, cache hits excluded
  int failures = 0;
  std::vector<AttemptRecord> attempts;
  std::vector<OutputRecord> outputs;
};

struct ReturnRecord {
  std::string name;
  std::string location;
  CausalHash hash;
};

struct RunReport {
  RunStatus status = RunStatus::Delivered;
  std::string failed_step;  // set for FailedExhausted
  std::string error;
  std::vector<StepRecord> steps;  // intermediate steps in topological order
  std::vector<ReturnRecord> returns;
  std::filesystem::path run_dir;
  double hashing_ms = 0;
  double total_ms = 0;
  // Every edge hash existed before the first process spawned; recorded so
  // tests can assert the ordering rather than trust it.
  bool hashed_before_first_spawn = true;
  // Attempts that started while a file input was missing on disk. Always
  // zero unless the engine's ordering rules are broken.
  int input_violations = 0;
};

// Total process executions including nested subpipeline runs.
int total_executions(const RunReport& report);

std::string report_to_json(const RunReport& report);

enum class RunErrc { ValidationFailed, TypeCheckFailed, BindingError };

class RunSetupError : public std::runtime_error {
 public:
  RunSetupError(RunErrc code, const std::string& message, std::vector<std::string> details = {})
      : std::runtime_error(message), code(code), details(std::move(details)) {}

  RunErrc code;
  std::vector<std::string> details;
};

// Executes the pipeline to delivery.
//
// The run hashes every edge up front, then starts one supervisor (a driver
// and a collector thread) per intermediate step. Drivers demand their
// inputs, consult the cache under per-key locks, spawn attempts, publish
// file outputs, and retry failures up to max_attempts with linear backoff.
// Collectors kill a step's process as soon as every file output edge is
// collected-or-unneeded and no service output edge is needed. Delivered
// return payloads are copied into `output_dir` under their return names
// (a service return yields "<name>.endpoint" containing the endpoint).
// A report is also written to "<run_dir>/report".
RunReport run(const Pipeline& pipeline,
              const std::map<std::string, ArgumentBinding>& arguments,
              const std::filesystem::path& output_dir, const RunConfig& config);

}  // namespace koji
