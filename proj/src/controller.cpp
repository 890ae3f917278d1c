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

#include "koji/controller.hpp"

#include <unistd.h>

#include <algorithm>
#include <condition_variable>
#include <fstream>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "koji/typecheck.hpp"

namespace koji {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string_view to_string(RunStatus status) {
  switch (status) {
    case RunStatus::Delivered: return "Delivered";
    case RunStatus::FailedExhausted: return "FailedExhausted";
    case RunStatus::Aborted: return "Aborted";
  }
  return "Unknown";
}

namespace {

void copy_tree_over(const fs::path& from, const fs::path& to) {
  switch (fs::symlink_status(from).type()) {
    case fs::file_type::regular:
      fs::copy_file(from, to, fs::copy_options::overwrite_existing);
      return;
    case fs::file_type::directory:
      fs::create_directory(to);
      for (const auto& e : fs::directory_iterator(from))
        copy_tree_over(e.path(), to / e.path().filename());
      return;
    default:
      throw HashError(HashErrc::UnsupportedEntry, from.string(),
                      "'" + from.string() + "' is not a regular file or directory");
  }
}

std::string unique_token() {
  static std::atomic<std::uint64_t> counter{0};
  std::mt19937_64 rng(std::random_device{}());
  std::ostringstream out;
  out << std::hex << rng() << "-" << counter.fetch_add(1);
  return out.str();
}

// Runs a nested pipeline as if it were a process: wait() resolves when the
// inner run concludes, kill() cancels it. On delivery, inner return
// payloads are moved onto the outer step's output destinations.
class SubpipelineHandle : public ProcessHandle {
 public:
  SubpipelineHandle(SubpipelineLogic logic, std::map<std::string, ArgumentBinding> arguments,
                    fs::path attempt_dir, OutputDestinations destinations, RunConfig config)
      : logic_(std::move(logic)),
        arguments_(std::move(arguments)),
        attempt_dir_(std::move(attempt_dir)),
        destinations_(std::move(destinations)),
        config_(std::move(config)) {
    cancel_ = std::make_shared<std::atomic<bool>>(false);
    config_.cancel = cancel_;
    config_.run_dir = attempt_dir_ / "run";
    worker_ = std::thread([this] { run_inner(); });
  }

  ~SubpipelineHandle() override {
    kill();
    if (worker_.joinable()) worker_.join();
  }

  Termination wait() override {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return result_.has_value(); });
    return *result_;
  }

  void kill() override { cancel_->store(true); }

  std::shared_ptr<RunReport> report() {
    std::lock_guard lk(mu_);
    return report_;
  }

 private:
  void finish(Termination t) {
    {
      std::lock_guard lk(mu_);
      result_ = std::move(t);
    }
    cv_.notify_all();
  }

  void run_inner() {
    try {
      RunReport inner =
          run(*logic_.pipeline, arguments_, attempt_dir_ / "returns", config_);
      {
        std::lock_guard lk(mu_);
        report_ = std::make_shared<RunReport>(inner);
      }
      switch (inner.status) {
        case RunStatus::Delivered: {
          for (const auto& [inner_ret, outer_out] : logic_.returns) {
            const fs::path src = attempt_dir_ / "returns" / inner_ret;
            const fs::path dst = destinations_.at(outer_out);
            std::error_code ec;
            fs::remove_all(dst, ec);
            fs::create_directories(dst.parent_path(), ec);
            fs::rename(src, dst, ec);
            if (ec) copy_tree_over(src, dst);
          }
          finish({TerminationKind::Succeeded, ""});
          return;
        }
        case RunStatus::FailedExhausted:
          finish({TerminationKind::Failed, "nested run failed: " + inner.error});
          return;
        case RunStatus::Aborted:
          finish({TerminationKind::Killed, ""});
          return;
      }
    } catch (const std::exception& e) {
      finish({TerminationKind::Failed, std::string("nested run error: ") + e.what()});
    }
  }

  SubpipelineLogic logic_;
  std::map<std::string, ArgumentBinding> arguments_;
  fs::path attempt_dir_;
  OutputDestinations destinations_;
  RunConfig config_;
  std::shared_ptr<std::atomic<bool>> cancel_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<Termination> result_;
  std::shared_ptr<RunReport> report_;
};

// ---------------------------------------------------------------------------
// RunEngine
//
// Shared state is a table of edge cells, each carrying two independent
// bits: `available`, written by the producer side, and `needed`, written by
// the consumer side. Every mutation happens under one mutex and signals one
// condition variable; drivers and collectors are pure waiters on predicates
// over the table. The orchestrator seeds demand at the return edges,
// supplies the argument edges, and tears everything down by clearing all
// demand once the run concludes.
// ---------------------------------------------------------------------------

struct EdgeCell {
  bool available = false;
  bool needed = false;
  bool cache_hit = false;
  std::string locator;
};

struct FileSlot {
  std::string name;
  bool directory = false;
  bool consumed = false;  // has at least one out-edge, hence a known hash
  CausalHash hash;
};

struct StepRt {
  std::string label;
  const Step* step = nullptr;
  std::vector<std::size_t> in_edges;
  std::vector<std::size_t> out_edges;
  std::vector<std::size_t> file_out;     // out-edge ids carrying files
  std::vector<std::size_t> service_out;  // out-edge ids carrying services
  std::vector<FileSlot> file_slots;      // declared file output ports
  std::vector<std::string> service_slots;
  bool has_service_ports = false;

  int spawns = 0;
  int failures = 0;
  bool running = false;
  std::uint64_t generation = 0;
  bool exhausted = false;
  std::shared_ptr<ProcessHandle> handle;
  StepRecord record;
};

class RunEngine {
 public:
  RunEngine(const DependencyGraph& graph, const EdgeHashes& hashes,
            const std::map<std::string, ArgumentBinding>& arguments, fs::path output_dir,
            const RunConfig& config, fs::path run_dir,
            std::chrono::steady_clock::time_point started)
      : graph_(graph),
        hashes_(hashes),
        arguments_(arguments),
        output_dir_(std::move(output_dir)),
        config_(config),
        run_dir_(std::move(run_dir)),
        started_(started) {}

  RunReport execute();

 private:
  enum class Acquire { Ok, Bail, Timeout };

  void driver_loop(StepRt& s);
  void collector_loop(StepRt& s);
  void attempt_cycle(StepRt& s, std::unique_lock<std::mutex>& lk);
  Acquire acquire_locks(const std::vector<CausalHash>& keys, std::vector<LockGuard>& out);
  void exhaust(StepRt& s, const std::string& reason);
  void record_attempt(StepRt& s, TerminationKind kind, std::string reason, double wall_ms,
                      std::shared_ptr<RunReport> sub = nullptr);
  void mark_output(StepRt& s, const std::string& slot, bool cache_hit);

  bool collectible(const StepRt& s) const {
    for (std::size_t ei : s.file_out) {
      const EdgeCell& c = cells_[ei];
      const bool done = (c.needed && c.available) || !c.needed;
      if (!done) return false;
    }
    for (std::size_t ei : s.service_out)
      if (cells_[ei].needed) return false;
    return true;
  }

  bool should_bail() {
    return draining_ || (config_.cancel && config_.cancel->load());
  }

  const DependencyGraph& graph_;
  const EdgeHashes& hashes_;
  const std::map<std::string, ArgumentBinding>& arguments_;
  fs::path output_dir_;
  const RunConfig& config_;
  fs::path run_dir_;
  std::chrono::steady_clock::time_point started_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<EdgeCell> cells_;
  std::map<std::string, StepRt> steps_;
  std::vector<std::size_t> return_edges_;
  bool draining_ = false;
  bool failed_ = false;
  std::string failed_step_;
  std::string failure_error_;
  int input_violations_ = 0;
  std::optional<std::chrono::steady_clock::time_point> first_spawn_;
  std::chrono::steady_clock::time_point hashing_done_;
};

void RunEngine::exhaust(StepRt& s, const std::string& reason) {
  s.exhausted = true;
  for (std::size_t ei : s.in_edges) cells_[ei].needed = false;
  if (!failed_) {
    failed_ = true;
    failed_step_ = s.label;
    failure_error_ =
        "step '" + s.label + "' exhausted " + std::to_string(s.failures) + " attempts; last: " +
        reason;
  }
  cv_.notify_all();
}

void RunEngine::record_attempt(StepRt& s, TerminationKind kind, std::string reason,
                               double wall_ms, std::shared_ptr<RunReport> sub) {
  s.record.attempts.push_back(
      {s.spawns - 1, kind, std::move(reason), wall_ms, std::move(sub)});
}

void RunEngine::mark_output(StepRt& s, const std::string& slot, bool cache_hit) {
  for (auto& o : s.record.outputs)
    if (o.name == slot) {
      o.cache_hit = cache_hit;
      return;
    }
}

RunEngine::Acquire RunEngine::acquire_locks(const std::vector<CausalHash>& keys,
                                            std::vector<LockGuard>& out) {
  LockProvider& provider = config_.cache->locks();
  const auto deadline = config_.lock_timeout
                            ? std::optional(std::chrono::steady_clock::now() + *config_.lock_timeout)
                            : std::nullopt;
  for (const CausalHash& key : keys) {
    for (;;) {
      {
        std::lock_guard lk(mu_);
        if (should_bail()) {
          out.clear();
          return Acquire::Bail;
        }
      }
      auto guard = provider.try_acquire(key, std::chrono::milliseconds(50));
      if (guard) {
        out.push_back(std::move(*guard));
        break;
      }
      if (deadline && std::chrono::steady_clock::now() >= *deadline) {
        out.clear();
        return Acquire::Timeout;
      }
    }
  }
  return Acquire::Ok;
}

void RunEngine::collector_loop(StepRt& s) {
  std::unique_lock lk(mu_);
  for (;;) {
    cv_.wait(lk, [&] {
      return (draining_ && !s.running) || (s.running && collectible(s));
    });
    if (!s.running) return;
    auto handle = s.handle;
    const std::uint64_t gen = s.generation;
    lk.unlock();
    handle->kill();
    lk.lock();
    cv_.wait(lk, [&] { return !s.running || s.generation != gen; });
  }
}

void RunEngine::driver_loop(StepRt& s) {
  std::unique_lock lk(mu_);
  for (;;) {
    cv_.wait(lk, [&] {
      if (draining_ || s.exhausted) return true;
      for (std::size_t ei : s.out_edges) {
        const EdgeCell& c = cells_[ei];
        if (c.needed && !c.available) return true;
      }
      return false;
    });
    if (draining_ || s.exhausted) return;
    attempt_cycle(s, lk);
  }
}

void RunEngine::attempt_cycle(StepRt& s, std::unique_lock<std::mutex>& lk) {
  const bool caching = config_.enable_cache && config_.cache != nullptr;
  const bool pure_file = !s.has_service_ports;
  const SubpipelineLogic* sub_logic = s.step->transform.logic.subpipeline();

  std::vector<CausalHash> lock_keys;
  for (const auto& slot : s.file_slots)
    if (slot.consumed) lock_keys.push_back(slot.hash);
  std::sort(lock_keys.begin(), lock_keys.end());
  lock_keys.erase(std::unique(lock_keys.begin(), lock_keys.end()), lock_keys.end());

  std::vector<LockGuard> locks;

  // Cache fast path: all consumed file outputs already published means the
  // process never has to start. Only sound when the step offers no
  // services, since a service exists only while its process runs.
  if (caching && pure_file && !lock_keys.empty()) {
    lk.unlock();
    Acquire a = acquire_locks(lock_keys, locks);
    lk.lock();
    if (a == Acquire::Bail) return;
    if (a == Acquire::Timeout) {
      s.spawns++;  // a lock timeout consumes an attempt
      s.failures++;
      record_attempt(s, TerminationKind::Failed,
                     "timed out waiting for the lock on " + lock_keys.front().hex(), 0);
      if (s.failures >= config_.max_attempts)
        exhaust(s, "timed out waiting for the lock on " + lock_keys.front().hex());
      return;
    }

    lk.unlock();
    bool all_hit = true;
    std::map<std::string, fs::path> hit_payloads;
    try {
      for (const auto& slot : s.file_slots) {
        if (!slot.consumed) continue;
        auto entry = config_.cache->lookup(slot.hash);
        if (!entry) {
          all_hit = false;
          break;
        }
        hit_payloads[slot.name] = entry->payload;
      }
    } catch (const CacheError&) {
      all_hit = false;  // corrupt entries are treated as misses; re-execution repairs
    }
    lk.lock();

    if (all_hit) {
      for (std::size_t ei : s.file_out) {
        EdgeCell& c = cells_[ei];
        c.available = true;
        c.cache_hit = true;
        c.locator = hit_payloads.at(graph_.edges()[ei].output).string();
      }
      for (const auto& slot : s.file_slots)
        if (slot.consumed) mark_output(s, slot.name, true);
      cv_.notify_all();
      return;  // locks release on scope exit, after the edges flipped
    }
    // Miss: hold the locks through execution so concurrent runs of the
    // same computation collapse to one. A nested pipeline is the exception:
    // its output keys are byte-identical to the inner return edge keys, so
    // holding them here would deadlock against the inner publisher. The
    // inner steps' own locks provide the collapsing; relock at publish.
    if (sub_logic != nullptr) locks.clear();
  }

  // Demand the inputs and wait for all of them.
  for (std::size_t ei : s.in_edges) cells_[ei].needed = true;
  cv_.notify_all();
  cv_.wait(lk, [&] {
    if (draining_) return true;
    return std::all_of(s.in_edges.begin(), s.in_edges.end(),
                       [&](std::size_t ei) { return cells_[ei].available; });
  });
  if (draining_) return;

  ResolvedInputs resolved;
  for (std::size_t ei : s.in_edges)
    resolved[graph_.edges()[ei].input] = cells_[ei].locator;

  const int attempt = s.spawns;
  const fs::path attempt_dir = run_dir_ / s.label / std::to_string(attempt);

  OutputDestinations destinations;
  lk.unlock();

  bool violation = false;
  for (const auto& port : s.step->transform.inputs) {
    if (!port.resource.is_file()) continue;
    auto it = resolved.find(port.name);
    if (it == resolved.end() || !fs::exists(it->second)) violation = true;
  }

  std::error_code ec;
  fs::create_directories(attempt_dir / "outputs", ec);
  for (const auto& slot : s.file_slots)
    destinations[slot.name] = (attempt_dir / "outputs" / slot.name).string();
  std::string spawn_error;
  try {
    for (const auto& name : s.service_slots) destinations[name] = reserve_loopback_endpoint();
  } catch (const ExecError& e) {
    spawn_error = e.what();
  }

  std::shared_ptr<ProcessHandle> handle;
  if (spawn_error.empty()) {
    try {
      if (sub_logic != nullptr) {
        std::map<std::string, ArgumentBinding> inner_args;
        {
          std::lock_guard relk(mu_);
          for (const auto& [inner_name, outer_slot] : sub_logic->arguments) {
            for (std::size_t ei : s.in_edges) {
              const Edge& e = graph_.edges()[ei];
              if (e.input == outer_slot) {
                inner_args[inner_name] = {cells_[ei].locator, hashes_.by_edge[ei]};
                break;
              }
            }
          }
        }
        handle = std::make_shared<SubpipelineHandle>(*sub_logic, std::move(inner_args),
                                                     attempt_dir, destinations, config_);
      } else {
        ExecutionRequest req;
        req.step_label = s.label;
        req.attempt = attempt;
        req.logic = s.step->transform.logic;
        req.inputs = s.step->transform.inputs;
        req.outputs = s.step->transform.outputs;
        req.resolved_inputs = resolved;
        req.destinations = destinations;
        req.scratch_dir = attempt_dir;
        req.kill_grace = config_.kill_grace;
        handle = config_.backend->execute(req);
      }
    } catch (const std::exception& e) {
      spawn_error = e.what();
    }
  }

  const auto attempt_start = std::chrono::steady_clock::now();
  lk.lock();
  if (violation) input_violations_++;
  if (!first_spawn_) first_spawn_ = attempt_start;
  s.spawns++;
  s.record.executions++;

  if (!spawn_error.empty()) {
    s.failures++;
    s.record.failures = s.failures;
    record_attempt(s, TerminationKind::Failed, spawn_error, 0);
    if (s.failures >= config_.max_attempts) {
      exhaust(s, spawn_error);
      return;
    }
    locks.clear();  // release before sleeping
    cv_.wait_for(lk, config_.retry_backoff * s.failures, [&] { return draining_; });
    return;
  }

  s.running = true;
  s.generation++;
  s.handle = handle;

  // A service exists the moment its process does. The optional readiness
  // probe delays exposure until the endpoint accepts connections.
  if (!s.service_out.empty()) {
    if (config_.readiness_probe) {
      lk.unlock();
      const auto deadline = std::chrono::steady_clock::now() + config_.readiness_timeout;
      bool ready = false;
      while (!ready && std::chrono::steady_clock::now() < deadline) {
        ready = true;
        for (const auto& name : s.service_slots)
          if (!endpoint_connectable(destinations[name], std::chrono::milliseconds(100)))
            ready = false;
        if (!ready) std::this_thread::sleep_for(std::chrono::milliseconds(20));
        std::lock_guard relk(mu_);
        if (should_bail()) break;
      }
      lk.lock();
    }
    for (std::size_t ei : s.service_out) {
      EdgeCell& c = cells_[ei];
      c.available = true;
      c.cache_hit = false;
      c.locator = destinations[graph_.edges()[ei].output];
    }
    for (const auto& name : s.service_slots) mark_output(s, name, false);
  }
  cv_.notify_all();

  lk.unlock();
  Termination t = handle->wait();
  const double wall_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - attempt_start)
                             .count();
  std::shared_ptr<RunReport> sub_report;
  if (auto* sp = dynamic_cast<SubpipelineHandle*>(handle.get())) sub_report = sp->report();
  lk.lock();

  s.running = false;
  s.handle.reset();
  cv_.notify_all();
  record_attempt(s, t.kind, t.reason, wall_ms, sub_report);

  switch (t.kind) {
    case TerminationKind::Succeeded: {
      // Publish file outputs, then flip their edges to Available. Steps
      // with service ports skipped the fast path, so they take their locks
      // here, only around the publish window.
      std::map<std::string, std::string> locators;
      if (caching && !lock_keys.empty()) {
        bool held_already = !locks.empty();
        if (!held_already) {
          lk.unlock();
          Acquire a = acquire_locks(lock_keys, locks);
          lk.lock();
          if (a != Acquire::Ok) locks.clear();
        }
      }
      lk.unlock();
      std::string publish_error;
      try {
        for (const auto& slot : s.file_slots) {
          const fs::path produced = attempt_dir / "outputs" / slot.name;
          if (!slot.consumed) continue;
          if (caching && !locks.empty()) {
            auto guard_it =
                std::find_if(locks.begin(), locks.end(),
                             [&](const LockGuard& g) { return g.key() == slot.hash; });
            if (guard_it == locks.end())
              throw CacheError(CacheErrc::NotHoldingLock,
                               "no lock held for slot '" + slot.name + "'");
            CacheEntry entry = config_.cache->publish(
                *guard_it, produced,
                slot.directory ? PayloadKind::Directory : PayloadKind::File);
            locators[slot.name] = entry.payload.string();
          } else {
            locators[slot.name] = produced.string();
          }
        }
      } catch (const std::exception& e) {
        publish_error = e.what();
      }
      lk.lock();

      if (!publish_error.empty()) {
        s.failures++;
        s.record.failures = s.failures;
        s.record.attempts.back().termination = TerminationKind::Failed;
        s.record.attempts.back().reason = "publish failed: " + publish_error;
        if (s.failures >= config_.max_attempts) {
          exhaust(s, publish_error);
          return;
        }
        locks.clear();
        cv_.wait_for(lk, config_.retry_backoff * s.failures, [&] { return draining_; });
        return;
      }

      for (std::size_t ei : s.file_out) {
        EdgeCell& c = cells_[ei];
        c.available = true;
        c.cache_hit = false;
        c.locator = locators.at(graph_.edges()[ei].output);
      }
      for (const auto& slot : s.file_slots)
        if (slot.consumed) mark_output(s, slot.name, false);
      for (std::size_t ei : s.service_out) cells_[ei].available = false;
      for (std::size_t ei : s.in_edges) cells_[ei].needed = false;
      cv_.notify_all();
      return;
    }
    case TerminationKind::Failed: {
      for (std::size_t ei : s.service_out) cells_[ei].available = false;
      s.failures++;
      s.record.failures = s.failures;
      cv_.notify_all();
      if (s.failures >= config_.max_attempts) {
        exhaust(s, t.reason);
        return;
      }
      locks.clear();
      cv_.wait_for(lk, config_.retry_backoff * s.failures, [&] { return draining_; });
      return;
    }
    case TerminationKind::Killed: {
      for (std::size_t ei : s.service_out) cells_[ei].available = false;
      for (std::size_t ei : s.in_edges) cells_[ei].needed = false;
      cv_.notify_all();
      return;
    }
  }
}

RunReport RunEngine::execute() {
  hashing_done_ = std::chrono::steady_clock::now();

  const auto& edges = graph_.edges();
  cells_.resize(edges.size());

  const std::vector<std::string> order = topo_order(graph_);
  for (const std::string& label : order) {
    const Step& step = graph_.step(label);
    if (!DependencyGraph::is_intermediate(step)) continue;
    StepRt rt;
    rt.label = label;
    rt.step = &step;
    rt.in_edges = graph_.in_edges(label);
    rt.out_edges = graph_.out_edges(label);
    for (std::size_t ei : rt.out_edges) {
      if (edges[ei].resource.is_file())
        rt.file_out.push_back(ei);
      else
        rt.service_out.push_back(ei);
    }
    for (const auto& port : step.transform.outputs) {
      if (port.resource.is_service()) {
        rt.has_service_ports = true;
        rt.service_slots.push_back(port.name);
        continue;
      }
      FileSlot slot;
      slot.name = port.name;
      slot.directory = port.resource.file().directory;
      for (std::size_t ei : rt.out_edges) {
        if (edges[ei].output == port.name) {
          slot.consumed = true;
          slot.hash = hashes_.by_edge[ei];
          break;
        }
      }
      rt.file_slots.push_back(slot);
    }
    rt.record.label = label;
    for (const auto& slot : rt.file_slots)
      if (slot.consumed) rt.record.outputs.push_back({slot.name, slot.hash, false});
    for (std::size_t ei : rt.service_out) {
      const Edge& e = edges[ei];
      bool present = std::any_of(rt.record.outputs.begin(), rt.record.outputs.end(),
                                 [&](const OutputRecord& o) { return o.name == e.output; });
      if (!present) rt.record.outputs.push_back({e.output, hashes_.by_edge[ei], false});
    }
    steps_.emplace(label, std::move(rt));
  }

  // Argument edges are available from the start; return edges are the
  // demand that pulls the whole graph.
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const Step& provider = graph_.step(edges[i].provider);
    if (DependencyGraph::is_argument(provider)) {
      const auto* arg = provider.transform.logic.argument();
      cells_[i].available = true;
      cells_[i].locator = arguments_.at(arg->name).locator;
    }
    const Step& consumer = graph_.step(edges[i].consumer);
    if (DependencyGraph::is_return(consumer)) {
      cells_[i].needed = true;
      return_edges_.push_back(i);
    }
  }

  std::vector<std::thread> threads;
  threads.reserve(steps_.size() * 2);
  for (auto& [label, rt] : steps_) {
    StepRt* s = &rt;
    threads.emplace_back([this, s] {
      try {
        driver_loop(*s);
      } catch (const std::exception& e) {
        std::lock_guard lk(mu_);
        if (!s->exhausted) exhaust(*s, std::string("driver error: ") + e.what());
      }
    });
    threads.emplace_back([this, s] { collector_loop(*s); });
  }

  RunStatus status;
  {
    std::unique_lock lk(mu_);
    for (;;) {
      const bool delivered =
          std::all_of(return_edges_.begin(), return_edges_.end(),
                      [&](std::size_t ei) { return cells_[ei].available; });
      if (delivered) {
        status = RunStatus::Delivered;
        break;
      }
      if (failed_) {
        status = RunStatus::FailedExhausted;
        break;
      }
      if (config_.cancel && config_.cancel->load()) {
        status = RunStatus::Aborted;
        break;
      }
      cv_.wait_for(lk, std::chrono::milliseconds(25));
    }
  }

  // Deliver before teardown: services named by return edges must still be
  // alive when their endpoints are recorded.
  std::vector<ReturnRecord> returns;
  if (status == RunStatus::Delivered) {
    std::vector<std::tuple<std::string, std::string, CausalHash, bool>> to_deliver;
    {
      std::lock_guard lk(mu_);
      for (std::size_t ei : return_edges_) {
        const Edge& e = graph_.edges()[ei];
        const auto* ret = graph_.step(e.consumer).transform.logic.ret();
        to_deliver.emplace_back(ret->name, cells_[ei].locator, hashes_.by_edge[ei],
                                e.resource.is_service());
      }
    }
    fs::create_directories(output_dir_);
    for (const auto& [name, locator, hash, is_service] : to_deliver) {
      ReturnRecord r;
      r.name = name;
      r.hash = hash;
      if (is_service) {
        const fs::path dst = output_dir_ / (name + ".endpoint");
        std::ofstream(dst, std::ios::binary) << locator << "\n";
        r.location = dst.string();
      } else {
        const fs::path dst = output_dir_ / name;
        fs::remove_all(dst);
        copy_tree_over(locator, dst);
        r.location = dst.string();
      }
      returns.push_back(std::move(r));
    }
  }

  {
    std::lock_guard lk(mu_);
    draining_ = true;
    for (auto& c : cells_) c.needed = false;
  }
  cv_.notify_all();
  for (auto& t : threads) t.join();

  RunReport report;
  report.status = status;
  report.failed_step = failed_step_;
  report.error = status == RunStatus::FailedExhausted ? failure_error_ : "";
  if (status == RunStatus::Aborted) report.error = "aborted";
  for (const std::string& label : order) {
    auto it = steps_.find(label);
    if (it != steps_.end()) report.steps.push_back(it->second.record);
  }
  report.returns = std::move(returns);
  report.run_dir = run_dir_;
  report.hashed_before_first_spawn = !first_spawn_ || hashing_done_ <= *first_spawn_;
  report.input_violations = input_violations_;
  report.total_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started_)
          .count();
  return report;
}

}  // namespace

int total_executions(const RunReport& report) {
  int total = 0;
  for (const auto& s : report.steps) {
    for (const auto& a : s.attempts) {
      if (a.subpipeline)
        total += total_executions(*a.subpipeline);
      else
        total += 1;
    }
  }
  return total;
}

namespace {

std::string_view status_key(RunStatus status) {
  switch (status) {
    case RunStatus::Delivered: return "delivered";
    case RunStatus::FailedExhausted: return "failed_exhausted";
    case RunStatus::Aborted: return "aborted";
  }
  return "unknown";
}

ojson report_json(const RunReport& r) {
  ojson j;
  j["status"] = std::string(status_key(r.status));
  if (!r.failed_step.empty()) j["failed_step"] = r.failed_step;
  if (!r.error.empty()) j["error"] = r.error;
  j["run_dir"] = r.run_dir.string();
  j["hashing_ms"] = r.hashing_ms;
  j["total_ms"] = r.total_ms;
  j["hashed_before_first_spawn"] = r.hashed_before_first_spawn;
  j["input_violations"] = r.input_violations;
  j["total_executions"] = total_executions(r);
  j["steps"] = ojson::array();
  for (const auto& s : r.steps) {
    ojson js;
    js["label"] = s.label;
    js["executions"] = s.executions;
    js["failures"] = s.failures;
    js["attempts"] = ojson::array();
    for (const auto& a : s.attempts) {
      ojson ja;
      ja["index"] = a.index;
      ja["termination"] = std::string(to_string(a.termination));
      if (!a.reason.empty()) ja["reason"] = a.reason;
      ja["wall_ms"] = a.wall_ms;
      if (a.subpipeline) ja["subpipeline"] = report_json(*a.subpipeline);
      js["attempts"].push_back(std::move(ja));
    }
    js["outputs"] = ojson::array();
    for (const auto& o : s.outputs) {
      ojson jo;
      jo["name"] = o.name;
      jo["hash"] = o.hash.hex();
      jo["cache_hit"] = o.cache_hit;
      js["outputs"].push_back(std::move(jo));
    }
    j["steps"].push_back(std::move(js));
  }
  j["returns"] = ojson::array();
  for (const auto& ret : r.returns) {
    ojson jr;
    jr["name"] = ret.name;
    jr["location"] = ret.location;
    jr["hash"] = ret.hash.hex();
    j["returns"].push_back(std::move(jr));
  }
  return j;
}

}  // namespace

std::string report_to_json(const RunReport& report) { return report_json(report).dump(2); }

RunReport run(const Pipeline& pipeline, const std::map<std::string, ArgumentBinding>& arguments,
              const std::filesystem::path& output_dir, const RunConfig& config) {
  const auto started = std::chrono::steady_clock::now();

  if (config.backend == nullptr)
    throw RunSetupError(RunErrc::BindingError, "no executor backend configured");

  std::vector<Diagnostic> diags = validate_document(pipeline);
  if (has_errors(diags)) {
    std::vector<std::string> details;
    for (const auto& d : diags)
      if (d.severity == Severity::Error) details.push_back(describe(d));
    throw RunSetupError(RunErrc::ValidationFailed, "pipeline failed validation",
                        std::move(details));
  }

  BuildResult built = build_graph(pipeline);
  const DependencyGraph& graph = *built.graph;

  std::vector<TypeDiagnostic> type_diags = check_pipeline(graph);
  if (!type_diags.empty()) {
    std::vector<std::string> details;
    for (const auto& d : type_diags) details.push_back(describe(d));
    throw RunSetupError(RunErrc::TypeCheckFailed, "pipeline failed type checking",
                        std::move(details));
  }

  // Bindings must cover the argument set exactly; file arguments must exist.
  std::map<std::string, ArgumentBinding> bound;
  std::set<std::string> declared;
  for (const Step& s : pipeline.steps) {
    const auto* arg = s.transform.logic.argument();
    if (arg == nullptr) continue;
    declared.insert(arg->name);
    auto it = arguments.find(arg->name);
    if (it == arguments.end())
      throw RunSetupError(RunErrc::BindingError, "no binding for argument '" + arg->name + "'");
    ArgumentBinding b = it->second;
    if (arg->resource.is_file()) {
      fs::path p = fs::absolute(b.locator);
      if (!fs::exists(p))
        throw RunSetupError(RunErrc::BindingError,
                            "argument '" + arg->name + "' path does not exist: " + p.string());
      b.locator = p.string();
    }
    bound.emplace(arg->name, std::move(b));
  }
  for (const auto& [name, binding] : arguments) {
    (void)binding;
    if (declared.find(name) == declared.end())
      throw RunSetupError(RunErrc::BindingError, "no pipeline argument named '" + name + "'");
  }

  std::map<std::string, CausalHash> arg_hashes;
  for (const auto& [name, binding] : bound) arg_hashes[name] = binding.hash;

  const auto hash_start = std::chrono::steady_clock::now();
  EdgeHashes hashes = hash_pipeline(graph, arg_hashes);
  const double hashing_ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - hash_start)
                                .count();

  fs::path run_dir = config.run_dir;
  if (run_dir.empty())
    run_dir = fs::temp_directory_path() /
              ("koji-run-" + std::to_string(::getpid()) + "-" + unique_token());
  fs::create_directories(run_dir);

  RunEngine engine(graph, hashes, bound, output_dir, config, run_dir, started);
  RunReport report = engine.execute();
  report.hashing_ms = hashing_ms;

  std::ofstream(run_dir / "report", std::ios::binary) << report_to_json(report) << "\n";
  return report;
}

}  // namespace koji
