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

// koji command line. Exit codes:
//   0  success / pipeline delivered
//   1  structural validation errors (including syntax)
//   2  type errors
//   3  argument binding or run setup errors
//   4  run failed after exhausting retries
//   5  run aborted (SIGINT or cancellation)
//   64 usage errors, unreadable files

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "koji/cache.hpp"
#include "koji/controller.hpp"
#include "koji/doc.hpp"
#include "koji/executor.hpp"
#include "koji/hash.hpp"
#include "koji/model.hpp"
#include "koji/typecheck.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitType = 2;
constexpr int kExitBinding = 3;
constexpr int kExitRunFailed = 4;
constexpr int kExitAborted = 5;
constexpr int kExitUsage = 64;

std::shared_ptr<std::atomic<bool>> g_cancel;

void handle_sigint(int) {
  if (g_cancel) g_cancel->store(true);
  std::signal(SIGINT, SIG_DFL);  // second ^C kills outright
}

std::optional<std::string> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) return std::nullopt;
  return buf.str();
}

koji::DocFormat format_from_flag(const std::string& flag) {
  if (flag == "yaml") return koji::DocFormat::Yaml;
  if (flag == "json") return koji::DocFormat::Json;
  return koji::DocFormat::Auto;
}

void print_diags(const std::vector<koji::Diagnostic>& diags) {
  for (const auto& d : diags) std::cerr << koji::describe(d) << "\n";
}

// Parses, structurally validates, and type checks a document. On success
// `graph` is set; otherwise the exit code to use is returned in `rc`.
struct LoadedPipeline {
  std::optional<koji::DependencyGraph> graph;
  int rc = kExitOk;
};

LoadedPipeline load_pipeline(const std::string& path, const std::string& format_flag,
                             bool lenient, const std::string& mock_script_path) {
  LoadedPipeline out;
  auto text = read_file(path);
  if (!text) {
    std::cerr << "error: cannot read '" << path << "'\n";
    out.rc = kExitUsage;
    return out;
  }
  auto parsed = koji::parse_document(*text, format_from_flag(format_flag), lenient, path);
  print_diags(parsed.diagnostics);
  if (!parsed.ok()) {
    out.rc = kExitValidation;
    return out;
  }
  koji::Pipeline pipeline = std::move(*parsed.pipeline);

  if (!mock_script_path.empty()) {
    auto script_text = read_file(mock_script_path);
    if (!script_text) {
      std::cerr << "error: cannot read '" << mock_script_path << "'\n";
      out.rc = kExitUsage;
      return out;
    }
    auto scripts = koji::parse_mock_scripts(*script_text, koji::DocFormat::Auto,
                                            mock_script_path);
    print_diags(scripts.diagnostics);
    if (!scripts.ok()) {
      out.rc = kExitValidation;
      return out;
    }
    // Warn about script labels that match no step anywhere in the tree.
    std::set<std::string> labels;
    auto collect = [&](auto&& self, const koji::Pipeline& p) -> void {
      for (const auto& s : p.steps) {
        labels.insert(s.label);
        if (const auto* sub = s.transform.logic.subpipeline())
          if (sub->pipeline) self(self, *sub->pipeline);
      }
    };
    collect(collect, pipeline);
    for (const auto& [label, script] : scripts.scripts) {
      (void)script;
      if (!labels.count(label))
        std::cerr << "warning: mock script for unknown step '" << label << "' ignored\n";
    }
    pipeline = koji::apply_mock_scripts(pipeline, scripts.scripts);
  }

  auto diags = koji::validate_document(pipeline);
  print_diags(diags);
  if (koji::has_errors(diags)) {
    out.rc = kExitValidation;
    return out;
  }
  auto built = koji::build_graph(pipeline);
  if (!built.ok()) {  // unreachable once validate passed; belt and braces
    print_diags(built.errors);
    out.rc = kExitValidation;
    return out;
  }
  auto type_errors = koji::check_pipeline(*built.graph);
  for (const auto& e : type_errors) std::cerr << koji::describe(e) << "\n";
  if (!type_errors.empty()) {
    out.rc = kExitType;
    return out;
  }
  out.graph = std::move(*built.graph);
  return out;
}

// The declared resources of the pipeline's argument steps, by argument name.
std::map<std::string, koji::Resource> argument_resources(const koji::Pipeline& pipeline) {
  std::map<std::string, koji::Resource> out;
  for (const auto& s : pipeline.steps)
    if (const auto* a = s.transform.logic.argument()) out.emplace(a->name, a->resource);
  return out;
}

// Resolves --arg specs to hashed bindings. File arguments without an
// explicit hash are hashed from disk; service arguments must carry one.
int resolve_arguments(const std::vector<std::string>& specs, const koji::Pipeline& pipeline,
                      std::map<std::string, koji::ArgumentBinding>& bindings) {
  auto declared = argument_resources(pipeline);
  for (const auto& raw : specs) {
    std::string error;
    auto spec = koji::parse_argument_spec(raw, error);
    if (!spec) {
      std::cerr << "error: " << error << "\n";
      return kExitBinding;
    }
    auto it = declared.find(spec->name);
    if (it == declared.end()) {
      std::cerr << "error: pipeline declares no argument named '" << spec->name << "'\n";
      return kExitBinding;
    }
    koji::ArgumentBinding binding;
    binding.locator = spec->locator;
    if (spec->hash) {
      binding.hash = *spec->hash;
    } else if (it->second.is_service()) {
      std::cerr << "error: service argument '" << spec->name
                << "' needs an explicit hash (NAME=endpoint:hash)\n";
      return kExitBinding;
    } else {
      std::error_code ec;
      auto abs = std::filesystem::absolute(spec->locator, ec);
      if (ec || !std::filesystem::exists(abs)) {
        std::cerr << "error: argument '" << spec->name << "': no such file or directory: "
                  << spec->locator << "\n";
        return kExitBinding;
      }
      try {
        binding.hash = koji::content_hash_path(abs);
      } catch (const koji::HashError& e) {
        std::cerr << "error: argument '" << spec->name << "': " << e.what() << "\n";
        return kExitBinding;
      }
      binding.locator = abs.string();
    }
    if (!bindings.emplace(spec->name, std::move(binding)).second) {
      std::cerr << "error: argument '" << spec->name << "' bound twice\n";
      return kExitBinding;
    }
  }
  for (const auto& [name, resource] : declared) {
    (void)resource;
    if (!bindings.count(name)) {
      std::cerr << "error: no binding for argument '" << name << "'\n";
      return kExitBinding;
    }
  }
  return kExitOk;
}

int cmd_validate(const std::string& doc, const std::string& format, bool lenient) {
  auto loaded = load_pipeline(doc, format, lenient, "");
  if (loaded.rc != kExitOk) return loaded.rc;
  std::cout << "ok: " << loaded.graph->pipeline().steps.size() << " steps, "
            << loaded.graph->edges().size() << " edges\n";
  return kExitOk;
}

int cmd_hash(const std::string& doc, const std::string& format,
             const std::vector<std::string>& args, bool trace) {
  auto loaded = load_pipeline(doc, format, false, "");
  if (loaded.rc != kExitOk) return loaded.rc;
  const auto& graph = *loaded.graph;

  std::map<std::string, koji::ArgumentBinding> bindings;
  if (int rc = resolve_arguments(args, graph.pipeline(), bindings); rc != kExitOk) return rc;
  std::map<std::string, koji::CausalHash> hashes;
  for (const auto& [name, b] : bindings) hashes.emplace(name, b.hash);

  koji::EdgeHashes edges;
  try {
    edges = koji::hash_pipeline(graph, hashes);
  } catch (const koji::HashError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBinding;
  }
  if (trace) {
    for (const auto& t : edges.trace)
      std::cout << t.scope << t.provider << "." << t.output << " -> " << t.scope << t.consumer
                << "." << t.input << "  " << t.hash.hex() << "  (" << t.preimage_bytes
                << " preimage bytes)\n";
    return kExitOk;
  }
  for (std::size_t ei : koji::canonical_edge_order(graph)) {
    const auto& e = graph.edges()[ei];
    std::cout << e.provider << "." << e.output << " -> " << e.consumer << "." << e.input
              << "  " << edges.at(ei).hex() << "\n";
  }
  return kExitOk;
}

int cmd_graph(const std::string& doc, const std::string& format, const std::string& out_path) {
  auto loaded = load_pipeline(doc, format, false, "");
  if (loaded.rc != kExitOk) return loaded.rc;
  std::string dot = koji::render_dot(*loaded.graph);
  if (out_path.empty()) {
    std::cout << dot;
    return kExitOk;
  }
  std::ofstream out(out_path, std::ios::binary);
  out << dot;
  if (!out) {
    std::cerr << "error: cannot write '" << out_path << "'\n";
    return kExitUsage;
  }
  return kExitOk;
}

struct RunOptions {
  std::string doc;
  std::string format = "auto";
  std::vector<std::string> args;
  std::string out_dir;
  std::string cache_dir;
  bool no_cache = false;
  std::string backend = "local";
  std::string mock_script;
  std::string run_dir;
  int max_attempts = 3;
  bool readiness_probe = false;
  long lock_timeout_ms = -1;
  long retry_backoff_ms = 1000;
  long kill_grace_ms = 5000;
  bool json = false;
  bool quiet = false;
};

void print_run_summary(const koji::RunReport& report) {
  std::cout << "status: " << koji::to_string(report.status) << "\n";
  if (report.status != koji::RunStatus::Delivered) {
    if (!report.failed_step.empty()) std::cout << "failed step: " << report.failed_step << "\n";
    if (!report.error.empty()) std::cout << "error: " << report.error << "\n";
  }
  for (const auto& s : report.steps) {
    int hits = 0;
    for (const auto& o : s.outputs) hits += o.cache_hit ? 1 : 0;
    std::cout << "step " << s.label << ": executions=" << s.executions
              << " failures=" << s.failures;
    if (hits > 0) std::cout << " cache_hits=" << hits;
    std::cout << "\n";
  }
  for (const auto& r : report.returns)
    std::cout << "return " << r.name << ": " << r.location << "  " << r.hash.hex() << "\n";
  std::cout << "total executions: " << koji::total_executions(report) << "\n";
  std::cout << "run dir: " << report.run_dir.string() << "\n";
}

int cmd_run(const RunOptions& opt) {
  auto loaded = load_pipeline(opt.doc, opt.format, false, opt.mock_script);
  if (loaded.rc != kExitOk) return loaded.rc;
  const auto& graph = *loaded.graph;

  std::map<std::string, koji::ArgumentBinding> bindings;
  if (int rc = resolve_arguments(opt.args, graph.pipeline(), bindings); rc != kExitOk)
    return rc;

  koji::RunConfig config;
  config.max_attempts = opt.max_attempts;
  config.readiness_probe = opt.readiness_probe;
  if (opt.lock_timeout_ms >= 0)
    config.lock_timeout = std::chrono::milliseconds(opt.lock_timeout_ms);
  config.retry_backoff = std::chrono::milliseconds(opt.retry_backoff_ms);
  config.kill_grace = std::chrono::milliseconds(opt.kill_grace_ms);
  if (!opt.run_dir.empty()) config.run_dir = opt.run_dir;

  if (!opt.no_cache && !opt.cache_dir.empty()) {
    try {
      config.cache = std::make_shared<koji::CacheStore>(opt.cache_dir);
    } catch (const koji::CacheError& e) {
      std::cerr << "error: cache store: " << e.what() << "\n";
      return kExitBinding;
    }
  }
  config.enable_cache = config.cache != nullptr;

  std::shared_ptr<koji::MockBackend> mock;
  if (opt.backend == "mock") {
    mock = std::make_shared<koji::MockBackend>();
    config.backend = mock;
  } else {
    config.backend = std::make_shared<koji::LocalProcessBackend>();
  }

  g_cancel = std::make_shared<std::atomic<bool>>(false);
  config.cancel = g_cancel;
  std::signal(SIGINT, handle_sigint);

  koji::RunReport report;
  try {
    report = koji::run(graph.pipeline(), bindings, opt.out_dir, config);
  } catch (const koji::RunSetupError& e) {
    std::cerr << "error: " << e.what() << "\n";
    for (const auto& d : e.details) std::cerr << "  " << d << "\n";
    switch (e.code) {
      case koji::RunErrc::ValidationFailed:
        return kExitValidation;
      case koji::RunErrc::TypeCheckFailed:
        return kExitType;
      case koji::RunErrc::BindingError:
        return kExitBinding;
    }
    return kExitBinding;
  }
  std::signal(SIGINT, SIG_DFL);

  if (opt.json)
    std::cout << koji::report_to_json(report) << "\n";
  else if (!opt.quiet)
    print_run_summary(report);

  switch (report.status) {
    case koji::RunStatus::Delivered:
      return kExitOk;
    case koji::RunStatus::FailedExhausted:
      return kExitRunFailed;
    case koji::RunStatus::Aborted:
      return kExitAborted;
  }
  return kExitRunFailed;
}

int cmd_cache_stats(const std::string& dir) {
  koji::CacheStore store(dir);
  auto stats = store.stats();
  std::cout << "root: " << store.root().string() << "\n"
            << "entries: " << stats.entries << "\n"
            << "payload bytes: " << stats.payload_bytes << "\n";
  return kExitOk;
}

int cmd_cache_verify(const std::string& dir) {
  koji::CacheStore store(dir);
  auto bad = store.verify();
  if (bad.empty()) {
    std::cout << "ok: all entries match their integrity hashes\n";
    return kExitOk;
  }
  for (const auto& key : bad) std::cerr << "corrupt: " << key.hex() << "\n";
  return kExitValidation;
}

int cmd_cache_evict(const std::string& dir, const std::string& key_hex) {
  auto key = koji::CausalHash::parse_hex(key_hex);
  if (!key) {
    std::cerr << "error: '" << key_hex << "' is not a 64-digit hex hash\n";
    return kExitUsage;
  }
  koji::CacheStore store(dir);
  auto guard = store.locks().acquire(*key);
  if (store.evict(guard))
    std::cout << "evicted " << key->hex() << "\n";
  else
    std::cout << "absent " << key->hex() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reproducible pipelines over mixed file and service dataflow"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "koji 0.1.0");
  app.failure_message(CLI::FailureMessage::simple);

  std::string doc, format = "auto", out_path, out_dir, cache_dir, mock_script, run_dir;
  std::string key_hex;
  std::vector<std::string> args;
  bool lenient = false, trace = false;
  RunOptions run_opt;

  auto add_format = [&](CLI::App* cmd, std::string& target) {
    cmd->add_option("--format", target, "Document format: auto, yaml, json")
        ->check(CLI::IsMember({"auto", "yaml", "json"}))
        ->capture_default_str();
  };

  auto* validate = app.add_subcommand("validate", "Check structure and types of a pipeline");
  validate->add_option("document", doc, "Pipeline document")->required();
  add_format(validate, format);
  validate->add_flag("--lenient", lenient, "Downgrade unknown document keys to warnings");

  auto* hash = app.add_subcommand("hash", "Print the causal hash of every edge");
  hash->add_option("document", doc, "Pipeline document")->required();
  add_format(hash, format);
  hash->add_option("--arg", args, "Argument binding NAME=locator[:hash]");
  hash->add_flag("--trace", trace, "Include nested subpipeline edges and preimage sizes");

  auto* graph_cmd = app.add_subcommand("graph", "Render the dependency graph as DOT");
  graph_cmd->add_option("document", doc, "Pipeline document")->required();
  add_format(graph_cmd, format);
  graph_cmd->add_option("-o,--output", out_path, "Write DOT here instead of stdout");

  auto* run_cmd = app.add_subcommand("run", "Execute a pipeline to delivery");
  run_cmd->add_option("document", run_opt.doc, "Pipeline document")->required();
  add_format(run_cmd, run_opt.format);
  run_cmd->add_option("--arg", run_opt.args, "Argument binding NAME=locator[:hash]");
  run_cmd->add_option("--out", run_opt.out_dir, "Directory receiving the pipeline returns")
      ->required();
  run_cmd->add_option("--cache", run_opt.cache_dir, "Cache store directory")
      ->envname("KOJI_CACHE");
  run_cmd->add_flag("--no-cache", run_opt.no_cache, "Run without the cache store");
  auto* backend_opt =
      run_cmd->add_option("--backend", run_opt.backend, "Executor backend: local or mock")
          ->check(CLI::IsMember({"local", "mock"}))
          ->capture_default_str();
  run_cmd->add_option("--mock-script", run_opt.mock_script,
                      "Scripted behaviors for the mock backend (YAML or JSON)");
  run_cmd->add_option("--run-dir", run_opt.run_dir, "Working directory for this run");
  run_cmd->add_option("--max-attempts", run_opt.max_attempts, "Attempts per step before giving up")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  run_cmd->add_flag("--readiness-probe", run_opt.readiness_probe,
                    "Wait for service endpoints to accept connections before exposing them");
  run_cmd->add_option("--lock-timeout", run_opt.lock_timeout_ms,
                      "Milliseconds to wait for cache locks (default: forever)");
  run_cmd->add_option("--retry-backoff", run_opt.retry_backoff_ms,
                      "Base retry backoff in milliseconds, scaled by failure count")
      ->capture_default_str();
  run_cmd->add_option("--kill-grace", run_opt.kill_grace_ms,
                      "Milliseconds between SIGTERM and SIGKILL")
      ->capture_default_str();
  run_cmd->add_flag("--json", run_opt.json, "Print the full run report as JSON");
  run_cmd->add_flag("--quiet", run_opt.quiet, "Suppress the run summary");

  auto* cache = app.add_subcommand("cache", "Inspect or maintain a cache store");
  cache->require_subcommand(1);
  auto add_cache_dir = [&](CLI::App* cmd) {
    cmd->add_option("--cache", cache_dir, "Cache store directory")
        ->envname("KOJI_CACHE")
        ->required();
  };
  auto* cache_stats = cache->add_subcommand("stats", "Entry count and payload size");
  add_cache_dir(cache_stats);
  auto* cache_verify = cache->add_subcommand("verify", "Recheck every entry's integrity hash");
  add_cache_dir(cache_verify);
  auto* cache_evict = cache->add_subcommand("evict", "Remove one entry by hash");
  add_cache_dir(cache_evict);
  cache_evict->add_option("hash", key_hex, "Causal hash of the entry")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  // --mock-script only makes sense on the mock backend; switch the default,
  // reject an explicit contradiction.
  if (!run_opt.mock_script.empty() && run_opt.backend != "mock") {
    if (backend_opt->count() > 0) {
      std::cerr << "error: --mock-script requires --backend mock\n";
      return kExitUsage;
    }
    run_opt.backend = "mock";
  }

  try {
    if (validate->parsed()) return cmd_validate(doc, format, lenient);
    if (hash->parsed()) return cmd_hash(doc, format, args, trace);
    if (graph_cmd->parsed()) return cmd_graph(doc, format, out_path);
    if (run_cmd->parsed()) return cmd_run(run_opt);
    if (cache_stats->parsed()) return cmd_cache_stats(cache_dir);
    if (cache_verify->parsed()) return cmd_cache_verify(cache_dir);
    if (cache_evict->parsed()) return cmd_cache_evict(cache_dir, key_hex);
  } catch (const koji::CacheError& e) {
    std::cerr << "error: cache store: " << e.what() << "\n";
    return kExitBinding;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 70;  // internal failure
  }
  return kExitUsage;
}
