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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>
#include <thread>

#include "fixtures.hpp"
#include "koji/controller.hpp"

using namespace koji;
namespace fs = std::filesystem;
using namespace std::chrono_literals;

static const StepRecord& step_of(const RunReport& report, const std::string& label) {
  for (const auto& s : report.steps)
    if (s.label == label) return s;
  throw std::runtime_error("no step record for " + label);
}

static bool any_cache_hit(const StepRecord& s) {
  return std::any_of(s.outputs.begin(), s.outputs.end(),
                     [](const OutputRecord& o) { return o.cache_hit; });
}

// ---------------------------------------------------------------------------
// Clean runs
// ---------------------------------------------------------------------------

TEST_CASE("a clean run executes each step once and kills the server") {
  fixtures::TempDir dir;
  auto backend = std::make_shared<MockBackend>();
  auto config = fixtures::fast_config(backend, dir / "run");
  auto args = fixtures::insight_arguments(dir / "args");

  auto report = run(fixtures::insight_mock(), args, dir / "out", config);

  CHECK(report.status == RunStatus::Delivered);
  CHECK(report.error.empty());
  CHECK(report.hashed_before_first_spawn);
  CHECK(report.input_violations == 0);
  CHECK(total_executions(report) == 3);

  CHECK(step_of(report, "train").executions == 1);
  CHECK(step_of(report, "serve").executions == 1);
  CHECK(step_of(report, "annotate").executions == 1);
  CHECK(step_of(report, "train").failures == 0);

  // The server cannot succeed; it runs until the engine kills it.
  const auto& serve = step_of(report, "serve");
  REQUIRE(serve.attempts.size() == 1);
  CHECK(serve.attempts[0].termination == TerminationKind::Killed);

  // The annotation payload lands under its return name.
  REQUIRE(report.returns.size() == 1);
  CHECK(report.returns[0].name == "annotations");
  CHECK(fixtures::read_file(dir / "out" / "annotations") == "{\"row\": 1}\n");

  // The report is also persisted inside the run directory.
  auto persisted = nlohmann::json::parse(fixtures::read_file(report.run_dir / "report"));
  CHECK(persisted.at("status") == "delivered");
}

TEST_CASE("steps nobody demands never run") {
  auto pipeline = fixtures::insight_mock();
  // A scripted orphan consuming the training table; no return reaches it.
  Step orphan = fixtures::container_step(
      "orphan", "insight-audit", {{"table", "TRAIN", "table", fixtures::csv_file()}},
      {{"audit", fixtures::jsonl_file()}});
  orphan.transform.logic = mock_script({fixtures::succeed_with({{"audit", "x"}})});
  pipeline.steps.push_back(orphan);

  fixtures::TempDir dir;
  auto backend = std::make_shared<MockBackend>();
  auto config = fixtures::fast_config(backend, dir / "run");
  auto report = run(pipeline, fixtures::insight_arguments(dir / "args"), dir / "out", config);

  CHECK(report.status == RunStatus::Delivered);
  CHECK(step_of(report, "orphan").executions == 0);
  CHECK(total_executions(report) == 3);
  for (const auto& rec : backend->spawn_log()) CHECK(rec.step_label != "orphan");
}

TEST_CASE("service returns are delivered as endpoint files") {
  Pipeline p;
  p.steps.push_back(fixtures::arg_step("TRAIN", "train_table", fixtures::csv_file()));
  Step train = fixtures::container_step("train", "insight-train",
                                        {{"examples", "TRAIN", "table", fixtures::csv_file()}},
                                        {{"model", fixtures::model_dir()}});
  train.transform.logic = mock_script({fixtures::succeed_with({{"model", "w"}})});
  p.steps.push_back(train);
  Step serve = fixtures::container_step("serve", "insight-serve",
                                        {{"model", "train", "model", fixtures::model_dir()}},
                                        {{"api", fixtures::http_service()}});
  serve.transform.logic = mock_script({fixtures::serve_forever()});
  p.steps.push_back(serve);
  p.steps.push_back(
      fixtures::return_step("API", "api", fixtures::http_service(), "serve", "api"));

  fixtures::TempDir dir;
  fixtures::write_file(dir / "t.csv", "a,b\n");
  std::map<std::string, ArgumentBinding> args{
      {"train_table", {(dir / "t.csv").string(), content_hash_path(dir / "t.csv")}}};
  auto config = fixtures::fast_config(std::make_shared<MockBackend>(), dir / "run");
  auto report = run(p, args, dir / "out", config);

  CHECK(report.status == RunStatus::Delivered);
  REQUIRE(report.returns.size() == 1);
  auto endpoint = fixtures::read_file(dir / "out" / "api.endpoint");
  CHECK(endpoint.find("127.0.0.1:") == 0);
}

// ---------------------------------------------------------------------------
// Failure and recovery
// ---------------------------------------------------------------------------

TEST_CASE("a step that keeps failing exhausts its attempts") {
  fixtures::TempDir dir;
  auto backend = std::make_shared<MockBackend>();
  auto config = fixtures::fast_config(backend, dir / "run");
  auto pipeline = fixtures::insight_mock({fixtures::fail_once()});  // fails forever

  auto report = run(pipeline, fixtures::insight_arguments(dir / "args"), dir / "out", config);

  CHECK(report.status == RunStatus::FailedExhausted);
  CHECK(report.failed_step == "annotate");
  CHECK_FALSE(report.error.empty());
  const auto& annotate = step_of(report, "annotate");
  CHECK(annotate.executions == 3);
  CHECK(annotate.failures == 3);
  CHECK(report.returns.empty());
}

TEST_CASE("a transient failure is retried and recovers") {
  fixtures::TempDir dir;
  auto backend = std::make_shared<MockBackend>();
  auto config = fixtures::fast_config(backend, dir / "run");
  auto pipeline = fixtures::insight_mock(
      {fixtures::fail_once(), fixtures::succeed_with({{"annotations", "{\"row\": 1}\n"}})});

  auto report = run(pipeline, fixtures::insight_arguments(dir / "args"), dir / "out", config);

  CHECK(report.status == RunStatus::Delivered);
  const auto& annotate = step_of(report, "annotate");
  CHECK(annotate.executions == 2);
  CHECK(annotate.failures == 1);
  REQUIRE(annotate.attempts.size() == 2);
  CHECK(annotate.attempts[0].termination == TerminationKind::Failed);
  CHECK(annotate.attempts[1].termination == TerminationKind::Succeeded);
}

TEST_CASE("max_attempts bounds the retries") {
  fixtures::TempDir dir;
  auto backend = std::make_shared<MockBackend>();
  auto config = fixtures::fast_config(backend, dir / "run");
  config.max_attempts = 1;
  auto pipeline = fixtures::insight_mock(
      {fixtures::fail_once(), fixtures::succeed_with({{"annotations", "x"}})});

  auto report = run(pipeline, fixtures::insight_arguments(dir / "args"), dir / "out", config);
  CHECK(report.status == RunStatus::FailedExhausted);
  CHECK(step_of(report, "annotate").executions == 1);
}

TEST_CASE("cancellation aborts a run promptly") {
  fixtures::TempDir dir;
  auto backend = std::make_shared<MockBackend>();
  auto config = fixtures::fast_config(backend, dir / "run");
  config.cancel = std::make_shared<std::atomic<bool>>(false);
  // The annotator would block for a minute if not interrupted.
  auto pipeline = fixtures::insight_mock(
      {fixtures::succeed_with({{"annotations", "x"}}, 60000ms)});

  std::thread trigger([&config] {
    std::this_thread::sleep_for(300ms);
    config.cancel->store(true);
  });
  auto start = std::chrono::steady_clock::now();
  auto report = run(pipeline, fixtures::insight_arguments(dir / "args"), dir / "out", config);
  trigger.join();

  CHECK(report.status == RunStatus::Aborted);
  CHECK(std::chrono::steady_clock::now() - start < 10s);
  CHECK(report.returns.empty());
}

// ---------------------------------------------------------------------------
// Caching
// ---------------------------------------------------------------------------

TEST_CASE("an unchanged rerun is served entirely from the cache") {
  fixtures::TempDir dir;
  auto cache = std::make_shared<CacheStore>(dir / "cache");
  auto args = fixtures::insight_arguments(dir / "args");

  auto first = run(fixtures::insight_mock(), args, dir / "out1",
                   fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r1", cache));
  REQUIRE(first.status == RunStatus::Delivered);
  CHECK(total_executions(first) == 3);

  auto second = run(fixtures::insight_mock(), args, dir / "out2",
                    fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r2", cache));
  CHECK(second.status == RunStatus::Delivered);
  CHECK(total_executions(second) == 0);
  CHECK(any_cache_hit(step_of(second, "annotate")));
  CHECK(fixtures::read_file(dir / "out2" / "annotations") ==
        fixtures::read_file(dir / "out1" / "annotations"));
}

TEST_CASE("a changed argument reruns only its dependents") {
  fixtures::TempDir dir;
  auto cache = std::make_shared<CacheStore>(dir / "cache");
  auto args = fixtures::insight_arguments(dir / "args");

  auto first = run(fixtures::insight_mock(), args, dir / "out1",
                   fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r1", cache));
  REQUIRE(first.status == RunStatus::Delivered);

  // New business rows; the training table is untouched.
  fixtures::write_file(dir / "args" / "business.csv", "id,text\n10,changed\n");
  args["business_table"].hash = content_hash_path(dir / "args" / "business.csv");

  auto second = run(fixtures::insight_mock(), args, dir / "out2",
                    fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r2", cache));
  CHECK(second.status == RunStatus::Delivered);
  CHECK(step_of(second, "train").executions == 0);
  CHECK(any_cache_hit(step_of(second, "train")));
  CHECK(step_of(second, "serve").executions == 1);
  CHECK(step_of(second, "annotate").executions == 1);
}

TEST_CASE("disabling the cache forces re-execution") {
  fixtures::TempDir dir;
  auto cache = std::make_shared<CacheStore>(dir / "cache");
  auto args = fixtures::insight_arguments(dir / "args");

  run(fixtures::insight_mock(), args, dir / "out1",
      fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r1", cache));

  auto config = fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r2", cache);
  config.enable_cache = false;
  auto report = run(fixtures::insight_mock(), args, dir / "out2", config);
  CHECK(report.status == RunStatus::Delivered);
  CHECK(total_executions(report) == 3);
}

TEST_CASE("a held lock times out and consumes an attempt") {
  fixtures::TempDir dir;
  auto cache = std::make_shared<CacheStore>(dir / "cache");
  auto args = fixtures::insight_arguments(dir / "args");

  // Hold the publish lock for train's model output from outside the run.
  auto pipeline = fixtures::insight_mock();
  auto built = build_graph(pipeline);
  REQUIRE(built.ok());
  std::map<std::string, CausalHash> hashed_args;
  for (const auto& [name, binding] : args) hashed_args[name] = binding.hash;
  auto hashes = hash_pipeline(*built.graph, hashed_args);
  std::optional<CausalHash> model_key;
  for (std::size_t i = 0; i < built.graph->edges().size(); ++i)
    if (built.graph->edges()[i].provider == "train") model_key = hashes.at(i);
  REQUIRE(model_key.has_value());
  auto held = cache->locks().acquire(*model_key);

  auto config = fixtures::fast_config(std::make_shared<MockBackend>(), dir / "run", cache);
  config.lock_timeout = 100ms;
  config.max_attempts = 1;
  auto report = run(pipeline, args, dir / "out", config);
  CHECK(report.status == RunStatus::FailedExhausted);
  CHECK(report.failed_step == "train");
}

// ---------------------------------------------------------------------------
// Nested pipelines
// ---------------------------------------------------------------------------

TEST_CASE("a nested pipeline runs inside its step and reuses the shared cache") {
  fixtures::TempDir dir;
  auto cache = std::make_shared<CacheStore>(dir / "cache");
  auto args = fixtures::insight_arguments(dir / "args");
  auto wrapped = fixtures::wrapped_insight(fixtures::insight_mock());

  auto first = run(wrapped, args, dir / "out1",
                   fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r1", cache));
  REQUIRE(first.status == RunStatus::Delivered);
  CHECK(total_executions(first) == 3);

  const auto& insight = step_of(first, "insight");
  REQUIRE(insight.attempts.size() == 1);
  REQUIRE(insight.attempts[0].subpipeline != nullptr);
  const RunReport& inner = *insight.attempts[0].subpipeline;
  CHECK(inner.status == RunStatus::Delivered);
  CHECK(step_of(inner, "train").executions == 1);
  CHECK(step_of(inner, "annotate").executions == 1);
  CHECK(fixtures::read_file(dir / "out1" / "annotations") == "{\"row\": 1}\n");

  // A standalone run of the inner pipeline hits the same cache entries.
  auto standalone = run(fixtures::insight_mock(), args, dir / "out2",
                        fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r2", cache));
  CHECK(standalone.status == RunStatus::Delivered);
  CHECK(total_executions(standalone) == 0);

  // And the wrapped pipeline reruns without executing anything either.
  auto second = run(wrapped, args, dir / "out3",
                    fixtures::fast_config(std::make_shared<MockBackend>(), dir / "r3", cache));
  CHECK(second.status == RunStatus::Delivered);
  CHECK(total_executions(second) == 0);
}

TEST_CASE("an inner failure surfaces as the outer step's failure") {
  fixtures::TempDir dir;
  auto wrapped = fixtures::wrapped_insight(fixtures::insight_mock({fixtures::fail_once()}));
  auto config = fixtures::fast_config(std::make_shared<MockBackend>(), dir / "run");
  config.max_attempts = 1;

  auto report = run(wrapped, fixtures::insight_arguments(dir / "args"), dir / "out", config);
  CHECK(report.status == RunStatus::FailedExhausted);
  CHECK(report.failed_step == "insight");
  const auto& insight = step_of(report, "insight");
  REQUIRE(insight.attempts.size() == 1);
  REQUIRE(insight.attempts[0].subpipeline != nullptr);
  CHECK(insight.attempts[0].subpipeline->status == RunStatus::FailedExhausted);
}

// ---------------------------------------------------------------------------
// Setup errors
// ---------------------------------------------------------------------------

TEST_CASE("an unbound argument stops the run before anything starts") {
  fixtures::TempDir dir;
  auto backend = std::make_shared<MockBackend>();
  auto config = fixtures::fast_config(backend, dir / "run");
  std::map<std::string, ArgumentBinding> args;  // nothing bound

  try {
    run(fixtures::insight_mock(), args, dir / "out", config);
    FAIL("missing argument must throw");
  } catch (const RunSetupError& e) {
    CHECK(e.code == RunErrc::BindingError);
  }
  CHECK(backend->spawn_log().empty());
}

TEST_CASE("structural and type errors are rejected up front") {
  fixtures::TempDir dir;
  auto config = fixtures::fast_config(std::make_shared<MockBackend>(), dir / "run");

  auto broken = fixtures::insight_mock();
  broken.steps[2].label = broken.steps[0].label;  // duplicate labels
  try {
    run(broken, {}, dir / "out", config);
    FAIL("invalid pipeline must throw");
  } catch (const RunSetupError& e) {
    CHECK(e.code == RunErrc::ValidationFailed);
    CHECK_FALSE(e.details.empty());
  }

  auto mistyped = fixtures::insight_mock();
  for (auto& step : mistyped.steps) {
    if (step.label == "annotate")
      for (auto& input : step.transform.inputs)
        if (input.name == "records")
          std::get<FileResource>(input.resource.type).format = "parquet";
  }
  try {
    run(mistyped, {}, dir / "out", config);
    FAIL("mistyped pipeline must throw");
  } catch (const RunSetupError& e) {
    CHECK(e.code == RunErrc::TypeCheckFailed);
  }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

TEST_CASE("the JSON report carries counts, hashes, and returns") {
  fixtures::TempDir dir;
  auto config = fixtures::fast_config(std::make_shared<MockBackend>(), dir / "run");
  auto report =
      run(fixtures::insight_mock(), fixtures::insight_arguments(dir / "args"), dir / "out", config);
  REQUIRE(report.status == RunStatus::Delivered);

  auto j = nlohmann::json::parse(report_to_json(report));
  CHECK(j.at("status") == "delivered");
  CHECK(j.at("hashed_before_first_spawn") == true);
  CHECK(j.at("input_violations") == 0);
  REQUIRE(j.at("returns").size() == 1);
  CHECK(j.at("returns")[0].at("name") == "annotations");
  CHECK(j.at("returns")[0].at("hash").get<std::string>().size() == 64);

  bool saw_train = false;
  for (const auto& s : j.at("steps")) {
    if (s.at("label") == "train") {
      saw_train = true;
      CHECK(s.at("executions") == 1);
    }
  }
  CHECK(saw_train);
}
