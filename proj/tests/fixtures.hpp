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

// Shared test helpers: temp directories, programmatic pipelines matching
// the examples/ fixture, and a randomized pipeline generator for the
// hashing property suite.

#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "koji/controller.hpp"
#include "koji/executor.hpp"
#include "koji/hash.hpp"
#include "koji/model.hpp"

namespace fixtures {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "koji-test") {
    auto base = fs::temp_directory_path() / (tag + "-XXXXXX");
    std::string tmpl = base.string();
    if (mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& sub) const { return path_ / sub; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// ---------------------------------------------------------------------------
// Resource and step builders
// ---------------------------------------------------------------------------

inline koji::Resource csv_file() {
  koji::FileResource r;
  r.format = "csv";
  return koji::Resource{r};
}

inline koji::Resource jsonl_file() {
  koji::FileResource r;
  r.format = "jsonl";
  return koji::Resource{r};
}

inline koji::Resource model_dir() {
  koji::FileResource r;
  r.directory = true;
  return koji::Resource{r};
}

inline koji::Resource http_service() {
  koji::ServiceResource r;
  r.protocol = "http";
  return koji::Resource{r};
}

inline koji::Step arg_step(const std::string& label, const std::string& arg_name,
                           const koji::Resource& resource,
                           const std::string& output_name = "table") {
  koji::Step s;
  s.label = label;
  s.transform.outputs.push_back({output_name, resource});
  s.transform.logic.value = koji::ArgumentLogic{arg_name, resource};
  return s;
}

inline koji::Step return_step(const std::string& label, const std::string& ret_name,
                              const koji::Resource& resource, const std::string& provider,
                              const std::string& provider_output) {
  koji::Step s;
  s.label = label;
  s.inputs.push_back({"result", provider, provider_output});
  s.transform.inputs.push_back({"result", resource});
  s.transform.logic.value = koji::ReturnLogic{ret_name, resource};
  return s;
}

struct BoundInput {
  std::string slot;
  std::string provider;
  std::string provider_output;
  koji::Resource resource;
};

inline koji::Step container_step(const std::string& label, const std::string& image,
                                 const std::vector<BoundInput>& inputs,
                                 const std::vector<koji::TransformPort>& outputs) {
  koji::Step s;
  s.label = label;
  koji::ContainerLogic c;
  c.image = image;
  for (const auto& in : inputs) {
    s.inputs.push_back({in.slot, in.provider, in.provider_output});
    s.transform.inputs.push_back({in.slot, in.resource});
    c.inputs.push_back({in.slot, in.slot, std::nullopt});
  }
  for (const auto& out : outputs) {
    s.transform.outputs.push_back(out);
    c.outputs.push_back({out.name, out.name, std::nullopt});
  }
  s.transform.logic.value = std::move(c);
  return s;
}

inline koji::ScriptedBehavior succeed_with(std::map<std::string, std::string> outputs,
                                           std::chrono::milliseconds delay = {}) {
  koji::ScriptedBehavior b;
  b.kind = koji::ScriptedBehavior::Kind::Succeed;
  b.outputs = std::move(outputs);
  b.delay = delay;
  return b;
}

inline koji::ScriptedBehavior fail_once(std::chrono::milliseconds delay = {}) {
  koji::ScriptedBehavior b;
  b.kind = koji::ScriptedBehavior::Kind::Fail;
  b.delay = delay;
  return b;
}

inline koji::ScriptedBehavior serve_forever(std::chrono::milliseconds readiness = {}) {
  koji::ScriptedBehavior b;
  b.kind = koji::ScriptedBehavior::Kind::Serve;
  b.readiness_delay = readiness;
  return b;
}

// ---------------------------------------------------------------------------
// The insight pipeline: TRAIN, BUSINESS -> train -> serve -> annotate ->
// ANNOTATIONS. Mirrors examples/ml-insight.yaml.
// ---------------------------------------------------------------------------

inline koji::Pipeline insight_pipeline() {
  koji::Pipeline p;
  p.steps.push_back(arg_step("TRAIN", "train_table", csv_file()));
  p.steps.push_back(arg_step("BUSINESS", "business_table", csv_file()));

  // Port bindings mirror examples/ml-insight.yaml exactly; edge hashes of
  // the two fixtures must be interchangeable.
  koji::Step train = container_step("train", "insight-train",
                                    {{"examples", "TRAIN", "table", csv_file()}},
                                    {{"model", model_dir()}});
  {
    auto& c = std::get<koji::ContainerLogic>(train.transform.logic.value);
    c.outputs = {{"model", "model-dir", std::nullopt}};
    c.flags.push_back({"epochs", "3"});
  }
  p.steps.push_back(train);

  koji::Step serve = container_step("serve", "insight-serve",
                                    {{"model", "train", "model", model_dir()}},
                                    {{"model_api", http_service()}});
  {
    auto& c = std::get<koji::ContainerLogic>(serve.transform.logic.value);
    c.inputs = {{"model", "model-dir", std::nullopt}};
    c.outputs = {{"model_api", std::nullopt, "LISTEN_ADDR"}};
  }
  p.steps.push_back(serve);

  koji::Step annotate = container_step(
      "annotate", "insight-annotate",
      {{"records", "BUSINESS", "table", csv_file()},
       {"api", "serve", "model_api", http_service()}},
      {{"annotations", jsonl_file()}});
  {
    auto& c = std::get<koji::ContainerLogic>(annotate.transform.logic.value);
    c.inputs = {{"records", "records", std::nullopt}, {"api", "endpoint", std::nullopt}};
    c.outputs = {{"annotations", "out", std::nullopt}};
  }
  p.steps.push_back(annotate);

  p.steps.push_back(return_step("ANNOTATIONS", "annotations", jsonl_file(), "annotate",
                                "annotations"));
  return p;
}

// Scripts for a clean run. `annotate` defaults to one succeeding attempt;
// pass alternatives to model failures.
inline koji::Pipeline insight_mock(
    std::vector<koji::ScriptedBehavior> annotate = {succeed_with(
        {{"annotations", "{\"row\": 1}\n"}})}) {
  koji::Pipeline p = insight_pipeline();
  for (auto& s : p.steps) {
    if (s.label == "train")
      s.transform.logic = koji::mock_script({succeed_with({{"model", "weights v1"}})});
    else if (s.label == "serve")
      s.transform.logic = koji::mock_script({serve_forever()});
    else if (s.label == "annotate")
      s.transform.logic = koji::mock_script(annotate);
  }
  return p;
}

// Wraps any pipeline with insight's argument/return shape (train_table,
// business_table -> annotations) as a single subpipeline step.
inline koji::Pipeline wrapped_insight(koji::Pipeline inner) {
  koji::Pipeline p;
  p.steps.push_back(arg_step("TRAIN", "train_table", csv_file()));
  p.steps.push_back(arg_step("BUSINESS", "business_table", csv_file()));

  koji::Step s;
  s.label = "insight";
  s.inputs.push_back({"train_in", "TRAIN", "table"});
  s.inputs.push_back({"business_in", "BUSINESS", "table"});
  s.transform.inputs.push_back({"train_in", csv_file()});
  s.transform.inputs.push_back({"business_in", csv_file()});
  s.transform.outputs.push_back({"result", jsonl_file()});
  koji::SubpipelineLogic sub;
  sub.pipeline = std::make_shared<const koji::Pipeline>(std::move(inner));
  sub.arguments = {{"train_table", "train_in"}, {"business_table", "business_in"}};
  sub.returns = {{"annotations", "result"}};
  s.transform.logic.value = std::move(sub);
  p.steps.push_back(std::move(s));

  p.steps.push_back(return_step("RESULT", "annotations", jsonl_file(), "insight", "result"));
  return p;
}

inline std::map<std::string, koji::ArgumentBinding> insight_arguments(const fs::path& dir) {
  write_file(dir / "train.csv", "id,label\n1,a\n2,b\n");
  write_file(dir / "business.csv", "id,text\n10,foo\n11,bar\n");
  return {
      {"train_table",
       {(dir / "train.csv").string(), koji::content_hash_path(dir / "train.csv")}},
      {"business_table",
       {(dir / "business.csv").string(), koji::content_hash_path(dir / "business.csv")}},
  };
}

inline koji::RunConfig fast_config(std::shared_ptr<koji::ExecutorBackend> backend,
                                   const fs::path& run_dir,
                                   std::shared_ptr<koji::CacheStore> cache = nullptr) {
  koji::RunConfig config;
  config.backend = std::move(backend);
  config.cache = std::move(cache);
  config.enable_cache = config.cache != nullptr;
  config.run_dir = run_dir;
  config.retry_backoff = std::chrono::milliseconds(10);
  return config;
}

inline const koji::StepRecord& step_record(const koji::RunReport& report,
                                           const std::string& label) {
  for (const auto& s : report.steps)
    if (s.label == label) return s;
  throw std::runtime_error("no step record for " + label);
}

// ---------------------------------------------------------------------------
// Randomized small pipelines for the hashing property suite. Layered DAGs
// of container steps over file resources, with randomized names, images,
// flags, env, and resource identifiers.
// ---------------------------------------------------------------------------

struct RandomPipeline {
  koji::Pipeline pipeline;
  std::map<std::string, koji::CausalHash> argument_hashes;
};

inline std::string random_name(std::mt19937& rng, const char* prefix) {
  static const char* kAlpha = "abcdefghijklmnopqrstuvwxyz";
  std::uniform_int_distribution<int> len(3, 8);
  std::uniform_int_distribution<int> pick(0, 25);
  std::string out = prefix;
  int n = len(rng);
  for (int i = 0; i < n; ++i) out.push_back(kAlpha[pick(rng)]);
  return out;
}

inline koji::Resource random_file_resource(std::mt19937& rng) {
  koji::FileResource r;
  std::bernoulli_distribution coin;
  r.directory = coin(rng);
  if (coin(rng)) r.format = random_name(rng, "fmt_");
  if (coin(rng)) r.encoding = random_name(rng, "enc_");
  return koji::Resource{r};
}

inline RandomPipeline random_pipeline(std::mt19937& rng) {
  RandomPipeline out;
  std::uniform_int_distribution<int> n_args(1, 3);
  std::uniform_int_distribution<int> n_layers(1, 3);
  std::uniform_int_distribution<int> n_steps(1, 2);
  std::bernoulli_distribution coin;

  // Arguments with synthetic caller hashes derived from their names.
  struct Slot {
    std::string step;
    std::string output;
    koji::Resource resource;
  };
  std::vector<Slot> produced;
  int arg_count = n_args(rng);
  for (int i = 0; i < arg_count; ++i) {
    std::string label = "ARG" + std::to_string(i);
    std::string arg_name = random_name(rng, "in_");
    koji::Resource res = random_file_resource(rng);
    out.pipeline.steps.push_back(arg_step(label, arg_name, res, "value"));
    out.argument_hashes.emplace(arg_name, koji::sha256("seed:" + arg_name));
    produced.push_back({label, "value", res});
  }

  int step_no = 0;
  int layers = n_layers(rng);
  for (int layer = 0; layer < layers; ++layer) {
    std::vector<Slot> next = produced;
    int steps = n_steps(rng);
    for (int s = 0; s < steps; ++s) {
      std::string label = "step" + std::to_string(step_no++);
      std::uniform_int_distribution<std::size_t> pick(0, produced.size() - 1);
      std::size_t chosen = pick(rng);
      std::vector<BoundInput> ins;
      ins.push_back({random_name(rng, "slot_"), produced[chosen].step,
                     produced[chosen].output, produced[chosen].resource});
      if (produced.size() > 1 && coin(rng)) {
        std::size_t second = pick(rng);
        if (second != chosen)
          ins.push_back({random_name(rng, "slot_"), produced[second].step,
                         produced[second].output, produced[second].resource});
      }
      koji::Resource res = random_file_resource(rng);
      std::string out_name = random_name(rng, "out_");
      koji::Step step =
          container_step(label, random_name(rng, "img_"), ins, {{out_name, res}});
      auto& c = std::get<koji::ContainerLogic>(step.transform.logic.value);
      if (coin(rng))
        c.flags.push_back({random_name(rng, "flag_"),
                           coin(rng) ? std::optional<std::string>(random_name(rng, "v_"))
                                     : std::nullopt});
      if (coin(rng)) c.env.push_back({random_name(rng, "ENV_"), std::nullopt});
      out.pipeline.steps.push_back(step);
      next.push_back({label, out_name, res});
    }
    produced = std::move(next);
  }

  const Slot& last = produced.back();
  out.pipeline.steps.push_back(
      return_step("RET", random_name(rng, "ret_"), last.resource, last.step, last.output));
  return out;
}

}  // namespace fixtures
