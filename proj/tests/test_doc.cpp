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

#include <algorithm>

#include "fixtures.hpp"
#include "koji/doc.hpp"
#include "koji/typecheck.hpp"

using namespace koji;

static bool has_code(const std::vector<Diagnostic>& diags, DiagCode code) {
  return std::any_of(diags.begin(), diags.end(),
                     [&](const Diagnostic& d) { return d.code == code; });
}

static const Diagnostic& find_code(const std::vector<Diagnostic>& diags, DiagCode code) {
  for (const auto& d : diags)
    if (d.code == code) return d;
  throw std::runtime_error("diagnostic not found");
}

// Edge hashes are the strongest equality check two pipelines can pass: every
// identity field feeds them.
static std::map<std::string, std::string> edge_hashes(const Pipeline& p) {
  std::map<std::string, CausalHash> args;
  for (const auto& s : p.steps)
    if (const auto* a = s.transform.logic.argument()) args[a->name] = sha256(a->name);
  auto built = build_graph(p);
  REQUIRE(built.ok());
  auto hashes = hash_pipeline(*built.graph, args);
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < built.graph->edges().size(); ++i) {
    const auto& e = built.graph->edges()[i];
    out[e.consumer + "." + e.input] = hashes.at(i).hex();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Round trips
// ---------------------------------------------------------------------------

TEST_CASE("a pipeline survives a YAML round trip byte for byte") {
  auto pipeline = fixtures::insight_pipeline();
  auto yaml = serialize_document(pipeline, DocFormat::Yaml);
  auto parsed = parse_document(yaml, DocFormat::Yaml);
  REQUIRE(parsed.ok());
  CHECK(parsed.diagnostics.empty());
  CHECK(edge_hashes(*parsed.pipeline) == edge_hashes(pipeline));
  // Serialization is canonical: a second trip reproduces the same text.
  CHECK(serialize_document(*parsed.pipeline, DocFormat::Yaml) == yaml);
}

TEST_CASE("a pipeline survives a JSON round trip") {
  auto pipeline = fixtures::insight_pipeline();
  auto json = serialize_document(pipeline, DocFormat::Json);
  auto parsed = parse_document(json, DocFormat::Json);
  REQUIRE(parsed.ok());
  CHECK(edge_hashes(*parsed.pipeline) == edge_hashes(pipeline));
  CHECK(serialize_document(*parsed.pipeline, DocFormat::Json) == json);
}

TEST_CASE("nested pipelines round trip through both formats") {
  auto pipeline = fixtures::wrapped_insight(fixtures::insight_pipeline());
  for (auto format : {DocFormat::Yaml, DocFormat::Json}) {
    auto text = serialize_document(pipeline, format);
    auto parsed = parse_document(text, format);
    REQUIRE(parsed.ok());
    CHECK(edge_hashes(*parsed.pipeline) == edge_hashes(pipeline));
  }
}

TEST_CASE("the shipped example document matches the programmatic fixture") {
  auto text = fixtures::read_file(std::string(KOJI_EXAMPLES_DIR) + "/ml-insight.yaml");
  auto parsed = parse_document(text, DocFormat::Auto, false, "ml-insight.yaml");
  REQUIRE(parsed.ok());
  CHECK(parsed.diagnostics.empty());
  CHECK(edge_hashes(*parsed.pipeline) == edge_hashes(fixtures::insight_pipeline()));
}

// Scripts keyed by step label, shaped like a parsed mock document.
static std::map<std::string, ScriptedLogic> demo_scripts() {
  std::map<std::string, ScriptedLogic> scripts;
  scripts["train"].attempts = {fixtures::succeed_with({{"model", "w"}})};
  scripts["serve"].attempts = {fixtures::serve_forever()};
  scripts["annotate"].attempts = {fixtures::succeed_with({{"annotations", "x"}})};
  return scripts;
}

TEST_CASE("scripted logic has no document form") {
  auto pipeline = apply_mock_scripts(fixtures::insight_pipeline(), demo_scripts());
  CHECK_THROWS_AS(serialize_document(pipeline, DocFormat::Yaml), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Format resolution
// ---------------------------------------------------------------------------

TEST_CASE("format resolution prefers the hint, then the extension, then a sniff") {
  CHECK(resolve_format(DocFormat::Json, "x.yaml", "steps:") == DocFormat::Json);
  CHECK(resolve_format(DocFormat::Auto, "x.json", "steps:") == DocFormat::Json);
  CHECK(resolve_format(DocFormat::Auto, "x.yaml", "{}") == DocFormat::Yaml);
  CHECK(resolve_format(DocFormat::Auto, "pipeline", "{}") == DocFormat::Yaml);
  CHECK(resolve_format(DocFormat::Auto, "", "  {\"steps\": []}") == DocFormat::Json);
  CHECK(resolve_format(DocFormat::Auto, "", "steps: []") == DocFormat::Yaml);
}

// ---------------------------------------------------------------------------
// Structural diagnostics
// ---------------------------------------------------------------------------

static const char* kMinimal = R"(steps:
  - label: A
    transform:
      outputs:
        - name: t
          resource:
            file: { directory: false, format: csv }
      logic:
        arg:
          name: table
          resource:
            file: { directory: false, format: csv }
)";

TEST_CASE("a minimal argument step parses") {
  auto parsed = parse_document(kMinimal);
  REQUIRE(parsed.ok());
  REQUIRE(parsed.pipeline->steps.size() == 1);
  const auto& step = parsed.pipeline->steps[0];
  CHECK(step.label == "A");
  REQUIRE(step.transform.logic.argument() != nullptr);
  CHECK(step.transform.logic.argument()->name == "table");
}

TEST_CASE("unknown keys are errors, or warnings when lenient") {
  std::string doc = kMinimal;
  doc += "    comment: legacy field\n";

  auto strict = parse_document(doc);
  CHECK_FALSE(strict.ok());
  const auto& diag = find_code(strict.diagnostics, DiagCode::UnknownField);
  CHECK(diag.severity == Severity::Error);
  CHECK(diag.location.find("steps[0]") != std::string::npos);
  CHECK(diag.message.find("comment") != std::string::npos);

  auto lenient = parse_document(doc, DocFormat::Auto, true);
  REQUIRE(lenient.ok());
  REQUIRE(lenient.diagnostics.size() == 1);
  CHECK(lenient.diagnostics[0].severity == Severity::Warning);
}

TEST_CASE("a resource must be exactly one of file or service") {
  const char* both = R"(steps:
  - label: A
    transform:
      outputs:
        - name: t
          resource:
            file: { directory: false }
            service: { protocol: http }
      logic:
        arg: { name: t, resource: { file: { directory: false } } }
)";
  auto parsed = parse_document(both);
  CHECK_FALSE(parsed.ok());
  CHECK(has_code(parsed.diagnostics, DiagCode::VariantViolation));

  const char* neither = R"(steps:
  - label: A
    transform:
      outputs:
        - name: t
          resource: {}
      logic:
        arg: { name: t, resource: { file: { directory: false } } }
)";
  parsed = parse_document(neither);
  CHECK_FALSE(parsed.ok());
  const auto& diag = find_code(parsed.diagnostics, DiagCode::VariantViolation);
  CHECK(diag.location.find("resource") != std::string::npos);
}

TEST_CASE("logic must be exactly one of the four kinds") {
  const char* two = R"(steps:
  - label: A
    transform:
      outputs: []
      logic:
        arg: { name: x, resource: { file: { directory: false } } }
        container: { image: img }
)";
  auto parsed = parse_document(two);
  CHECK_FALSE(parsed.ok());
  CHECK(has_code(parsed.diagnostics, DiagCode::VariantViolation));
}

TEST_CASE("the reserved container port key is rejected by name") {
  const char* doc = R"(steps:
  - label: A
    transform:
      outputs:
        - name: t
          resource: { file: { directory: false } }
      logic:
        container:
          image: img
          outputs:
            - { name: t, flag: out, format: csv }
)";
  auto parsed = parse_document(doc);
  CHECK_FALSE(parsed.ok());
  const auto& diag = find_code(parsed.diagnostics, DiagCode::ReservedField);
  CHECK(diag.message.find("format") != std::string::npos);
}

TEST_CASE("type mismatches carry the field path") {
  auto parsed = parse_document("steps: 12\n");
  CHECK_FALSE(parsed.ok());
  const auto& diag = find_code(parsed.diagnostics, DiagCode::FieldType);
  CHECK(diag.location == "steps");
}

TEST_CASE("scalar coercion keeps documents forgiving where it is safe") {
  // Flag values written as bare numbers become strings; the boolean
  // `directory` accepts only real booleans.
  const char* doc = R"(steps:
  - label: A
    transform:
      outputs:
        - name: t
          resource: { file: { directory: false } }
      logic:
        container:
          image: img
          outputs: [ { name: t, flag: out } ]
          flags: [ { name: epochs, value: 3 } ]
)";
  auto parsed = parse_document(doc);
  REQUIRE(parsed.ok());
  const auto* container = parsed.pipeline->steps[0].transform.logic.container();
  REQUIRE(container != nullptr);
  REQUIRE(container->flags.size() == 1);
  CHECK(container->flags[0].value == "3");

  const char* bad = R"(steps:
  - label: A
    transform:
      outputs:
        - name: t
          resource: { file: { directory: "false" } }
      logic:
        container: { image: img, outputs: [ { name: t, flag: out } ] }
)";
  parsed = parse_document(bad);
  CHECK_FALSE(parsed.ok());
  CHECK(has_code(parsed.diagnostics, DiagCode::FieldType));
}

// ---------------------------------------------------------------------------
// Syntax errors
// ---------------------------------------------------------------------------

TEST_CASE("YAML syntax errors report their position") {
  auto parsed = parse_document("steps:\n  - label: [unclosed\n", DocFormat::Yaml);
  CHECK_FALSE(parsed.ok());
  const auto& diag = find_code(parsed.diagnostics, DiagCode::SyntaxError);
  // yaml-cpp notices at the start of the next line; what matters is that a
  // plausible line:col position is present.
  CHECK(diag.location.find(':') != std::string::npos);
  CHECK(diag.location.substr(0, diag.location.find(':')) == "3");
}

TEST_CASE("JSON syntax errors report their position") {
  auto parsed = parse_document("{\"steps\": [}\n", DocFormat::Json);
  CHECK_FALSE(parsed.ok());
  const auto& diag = find_code(parsed.diagnostics, DiagCode::SyntaxError);
  CHECK(diag.location == "1:12");
}

// ---------------------------------------------------------------------------
// Mock scripts
// ---------------------------------------------------------------------------

TEST_CASE("the shipped mock script parses into behaviors") {
  auto text =
      fixtures::read_file(std::string(KOJI_EXAMPLES_DIR) + "/ml-insight-mock.yaml");
  auto result = parse_mock_scripts(text, DocFormat::Auto, "ml-insight-mock.yaml");
  REQUIRE(result.ok());
  REQUIRE(result.scripts.size() == 3);

  const auto& train = result.scripts.at("train").attempts;
  REQUIRE(train.size() == 1);
  CHECK(train[0].kind == ScriptedBehavior::Kind::Succeed);
  CHECK(train[0].outputs.at("model") == "weights v1");

  CHECK(result.scripts.at("serve").attempts[0].kind == ScriptedBehavior::Kind::Serve);
}

TEST_CASE("behavior lists keep their order and delays") {
  const char* doc = R"(annotate:
  - fail: { delay_ms: 7 }
  - succeed: { outputs: { result: ok }, delay_ms: 11 }
)";
  auto result = parse_mock_scripts(doc);
  REQUIRE(result.ok());
  const auto& behaviors = result.scripts.at("annotate").attempts;
  REQUIRE(behaviors.size() == 2);
  CHECK(behaviors[0].kind == ScriptedBehavior::Kind::Fail);
  CHECK(behaviors[0].delay == std::chrono::milliseconds(7));
  CHECK(behaviors[1].kind == ScriptedBehavior::Kind::Succeed);
  CHECK(behaviors[1].delay == std::chrono::milliseconds(11));
  CHECK(behaviors[1].outputs.at("result") == "ok");
}

TEST_CASE("a behavior must name exactly one action") {
  auto result = parse_mock_scripts("a:\n  - { succeed: {}, fail: {} }\n");
  CHECK_FALSE(result.ok());
  CHECK(result.scripts.empty());
  CHECK(has_code(result.diagnostics, DiagCode::VariantViolation));

  result = parse_mock_scripts("a:\n  - { explode: {} }\n");
  CHECK_FALSE(result.ok());
  CHECK(has_code(result.diagnostics, DiagCode::UnknownField));
}

TEST_CASE("scripts replace intermediate logic and descend into nested pipelines") {
  auto wrapped = fixtures::wrapped_insight(fixtures::insight_pipeline());
  auto scripted = apply_mock_scripts(wrapped, demo_scripts());

  const Pipeline* inner = nullptr;
  for (const auto& step : scripted.steps) {
    if (const auto* sub = step.transform.logic.subpipeline()) inner = sub->pipeline.get();
    // Outer argument and return steps keep their logic.
    if (step.label == "TRAIN") CHECK(step.transform.logic.argument() != nullptr);
    if (step.label == "RESULT") CHECK(step.transform.logic.ret() != nullptr);
  }
  REQUIRE(inner != nullptr);
  for (const auto& step : inner->steps) {
    if (step.label == "train" || step.label == "serve" || step.label == "annotate") {
      CHECK(step.transform.logic.scripted() != nullptr);
    }
  }
}

// ---------------------------------------------------------------------------
// Argument specs
// ---------------------------------------------------------------------------

TEST_CASE("argument specs split name, locator, and optional hash") {
  std::string error;
  auto spec = parse_argument_spec("table=/data/t.csv", error);
  REQUIRE(spec.has_value());
  CHECK(spec->name == "table");
  CHECK(spec->locator == "/data/t.csv");
  CHECK_FALSE(spec->hash.has_value());

  std::string hex(64, 'a');
  spec = parse_argument_spec("table=/data/t.csv:" + hex, error);
  REQUIRE(spec.has_value());
  CHECK(spec->locator == "/data/t.csv");
  REQUIRE(spec->hash.has_value());
  CHECK(spec->hash->hex() == hex);
}

TEST_CASE("endpoint locators keep their port") {
  std::string error;
  auto spec = parse_argument_spec("api=127.0.0.1:8080", error);
  REQUIRE(spec.has_value());
  CHECK(spec->locator == "127.0.0.1:8080");
  CHECK_FALSE(spec->hash.has_value());

  std::string hex(64, '0');
  spec = parse_argument_spec("api=127.0.0.1:8080:" + hex, error);
  REQUIRE(spec.has_value());
  CHECK(spec->locator == "127.0.0.1:8080");
  CHECK(spec->hash.has_value());
}

TEST_CASE("malformed argument specs are rejected with a reason") {
  std::string error;
  CHECK_FALSE(parse_argument_spec("no-equals-sign", error).has_value());
  CHECK_FALSE(error.empty());
  CHECK_FALSE(parse_argument_spec("=/data/t.csv", error).has_value());
  CHECK_FALSE(parse_argument_spec("table=", error).has_value());
}

// ---------------------------------------------------------------------------
// Graphviz
// ---------------------------------------------------------------------------

TEST_CASE("the dot rendering shows every step and dashes service edges") {
  auto pipeline = fixtures::insight_pipeline();
  auto built = build_graph(pipeline);
  REQUIRE(built.ok());
  auto dot = render_dot(*built.graph);

  CHECK(dot.find("digraph") != std::string::npos);
  for (const char* label : {"TRAIN", "BUSINESS", "train", "serve", "annotate", "ANNOTATIONS"})
    CHECK(dot.find("\"" + std::string(label) + "\"") != std::string::npos);
  CHECK(dot.find("label=\"model_api -> api\"") != std::string::npos);
  // Exactly one service edge in the fixture.
  size_t dashed = 0;
  for (size_t pos = 0; (pos = dot.find("style=dashed", pos)) != std::string::npos; ++pos)
    ++dashed;
  CHECK(dashed == 1);
}
