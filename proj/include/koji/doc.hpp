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

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "koji/hash.hpp"
#include "koji/model.hpp"

namespace koji {

enum class DocFormat { Auto, Yaml, Json };

// Auto resolves by extension (".json" is JSON, anything else YAML); when
// there is no filename, a document whose first non-space byte is '{' or '['
// reads as JSON.
DocFormat resolve_format(DocFormat hint, std::string_view filename, std::string_view text);

struct ParseResult {
  std::optional<Pipeline> pipeline;
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return pipeline.has_value(); }
};

// Parses a pipeline document. Unknown keys are errors unless `lenient`,
// which demotes them to warnings. Syntax errors carry "line:col" locations;
// structural errors carry field paths.
ParseResult parse_document(std::string_view text, DocFormat format = DocFormat::Auto,
                           bool lenient = false, std::string_view filename = "");

std::string serialize_document(const Pipeline& pipeline, DocFormat format);

// Mock scripts document: a map from step label to a list of behaviors, e.g.
//   train:
//     - succeed: { outputs: { model: "weights" }, delay_ms: 10 }
//   serve:
//     - serve: { readiness_delay_ms: 5 }
//   annotate:
//     - fail: {}
//     - succeed: { outputs: { insight: "ok" } }
struct MockScriptsResult {
  std::map<std::string, ScriptedLogic> scripts;
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return !has_errors(diagnostics); }
};

MockScriptsResult parse_mock_scripts(std::string_view text, DocFormat format = DocFormat::Auto,
                                     std::string_view filename = "");

// Replaces the logic of every intermediate step that has a script, descending
// into subpipelines. Argument and return steps are never touched.
Pipeline apply_mock_scripts(const Pipeline& pipeline,
                            const std::map<std::string, ScriptedLogic>& scripts);

// "NAME=locator" or "NAME=locator:64-hex-hash". The hash is split off only
// when the text after the last ':' parses as a 64-digit hex string, so
// endpoint locators like "127.0.0.1:8080" survive.
struct ArgumentSpec {
  std::string name;
  std::string locator;
  std::optional<CausalHash> hash;
};

std::optional<ArgumentSpec> parse_argument_spec(std::string_view text, std::string& error);

// Graphviz rendering: one node per step, one edge per dependency, service
// edges dashed.
std::string render_dot(const DependencyGraph& graph);

}  // namespace koji
