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

#include <chrono>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace koji {

// ---------------------------------------------------------------------------
// Resources
//
// A resource is the datum carried by a dependency edge: either a file (or
// directory) that exists after its producer succeeds, or a network service
// that exists while its producer runs. Format/encoding/protocol identifiers
// are opaque strings; absent means "unconstrained".
// ---------------------------------------------------------------------------

struct FileResource {
  bool directory = false;
  std::optional<std::string> encoding;
  std::optional<std::string> format;

  friend bool operator==(const FileResource&, const FileResource&) = default;
};

struct ServiceResource {
  std::optional<std::string> protocol;  // convention: scheme://qualified.Name

  friend bool operator==(const ServiceResource&, const ServiceResource&) = default;
};

struct Resource {
  std::variant<FileResource, ServiceResource> type = FileResource{};

  bool is_file() const { return std::holds_alternative<FileResource>(type); }
  bool is_service() const { return std::holds_alternative<ServiceResource>(type); }
  const FileResource& file() const { return std::get<FileResource>(type); }
  const ServiceResource& service() const { return std::get<ServiceResource>(type); }

  static Resource plain_file() { return Resource{FileResource{}}; }
  static Resource dir() {
    FileResource r;
    r.directory = true;
    return Resource{r};
  }
  static Resource plain_service() { return Resource{ServiceResource{}}; }

  friend bool operator==(const Resource&, const Resource&) = default;
};

// ---------------------------------------------------------------------------
// Transform logic variants
// ---------------------------------------------------------------------------

// Declares a pipeline argument: a resource supplied by the caller at
// execution time. An argument step has no inputs and exactly one output.
struct ArgumentLogic {
  std::string name;  // the name callers bind; unique within a pipeline
  Resource resource;

  friend bool operator==(const ArgumentLogic&, const ArgumentLogic&) = default;
};

// Declares a pipeline return value, delivered to the caller. A return step
// has exactly one input and no outputs.
struct ReturnLogic {
  std::string name;
  Resource resource;

  friend bool operator==(const ReturnLogic&, const ReturnLogic&) = default;
};

// Binds a transform input/output slot to the mechanism that passes its
// locator to the process: a command-line flag, an environment variable, or
// both. An empty flag name means the locator is appended as a bare
// positional argument.
struct ContainerPort {
  std::string name;  // matches a transform input/output name
  std::optional<std::string> flag;
  std::optional<std::string> env;

  friend bool operator==(const ContainerPort&, const ContainerPort&) = default;
};

struct ContainerFlag {
  std::string name;
  std::optional<std::string> value;  // unset renders as "--name" alone

  friend bool operator==(const ContainerFlag&, const ContainerFlag&) = default;
};

struct ContainerEnv {
  std::string name;
  std::optional<std::string> value;

  friend bool operator==(const ContainerEnv&, const ContainerEnv&) = default;
};

// A transform backed by a controllable process. The local backend treats
// `image` as an executable path (resolved on PATH when it has no slash).
struct ContainerLogic {
  std::string image;
  std::vector<ContainerPort> inputs;
  std::vector<ContainerPort> outputs;
  std::vector<ContainerFlag> flags;
  std::vector<ContainerEnv> env;

  friend bool operator==(const ContainerLogic&, const ContainerLogic&) = default;
};

struct Pipeline;

// A whole pipeline invoked as a single step transform. `arguments` maps
// inner argument names to outer transform input names; `returns` maps inner
// return names to outer transform output names. Both maps are bijections
// onto the outer slot sets.
struct SubpipelineLogic {
  std::shared_ptr<const Pipeline> pipeline;
  std::map<std::string, std::string> arguments;
  std::map<std::string, std::string> returns;
};

bool operator==(const SubpipelineLogic& a, const SubpipelineLogic& b);

// One scripted behavior of a mock attempt. Succeed/Fail conclude after
// `delay`; Serve binds the reserved service port after `readiness_delay`
// and blocks until killed.
struct ScriptedBehavior {
  enum class Kind { Succeed, Fail, Serve };

  Kind kind = Kind::Succeed;
  std::map<std::string, std::string> outputs;  // output name -> file payload
  std::chrono::milliseconds delay{0};
  std::chrono::milliseconds readiness_delay{0};

  friend bool operator==(const ScriptedBehavior&, const ScriptedBehavior&) = default;
};

// Deterministic scripted transform used by the mock backend. Attempt i runs
// behavior min(i, last). Not expressible in pipeline documents; scripts are
// attached programmatically or via a separate scripts document.
struct ScriptedLogic {
  std::vector<ScriptedBehavior> attempts;

  friend bool operator==(const ScriptedLogic&, const ScriptedLogic&) = default;
};

// Exactly one variant is set, by construction of the variant.
struct TransformLogic {
  std::variant<ArgumentLogic, ReturnLogic, ContainerLogic, SubpipelineLogic,
               ScriptedLogic>
      value = ContainerLogic{};

  const ArgumentLogic* argument() const { return std::get_if<ArgumentLogic>(&value); }
  const ReturnLogic* ret() const { return std::get_if<ReturnLogic>(&value); }
  const ContainerLogic* container() const { return std::get_if<ContainerLogic>(&value); }
  const SubpipelineLogic* subpipeline() const { return std::get_if<SubpipelineLogic>(&value); }
  const ScriptedLogic* scripted() const { return std::get_if<ScriptedLogic>(&value); }

  friend bool operator==(const TransformLogic&, const TransformLogic&) = default;
};

// ---------------------------------------------------------------------------
// Steps and pipelines
// ---------------------------------------------------------------------------

struct TransformPort {
  std::string name;
  Resource resource;

  friend bool operator==(const TransformPort&, const TransformPort&) = default;
};

struct Transform {
  std::vector<TransformPort> inputs;
  std::vector<TransformPort> outputs;
  TransformLogic logic;

  const TransformPort* find_input(std::string_view name) const;
  const TransformPort* find_output(std::string_view name) const;

  friend bool operator==(const Transform&, const Transform&) = default;
};

// Wires one consumer input slot to a provider step's output slot.
struct StepInput {
  std::string name;  // consumer slot
  std::string provider_step_label;
  std::string provider_output_name;

  friend bool operator==(const StepInput&, const StepInput&) = default;
};

struct Step {
  std::string label;
  std::vector<StepInput> inputs;
  Transform transform;

  friend bool operator==(const Step&, const Step&) = default;
};

struct Pipeline {
  std::vector<Step> steps;

  friend bool operator==(const Pipeline&, const Pipeline&) = default;
};

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

enum class Severity { Error, Warning };

enum class DiagCode {
  // graph structure
  DuplicateLabel,
  InvalidLabel,
  InvalidName,
  UnknownProvider,
  UnknownProviderOutput,
  MissingInputBinding,
  DuplicateInputBinding,
  UnknownInputBinding,
  CycleDetected,
  ArityViolation,
  DuplicatePortName,
  DuplicateArgumentName,
  DuplicateReturnName,
  ContainerBinding,
  SubpipelineBinding,
  SubpipelineServiceOutput,
  NoReturnSteps,
  // document parsing
  SyntaxError,
  UnknownField,
  VariantViolation,
  FieldType,
  ReservedField,
};

struct Diagnostic {
  Severity severity = Severity::Error;
  DiagCode code = DiagCode::SyntaxError;
  std::string location;  // step label, field path, or "line:col"
  std::string message;
};

std::string_view to_string(DiagCode code);
std::string describe(const Diagnostic& d);
bool has_errors(const std::vector<Diagnostic>& diags);

// ---------------------------------------------------------------------------
// Dependency graph
// ---------------------------------------------------------------------------

// One dependency: the provider's output slot feeds the consumer's input
// slot, carrying the resource declared by the provider's transform output.
struct Edge {
  std::string provider;
  std::string output;
  std::string consumer;
  std::string input;
  Resource resource;
};

// Validated, indexed view of a pipeline's dataflow. Immutable after
// construction; safe to share across threads.
class DependencyGraph {
 public:
  const Pipeline& pipeline() const { return pipeline_; }
  const std::vector<Edge>& edges() const { return edges_; }

  bool has_step(std::string_view label) const;
  const Step& step(std::string_view label) const;
  std::size_t step_index(std::string_view label) const;

  // Edge indices into edges(), by the step's role on the edge.
  const std::vector<std::size_t>& in_edges(std::string_view label) const;
  const std::vector<std::size_t>& out_edges(std::string_view label) const;

  static bool is_argument(const Step& s) { return s.transform.logic.argument() != nullptr; }
  static bool is_return(const Step& s) { return s.transform.logic.ret() != nullptr; }
  static bool is_intermediate(const Step& s) { return !is_argument(s) && !is_return(s); }

 private:
  friend struct GraphBuilder;

  Pipeline pipeline_;
  std::vector<Edge> edges_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<std::vector<std::size_t>> in_by_step_;
  std::vector<std::vector<std::size_t>> out_by_step_;
};

struct BuildResult {
  std::optional<DependencyGraph> graph;
  std::vector<Diagnostic> errors;

  bool ok() const { return graph.has_value(); }
};

// Validates every structural invariant of the pipeline and produces its
// dependency graph. All violations are aggregated; graph is set iff there
// are none.
BuildResult build_graph(const Pipeline& pipeline);

// Deterministic topological order: providers before consumers, ties broken
// by lexicographic label order. Requires a valid graph.
std::vector<std::string> topo_order(const DependencyGraph& graph);

// Canonical edge enumeration order used by reports and CLI output:
// by topological position of the consumer, then by input name.
std::vector<std::size_t> canonical_edge_order(const DependencyGraph& graph);

// Full structural validation plus document-level warnings. Empty iff
// build_graph succeeds and the pipeline has at least one return step.
std::vector<Diagnostic> validate_document(const Pipeline& pipeline);

}  // namespace koji
