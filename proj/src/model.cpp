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

#include "koji/model.hpp"

#include <algorithm>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

namespace koji {

namespace {

// Labels and slot names end up in filesystem paths and locator tables, so
// they must be non-empty and free of path separators.
bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  return s.find('/') == std::string_view::npos && s.find('\0') == std::string_view::npos;
}

constexpr int kMaxNestingDepth = 64;

}  // namespace

bool operator==(const SubpipelineLogic& a, const SubpipelineLogic& b) {
  if (a.arguments != b.arguments || a.returns != b.returns) return false;
  if (a.pipeline == b.pipeline) return true;  // same object or both null
  if (!a.pipeline || !b.pipeline) return false;
  return *a.pipeline == *b.pipeline;
}

const TransformPort* Transform::find_input(std::string_view name) const {
  for (const auto& p : inputs)
    if (p.name == name) return &p;
  return nullptr;
}

const TransformPort* Transform::find_output(std::string_view name) const {
  for (const auto& p : outputs)
    if (p.name == name) return &p;
  return nullptr;
}

std::string_view to_string(DiagCode code) {
  switch (code) {
    case DiagCode::DuplicateLabel: return "DuplicateLabel";
    case DiagCode::InvalidLabel: return "InvalidLabel";
    case DiagCode::InvalidName: return "InvalidName";
    case DiagCode::UnknownProvider: return "UnknownProvider";
    case DiagCode::UnknownProviderOutput: return "UnknownProviderOutput";
    case DiagCode::MissingInputBinding: return "MissingInputBinding";
    case DiagCode::DuplicateInputBinding: return "DuplicateInputBinding";
    case DiagCode::UnknownInputBinding: return "UnknownInputBinding";
    case DiagCode::CycleDetected: return "CycleDetected";
    case DiagCode::ArityViolation: return "ArityViolation";
    case DiagCode::DuplicatePortName: return "DuplicatePortName";
    case DiagCode::DuplicateArgumentName: return "DuplicateArgumentName";
    case DiagCode::DuplicateReturnName: return "DuplicateReturnName";
    case DiagCode::ContainerBinding: return "ContainerBinding";
    case DiagCode::SubpipelineBinding: return "SubpipelineBinding";
    case DiagCode::SubpipelineServiceOutput: return "SubpipelineServiceOutput";
    case DiagCode::NoReturnSteps: return "NoReturnSteps";
    case DiagCode::SyntaxError: return "SyntaxError";
    case DiagCode::UnknownField: return "UnknownField";
    case DiagCode::VariantViolation: return "VariantViolation";
    case DiagCode::FieldType: return "FieldType";
    case DiagCode::ReservedField: return "ReservedField";
  }
  return "Unknown";
}

std::string describe(const Diagnostic& d) {
  std::ostringstream out;
  out << (d.severity == Severity::Error ? "error" : "warning");
  out << " [" << to_string(d.code) << "]";
  if (!d.location.empty()) out << " at " << d.location;
  out << ": " << d.message;
  return out.str();
}

bool has_errors(const std::vector<Diagnostic>& diags) {
  return std::any_of(diags.begin(), diags.end(),
                     [](const Diagnostic& d) { return d.severity == Severity::Error; });
}

bool DependencyGraph::has_step(std::string_view label) const {
  return index_.find(label) != index_.end();
}

const Step& DependencyGraph::step(std::string_view label) const {
  return pipeline_.steps.at(step_index(label));
}

std::size_t DependencyGraph::step_index(std::string_view label) const {
  auto it = index_.find(label);
  if (it == index_.end())
    throw std::out_of_range("no step labeled '" + std::string(label) + "'");
  return it->second;
}

const std::vector<std::size_t>& DependencyGraph::in_edges(std::string_view label) const {
  return in_by_step_[step_index(label)];
}

const std::vector<std::size_t>& DependencyGraph::out_edges(std::string_view label) const {
  return out_by_step_[step_index(label)];
}

struct GraphBuilder {
  const Pipeline& pipeline;
  int depth;
  std::vector<Diagnostic> errors;

  void error(DiagCode code, std::string location, std::string message) {
    errors.push_back({Severity::Error, code, std::move(location), std::move(message)});
  }

  void check_ports(const Step& s) {
    std::set<std::string> seen;
    for (const auto& p : s.transform.inputs) {
      if (!valid_name(p.name))
        error(DiagCode::InvalidName, s.label, "transform input name '" + p.name + "' is invalid");
      if (!seen.insert(p.name).second)
        error(DiagCode::DuplicatePortName, s.label, "duplicate transform input '" + p.name + "'");
    }
    seen.clear();
    for (const auto& p : s.transform.outputs) {
      if (!valid_name(p.name))
        error(DiagCode::InvalidName, s.label, "transform output name '" + p.name + "' is invalid");
      if (!seen.insert(p.name).second)
        error(DiagCode::DuplicatePortName, s.label, "duplicate transform output '" + p.name + "'");
    }
  }

  void check_container(const Step& s, const ContainerLogic& c) {
    if (c.image.empty())
      error(DiagCode::ContainerBinding, s.label, "container image is empty");
    auto check_side = [&](const std::vector<ContainerPort>& ports,
                          const std::vector<TransformPort>& slots, const char* side) {
      std::set<std::string> seen;
      for (const auto& p : ports) {
        if (!seen.insert(p.name).second)
          error(DiagCode::ContainerBinding, s.label,
                std::string("duplicate container ") + side + " binding '" + p.name + "'");
        bool declared = std::any_of(slots.begin(), slots.end(),
                                    [&](const TransformPort& t) { return t.name == p.name; });
        if (!declared)
          error(DiagCode::ContainerBinding, s.label,
                std::string("container ") + side + " binding '" + p.name +
                    "' does not match a declared transform " + side);
        if (!p.flag && !p.env)
          error(DiagCode::ContainerBinding, s.label,
                std::string("container ") + side + " binding '" + p.name +
                    "' has neither flag nor env");
      }
    };
    check_side(c.inputs, s.transform.inputs, "input");
    check_side(c.outputs, s.transform.outputs, "output");
  }

  void check_subpipeline(const Step& s, const SubpipelineLogic& sub) {
    if (depth >= kMaxNestingDepth) {
      error(DiagCode::SubpipelineBinding, s.label, "pipeline nesting too deep");
      return;
    }
    if (!sub.pipeline) {
      error(DiagCode::SubpipelineBinding, s.label, "subpipeline has no inner pipeline");
      return;
    }
    GraphBuilder inner{*sub.pipeline, depth + 1, {}};
    auto result = inner.build();
    for (auto& d : inner.errors) {
      d.location = s.label + "/" + d.location;
      errors.push_back(std::move(d));
    }
    if (!result) return;

    // Collect inner argument/return names and their kinds.
    std::map<std::string, bool> inner_args;  // name -> is_service
    std::map<std::string, bool> inner_rets;
    for (const auto& is : sub.pipeline->steps) {
      if (const auto* a = is.transform.logic.argument())
        inner_args.emplace(a->name, a->resource.is_service());
      if (const auto* r = is.transform.logic.ret())
        inner_rets.emplace(r->name, r->resource.is_service());
    }

    auto check_map = [&](const std::map<std::string, std::string>& m,
                         const std::map<std::string, bool>& inner_names,
                         const std::vector<TransformPort>& outer_slots, const char* what) {
      for (const auto& [inner_name, outer_name] : m) {
        if (inner_names.find(inner_name) == inner_names.end())
          error(DiagCode::SubpipelineBinding, s.label,
                std::string("mapped ") + what + " '" + inner_name +
                    "' does not exist in the inner pipeline");
        if (s.transform.find_input(outer_name) == nullptr &&
            s.transform.find_output(outer_name) == nullptr)
          error(DiagCode::SubpipelineBinding, s.label,
                std::string(what) + " '" + inner_name + "' maps to undeclared slot '" +
                    outer_name + "'");
      }
      for (const auto& [name, unused] : inner_names) {
        (void)unused;
        if (m.find(name) == m.end())
          error(DiagCode::SubpipelineBinding, s.label,
                std::string("inner ") + what + " '" + name + "' is not mapped");
      }
      // Values must cover the outer slot set exactly once each.
      std::set<std::string> values;
      for (const auto& [k, v] : m) {
        (void)k;
        if (!values.insert(v).second)
          error(DiagCode::SubpipelineBinding, s.label,
                std::string("outer slot '") + v + "' is bound by more than one " + what);
      }
      for (const auto& slot : outer_slots) {
        if (values.find(slot.name) == values.end())
          error(DiagCode::SubpipelineBinding, s.label,
                std::string("outer slot '") + slot.name + "' has no " + what + " mapping");
      }
    };
    check_map(sub.arguments, inner_args, s.transform.inputs, "argument");
    check_map(sub.returns, inner_rets, s.transform.outputs, "return");

    // Kind agreement across the boundary; service-kind returns cannot cross
    // it because a subpipeline's services are torn down when it delivers.
    for (const auto& [inner_name, outer_name] : sub.arguments) {
      auto it = inner_args.find(inner_name);
      const TransformPort* slot = s.transform.find_input(outer_name);
      if (it != inner_args.end() && slot != nullptr && slot->resource.is_service() != it->second)
        error(DiagCode::SubpipelineBinding, s.label,
              "argument '" + inner_name + "' and outer input '" + outer_name +
                  "' disagree on file vs service kind");
    }
    for (const auto& [inner_name, outer_name] : sub.returns) {
      auto it = inner_rets.find(inner_name);
      if (it != inner_rets.end() && it->second)
        error(DiagCode::SubpipelineServiceOutput, s.label,
              "inner return '" + inner_name + "' is a service; only file returns can cross "
              "a subpipeline boundary");
      const TransformPort* slot = s.transform.find_output(outer_name);
      if (slot != nullptr && slot->resource.is_service())
        error(DiagCode::SubpipelineServiceOutput, s.label,
              "outer output '" + outer_name + "' is a service; subpipeline outputs must be files");
    }
  }

  void check_logic(const Step& s) {
    const auto& t = s.transform;
    if (const auto* a = t.logic.argument()) {
      if (!valid_name(a->name))
        error(DiagCode::InvalidName, s.label, "argument name '" + a->name + "' is invalid");
      if (!t.inputs.empty() || t.outputs.size() != 1)
        error(DiagCode::ArityViolation, s.label,
              "argument step must declare no inputs and exactly one output");
    } else if (const auto* r = t.logic.ret()) {
      if (!valid_name(r->name))
        error(DiagCode::InvalidName, s.label, "return name '" + r->name + "' is invalid");
      if (t.inputs.size() != 1 || !t.outputs.empty())
        error(DiagCode::ArityViolation, s.label,
              "return step must declare exactly one input and no outputs");
    } else if (const auto* c = t.logic.container()) {
      check_container(s, *c);
    } else if (const auto* sub = t.logic.subpipeline()) {
      check_subpipeline(s, *sub);
    }
    // Scripted logic has no structural constraints.
  }

  void check_bindings(const Step& s, const std::map<std::string, std::size_t, std::less<>>& index,
                      std::vector<Edge>& edges) {
    std::set<std::string> bound;
    for (const auto& in : s.inputs) {
      if (!bound.insert(in.name).second) {
        error(DiagCode::DuplicateInputBinding, s.label,
              "input slot '" + in.name + "' is bound more than once");
        continue;
      }
      const TransformPort* slot = s.transform.find_input(in.name);
      if (slot == nullptr) {
        error(DiagCode::UnknownInputBinding, s.label,
              "binding for '" + in.name + "' does not match a declared transform input");
        continue;
      }
      auto pit = index.find(in.provider_step_label);
      if (pit == index.end()) {
        error(DiagCode::UnknownProvider, s.label,
              "input '" + in.name + "' references unknown step '" + in.provider_step_label + "'");
        continue;
      }
      const Step& provider = pipeline.steps[pit->second];
      const TransformPort* out = provider.transform.find_output(in.provider_output_name);
      if (out == nullptr) {
        error(DiagCode::UnknownProviderOutput, s.label,
              "input '" + in.name + "' references output '" + in.provider_output_name +
                  "' which step '" + provider.label + "' does not declare");
        continue;
      }
      edges.push_back({provider.label, out->name, s.label, slot->name, out->resource});
    }
    for (const auto& slot : s.transform.inputs) {
      if (bound.find(slot.name) == bound.end())
        error(DiagCode::MissingInputBinding, s.label,
              "transform input '" + slot.name + "' has no binding");
    }
  }

  // Reports one cycle as "a -> b -> ... -> a" via depth-first search.
  void check_cycles(const std::map<std::string, std::size_t, std::less<>>& index,
                    const std::vector<Edge>& edges) {
    const std::size_t n = pipeline.steps.size();
    std::vector<std::vector<std::size_t>> next(n);
    for (const auto& e : edges)
      next[index.at(e.provider)].push_back(index.at(e.consumer));

    enum { White, Grey, Black };
    std::vector<int> color(n, White);
    std::vector<std::size_t> stack;

    auto report = [&](std::size_t back_to) {
      std::ostringstream path;
      auto it = std::find(stack.begin(), stack.end(), back_to);
      for (; it != stack.end(); ++it) path << pipeline.steps[*it].label << " -> ";
      path << pipeline.steps[back_to].label;
      error(DiagCode::CycleDetected, pipeline.steps[back_to].label,
            "dependency cycle: " + path.str());
    };

    // Iterative DFS; the explicit stack mirrors the grey path.
    for (std::size_t root = 0; root < n; ++root) {
      if (color[root] != White) continue;
      std::vector<std::pair<std::size_t, std::size_t>> work{{root, 0}};
      color[root] = Grey;
      stack.push_back(root);
      while (!work.empty()) {
        auto& [v, i] = work.back();
        if (i < next[v].size()) {
          std::size_t w = next[v][i++];
          if (color[w] == Grey) {
            report(w);
            // One cycle per component is enough signal.
            for (auto& c : color)
              if (c == Grey) c = Black;
            work.clear();
            stack.clear();
            break;
          }
          if (color[w] == White) {
            color[w] = Grey;
            stack.push_back(w);
            work.push_back({w, 0});
          }
        } else {
          color[v] = Black;
          stack.pop_back();
          work.pop_back();
        }
      }
    }
  }

  std::optional<DependencyGraph> build() {
    std::map<std::string, std::size_t, std::less<>> index;
    for (std::size_t i = 0; i < pipeline.steps.size(); ++i) {
      const Step& s = pipeline.steps[i];
      if (!valid_name(s.label)) {
        error(DiagCode::InvalidLabel, s.label,
              "step label must be non-empty and must not contain '/'");
        continue;
      }
      if (!index.emplace(s.label, i).second)
        error(DiagCode::DuplicateLabel, s.label, "step label '" + s.label + "' is reused");
    }

    std::set<std::string> arg_names, ret_names;
    for (const Step& s : pipeline.steps) {
      check_ports(s);
      check_logic(s);
      if (const auto* a = s.transform.logic.argument())
        if (!arg_names.insert(a->name).second)
          error(DiagCode::DuplicateArgumentName, s.label,
                "argument name '" + a->name + "' is declared by more than one step");
      if (const auto* r = s.transform.logic.ret())
        if (!ret_names.insert(r->name).second)
          error(DiagCode::DuplicateReturnName, s.label,
                "return name '" + r->name + "' is declared by more than one step");
    }

    std::vector<Edge> edges;
    for (const Step& s : pipeline.steps) check_bindings(s, index, edges);

    if (errors.empty()) check_cycles(index, edges);
    if (!errors.empty()) return std::nullopt;

    DependencyGraph g;
    g.pipeline_ = pipeline;
    g.edges_ = std::move(edges);
    g.index_ = std::move(index);
    g.in_by_step_.resize(pipeline.steps.size());
    g.out_by_step_.resize(pipeline.steps.size());
    for (std::size_t i = 0; i < g.edges_.size(); ++i) {
      g.out_by_step_[g.index_.at(g.edges_[i].provider)].push_back(i);
      g.in_by_step_[g.index_.at(g.edges_[i].consumer)].push_back(i);
    }
    return g;
  }
};

BuildResult build_graph(const Pipeline& pipeline) {
  GraphBuilder b{pipeline, 0, {}};
  auto graph = b.build();
  return {std::move(graph), std::move(b.errors)};
}

std::vector<std::string> topo_order(const DependencyGraph& graph) {
  const auto& steps = graph.pipeline().steps;
  std::map<std::string, std::size_t> indegree;
  for (const auto& s : steps) indegree[s.label] = 0;
  for (const auto& e : graph.edges()) indegree[e.consumer]++;

  // Min-heap on label gives the lexicographic tie-break.
  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto& [label, deg] : indegree)
    if (deg == 0) ready.push(label);

  std::vector<std::string> order;
  order.reserve(steps.size());
  while (!ready.empty()) {
    std::string label = ready.top();
    ready.pop();
    order.push_back(label);
    for (std::size_t ei : graph.out_edges(label)) {
      const std::string& consumer = graph.edges()[ei].consumer;
      if (--indegree[consumer] == 0) ready.push(consumer);
    }
  }
  if (order.size() != steps.size())
    throw std::logic_error("topo_order called on a cyclic graph");
  return order;
}

std::vector<std::size_t> canonical_edge_order(const DependencyGraph& graph) {
  auto order = topo_order(graph);
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;

  std::vector<std::size_t> ids(graph.edges().size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
    const Edge& ea = graph.edges()[a];
    const Edge& eb = graph.edges()[b];
    auto ka = std::make_pair(pos.at(ea.consumer), ea.input);
    auto kb = std::make_pair(pos.at(eb.consumer), eb.input);
    return ka < kb;
  });
  return ids;
}

std::vector<Diagnostic> validate_document(const Pipeline& pipeline) {
  BuildResult r = build_graph(pipeline);
  std::vector<Diagnostic> diags = std::move(r.errors);
  if (r.ok()) {
    bool any_return = std::any_of(pipeline.steps.begin(), pipeline.steps.end(), [](const Step& s) {
      return DependencyGraph::is_return(s);
    });
    if (!any_return)
      diags.push_back({Severity::Warning, DiagCode::NoReturnSteps, "",
                       "pipeline declares no return steps; a run delivers nothing"});
  }
  return diags;
}

}  // namespace koji
