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

#include "koji/typecheck.hpp"

#include <sstream>

namespace koji {

namespace {

std::string show(const std::optional<std::string>& v) {
  return v ? *v : std::string("<any>");
}

}  // namespace

std::string_view to_string(TypeErrorKind kind) {
  switch (kind) {
    case TypeErrorKind::KindMismatch: return "KindMismatch";
    case TypeErrorKind::DirectoryMismatch: return "DirectoryMismatch";
    case TypeErrorKind::FormatMismatch: return "FormatMismatch";
    case TypeErrorKind::EncodingMismatch: return "EncodingMismatch";
    case TypeErrorKind::ProtocolMismatch: return "ProtocolMismatch";
  }
  return "Unknown";
}

std::string describe(const TypeDiagnostic& d) {
  std::ostringstream out;
  out << "error [" << to_string(d.kind) << "] on " << d.provider << "." << d.output << " -> "
      << d.consumer << "." << d.input << ": provided " << d.provided << ", expected "
      << d.expected;
  return out.str();
}

std::optional<TypeErrorKind> fulfills(const Resource& provided, const Resource& expected) {
  if (provided.is_file() != expected.is_file()) return TypeErrorKind::KindMismatch;

  if (provided.is_file()) {
    const FileResource& p = provided.file();
    const FileResource& e = expected.file();
    // The directory flag is not optional, so it must agree exactly.
    if (p.directory != e.directory) return TypeErrorKind::DirectoryMismatch;
    if (p.format && e.format && *p.format != *e.format) return TypeErrorKind::FormatMismatch;
    if (p.encoding && e.encoding && *p.encoding != *e.encoding)
      return TypeErrorKind::EncodingMismatch;
    return std::nullopt;
  }

  const ServiceResource& p = provided.service();
  const ServiceResource& e = expected.service();
  if (p.protocol && e.protocol && *p.protocol != *e.protocol)
    return TypeErrorKind::ProtocolMismatch;
  return std::nullopt;
}

std::vector<TypeDiagnostic> check_pipeline(const DependencyGraph& graph) {
  std::vector<TypeDiagnostic> diags;
  for (std::size_t ei : canonical_edge_order(graph)) {
    const Edge& e = graph.edges()[ei];
    const TransformPort* slot = graph.step(e.consumer).transform.find_input(e.input);
    // build_graph guarantees the slot exists.
    const Resource& expected = slot->resource;
    auto kind = fulfills(e.resource, expected);
    if (!kind) continue;

    TypeDiagnostic d;
    d.provider = e.provider;
    d.output = e.output;
    d.consumer = e.consumer;
    d.input = e.input;
    d.kind = *kind;
    switch (*kind) {
      case TypeErrorKind::KindMismatch:
        d.provided = e.resource.is_file() ? "file" : "service";
        d.expected = expected.is_file() ? "file" : "service";
        break;
      case TypeErrorKind::DirectoryMismatch:
        d.provided = e.resource.file().directory ? "directory" : "single file";
        d.expected = expected.file().directory ? "directory" : "single file";
        break;
      case TypeErrorKind::FormatMismatch:
        d.provided = show(e.resource.file().format);
        d.expected = show(expected.file().format);
        break;
      case TypeErrorKind::EncodingMismatch:
        d.provided = show(e.resource.file().encoding);
        d.expected = show(expected.file().encoding);
        break;
      case TypeErrorKind::ProtocolMismatch:
        d.provided = show(e.resource.service().protocol);
        d.expected = show(expected.service().protocol);
        break;
    }
    diags.push_back(std::move(d));
  }
  return diags;
}

}  // namespace koji
