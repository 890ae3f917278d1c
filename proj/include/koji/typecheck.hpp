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

#include <optional>
#include <string>
#include <vector>

#include "koji/model.hpp"

namespace koji {

enum class TypeErrorKind {
  KindMismatch,       // file vs service
  DirectoryMismatch,  // single file vs directory
  FormatMismatch,
  EncodingMismatch,
  ProtocolMismatch,
};

std::string_view to_string(TypeErrorKind kind);

struct TypeDiagnostic {
  std::string provider;
  std::string output;
  std::string consumer;
  std::string input;
  TypeErrorKind kind = TypeErrorKind::KindMismatch;
  std::string provided;  // rendered provider-side value
  std::string expected;  // rendered consumer-side value
};

std::string describe(const TypeDiagnostic& d);

// Whether a resource produced by a provider satisfies what a consumer
// declares. Identifiers are compared only when both sides specify them; an
// absent identifier is a wildcard. Checks run in a fixed order (kind,
// directory, format, encoding, protocol) and the first failure is returned;
// nullopt means the edge is well typed.
std::optional<TypeErrorKind> fulfills(const Resource& provided, const Resource& expected);

// Checks every edge of the graph, ordered by the consumer's topological
// position and then by input name. One diagnostic per failing edge.
std::vector<TypeDiagnostic> check_pipeline(const DependencyGraph& graph);

}  // namespace koji
