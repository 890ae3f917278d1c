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

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "koji/model.hpp"

namespace koji {

// A content or causal digest: SHA-256, so 32 bytes / 64 hex digits.
//
// The key property of a causal hash is that it identifies what an output
// WILL be before the producing process runs: it is a digest over the input
// hashes, the transform identity, and the output slot name, never over the
// output's bytes. Two computations with hash-equal inputs and identical
// transforms receive the same key, which is what makes cross-run and
// cross-machine cache reuse sound.
struct CausalHash {
  std::array<std::uint8_t, 32> bytes{};

  std::string hex() const;
  static std::optional<CausalHash> parse_hex(std::string_view hex);

  auto operator<=>(const CausalHash&) const = default;
};

enum class HashErrc {
  NotFound,           // path does not exist
  UnsupportedEntry,   // symlink, device, socket, fifo
  DuplicateInputName,
  MissingArgumentHash,
  UnknownArgument,
  Internal,
};

std::string_view to_string(HashErrc code);

class HashError : public std::runtime_error {
 public:
  HashError(HashErrc code, std::string subject, const std::string& message)
      : std::runtime_error(message), code(code), subject(std::move(subject)) {}

  HashErrc code;
  std::string subject;  // path or name the error is about
};

CausalHash sha256(std::span<const std::uint8_t> data);
CausalHash sha256(std::string_view data);

// Content hash of a file or directory tree.
//
//   file:      SHA256("file\0" || bytes)
//   directory: SHA256("dir\0"  || for each child in byte-wise name order:
//                                   LE64(len(name)) || name || kind || child digest)
// where kind is one byte, 'f' or 'd'. Symlinks and special files raise
// UnsupportedEntry; payloads must be self-contained trees.
CausalHash content_hash_path(const std::filesystem::path& path);

// Canonical serialization of a transform's behavior-relevant identity.
// Deterministic: field order is fixed, flag/env lists are sorted by name,
// and unset optional fields contribute a fixed absent marker, so equal
// logic values always serialize to equal bytes.
std::vector<std::uint8_t> transform_identity(const TransformLogic& logic);

// Causal hash of one output slot:
//
//   SHA256("causal\0" || for each input in byte-wise name order:
//                          LE64(len(name)) || name || input hash
//                     || LE64(len(identity)) || identity
//                     || LE64(len(output_name)) || output_name)
//
// `inputs` may arrive in any order; duplicates raise DuplicateInputName.
CausalHash causal_hash_output(std::span<const std::pair<std::string, CausalHash>> inputs,
                              std::span<const std::uint8_t> identity,
                              std::string_view output_name);

// One hashed edge, recorded for audit. `scope` is empty at the top level
// and "<step label>/" (nested as needed) inside subpipelines. A zero
// preimage size marks a caller-supplied argument hash.
struct HashTraceEntry {
  std::string scope;
  std::string provider;
  std::string output;
  std::string consumer;
  std::string input;
  std::size_t preimage_bytes = 0;
  CausalHash hash;
};

struct EdgeHashes {
  // Parallel to graph.edges().
  std::vector<CausalHash> by_edge;
  std::vector<HashTraceEntry> trace;

  const CausalHash& at(std::size_t edge_index) const { return by_edge.at(edge_index); }
};

// Computes the hash of every edge before anything executes. Argument-step
// outputs take the caller-supplied hash for the argument's name; subpipeline
// steps recurse, so an inner edge hashes to exactly the same value it would
// in a standalone run of the inner pipeline, and the outer output hash IS
// the inner return edge's hash.
EdgeHashes hash_pipeline(const DependencyGraph& graph,
                         const std::map<std::string, CausalHash>& argument_hashes);

}  // namespace koji
