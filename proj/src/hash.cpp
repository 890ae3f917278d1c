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

#include "koji/hash.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

namespace koji {

namespace fs = std::filesystem;

namespace {

// Domain separation tags. The NUL is part of the tag.
constexpr std::string_view kFileTag{"file\0", 5};
constexpr std::string_view kDirTag{"dir\0", 4};
constexpr std::string_view kCausalTag{"causal\0", 7};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
      throw HashError(HashErrc::Internal, "", "SHA-256 context initialization failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t len) {
    if (EVP_DigestUpdate(ctx_, data, len) != 1)
      throw HashError(HashErrc::Internal, "", "SHA-256 update failed");
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update(std::span<const std::uint8_t> s) { update(s.data(), s.size()); }

  void update_u64(std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    update(b, 8);
  }

  CausalHash finish() {
    CausalHash h;
    unsigned int n = 0;
    if (EVP_DigestFinal_ex(ctx_, h.bytes.data(), &n) != 1 || n != h.bytes.size())
      throw HashError(HashErrc::Internal, "", "SHA-256 finalization failed");
    return h;
  }

 private:
  EVP_MD_CTX* ctx_;
};

CausalHash hash_regular_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw HashError(HashErrc::NotFound, path.string(), "cannot open '" + path.string() + "'");
  Sha256 d;
  d.update(kFileTag);
  char buf[64 * 1024];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    d.update(buf, static_cast<std::size_t>(in.gcount()));
  if (in.bad())
    throw HashError(HashErrc::Internal, path.string(), "read failed on '" + path.string() + "'");
  return d.finish();
}

CausalHash hash_tree(const fs::path& path);

CausalHash hash_directory(const fs::path& path) {
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(path)) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().native() < b.filename().native();
  });

  Sha256 d;
  d.update(kDirTag);
  for (const auto& entry : entries) {
    CausalHash child = hash_tree(entry);
    bool is_dir = fs::symlink_status(entry).type() == fs::file_type::directory;
    const std::string name = entry.filename().native();
    d.update_u64(name.size());
    d.update(name);
    const char kind = is_dir ? 'd' : 'f';
    d.update(&kind, 1);
    d.update(std::span<const std::uint8_t>(child.bytes));
  }
  return d.finish();
}

CausalHash hash_tree(const fs::path& path) {
  switch (fs::symlink_status(path).type()) {
    case fs::file_type::regular:
      return hash_regular_file(path);
    case fs::file_type::directory:
      return hash_directory(path);
    case fs::file_type::not_found:
      throw HashError(HashErrc::NotFound, path.string(), "no such path: '" + path.string() + "'");
    default:
      throw HashError(HashErrc::UnsupportedEntry, path.string(),
                      "'" + path.string() + "' is not a regular file or directory");
  }
}

// ---------------------------------------------------------------------------
// Canonical serialization.
//
// Injective and deterministic framing: every message writes every field in
// field-number order. A field is LE32(number) followed by either LE64(length)
// and the content bytes, or an absent marker of eight 0xFF bytes (no real
// length can collide with it). Lists are LE64(count) followed by
// length-prefixed elements. Name-keyed lists whose order carries no meaning
// (container flags and env) are sorted by name before encoding.
// ---------------------------------------------------------------------------

using Bytes = std::vector<std::uint8_t>;

class Enc {
 public:
  void raw(const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + len);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void field(std::uint32_t num, const Bytes& content) {
    u32(num);
    u64(content.size());
    raw(content.data(), content.size());
  }
  void str_field(std::uint32_t num, std::string_view s) {
    u32(num);
    u64(s.size());
    raw(s.data(), s.size());
  }
  void opt_str_field(std::uint32_t num, const std::optional<std::string>& s) {
    if (s)
      str_field(num, *s);
    else
      absent(num);
  }
  void bool_field(std::uint32_t num, bool v) {
    u32(num);
    u64(1);
    buf_.push_back(v ? 1 : 0);
  }
  void u64_field(std::uint32_t num, std::uint64_t v) {
    u32(num);
    u64(8);
    u64(v);
  }
  void list_field(std::uint32_t num, const std::vector<Bytes>& elements) {
    u32(num);
    Bytes content;
    {
      Enc inner;
      inner.u64(elements.size());
      for (const auto& e : elements) {
        inner.u64(e.size());
        inner.raw(e.data(), e.size());
      }
      content = std::move(inner).take();
    }
    u64(content.size());
    raw(content.data(), content.size());
  }
  void absent(std::uint32_t num) {
    u32(num);
    for (int i = 0; i < 8; ++i) buf_.push_back(0xFF);
  }

  Bytes take() && { return std::move(buf_); }

 private:
  Bytes buf_;
};

Bytes encode_file_resource(const FileResource& f) {
  Enc e;
  e.bool_field(1, f.directory);
  e.opt_str_field(2, f.encoding);
  e.opt_str_field(3, f.format);
  return std::move(e).take();
}

Bytes encode_service_resource(const ServiceResource& s) {
  Enc e;
  e.opt_str_field(1, s.protocol);
  return std::move(e).take();
}

Bytes encode_resource(const Resource& r) {
  Enc e;
  if (r.is_file()) {
    e.field(1, encode_file_resource(r.file()));
    e.absent(2);
  } else {
    e.absent(1);
    e.field(2, encode_service_resource(r.service()));
  }
  return std::move(e).take();
}

Bytes encode_transform_port(const TransformPort& p) {
  Enc e;
  e.str_field(1, p.name);
  e.field(10, encode_resource(p.resource));
  return std::move(e).take();
}

Bytes encode_argument_logic(const ArgumentLogic& a) {
  Enc e;
  e.str_field(1, a.name);
  e.field(2, encode_resource(a.resource));
  return std::move(e).take();
}

Bytes encode_return_logic(const ReturnLogic& r) {
  Enc e;
  e.str_field(1, r.name);
  e.field(2, encode_resource(r.resource));
  return std::move(e).take();
}

Bytes encode_container_port(const ContainerPort& p) {
  Enc e;
  e.str_field(1, p.name);
  e.opt_str_field(2, p.flag);
  e.opt_str_field(3, p.env);
  e.absent(4);  // reserved format slot
  return std::move(e).take();
}

Bytes encode_named_value(std::uint32_t name_num, std::uint32_t value_num, const std::string& name,
                         const std::optional<std::string>& value) {
  Enc e;
  e.str_field(name_num, name);
  e.opt_str_field(value_num, value);
  return std::move(e).take();
}

Bytes encode_container_logic(const ContainerLogic& c) {
  Enc e;
  e.str_field(10, c.image);

  std::vector<Bytes> inputs, outputs;
  for (const auto& p : c.inputs) inputs.push_back(encode_container_port(p));
  for (const auto& p : c.outputs) outputs.push_back(encode_container_port(p));
  e.list_field(20, inputs);
  e.list_field(21, outputs);

  auto flags = c.flags;
  std::stable_sort(flags.begin(), flags.end(),
                   [](const ContainerFlag& a, const ContainerFlag& b) { return a.name < b.name; });
  std::vector<Bytes> flag_bytes;
  for (const auto& f : flags) flag_bytes.push_back(encode_named_value(1, 2, f.name, f.value));
  e.list_field(22, flag_bytes);

  auto env = c.env;
  std::stable_sort(env.begin(), env.end(),
                   [](const ContainerEnv& a, const ContainerEnv& b) { return a.name < b.name; });
  std::vector<Bytes> env_bytes;
  for (const auto& v : env) env_bytes.push_back(encode_named_value(1, 2, v.name, v.value));
  e.list_field(23, env_bytes);

  return std::move(e).take();
}

Bytes encode_transform_logic(const TransformLogic& logic);

Bytes encode_transform(const Transform& t) {
  Enc e;
  std::vector<Bytes> inputs, outputs;
  for (const auto& p : t.inputs) inputs.push_back(encode_transform_port(p));
  for (const auto& p : t.outputs) outputs.push_back(encode_transform_port(p));
  e.list_field(1, inputs);
  e.list_field(2, outputs);
  e.field(3, encode_transform_logic(t.logic));
  return std::move(e).take();
}

Bytes encode_step_input(const StepInput& in) {
  Enc e;
  e.str_field(1, in.name);
  e.str_field(2, in.provider_step_label);
  e.str_field(3, in.provider_output_name);
  return std::move(e).take();
}

Bytes encode_step(const Step& s) {
  Enc e;
  e.str_field(1, s.label);
  std::vector<Bytes> inputs;
  for (const auto& in : s.inputs) inputs.push_back(encode_step_input(in));
  e.list_field(2, inputs);
  e.field(3, encode_transform(s.transform));
  return std::move(e).take();
}

Bytes encode_pipeline(const Pipeline& p) {
  Enc e;
  std::vector<Bytes> steps;
  for (const auto& s : p.steps) steps.push_back(encode_step(s));
  e.list_field(1, steps);
  return std::move(e).take();
}

Bytes encode_subpipeline_logic(const SubpipelineLogic& sub) {
  Enc e;
  if (sub.pipeline)
    e.field(1, encode_pipeline(*sub.pipeline));
  else
    e.absent(1);
  auto map_field = [&e](std::uint32_t num, const std::map<std::string, std::string>& m) {
    std::vector<Bytes> pairs;
    for (const auto& [k, v] : m) {
      Enc pe;
      pe.str_field(1, k);
      pe.str_field(2, v);
      pairs.push_back(std::move(pe).take());
    }
    e.list_field(num, pairs);
  };
  map_field(2, sub.arguments);
  map_field(3, sub.returns);
  return std::move(e).take();
}

Bytes encode_scripted_behavior(const ScriptedBehavior& b) {
  Enc e;
  Bytes kind{static_cast<std::uint8_t>(b.kind)};
  e.field(1, kind);
  std::vector<Bytes> outputs;
  for (const auto& [name, content] : b.outputs) {
    Enc oe;
    oe.str_field(1, name);
    oe.str_field(2, content);
    outputs.push_back(std::move(oe).take());
  }
  e.list_field(2, outputs);
  e.u64_field(3, static_cast<std::uint64_t>(b.delay.count()));
  e.u64_field(4, static_cast<std::uint64_t>(b.readiness_delay.count()));
  return std::move(e).take();
}

Bytes encode_scripted_logic(const ScriptedLogic& s) {
  Enc e;
  std::vector<Bytes> attempts;
  for (const auto& b : s.attempts) attempts.push_back(encode_scripted_behavior(b));
  e.list_field(1, attempts);
  return std::move(e).take();
}

Bytes encode_transform_logic(const TransformLogic& logic) {
  Enc e;
  if (const auto* a = logic.argument())
    e.field(100, encode_argument_logic(*a));
  else
    e.absent(100);
  if (const auto* r = logic.ret())
    e.field(200, encode_return_logic(*r));
  else
    e.absent(200);
  if (const auto* c = logic.container())
    e.field(300, encode_container_logic(*c));
  else
    e.absent(300);
  if (const auto* sub = logic.subpipeline())
    e.field(400, encode_subpipeline_logic(*sub));
  else
    e.absent(400);
  if (const auto* sc = logic.scripted())
    e.field(500, encode_scripted_logic(*sc));
  else
    e.absent(500);
  return std::move(e).take();
}

// Builds the causal preimage so callers can both hash it and measure it.
Bytes causal_preimage(std::span<const std::pair<std::string, CausalHash>> inputs,
                      std::span<const std::uint8_t> identity, std::string_view output_name) {
  std::vector<std::pair<std::string, CausalHash>> sorted(inputs.begin(), inputs.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i - 1].first == sorted[i].first)
      throw HashError(HashErrc::DuplicateInputName, sorted[i].first,
                      "input name '" + sorted[i].first + "' appears twice");
  }

  Enc e;
  e.raw(kCausalTag.data(), kCausalTag.size());
  for (const auto& [name, hash] : sorted) {
    e.u64(name.size());
    e.raw(name.data(), name.size());
    e.raw(hash.bytes.data(), hash.bytes.size());
  }
  e.u64(identity.size());
  e.raw(identity.data(), identity.size());
  e.u64(output_name.size());
  e.raw(output_name.data(), output_name.size());
  return std::move(e).take();
}

}  // namespace

std::string CausalHash::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (std::uint8_t b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xF]);
  }
  return out;
}

std::optional<CausalHash> CausalHash::parse_hex(std::string_view hex) {
  if (hex.size() != 64) return std::nullopt;
  CausalHash h;
  for (std::size_t i = 0; i < 32; ++i) {
    auto nibble = [](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'a' && c <= 'f') return c - 'a' + 10;
      if (c >= 'A' && c <= 'F') return c - 'A' + 10;
      return -1;
    };
    int hi = nibble(hex[2 * i]);
    int lo = nibble(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) return std::nullopt;
    h.bytes[i] = static_cast<std::uint8_t>((hi << 4) | lo);
  }
  return h;
}

std::string_view to_string(HashErrc code) {
  switch (code) {
    case HashErrc::NotFound: return "NotFound";
    case HashErrc::UnsupportedEntry: return "UnsupportedEntry";
    case HashErrc::DuplicateInputName: return "DuplicateInputName";
    case HashErrc::MissingArgumentHash: return "MissingArgumentHash";
    case HashErrc::UnknownArgument: return "UnknownArgument";
    case HashErrc::Internal: return "Internal";
  }
  return "Unknown";
}

CausalHash sha256(std::span<const std::uint8_t> data) {
  Sha256 d;
  d.update(data);
  return d.finish();
}

CausalHash sha256(std::string_view data) {
  Sha256 d;
  d.update(data);
  return d.finish();
}

CausalHash content_hash_path(const std::filesystem::path& path) { return hash_tree(path); }

std::vector<std::uint8_t> transform_identity(const TransformLogic& logic) {
  return encode_transform_logic(logic);
}

CausalHash causal_hash_output(std::span<const std::pair<std::string, CausalHash>> inputs,
                              std::span<const std::uint8_t> identity,
                              std::string_view output_name) {
  Bytes pre = causal_preimage(inputs, identity, output_name);
  return sha256(std::span<const std::uint8_t>(pre));
}

namespace {

struct LevelResult {
  std::vector<CausalHash> by_edge;
  std::vector<HashTraceEntry> trace;
};

LevelResult hash_level(const DependencyGraph& graph,
                       const std::map<std::string, CausalHash>& argument_hashes,
                       const std::string& scope) {
  std::set<std::string> declared_args;
  for (const Step& s : graph.pipeline().steps)
    if (const auto* a = s.transform.logic.argument()) declared_args.insert(a->name);
  for (const auto& [name, hash] : argument_hashes) {
    (void)hash;
    if (declared_args.find(name) == declared_args.end())
      throw HashError(HashErrc::UnknownArgument, name,
                      "no pipeline argument named '" + name + "'");
  }

  // Per output slot: its hash and the preimage size it was computed from
  // (zero when the hash was adopted rather than computed at this level).
  std::map<std::pair<std::string, std::string>, std::pair<CausalHash, std::size_t>> slots;
  std::map<std::string, std::vector<HashTraceEntry>> nested;

  auto input_hashes_of = [&](const std::string& label) {
    std::vector<std::pair<std::string, CausalHash>> inputs;
    for (std::size_t ei : graph.in_edges(label)) {
      const Edge& e = graph.edges()[ei];
      inputs.emplace_back(e.input, slots.at({e.provider, e.output}).first);
    }
    return inputs;
  };

  const std::vector<std::string> order = topo_order(graph);
  for (const std::string& label : order) {
    const Step& s = graph.step(label);

    if (const auto* a = s.transform.logic.argument()) {
      auto it = argument_hashes.find(a->name);
      if (it == argument_hashes.end())
        throw HashError(HashErrc::MissingArgumentHash, a->name,
                        "no hash supplied for argument '" + a->name + "'");
      slots[{label, s.transform.outputs.front().name}] = {it->second, 0};
      continue;
    }
    if (DependencyGraph::is_return(s)) continue;

    if (const auto* sub = s.transform.logic.subpipeline()) {
      std::map<std::string, CausalHash> inner_args;
      auto outer_inputs = input_hashes_of(label);
      for (const auto& [inner_name, outer_slot] : sub->arguments) {
        auto it = std::find_if(outer_inputs.begin(), outer_inputs.end(),
                               [&](const auto& p) { return p.first == outer_slot; });
        if (it == outer_inputs.end())
          throw HashError(HashErrc::Internal, outer_slot,
                          "subpipeline input slot '" + outer_slot + "' has no edge");
        inner_args[inner_name] = it->second;
      }

      BuildResult inner = build_graph(*sub->pipeline);
      if (!inner.ok())
        throw HashError(HashErrc::Internal, label, "inner pipeline failed validation");
      LevelResult r = hash_level(*inner.graph, inner_args, scope + label + "/");
      nested[label] = std::move(r.trace);

      // An outer output adopts the hash of the inner return's feeding edge,
      // byte for byte; this is what makes nested and standalone runs share
      // cache entries.
      for (const auto& [inner_ret, outer_out] : sub->returns) {
        const CausalHash* found = nullptr;
        for (const Step& is : sub->pipeline->steps) {
          const auto* rl = is.transform.logic.ret();
          if (rl == nullptr || rl->name != inner_ret) continue;
          std::size_t ei = inner.graph->in_edges(is.label).front();
          found = &r.by_edge[ei];
          break;
        }
        if (found == nullptr)
          throw HashError(HashErrc::Internal, inner_ret, "inner return not found");
        slots[{label, outer_out}] = {*found, 0};
      }
      continue;
    }

    auto inputs = input_hashes_of(label);
    Bytes identity = transform_identity(s.transform.logic);
    for (const auto& port : s.transform.outputs) {
      Bytes pre = causal_preimage(inputs, identity, port.name);
      slots[{label, port.name}] = {sha256(std::span<const std::uint8_t>(pre)), pre.size()};
    }
  }

  LevelResult result;
  result.by_edge.resize(graph.edges().size());
  for (std::size_t i = 0; i < graph.edges().size(); ++i) {
    const Edge& e = graph.edges()[i];
    result.by_edge[i] = slots.at({e.provider, e.output}).first;
  }
  for (std::size_t ei : canonical_edge_order(graph)) {
    const Edge& e = graph.edges()[ei];
    const auto& [hash, preimage] = slots.at({e.provider, e.output});
    result.trace.push_back({scope, e.provider, e.output, e.consumer, e.input, preimage, hash});
  }
  for (const std::string& label : order) {
    auto it = nested.find(label);
    if (it == nested.end()) continue;
    result.trace.insert(result.trace.end(), it->second.begin(), it->second.end());
  }
  return result;
}

}  // namespace

EdgeHashes hash_pipeline(const DependencyGraph& graph,
                         const std::map<std::string, CausalHash>& argument_hashes) {
  LevelResult r = hash_level(graph, argument_hashes, "");
  return {std::move(r.by_edge), std::move(r.trace)};
}

}  // namespace koji
