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

#include "koji/doc.hpp"

#include <algorithm>
#include <sstream>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

namespace koji {

using ojson = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// YAML loading: converted to JSON so one decoder serves both formats.
// Plain scalars keep their literal spelling as strings, except the YAML
// boolean and null words; the decoder coerces where a field wants a number
// or a bool.
// ---------------------------------------------------------------------------

ojson yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Scalar: {
      const std::string& s = node.Scalar();
      if (node.Tag() == "!") return s;  // quoted scalar stays a string
      if (s == "true" || s == "True" || s == "TRUE") return true;
      if (s == "false" || s == "False" || s == "FALSE") return false;
      if (s == "null" || s == "Null" || s == "NULL" || s == "~") return nullptr;
      return s;
    }
    case YAML::NodeType::Sequence: {
      ojson arr = ojson::array();
      for (const auto& item : node) arr.push_back(yaml_to_json(item));
      return arr;
    }
    case YAML::NodeType::Map: {
      ojson obj = ojson::object();
      for (const auto& kv : node) obj[kv.first.Scalar()] = yaml_to_json(kv.second);
      return obj;
    }
  }
  return nullptr;
}

std::string offset_to_line_col(std::string_view text, std::size_t offset) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      line++;
      col = 1;
    } else {
      col++;
    }
  }
  return std::to_string(line) + ":" + std::to_string(col);
}

struct Ctx {
  std::vector<Diagnostic> diags;
  bool lenient = false;
  std::vector<std::string> path;

  std::string where() const {
    std::string out;
    for (const auto& seg : path) {
      if (!out.empty() && seg.front() != '[') out += '.';
      out += seg;
    }
    return out.empty() ? "document" : out;
  }

  void error(DiagCode code, const std::string& message) {
    diags.push_back({Severity::Error, code, where(), message});
  }
  void warn(DiagCode code, const std::string& message) {
    diags.push_back({Severity::Warning, code, where(), message});
  }

  struct Scope {
    Ctx& ctx;
    Scope(Ctx& ctx, std::string segment) : ctx(ctx) { ctx.path.push_back(std::move(segment)); }
    ~Scope() { ctx.path.pop_back(); }
  };
};

bool expect_object(Ctx& ctx, const ojson& j) {
  if (j.is_object()) return true;
  ctx.error(DiagCode::FieldType, "expected a mapping");
  return false;
}

void check_keys(Ctx& ctx, const ojson& obj, std::initializer_list<std::string_view> allowed) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    bool known = std::any_of(allowed.begin(), allowed.end(),
                             [&](std::string_view a) { return a == key; });
    if (known) continue;
    Ctx::Scope scope(ctx, key);
    if (ctx.lenient)
      ctx.warn(DiagCode::UnknownField, "unknown key '" + key + "' ignored");
    else
      ctx.error(DiagCode::UnknownField, "unknown key '" + key + "'");
  }
}

std::optional<std::string> get_string(Ctx& ctx, const ojson& obj, const char* key,
                                      bool required) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) {
    if (required) {
      Ctx::Scope scope(ctx, key);
      ctx.error(DiagCode::FieldType, std::string("required key '") + key + "' is missing");
    }
    return std::nullopt;
  }
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
  if (it->is_number_unsigned()) return std::to_string(it->get<std::uint64_t>());
  Ctx::Scope scope(ctx, key);
  ctx.error(DiagCode::FieldType, std::string("'") + key + "' must be a string");
  return std::nullopt;
}

std::optional<bool> get_bool(Ctx& ctx, const ojson& obj, const char* key, bool required) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) {
    if (required) {
      Ctx::Scope scope(ctx, key);
      ctx.error(DiagCode::FieldType, std::string("required key '") + key + "' is missing");
    }
    return std::nullopt;
  }
  if (it->is_boolean()) return it->get<bool>();
  Ctx::Scope scope(ctx, key);
  ctx.error(DiagCode::FieldType, std::string("'") + key + "' must be a boolean");
  return std::nullopt;
}

std::optional<std::int64_t> get_int(Ctx& ctx, const ojson& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (it->is_number_integer()) return it->get<std::int64_t>();
  if (it->is_number_unsigned()) return static_cast<std::int64_t>(it->get<std::uint64_t>());
  if (it->is_string()) {
    try {
      return std::stoll(it->get<std::string>());
    } catch (const std::exception&) {
    }
  }
  Ctx::Scope scope(ctx, key);
  ctx.error(DiagCode::FieldType, std::string("'") + key + "' must be an integer");
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Pipeline decoding
// ---------------------------------------------------------------------------

std::optional<Resource> decode_resource(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"file", "service"});
  const bool has_file = j.contains("file") && !j["file"].is_null();
  const bool has_service = j.contains("service") && !j["service"].is_null();
  if (has_file == has_service) {
    ctx.error(DiagCode::VariantViolation, "a resource must set exactly one of file or service");
    return std::nullopt;
  }
  if (has_file) {
    Ctx::Scope scope(ctx, "file");
    const ojson& f = j["file"];
    if (!expect_object(ctx, f)) return std::nullopt;
    check_keys(ctx, f, {"directory", "encoding", "format"});
    FileResource r;
    auto dir = get_bool(ctx, f, "directory", true);
    if (!dir) return std::nullopt;
    r.directory = *dir;
    r.encoding = get_string(ctx, f, "encoding", false);
    r.format = get_string(ctx, f, "format", false);
    return Resource{r};
  }
  Ctx::Scope scope(ctx, "service");
  const ojson& s = j["service"];
  if (!expect_object(ctx, s)) return std::nullopt;
  check_keys(ctx, s, {"protocol"});
  ServiceResource r;
  r.protocol = get_string(ctx, s, "protocol", false);
  return Resource{r};
}

std::optional<TransformPort> decode_port(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"name", "resource"});
  TransformPort port;
  auto name = get_string(ctx, j, "name", true);
  if (!name) return std::nullopt;
  port.name = *name;
  if (!j.contains("resource")) {
    ctx.error(DiagCode::FieldType, "required key 'resource' is missing");
    return std::nullopt;
  }
  Ctx::Scope scope(ctx, "resource");
  auto resource = decode_resource(ctx, j["resource"]);
  if (!resource) return std::nullopt;
  port.resource = *resource;
  return port;
}

std::optional<ContainerPort> decode_container_port(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"name", "flag", "env", "format"});
  if (j.contains("format")) {
    Ctx::Scope scope(ctx, "format");
    ctx.error(DiagCode::ReservedField, "'format' is reserved and cannot be set");
  }
  ContainerPort port;
  auto name = get_string(ctx, j, "name", true);
  if (!name) return std::nullopt;
  port.name = *name;
  port.flag = get_string(ctx, j, "flag", false);
  // An explicitly empty flag means "positional"; get_string cannot say
  // "present but empty string" apart, so re-check presence.
  if (!port.flag && j.contains("flag") && j["flag"].is_string()) port.flag = std::string();
  port.env = get_string(ctx, j, "env", false);
  return port;
}

std::optional<ContainerLogic> decode_container(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"image", "inputs", "outputs", "flags", "env"});
  ContainerLogic c;
  auto image = get_string(ctx, j, "image", true);
  if (!image) return std::nullopt;
  c.image = *image;

  auto ports = [&](const char* key, std::vector<ContainerPort>& out) {
    if (!j.contains(key) || j[key].is_null()) return;
    Ctx::Scope scope(ctx, key);
    if (!j[key].is_array()) {
      ctx.error(DiagCode::FieldType, "expected a list");
      return;
    }
    std::size_t i = 0;
    for (const auto& item : j[key]) {
      Ctx::Scope elem(ctx, "[" + std::to_string(i++) + "]");
      if (auto p = decode_container_port(ctx, item)) out.push_back(*p);
    }
  };
  ports("inputs", c.inputs);
  ports("outputs", c.outputs);

  auto named = [&](const char* key, auto& out) {
    if (!j.contains(key) || j[key].is_null()) return;
    Ctx::Scope scope(ctx, key);
    if (!j[key].is_array()) {
      ctx.error(DiagCode::FieldType, "expected a list");
      return;
    }
    std::size_t i = 0;
    for (const auto& item : j[key]) {
      Ctx::Scope elem(ctx, "[" + std::to_string(i++) + "]");
      if (!expect_object(ctx, item)) continue;
      check_keys(ctx, item, {"name", "value"});
      auto name = get_string(ctx, item, "name", true);
      if (!name) continue;
      typename std::remove_reference_t<decltype(out)>::value_type entry;
      entry.name = *name;
      entry.value = get_string(ctx, item, "value", false);
      out.push_back(std::move(entry));
    }
  };
  named("flags", c.flags);
  named("env", c.env);
  return c;
}

std::optional<Pipeline> decode_pipeline(Ctx& ctx, const ojson& j);

std::optional<SubpipelineLogic> decode_subpipeline(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"pipeline", "args", "returns"});
  SubpipelineLogic sub;
  if (!j.contains("pipeline")) {
    ctx.error(DiagCode::FieldType, "required key 'pipeline' is missing");
    return std::nullopt;
  }
  {
    Ctx::Scope scope(ctx, "pipeline");
    auto inner = decode_pipeline(ctx, j["pipeline"]);
    if (!inner) return std::nullopt;
    sub.pipeline = std::make_shared<const Pipeline>(std::move(*inner));
  }
  auto decode_map = [&](const char* key, std::map<std::string, std::string>& out) {
    if (!j.contains(key) || j[key].is_null()) return;
    Ctx::Scope scope(ctx, key);
    if (!j[key].is_object()) {
      ctx.error(DiagCode::FieldType, "expected a mapping of names");
      return;
    }
    for (const auto& [k, v] : j[key].items()) {
      if (v.is_string())
        out[k] = v.get<std::string>();
      else {
        Ctx::Scope elem(ctx, k);
        ctx.error(DiagCode::FieldType, "expected a string");
      }
    }
  };
  decode_map("args", sub.arguments);
  decode_map("returns", sub.returns);
  return sub;
}

std::optional<TransformLogic> decode_logic(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"arg", "return", "container", "subpipeline"});
  std::vector<std::string> present;
  for (const char* key : {"arg", "return", "container", "subpipeline"})
    if (j.contains(key) && !j[key].is_null()) present.push_back(key);
  if (present.size() != 1) {
    ctx.error(DiagCode::VariantViolation,
              "logic must set exactly one of arg, return, container, subpipeline");
    return std::nullopt;
  }
  const std::string& kind = present.front();
  Ctx::Scope scope(ctx, kind);
  const ojson& body = j[kind];

  if (kind == "arg" || kind == "return") {
    if (!expect_object(ctx, body)) return std::nullopt;
    check_keys(ctx, body, {"name", "resource"});
    auto name = get_string(ctx, body, "name", true);
    if (!name) return std::nullopt;
    if (!body.contains("resource")) {
      ctx.error(DiagCode::FieldType, "required key 'resource' is missing");
      return std::nullopt;
    }
    Ctx::Scope rscope(ctx, "resource");
    auto resource = decode_resource(ctx, body["resource"]);
    if (!resource) return std::nullopt;
    if (kind == "arg") return TransformLogic{ArgumentLogic{*name, *resource}};
    return TransformLogic{ReturnLogic{*name, *resource}};
  }
  if (kind == "container") {
    auto c = decode_container(ctx, body);
    if (!c) return std::nullopt;
    return TransformLogic{std::move(*c)};
  }
  auto sub = decode_subpipeline(ctx, body);
  if (!sub) return std::nullopt;
  return TransformLogic{std::move(*sub)};
}

std::optional<Transform> decode_transform(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"inputs", "outputs", "logic"});
  Transform t;
  auto ports = [&](const char* key, std::vector<TransformPort>& out) {
    if (!j.contains(key) || j[key].is_null()) return;
    Ctx::Scope scope(ctx, key);
    if (!j[key].is_array()) {
      ctx.error(DiagCode::FieldType, "expected a list");
      return;
    }
    std::size_t i = 0;
    for (const auto& item : j[key]) {
      Ctx::Scope elem(ctx, "[" + std::to_string(i++) + "]");
      if (auto p = decode_port(ctx, item)) out.push_back(*p);
    }
  };
  ports("inputs", t.inputs);
  ports("outputs", t.outputs);
  if (!j.contains("logic")) {
    ctx.error(DiagCode::FieldType, "required key 'logic' is missing");
    return std::nullopt;
  }
  Ctx::Scope scope(ctx, "logic");
  auto logic = decode_logic(ctx, j["logic"]);
  if (!logic) return std::nullopt;
  t.logic = std::move(*logic);
  return t;
}

std::optional<Step> decode_step(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"label", "inputs", "transform"});
  Step s;
  auto label = get_string(ctx, j, "label", true);
  if (!label) return std::nullopt;
  s.label = *label;
  if (j.contains("inputs") && !j["inputs"].is_null()) {
    Ctx::Scope scope(ctx, "inputs");
    if (!j["inputs"].is_array()) {
      ctx.error(DiagCode::FieldType, "expected a list");
    } else {
      std::size_t i = 0;
      for (const auto& item : j["inputs"]) {
        Ctx::Scope elem(ctx, "[" + std::to_string(i++) + "]");
        if (!expect_object(ctx, item)) continue;
        check_keys(ctx, item, {"name", "provider_step_label", "provider_output_name"});
        auto name = get_string(ctx, item, "name", true);
        auto provider = get_string(ctx, item, "provider_step_label", true);
        auto output = get_string(ctx, item, "provider_output_name", true);
        if (name && provider && output) s.inputs.push_back({*name, *provider, *output});
      }
    }
  }
  if (!j.contains("transform")) {
    ctx.error(DiagCode::FieldType, "required key 'transform' is missing");
    return std::nullopt;
  }
  Ctx::Scope scope(ctx, "transform");
  auto t = decode_transform(ctx, j["transform"]);
  if (!t) return std::nullopt;
  s.transform = std::move(*t);
  return s;
}

std::optional<Pipeline> decode_pipeline(Ctx& ctx, const ojson& j) {
  if (!expect_object(ctx, j)) return std::nullopt;
  check_keys(ctx, j, {"steps"});
  Pipeline p;
  if (j.contains("steps") && !j["steps"].is_null()) {
    Ctx::Scope scope(ctx, "steps");
    if (!j["steps"].is_array()) {
      ctx.error(DiagCode::FieldType, "expected a list of steps");
      return std::nullopt;
    }
    std::size_t i = 0;
    for (const auto& item : j["steps"]) {
      Ctx::Scope elem(ctx, "[" + std::to_string(i++) + "]");
      if (auto s = decode_step(ctx, item)) p.steps.push_back(std::move(*s));
    }
  }
  return p;
}

std::optional<ojson> load_json(Ctx& ctx, std::string_view text, DocFormat format) {
  if (format == DocFormat::Json) {
    try {
      return ojson::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      ctx.diags.push_back({Severity::Error, DiagCode::SyntaxError,
                           offset_to_line_col(text, e.byte > 0 ? e.byte - 1 : 0), e.what()});
      return std::nullopt;
    }
  }
  try {
    YAML::Node node = YAML::Load(std::string(text));
    return yaml_to_json(node);
  } catch (const YAML::ParserException& e) {
    ctx.diags.push_back({Severity::Error, DiagCode::SyntaxError,
                         std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1),
                         e.msg});
    return std::nullopt;
  } catch (const YAML::Exception& e) {
    ctx.diags.push_back({Severity::Error, DiagCode::SyntaxError, "", e.what()});
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

ojson resource_json(const Resource& r) {
  ojson j;
  if (r.is_file()) {
    ojson f;
    f["directory"] = r.file().directory;
    if (r.file().encoding) f["encoding"] = *r.file().encoding;
    if (r.file().format) f["format"] = *r.file().format;
    j["file"] = std::move(f);
  } else {
    ojson s = ojson::object();
    if (r.service().protocol) s["protocol"] = *r.service().protocol;
    j["service"] = std::move(s);
  }
  return j;
}

ojson pipeline_json(const Pipeline& p);

ojson logic_json(const TransformLogic& logic) {
  ojson j;
  if (const auto* a = logic.argument()) {
    j["arg"] = {{"name", a->name}, {"resource", resource_json(a->resource)}};
  } else if (const auto* r = logic.ret()) {
    j["return"] = {{"name", r->name}, {"resource", resource_json(r->resource)}};
  } else if (const auto* c = logic.container()) {
    ojson jc;
    jc["image"] = c->image;
    auto ports = [](const std::vector<ContainerPort>& list) {
      ojson arr = ojson::array();
      for (const auto& p : list) {
        ojson jp;
        jp["name"] = p.name;
        if (p.flag) jp["flag"] = *p.flag;
        if (p.env) jp["env"] = *p.env;
        arr.push_back(std::move(jp));
      }
      return arr;
    };
    if (!c->inputs.empty()) jc["inputs"] = ports(c->inputs);
    if (!c->outputs.empty()) jc["outputs"] = ports(c->outputs);
    auto named = [](const auto& list) {
      ojson arr = ojson::array();
      for (const auto& f : list) {
        ojson jf;
        jf["name"] = f.name;
        if (f.value) jf["value"] = *f.value;
        arr.push_back(std::move(jf));
      }
      return arr;
    };
    if (!c->flags.empty()) jc["flags"] = named(c->flags);
    if (!c->env.empty()) jc["env"] = named(c->env);
    j["container"] = std::move(jc);
  } else if (const auto* sub = logic.subpipeline()) {
    ojson js;
    js["pipeline"] = sub->pipeline ? pipeline_json(*sub->pipeline) : ojson::object();
    if (!sub->arguments.empty()) js["args"] = sub->arguments;
    if (!sub->returns.empty()) js["returns"] = sub->returns;
    j["subpipeline"] = std::move(js);
  } else {
    throw std::invalid_argument("scripted logic is not representable in documents");
  }
  return j;
}

ojson pipeline_json(const Pipeline& p) {
  ojson j;
  j["steps"] = ojson::array();
  for (const auto& s : p.steps) {
    ojson js;
    js["label"] = s.label;
    if (!s.inputs.empty()) {
      ojson arr = ojson::array();
      for (const auto& in : s.inputs)
        arr.push_back({{"name", in.name},
                       {"provider_step_label", in.provider_step_label},
                       {"provider_output_name", in.provider_output_name}});
      js["inputs"] = std::move(arr);
    }
    ojson jt;
    auto ports = [](const std::vector<TransformPort>& list) {
      ojson arr = ojson::array();
      for (const auto& p2 : list)
        arr.push_back({{"name", p2.name}, {"resource", resource_json(p2.resource)}});
      return arr;
    };
    if (!s.transform.inputs.empty()) jt["inputs"] = ports(s.transform.inputs);
    if (!s.transform.outputs.empty()) jt["outputs"] = ports(s.transform.outputs);
    jt["logic"] = logic_json(s.transform.logic);
    js["transform"] = std::move(jt);
    j["steps"].push_back(std::move(js));
  }
  return j;
}

void emit_yaml(YAML::Emitter& out, const ojson& j) {
  switch (j.type()) {
    case ojson::value_t::object:
      out << YAML::BeginMap;
      for (const auto& [k, v] : j.items()) {
        out << YAML::Key << k << YAML::Value;
        emit_yaml(out, v);
      }
      out << YAML::EndMap;
      return;
    case ojson::value_t::array:
      out << YAML::BeginSeq;
      for (const auto& v : j) emit_yaml(out, v);
      out << YAML::EndSeq;
      return;
    case ojson::value_t::string:
      out << YAML::DoubleQuoted << j.get<std::string>();
      return;
    case ojson::value_t::boolean:
      out << j.get<bool>();
      return;
    case ojson::value_t::number_integer:
      out << j.get<std::int64_t>();
      return;
    case ojson::value_t::number_unsigned:
      out << j.get<std::uint64_t>();
      return;
    case ojson::value_t::number_float:
      out << j.get<double>();
      return;
    default:
      out << YAML::Null;
      return;
  }
}

}  // namespace

DocFormat resolve_format(DocFormat hint, std::string_view filename, std::string_view text) {
  if (hint != DocFormat::Auto) return hint;
  if (filename.size() >= 5 && filename.substr(filename.size() - 5) == ".json")
    return DocFormat::Json;
  if (filename.empty()) {
    for (char c : text) {
      if (c == ' ' || c == '\t' || c == '\n' || c == '\r') continue;
      if (c == '{' || c == '[') return DocFormat::Json;
      break;
    }
  }
  return DocFormat::Yaml;
}

ParseResult parse_document(std::string_view text, DocFormat format, bool lenient,
                           std::string_view filename) {
  Ctx ctx;
  ctx.lenient = lenient;
  auto j = load_json(ctx, text, resolve_format(format, filename, text));
  if (!j) return {std::nullopt, std::move(ctx.diags)};
  auto pipeline = decode_pipeline(ctx, *j);
  if (!pipeline || has_errors(ctx.diags)) return {std::nullopt, std::move(ctx.diags)};
  return {std::move(pipeline), std::move(ctx.diags)};
}

std::string serialize_document(const Pipeline& pipeline, DocFormat format) {
  ojson j = pipeline_json(pipeline);
  if (format == DocFormat::Json || format == DocFormat::Auto) return j.dump(2) + "\n";
  YAML::Emitter out;
  emit_yaml(out, j);
  return std::string(out.c_str()) + "\n";
}

MockScriptsResult parse_mock_scripts(std::string_view text, DocFormat format,
                                     std::string_view filename) {
  Ctx ctx;
  MockScriptsResult result;
  auto j = load_json(ctx, text, resolve_format(format, filename, text));
  if (!j) {
    result.diagnostics = std::move(ctx.diags);
    return result;
  }
  if (!j->is_object()) {
    ctx.error(DiagCode::FieldType, "expected a mapping from step label to behavior list");
    result.diagnostics = std::move(ctx.diags);
    return result;
  }
  for (const auto& [label, behaviors] : j->items()) {
    Ctx::Scope scope(ctx, label);
    if (!behaviors.is_array()) {
      ctx.error(DiagCode::FieldType, "expected a list of behaviors");
      continue;
    }
    ScriptedLogic script;
    std::size_t i = 0;
    for (const auto& item : behaviors) {
      Ctx::Scope elem(ctx, "[" + std::to_string(i++) + "]");
      if (!expect_object(ctx, item)) continue;
      check_keys(ctx, item, {"succeed", "fail", "serve"});
      std::vector<std::string> present;
      for (const char* key : {"succeed", "fail", "serve"})
        if (item.contains(key)) present.push_back(key);
      if (present.size() != 1) {
        ctx.error(DiagCode::VariantViolation,
                  "a behavior must set exactly one of succeed, fail, serve");
        continue;
      }
      const std::string& kind = present.front();
      ojson body = item[kind].is_null() ? ojson::object() : item[kind];
      Ctx::Scope bscope(ctx, kind);
      if (!expect_object(ctx, body)) continue;

      ScriptedBehavior b;
      auto outputs = [&] {
        if (!body.contains("outputs") || body["outputs"].is_null()) return;
        Ctx::Scope oscope(ctx, "outputs");
        if (!body["outputs"].is_object()) {
          ctx.error(DiagCode::FieldType, "expected a mapping from output name to content");
          return;
        }
        for (const auto& [name, content] : body["outputs"].items()) {
          if (content.is_string())
            b.outputs[name] = content.get<std::string>();
          else if (content.is_number_integer())
            b.outputs[name] = std::to_string(content.get<std::int64_t>());
          else {
            Ctx::Scope cscope(ctx, name);
            ctx.error(DiagCode::FieldType, "expected string content");
          }
        }
      };
      if (kind == "succeed") {
        check_keys(ctx, body, {"outputs", "delay_ms"});
        b.kind = ScriptedBehavior::Kind::Succeed;
        outputs();
        if (auto d = get_int(ctx, body, "delay_ms")) b.delay = std::chrono::milliseconds(*d);
      } else if (kind == "fail") {
        check_keys(ctx, body, {"delay_ms"});
        b.kind = ScriptedBehavior::Kind::Fail;
        if (auto d = get_int(ctx, body, "delay_ms")) b.delay = std::chrono::milliseconds(*d);
      } else {
        check_keys(ctx, body, {"outputs", "readiness_delay_ms"});
        b.kind = ScriptedBehavior::Kind::Serve;
        outputs();
        if (auto d = get_int(ctx, body, "readiness_delay_ms"))
          b.readiness_delay = std::chrono::milliseconds(*d);
      }
      script.attempts.push_back(std::move(b));
    }
    result.scripts[label] = std::move(script);
  }
  result.diagnostics = std::move(ctx.diags);
  if (!result.ok()) result.scripts.clear();
  return result;
}

Pipeline apply_mock_scripts(const Pipeline& pipeline,
                            const std::map<std::string, ScriptedLogic>& scripts) {
  Pipeline out = pipeline;
  for (Step& s : out.steps) {
    if (DependencyGraph::is_argument(s) || DependencyGraph::is_return(s)) continue;
    auto it = scripts.find(s.label);
    if (it != scripts.end()) {
      s.transform.logic.value = it->second;
      continue;
    }
    if (const auto* sub = s.transform.logic.subpipeline()) {
      SubpipelineLogic replaced;
      replaced.pipeline =
          std::make_shared<const Pipeline>(apply_mock_scripts(*sub->pipeline, scripts));
      replaced.arguments = sub->arguments;
      replaced.returns = sub->returns;
      s.transform.logic.value = std::move(replaced);
    }
  }
  return out;
}

std::optional<ArgumentSpec> parse_argument_spec(std::string_view text, std::string& error) {
  auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    error = "argument must look like NAME=locator or NAME=locator:hash";
    return std::nullopt;
  }
  ArgumentSpec spec;
  spec.name = std::string(text.substr(0, eq));
  std::string_view rest = text.substr(eq + 1);
  auto colon = rest.rfind(':');
  if (colon != std::string_view::npos) {
    if (auto h = CausalHash::parse_hex(rest.substr(colon + 1))) {
      spec.hash = *h;
      rest = rest.substr(0, colon);
    }
  }
  if (rest.empty()) {
    error = "argument '" + spec.name + "' has an empty locator";
    return std::nullopt;
  }
  spec.locator = std::string(rest);
  return spec;
}

std::string render_dot(const DependencyGraph& graph) {
  auto esc = [](std::string_view s) {
    std::string out;
    for (char c : s) {
      if (c == '"' || c == '\\') out.push_back('\\');
      out.push_back(c);
    }
    return out;
  };

  std::ostringstream out;
  out << "digraph pipeline {\n  rankdir=LR;\n";
  for (const std::string& label : topo_order(graph)) out << "  \"" << esc(label) << "\";\n";
  for (std::size_t ei : canonical_edge_order(graph)) {
    const Edge& e = graph.edges()[ei];
    out << "  \"" << esc(e.provider) << "\" -> \"" << esc(e.consumer) << "\" [label=\""
        << esc(e.output) << " -> " << esc(e.input) << "\"";
    if (e.resource.is_service()) out << ", style=dashed";
    out << "];\n";
  }
  out << "}\n";
  return out.str();
}

}  // namespace koji
