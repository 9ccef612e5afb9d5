#pragma once

// Typed output record emitted by every module, plus its canonical
// serialization. Canonical bytes are the unit of comparison everywhere
// downstream: two structurally equal records always serialize to the same
// byte sequence (sorted keys, shortest round-trip decimals, no whitespace).

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "enskit/common.hpp"

namespace enskit {

// Insertion-ordered document tree. Order is retained so that the "ad-hoc
// interfaces" ablation can serialize without normalization; canonical_form
// always sorts.
using Doc = nlohmann::ordered_json;
using SortedDoc = nlohmann::json;

constexpr int kMaxDepth = 64;
constexpr std::size_t kMaxDocumentBytes = 1u << 20;

// Schema fields of one module output: type/content/confidence/dependencies.
struct ModuleOutput {
  std::string type_tag;
  Doc content = Doc::object();
  double confidence = 0.0;
  std::vector<std::string> dependencies;
};

struct CanonicalDocument {
  std::string bytes;
  std::string origin_module;
};

namespace detail {

// Iterative depth walk; recursion would be a stack overflow hazard on
// adversarial trees.
inline int doc_depth(const Doc& root) {
  int max_depth = 1;
  std::vector<std::pair<const Doc*, int>> stack{{&root, 1}};
  while (!stack.empty()) {
    auto [node, depth] = stack.back();
    stack.pop_back();
    if (depth > max_depth) max_depth = depth;
    if (depth > kMaxDepth) return depth;  // deep enough to reject
    if (node->is_object() || node->is_array()) {
      for (const auto& child : *node) stack.emplace_back(&child, depth + 1);
    }
  }
  return max_depth;
}

inline bool all_numbers_finite(const Doc& root) {
  std::vector<const Doc*> stack{&root};
  while (!stack.empty()) {
    const Doc* node = stack.back();
    stack.pop_back();
    if (node->is_number_float()) {
      double v = node->get<double>();
      if (!(v == v) || v > 1.79769313486231570e308 ||
          v < -1.79769313486231570e308) {
        return false;
      }
    } else if (node->is_object() || node->is_array()) {
      for (const auto& child : *node) stack.push_back(&child);
    }
  }
  return true;
}

inline SortedDoc sorted_output_doc(const ModuleOutput& out) {
  SortedDoc doc = SortedDoc::object();
  doc["confidence"] = out.confidence;
  doc["content"] = SortedDoc(out.content);
  doc["dependencies"] = out.dependencies;
  doc["type"] = out.type_tag;
  return doc;
}

}  // namespace detail

// Checks the four schema fields, value kinds, and record invariants.
// Exactly one error per bad input, raised in schema field order
// (type, content, confidence, dependencies), then record-level checks.
// `emitter_id`, when known, enables the self-dependency check.
inline ModuleOutput validate_output(const Doc& raw,
                                    std::string_view emitter_id = {}) {
  if (detail::doc_depth(raw) > kMaxDepth)
    throw Error("DepthExceeded", "document nesting exceeds depth limit");
  if (!raw.is_object()) throw Error("WrongKind", "output record must be a mapping");

  if (!raw.contains("type")) throw Error("MissingField", "type");
  if (!raw["type"].is_string()) throw Error("WrongKind", "type must be a string");

  if (!raw.contains("content")) throw Error("MissingField", "content");
  if (!raw["content"].is_object())
    throw Error("WrongKind", "content must be a mapping");
  if (!detail::all_numbers_finite(raw["content"]))
    throw Error("WrongKind", "content numbers must be finite");

  if (!raw.contains("confidence")) throw Error("MissingField", "confidence");
  if (!raw["confidence"].is_number())
    throw Error("WrongKind", "confidence must be a number");

  if (!raw.contains("dependencies")) throw Error("MissingField", "dependencies");
  if (!raw["dependencies"].is_array())
    throw Error("WrongKind", "dependencies must be a sequence");

  ModuleOutput out;
  out.type_tag = raw["type"].get<std::string>();
  if (out.type_tag.empty()) throw Error("WrongKind", "type must be non-empty");
  out.content = raw["content"];
  out.confidence = raw["confidence"].get<double>();
  if (!(out.confidence >= 0.0 && out.confidence <= 1.0))
    throw Error("OutOfRange", "confidence");

  for (const auto& dep : raw["dependencies"]) {
    if (!dep.is_string())
      throw Error("WrongKind", "dependency ids must be strings");
    out.dependencies.push_back(dep.get<std::string>());
  }
  for (std::size_t i = 0; i < out.dependencies.size(); ++i) {
    for (std::size_t j = i + 1; j < out.dependencies.size(); ++j) {
      if (out.dependencies[i] == out.dependencies[j])
        throw Error("DuplicateDependency", out.dependencies[i]);
    }
  }
  if (!emitter_id.empty()) {
    for (const auto& dep : out.dependencies) {
      if (dep == emitter_id) throw Error("SelfDependency", dep);
    }
  }

  std::string bytes = detail::sorted_output_doc(out).dump();
  if (bytes.size() > kMaxDocumentBytes)
    throw Error("DocumentTooLarge", "canonical form exceeds 1 MiB");
  return out;
}

// Deterministic bytes for a validated output: mapping keys in lexicographic
// order, shortest round-trip decimal rendering, compact separators.
inline CanonicalDocument canonical_form(const ModuleOutput& output,
                                        std::string origin = {}) {
  return CanonicalDocument{detail::sorted_output_doc(output).dump(),
                           std::move(origin)};
}

// Insertion-order serialization of the same record. Used only by the
// ad-hoc-interfaces ablation; everything else goes through canonical_form.
inline std::string raw_form(const ModuleOutput& output) {
  Doc doc = Doc::object();
  doc["type"] = output.type_tag;
  doc["content"] = output.content;
  doc["confidence"] = output.confidence;
  doc["dependencies"] = output.dependencies;
  return doc.dump();
}

// Rebuilds the raw record tree; validate_output(output_to_doc(x)) re-checks
// all invariants at module boundaries.
inline Doc output_to_doc(const ModuleOutput& output) {
  Doc doc = Doc::object();
  doc["type"] = output.type_tag;
  doc["content"] = output.content;
  doc["confidence"] = output.confidence;
  doc["dependencies"] = output.dependencies;
  return doc;
}

inline ModuleOutput parse_output(std::string_view bytes,
                                 std::string_view emitter_id = {}) {
  if (bytes.size() > kMaxDocumentBytes)
    throw Error("DocumentTooLarge", "document exceeds 1 MiB");
  Doc raw = Doc::parse(bytes, nullptr, false);
  if (raw.is_discarded()) throw Error("ParseError", "malformed document");
  return validate_output(raw, emitter_id);
}

inline bool structurally_equal(const ModuleOutput& a, const ModuleOutput& b) {
  return canonical_form(a).bytes == canonical_form(b).bytes;
}

}  // namespace enskit
