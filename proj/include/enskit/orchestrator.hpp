#pragma once

// Module ensemble registry and execution. All registered modules receive the
// identical context and run with no shared mutable state; their outputs are
// normalized and concatenated into one composed solution, ordered by the
// declared dependency graph. Ablated compositions replace exactly one
// segment with a sentinel.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "enskit/common.hpp"
#include "enskit/policy.hpp"
#include "enskit/schema.hpp"

namespace enskit {

struct Context {
  std::string problem_statement;
  std::map<std::string, std::string> constraints;
  std::string context_id;
};

inline Doc context_to_doc(const Context& ctx) {
  Doc doc = Doc::object();
  doc["id"] = ctx.context_id;
  doc["problem"] = ctx.problem_statement;
  doc["constraints"] = ctx.constraints;
  return doc;
}

inline Context context_from_doc(const Doc& doc) {
  Context ctx;
  ctx.context_id = doc.at("id").get<std::string>();
  ctx.problem_statement = doc.at("problem").get<std::string>();
  if (doc.contains("constraints")) {
    for (const auto& [k, v] : doc.at("constraints").items())
      ctx.constraints[k] = v.get<std::string>();
  }
  return ctx;
}

// Flat text rendering of a context, scored alongside module outputs.
inline std::string context_text(const Context& ctx) {
  std::string text = ctx.problem_statement;
  for (const auto& [k, v] : ctx.constraints) {
    text += " ";
    text += k;
    text += "=";
    text += v;
  }
  return text;
}

inline const std::vector<std::string>& standard_role_tags() {
  static const std::vector<std::string> roles = {
      "parse",   "semantic", "entity",  "factcheck", "style",
      "quality", "compute",  "verify",  "integrate"};
  return roles;
}

struct ModuleSpec {
  std::string module_id;
  std::string role_tag;
  std::vector<std::string> declared_dependencies;
};

// ---------------------------------------------------------------------------
// Parameter records. Everything a module's behaviour depends on (besides the
// context and seed) lives here, so freezing and no-retrain guarantees can be
// checked by digest.
// ---------------------------------------------------------------------------

// V candidate templates; emission substitutes "{b}" in content strings with
// the context bucket index.
struct ToyPolicyParams {
  ToyPolicy policy;
  std::vector<ModuleOutput> templates;
};

struct FixedTextParams {
  ModuleOutput output;
};

struct SimulatedLatencyParams {
  double duration_ms = 0.0;
  bool busy_wait = false;
  ModuleOutput output;
};

using ParamRecord =
    std::variant<std::monostate, ToyPolicyParams, FixedTextParams,
                 SimulatedLatencyParams>;

inline Doc params_to_doc(const ParamRecord& params) {
  Doc doc = Doc::object();
  if (std::holds_alternative<std::monostate>(params)) {
    doc["kind"] = "none";
  } else if (const auto* toy = std::get_if<ToyPolicyParams>(&params)) {
    doc["kind"] = "toy-policy";
    doc["buckets"] = toy->policy.buckets();
    doc["vocab"] = toy->policy.vocab();
    doc["logits"] = toy->policy.logits();
    Doc templates = Doc::array();
    for (const auto& t : toy->templates) templates.push_back(output_to_doc(t));
    doc["templates"] = std::move(templates);
  } else if (const auto* fixed = std::get_if<FixedTextParams>(&params)) {
    doc["kind"] = "fixed-text";
    doc["output"] = output_to_doc(fixed->output);
  } else if (const auto* lat = std::get_if<SimulatedLatencyParams>(&params)) {
    doc["kind"] = "simulated-latency";
    doc["duration_ms"] = lat->duration_ms;
    doc["busy_wait"] = lat->busy_wait;
    doc["output"] = output_to_doc(lat->output);
  }
  return doc;
}

inline ParamRecord params_from_doc(const Doc& doc) {
  const std::string kind = doc.at("kind").get<std::string>();
  if (kind == "none") return std::monostate{};
  if (kind == "toy-policy") {
    ToyPolicyParams toy;
    toy.policy = ToyPolicy(doc.at("buckets").get<int>(), doc.at("vocab").get<int>());
    auto logits = doc.at("logits").get<std::vector<double>>();
    if (logits.size() != toy.policy.logits().size())
      throw Error("ParseError", "logit table size mismatch");
    toy.policy.logits() = std::move(logits);
    for (const auto& t : doc.at("templates")) {
      toy.templates.push_back(validate_output(t));
    }
    if (toy.templates.size() != static_cast<std::size_t>(toy.policy.vocab()))
      throw Error("ParseError", "template count must equal vocab size");
    return toy;
  }
  if (kind == "fixed-text") {
    return FixedTextParams{validate_output(doc.at("output"))};
  }
  if (kind == "simulated-latency") {
    SimulatedLatencyParams lat;
    lat.duration_ms = doc.at("duration_ms").get<double>();
    lat.busy_wait = doc.at("busy_wait").get<bool>();
    lat.output = validate_output(doc.at("output"));
    return lat;
  }
  throw Error("ParseError", "unknown generator kind: " + kind);
}

inline std::string params_digest(const ParamRecord& params) {
  return digest_hex(params_to_doc(params).dump());
}

using Generator =
    std::function<ModuleOutput(const Context&, const ParamRecord&, std::uint64_t)>;

namespace detail {

inline void substitute_in_strings(Doc& node, std::string_view needle,
                                  const std::string& value) {
  if (node.is_string()) {
    std::string s = node.get<std::string>();
    std::size_t pos = 0;
    while ((pos = s.find(needle, pos)) != std::string::npos) {
      s.replace(pos, needle.size(), value);
      pos += value.size();
    }
    node = s;
  } else if (node.is_object() || node.is_array()) {
    for (auto& child : node) substitute_in_strings(child, needle, value);
  }
}

inline void busy_wait_for(double ms) {
  auto until = std::chrono::steady_clock::now() +
               std::chrono::duration<double, std::milli>(ms);
  while (std::chrono::steady_clock::now() < until) {
  }
}

}  // namespace detail

// Renders candidate v of a toy module for one context bucket.
inline ModuleOutput render_candidate(const ToyPolicyParams& params,
                                     std::size_t bucket, std::size_t v) {
  ModuleOutput out = params.templates.at(v);
  detail::substitute_in_strings(out.content, "{b}", std::to_string(bucket));
  return out;
}

inline ModuleOutput toy_policy_generator(const Context& ctx,
                                         const ParamRecord& params,
                                         std::uint64_t seed) {
  const auto& toy = std::get<ToyPolicyParams>(params);
  std::size_t bucket = bucket_of(ctx.context_id, toy.policy.buckets());
  std::mt19937_64 rng(seed);
  std::size_t v = toy.policy.sample(bucket, rng);
  return render_candidate(toy, bucket, v);
}

inline ModuleOutput fixed_text_generator(const Context&,
                                         const ParamRecord& params,
                                         std::uint64_t) {
  return std::get<FixedTextParams>(params).output;
}

inline ModuleOutput simulated_latency_generator(const Context&,
                                                const ParamRecord& params,
                                                std::uint64_t) {
  const auto& lat = std::get<SimulatedLatencyParams>(params);
  if (lat.busy_wait) {
    detail::busy_wait_for(lat.duration_ms);
  } else {
    std::this_thread::sleep_for(
        std::chrono::duration<double, std::milli>(lat.duration_ms));
  }
  return lat.output;
}

inline Generator generator_for_kind(const std::string& kind) {
  if (kind == "toy-policy") return toy_policy_generator;
  if (kind == "fixed-text") return fixed_text_generator;
  if (kind == "simulated-latency") return simulated_latency_generator;
  throw Error("ParseError", "unknown generator kind: " + kind);
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

class Ensemble {
public:
  // Adding a module never touches existing parameter records. Dependencies
  // may name modules that are not registered yet; such edges stay inert
  // until the target registers.
  void add_module(ModuleSpec spec, Generator generator, ParamRecord params) {
    if (index_of(spec.module_id))
      throw Error("DuplicateModuleId", spec.module_id);
    specs_.push_back(std::move(spec));
    generators_.push_back(std::move(generator));
    params_.push_back(std::move(params));
    if (has_cycle()) {
      specs_.pop_back();
      generators_.pop_back();
      params_.pop_back();
      throw Error("CyclicDependency", "declared dependency graph has a cycle");
    }
  }

  std::size_t size() const { return specs_.size(); }
  const ModuleSpec& spec(std::size_t i) const { return specs_.at(i); }
  const Generator& generator(std::size_t i) const { return generators_.at(i); }
  ParamRecord& params(std::size_t i) { return params_.at(i); }
  const ParamRecord& params(std::size_t i) const { return params_.at(i); }

  std::optional<std::size_t> index_of(std::string_view module_id) const {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      if (specs_[i].module_id == module_id) return i;
    }
    return std::nullopt;
  }

  std::string param_digest(std::size_t i) const {
    return params_digest(params_.at(i));
  }

  // Registered modules in dependency order; ready candidates are taken in
  // ascending registration index, which fixes the tie-break.
  std::vector<std::size_t> topological_order() const {
    const std::size_t k = specs_.size();
    std::vector<int> pending(k, 0);
    std::vector<std::vector<std::size_t>> dependents(k);
    for (std::size_t i = 0; i < k; ++i) {
      for (const auto& dep : specs_[i].declared_dependencies) {
        if (auto d = index_of(dep)) {
          ++pending[i];
          dependents[*d].push_back(i);
        }
      }
    }
    std::vector<std::size_t> order;
    std::vector<bool> emitted(k, false);
    order.reserve(k);
    while (order.size() < k) {
      std::size_t next = k;
      for (std::size_t i = 0; i < k; ++i) {
        if (!emitted[i] && pending[i] == 0) {
          next = i;
          break;
        }
      }
      if (next == k)
        throw Error("CyclicDependency", "declared dependency graph has a cycle");
      emitted[next] = true;
      order.push_back(next);
      for (std::size_t dep : dependents[next]) --pending[dep];
    }
    return order;
  }

private:
  bool has_cycle() const {
    try {
      topological_order();
    } catch (const Error&) {
      return true;
    }
    return false;
  }

  std::vector<ModuleSpec> specs_;
  std::vector<Generator> generators_;
  std::vector<ParamRecord> params_;
};

// Declarative ensemble definition: list of module id, role, dependencies,
// generator kind, parameters.
inline Ensemble load_ensemble(const Doc& doc) {
  Ensemble ensemble;
  for (const auto& m : doc.at("modules")) {
    ModuleSpec spec;
    spec.module_id = m.at("id").get<std::string>();
    spec.role_tag = m.at("role").get<std::string>();
    if (m.contains("dependencies"))
      spec.declared_dependencies =
          m.at("dependencies").get<std::vector<std::string>>();
    const std::string kind = m.at("generator").get<std::string>();
    ensemble.add_module(std::move(spec), generator_for_kind(kind),
                        params_from_doc(m.at("params")));
  }
  return ensemble;
}

inline Doc ensemble_to_doc(const Ensemble& ensemble) {
  Doc modules = Doc::array();
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const auto& spec = ensemble.spec(i);
    Doc m = params_to_doc(ensemble.params(i));
    Doc entry = Doc::object();
    entry["id"] = spec.module_id;
    entry["role"] = spec.role_tag;
    entry["dependencies"] = spec.declared_dependencies;
    entry["generator"] = m.at("kind");
    entry["params"] = std::move(m);
    modules.push_back(std::move(entry));
  }
  Doc doc = Doc::object();
  doc["modules"] = std::move(modules);
  return doc;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct ExecutionTrace {
  std::vector<double> module_ms;          // t_i per registered module
  double integration_ms = 0.0;            // t_phi
  std::vector<std::uint64_t> isolation_tokens;  // fresh per module per run
  std::string mode;                       // "parallel" | "sequential"
  std::uint64_t seed = 0;
};

inline Doc trace_to_doc(const ExecutionTrace& trace) {
  Doc doc = Doc::object();
  doc["t_i_ms"] = trace.module_ms;
  doc["t_phi_ms"] = trace.integration_ms;
  doc["isolation_tokens"] = trace.isolation_tokens;
  doc["mode"] = trace.mode;
  doc["seed"] = trace.seed;
  return doc;
}

class ModuleFailure : public Error {
public:
  ModuleFailure(std::string module_id, const std::string& cause,
                ExecutionTrace trace)
      : Error("ModuleFailure", module_id + ": " + cause),
        module_id_(std::move(module_id)), trace_(std::move(trace)) {}

  const std::string& module_id() const { return module_id_; }
  const ExecutionTrace& trace() const { return trace_; }

private:
  std::string module_id_;
  ExecutionTrace trace_;
};

struct LabeledOutput {
  std::string module_id;
  ModuleOutput output;
};

using RunResult = std::pair<std::vector<LabeledOutput>, ExecutionTrace>;

namespace detail {

inline std::atomic<std::uint64_t> isolation_counter{1};

inline ModuleOutput invoke_checked(const Ensemble& ensemble, std::size_t i,
                                   const Context& ctx, std::uint64_t run_seed) {
  const auto& spec = ensemble.spec(i);
  ModuleOutput out = ensemble.generator(i)(
      ctx, ensemble.params(i), derive_seed(run_seed, spec.module_id));
  // Boundary re-validation; a generator emitting an invalid record is a
  // module failure, not a schema bug downstream.
  return validate_output(output_to_doc(out), spec.module_id);
}

inline double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace detail

// Runs every generator concurrently on the identical context. Outputs are a
// function of (context, params, derived seed) only, so the result multiset
// matches run_sequential under the same seed.
inline RunResult run_parallel(const Ensemble& ensemble, const Context& ctx,
                              std::uint64_t seed) {
  const std::size_t k = ensemble.size();
  if (k == 0) throw Error("EmptyEnsemble", "no modules registered");

  ExecutionTrace trace;
  trace.mode = "parallel";
  trace.seed = seed;
  trace.module_ms.resize(k, 0.0);
  trace.isolation_tokens.resize(k);
  for (std::size_t i = 0; i < k; ++i)
    trace.isolation_tokens[i] = detail::isolation_counter.fetch_add(1);

  std::vector<ModuleOutput> outputs(k);
  std::vector<std::exception_ptr> failures(k);
  std::vector<std::thread> threads;
  threads.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    threads.emplace_back([&, i] {
      auto start = std::chrono::steady_clock::now();
      try {
        outputs[i] = detail::invoke_checked(ensemble, i, ctx, seed);
      } catch (...) {
        failures[i] = std::current_exception();
      }
      trace.module_ms[i] = detail::ms_since(start);
    });
  }
  for (auto& t : threads) t.join();

  for (std::size_t i = 0; i < k; ++i) {
    if (failures[i]) {
      std::string cause;
      try {
        std::rethrow_exception(failures[i]);
      } catch (const std::exception& e) {
        cause = e.what();
      } catch (...) {
        cause = "unknown failure";
      }
      throw ModuleFailure(ensemble.spec(i).module_id, cause, trace);
    }
  }

  std::vector<LabeledOutput> labeled;
  labeled.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    labeled.push_back({ensemble.spec(i).module_id, std::move(outputs[i])});
  return {std::move(labeled), std::move(trace)};
}

// Baseline mode: one generator at a time in registration order, same seed
// derivation as run_parallel.
inline RunResult run_sequential(const Ensemble& ensemble, const Context& ctx,
                                std::uint64_t seed) {
  const std::size_t k = ensemble.size();
  if (k == 0) throw Error("EmptyEnsemble", "no modules registered");

  ExecutionTrace trace;
  trace.mode = "sequential";
  trace.seed = seed;
  trace.module_ms.resize(k, 0.0);
  trace.isolation_tokens.resize(k);

  std::vector<LabeledOutput> labeled;
  labeled.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    trace.isolation_tokens[i] = detail::isolation_counter.fetch_add(1);
    auto start = std::chrono::steady_clock::now();
    try {
      labeled.push_back(
          {ensemble.spec(i).module_id, detail::invoke_checked(ensemble, i, ctx, seed)});
    } catch (const std::exception& e) {
      trace.module_ms[i] = detail::ms_since(start);
      throw ModuleFailure(ensemble.spec(i).module_id, e.what(), trace);
    }
    trace.module_ms[i] = detail::ms_since(start);
  }
  return {std::move(labeled), std::move(trace)};
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

inline constexpr std::string_view kAblatedSentinel = "∅";

enum class Serialization { kCanonical, kRaw };

struct Segment {
  std::string module_id;
  std::string role_tag;
  std::string bytes;   // canonical output bytes, or the sentinel when ablated
  bool ablated = false;
};

struct ComposedSolution {
  std::vector<Segment> segments;

  // Concatenated document scored by the reward model. Segment headers carry
  // module identity; ablated segments keep the header and carry only the
  // sentinel, which contributes no scored tokens.
  std::string document() const {
    std::string doc;
    for (const auto& seg : segments) {
      doc += "[";
      doc += seg.module_id;
      doc += "|";
      doc += seg.role_tag;
      doc += "]\n";
      doc += seg.bytes;
      doc += "\n";
    }
    return doc;
  }
};

// Deterministic composition: one segment per registered module, in
// topological order of declared dependencies (ties by registration index),
// each carrying the normalized output bytes. The result depends only on the
// output set, never on supply order or completion timing.
inline ComposedSolution compose(const Ensemble& ensemble,
                                std::span<const LabeledOutput> outputs,
                                Serialization serialization = Serialization::kCanonical) {
  const std::size_t k = ensemble.size();
  std::vector<const ModuleOutput*> by_index(k, nullptr);
  for (const auto& lo : outputs) {
    auto idx = ensemble.index_of(lo.module_id);
    if (!idx) throw Error("UnknownModuleOutput", lo.module_id);
    if (by_index[*idx]) throw Error("DuplicateOutput", lo.module_id);
    by_index[*idx] = &lo.output;
  }
  for (std::size_t i = 0; i < k; ++i) {
    if (!by_index[i]) throw Error("MissingOutput", ensemble.spec(i).module_id);
  }

  ComposedSolution solution;
  for (std::size_t i : ensemble.topological_order()) {
    const auto& spec = ensemble.spec(i);
    const ModuleOutput& out =
        validate_output(output_to_doc(*by_index[i]), spec.module_id);
    std::string bytes = serialization == Serialization::kCanonical
                            ? canonical_form(out, spec.module_id).bytes
                            : raw_form(out);
    solution.segments.push_back(
        {spec.module_id, spec.role_tag, std::move(bytes), false});
  }
  return solution;
}

// Identical to compose except that the named module's bytes are replaced by
// the sentinel; every other segment is byte-identical to the full composition.
inline ComposedSolution ablate_compose(const Ensemble& ensemble,
                                       std::span<const LabeledOutput> outputs,
                                       std::string_view module_id,
                                       Serialization serialization = Serialization::kCanonical) {
  if (!ensemble.index_of(module_id))
    throw Error("UnknownModuleOutput", std::string(module_id));
  ComposedSolution solution = compose(ensemble, outputs, serialization);
  for (auto& seg : solution.segments) {
    if (seg.module_id == module_id) {
      seg.bytes = std::string(kAblatedSentinel);
      seg.ablated = true;
    }
  }
  return solution;
}

}  // namespace enskit
