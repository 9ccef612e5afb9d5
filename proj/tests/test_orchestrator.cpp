#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <enskit/orchestrator.hpp>

using namespace enskit;

namespace {

ModuleOutput text_output(const std::string& text) {
  ModuleOutput out;
  out.type_tag = "step";
  out.content["text"] = text;
  out.confidence = 0.8;
  return out;
}

Ensemble fixed_ensemble(const std::vector<std::pair<std::string, std::string>>&
                            ids_and_texts,
                        const std::vector<std::vector<std::string>>& deps = {}) {
  Ensemble ens;
  for (std::size_t i = 0; i < ids_and_texts.size(); ++i) {
    ModuleSpec spec;
    spec.module_id = ids_and_texts[i].first;
    spec.role_tag = "verify";
    if (i < deps.size()) spec.declared_dependencies = deps[i];
    ens.add_module(spec, fixed_text_generator,
                   FixedTextParams{text_output(ids_and_texts[i].second)});
  }
  return ens;
}

Ensemble latency_ensemble(const std::vector<double>& delays_ms) {
  Ensemble ens;
  for (std::size_t i = 0; i < delays_ms.size(); ++i) {
    ModuleSpec spec;
    spec.module_id = "m" + std::to_string(i + 1);
    spec.role_tag = "compute";
    SimulatedLatencyParams params;
    params.duration_ms = delays_ms[i];
    params.busy_wait = false;
    params.output = text_output("slept " + std::to_string(i));
    ens.add_module(spec, simulated_latency_generator, params);
  }
  return ens;
}

Context test_context() {
  Context ctx;
  ctx.problem_statement = "solve the toy problem";
  ctx.context_id = "ctx-0";
  return ctx;
}

// Independent check of the composition order contract: every declared edge
// is respected and each position holds the lowest registration index among
// the modules that were ready at that point.
bool order_matches_oracle(const Ensemble& ens,
                          const std::vector<std::string>& order) {
  const std::size_t k = ens.size();
  if (order.size() != k) return false;
  std::set<std::string> emitted;
  for (const auto& id : order) {
    std::size_t chosen = k;
    for (std::size_t i = 0; i < k; ++i) {
      const auto& spec = ens.spec(i);
      if (emitted.count(spec.module_id)) continue;
      bool ready = true;
      for (const auto& dep : spec.declared_dependencies) {
        if (ens.index_of(dep) && !emitted.count(dep)) ready = false;
      }
      if (ready) {
        chosen = i;
        break;
      }
    }
    if (chosen == k) return false;
    if (ens.spec(chosen).module_id != id) return false;
    emitted.insert(id);
  }
  return true;
}

std::vector<std::string> segment_ids(const ComposedSolution& sol) {
  std::vector<std::string> ids;
  for (const auto& seg : sol.segments) ids.push_back(seg.module_id);
  return ids;
}

}  // namespace

TEST_CASE("registering a duplicate module id fails", "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"m1", "a"}});
  ModuleSpec dup;
  dup.module_id = "m1";
  dup.role_tag = "parse";
  CHECK_THROWS_MATCHES(
      ens.add_module(dup, fixed_text_generator, FixedTextParams{text_output("b")}),
      Error, Catch::Matchers::Predicate<Error>(
                 [](const Error& e) { return e.code() == "DuplicateModuleId"; }));
}

TEST_CASE("a dependency cycle across registrations is rejected", "[orchestrator]") {
  Ensemble ens;
  ModuleSpec a;
  a.module_id = "a";
  a.role_tag = "parse";
  a.declared_dependencies = {"b"};  // dangling until b registers
  ens.add_module(a, fixed_text_generator, FixedTextParams{text_output("a")});

  ModuleSpec b;
  b.module_id = "b";
  b.role_tag = "verify";
  b.declared_dependencies = {"a"};
  CHECK_THROWS_MATCHES(
      ens.add_module(b, fixed_text_generator, FixedTextParams{text_output("b")}),
      Error, Catch::Matchers::Predicate<Error>(
                 [](const Error& e) { return e.code() == "CyclicDependency"; }));
  CHECK(ens.size() == 1);  // failed registration leaves the ensemble intact
}

TEST_CASE("dynamic expansion leaves existing parameter records untouched",
          "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"m1", "a"}, {"m2", "b"}, {"m3", "c"}});
  std::vector<std::string> before;
  for (std::size_t i = 0; i < 3; ++i) before.push_back(ens.param_digest(i));

  ModuleSpec extra;
  extra.module_id = "m4";
  extra.role_tag = "integrate";
  extra.declared_dependencies = {"m1", "m2"};
  ens.add_module(extra, fixed_text_generator, FixedTextParams{text_output("d")});

  REQUIRE(ens.size() == 4);
  for (std::size_t i = 0; i < 3; ++i) CHECK(ens.param_digest(i) == before[i]);
}

TEST_CASE("parallel and sequential runs produce identical outputs", "[orchestrator]") {
  Ensemble ens;
  for (int i = 0; i < 3; ++i) {
    ModuleSpec spec;
    spec.module_id = "m" + std::to_string(i + 1);
    spec.role_tag = "semantic";
    ToyPolicyParams toy;
    toy.policy = ToyPolicy(4, 5);
    for (int v = 0; v < 5; ++v)
      toy.templates.push_back(text_output("mod" + std::to_string(i) + " opt" +
                                          std::to_string(v) + " b{b}"));
    ens.add_module(spec, toy_policy_generator, toy);
  }
  Context ctx = test_context();

  auto [par, par_trace] = run_parallel(ens, ctx, 1234);
  auto [seq, seq_trace] = run_sequential(ens, ctx, 1234);
  REQUIRE(par.size() == seq.size());
  for (std::size_t i = 0; i < par.size(); ++i) {
    CHECK(par[i].module_id == seq[i].module_id);
    CHECK(canonical_form(par[i].output).bytes ==
          canonical_form(seq[i].output).bytes);
  }
  CHECK(par_trace.mode == "parallel");
  CHECK(seq_trace.mode == "sequential");

  // Different seed, different sampled outputs (with 5^3 candidate space this
  // seed pair is known to differ).
  auto [par2, trace2] = run_parallel(ens, ctx, 999);
  bool any_diff = false;
  for (std::size_t i = 0; i < par.size(); ++i) {
    if (canonical_form(par[i].output).bytes !=
        canonical_form(par2[i].output).bytes)
      any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("parallel wall clock tracks the slowest module", "[orchestrator][timing]") {
  Ensemble ens = latency_ensemble({80.0, 120.0, 95.0});
  Context ctx = test_context();

  auto start = std::chrono::steady_clock::now();
  auto [outputs, trace] = run_parallel(ens, ctx, 1);
  double wall = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - start)
                    .count();
  REQUIRE(outputs.size() == 3);
  CHECK(wall >= 119.0);
  CHECK(wall <= 120.0 * 1.25);  // scheduling overhead budget

  start = std::chrono::steady_clock::now();
  auto [seq_outputs, seq_trace] = run_sequential(ens, ctx, 1);
  double seq_wall = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - start)
                        .count();
  CHECK(seq_wall >= 294.0);
  CHECK(seq_wall <= 295.0 * 1.25);

  double sum = 0.0;
  for (double t : seq_trace.module_ms) sum += t;
  CHECK(sum >= 294.0);
}

TEST_CASE("single-module run equals a direct generator call", "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"only", "payload"}});
  Context ctx = test_context();
  auto [outputs, trace] = run_parallel(ens, ctx, 5);
  REQUIRE(outputs.size() == 1);
  ModuleOutput direct = fixed_text_generator(
      ctx, ens.params(0), derive_seed(5, "only"));
  CHECK(canonical_form(outputs[0].output).bytes ==
        canonical_form(direct).bytes);
}

TEST_CASE("empty ensemble cannot run", "[orchestrator]") {
  Ensemble ens;
  Context ctx = test_context();
  CHECK_THROWS_MATCHES(run_sequential(ens, ctx, 1), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == "EmptyEnsemble";
                       }));
  CHECK_THROWS_MATCHES(run_parallel(ens, ctx, 1), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == "EmptyEnsemble";
                       }));
}

TEST_CASE("a failing generator aborts the run with the module named",
          "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"ok", "fine"}});
  ModuleSpec bad;
  bad.module_id = "broken";
  bad.role_tag = "compute";
  ens.add_module(bad,
                 [](const Context&, const ParamRecord&, std::uint64_t)
                     -> ModuleOutput { throw std::runtime_error("boom"); },
                 std::monostate{});
  Context ctx = test_context();
  try {
    run_parallel(ens, ctx, 1);
    FAIL("expected ModuleFailure");
  } catch (const ModuleFailure& e) {
    CHECK(e.module_id() == "broken");
    CHECK(e.trace().module_ms.size() == 2);  // trace retained
  }
}

TEST_CASE("single-segment composition wraps the lone output", "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"m1", "payload"}});
  std::vector<LabeledOutput> outputs{{"m1", text_output("payload")}};
  ComposedSolution sol = compose(ens, outputs);
  REQUIRE(sol.segments.size() == 1);
  CHECK(sol.segments[0].module_id == "m1");
  CHECK(sol.segments[0].bytes == canonical_form(outputs[0].output).bytes);
  CHECK(sol.document().find("[m1|verify]") == 0);
}

TEST_CASE("dependency-declared order overrides registration order",
          "[orchestrator]") {
  // m2 registered first but depends on m1.
  Ensemble ens;
  ModuleSpec m2;
  m2.module_id = "m2";
  m2.role_tag = "integrate";
  m2.declared_dependencies = {"m1"};
  ens.add_module(m2, fixed_text_generator, FixedTextParams{text_output("two")});
  ModuleSpec m1;
  m1.module_id = "m1";
  m1.role_tag = "parse";
  ens.add_module(m1, fixed_text_generator, FixedTextParams{text_output("one")});

  std::vector<LabeledOutput> outputs{{"m2", text_output("two")},
                                     {"m1", text_output("one")}};
  ComposedSolution sol = compose(ens, outputs);
  CHECK(segment_ids(sol) == std::vector<std::string>{"m1", "m2"});
  CHECK(order_matches_oracle(ens, segment_ids(sol)));
}

TEST_CASE("composition order matches the oracle on random DAGs",
          "[orchestrator][property]") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng() % 5;
    Ensemble ens;
    std::vector<LabeledOutput> outputs;
    for (std::size_t i = 0; i < k; ++i) {
      ModuleSpec spec;
      spec.module_id = "m" + std::to_string(i);
      spec.role_tag = "semantic";
      // Edges only toward already-registered modules keeps the graph acyclic.
      for (std::size_t j = 0; j < i; ++j) {
        if (rng() % 3 == 0)
          spec.declared_dependencies.push_back("m" + std::to_string(j));
      }
      ModuleOutput out = text_output("payload" + std::to_string(i));
      ens.add_module(spec, fixed_text_generator, FixedTextParams{out});
      outputs.push_back({spec.module_id, out});
    }
    // Supply order is shuffled; composition must not care.
    std::shuffle(outputs.begin(), outputs.end(), rng);
    ComposedSolution sol = compose(ens, outputs);
    REQUIRE(order_matches_oracle(ens, segment_ids(sol)));

    std::shuffle(outputs.begin(), outputs.end(), rng);
    CHECK(compose(ens, outputs).document() == sol.document());
  }
}

TEST_CASE("composition rejects unknown, duplicate, and missing outputs",
          "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"m1", "a"}, {"m2", "b"}});
  std::vector<LabeledOutput> unknown{{"m1", text_output("a")},
                                     {"zz", text_output("b")}};
  CHECK_THROWS_MATCHES(compose(ens, unknown), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == "UnknownModuleOutput";
                       }));
  std::vector<LabeledOutput> missing{{"m1", text_output("a")}};
  CHECK_THROWS_MATCHES(compose(ens, missing), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == "MissingOutput";
                       }));
  std::vector<LabeledOutput> dup{{"m1", text_output("a")},
                                 {"m1", text_output("a2")}};
  CHECK_THROWS_AS(compose(ens, dup), Error);
}

TEST_CASE("ablation differs from the full composition in exactly one segment",
          "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"m1", "a"}, {"m2", "b"}, {"m3", "c"}});
  std::vector<LabeledOutput> outputs{{"m1", text_output("a")},
                                     {"m2", text_output("b")},
                                     {"m3", text_output("c")}};
  ComposedSolution full = compose(ens, outputs);
  ComposedSolution ablated = ablate_compose(ens, outputs, "m2");
  REQUIRE(ablated.segments.size() == 3);
  int diffs = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    if (full.segments[i].bytes != ablated.segments[i].bytes) {
      ++diffs;
      CHECK(ablated.segments[i].module_id == "m2");
      CHECK(ablated.segments[i].bytes == "∅");
      CHECK(ablated.segments[i].ablated);
    }
  }
  CHECK(diffs == 1);

  // Ablating each module in turn gives pairwise distinct documents.
  std::set<std::string> docs;
  for (const auto& id : {"m1", "m2", "m3"})
    docs.insert(ablate_compose(ens, outputs, id).document());
  CHECK(docs.size() == 3);

  CHECK_THROWS_MATCHES(ablate_compose(ens, outputs, "nope"), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == "UnknownModuleOutput";
                       }));
}

TEST_CASE("isolation tokens are fresh per module per run", "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"m1", "a"}, {"m2", "b"}});
  Context ctx = test_context();
  auto [o1, t1] = run_parallel(ens, ctx, 1);
  auto [o2, t2] = run_parallel(ens, ctx, 1);
  std::set<std::uint64_t> tokens(t1.isolation_tokens.begin(),
                                 t1.isolation_tokens.end());
  tokens.insert(t2.isolation_tokens.begin(), t2.isolation_tokens.end());
  CHECK(tokens.size() == 4);
}

TEST_CASE("ensemble definition round-trips through the config document",
          "[orchestrator]") {
  Ensemble ens = latency_ensemble({10.0, 20.0});
  Doc doc = ensemble_to_doc(ens);
  Ensemble loaded = load_ensemble(doc);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.spec(0).module_id == "m1");
  CHECK(loaded.param_digest(0) == ens.param_digest(0));
  CHECK(loaded.param_digest(1) == ens.param_digest(1));
}

TEST_CASE("trace exports carry timings, mode, and seed", "[orchestrator]") {
  Ensemble ens = fixed_ensemble({{"m1", "a"}});
  auto [outputs, trace] = run_sequential(ens, test_context(), 321);
  Doc doc = trace_to_doc(trace);
  CHECK(doc.at("mode") == "sequential");
  CHECK(doc.at("seed") == 321);
  CHECK(doc.at("t_i_ms").size() == 1);
}
