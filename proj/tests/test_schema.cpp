#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include <enskit/schema.hpp>

using namespace enskit;

namespace {

Doc accepted_record() {
  return Doc::parse(R"({"type":"analysis","content":{"summary":"x"},
                        "confidence":0.9,"dependencies":[]})");
}

std::string code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

// Builds the same logical object with a randomized key insertion order.
Doc permuted_object(const std::vector<std::pair<std::string, Doc>>& entries,
                    std::mt19937_64& rng) {
  std::vector<std::size_t> order(entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  Doc obj = Doc::object();
  for (std::size_t i : order) obj[entries[i].first] = entries[i].second;
  return obj;
}

}  // namespace

TEST_CASE("valid record is accepted with all fields", "[schema]") {
  ModuleOutput out = validate_output(accepted_record());
  CHECK(out.type_tag == "analysis");
  CHECK(out.confidence == 0.9);
  CHECK(out.dependencies.empty());
  CHECK(out.content.at("summary") == "x");
}

TEST_CASE("each schema violation yields exactly one stable error code", "[schema]") {
  Doc good = accepted_record();

  Doc missing_type = good;
  missing_type.erase("type");
  CHECK(code_of([&] { validate_output(missing_type); }) == "MissingField");

  Doc missing_content = good;
  missing_content.erase("content");
  CHECK(code_of([&] { validate_output(missing_content); }) == "MissingField");

  Doc bad_confidence = good;
  bad_confidence["confidence"] = 1.5;
  CHECK(code_of([&] { validate_output(bad_confidence); }) == "OutOfRange");

  Doc negative_confidence = good;
  negative_confidence["confidence"] = -0.1;
  CHECK(code_of([&] { validate_output(negative_confidence); }) == "OutOfRange");

  Doc wrong_kind = good;
  wrong_kind["content"] = "not a mapping";
  CHECK(code_of([&] { validate_output(wrong_kind); }) == "WrongKind");

  Doc numeric_type = good;
  numeric_type["type"] = 7;
  CHECK(code_of([&] { validate_output(numeric_type); }) == "WrongKind");

  Doc dup = good;
  dup["dependencies"] = {"m1", "m1"};
  CHECK(code_of([&] { validate_output(dup); }) == "DuplicateDependency");

  Doc self_dep = good;
  self_dep["dependencies"] = {"m2"};
  CHECK(code_of([&] { validate_output(self_dep, "m2"); }) == "SelfDependency");
  // Without the emitter id the same record passes.
  CHECK_NOTHROW(validate_output(self_dep));

  // First failing check wins: both confidence and dependencies are bad, but
  // confidence is checked first in schema field order.
  Doc two_bad = good;
  two_bad["confidence"] = 2.0;
  two_bad["dependencies"] = {"m1", "m1"};
  CHECK(code_of([&] { validate_output(two_bad); }) == "OutOfRange");
}

TEST_CASE("nesting depth is capped at 64", "[schema]") {
  Doc leaf = "x";
  // content contributes depth below the record root; wrap 70 levels.
  Doc nested = leaf;
  for (int i = 0; i < 70; ++i) {
    Doc wrap = Doc::object();
    wrap["n"] = nested;
    nested = wrap;
  }
  Doc record = accepted_record();
  record["content"] = nested;
  CHECK(code_of([&] { validate_output(record); }) == "DepthExceeded");

  // A shallow tree passes.
  Doc shallow = leaf;
  for (int i = 0; i < 20; ++i) {
    Doc wrap = Doc::object();
    wrap["n"] = shallow;
    shallow = wrap;
  }
  Doc ok = accepted_record();
  ok["content"] = shallow;
  CHECK_NOTHROW(validate_output(ok));
}

TEST_CASE("adversarial parse inputs are rejected, not crashed on", "[schema]") {
  std::string deep(200000, '[');
  CHECK(code_of([&] { parse_output(deep); }) == "ParseError");

  std::string deep_valid;
  for (int i = 0; i < 300; ++i) deep_valid += "[";
  for (int i = 0; i < 300; ++i) deep_valid += "]";
  CHECK(code_of([&] { parse_output(deep_valid); }) == "DepthExceeded");

  std::string huge = R"({"type":"t","content":{"v":")" +
                     std::string(kMaxDocumentBytes, 'a') +
                     R"("},"confidence":0.5,"dependencies":[]})";
  CHECK(code_of([&] { parse_output(huge); }) == "DocumentTooLarge");

  CHECK(code_of([&] { parse_output("not json at all {"); }) == "ParseError");
}

TEST_CASE("canonical bytes are a function of structure, not insertion order",
          "[schema][property]") {
  std::mt19937_64 rng(20251114);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::pair<std::string, Doc>> entries = {
        {"alpha", 1},
        {"beta", Doc::array({1, 2, 3})},
        {"gamma", 0.25},
        {"delta", "text"},
        {"eps", permuted_object({{"x", 1}, {"y", 2}}, rng)},
    };
    ModuleOutput a, b;
    a.type_tag = b.type_tag = "t";
    a.confidence = b.confidence = 0.5;
    a.content = permuted_object(entries, rng);
    b.content = permuted_object(entries, rng);
    REQUIRE(canonical_form(a).bytes == canonical_form(b).bytes);
  }
}

TEST_CASE("canonicalization is idempotent under reparse", "[schema]") {
  ModuleOutput out = validate_output(accepted_record());
  std::string once = canonical_form(out).bytes;
  ModuleOutput reparsed = parse_output(once);
  CHECK(canonical_form(reparsed).bytes == once);
}

TEST_CASE("distinct field values give distinct bytes", "[schema]") {
  ModuleOutput a = validate_output(accepted_record());
  ModuleOutput b = a;
  a.confidence = 0.5;
  b.confidence = 0.6;
  CHECK(canonical_form(a).bytes != canonical_form(b).bytes);
}

TEST_CASE("round trip preserves structural equality", "[schema][property]") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    ModuleOutput out;
    out.type_tag = "t" + std::to_string(trial);
    out.confidence = static_cast<double>(rng() % 1000) / 1000.0;
    out.dependencies = {"a", "b"};
    out.content = permuted_object(
        {{"k1", static_cast<double>(rng() % 100) / 7.0},
         {"k2", Doc::array({"s", 1, false})},
         {"k3", permuted_object({{"n", 42}, {"m", "zz"}}, rng)}},
        rng);
    ModuleOutput round = parse_output(canonical_form(out).bytes);
    CHECK(structurally_equal(out, round));
  }
}

TEST_CASE("raw form preserves insertion order while canonical sorts", "[schema]") {
  ModuleOutput out;
  out.type_tag = "t";
  out.confidence = 0.5;
  out.content = Doc::object();
  out.content["zeta"] = 1;
  out.content["alpha"] = 2;
  std::string raw = raw_form(out);
  std::string canon = canonical_form(out).bytes;
  CHECK(raw.find("zeta") < raw.find("alpha"));
  CHECK(canon.find("alpha") < canon.find("zeta"));
}
