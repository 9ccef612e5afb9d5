#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include <enskit/policy.hpp>

using namespace enskit;

TEST_CASE("per-bucket probabilities sum to one after arbitrary logit updates",
          "[policy][property]") {
  std::mt19937_64 rng(99);
  ToyPolicy policy(8, 5);
  for (int step = 0; step < 50; ++step) {
    for (auto& z : policy.logits()) z += uniform01(rng) * 4.0 - 2.0;
    for (int b = 0; b < policy.buckets(); ++b) {
      auto p = policy.probs(static_cast<std::size_t>(b));
      double sum = 0.0;
      for (double v : p) sum += v;
      REQUIRE(std::abs(sum - 1.0) < 1e-12);
      for (double v : p) REQUIRE(v > 0.0);
    }
  }
}

TEST_CASE("log_prob matches log of softmax probability", "[policy]") {
  ToyPolicy policy(2, 4);
  policy.logits() = {0.5, -1.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0};
  for (std::size_t b = 0; b < 2; ++b) {
    auto p = policy.probs(b);
    for (std::size_t v = 0; v < 4; ++v) {
      CHECK(policy.log_prob(b, v) ==
            Catch::Approx(std::log(p[v])).epsilon(1e-12));
    }
  }
}

TEST_CASE("bucketing is stable and in range", "[policy]") {
  CHECK(bucket_of("ctx-1", 16) == bucket_of("ctx-1", 16));
  for (int i = 0; i < 100; ++i) {
    auto b = bucket_of("ctx-" + std::to_string(i), 16);
    CHECK(b < 16);
  }
}

TEST_CASE("sampling is deterministic under a fixed seed", "[policy]") {
  ToyPolicy policy(4, 6);
  std::mt19937_64 rng(7);
  for (auto& z : policy.logits()) z = uniform01(rng) * 3.0;
  std::mt19937_64 a(42), b(42);
  for (int i = 0; i < 200; ++i) {
    REQUIRE(policy.sample(i % 4, a) == policy.sample(i % 4, b));
  }
}

TEST_CASE("uniform policy samples every candidate", "[policy]") {
  ToyPolicy policy(1, 4);
  std::mt19937_64 rng(3);
  std::vector<int> hits(4, 0);
  for (int i = 0; i < 400; ++i) ++hits[policy.sample(0, rng)];
  for (int h : hits) CHECK(h > 50);
}

TEST_CASE("degenerate shapes are rejected", "[policy]") {
  CHECK_THROWS_AS(ToyPolicy(0, 4), Error);
  CHECK_THROWS_AS(ToyPolicy(4, 1), Error);
}
