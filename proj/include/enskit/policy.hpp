#pragma once

// Tabular categorical policy over V candidate outputs, conditioned on a
// context bucket. One logit table per module; this is the whole trainable
// parameter record.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "enskit/common.hpp"

namespace enskit {

inline std::size_t bucket_of(std::string_view context_id, int buckets) {
  return static_cast<std::size_t>(fnv1a64(context_id) %
                                  static_cast<std::uint64_t>(buckets));
}

inline double logsumexp(std::span<const double> xs) {
  double m = *std::max_element(xs.begin(), xs.end());
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - m);
  return m + std::log(acc);
}

class ToyPolicy {
public:
  ToyPolicy() = default;

  ToyPolicy(int buckets, int vocab)
      : buckets_(buckets), vocab_(vocab),
        logits_(static_cast<std::size_t>(buckets) * vocab, 0.0) {
    if (buckets < 1) throw Error("InvalidPolicyShape", "buckets must be >= 1");
    if (vocab < 2) throw Error("InvalidPolicyShape", "vocab must be >= 2");
  }

  int buckets() const { return buckets_; }
  int vocab() const { return vocab_; }

  std::span<double> row(std::size_t bucket) {
    return {logits_.data() + bucket * vocab_, static_cast<std::size_t>(vocab_)};
  }
  std::span<const double> row(std::size_t bucket) const {
    return {logits_.data() + bucket * vocab_, static_cast<std::size_t>(vocab_)};
  }

  std::vector<double>& logits() { return logits_; }
  const std::vector<double>& logits() const { return logits_; }

  std::vector<double> probs(std::size_t bucket) const {
    auto r = row(bucket);
    double lse = logsumexp(r);
    std::vector<double> p(r.size());
    for (std::size_t v = 0; v < r.size(); ++v) p[v] = std::exp(r[v] - lse);
    return p;
  }

  double log_prob(std::size_t bucket, std::size_t v) const {
    auto r = row(bucket);
    return r[v] - logsumexp(r);
  }

  std::size_t sample(std::size_t bucket, std::mt19937_64& rng) const {
    return sample_categorical(probs(bucket), uniform01(rng));
  }

private:
  int buckets_ = 0;
  int vocab_ = 0;
  std::vector<double> logits_;
};

}  // namespace enskit
