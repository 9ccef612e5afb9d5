#pragma once

// Shared plumbing: error type with stable codes, deterministic hashing,
// seed derivation, and portable uniform sampling helpers.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace enskit {

// All engine failures carry a stable machine-readable code string next to the
// human-readable message. Tests and the CLI match on code(), never on what().
class Error : public std::runtime_error {
public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

private:
  std::string code_;
};

// Usage/config errors map to CLI exit code 2; engine errors to exit code 1.
class UsageError : public Error {
public:
  using Error::Error;
};

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t seed = kFnvOffset) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Per-module run seed: hash(run seed, module id). Fixed so that generator
// outputs do not depend on scheduling order.
inline std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view id) {
  return splitmix64(run_seed ^ fnv1a64(id));
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

inline std::string digest_hex(std::string_view bytes) {
  return hex64(fnv1a64(bytes));
}

// Uniform double in [0,1) with exactly 53 random bits; avoids the
// implementation-defined behaviour of std::uniform_real_distribution.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Inverse-CDF draw from an explicit probability vector. Probabilities must
// sum to ~1; the tail absorbs rounding.
inline std::size_t sample_categorical(const std::vector<double>& probs,
                                      double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.empty() ? 0 : probs.size() - 1;
}

}  // namespace enskit
