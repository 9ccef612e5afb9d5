#pragma once

// Dual-reward attribution. One scorer produces: a local reward per module
// (standalone output quality against the context), a contribution reward per
// module (full-composition score minus the score with that module ablated),
// bound enforcement on the contribution sum, and the temperature-softmax mix
// of the two. Module-level error attribution ranks by enforced contribution.
//
// The reference scorer is a hashed bag-of-tokens featurizer under a logistic
// link: deterministic, so every reward value is exactly recomputable by an
// independent oracle. A learned scorer can be slotted in behind the same
// surface.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "enskit/common.hpp"
#include "enskit/orchestrator.hpp"
#include "enskit/schema.hpp"

namespace enskit {

inline double sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

struct RewardModel {
  std::uint64_t hash_seed = 0x5eed;
  int dim = 256;
  std::vector<double> weights;  // size dim
  double bias = 0.0;

  static RewardModel zeros(int dim, std::uint64_t hash_seed = 0x5eed) {
    RewardModel rm;
    rm.dim = dim;
    rm.hash_seed = hash_seed;
    rm.weights.assign(static_cast<std::size_t>(dim), 0.0);
    return rm;
  }

  std::size_t feature_bucket(std::string_view token) const {
    return static_cast<std::size_t>(fnv1a64(token, kFnvOffset ^ hash_seed) %
                                    static_cast<std::uint64_t>(dim));
  }
};

// Tokenization rule: maximal runs of ASCII alphanumerics, lowercased;
// whitespace and punctuation separate.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    unsigned char c = static_cast<unsigned char>(ch);
    bool alnum = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') ||
                 (c >= 'A' && c <= 'Z');
    if (alnum) {
      current.push_back(static_cast<char>(
          (c >= 'A' && c <= 'Z') ? c - 'A' + 'a' : c));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

// Scores are kept inside the open unit interval even when the logit
// saturates the double sigmoid.
inline double clamp_score(double s) {
  constexpr double lo = 1e-300;
  constexpr double hi = 0x1.fffffffffffffp-1;  // largest double below 1
  if (s < lo) return lo;
  if (s > hi) return hi;
  return s;
}

// sigma(W^T f + bias) with f the hashed token counts. The dot product runs
// over occupied buckets in ascending bucket order, which pins the floating
// point summation order for exact recomputation.
inline double score(const RewardModel& rm, std::string_view doc) {
  if (doc.empty()) throw Error("EmptyDocument", "cannot score empty document");
  if (rm.dim < 1 || rm.weights.size() != static_cast<std::size_t>(rm.dim))
    throw Error("InvalidRewardModel", "weight vector must have length dim");
  std::map<std::size_t, double> counts;
  for (const auto& token : tokenize(doc)) counts[rm.feature_bucket(token)] += 1.0;
  double acc = rm.bias;
  for (const auto& [bucket, count] : counts) acc += rm.weights[bucket] * count;
  return clamp_score(sigmoid(acc));
}

inline constexpr std::string_view kScoreSeparator = "\n||\n";

// RM(O_i || C): the module's canonical output bytes, then the separator,
// then the rendered context.
inline double local_reward(const RewardModel& rm, const ModuleOutput& output,
                           const Context& ctx) {
  std::string doc = canonical_form(output).bytes;
  doc += kScoreSeparator;
  doc += context_text(ctx);
  return score(rm, doc);
}

// Value added by one module: full-composition score minus the score with
// that module's segment ablated. Lies in (-1,1) because both scores lie in
// (0,1).
inline double contribution_reward(const RewardModel& rm, const Ensemble& ensemble,
                                  std::span<const LabeledOutput> outputs,
                                  std::string_view module_id,
                                  Serialization serialization = Serialization::kCanonical) {
  double full = score(rm, compose(ensemble, outputs, serialization).document());
  double ablated =
      score(rm, ablate_compose(ensemble, outputs, module_id, serialization).document());
  return full - ablated;
}

// Credit cap: if the contributions already sum to at most the full score
// they pass through unchanged; otherwise positive entries are scaled by
// c = max(0, (full - sum_neg) / sum_pos) and negatives are left alone.
// Returns the adjusted values; `violated`, when given, reports whether
// scaling fired.
inline std::vector<double> enforce_bounds(std::span<const double> contribs,
                                          double full_score,
                                          bool* violated = nullptr) {
  if (!(full_score > 0.0 && full_score < 1.0))
    throw Error("InputOutOfRange", "full score must lie in (0,1)");
  double sum = 0.0, sum_pos = 0.0, sum_neg = 0.0;
  for (double c : contribs) {
    if (!(c >= -1.0 && c <= 1.0))
      throw Error("InputOutOfRange", "contribution outside [-1,1]");
    sum += c;
    if (c > 0.0) sum_pos += c;
    else sum_neg += c;
  }
  std::vector<double> out(contribs.begin(), contribs.end());
  if (violated) *violated = false;
  if (sum <= full_score) return out;
  double c = sum_pos > 0.0 ? (full_score - sum_neg) / sum_pos : 0.0;
  if (c < 0.0) c = 0.0;
  for (double& v : out) {
    if (v > 0.0) v *= c;
  }
  // Rounding in the rescaled sum can overshoot the cap by an ulp; nudge the
  // positives down until the bound holds exactly.
  for (int guard = 0; guard < 8; ++guard) {
    double total = 0.0;
    for (double v : out) total += v;
    if (total <= full_score) break;
    for (double& v : out) {
      if (v > 0.0) v *= 0.9999999999999999;
    }
  }
  if (violated) *violated = true;
  return out;
}

// alpha = e^tl / (e^tl + e^tc), beta = 1 - alpha. Computed through the
// stable two-way softmax so alpha + beta is exactly 1.
inline std::pair<double, double> mixing_weights(double tau_l, double tau_c) {
  if (!std::isfinite(tau_l) || !std::isfinite(tau_c))
    throw Error("NonFiniteTemperature", "temperatures must be finite");
  double alpha = sigmoid(tau_l - tau_c);
  alpha = clamp_score(alpha);
  return {alpha, 1.0 - alpha};
}

// Degenerate endpoints alpha or beta equal to 0/1 are admitted so the
// single-signal limits stay expressible.
inline double integrated_reward(double local, double contrib, double alpha,
                                double beta) {
  if (!(alpha >= 0.0 && alpha <= 1.0 && beta >= 0.0 && beta <= 1.0) ||
      std::abs(alpha + beta - 1.0) > 1e-12)
    throw Error("WeightsNotNormalized", "alpha + beta must equal 1");
  return alpha * local + beta * contrib;
}

struct ModuleReward {
  std::string module_id;
  double local = 0.0;
  double contrib_raw = 0.0;
  double contrib = 0.0;      // after bound enforcement
  double integrated = 0.0;   // alpha*local + beta*contrib
};

struct RewardBreakdown {
  std::vector<ModuleReward> modules;  // registration order
  double alpha = 0.5;
  double beta = 0.5;
  double tau_l = 0.0;
  double tau_c = 0.0;
  double full_score = 0.0;
  bool bounds_violation = false;
};

inline Doc breakdown_to_doc(const RewardBreakdown& b) {
  Doc modules = Doc::array();
  for (const auto& m : b.modules) {
    Doc entry = Doc::object();
    entry["module"] = m.module_id;
    entry["local"] = m.local;
    entry["contrib_raw"] = m.contrib_raw;
    entry["contrib"] = m.contrib;
    entry["integrated"] = m.integrated;
    modules.push_back(std::move(entry));
  }
  Doc doc = Doc::object();
  doc["modules"] = std::move(modules);
  doc["alpha"] = b.alpha;
  doc["beta"] = b.beta;
  doc["tau_l"] = b.tau_l;
  doc["tau_c"] = b.tau_c;
  doc["full_score"] = b.full_score;
  doc["bounds_violation"] = b.bounds_violation;
  return doc;
}

inline RewardBreakdown reward_breakdown(const RewardModel& rm,
                                        const Ensemble& ensemble,
                                        std::span<const LabeledOutput> outputs,
                                        const Context& ctx, double tau_l = 0.0,
                                        double tau_c = 0.0,
                                        Serialization serialization = Serialization::kCanonical) {
  RewardBreakdown breakdown;
  breakdown.tau_l = tau_l;
  breakdown.tau_c = tau_c;
  auto [alpha, beta] = mixing_weights(tau_l, tau_c);
  breakdown.alpha = alpha;
  breakdown.beta = beta;
  breakdown.full_score =
      score(rm, compose(ensemble, outputs, serialization).document());

  std::vector<const ModuleOutput*> by_index(ensemble.size(), nullptr);
  for (const auto& lo : outputs) {
    auto idx = ensemble.index_of(lo.module_id);
    if (!idx) throw Error("UnknownModuleOutput", lo.module_id);
    by_index[*idx] = &lo.output;
  }

  std::vector<double> raw;
  raw.reserve(ensemble.size());
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const auto& spec = ensemble.spec(i);
    if (!by_index[i]) throw Error("MissingOutput", spec.module_id);
    ModuleReward mr;
    mr.module_id = spec.module_id;
    mr.local = local_reward(rm, *by_index[i], ctx);
    mr.contrib_raw =
        contribution_reward(rm, ensemble, outputs, spec.module_id, serialization);
    raw.push_back(mr.contrib_raw);
    breakdown.modules.push_back(std::move(mr));
  }

  std::vector<double> enforced =
      enforce_bounds(raw, breakdown.full_score, &breakdown.bounds_violation);
  for (std::size_t i = 0; i < breakdown.modules.size(); ++i) {
    breakdown.modules[i].contrib = enforced[i];
    breakdown.modules[i].integrated =
        integrated_reward(breakdown.modules[i].local, enforced[i], alpha, beta);
  }
  return breakdown;
}

// ---------------------------------------------------------------------------
// Error attribution
// ---------------------------------------------------------------------------

// Which per-module signal drives the ranking. Local ranking exists for the
// no-contribution-reward ablation; the standard attributor ranks by enforced
// contribution.
enum class RankSignal { kContribution, kLocal };

struct AttributionConfig {
  double tau_l = 0.0;
  double tau_c = 0.0;
  // Suspect is flagged when its contribution falls below this fraction of
  // the full score.
  double flag_fraction = 0.05;
  RankSignal signal = RankSignal::kContribution;
  Serialization serialization = Serialization::kCanonical;
};

struct AttributionResult {
  std::vector<std::string> ranked;  // ascending by signal; first is suspect
  std::string suspect;
  bool flagged = false;
  RewardBreakdown breakdown;
};

// Modules ranked ascending by the attribution signal, ties broken by
// registration index. Deterministic and invariant to output supply order.
inline AttributionResult attribute_errors(const RewardModel& rm,
                                          const Ensemble& ensemble,
                                          std::span<const LabeledOutput> outputs,
                                          const Context& ctx,
                                          const AttributionConfig& cfg = {}) {
  AttributionResult result;
  result.breakdown = reward_breakdown(rm, ensemble, outputs, ctx, cfg.tau_l,
                                      cfg.tau_c, cfg.serialization);

  std::vector<std::size_t> order(ensemble.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto& mods = result.breakdown.modules;
  auto key = [&](std::size_t i) {
    return cfg.signal == RankSignal::kContribution ? mods[i].contrib
                                                   : mods[i].local;
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return key(a) < key(b); });

  for (std::size_t i : order) result.ranked.push_back(mods[i].module_id);
  result.suspect = result.ranked.front();
  double threshold = cfg.flag_fraction * result.breakdown.full_score;
  result.flagged = key(order.front()) < threshold;
  return result;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

// Weight vectors are stored sparsely (most ground-truth dimensions are
// zero); values round-trip exactly through the shortest-decimal rendering.
inline Doc reward_model_to_doc(const RewardModel& rm) {
  Doc nonzero = Doc::object();
  for (std::size_t b = 0; b < rm.weights.size(); ++b) {
    if (rm.weights[b] != 0.0) nonzero[std::to_string(b)] = rm.weights[b];
  }
  Doc doc = Doc::object();
  doc["hash_seed"] = rm.hash_seed;
  doc["dim"] = rm.dim;
  doc["bias"] = rm.bias;
  doc["weights_nonzero"] = std::move(nonzero);
  return doc;
}

inline RewardModel reward_model_from_doc(const Doc& doc) {
  RewardModel rm;
  rm.hash_seed = doc.at("hash_seed").get<std::uint64_t>();
  rm.dim = doc.at("dim").get<int>();
  rm.bias = doc.at("bias").get<double>();
  rm.weights.assign(static_cast<std::size_t>(rm.dim), 0.0);
  for (const auto& [k, v] : doc.at("weights_nonzero").items()) {
    std::size_t b = std::stoull(k);
    if (b >= rm.weights.size())
      throw Error("ParseError", "weight index out of range");
    rm.weights[b] = v.get<double>();
  }
  return rm;
}

}  // namespace enskit
