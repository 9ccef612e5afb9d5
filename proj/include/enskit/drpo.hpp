#pragma once

// Two-phase preference trainer over tabular module policies.
//
// Phase 1 walks the modules one at a time: everything except module i's
// logit table is frozen and a pairwise preference loss is minimized, where
// the reward difference combines the module's local quality gap and its
// contribution utility gap (full-vs-ablated composition scores on both the
// winning and losing side). Phase 2 then takes one joint step on all
// modules from group-standardized advantages of sampled full-ensemble
// solutions, with a KL leash toward the frozen base snapshot.
//
// Loss modes:
//   literal        L = -ln sigma(gamma (dR - eta KL))
//                  dR is constant in theta; only the KL term carries
//                  gradient. Kept for loss-value and KL-shrinkage checks.
//   dpo-augmented  L = -ln sigma(gamma (dR + m - eta KL)) with the policy
//                  log-probability margin m = ln pi(O_w) - ln pi(O_l)
//                  inside the sigmoid, which makes the per-module update
//                  well-posed. Default.
//
// Training is single-threaded and seeded; two runs with the same config and
// seed produce byte-identical history and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "enskit/common.hpp"
#include "enskit/orchestrator.hpp"
#include "enskit/policy.hpp"
#include "enskit/reward.hpp"
#include "enskit/schema.hpp"

namespace enskit {

// Sum p ln(p/q) with 0 ln 0 = 0. Tiny negative rounding residue is clamped.
inline double kl_categorical(std::span<const double> p,
                             std::span<const double> q) {
  if (p.size() != q.size())
    throw Error("LengthMismatch", "distributions must have equal length");
  double sp = 0.0, sq = 0.0;
  for (double v : p) sp += v;
  for (double v : q) sq += v;
  if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
    throw Error("InvalidDistribution", "probabilities must sum to 1");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) {
      if (q[i] <= 0.0)
        throw Error("SupportMismatch", "p positive where q is zero");
      acc += p[i] * std::log(p[i] / q[i]);
    }
  }
  return acc < 0.0 ? 0.0 : acc;
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

struct TrainConfig {
  enum class LossMode { kLiteral, kDpoAugmented };

  double gamma = 1.0;           // reward scale
  double eta = 0.1;             // KL weight
  double learning_rate = 0.05;  // lambda
  int epochs = 30;              // N
  int batch_size = 32;
  int group_size = 4;           // G, minimum 2
  LossMode loss_mode = LossMode::kDpoAugmented;
  bool learnable_temperatures = false;
  double tau_l = 0.0;  // tau_l == tau_c gives alpha = beta = 0.5
  double tau_c = 0.0;
  bool use_contribution = true;  // false: reward difference is local-only
  bool skip_phase1 = false;      // joint-optimization-only ablation
  std::uint64_t seed = 7;
  double advantage_epsilon = 1e-8;

  void validate() const {
    if (!(gamma > 0.0)) throw Error("InvalidConfig", "gamma must be > 0");
    if (!(eta >= 0.0)) throw Error("InvalidConfig", "eta must be >= 0");
    if (!(learning_rate > 0.0))
      throw Error("InvalidConfig", "learning rate must be > 0");
    if (group_size < 2) throw Error("DegenerateGroup", "group size must be >= 2");
    if (batch_size < 1) throw Error("InvalidConfig", "batch size must be >= 1");
    if (epochs < 0) throw Error("InvalidConfig", "epochs must be >= 0");
  }
};

inline Doc train_config_to_doc(const TrainConfig& cfg) {
  Doc doc = Doc::object();
  doc["gamma"] = cfg.gamma;
  doc["eta"] = cfg.eta;
  doc["learning_rate"] = cfg.learning_rate;
  doc["epochs"] = cfg.epochs;
  doc["batch_size"] = cfg.batch_size;
  doc["group_size"] = cfg.group_size;
  doc["loss_mode"] = cfg.loss_mode == TrainConfig::LossMode::kLiteral
                         ? "literal"
                         : "dpo-augmented";
  doc["learnable_temperatures"] = cfg.learnable_temperatures;
  doc["tau_l"] = cfg.tau_l;
  doc["tau_c"] = cfg.tau_c;
  doc["use_contribution"] = cfg.use_contribution;
  doc["skip_phase1"] = cfg.skip_phase1;
  doc["seed"] = cfg.seed;
  doc["advantage_epsilon"] = cfg.advantage_epsilon;
  return doc;
}

inline TrainConfig train_config_from_doc(const Doc& doc) {
  TrainConfig cfg;
  cfg.gamma = doc.at("gamma").get<double>();
  cfg.eta = doc.at("eta").get<double>();
  cfg.learning_rate = doc.at("learning_rate").get<double>();
  cfg.epochs = doc.at("epochs").get<int>();
  cfg.batch_size = doc.at("batch_size").get<int>();
  cfg.group_size = doc.at("group_size").get<int>();
  const std::string mode = doc.at("loss_mode").get<std::string>();
  if (mode == "literal") cfg.loss_mode = TrainConfig::LossMode::kLiteral;
  else if (mode == "dpo-augmented") cfg.loss_mode = TrainConfig::LossMode::kDpoAugmented;
  else throw Error("ParseError", "unknown loss mode: " + mode);
  cfg.learnable_temperatures = doc.at("learnable_temperatures").get<bool>();
  cfg.tau_l = doc.at("tau_l").get<double>();
  cfg.tau_c = doc.at("tau_c").get<double>();
  cfg.use_contribution = doc.at("use_contribution").get<bool>();
  cfg.skip_phase1 = doc.at("skip_phase1").get<bool>();
  cfg.seed = doc.at("seed").get<std::uint64_t>();
  cfg.advantage_epsilon = doc.at("advantage_epsilon").get<double>();
  return cfg;
}

// Pointwise preference loss. `logprob_margin` is ignored in literal mode.
inline double drpo_loss(double delta_r, double kl, double logprob_margin,
                        const TrainConfig& cfg) {
  if (!(kl >= 0.0)) throw Error("InputOutOfRange", "kl must be nonnegative");
  double inner = delta_r - cfg.eta * kl;
  if (cfg.loss_mode == TrainConfig::LossMode::kDpoAugmented)
    inner += logprob_margin;
  return softplus(-cfg.gamma * inner);
}

struct PreferenceTriple {
  Context ctx;
  std::vector<LabeledOutput> win;
  std::vector<LabeledOutput> lose;
};

inline Doc triple_to_doc(const PreferenceTriple& t) {
  auto side_to_doc = [](const std::vector<LabeledOutput>& side) {
    Doc arr = Doc::array();
    for (const auto& lo : side) {
      Doc entry = Doc::object();
      entry["module"] = lo.module_id;
      entry["output"] = output_to_doc(lo.output);
      arr.push_back(std::move(entry));
    }
    return arr;
  };
  Doc doc = Doc::object();
  doc["context"] = context_to_doc(t.ctx);
  doc["win"] = side_to_doc(t.win);
  doc["lose"] = side_to_doc(t.lose);
  return doc;
}

inline PreferenceTriple triple_from_doc(const Doc& doc) {
  auto side_from_doc = [](const Doc& arr) {
    std::vector<LabeledOutput> side;
    for (const auto& entry : arr) {
      side.push_back({entry.at("module").get<std::string>(),
                      validate_output(entry.at("output"))});
    }
    return side;
  };
  PreferenceTriple t;
  t.ctx = context_from_doc(doc.at("context"));
  t.win = side_from_doc(doc.at("win"));
  t.lose = side_from_doc(doc.at("lose"));
  return t;
}

// Reward difference for one module on one triple:
//   alpha * (local quality gap) + beta * (contribution utility gap),
// the latter comparing full-vs-ablated composition scores on the winning
// and losing sides.
inline double reward_difference(const RewardModel& rm, const Ensemble& ensemble,
                                const PreferenceTriple& triple,
                                std::string_view module_id, double alpha,
                                double beta,
                                Serialization serialization = Serialization::kCanonical) {
  auto idx = ensemble.index_of(module_id);
  if (!idx) throw Error("ModuleNotRegistered", std::string(module_id));
  const ModuleOutput* win_out = nullptr;
  const ModuleOutput* lose_out = nullptr;
  for (const auto& lo : triple.win)
    if (lo.module_id == module_id) win_out = &lo.output;
  for (const auto& lo : triple.lose)
    if (lo.module_id == module_id) lose_out = &lo.output;
  if (!win_out || !lose_out)
    throw Error("IncompleteTriple", std::string(module_id));

  double local_gap = local_reward(rm, *win_out, triple.ctx) -
                     local_reward(rm, *lose_out, triple.ctx);
  double contrib_gap =
      contribution_reward(rm, ensemble, triple.win, module_id, serialization) -
      contribution_reward(rm, ensemble, triple.lose, module_id, serialization);
  return alpha * local_gap + beta * contrib_gap;
}

// ---------------------------------------------------------------------------
// Analytic losses over explicit samples. These are the functions the
// finite-difference checks drive; the trainer assembles samples and calls
// the same code.
// ---------------------------------------------------------------------------

// One triple's view for one module. local_gap/contrib_gap are constants
// with respect to the logits.
struct PreferencePair {
  std::size_t bucket = 0;
  std::size_t win = 0;
  std::size_t lose = 0;
  double local_gap = 0.0;
  double contrib_gap = 0.0;
};

namespace detail {

// d KL(p || q) / d z_a = p_a (ln(p_a/q_a) - KL)
inline void add_kl_grad(std::span<const double> p, std::span<const double> q,
                        double kl, double scale, std::span<double> grad) {
  for (std::size_t a = 0; a < p.size(); ++a) {
    grad[a] += scale * p[a] * (std::log(p[a] / q[a]) - kl);
  }
}

}  // namespace detail

struct PreferenceLossStats {
  double loss = 0.0;
  double mean_delta_r = 0.0;
  double mean_kl = 0.0;
  double grad_tau_l = 0.0;  // populated when learnable_temperatures
  double grad_tau_c = 0.0;
};

// Mean preference loss over pairs for one module's table, with analytic
// gradient in `grad_logits` (dense B*V, preallocated and zeroed by caller).
inline PreferenceLossStats preference_loss(
    const ToyPolicy& policy, const ToyPolicy& base,
    std::span<const PreferencePair> pairs, const TrainConfig& cfg,
    double alpha, double beta, std::vector<double>* grad_logits = nullptr) {
  PreferenceLossStats stats;
  if (pairs.empty()) return stats;
  const std::size_t vocab = static_cast<std::size_t>(policy.vocab());
  const double inv_n = 1.0 / static_cast<double>(pairs.size());

  // Bucket-level probabilities are shared by the pairs that hit the bucket.
  std::map<std::size_t, std::pair<std::vector<double>, double>> by_bucket;
  auto bucket_probs = [&](std::size_t b)
      -> const std::pair<std::vector<double>, double>& {
    auto it = by_bucket.find(b);
    if (it == by_bucket.end()) {
      std::vector<double> p = policy.probs(b);
      double kl = kl_categorical(p, base.probs(b));
      it = by_bucket.emplace(b, std::make_pair(std::move(p), kl)).first;
    }
    return it->second;
  };

  for (const auto& pair : pairs) {
    const auto& [p, kl] = bucket_probs(pair.bucket);
    double delta_r = alpha * pair.local_gap + beta * pair.contrib_gap;
    double margin = 0.0;
    if (cfg.loss_mode == TrainConfig::LossMode::kDpoAugmented)
      margin = policy.log_prob(pair.bucket, pair.win) -
               policy.log_prob(pair.bucket, pair.lose);
    double u = cfg.gamma * (delta_r + margin - cfg.eta * kl);
    stats.loss += softplus(-u) * inv_n;
    stats.mean_delta_r += delta_r * inv_n;
    stats.mean_kl += kl * inv_n;

    if (grad_logits) {
      double g = (sigmoid(u) - 1.0) * inv_n;  // dL/du, batch-mean scaled
      std::span<double> row{grad_logits->data() + pair.bucket * vocab, vocab};
      if (cfg.loss_mode == TrainConfig::LossMode::kDpoAugmented) {
        // d margin / d z = e_win - e_lose
        row[pair.win] += g * cfg.gamma;
        row[pair.lose] -= g * cfg.gamma;
      }
      if (cfg.eta != 0.0) {
        detail::add_kl_grad(p, base.probs(pair.bucket), kl,
                            -g * cfg.gamma * cfg.eta, row);
      }
      if (cfg.learnable_temperatures) {
        // d delta_r / d tau_l = alpha beta (local_gap - contrib_gap)
        double dab = alpha * beta * (pair.local_gap - pair.contrib_gap);
        stats.grad_tau_l += g * cfg.gamma * dab;
        stats.grad_tau_c -= g * cfg.gamma * dab;
      }
    }
  }
  return stats;
}

// One context's sampled group for the joint step. Advantages are
// group-standardized rewards, held constant under differentiation.
struct GroupSample {
  std::size_t bucket = 0;
  std::vector<std::vector<std::size_t>> choices;  // [G][k]
  std::vector<double> advantages;                 // [G]
};

// Joint surrogate: mean over groups of -(1/G) sum_j A_j sum_i ln pi_i plus
// eta * mean over groups of sum_i KL_i(bucket). Gradients per module table
// go into `grads` (k tables, preallocated/zeroed) when given.
inline double group_advantage_loss(std::span<const ToyPolicy> policies,
                                   std::span<const ToyPolicy> bases,
                                   std::span<const GroupSample> groups,
                                   double eta,
                                   std::vector<std::vector<double>>* grads = nullptr) {
  if (groups.empty()) return 0.0;
  const std::size_t k = policies.size();
  const double inv_groups = 1.0 / static_cast<double>(groups.size());
  double total = 0.0;
  for (const auto& group : groups) {
    const double inv_g = 1.0 / static_cast<double>(group.choices.size());
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t b = group.bucket;
      std::vector<double> p = policies[i].probs(b);
      std::vector<double> q = bases[i].probs(b);
      double kl = kl_categorical(p, q);
      total += eta * kl * inv_groups;
      double policy_term = 0.0;
      for (std::size_t j = 0; j < group.choices.size(); ++j) {
        policy_term -= group.advantages[j] *
                       policies[i].log_prob(b, group.choices[j][i]) * inv_g;
      }
      total += policy_term * inv_groups;
      if (grads) {
        const std::size_t vocab = static_cast<std::size_t>(policies[i].vocab());
        std::span<double> row{(*grads)[i].data() + b * vocab, vocab};
        for (std::size_t j = 0; j < group.choices.size(); ++j) {
          // d(-A ln pi(v)) / d z = -A (e_v - p)
          double scale = -group.advantages[j] * inv_g * inv_groups;
          row[group.choices[j][i]] += scale;
          for (std::size_t a = 0; a < vocab; ++a) row[a] -= scale * p[a];
        }
        if (eta != 0.0)
          detail::add_kl_grad(p, q, kl, eta * inv_groups, row);
      }
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct TrainHistoryRecord {
  std::string phase;  // "phase1" | "phase2"
  std::string module_id;
  int epoch = 0;
  double loss = 0.0;
  double mean_delta_r = 0.0;
  double mean_kl = 0.0;
  double global_reward = 0.0;  // phase2: mean sampled composition score
  std::string seed_digest;
};

inline Doc history_to_doc(const std::vector<TrainHistoryRecord>& history) {
  Doc arr = Doc::array();
  for (const auto& r : history) {
    Doc entry = Doc::object();
    entry["phase"] = r.phase;
    entry["module"] = r.module_id;
    entry["epoch"] = r.epoch;
    entry["loss"] = r.loss;
    entry["mean_delta_r"] = r.mean_delta_r;
    entry["mean_kl"] = r.mean_kl;
    entry["global_reward"] = r.global_reward;
    entry["seed_digest"] = r.seed_digest;
    arr.push_back(std::move(entry));
  }
  return arr;
}

class Trainer {
public:
  Trainer(Ensemble ensemble, RewardModel rm, TrainConfig cfg)
      : ensemble_(std::move(ensemble)), rm_(std::move(rm)), cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t k = ensemble_.size();
    if (k == 0) throw Error("EmptyEnsemble", "no modules to train");
    for (std::size_t i = 0; i < k; ++i) {
      const auto* toy = std::get_if<ToyPolicyParams>(&ensemble_.params(i));
      if (!toy)
        throw Error("ModuleNotTrainable",
                    ensemble_.spec(i).module_id + " has no policy table");
      base_.push_back(toy->policy);  // frozen reference snapshot
    }
    std::tie(alpha_, beta_) = mixing_weights(cfg_.tau_l, cfg_.tau_c);
    if (!cfg_.use_contribution) {
      alpha_ = 1.0;
      beta_ = 0.0;
    }
  }

  const Ensemble& ensemble() const { return ensemble_; }
  Ensemble& mutable_ensemble() { return ensemble_; }
  const std::vector<ToyPolicy>& base() const { return base_; }
  const RewardModel& reward_model() const { return rm_; }
  double alpha() const { return alpha_; }
  double beta() const { return beta_; }
  double tau_l() const { return cfg_.tau_l; }
  double tau_c() const { return cfg_.tau_c; }

  std::string base_digest() const {
    Doc tables = Doc::array();
    for (const auto& p : base_) tables.push_back(p.logits());
    return digest_hex(tables.dump());
  }

  // One pass of module-wise optimization over the dataset for module i.
  // Only theta_i changes; every other table and the scorer stay untouched.
  TrainHistoryRecord phase1_pass(const std::vector<PreferenceTriple>& dataset,
                                 std::size_t module_index, int epoch) {
    if (module_index >= ensemble_.size())
      throw Error("ModuleNotRegistered", "module index out of range");
    ensure_precomputed(dataset);
    auto& toy = std::get<ToyPolicyParams>(ensemble_.params(module_index));
    ToyPolicy& policy = toy.policy;
    const ToyPolicy& base = base_[module_index];

    std::uint64_t pass_seed = derive_seed(
        cfg_.seed, "phase1/" + std::to_string(epoch) + "/" +
                       ensemble_.spec(module_index).module_id);
    std::mt19937_64 rng(pass_seed);
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);

    TrainHistoryRecord record;
    record.phase = "phase1";
    record.module_id = ensemble_.spec(module_index).module_id;
    record.epoch = epoch;
    record.seed_digest = hex64(pass_seed);

    const std::size_t batch = static_cast<std::size_t>(cfg_.batch_size);
    std::vector<double> grad(policy.logits().size(), 0.0);
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::size_t stop = std::min(order.size(), start + batch);
      std::vector<PreferencePair> pairs;
      pairs.reserve(stop - start);
      for (std::size_t j = start; j < stop; ++j)
        pairs.push_back(pair_for(order[j], module_index));
      std::fill(grad.begin(), grad.end(), 0.0);
      PreferenceLossStats stats = preference_loss(policy, base, pairs, cfg_,
                                                  alpha_, beta_, &grad);
      for (std::size_t a = 0; a < grad.size(); ++a)
        policy.logits()[a] -= cfg_.learning_rate * grad[a];
      if (cfg_.learnable_temperatures) {
        cfg_.tau_l -= cfg_.learning_rate * stats.grad_tau_l;
        cfg_.tau_c -= cfg_.learning_rate * stats.grad_tau_c;
        refresh_mixing();
      }
      double w = static_cast<double>(pairs.size());
      record.loss += stats.loss * w;
      record.mean_delta_r += stats.mean_delta_r * w;
      record.mean_kl += stats.mean_kl * w;
      seen += pairs.size();
    }
    if (seen > 0) {
      record.loss /= static_cast<double>(seen);
      record.mean_delta_r /= static_cast<double>(seen);
      record.mean_kl /= static_cast<double>(seen);
    }
    return record;
  }

  // One joint step from group-standardized advantages over a context batch.
  TrainHistoryRecord phase2_step(const std::vector<Context>& contexts,
                                 int epoch) {
    if (cfg_.group_size < 2)
      throw Error("DegenerateGroup", "group size must be >= 2");
    if (contexts.empty())
      throw Error("EmptyDataset", "phase 2 needs at least one context");
    const std::size_t k = ensemble_.size();
    const std::size_t group_n = static_cast<std::size_t>(cfg_.group_size);

    std::uint64_t step_seed =
        derive_seed(cfg_.seed, "phase2/" + std::to_string(epoch));
    std::mt19937_64 rng(step_seed);

    std::vector<ToyPolicy> policies;
    policies.reserve(k);
    for (std::size_t i = 0; i < k; ++i)
      policies.push_back(std::get<ToyPolicyParams>(ensemble_.params(i)).policy);

    double reward_sum = 0.0;
    std::vector<GroupSample> groups;
    groups.reserve(contexts.size());
    for (const auto& ctx : contexts) {
      GroupSample group;
      group.bucket = bucket_of(
          ctx.context_id,
          std::get<ToyPolicyParams>(ensemble_.params(0)).policy.buckets());
      std::vector<double> rewards(group_n, 0.0);
      for (std::size_t j = 0; j < group_n; ++j) {
        std::vector<std::size_t> choice(k);
        std::vector<LabeledOutput> outputs;
        outputs.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
          const auto& toy = std::get<ToyPolicyParams>(ensemble_.params(i));
          choice[i] = toy.policy.sample(group.bucket, rng);
          outputs.push_back({ensemble_.spec(i).module_id,
                             render_candidate(toy, group.bucket, choice[i])});
        }
        rewards[j] = score(rm_, compose(ensemble_, outputs).document());
        group.choices.push_back(std::move(choice));
      }
      double mean = 0.0;
      for (double r : rewards) mean += r;
      mean /= static_cast<double>(group_n);
      double var = 0.0;
      for (double r : rewards) var += (r - mean) * (r - mean);
      var /= static_cast<double>(group_n);
      double std_dev = std::sqrt(var);
      group.advantages.resize(group_n);
      for (std::size_t j = 0; j < group_n; ++j)
        group.advantages[j] = (rewards[j] - mean) / (std_dev + cfg_.advantage_epsilon);
      reward_sum += mean;
      groups.push_back(std::move(group));
    }

    std::vector<std::vector<double>> grads(k);
    for (std::size_t i = 0; i < k; ++i)
      grads[i].assign(policies[i].logits().size(), 0.0);
    double loss =
        group_advantage_loss(policies, base_, groups, cfg_.eta, &grads);

    double mean_kl = 0.0;
    for (const auto& group : groups) {
      for (std::size_t i = 0; i < k; ++i) {
        mean_kl += kl_categorical(policies[i].probs(group.bucket),
                                  base_[i].probs(group.bucket));
      }
    }
    mean_kl /= static_cast<double>(groups.size() * k);

    for (std::size_t i = 0; i < k; ++i) {
      auto& logits = std::get<ToyPolicyParams>(ensemble_.params(i)).policy.logits();
      for (std::size_t a = 0; a < logits.size(); ++a)
        logits[a] -= cfg_.learning_rate * grads[i][a];
    }

    TrainHistoryRecord record;
    record.phase = "phase2";
    record.epoch = epoch;
    record.loss = loss;
    record.mean_kl = mean_kl;
    record.global_reward = reward_sum / static_cast<double>(groups.size());
    record.seed_digest = hex64(step_seed);
    return record;
  }

  // Full protocol: per epoch, one module-wise pass for every module, then
  // one joint alignment step on contexts drawn from the dataset.
  std::vector<TrainHistoryRecord> train(
      const std::vector<PreferenceTriple>& dataset) {
    if (dataset.empty()) throw Error("EmptyDataset", "no preference triples");
    ensure_precomputed(dataset);
    std::vector<TrainHistoryRecord> history;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      if (!cfg_.skip_phase1) {
        for (std::size_t i = 0; i < ensemble_.size(); ++i)
          history.push_back(phase1_pass(dataset, i, epoch));
      }
      std::uint64_t ctx_seed =
          derive_seed(cfg_.seed, "phase2-contexts/" + std::to_string(epoch));
      std::mt19937_64 rng(ctx_seed);
      std::vector<Context> contexts;
      std::size_t n = std::min(dataset.size(),
                               static_cast<std::size_t>(cfg_.batch_size));
      for (std::size_t j = 0; j < n; ++j) {
        contexts.push_back(
            dataset[rng() % dataset.size()].ctx);
      }
      history.push_back(phase2_step(contexts, epoch));
    }
    return history;
  }

  // Reward difference under the trainer's current mixing weights, via the
  // precomputed per-triple statistics.
  double reward_difference_for(const std::vector<PreferenceTriple>& dataset,
                               std::size_t triple_index,
                               std::size_t module_index) {
    ensure_precomputed(dataset);
    const auto& pair = pair_for(triple_index, module_index);
    return alpha_ * pair.local_gap + beta_ * pair.contrib_gap;
  }

private:
  void refresh_mixing() {
    std::tie(alpha_, beta_) = mixing_weights(cfg_.tau_l, cfg_.tau_c);
    if (!cfg_.use_contribution) {
      alpha_ = 1.0;
      beta_ = 0.0;
    }
  }

  // Candidate index of the output inside module i's template table for the
  // context bucket; built lazily per (module, bucket).
  std::size_t candidate_index(std::size_t module_index, std::size_t bucket,
                              const ModuleOutput& output) {
    auto& per_bucket = candidate_cache_[module_index];
    auto it = per_bucket.find(bucket);
    if (it == per_bucket.end()) {
      const auto& toy = std::get<ToyPolicyParams>(ensemble_.params(module_index));
      std::unordered_map<std::string, std::size_t> table;
      for (std::size_t v = 0; v < toy.templates.size(); ++v) {
        table[canonical_form(render_candidate(toy, bucket, v)).bytes] = v;
      }
      it = per_bucket.emplace(bucket, std::move(table)).first;
    }
    auto found = it->second.find(canonical_form(output).bytes);
    if (found == it->second.end())
      throw Error("UnknownCandidate",
                  "output does not match any candidate template");
    return found->second;
  }

  // Local and contribution gaps are fixed properties of the dataset; compute
  // them once per (triple, module).
  void ensure_precomputed(const std::vector<PreferenceTriple>& dataset) {
    if (precomputed_for_ == &dataset && !pairs_.empty()) return;
    const std::size_t k = ensemble_.size();
    candidate_cache_.clear();
    candidate_cache_.resize(k);
    pairs_.assign(dataset.size(), std::vector<PreferencePair>(k));
    for (std::size_t t = 0; t < dataset.size(); ++t) {
      const auto& triple = dataset[t];
      if (triple.win.size() != k || triple.lose.size() != k)
        throw Error("IncompleteTriple",
                    "each side must carry one output per module");
      double full_w = score(rm_, compose(ensemble_, triple.win).document());
      double full_l = score(rm_, compose(ensemble_, triple.lose).document());
      std::size_t bucket = bucket_of(
          triple.ctx.context_id,
          std::get<ToyPolicyParams>(ensemble_.params(0)).policy.buckets());
      for (std::size_t i = 0; i < k; ++i) {
        const auto& spec = ensemble_.spec(i);
        const ModuleOutput* win_out = nullptr;
        const ModuleOutput* lose_out = nullptr;
        for (const auto& lo : triple.win)
          if (lo.module_id == spec.module_id) win_out = &lo.output;
        for (const auto& lo : triple.lose)
          if (lo.module_id == spec.module_id) lose_out = &lo.output;
        if (!win_out || !lose_out)
          throw Error("IncompleteTriple", spec.module_id);
        PreferencePair pair;
        pair.bucket = bucket;
        pair.win = candidate_index(i, bucket, *win_out);
        pair.lose = candidate_index(i, bucket, *lose_out);
        pair.local_gap = local_reward(rm_, *win_out, triple.ctx) -
                         local_reward(rm_, *lose_out, triple.ctx);
        double abl_w = score(
            rm_, ablate_compose(ensemble_, triple.win, spec.module_id).document());
        double abl_l = score(
            rm_, ablate_compose(ensemble_, triple.lose, spec.module_id).document());
        pair.contrib_gap = (full_w - abl_w) - (full_l - abl_l);
        pairs_[t][i] = pair;
      }
    }
    precomputed_for_ = &dataset;
  }

  const PreferencePair& pair_for(std::size_t triple_index,
                                 std::size_t module_index) const {
    return pairs_.at(triple_index).at(module_index);
  }

  Ensemble ensemble_;
  RewardModel rm_;
  TrainConfig cfg_;
  std::vector<ToyPolicy> base_;
  double alpha_ = 0.5;
  double beta_ = 0.5;
  std::vector<std::unordered_map<std::size_t,
                                 std::unordered_map<std::string, std::size_t>>>
      candidate_cache_;
  std::vector<std::vector<PreferencePair>> pairs_;
  const void* precomputed_for_ = nullptr;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline Doc checkpoint_to_doc(const Ensemble& ensemble,
                             const std::vector<ToyPolicy>& base,
                             const TrainConfig& cfg) {
  Doc base_tables = Doc::array();
  for (const auto& p : base) {
    Doc t = Doc::object();
    t["buckets"] = p.buckets();
    t["vocab"] = p.vocab();
    t["logits"] = p.logits();
    base_tables.push_back(std::move(t));
  }
  Doc doc = Doc::object();
  doc["ensemble"] = ensemble_to_doc(ensemble);
  doc["base"] = std::move(base_tables);
  doc["config"] = train_config_to_doc(cfg);
  doc["seed"] = cfg.seed;
  return doc;
}

struct Checkpoint {
  Ensemble ensemble;
  std::vector<ToyPolicy> base;
  TrainConfig cfg;
};

inline Checkpoint checkpoint_from_doc(const Doc& doc) {
  Checkpoint ckpt;
  ckpt.ensemble = load_ensemble(doc.at("ensemble"));
  for (const auto& t : doc.at("base")) {
    ToyPolicy p(t.at("buckets").get<int>(), t.at("vocab").get<int>());
    auto logits = t.at("logits").get<std::vector<double>>();
    if (logits.size() != p.logits().size())
      throw Error("ParseError", "base table size mismatch");
    p.logits() = std::move(logits);
    ckpt.base.push_back(std::move(p));
  }
  ckpt.cfg = train_config_from_doc(doc.at("config"));
  return ckpt;
}

}  // namespace enskit
