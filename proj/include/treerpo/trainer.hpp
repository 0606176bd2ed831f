// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "treerpo/credit.hpp"
#include "treerpo/env.hpp"
#include "treerpo/errors.hpp"
#include "treerpo/eval.hpp"
#include "treerpo/policy.hpp"
#include "treerpo/rng.hpp"
#include "treerpo/tree.hpp"

namespace treerpo {

enum class TrainMode { kTreeRpo, kGrpo };
enum class KlEstimator { kExact, kK3 };
enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  TrainMode mode = TrainMode::kTreeRpo;
  std::uint64_t seed = 1;
  int iterations = 500;

  // Objective.
  double clip_eps = 0.2;
  double kl_beta = 0.001;
  KlEstimator kl_estimator = KlEstimator::kExact;
  double entropy_alpha = -0.001;  // enters as +alpha * H

  // Optimizer.
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double minibatch_fraction = 0.5;

  // Credit assignment.
  double tau = 0.1;
  std::optional<AdvantageVariant> advantage;  // default: TREERPO mode -> kTreeRpo, GRPO -> kGrpoStd
  double sigma_floor = 1e-6;
  bool grpo_prune = false;  // GRPO mode trains on the unpruned root group unless set

  // Rollouts.
  TreeConfig tree;
  int group_size = 8;   // GRPO G
  int max_tokens = 24;  // GRPO trajectory cap
  int tasks_per_batch = 16;
  int rollout_threads = 1;

  // Policy.
  int window = 4;
  double init_scale = 0.01;
  int ref_refresh_every = 0;  // 0: pi_ref stays the initial policy

  // Tasks and evaluation.
  int difficulty_min = 1;
  int difficulty_max = 2;
  int modulus = 10;
  int eval_tasks = 64;
  int eval_every = 10;
  EvalConfig eval;
  int checkpoint_every = 0;  // 0: final checkpoint only
  bool log_wall_time = false;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  AdvantageVariant advantage_variant() const {
    return advantage.value_or(mode == TrainMode::kTreeRpo ? AdvantageVariant::kTreeRpo
                                                          : AdvantageVariant::kGrpoStd);
  }
  AdvantageMode advantage_mode() const { return {advantage_variant(), sigma_floor}; }

  /// Pruning threshold actually applied by the pipeline (nullopt: keep all).
  std::optional<double> effective_tau() const {
    if (mode == TrainMode::kGrpo && !grpo_prune) return std::nullopt;
    return tau;
  }
};

inline void validate(const TrainConfig& c) {
  auto fail = [](const std::string& field, const std::string& rule) {
    throw ConfigError(field + ": " + rule);
  };
  if (!(c.clip_eps > 0.0 && c.clip_eps < 1.0)) fail("clip_eps", "must be in (0, 1)");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) fail("learning_rate", "must be > 0");
  if (!std::isfinite(c.kl_beta) || c.kl_beta < 0.0) fail("kl_beta", "must be >= 0");
  if (!std::isfinite(c.entropy_alpha)) fail("entropy_alpha", "must be finite");
  if (!(c.minibatch_fraction > 0.0 && c.minibatch_fraction <= 1.0))
    fail("minibatch_fraction", "must be in (0, 1]");
  if (!(c.tau >= 0.0) || !std::isfinite(c.tau)) fail("tau", "must be >= 0");
  if (!(c.sigma_floor > 0.0)) fail("sigma_floor", "must be > 0");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) fail("adam_beta1", "must be in [0, 1)");
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) fail("adam_beta2", "must be in [0, 1)");
  if (!(c.adam_eps > 0.0)) fail("adam_eps", "must be > 0");
  if (c.iterations < 0) fail("iterations", "must be >= 0");
  if (c.tasks_per_batch < 1) fail("tasks_per_batch", "must be >= 1");
  if (c.rollout_threads < 1) fail("rollout_threads", "must be >= 1");
  if (c.group_size < 2) fail("group_size", "must be >= 2");
  if (c.max_tokens < 1) fail("max_tokens", "must be >= 1");
  if (c.window < 1) fail("window", "must be >= 1");
  if (!(c.init_scale >= 0.0)) fail("init_scale", "must be >= 0");
  if (c.ref_refresh_every < 0) fail("ref_refresh_every", "must be >= 0");
  if (c.difficulty_min < 1 || c.difficulty_max < c.difficulty_min || c.difficulty_max > kMaxDifficulty)
    fail("difficulty_min", "need 1 <= difficulty_min <= difficulty_max <= " + std::to_string(kMaxDifficulty));
  if (c.modulus < 2 || c.modulus > 100) fail("modulus", "must be in [2, 100]");
  if (c.eval_tasks < 1) fail("eval_tasks", "must be >= 1");
  if (c.eval_every < 1) fail("eval_every", "must be >= 1");
  if (c.checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
  if (c.eval.samples_per_task < 1) fail("eval_samples", "must be >= 1");
  if (!(c.eval.temperature > 0.0)) fail("eval_temperature", "must be > 0");
  if (c.eval.max_tokens < 1) fail("eval_max_tokens", "must be >= 1");
  if (c.tree.branching < 1) fail("branching", "must be >= 1");
  if (c.tree.max_depth < 1) fail("max_depth", "must be >= 1");
  if (c.tree.step_tokens < 1) fail("step_tokens", "must be >= 1");
  if (!(c.tree.temperature > 0.0)) fail("temperature", "must be > 0");
  if (c.mode == TrainMode::kTreeRpo) validate(c.tree);  // node budget -> ResourceError
}

struct UpdateReport {
  double surrogate_loss = 0.0;  // signed, maximized
  double objective = 0.0;
  double mean_kl = 0.0;
  double mean_entropy = 0.0;
  double clip_fraction = 0.0;
  std::size_t samples_used = 0;
  double grad_norm = 0.0;
};

struct ObjectiveResult {
  double value = 0.0;
  PolicyParams grad;
  UpdateReport report;
};

/// Clipped surrogate with KL penalty and entropy term, averaged per sample
/// over its tokens (1/|o_i|) and then over the G samples of the batch:
///
///   J = 1/G sum_i 1/|o_i| sum_t [ min(r A, clip(r, 1-eps, 1+eps) A)
///                                 - beta KL_t(pi || pi_ref) + alpha H_t(pi) ]
///
/// with r = exp(log pi(o_t) - old_log_prob_t). Returns the value and its exact
/// gradient; nullopt for an empty batch (skip the update).
inline std::optional<ObjectiveResult> step_objective(const PolicyParams& live, const PolicyParams& ref,
                                                     std::span<const TrainSample> batch,
                                                     const TrainConfig& cfg) {
  if (batch.empty()) return std::nullopt;
  if (!live.same_shape(ref)) throw ContractViolation("step_objective: policy shapes differ");

  const int V = live.vocab_size();
  const int F = live.feature_dim();
  const auto Vs = static_cast<std::size_t>(V);
  const double eps = cfg.clip_eps, beta = cfg.kl_beta, alpha = cfg.entropy_alpha;
  const bool need_ref = beta != 0.0;

  ObjectiveResult out{0.0, PolicyParams(V, live.window()), {}};
  auto gw = out.grad.weights();
  std::vector<double> z(Vs), lp(Vs), p(Vs), zr(Vs), lq(Vs), dz(Vs);
  std::size_t tokens = 0, clipped = 0;
  const double G = static_cast<double>(batch.size());

  for (const auto& s : batch) {
    if (s.segment.empty() || s.segment.size() != s.old_log_probs.size())
      throw ContractViolation("step_objective: malformed sample");
    const double c = 1.0 / (G * static_cast<double>(s.segment.size()));
    for (std::size_t t = 0; t < s.segment.size(); ++t) {
      const auto tok = static_cast<std::size_t>(s.segment[t]);
      detail::raw_logits(live, s.context, s.segment, t, z);
      detail::log_softmax(z, lp);
      for (std::size_t v = 0; v < Vs; ++v) p[v] = std::exp(lp[v]);

      // Surrogate and its derivative with respect to log pi(tok).
      const double ratio = std::exp(lp[tok] - s.old_log_probs[t]);
      const double A = s.advantage;
      const double unclipped = ratio * A;
      const double clipped_term = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * A;
      double surr = unclipped, d_surr = ratio * A;
      if (clipped_term < unclipped) {
        surr = clipped_term;
        d_surr = 0.0;
        ++clipped;
      }
      ++tokens;

      double H = 0.0;
      for (std::size_t v = 0; v < Vs; ++v) H -= p[v] * lp[v];

      // dz accumulates d(term)/d(logits).
      for (std::size_t v = 0; v < Vs; ++v) dz[v] = -d_surr * p[v] - alpha * p[v] * (lp[v] + H);
      dz[tok] += d_surr;

      double kl = 0.0;
      if (need_ref) {
        detail::raw_logits(ref, s.context, s.segment, t, zr);
        detail::log_softmax(zr, lq);
        if (cfg.kl_estimator == KlEstimator::kExact) {
          for (std::size_t v = 0; v < Vs; ++v) kl += p[v] * (lp[v] - lq[v]);
          for (std::size_t v = 0; v < Vs; ++v) dz[v] -= beta * p[v] * (lp[v] - lq[v] - kl);
        } else {
          // k3 = exp(x) - x - 1 with x = log pi_ref(tok) - log pi(tok)
          const double x = lq[tok] - lp[tok];
          kl = std::expm1(x) - x;
          const double d_lp = 1.0 - std::exp(x);
          for (std::size_t v = 0; v < Vs; ++v) dz[v] -= beta * d_lp * -p[v];
          dz[tok] -= beta * d_lp;
        }
      }

      out.value += c * (surr - beta * kl + alpha * H);
      out.report.surrogate_loss += c * surr;
      out.report.mean_kl += c * kl;
      out.report.mean_entropy += c * H;

      for (int v = 0; v < V; ++v) out.grad.bias(v) += c * dz[static_cast<std::size_t>(v)];
      live.feature_map().for_each_active(s.context, s.segment, t, [&](int f) {
        for (int v = 0; v < V; ++v)
          gw[static_cast<std::size_t>(v) * F + f] += c * dz[static_cast<std::size_t>(v)];
      });
    }
  }
  out.report.objective = out.value;
  out.report.clip_fraction = static_cast<double>(clipped) / static_cast<double>(tokens);
  out.report.samples_used = batch.size();
  out.report.grad_norm = std::sqrt(out.grad.squared_norm());
  return out;
}

/// Gradient-ascent optimizers over PolicyParams.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const PolicyParams& shape)
      : kind_(cfg.optimizer),
        lr_(cfg.learning_rate),
        b1_(cfg.adam_beta1),
        b2_(cfg.adam_beta2),
        eps_(cfg.adam_eps),
        m_(shape.vocab_size(), shape.window()),
        v_(shape.vocab_size(), shape.window()) {}

  void ascend(PolicyParams& params, const PolicyParams& grad) {
    ++steps_;
    if (kind_ == OptimizerKind::kSgd) {
      params.axpy(lr_, grad);
      return;
    }
    const double bc1 = 1.0 - std::pow(b1_, steps_);
    const double bc2 = 1.0 - std::pow(b2_, steps_);
    for (std::size_t i = 0; i < params.num_parameters(); ++i) {
      const double g = grad.flat(i);
      double& m = m_.flat(i);
      double& v = v_.flat(i);
      m = b1_ * m + (1.0 - b1_) * g;
      v = b2_ * v + (1.0 - b2_) * g * g;
      params.flat(i) += lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
    }
  }

  int steps() const noexcept { return steps_; }

 private:
  OptimizerKind kind_;
  double lr_, b1_, b2_, eps_;
  PolicyParams m_, v_;
  int steps_ = 0;
};

/// Number of optimizer steps per update: ceil(1 / minibatch_fraction).
inline std::size_t minibatch_count(double fraction) {
  return static_cast<std::size_t>(std::ceil(1.0 / fraction - 1e-9));
}

/// Seeded shuffle, split into ceil(1/minibatch_fraction) mini-batches, one
/// optimizer step each. Ratios are always taken against the old_log_probs
/// recorded at rollout time.
inline std::vector<UpdateReport> run_update(PolicyParams& live, const PolicyParams& ref,
                                            std::span<const TrainSample> batch, const TrainConfig& cfg,
                                            Optimizer& optimizer, Rng& shuffle_rng) {
  std::vector<UpdateReport> reports;
  if (batch.empty()) return reports;

  std::vector<std::size_t> order(batch.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, shuffle_rng);

  const std::size_t parts = std::min(minibatch_count(cfg.minibatch_fraction), batch.size());
  const std::size_t base = batch.size() / parts, extra = batch.size() % parts;
  std::size_t begin = 0;
  std::vector<TrainSample> mb;
  for (std::size_t k = 0; k < parts; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    mb.clear();
    for (std::size_t i = begin; i < begin + len; ++i) mb.push_back(batch[order[i]]);
    begin += len;
    auto res = step_objective(live, ref, mb, cfg);
    optimizer.ascend(live, res->grad);
    reports.push_back(res->report);
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Outer loop.

struct MetricRow {
  int iter = 0;
  std::size_t samples_used = 0;
  std::size_t pruned_groups = 0;
  double surrogate = 0.0;
  double mean_kl = 0.0;
  double mean_entropy = 0.0;
  double clip_fraction = 0.0;
  std::optional<double> pass1;
  std::optional<double> avg_resp_len;
  double wall_ms = 0.0;
};

inline const char* kMetricsHeader =
    "iter,samples_used,pruned_groups,surrogate,mean_kl,mean_entropy,clip_fraction,pass1,avg_resp_len,wall_ms";

inline std::string format_metric_row(const MetricRow& r) {
  char buf[64];
  std::string out = std::to_string(r.iter) + ',' + std::to_string(r.samples_used) + ',' +
                    std::to_string(r.pruned_groups);
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, ",%.17g", x);
    out += buf;
  };
  auto opt = [&](const std::optional<double>& x) {
    if (x)
      num(*x);
    else
      out += ',';
  };
  num(r.surrogate);
  num(r.mean_kl);
  num(r.mean_entropy);
  num(r.clip_fraction);
  opt(r.pass1);
  opt(r.avg_resp_len);
  num(r.wall_ms);
  return out;
}

using TaskGenerator = std::function<TaskInstance(Rng&)>;

/// Uniform difficulty in [difficulty_min, difficulty_max], fresh task seed.
inline TaskGenerator default_task_generator(const TrainConfig& cfg) {
  return [lo = cfg.difficulty_min, hi = cfg.difficulty_max, m = cfg.modulus](Rng& rng) {
    const int d = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
    return generate_task(d, m, rng.next_u64());
  };
}

/// Frozen eval set drawn from the "eval-set" substream of the run seed.
inline std::vector<TaskInstance> make_eval_set(const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "eval-set"));
  auto gen = default_task_generator(cfg);
  std::vector<TaskInstance> tasks;
  for (int i = 0; i < cfg.eval_tasks; ++i) tasks.push_back(gen(rng));
  return tasks;
}

struct TrainHooks {
  std::function<void(const MetricRow&)> on_metrics;
  std::function<void(int iter, const PolicyParams&)> on_checkpoint;
  std::function<void(int iter, std::span<const SampleTree>)> on_trees;
};

struct TrainResult {
  PolicyParams params;
  std::vector<MetricRow> metrics;
};

/// Samples this iteration's trees (or flat rollouts), scored and propagated.
/// Tree j draws from its own substream, so threading does not change results.
inline std::vector<SampleTree> collect_rollouts(const PolicyParams& rollout_policy,
                                                std::span<const TaskInstance> tasks,
                                                const TrainConfig& cfg, std::uint64_t iter_seed) {
  std::vector<SampleTree> trees(tasks.size());
  auto work = [&](std::size_t j) {
    Rng rng(derive_seed(iter_seed, static_cast<std::uint64_t>(j)));
    if (cfg.mode == TrainMode::kTreeRpo)
      trees[j] = expand_tree(tasks[j], rollout_policy, cfg.tree, rng);
    else
      trees[j] = flat_rollouts(tasks[j], rollout_policy, cfg.group_size, cfg.max_tokens,
                               cfg.tree.temperature, rng, cfg.tree.node_cap);
    score_leaves(trees[j]);
    propagate_rewards(trees[j]);
  };
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(cfg.rollout_threads), tasks.size());
  if (threads <= 1) {
    for (std::size_t j = 0; j < tasks.size(); ++j) work(j);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t j = w; j < tasks.size(); j += threads) work(j);
      });
  }
  return trees;
}

/// Rollout -> credit -> update loop. Every random choice comes from a named
/// substream of cfg.seed ("init", "task-gen", "rollout", "shuffle"; the eval
/// draws use cfg.eval.seed).
inline TrainResult train(const TrainConfig& cfg, const TaskGenerator& task_generator,
                         std::span<const TaskInstance> eval_set, const TrainHooks& hooks = {}) {
  validate(cfg);
  using Clock = std::chrono::steady_clock;

  Rng init_rng(derive_seed(cfg.seed, "init"));
  PolicyParams live = PolicyParams::random_init(Vocabulary::kSize, cfg.window, init_rng, cfg.init_scale);
  PolicyParams ref = snapshot(live);
  Optimizer optimizer(cfg, live);

  const std::uint64_t task_stream = derive_seed(cfg.seed, "task-gen");
  const std::uint64_t rollout_stream = derive_seed(cfg.seed, "rollout");
  const std::uint64_t shuffle_stream = derive_seed(cfg.seed, "shuffle");

  TrainResult result{live, {}};
  auto emit = [&](MetricRow row) {
    if (hooks.on_metrics) hooks.on_metrics(row);
    result.metrics.push_back(std::move(row));
  };
  auto run_eval = [&](MetricRow& row) {
    const auto ev = evaluate(live, eval_set, cfg.eval);
    row.pass1 = ev.pass1;
    row.avg_resp_len = ev.avg_response_tokens;
  };

  {
    const auto t0 = Clock::now();
    MetricRow row;
    run_eval(row);
    if (cfg.log_wall_time)
      row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    emit(row);
  }

  for (int it = 1; it <= cfg.iterations; ++it) {
    const auto t0 = Clock::now();
    const PolicyParams rollout_policy = snapshot(live);

    Rng task_rng(derive_seed(task_stream, static_cast<std::uint64_t>(it)));
    std::vector<TaskInstance> tasks;
    tasks.reserve(static_cast<std::size_t>(cfg.tasks_per_batch));
    for (int j = 0; j < cfg.tasks_per_batch; ++j) tasks.push_back(task_generator(task_rng));

    const auto trees = collect_rollouts(rollout_policy, tasks, cfg,
                                        derive_seed(rollout_stream, static_cast<std::uint64_t>(it)));
    if (hooks.on_trees) hooks.on_trees(it, trees);

    BatchStats stats;
    const auto batch = assemble_batch(trees, cfg.effective_tau(), cfg.advantage_mode(), &stats);
    Rng shuffle_rng(derive_seed(shuffle_stream, static_cast<std::uint64_t>(it)));
    const auto reports = run_update(live, ref, batch, cfg, optimizer, shuffle_rng);

    MetricRow row;
    row.iter = it;
    row.samples_used = batch.size();
    row.pruned_groups = stats.groups_pruned;
    if (!reports.empty()) {
      const double n = static_cast<double>(reports.size());
      for (const auto& r : reports) {
        row.surrogate += r.surrogate_loss / n;
        row.mean_kl += r.mean_kl / n;
        row.mean_entropy += r.mean_entropy / n;
        row.clip_fraction += r.clip_fraction / n;
      }
    }
    if (cfg.ref_refresh_every > 0 && it % cfg.ref_refresh_every == 0) ref = snapshot(live);
    if (it % cfg.eval_every == 0 || it == cfg.iterations) run_eval(row);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 &&
        it != cfg.iterations)
      hooks.on_checkpoint(it, live);
    if (cfg.log_wall_time)
      row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    emit(row);
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(cfg.iterations, live);
  result.params = std::move(live);
  return result;
}

}  // namespace treerpo
