// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "treerpo/env.hpp"
#include "treerpo/errors.hpp"
#include "treerpo/policy.hpp"
#include "treerpo/rng.hpp"

namespace treerpo {

struct EvalConfig {
  int samples_per_task = 8;  // K in pass@1(avg@K)
  double temperature = 0.6;
  int max_tokens = 24;
  std::uint64_t seed = 0;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct TaskEval {
  std::uint64_t task_seed = 0;
  double fraction_correct = 0.0;
  double mean_length = 0.0;
};

struct EvalResult {
  double pass1 = 0.0;
  double avg_response_tokens = 0.0;
  std::vector<TaskEval> per_task;
};

/// Anything that can draw the next token of a linear completion.
template <typename S>
concept TokenSampler = requires(const S& s, std::span<const TokenId> ctx, double temp, Rng& rng) {
  { s.sample_next(ctx, temp, rng) } -> std::convertible_to<TokenId>;
};

struct LinearPolicySampler {
  const PolicyParams& params;

  TokenId sample_next(std::span<const TokenId> context, double temperature, Rng& rng) const {
    return sample_token(params, context, temperature, rng);
  }
};

namespace detail {

/// Draw seeds depend on task content, not position, so reordering the eval
/// set reproduces every per-task result.
inline std::uint64_t task_key(const TaskInstance& task) {
  std::uint64_t key = derive_seed(task.seed, static_cast<std::uint64_t>(task.modulus));
  for (TokenId t : task.prompt) key = derive_seed(key, static_cast<std::uint64_t>(t));
  return key;
}

}  // namespace detail

template <TokenSampler Sampler>
EvalResult evaluate(const Sampler& sampler, std::span<const TaskInstance> eval_set,
                    const EvalConfig& cfg) {
  if (eval_set.empty()) throw ContractViolation("evaluate: empty eval set");
  if (cfg.samples_per_task < 1) throw ConfigError("samples_per_task must be >= 1");
  if (cfg.max_tokens < 1) throw ConfigError("max_tokens must be >= 1");

  EvalResult result;
  double reward_sum = 0.0, length_sum = 0.0;
  TokenSeq path;
  for (const auto& task : eval_set) {
    const std::uint64_t key = derive_seed(cfg.seed, detail::task_key(task));
    double task_reward = 0.0, task_len = 0.0;
    for (int k = 0; k < cfg.samples_per_task; ++k) {
      Rng rng(derive_seed(key, static_cast<std::uint64_t>(k)));
      path = task.prompt;
      for (int t = 0; t < cfg.max_tokens; ++t) {
        const TokenId tok = sampler.sample_next(path, cfg.temperature, rng);
        path.push_back(tok);
        if (tok == Vocabulary::kStop) break;
      }
      task_reward += verify(task, path).reward;
      task_len += static_cast<double>(path.size() - task.prompt.size());
    }
    const double K = cfg.samples_per_task;
    result.per_task.push_back({task.seed, task_reward / K, task_len / K});
    reward_sum += task_reward;
    length_sum += task_len;
  }
  const double draws = static_cast<double>(eval_set.size()) * cfg.samples_per_task;
  result.pass1 = reward_sum / draws;
  result.avg_response_tokens = length_sum / draws;
  return result;
}

inline EvalResult evaluate(const PolicyParams& params, std::span<const TaskInstance> eval_set,
                           const EvalConfig& cfg) {
  return evaluate(LinearPolicySampler{params}, eval_set, cfg);
}

}  // namespace treerpo
