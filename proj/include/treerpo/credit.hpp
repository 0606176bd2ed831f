// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "treerpo/env.hpp"
#include "treerpo/errors.hpp"
#include "treerpo/tree.hpp"

namespace treerpo {

// Scored trees become training data in five stages: leaf evaluation, bottom-up
// propagation (a node's reward is the mean of its children's, i.e. the
// estimated chance that the step leads to a correct answer), grouping of
// siblings, reward-range pruning and group-relative advantages.

enum class AdvantageVariant {
  kTreeRpo,  // sigma = mu * (1 - mu)
  kGrpoStd,  // sigma = population standard deviation of the group
};

struct AdvantageMode {
  AdvantageVariant variant = AdvantageVariant::kTreeRpo;
  double sigma_floor = 1e-6;
};

/// Sibling set under one parent (kRootId for the depth-1 group).
struct StepGroup {
  NodeId parent_id = kRootId;
  std::vector<NodeId> member_ids;
  std::vector<double> rewards;
  double delta_r = 0.0;  // max - min
  double mu = 0.0;
};

/// One retained step, ready for the clipped-objective update. The advantage
/// is a single scalar applied to every token of the segment.
struct TrainSample {
  TokenSeq context;
  TokenSeq segment;
  std::vector<double> old_log_probs;
  double advantage = 0.0;
  std::size_t tree_id = 0;
  NodeId parent_id = kRootId;
  int child_index = 0;
  double reward = 0.0;
};

/// Ranges closer than this to tau count as equal to it (and are pruned).
/// Propagated rewards are ratios with small denominators, so genuine
/// differences are many orders of magnitude larger.
inline constexpr double kPruneTolerance = 1e-12;

template <typename Verifier = BinaryVerifier>
void score_leaves(SampleTree& tree, const Verifier& verifier = {}) {
  if (tree.root_children.empty()) throw ContractViolation("score_leaves: tree has no nodes");
  for (const auto& n : tree.nodes)
    if (tree.is_unexpanded(n))
      throw ContractViolation("score_leaves: node " + std::to_string(n.id) + " is unexpanded");
  for (auto& n : tree.nodes) {
    if (!tree.is_leaf(n)) continue;
    n.reward = verifier(tree.task, path_tokens(tree, n.id)).reward;
  }
}

/// Internal reward = arithmetic mean of children, bottom-up. Idempotent.
inline void propagate_rewards(SampleTree& tree) {
  if (tree.root_children.empty()) throw ContractViolation("propagate_rewards: tree has no nodes");
  auto mean_of = [&](const std::vector<NodeId>& kids) {
    double s = 0.0;
    for (NodeId c : kids) s += *tree.node(c).reward;
    return s / static_cast<double>(kids.size());
  };
  for (auto it = tree.nodes.rbegin(); it != tree.nodes.rend(); ++it) {
    if (tree.is_leaf(*it)) {
      if (!it->reward)
        throw ContractViolation("propagate_rewards: leaf " + std::to_string(it->id) + " has no reward");
      continue;
    }
    it->reward = mean_of(it->children);
  }
  tree.root_reward = mean_of(tree.root_children);
}

/// One group per internal node, root group first, then by ascending node id.
inline std::vector<StepGroup> build_groups(const SampleTree& tree) {
  std::vector<StepGroup> groups;
  auto make = [&](NodeId parent, const std::vector<NodeId>& kids) {
    StepGroup g;
    g.parent_id = parent;
    g.member_ids = kids;
    for (NodeId c : kids) {
      const auto& r = tree.node(c).reward;
      if (!r) throw ContractViolation("build_groups: rewards not propagated");
      g.rewards.push_back(*r);
    }
    const auto [lo, hi] = std::minmax_element(g.rewards.begin(), g.rewards.end());
    g.delta_r = *hi - *lo;
    double s = 0.0;
    for (double r : g.rewards) s += r;
    g.mu = s / static_cast<double>(g.rewards.size());
    groups.push_back(std::move(g));
  };
  if (!tree.root_children.empty()) make(kRootId, tree.root_children);
  for (const auto& n : tree.nodes)
    if (!n.children.empty()) make(n.id, n.children);
  return groups;
}

/// Strict: a group is kept iff its reward range exceeds tau.
inline bool is_retained(const StepGroup& g, double tau) { return g.delta_r > tau + kPruneTolerance; }

inline std::vector<StepGroup> prune_groups(std::vector<StepGroup> groups, double tau) {
  if (!(tau >= 0.0)) throw ContractViolation("prune_groups: tau must be >= 0");
  std::erase_if(groups, [tau](const StepGroup& g) { return !is_retained(g, tau); });
  return groups;
}

inline std::vector<double> compute_advantages(const StepGroup& group, const AdvantageMode& mode) {
  const auto n = group.rewards.size();
  if (n < 2) throw ContractViolation("compute_advantages: group needs at least 2 members");
  if (!(mode.sigma_floor > 0.0)) throw ContractViolation("compute_advantages: sigma_floor must be > 0");
  double mu = 0.0;
  for (double r : group.rewards) mu += r;
  mu /= static_cast<double>(n);

  double sigma = 0.0;
  if (mode.variant == AdvantageVariant::kTreeRpo) {
    sigma = mu * (1.0 - mu);
  } else {
    double ss = 0.0;
    for (double r : group.rewards) ss += (r - mu) * (r - mu);
    sigma = std::sqrt(ss / static_cast<double>(n));
  }
  sigma = std::max(sigma, mode.sigma_floor);

  std::vector<double> adv(n);
  for (std::size_t i = 0; i < n; ++i) adv[i] = (group.rewards[i] - mu) / sigma;
  return adv;
}

struct BatchStats {
  std::size_t groups_total = 0;
  std::size_t groups_pruned = 0;
};

/// Flattens retained groups into samples ordered by (tree, parent, child).
/// tau == nullopt keeps every group (the unpruned GRPO baseline).
inline std::vector<TrainSample> assemble_batch(std::span<const SampleTree> trees,
                                               std::optional<double> tau, const AdvantageMode& mode,
                                               BatchStats* stats = nullptr) {
  std::vector<TrainSample> batch;
  BatchStats local;
  for (std::size_t tree_id = 0; tree_id < trees.size(); ++tree_id) {
    const auto& tree = trees[tree_id];
    auto groups = build_groups(tree);
    local.groups_total += groups.size();
    if (tau) {
      const auto before = groups.size();
      groups = prune_groups(std::move(groups), *tau);
      local.groups_pruned += before - groups.size();
    }
    for (const auto& g : groups) {
      const auto adv = compute_advantages(g, mode);
      const TokenSeq context = path_tokens(tree, g.parent_id);
      for (std::size_t i = 0; i < g.member_ids.size(); ++i) {
        const auto& member = tree.node(g.member_ids[i]);
        TrainSample s;
        s.context = context;
        s.segment = member.segment;
        s.old_log_probs = member.old_log_probs;
        s.advantage = adv[i];
        s.tree_id = tree_id;
        s.parent_id = g.parent_id;
        s.child_index = static_cast<int>(i);
        s.reward = g.rewards[i];
        batch.push_back(std::move(s));
      }
    }
  }
  if (stats) *stats = local;
  return batch;
}

/// Audit dump: tree_id,parent_id,child_index,advantage,reward
inline void write_batch_dump(std::ostream& os, std::span<const TrainSample> batch) {
  char buf[96];
  for (const auto& s : batch) {
    std::snprintf(buf, sizeof buf, "%zu,%d,%d,%.17g,%.17g\n", s.tree_id, s.parent_id, s.child_index,
                  s.advantage, s.reward);
    os << buf;
  }
}

}  // namespace treerpo
