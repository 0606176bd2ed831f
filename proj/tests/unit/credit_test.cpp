// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "treerpo/credit.hpp"

namespace treerpo {
namespace {

using V = Vocabulary;

/// Hand-built tree: nodes given as (parent, segment), in id order.
SampleTree build(const TaskInstance& task, const std::vector<std::pair<NodeId, TokenSeq>>& spec, int max_depth) {
  SampleTree t;
  t.task = task;
  t.config.max_depth = max_depth;
  for (const auto& [parent, seg] : spec) {
    TreeNode n;
    n.id = static_cast<NodeId>(t.nodes.size());
    n.parent = parent;
    n.depth = parent == kRootId ? 1 : t.node(parent).depth + 1;
    n.segment = seg;
    n.old_log_probs.assign(seg.size(), -1.0);
    n.terminated = seg.back() == V::kStop;
    (parent == kRootId ? t.root_children : t.node(parent).children).push_back(n.id);
    t.nodes.push_back(n);
  }
  return t;
}

TaskInstance task34() {
  const int operands[] = {3, 4};
  const Op ops[] = {Op::kAdd};
  return make_task(operands, ops, 10, 0);
}

/// Full binary depth-2 tree with the given leaf rewards [[a,b],[c,d]].
SampleTree binary_depth2(double a, double b, double c, double d) {
  auto t = build(task34(), {{kRootId, {1}}, {kRootId, {2}}, {0, {3}}, {0, {4}}, {1, {5}}, {1, {6}}}, 2);
  t.nodes[2].reward = a;
  t.nodes[3].reward = b;
  t.nodes[4].reward = c;
  t.nodes[5].reward = d;
  return t;
}

StepGroup group_of(std::vector<double> r) {
  StepGroup g;
  for (std::size_t i = 0; i < r.size(); ++i) g.member_ids.push_back(static_cast<NodeId>(i));
  g.rewards = r;
  const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
  g.delta_r = *hi - *lo;
  g.mu = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
  return g;
}

void expect_vec_near(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
  }
}

// ---------------------------------------------------------------------------

TEST(ScoreLeaves, PlantedAnswerEverywhere) {
  auto t = build(task34(), {{kRootId, {3}}, {kRootId, {V::kAnswer, 7, V::kStop}}, {0, {V::kAnswer, 7, V::kStop}},
                            {0, {V::kAnswer, 7, V::kStop}}},
                 2);
  score_leaves(t);
  for (const auto& n : t.nodes)
    if (t.is_leaf(n)) {
      EXPECT_EQ(*n.reward, 1.0);
    }
  EXPECT_FALSE(t.nodes[0].reward.has_value());
}

TEST(ScoreLeaves, NoAnswerTokenAnywhere) {
  auto t = build(task34(), {{kRootId, {3, V::kStop}}, {kRootId, {4}}, {1, {5}}, {1, {7, V::kStop}}}, 2);
  score_leaves(t);
  for (const auto& n : t.nodes)
    if (t.is_leaf(n)) {
      EXPECT_EQ(*n.reward, 0.0);
    }
}

TEST(ScoreLeaves, MatchesPerLeafVerify) {
  Rng prng(1);
  auto p = PolicyParams::random_init(V::kSize, 4, prng, 1.0);
  p.bias(V::kAnswer) = 1.5;
  p.bias(V::kStop) = 1.0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    Rng rng(s);
    const auto task = generate_task(1, 3, s);  // small modulus: some leaves correct
    auto t = expand_tree(task, p, {3, 3, 3, 1.0, 10000}, rng);
    score_leaves(t);
    for (const auto& n : t.nodes)
      if (t.is_leaf(n)) {
        ASSERT_EQ(*n.reward, verify(task, path_tokens(t, n.id)).reward);
      }
  }
}

TEST(ScoreLeaves, UnexpandedTreeRejected) {
  auto t = build(task34(), {{kRootId, {3}}, {kRootId, {4}}}, 3);
  EXPECT_THROW(score_leaves(t), ContractViolation);
  SampleTree empty;
  EXPECT_THROW(score_leaves(empty), ContractViolation);
}

TEST(ScoreLeaves, CustomVerifier) {
  auto t = build(task34(), {{kRootId, {3}}, {kRootId, {4, 4}}}, 1);
  score_leaves(t, [](const TaskInstance& task, std::span<const TokenId> path) {
    return VerifierResult{static_cast<double>(path.size() - task.prompt.size()) / 2.0, std::nullopt, false};
  });
  EXPECT_EQ(*t.nodes[0].reward, 0.5);
  EXPECT_EQ(*t.nodes[1].reward, 1.0);
}

TEST(Propagate, TwoLeafMean) {
  auto t = build(task34(), {{kRootId, {1}}, {0, {2}}, {0, {3}}}, 2);
  t.nodes[1].reward = 1.0;
  t.nodes[2].reward = 0.0;
  propagate_rewards(t);
  EXPECT_EQ(*t.nodes[0].reward, 0.5);
}

TEST(Propagate, HandRecursionDepthTwo) {
  auto t = binary_depth2(1, 1, 0, 1);
  propagate_rewards(t);
  EXPECT_EQ(*t.nodes[0].reward, 1.0);
  EXPECT_EQ(*t.nodes[1].reward, 0.5);
  EXPECT_EQ(*t.root_reward, 0.75);
}

TEST(Propagate, MissingLeafRewardRejected) {
  auto t = binary_depth2(1, 1, 0, 1);
  t.nodes[3].reward.reset();
  EXPECT_THROW(propagate_rewards(t), ContractViolation);
}

TEST(Propagate, Idempotent) {
  auto t = binary_depth2(1, 0, 0, 1);
  propagate_rewards(t);
  const auto first = t.nodes;
  propagate_rewards(t);
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_EQ(first[i].reward, t.nodes[i].reward);
  }
}

TEST(PropagateProperty, FullTreeRootIsLeafMean) {
  Rng rng(2);
  for (int inst = 0; inst < 200; ++inst) {
    const int N = 1 + static_cast<int>(rng.below(4)), D = 1 + static_cast<int>(rng.below(4));
    Rng trng(rng.next_u64());
    auto t = expand_tree(task34(), [] {
      PolicyParams p;
      p.bias(V::kStop) = -1e3;
      return p;
    }(), {N, D, 1, 1.0, 10000}, trng);
    double sum = 0.0;
    int leaves = 0;
    for (auto& n : t.nodes)
      if (t.is_leaf(n)) {
        n.reward = rng.uniform() < 0.5 ? 1.0 : 0.0;
        sum += *n.reward;
        ++leaves;
      }
    propagate_rewards(t);
    ASSERT_NEAR(*t.root_reward, sum / leaves, 1e-12);
  }
}

TEST(PropagateProperty, RaggedTreesMatchPathWeightOracle) {
  Rng rng(3);
  for (int inst = 0; inst < 1000; ++inst) {
    const int N = 2 + static_cast<int>(rng.below(3)), D = 1 + static_cast<int>(rng.below(4));
    auto t = oracle::random_tree(rng, N, D, 0.3, 0.5);
    propagate_rewards(t);
    ASSERT_NEAR(*t.root_reward, oracle::leaf_path_value(t, kRootId), 1e-12);
    for (const auto& n : t.nodes) {
      ASSERT_NEAR(*n.reward, oracle::leaf_path_value(t, n.id), 1e-12);
    }
  }
}

TEST(PropagateProperty, Linearity) {
  Rng rng(4);
  for (int inst = 0; inst < 200; ++inst) {
    auto t = oracle::random_tree(rng, 3, 3, 0.3, 0.5);
    auto scaled = t;
    const double c = rng.uniform();
    for (auto& n : scaled.nodes)
      if (scaled.is_leaf(n)) n.reward = c * *n.reward;
    propagate_rewards(t);
    propagate_rewards(scaled);
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
      ASSERT_NEAR(*scaled.nodes[i].reward, c * *t.nodes[i].reward, 1e-12);
    }
  }
}

TEST(BuildGroups, FullBinaryDepthTwo) {
  auto t = binary_depth2(1, 1, 0, 1);
  propagate_rewards(t);
  const auto g = build_groups(t);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].parent_id, kRootId);
  EXPECT_EQ(g[0].rewards, (std::vector<double>{1.0, 0.5}));
  EXPECT_EQ(g[0].delta_r, 0.5);
  EXPECT_EQ(g[1].parent_id, 0);
  EXPECT_EQ(g[1].delta_r, 0.0);
  EXPECT_EQ(g[2].parent_id, 1);
  EXPECT_EQ(g[2].delta_r, 1.0);
  EXPECT_EQ(g[2].mu, 0.5);
}

TEST(BuildGroups, FlatRolloutIsOneGroup) {
  Rng rng(5);
  auto t = flat_rollouts(task34(), PolicyParams{}, 6, 5, 1.0, rng);
  score_leaves(t);
  propagate_rewards(t);
  const auto g = build_groups(t);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0].member_ids.size(), 6u);
}

TEST(BuildGroupsProperty, CountEqualsInternalNodesPlusRoot) {
  Rng rng(6);
  for (int inst = 0; inst < 300; ++inst) {
    auto t = oracle::random_tree(rng, 4, 4, 0.3, 0.5);
    propagate_rewards(t);
    const auto groups = build_groups(t);
    const auto internal = std::count_if(t.nodes.begin(), t.nodes.end(), [&](const TreeNode& n) { return !t.is_leaf(n); });
    ASSERT_EQ(groups.size(), static_cast<std::size_t>(internal) + 1);
    // Every node is a member of exactly one group.
    std::vector<int> seen(t.nodes.size(), 0);
    for (const auto& g : groups)
      for (NodeId m : g.member_ids) ++seen[static_cast<std::size_t>(m)];
    for (int s : seen) {
      ASSERT_EQ(s, 1);
    }
  }
}

TEST(Prune, Examples) {
  EXPECT_FALSE(is_retained(group_of({0.5, 0.5, 0.5}), 0.1));
  EXPECT_TRUE(is_retained(group_of({0, 1, 1}), 0.1));
  EXPECT_FALSE(is_retained(group_of({0.45, 0.55}), 0.1));
  EXPECT_THROW(prune_groups({}, -0.1), ContractViolation);
}

TEST(Prune, KeepsOrder) {
  const std::vector<StepGroup> gs = {group_of({0, 1}), group_of({0, 0}), group_of({0.2, 0.9}), group_of({1, 1})};
  const auto kept = prune_groups(gs, 0.1);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].rewards, gs[0].rewards);
  EXPECT_EQ(kept[1].rewards, gs[2].rewards);
  EXPECT_EQ(prune_groups(gs, 0.0).size(), 2u);
}

// Rewards and tau are exact rationals with small denominators, so the
// integer cross-multiplication below is the ground truth for "range > tau".
TEST(PruneProperty, StrictInequalityOnRationals) {
  Rng rng(7);
  int boundary = 0;
  for (int inst = 0; inst < 20000; ++inst) {
    const long den = static_cast<long>(1 + rng.below(27));  // propagated rewards are k / N^d
    const auto n = 2 + rng.below(4);
    std::vector<long> num;
    for (std::uint64_t i = 0; i < n; ++i) num.push_back(static_cast<long>(rng.below(static_cast<std::uint64_t>(den) + 1)));
    std::vector<double> r;
    for (long k : num) r.push_back(static_cast<double>(k) / static_cast<double>(den));
    const long range = *std::max_element(num.begin(), num.end()) - *std::min_element(num.begin(), num.end());
    // tau either exactly at the range or a random small rational.
    long tnum = 0, tden = 1;
    if (rng.uniform() < 0.3) {
      tnum = range;
      tden = den;
      ++boundary;
    } else {
      tden = static_cast<long>(1 + rng.below(20));
      tnum = static_cast<long>(rng.below(static_cast<std::uint64_t>(tden) + 1));
    }
    const double tau = static_cast<double>(tnum) / static_cast<double>(tden);
    const bool want = range * tden > tnum * den;
    const auto g = group_of(r);
    ASSERT_EQ(is_retained(g, tau), want) << "range " << range << "/" << den << " tau " << tnum << "/" << tden;
    ASSERT_EQ(prune_groups({g}, tau).size(), want ? 1u : 0u);
  }
  EXPECT_GT(boundary, 1000);
}

TEST(Advantages, GrpoStdBiasExample) {
  const AdvantageMode m{AdvantageVariant::kGrpoStd, 1e-6};
  expect_vec_near(compute_advantages(group_of({0, 0, 1, 1}), m), {-1, -1, 1, 1}, 1e-9);
  expect_vec_near(compute_advantages(group_of({0.49, 0.49, 0.51, 0.51}), m), {-1, -1, 1, 1}, 1e-9);
}

TEST(Advantages, TreeRpoScaling) {
  const AdvantageMode m{AdvantageVariant::kTreeRpo, 1e-6};
  expect_vec_near(compute_advantages(group_of({0, 0, 1, 1}), m), {-2, -2, 2, 2}, 1e-9);
  // mu = 0.5, sigma = 0.25: (0.51 - 0.5) / 0.25 = 0.04.
  expect_vec_near(compute_advantages(group_of({0.49, 0.49, 0.51, 0.51}), m), {-0.04, -0.04, 0.04, 0.04}, 1e-9);
}

TEST(Advantages, DegenerateGroupsUseFloor) {
  for (auto variant : {AdvantageVariant::kTreeRpo, AdvantageVariant::kGrpoStd}) {
    for (double r : {0.0, 1.0, 0.3}) {
      const auto a = compute_advantages(group_of({r, r, r}), {variant, 1e-6});
      for (double x : a) {
        EXPECT_TRUE(std::isfinite(x));
        EXPECT_EQ(x, 0.0);
      }
    }
  }
  EXPECT_THROW(compute_advantages(group_of({1.0}), {}), ContractViolation);
  EXPECT_THROW(compute_advantages(group_of({0.0, 1.0}), {AdvantageVariant::kTreeRpo, 0.0}), ContractViolation);
}

TEST(AdvantagesProperty, MatchOracleAndZeroMean) {
  Rng rng(8);
  for (int inst = 0; inst < 5000; ++inst) {
    std::vector<double> r;
    const auto n = 2 + rng.below(7);
    for (std::uint64_t i = 0; i < n; ++i) r.push_back(rng.uniform() < 0.3 ? std::round(rng.uniform()) : rng.uniform());
    const auto g = group_of(r);
    const auto tr = compute_advantages(g, {AdvantageVariant::kTreeRpo, 1e-6});
    const auto gs = compute_advantages(g, {AdvantageVariant::kGrpoStd, 1e-6});
    const auto otr = oracle::treerpo_advantages(r), ogs = oracle::grpo_advantages(r);
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_NEAR(tr[i], otr[i], 1e-9 * std::max(1.0, std::abs(otr[i])));
      ASSERT_NEAR(gs[i], ogs[i], 1e-9 * std::max(1.0, std::abs(ogs[i])));
    }
    const double mu = g.mu;
    if (mu * (1 - mu) > 1e-6) {
      ASSERT_NEAR(std::accumulate(tr.begin(), tr.end(), 0.0), 0.0, 1e-9);
    }
    if (g.delta_r > 1e-5) {
      ASSERT_NEAR(std::accumulate(gs.begin(), gs.end(), 0.0), 0.0, 1e-9);
    }
  }
}

// On binary rewards the two modes differ only by the positive factor
// std / (mu (1 - mu)) with std = sqrt(mu (1 - mu)).
TEST(AdvantagesProperty, BinaryRewardsModeAgreement) {
  Rng rng(9);
  for (int inst = 0; inst < 5000; ++inst) {
    std::vector<double> r;
    const auto n = 2 + rng.below(9);
    for (std::uint64_t i = 0; i < n; ++i) r.push_back(static_cast<double>(rng.below(2)));
    const auto g = group_of(r);
    if (g.delta_r == 0.0) continue;
    const auto tr = compute_advantages(g, {AdvantageVariant::kTreeRpo, 1e-6});
    const auto gs = compute_advantages(g, {AdvantageVariant::kGrpoStd, 1e-6});
    const double v = g.mu * (1 - g.mu);
    const double scale = std::sqrt(v) / v;
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_NEAR(tr[i], gs[i] * scale, 1e-9 * std::abs(tr[i]));
      ASSERT_EQ(tr[i] > 0, gs[i] > 0);
    }
    ASSERT_EQ(std::max_element(tr.begin(), tr.end()) - tr.begin(), std::max_element(gs.begin(), gs.end()) - gs.begin());
  }
}

TEST(AssembleBatch, AllCorrectTreeIsEmpty) {
  auto t = binary_depth2(1, 1, 1, 1);
  propagate_rewards(t);
  BatchStats stats;
  const std::vector<SampleTree> trees{t};
  EXPECT_TRUE(assemble_batch(trees, 0.1, {}, &stats).empty());
  EXPECT_EQ(stats.groups_total, 3u);
  EXPECT_EQ(stats.groups_pruned, 3u);
}

TEST(AssembleBatch, SingleGroupHandComputation) {
  auto t = build(task34(), {{kRootId, {V::kAnswer, 8, V::kStop}}, {kRootId, {V::kAnswer, 7, V::kStop}}}, 1);
  score_leaves(t);
  propagate_rewards(t);
  const std::vector<SampleTree> trees{t};
  const auto tr = assemble_batch(trees, 0.1, {AdvantageVariant::kTreeRpo, 1e-6});
  ASSERT_EQ(tr.size(), 2u);
  EXPECT_NEAR(tr[0].advantage, -2.0, 1e-12);
  EXPECT_NEAR(tr[1].advantage, 2.0, 1e-12);
  EXPECT_EQ(tr[0].context, task34().prompt);
  EXPECT_EQ(tr[1].segment, (TokenSeq{V::kAnswer, 7, V::kStop}));
  const auto gs = assemble_batch(trees, 0.1, {AdvantageVariant::kGrpoStd, 1e-6});
  EXPECT_NEAR(gs[0].advantage, -1.0, 1e-12);
  EXPECT_NEAR(gs[1].advantage, 1.0, 1e-12);
}

TEST(AssembleBatchProperty, OrderingContextsAndCounts) {
  Rng rng(10);
  for (int inst = 0; inst < 200; ++inst) {
    std::vector<SampleTree> trees;
    for (int k = 0; k < 3; ++k) {
      trees.push_back(oracle::random_tree(rng, 3, 3, 0.3, 0.5));
      propagate_rewards(trees.back());
    }
    const double tau = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.0, 0.6);
    BatchStats stats;
    const auto batch = assemble_batch(trees, tau, {}, &stats);
    std::size_t expected = 0, groups = 0;
    for (const auto& t : trees)
      for (const auto& g : build_groups(t)) {
        ++groups;
        if (g.delta_r > tau) expected += g.member_ids.size();
      }
    ASSERT_EQ(batch.size(), expected);
    ASSERT_EQ(stats.groups_total, groups);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& s = batch[i];
      const auto& tree = trees[s.tree_id];
      const NodeId member = tree.children_of(s.parent_id)[static_cast<std::size_t>(s.child_index)];
      ASSERT_EQ(s.context, path_tokens(tree, s.parent_id));
      ASSERT_EQ(s.segment, tree.node(member).segment);
      ASSERT_EQ(s.reward, *tree.node(member).reward);
      if (i > 0) {
        const auto& p = batch[i - 1];
        // Root group (-1) comes first within a tree, then ascending parent id.
        const auto key = [](const TrainSample& x) { return std::tuple(x.tree_id, x.parent_id, x.child_index); };
        ASSERT_LT(key(p), key(s));
      }
    }
    // No retained group has range <= tau.
    for (const auto& t : trees)
      for (const auto& g : build_groups(t))
        if (g.delta_r <= tau)
          for (const auto& s : batch) {
            ASSERT_FALSE(&trees[s.tree_id] == &t && s.parent_id == g.parent_id);
          }
  }
}

TEST(AssembleBatch, UnprunedKeepsZeroVarianceGroups) {
  auto t = binary_depth2(1, 1, 1, 1);
  propagate_rewards(t);
  const std::vector<SampleTree> trees{t};
  const auto batch = assemble_batch(trees, std::nullopt, {AdvantageVariant::kGrpoStd, 1e-6});
  ASSERT_EQ(batch.size(), 6u);
  for (const auto& s : batch) {
    EXPECT_EQ(s.advantage, 0.0);
  }
}

// Flat rollouts grouped at the root reproduce standard GRPO advantages
// computed directly from the trajectory rewards.
TEST(AssembleBatchProperty, GrpoDegeneracyOnFlatRollouts) {
  Rng prng(11);
  const auto p = oracle::answer_policy(prng);
  int mixed = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s);
    auto t = flat_rollouts(generate_task(1, 2, s), p, 8, 12, 1.0, rng);
    score_leaves(t);
    propagate_rewards(t);
    std::vector<double> r;
    for (NodeId c : t.root_children) r.push_back(verify(t.task, path_tokens(t, c)).reward);
    const std::vector<SampleTree> trees{t};
    const auto batch = assemble_batch(trees, std::nullopt, {AdvantageVariant::kGrpoStd, 1e-6});
    const auto want = oracle::grpo_advantages(r);
    if (build_groups(t)[0].delta_r > 0) ++mixed;
    ASSERT_EQ(batch.size(), 8u);
    for (std::size_t i = 0; i < 8; ++i) {
      ASSERT_NEAR(batch[i].advantage, want[i], 1e-12);
    }
  }
}

TEST(BatchDump, Format) {
  auto t = build(task34(), {{kRootId, {V::kAnswer, 8, V::kStop}}, {kRootId, {V::kAnswer, 7, V::kStop}}}, 1);
  score_leaves(t);
  propagate_rewards(t);
  const std::vector<SampleTree> trees{t};
  const auto batch = assemble_batch(trees, 0.1, {});
  std::ostringstream os;
  write_batch_dump(os, batch);
  EXPECT_EQ(os.str(), "0,-1,0,-2,0\n0,-1,1,2,1\n");
}

}  // namespace
}  // namespace treerpo
