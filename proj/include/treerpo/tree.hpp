// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "treerpo/env.hpp"
#include "treerpo/errors.hpp"
#include "treerpo/policy.hpp"
#include "treerpo/rng.hpp"

namespace treerpo {

using NodeId = std::int32_t;

/// Parent id of depth-1 nodes. The root itself is the prompt, not a node.
inline constexpr NodeId kRootId = -1;

struct TreeConfig {
  int branching = 3;      // N
  int max_depth = 3;      // D; depth 1 is the first sampled step
  int step_tokens = 8;    // L_step
  double temperature = 1.0;
  std::size_t node_cap = 10'000;

  friend bool operator==(const TreeConfig&, const TreeConfig&) = default;
};

/// N + N^2 + ... + N^D, saturating at SIZE_MAX.
inline std::size_t node_budget(int branching, int max_depth) {
  std::size_t total = 0, level = 1;
  for (int d = 0; d < max_depth; ++d) {
    if (level > std::numeric_limits<std::size_t>::max() / static_cast<std::size_t>(branching))
      return std::numeric_limits<std::size_t>::max();
    level *= static_cast<std::size_t>(branching);
    if (total > std::numeric_limits<std::size_t>::max() - level)
      return std::numeric_limits<std::size_t>::max();
    total += level;
  }
  return total;
}

inline void validate(const TreeConfig& c) {
  if (c.branching < 1) throw ConfigError("branching must be >= 1");
  if (c.max_depth < 1) throw ConfigError("max_depth must be >= 1");
  if (c.step_tokens < 1) throw ConfigError("step_tokens must be >= 1");
  if (!(c.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (node_budget(c.branching, c.max_depth) > c.node_cap)
    throw ResourceError("tree node budget exceeded: N=" + std::to_string(c.branching) +
                        ", D=" + std::to_string(c.max_depth) + " allows up to " +
                        std::to_string(node_budget(c.branching, c.max_depth)) +
                        " nodes, cap is " + std::to_string(c.node_cap));
}

struct TreeNode {
  NodeId id = 0;
  NodeId parent = kRootId;
  int depth = 1;
  TokenSeq segment;
  std::vector<double> old_log_probs;  // temperature-1 log-probs under the rollout policy
  bool terminated = false;            // segment ends with STOP
  std::optional<double> reward;
  std::vector<NodeId> children;
};

/// N-ary rollout tree. Node ids are dense and assigned breadth-first, so a
/// parent's id is always smaller than its children's.
struct SampleTree {
  TaskInstance task;
  TreeConfig config;
  std::vector<TreeNode> nodes;
  std::vector<NodeId> root_children;
  std::optional<double> root_reward;

  const TreeNode& node(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes.size())
      throw LookupError("unknown node id " + std::to_string(id));
    return nodes[static_cast<std::size_t>(id)];
  }
  TreeNode& node(NodeId id) {
    return const_cast<TreeNode&>(std::as_const(*this).node(id));
  }

  const std::vector<NodeId>& children_of(NodeId parent) const {
    return parent == kRootId ? root_children : node(parent).children;
  }

  bool is_leaf(const TreeNode& n) const { return n.children.empty(); }

  /// A childless node that is neither terminated nor at the depth limit.
  bool is_unexpanded(const TreeNode& n) const {
    return n.children.empty() && !n.terminated && n.depth < config.max_depth;
  }
};

/// prompt ++ segments along the root-to-node path.
inline TokenSeq path_tokens(const SampleTree& tree, NodeId id) {
  if (id == kRootId) return tree.task.prompt;
  std::vector<const TreeNode*> chain;
  for (NodeId cur = id; cur != kRootId; cur = tree.node(cur).parent) chain.push_back(&tree.node(cur));
  TokenSeq path = tree.task.prompt;
  for (auto it = chain.rbegin(); it != chain.rend(); ++it)
    path.insert(path.end(), (*it)->segment.begin(), (*it)->segment.end());
  return path;
}

namespace detail {

/// Samples one step of at most step_tokens tokens, halting at STOP.
inline void sample_segment(const PolicyParams& params, std::span<const TokenId> context,
                           const TreeConfig& config, Rng& rng, TreeNode& node) {
  const auto V = static_cast<std::size_t>(params.vocab_size());
  std::vector<double> logits(V), lp1(V), lpT(V), scaled(V);
  for (int t = 0; t < config.step_tokens; ++t) {
    raw_logits(params, context, node.segment, node.segment.size(), logits);
    log_softmax(logits, lp1);
    const double* sample_lp = lp1.data();
    if (config.temperature != 1.0) {
      for (std::size_t v = 0; v < V; ++v) scaled[v] = logits[v] / config.temperature;
      log_softmax(scaled, lpT);
      sample_lp = lpT.data();
    }
    const TokenId tok = sample_from_log_probs(std::span<const double>(sample_lp, V), rng);
    node.segment.push_back(tok);
    node.old_log_probs.push_back(lp1[static_cast<std::size_t>(tok)]);
    if (tok == Vocabulary::kStop) {
      node.terminated = true;
      break;
    }
  }
}

}  // namespace detail

/// Breadth-first N-ary expansion. One draw from `rng` seeds the tree; each
/// node's tokens come from its own substream derived from (parent seed,
/// child index), so the result does not depend on expansion order.
inline SampleTree expand_tree(const TaskInstance& task, const PolicyParams& params,
                              const TreeConfig& config, Rng& rng) {
  validate(config);
  SampleTree tree;
  tree.task = task;
  tree.config = config;
  tree.nodes.reserve(std::min<std::size_t>(node_budget(config.branching, config.max_depth), 4096));

  struct Pending {
    NodeId id;
    std::uint64_t seed;
  };
  std::deque<Pending> frontier{{kRootId, rng.next_u64()}};
  while (!frontier.empty()) {
    const Pending parent = frontier.front();
    frontier.pop_front();
    const int depth = parent.id == kRootId ? 1 : tree.node(parent.id).depth + 1;
    const TokenSeq context = path_tokens(tree, parent.id);
    for (int i = 0; i < config.branching; ++i) {
      TreeNode child;
      child.id = static_cast<NodeId>(tree.nodes.size());
      child.parent = parent.id;
      child.depth = depth;
      const std::uint64_t seed = derive_seed(parent.seed, static_cast<std::uint64_t>(i));
      Rng node_rng(seed);
      detail::sample_segment(params, context, config, node_rng, child);
      if (parent.id == kRootId)
        tree.root_children.push_back(child.id);
      else
        tree.node(parent.id).children.push_back(child.id);
      if (!child.terminated && child.depth < config.max_depth) frontier.push_back({child.id, seed});
      tree.nodes.push_back(std::move(child));
    }
  }
  return tree;
}

/// Vanilla GRPO sampling: G independent full trajectories as one depth-1
/// group (expand_tree with N=G, D=1, L_step=max_tokens).
inline SampleTree flat_rollouts(const TaskInstance& task, const PolicyParams& params, int group_size,
                                int max_tokens, double temperature, Rng& rng,
                                std::size_t node_cap = 10'000) {
  if (group_size < 2) throw ContractViolation("flat_rollouts: group size must be >= 2");
  TreeConfig cfg{group_size, 1, max_tokens, temperature, node_cap};
  return expand_tree(task, params, cfg, rng);
}

// ---------------------------------------------------------------------------
// Debug dump: node_id,parent_id,depth,terminated,reward,segment-token-ids
// (parent_id -1 for depth-1 nodes, empty reward when unscored).

inline void write_tree_dump(std::ostream& os, const SampleTree& tree) {
  char buf[40];
  for (const auto& n : tree.nodes) {
    os << n.id << ',' << n.parent << ',' << n.depth << ',' << (n.terminated ? 1 : 0) << ',';
    if (n.reward) {
      std::snprintf(buf, sizeof buf, "%.17g", *n.reward);
      os << buf;
    }
    os << ',';
    for (std::size_t i = 0; i < n.segment.size(); ++i) os << (i ? " " : "") << n.segment[i];
    os << '\n';
  }
}

/// Rebuilds a tree from a dump. The task is unknown (empty prompt), old
/// log-probs are not recorded (NaN), and the config is inferred: branching =
/// the largest sibling set, max_depth = the deepest node.
inline SampleTree read_tree_dump(std::istream& is) {
  SampleTree tree;
  std::string line;
  std::size_t line_no = 0;
  int max_depth = 0;
  std::size_t max_children = tree.root_children.size();
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 6) throw ParseError(line_no, "expected 6 comma-separated fields");
    TreeNode n;
    try {
      std::size_t used = 0;
      n.id = std::stoi(f[0], &used);
      if (used != f[0].size()) throw std::invalid_argument("id");
      n.parent = std::stoi(f[1], &used);
      if (used != f[1].size()) throw std::invalid_argument("parent");
      n.depth = std::stoi(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("depth");
    } catch (const std::exception&) {
      throw ParseError(line_no, "bad integer field");
    }
    if (f[3] != "0" && f[3] != "1") throw ParseError(line_no, "terminated must be 0 or 1");
    n.terminated = f[3] == "1";
    if (!f[4].empty()) {
      char* end = nullptr;
      const double r = std::strtod(f[4].c_str(), &end);
      if (*end != '\0' || !(r >= 0.0 && r <= 1.0)) throw ParseError(line_no, "reward must be in [0,1]");
      n.reward = r;
    }
    n.segment = detail::parse_ids(f[5], line_no);
    if (n.segment.empty()) throw ParseError(line_no, "empty segment");
    n.old_log_probs.assign(n.segment.size(), std::numeric_limits<double>::quiet_NaN());

    if (n.id != static_cast<NodeId>(tree.nodes.size()))
      throw ParseError(line_no, "node ids must be dense and in order");
    if (n.parent != kRootId && (n.parent < 0 || n.parent >= n.id))
      throw ParseError(line_no, "parent must be -1 or an earlier node");
    const int expected_depth = n.parent == kRootId ? 1 : tree.node(n.parent).depth + 1;
    if (n.depth != expected_depth) throw ParseError(line_no, "depth inconsistent with parent");
    if (n.parent != kRootId && tree.node(n.parent).terminated)
      throw ParseError(line_no, "terminated node cannot have children");
    for (std::size_t i = 0; i < n.segment.size(); ++i)
      if (n.segment[i] == Vocabulary::kStop && i + 1 != n.segment.size())
        throw ParseError(line_no, "STOP must be the last token of a segment");
    if (n.terminated != (n.segment.back() == Vocabulary::kStop))
      throw ParseError(line_no, "terminated flag disagrees with segment");

    auto& siblings = n.parent == kRootId ? tree.root_children : tree.node(n.parent).children;
    siblings.push_back(n.id);
    max_children = std::max(max_children, siblings.size());
    max_depth = std::max(max_depth, n.depth);
    tree.nodes.push_back(std::move(n));
  }
  if (tree.nodes.empty()) throw ParseError(1, "empty tree dump");
  tree.config.branching = static_cast<int>(max_children);
  tree.config.max_depth = max_depth;
  tree.config.step_tokens = 0;
  for (const auto& n : tree.nodes)
    tree.config.step_tokens = std::max(tree.config.step_tokens, static_cast<int>(n.segment.size()));
  tree.config.node_cap = std::max<std::size_t>(tree.nodes.size(), tree.config.node_cap);
  return tree;
}

}  // namespace treerpo
