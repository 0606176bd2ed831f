// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

// treerpo: train / eval / compare / inspect front end for the tree-rollout lab.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "treerpo/treerpo.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace treerpo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRefused = 3;

struct Refused : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << content;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Creates out_dir; refuses a non-empty existing directory unless forced.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw Refused(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force)
      throw Refused(dir.string() + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(dir);
}

ConfigFile load_config(const std::string& path, bool use_env) {
  ConfigFile file = parse_config(read_file(path));
  if (use_env) apply_env_overrides(file.config);
  return file;
}

ConfigFile load_manifest_config(const std::string& manifest_path) {
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  if (m.value("format", "") != "treerpo-manifest") throw ConfigError("manifest: not a treerpo manifest");
  return parse_config(m.at("config").get<std::string>());
}

struct TrainFlags {
  std::string config, out, manifest, mode;
  std::optional<std::uint64_t> seed;
  std::optional<int> eval_every;
  bool force = false;
};

void apply_flags(TrainConfig& cfg, const std::string& mode, std::optional<std::uint64_t> seed,
                 std::optional<int> eval_every) {
  if (!mode.empty()) set_config_value(cfg, "mode", mode);
  if (seed) cfg.seed = *seed;
  if (eval_every) cfg.eval_every = *eval_every;
}

int cmd_train(const TrainFlags& f) {
  ConfigFile file = f.manifest.empty() ? load_config(f.config, true) : load_manifest_config(f.manifest);
  apply_flags(file.config, f.mode, f.seed, f.eval_every);
  const TrainConfig& cfg = file.config;
  validate(cfg);

  const fs::path out = f.out;
  prepare_out_dir(out, f.force);
  fs::create_directories(out / "checkpoints");

  const std::string started = utc_now();
  const auto eval_set = make_eval_set(cfg);
  {
    std::ofstream os(out / "eval_tasks.txt");
    write_task_set(os, eval_set);
  }

  std::ofstream metrics(out / "metrics.csv", std::ios::binary);
  metrics << kMetricsHeader << '\n';
  std::vector<std::string> artifacts = {"eval_tasks.txt", "metrics.csv"};
  std::string last_tree_dump;

  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricRow& row) {
    metrics << format_metric_row(row) << '\n';
    metrics.flush();
    if (row.pass1)
      std::fprintf(stderr, "iter %5d  samples %5zu  pass1 %.4f  len %.2f\n", row.iter, row.samples_used,
                   *row.pass1, *row.avg_resp_len);
  };
  hooks.on_checkpoint = [&](int iter, const PolicyParams& params) {
    const std::string name = "checkpoints/policy_" + std::to_string(iter) + ".ckpt";
    std::ofstream os(out / name, std::ios::binary);
    write_checkpoint(os, params);
    artifacts.push_back(name);
  };
  hooks.on_trees = [&](int, std::span<const SampleTree> trees) {
    if (trees.empty()) return;
    std::ostringstream os;
    write_tree_dump(os, trees.front());
    last_tree_dump = os.str();
  };

  const auto result = train(cfg, default_task_generator(cfg), eval_set, hooks);
  metrics.close();
  {
    std::ofstream os(out / "policy_final.ckpt", std::ios::binary);
    write_checkpoint(os, result.params);
    artifacts.push_back("policy_final.ckpt");
  }
  if (!last_tree_dump.empty()) {
    write_file(out / "sample_tree.txt", last_tree_dump);
    artifacts.push_back("sample_tree.txt");
  }
  artifacts.push_back("config.cfg");
  write_file(out / "config.cfg", serialize_config(file));

  json manifest = {
      {"format", "treerpo-manifest"},
      {"version", 1},
      {"code_version", TREERPO_VERSION},
      {"command", "train"},
      {"seed", cfg.seed},
      {"config", serialize_config(file)},
      {"started_at", started},
      {"finished_at", utc_now()},
      {"artifacts", artifacts},
  };
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  return kExitOk;
}

struct EvalFlags {
  std::string config, checkpoint, tasks, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> samples;
};

int cmd_eval(const EvalFlags& f) {
  TrainConfig cfg = f.config.empty() ? TrainConfig{} : load_config(f.config, true).config;
  if (f.seed) cfg.seed = *f.seed;
  if (f.samples) cfg.eval.samples_per_task = *f.samples;
  validate(cfg);

  PolicyParams params;
  if (!f.checkpoint.empty()) {
    std::ifstream in(f.checkpoint);
    if (!in) throw ConfigError("cannot open " + f.checkpoint);
    params = read_checkpoint(in);
  } else {
    Rng init(derive_seed(cfg.seed, "init"));
    params = PolicyParams::random_init(Vocabulary::kSize, cfg.window, init, cfg.init_scale);
  }
  std::vector<TaskInstance> tasks;
  if (!f.tasks.empty()) {
    std::ifstream in(f.tasks);
    if (!in) throw ConfigError("cannot open " + f.tasks);
    tasks = read_task_set(in);
  } else {
    tasks = make_eval_set(cfg);
  }
  const auto res = evaluate(params, tasks, cfg.eval);
  std::printf("tasks %zu  K %d  pass1 %.6f  avg_resp_len %.4f\n", tasks.size(), cfg.eval.samples_per_task,
              res.pass1, res.avg_response_tokens);
  if (!f.out.empty()) {
    std::ostringstream os;
    os << "task_seed,fraction_correct,mean_length\n";
    char buf[96];
    for (const auto& t : res.per_task) {
      std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g\n", static_cast<unsigned long long>(t.task_seed),
                    t.fraction_correct, t.mean_length);
      os << buf;
    }
    write_file(f.out, os.str());
  }
  return kExitOk;
}

struct CompareFlags {
  std::string config_a, config_b, out, seeds = "1,2,3,4,5";
  int eval_every = 10;
  bool force = false;
};

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  for (const auto& part : detail::split(s, ',')) {
    const auto t = detail::trim(part);
    if (t.empty()) continue;
    const auto dash = t.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto lo = std::stoull(t.substr(0, dash)), hi = std::stoull(t.substr(dash + 1));
        if (hi < lo || hi - lo > 10'000) throw ConfigError("seeds: bad range " + t);
        for (auto v = lo; v <= hi; ++v) seeds.push_back(v);
      } else {
        seeds.push_back(std::stoull(t));
      }
    } catch (const std::logic_error&) {
      throw ConfigError("seeds: cannot parse '" + t + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
  return seeds;
}

int cmd_compare(const CompareFlags& f) {
  const ConfigFile a = load_config(f.config_a, true);
  const ConfigFile b = load_config(f.config_b, true);
  validate(a.config);
  validate(b.config);
  const auto seeds = parse_seeds(f.seeds);
  const fs::path out = f.out;
  prepare_out_dir(out, f.force);

  const std::string started = utc_now();
  const auto cmp = compare_runs(a.config, b.config, seeds, f.eval_every);
  std::vector<std::string> artifacts;
  for (const auto& arm : cmp.arms) {
    std::ostringstream os;
    write_arm_csv(os, arm);
    write_file(out / ("arm_" + arm.name + ".csv"), os.str());
    artifacts.push_back("arm_" + arm.name + ".csv");
  }
  const std::string summary = format_summary(cmp);
  write_file(out / "summary.txt", summary);
  std::cout << summary;
  artifacts.push_back("summary.txt");
  for (const bool length : {false, true}) {
    const auto series = comparison_series(cmp, length);
    std::ostringstream os;
    write_svg_plot(os, length ? "Mean response length" : "pass@1 (avg@K)",
                   length ? "tokens" : "pass@1", series);
    const std::string name = length ? "length.svg" : "pass1.svg";
    write_file(out / name, os.str());
    artifacts.push_back(name);
  }
  json manifest = {
      {"format", "treerpo-manifest"},
      {"version", 1},
      {"code_version", TREERPO_VERSION},
      {"command", "compare"},
      {"seeds", seeds},
      {"eval_every", f.eval_every},
      {"config_a", serialize_config(a)},
      {"config_b", serialize_config(b)},
      {"started_at", started},
      {"finished_at", utc_now()},
      {"artifacts", artifacts},
  };
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  return kExitOk;
}

/// Prints a dumped tree with per-node rewards and per-group range/pruning.
int cmd_inspect(const std::string& path, double tau) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  SampleTree tree;
  try {
    tree = read_tree_dump(in);
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s: %s\n", path.c_str(), e.what());
    return kExitConfig;
  }
  const bool scored = std::all_of(tree.nodes.begin(), tree.nodes.end(), [&](const TreeNode& n) {
    return !tree.is_leaf(n) || n.reward.has_value();
  });
  if (scored) propagate_rewards(tree);

  std::map<NodeId, const StepGroup*> by_parent;
  std::vector<StepGroup> groups;
  if (scored) groups = build_groups(tree);
  for (const auto& g : groups) by_parent[g.parent_id] = &g;

  auto group_note = [&](NodeId parent) {
    const auto it = by_parent.find(parent);
    if (it == by_parent.end()) return std::string();
    char buf[96];
    std::snprintf(buf, sizeof buf, "  [group dR=%.4g %s]", it->second->delta_r,
                  is_retained(*it->second, tau) ? "retained" : "pruned");
    return std::string(buf);
  };
  auto reward_str = [](const std::optional<double>& r) {
    if (!r) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", *r);
    return std::string(buf);
  };

  std::printf("root reward=%s%s\n", reward_str(tree.root_reward).c_str(), group_note(kRootId).c_str());
  std::function<void(NodeId, int)> print = [&](NodeId id, int indent) {
    const auto& n = tree.node(id);
    std::printf("%*s#%d depth=%d reward=%s%s  \"%s\"%s\n", indent * 2, "", n.id, n.depth,
                reward_str(n.reward).c_str(), n.terminated ? " STOP" : "",
                Vocabulary::render(n.segment).c_str(), group_note(n.id).c_str());
    for (NodeId c : n.children) print(c, indent + 1);
  };
  for (NodeId c : tree.root_children) print(c, 1);

  const auto retained = std::count_if(groups.begin(), groups.end(),
                                      [&](const StepGroup& g) { return is_retained(g, tau); });
  std::printf("nodes=%zu groups=%zu retained=%td pruned=%td tau=%g\n", tree.nodes.size(), groups.size(),
              retained, static_cast<std::ptrdiff_t>(groups.size()) - retained, tau);
  return kExitOk;
}

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return kExitConfig;
  } catch (const Refused& e) {
    std::fprintf(stderr, "refusing: %s\n", e.what());
    return kExitRefused;
  } catch (const ResourceError& e) {
    std::fprintf(stderr, "resource error: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TreeRPO lab: tree-sampled rollouts with step-level group-relative advantages"};
  app.set_version_flag("--version", TREERPO_VERSION);
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train a policy and write metrics, checkpoints and a manifest");
  train_cmd->add_option("--config", tf.config, "Config file (key = value)");
  train_cmd->add_option("--from-manifest", tf.manifest, "Re-run the exact config recorded in a manifest.json");
  train_cmd->add_option("--out", tf.out, "Output directory")->required();
  train_cmd->add_option("--seed", tf.seed, "Root seed override");
  train_cmd->add_option("--mode", tf.mode, "treerpo or grpo")->check(CLI::IsMember({"treerpo", "grpo"}));
  train_cmd->add_option("--eval-every", tf.eval_every, "Evaluation interval in iterations");
  train_cmd->add_flag("--force", tf.force, "Allow writing into a non-empty output directory");

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint with pass@1(avg@K)");
  eval_cmd->add_option("--config", ef.config, "Config file (eval settings, task settings)");
  eval_cmd->add_option("--checkpoint", ef.checkpoint, "Policy checkpoint (default: initial policy)");
  eval_cmd->add_option("--tasks", ef.tasks, "Task-set file (default: generated eval set)");
  eval_cmd->add_option("--seed", ef.seed, "Root seed override");
  eval_cmd->add_option("--samples", ef.samples, "K, draws per task");
  eval_cmd->add_option("--out", ef.out, "Write per-task results CSV here");

  CompareFlags cf;
  auto* cmp_cmd = app.add_subcommand("compare", "Run two configs over shared seeds and compare curves");
  cmp_cmd->add_option("--config-a", cf.config_a, "First arm config")->required();
  cmp_cmd->add_option("--config-b", cf.config_b, "Second arm config")->required();
  cmp_cmd->add_option("--seeds", cf.seeds, "Seeds, e.g. 1,2,3 or 1-5");
  cmp_cmd->add_option("--out", cf.out, "Output directory")->required();
  cmp_cmd->add_option("--eval-every", cf.eval_every, "Evaluation interval in iterations");
  cmp_cmd->add_flag("--force", cf.force, "Allow writing into a non-empty output directory");

  std::string dump_path;
  double tau = 0.1;
  auto* inspect_cmd = app.add_subcommand("inspect", "Pretty-print a tree dump with group ranges");
  inspect_cmd->add_option("dump", dump_path, "Tree dump file")->required();
  inspect_cmd->add_option("--tau", tau, "Pruning threshold used for retained/pruned labels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  if (*train_cmd) {
    if (tf.config.empty() == tf.manifest.empty()) {
      std::fprintf(stderr, "config error: exactly one of --config or --from-manifest is required\n");
      return kExitConfig;
    }
    return guarded([&] { return cmd_train(tf); });
  }
  if (*eval_cmd) return guarded([&] { return cmd_eval(ef); });
  if (*cmp_cmd) return guarded([&] { return cmd_compare(cf); });
  if (*inspect_cmd) return guarded([&] { return cmd_inspect(dump_path, tau); });
  return kExitConfig;
}
