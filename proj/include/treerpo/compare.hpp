// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "treerpo/trainer.hpp"

namespace treerpo {

struct CurvePoint {
  int iter = 0;
  double pass1 = 0.0;
  double avg_resp_len = 0.0;
};

struct SeedCurve {
  std::uint64_t seed = 0;
  std::vector<CurvePoint> points;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std; 0 for a single seed
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

struct AggregatePoint {
  int iter = 0;
  MeanStd pass1;
  MeanStd avg_resp_len;
};

struct ArmResult {
  std::string name;
  std::vector<SeedCurve> curves;
  std::vector<AggregatePoint> aggregate;  // over seeds, per eval iteration
  MeanStd final_pass1;
  MeanStd final_len;
};

struct Comparison {
  std::vector<ArmResult> arms;
  std::vector<std::uint64_t> seeds;

  const ArmResult& a() const { return arms.at(0); }
  const ArmResult& b() const { return arms.at(1); }

  /// Directional flags for the first two arms (reported, not asserted).
  bool a_pass1_at_least_b() const { return a().final_pass1.mean >= b().final_pass1.mean; }
  bool a_length_at_most_b() const { return a().final_len.mean <= b().final_len.mean; }
};

struct ArmSpec {
  std::string name;
  TrainConfig config;
};

inline std::string arm_name(const TrainConfig& cfg) {
  return cfg.mode == TrainMode::kTreeRpo ? "treerpo" : "grpo";
}

namespace detail {

inline void aggregate_arm(ArmResult& arm) {
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> by_iter;
  std::vector<double> fp, fl;
  for (const auto& c : arm.curves) {
    for (const auto& p : c.points) {
      by_iter[p.iter].first.push_back(p.pass1);
      by_iter[p.iter].second.push_back(p.avg_resp_len);
    }
    if (!c.points.empty()) {
      fp.push_back(c.points.back().pass1);
      fl.push_back(c.points.back().avg_resp_len);
    }
  }
  arm.aggregate.clear();
  for (const auto& [iter, v] : by_iter) arm.aggregate.push_back({iter, mean_std(v.first), mean_std(v.second)});
  arm.final_pass1 = mean_std(fp);
  arm.final_len = mean_std(fl);
}

inline SeedCurve run_arm_seed(TrainConfig cfg, std::uint64_t seed, int eval_every,
                              std::span<const TaskInstance> eval_set) {
  cfg.seed = seed;
  cfg.eval_every = eval_every;
  const auto res = train(cfg, default_task_generator(cfg), eval_set);
  SeedCurve curve{seed, {}};
  for (const auto& row : res.metrics)
    if (row.pass1) curve.points.push_back({row.iter, *row.pass1, *row.avg_resp_len});
  return curve;
}

}  // namespace detail

/// Trains every arm on every seed against one frozen eval set per seed
/// (drawn from the first arm's task settings) and aggregates the curves.
inline Comparison compare_arms(std::span<const ArmSpec> arms, std::span<const std::uint64_t> seeds,
                               int eval_every) {
  if (arms.empty()) throw ConfigError("arms: at least one arm required");
  if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
  if (eval_every < 1) throw ConfigError("eval_every: must be >= 1");
  Comparison cmp;
  cmp.seeds.assign(seeds.begin(), seeds.end());
  for (const auto& spec : arms) cmp.arms.push_back(ArmResult{spec.name, {}, {}, {}, {}});
  for (std::uint64_t seed : seeds) {
    TrainConfig eval_cfg = arms.front().config;
    eval_cfg.seed = seed;
    const auto eval_set = make_eval_set(eval_cfg);
    for (std::size_t k = 0; k < arms.size(); ++k)
      cmp.arms[k].curves.push_back(detail::run_arm_seed(arms[k].config, seed, eval_every, eval_set));
  }
  for (auto& arm : cmp.arms) detail::aggregate_arm(arm);
  return cmp;
}

/// Two-arm comparison (e.g. TreeRPO vs GRPO). Arm names default to the mode.
inline Comparison compare_runs(const TrainConfig& cfg_a, const TrainConfig& cfg_b,
                               std::span<const std::uint64_t> seeds, int eval_every,
                               std::string name_a = {}, std::string name_b = {}) {
  if (name_a.empty()) name_a = arm_name(cfg_a);
  if (name_b.empty()) name_b = arm_name(cfg_b);
  if (name_a == name_b) {
    name_a += "_a";
    name_b += "_b";
  }
  const ArmSpec arms[] = {{std::move(name_a), cfg_a}, {std::move(name_b), cfg_b}};
  return compare_arms(arms, seeds, eval_every);
}

// ---------------------------------------------------------------------------
// Report writers.

/// Wide CSV: iter, pass1/len per seed, then the aggregate columns.
inline void write_arm_csv(std::ostream& os, const ArmResult& arm) {
  char buf[64];
  os << "iter";
  for (const auto& c : arm.curves) os << ",pass1_s" << c.seed << ",avg_resp_len_s" << c.seed;
  os << ",pass1_mean,pass1_std,avg_resp_len_mean,avg_resp_len_std\n";
  for (std::size_t k = 0; k < arm.aggregate.size(); ++k) {
    const auto& agg = arm.aggregate[k];
    os << agg.iter;
    for (const auto& c : arm.curves) {
      const auto it = std::find_if(c.points.begin(), c.points.end(),
                                   [&](const CurvePoint& p) { return p.iter == agg.iter; });
      if (it == c.points.end()) {
        os << ",,";
        continue;
      }
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g", it->pass1, it->avg_resp_len);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g", agg.pass1.mean, agg.pass1.std);
    os << buf;
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", agg.avg_resp_len.mean, agg.avg_resp_len.std);
    os << buf;
  }
}

inline std::string format_summary(const Comparison& cmp) {
  char buf[160];
  std::string out;
  out += "seeds:";
  for (auto s : cmp.seeds) out += " " + std::to_string(s);
  out += "\n";
  std::snprintf(buf, sizeof buf, "%-12s %-22s %-22s\n", "arm", "final pass1 (mean±std)",
                "final length (mean±std)");
  out += buf;
  for (const auto& arm : cmp.arms) {
    std::snprintf(buf, sizeof buf, "%-12s %.4f ± %.4f        %.3f ± %.3f\n", arm.name.c_str(),
                  arm.final_pass1.mean, arm.final_pass1.std, arm.final_len.mean, arm.final_len.std);
    out += buf;
  }
  if (cmp.arms.size() >= 2) {
    const auto& a = cmp.a().name;
    const auto& b = cmp.b().name;
    out += a + " >= " + b + " on final pass1: " + (cmp.a_pass1_at_least_b() ? "yes" : "no") + "\n";
    out += a + " <= " + b + " on final length: " + (cmp.a_length_at_most_b() ? "yes" : "no") + "\n";
  }
  return out;
}

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
};

/// Minimal SVG line chart.
inline void write_svg_plot(std::ostream& os, const std::string& title, const std::string& y_label,
                           std::span<const PlotSeries> series) {
  constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        x0 = x1 = s.x[i];
        y0 = y1 = s.y[i];
        first = false;
      }
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  y0 = std::min(y0, 0.0);
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static constexpr const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"};

  char buf[256];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n"
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n",
                L, H - B, W - R, H - B, L, T, L, H - B);
  os << buf;
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">%g</text>\n"
                  "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.3g</text>\n",
                  px(xv), H - B + 18, std::round(xv), L - 6, py(yv) + 4, yv);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">iteration</text>\n",
                (L + W - R) / 2, H - 12);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"16\" y=\"%g\" transform=\"rotate(-90 16 %g)\" text-anchor=\"middle\">",
                (T + H - B) / 2, (T + H - B) / 2);
  os << buf << y_label << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = colors[si % 4];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", px(s.x[i]), py(s.y[i]));
      os << buf;
    }
    os << "\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" stroke-width=\"2\"/>"
                  "<text x=\"%g\" y=\"%g\">",
                  W - R + 10, T + 10 + 18.0 * si, W - R + 30, T + 10 + 18.0 * si, color, W - R + 36,
                  T + 14 + 18.0 * si);
    os << buf << s.label << "</text>\n";
  }
  os << "</svg>\n";
}

/// Mean curve of every arm for one metric.
inline std::vector<PlotSeries> comparison_series(const Comparison& cmp, bool length) {
  std::vector<PlotSeries> out;
  for (const auto& arm : cmp.arms) {
    PlotSeries s{arm.name, {}, {}};
    for (const auto& p : arm.aggregate) {
      s.x.push_back(p.iter);
      s.y.push_back(length ? p.avg_resp_len.mean : p.pass1.mean);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace treerpo
