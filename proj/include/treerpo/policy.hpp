// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "treerpo/env.hpp"
#include "treerpo/errors.hpp"
#include "treerpo/rng.hpp"

namespace treerpo {

/// Concatenated one-hot encoding of the last `window` tokens, PAD-filled
/// before the start of the sequence. Slot j (0 = oldest) of the window owns
/// feature indices [j*V, (j+1)*V).
struct FeatureMap {
  int window = 4;
  int vocab_size = Vocabulary::kSize;

  int feature_dim() const noexcept { return window * vocab_size; }

  /// Calls f(feature_index) for every active feature when predicting the
  /// token at position t of `segment`, given everything before it is
  /// context ++ segment[0, t).
  template <typename F>
  void for_each_active(std::span<const TokenId> context, std::span<const TokenId> segment,
                       std::size_t t, F&& f) const {
    const auto n = static_cast<std::ptrdiff_t>(context.size() + t);
    const auto ctx = static_cast<std::ptrdiff_t>(context.size());
    for (int j = 0; j < window; ++j) {
      const std::ptrdiff_t pos = n - window + j;
      TokenId tok = Vocabulary::kPad;
      if (pos >= 0) tok = pos < ctx ? context[static_cast<std::size_t>(pos)]
                                    : segment[static_cast<std::size_t>(pos - ctx)];
      f(j * vocab_size + tok);
    }
  }
};

/// Weights [vocab_size x feature_dim] row-major plus a per-token bias. Also
/// used as the gradient structure (same shape).
class PolicyParams {
 public:
  PolicyParams() : PolicyParams(Vocabulary::kSize, 4) {}
  PolicyParams(int vocab_size, int window) : map_{window, vocab_size} {
    if (window < 1) throw ConfigError("window must be >= 1");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    weights_.assign(static_cast<std::size_t>(vocab_size) * map_.feature_dim(), 0.0);
    bias_.assign(static_cast<std::size_t>(vocab_size), 0.0);
  }

  /// Weights ~ U(-scale, scale), bias 0.
  static PolicyParams random_init(int vocab_size, int window, Rng& rng, double scale = 0.01) {
    PolicyParams p(vocab_size, window);
    for (auto& w : p.weights_) w = rng.uniform(-scale, scale);
    return p;
  }

  int vocab_size() const noexcept { return map_.vocab_size; }
  int window() const noexcept { return map_.window; }
  int feature_dim() const noexcept { return map_.feature_dim(); }
  const FeatureMap& feature_map() const noexcept { return map_; }

  double& weight(int token, int feature) {
    return weights_[static_cast<std::size_t>(token) * map_.feature_dim() + feature];
  }
  double weight(int token, int feature) const {
    return weights_[static_cast<std::size_t>(token) * map_.feature_dim() + feature];
  }
  double& bias(int token) { return bias_[static_cast<std::size_t>(token)]; }
  double bias(int token) const { return bias_[static_cast<std::size_t>(token)]; }

  std::span<double> weights() noexcept { return weights_; }
  std::span<const double> weights() const noexcept { return weights_; }
  std::span<double> biases() noexcept { return bias_; }
  std::span<const double> biases() const noexcept { return bias_; }

  std::size_t num_parameters() const noexcept { return weights_.size() + bias_.size(); }

  /// Flat view index: weights first, then bias.
  double& flat(std::size_t i) { return i < weights_.size() ? weights_[i] : bias_[i - weights_.size()]; }
  double flat(std::size_t i) const {
    return i < weights_.size() ? weights_[i] : bias_[i - weights_.size()];
  }

  bool same_shape(const PolicyParams& o) const noexcept {
    return vocab_size() == o.vocab_size() && window() == o.window();
  }

  bool all_finite() const {
    auto fin = [](double x) { return std::isfinite(x); };
    return std::all_of(weights_.begin(), weights_.end(), fin) &&
           std::all_of(bias_.begin(), bias_.end(), fin);
  }

  void set_zero() {
    std::fill(weights_.begin(), weights_.end(), 0.0);
    std::fill(bias_.begin(), bias_.end(), 0.0);
  }

  /// this += alpha * other
  void axpy(double alpha, const PolicyParams& other) {
    for (std::size_t i = 0; i < weights_.size(); ++i) weights_[i] += alpha * other.weights_[i];
    for (std::size_t i = 0; i < bias_.size(); ++i) bias_[i] += alpha * other.bias_[i];
  }

  double squared_norm() const {
    return std::inner_product(weights_.begin(), weights_.end(), weights_.begin(), 0.0) +
           std::inner_product(bias_.begin(), bias_.end(), bias_.begin(), 0.0);
  }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

 private:
  FeatureMap map_;
  std::vector<double> weights_;
  std::vector<double> bias_;
};

/// Deep copy used for the frozen rollout policy and the reference policy.
inline PolicyParams snapshot(const PolicyParams& params) { return params; }

struct TokenDistribution {
  std::vector<double> logits;
  std::vector<double> log_probs;

  std::vector<double> probs() const {
    std::vector<double> p(log_probs.size());
    std::transform(log_probs.begin(), log_probs.end(), p.begin(), [](double l) { return std::exp(l); });
    return p;
  }
};

namespace detail {

inline double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

/// Raw (temperature-1) logits into `out`.
inline void raw_logits(const PolicyParams& params, std::span<const TokenId> context,
                       std::span<const TokenId> segment, std::size_t t, std::span<double> out) {
  const int V = params.vocab_size();
  const int F = params.feature_dim();
  const auto w = params.weights();
  for (int v = 0; v < V; ++v) out[static_cast<std::size_t>(v)] = params.bias(v);
  params.feature_map().for_each_active(context, segment, t, [&](int f) {
    for (int v = 0; v < V; ++v)
      out[static_cast<std::size_t>(v)] += w[static_cast<std::size_t>(v) * F + f];
  });
}

inline void log_softmax(std::span<const double> logits, std::span<double> out) {
  const double lse = log_sum_exp(logits);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

inline TokenDistribution distribution_at(const PolicyParams& params, std::span<const TokenId> context,
                                         std::span<const TokenId> segment, std::size_t t,
                                         double temperature) {
  TokenDistribution d;
  const auto V = static_cast<std::size_t>(params.vocab_size());
  d.logits.resize(V);
  d.log_probs.resize(V);
  raw_logits(params, context, segment, t, d.logits);
  if (temperature != 1.0)
    for (auto& z : d.logits) z /= temperature;
  log_softmax(d.logits, d.log_probs);
  return d;
}

/// Inverse-CDF draw from log-probabilities.
inline TokenId sample_from_log_probs(std::span<const double> log_probs, Rng& rng) {
  const double u = rng.uniform();
  double cdf = 0.0;
  TokenId last_positive = 0;
  for (std::size_t v = 0; v < log_probs.size(); ++v) {
    const double p = std::exp(log_probs[v]);
    if (p > 0.0) last_positive = static_cast<TokenId>(v);
    cdf += p;
    if (u < cdf) return static_cast<TokenId>(v);
  }
  return last_positive;  // u landed in the rounding gap above the final cdf
}

inline void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ContractViolation("temperature must be a positive finite number");
}

}  // namespace detail

/// Categorical distribution over the next token given `context`.
inline TokenDistribution distribution(const PolicyParams& params, std::span<const TokenId> context,
                                      double temperature = 1.0) {
  detail::check_temperature(temperature);
  return detail::distribution_at(params, context, {}, 0, temperature);
}

inline TokenId sample_token(const PolicyParams& params, std::span<const TokenId> context,
                            double temperature, Rng& rng) {
  const auto d = distribution(params, context, temperature);
  return detail::sample_from_log_probs(d.log_probs, rng);
}

/// log pi(segment[t] | context ++ segment[0, t)) at temperature 1, for each t.
inline std::vector<double> sequence_logprob(const PolicyParams& params,
                                            std::span<const TokenId> context,
                                            std::span<const TokenId> segment) {
  if (segment.empty()) throw ContractViolation("sequence_logprob: empty segment");
  const auto V = static_cast<std::size_t>(params.vocab_size());
  std::vector<double> logits(V), lp(V), out;
  out.reserve(segment.size());
  for (std::size_t t = 0; t < segment.size(); ++t) {
    detail::raw_logits(params, context, segment, t, logits);
    detail::log_softmax(logits, lp);
    out.push_back(lp[static_cast<std::size_t>(segment[t])]);
  }
  return out;
}

struct LogprobGrad {
  PolicyParams grad;
  std::vector<double> log_probs;
};

/// Adds  d/dtheta [ sum_t token_weights[t] * log pi(segment[t] | ...) ]  into
/// `grad` and returns the per-token log-probs. For the linear softmax the
/// per-token term is (onehot(token) - probs) (x) features.
inline std::vector<double> accumulate_logprob_grad(const PolicyParams& params,
                                                   std::span<const TokenId> context,
                                                   std::span<const TokenId> segment,
                                                   std::span<const double> token_weights,
                                                   PolicyParams& grad) {
  if (segment.empty()) throw ContractViolation("logprob_grad: empty segment");
  if (token_weights.size() != segment.size())
    throw ContractViolation("logprob_grad: one weight per segment token required");
  if (!grad.same_shape(params)) throw ContractViolation("logprob_grad: gradient shape mismatch");

  const int V = params.vocab_size();
  const int F = params.feature_dim();
  std::vector<double> logits(static_cast<std::size_t>(V)), lp(static_cast<std::size_t>(V));
  std::vector<double> dz(static_cast<std::size_t>(V));
  std::vector<double> out;
  out.reserve(segment.size());
  auto gw = grad.weights();
  for (std::size_t t = 0; t < segment.size(); ++t) {
    detail::raw_logits(params, context, segment, t, logits);
    detail::log_softmax(logits, lp);
    const auto tok = static_cast<std::size_t>(segment[t]);
    out.push_back(lp[tok]);
    const double w = token_weights[t];
    if (w == 0.0) continue;
    for (std::size_t v = 0; v < dz.size(); ++v) dz[v] = -w * std::exp(lp[v]);
    dz[tok] += w;
    for (int v = 0; v < V; ++v) grad.bias(v) += dz[static_cast<std::size_t>(v)];
    params.feature_map().for_each_active(context, segment, t, [&](int f) {
      for (int v = 0; v < V; ++v)
        gw[static_cast<std::size_t>(v) * F + f] += dz[static_cast<std::size_t>(v)];
    });
  }
  return out;
}

/// Gradient of the weighted log-likelihood; unit weights when none are given.
inline LogprobGrad logprob_grad(const PolicyParams& params, std::span<const TokenId> context,
                                std::span<const TokenId> segment,
                                std::span<const double> token_weights = {}) {
  LogprobGrad r{PolicyParams(params.vocab_size(), params.window()), {}};
  std::vector<double> ones;
  if (token_weights.empty()) {
    ones.assign(segment.size(), 1.0);
    token_weights = ones;
  }
  r.log_probs = accumulate_logprob_grad(params, context, segment, token_weights, r.grad);
  return r;
}

/// Exact KL(pi_a(.|context) || pi_b(.|context)) at temperature 1.
inline double kl_divergence(const PolicyParams& a, const PolicyParams& b,
                            std::span<const TokenId> context) {
  const auto da = distribution(a, context);
  const auto db = distribution(b, context);
  double kl = 0.0;
  for (std::size_t v = 0; v < da.log_probs.size(); ++v)
    kl += std::exp(da.log_probs[v]) * (da.log_probs[v] - db.log_probs[v]);
  return std::max(kl, 0.0);
}

inline double entropy(const PolicyParams& params, std::span<const TokenId> context) {
  const auto d = distribution(params, context);
  double h = 0.0;
  for (double l : d.log_probs) h -= std::exp(l) * l;
  return std::max(h, 0.0);
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned text, hex-float values (bit-exact round trip).
//
//   treerpo-policy 1
//   vocab_size <V>
//   window <k>
//   weights <V*k*V hex floats>
//   bias <V hex floats>

inline constexpr int kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const PolicyParams& params) {
  char buf[64];
  auto put = [&](double x) {
    std::snprintf(buf, sizeof buf, " %a", x);
    os << buf;
  };
  os << "treerpo-policy " << kCheckpointVersion << '\n';
  os << "vocab_size " << params.vocab_size() << '\n';
  os << "window " << params.window() << '\n';
  os << "weights";
  for (double w : params.weights()) put(w);
  os << "\nbias";
  for (double b : params.biases()) put(b);
  os << '\n';
}

inline PolicyParams read_checkpoint(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  auto next = [&](const char* key) {
    if (!std::getline(is, line)) throw ParseError(line_no + 1, std::string("missing '") + key + "'");
    ++line_no;
    std::istringstream ls(line);
    std::string k;
    ls >> k;
    if (k != key) throw ParseError(line_no, std::string("expected '") + key + "'");
    std::string rest;
    std::getline(ls, rest);
    return rest;
  };
  auto to_int = [&](const std::string& s) {
    try {
      return std::stoi(s);
    } catch (const std::exception&) {
      throw ParseError(line_no, "expected an integer");
    }
  };
  if (to_int(next("treerpo-policy")) != kCheckpointVersion)
    throw ParseError(line_no, "unsupported checkpoint version");
  const int V = to_int(next("vocab_size"));
  const int k = to_int(next("window"));
  if (V < 2 || V > 4096 || k < 1 || k > 256) throw ParseError(line_no, "implausible shape");
  PolicyParams p(V, k);
  auto fill = [&](const std::string& rest, std::span<double> dst) {
    std::istringstream ls(rest);
    std::string tok;
    std::size_t i = 0;
    while (ls >> tok) {
      if (i >= dst.size()) throw ParseError(line_no, "too many values");
      char* end = nullptr;
      const double x = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0' || !std::isfinite(x))
        throw ParseError(line_no, "bad value '" + tok + "'");
      dst[i++] = x;
    }
    if (i != dst.size()) throw ParseError(line_no, "too few values");
  };
  fill(next("weights"), p.weights());
  fill(next("bias"), p.biases());
  return p;
}

}  // namespace treerpo
