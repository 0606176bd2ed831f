// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "treerpo/errors.hpp"
#include "treerpo/rng.hpp"

namespace treerpo {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Fixed token alphabet: digits, operators, structural tokens and PAD.
/// Ids are dense in [0, size()).
class Vocabulary {
 public:
  static constexpr TokenId kPlus = 10;
  static constexpr TokenId kMinus = 11;
  static constexpr TokenId kTimes = 12;
  static constexpr TokenId kEquals = 13;
  static constexpr TokenId kAnswer = 14;
  static constexpr TokenId kStop = 15;
  static constexpr TokenId kPad = 16;
  static constexpr int kSize = 17;

  static constexpr int size() noexcept { return kSize; }
  static constexpr TokenId digit(int d) noexcept { return static_cast<TokenId>(d); }
  static constexpr bool is_digit(TokenId t) noexcept { return t >= 0 && t <= 9; }
  static constexpr bool is_operator(TokenId t) noexcept { return t >= kPlus && t <= kTimes; }
  static constexpr bool valid(TokenId t) noexcept { return t >= 0 && t < kSize; }

  static std::string_view name(TokenId t) {
    static constexpr std::array<std::string_view, kSize> names = {
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
        "+", "-", "*", "=", "ANSWER", "STOP", "PAD"};
    if (!valid(t)) throw LookupError("token id out of range: " + std::to_string(t));
    return names[static_cast<std::size_t>(t)];
  }

  static std::string render(std::span<const TokenId> tokens) {
    std::string out;
    for (TokenId t : tokens) {
      if (!out.empty()) out += ' ';
      out += name(t);
    }
    return out;
  }
};

/// A verifiable arithmetic question "a1 op a2 ... op ak =" with its answer.
struct TaskInstance {
  TokenSeq prompt;
  TokenSeq ground_truth;
  int modulus = 10;
  int difficulty = 1;
  std::uint64_t seed = 0;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct VerifierResult {
  double reward = 0.0;
  std::optional<TokenSeq> parsed_answer;
  bool terminated = false;

  friend bool operator==(const VerifierResult&, const VerifierResult&) = default;
};

enum class Op : int { kAdd = 0, kSub = 1, kMul = 2 };

inline constexpr int kMaxDifficulty = 32;

namespace detail {

inline void append_number(TokenSeq& out, int value) {
  const std::string digits = std::to_string(value);
  for (char c : digits) out.push_back(Vocabulary::digit(c - '0'));
}

inline int apply_mod(int lhs, Op op, int rhs, int modulus) {
  long long v = 0;
  switch (op) {
    case Op::kAdd: v = static_cast<long long>(lhs) + rhs; break;
    case Op::kSub: v = static_cast<long long>(lhs) - rhs; break;
    case Op::kMul: v = static_cast<long long>(lhs) * rhs; break;
  }
  v %= modulus;
  if (v < 0) v += modulus;
  return static_cast<int>(v);
}

inline TokenId op_token(Op op) { return Vocabulary::kPlus + static_cast<TokenId>(op); }

inline void check_task_params(int difficulty, int modulus) {
  if (difficulty < 1 || difficulty > kMaxDifficulty)
    throw ConfigError("difficulty must be in [1, " + std::to_string(kMaxDifficulty) +
                      "], got " + std::to_string(difficulty));
  if (modulus < 2 || modulus > 100)
    throw ConfigError("modulus must be in [2, 100], got " + std::to_string(modulus));
}

}  // namespace detail

/// Builds a task from an explicit chain. operands.size() == ops.size() + 1;
/// every operand is reduced into [0, modulus) before encoding.
inline TaskInstance make_task(std::span<const int> operands, std::span<const Op> ops, int modulus,
                              std::uint64_t seed = 0) {
  const int difficulty = static_cast<int>(ops.size());
  detail::check_task_params(difficulty, modulus);
  if (operands.size() != ops.size() + 1)
    throw ConfigError("a chain of k operators needs k+1 operands");

  TaskInstance task;
  task.modulus = modulus;
  task.difficulty = difficulty;
  task.seed = seed;
  int acc = detail::apply_mod(operands[0], Op::kAdd, 0, modulus);
  detail::append_number(task.prompt, acc);
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const int operand = detail::apply_mod(operands[i + 1], Op::kAdd, 0, modulus);
    task.prompt.push_back(detail::op_token(ops[i]));
    detail::append_number(task.prompt, operand);
    acc = detail::apply_mod(acc, ops[i], operand, modulus);
  }
  task.prompt.push_back(Vocabulary::kEquals);
  detail::append_number(task.ground_truth, acc);
  return task;
}

/// Random chain of `difficulty` operators, operands uniform in [0, modulus),
/// operators uniform over {+, -, *}. Deterministic in rng_seed.
inline TaskInstance generate_task(int difficulty, int modulus, std::uint64_t rng_seed) {
  detail::check_task_params(difficulty, modulus);
  Rng rng(derive_seed(rng_seed, "task"));
  std::vector<int> operands;
  std::vector<Op> ops;
  operands.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(modulus))));
  for (int i = 0; i < difficulty; ++i) {
    ops.push_back(static_cast<Op>(rng.below(3)));
    operands.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(modulus))));
  }
  return make_task(operands, ops, modulus, rng_seed);
}

/// Re-evaluates an encoded prompt left to right. Throws ConfigError if the
/// prompt is not a well-formed chain.
inline int evaluate_prompt(std::span<const TokenId> prompt, int modulus) {
  if (prompt.empty() || prompt.back() != Vocabulary::kEquals)
    throw ConfigError("prompt must end with '='");
  std::size_t pos = 0;
  auto read_number = [&]() {
    if (pos >= prompt.size() || !Vocabulary::is_digit(prompt[pos]))
      throw ConfigError("expected a digit at prompt position " + std::to_string(pos));
    int v = 0;
    while (pos < prompt.size() && Vocabulary::is_digit(prompt[pos])) {
      v = v * 10 + prompt[pos];
      if (v > 1'000'000) throw ConfigError("operand too large");
      ++pos;
    }
    return v % modulus;
  };
  int acc = read_number();
  while (pos < prompt.size() && Vocabulary::is_operator(prompt[pos])) {
    const auto op = static_cast<Op>(prompt[pos] - Vocabulary::kPlus);
    ++pos;
    acc = detail::apply_mod(acc, op, read_number(), modulus);
  }
  if (pos != prompt.size() - 1) throw ConfigError("unexpected token in prompt");
  return acc;
}

/// Binary verifier. The answer is the span after the first ANSWER token of the
/// generated part, up to the first STOP (or the end of the path); reward is 1
/// iff STOP was produced and that span equals the ground truth.
inline VerifierResult verify(const TaskInstance& task, std::span<const TokenId> full_path) {
  if (full_path.size() < task.prompt.size() ||
      !std::equal(task.prompt.begin(), task.prompt.end(), full_path.begin()))
    throw ContractViolation("verify: path does not begin with the task prompt");

  const auto generated = full_path.subspan(task.prompt.size());
  const auto stop = std::find(generated.begin(), generated.end(), Vocabulary::kStop);
  VerifierResult result;
  result.terminated = stop != generated.end();

  const auto answer = std::find(generated.begin(), stop, Vocabulary::kAnswer);
  if (answer != stop) result.parsed_answer = TokenSeq(answer + 1, stop);

  if (result.terminated && result.parsed_answer && *result.parsed_answer == task.ground_truth)
    result.reward = 1.0;
  return result;
}

/// Callable wrapper so components can take any verifier with this shape.
struct BinaryVerifier {
  VerifierResult operator()(const TaskInstance& task, std::span<const TokenId> path) const {
    return verify(task, path);
  }
};

// Task-set text format: seed,difficulty,modulus,prompt-ids,ground-truth-ids

inline std::string format_task_line(const TaskInstance& task) {
  std::ostringstream os;
  os << task.seed << ',' << task.difficulty << ',' << task.modulus << ',';
  for (std::size_t i = 0; i < task.prompt.size(); ++i) os << (i ? " " : "") << task.prompt[i];
  os << ',';
  for (std::size_t i = 0; i < task.ground_truth.size(); ++i)
    os << (i ? " " : "") << task.ground_truth[i];
  return os.str();
}

inline void write_task_set(std::ostream& os, std::span<const TaskInstance> tasks) {
  for (const auto& t : tasks) os << format_task_line(t) << '\n';
}

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

inline TokenSeq parse_ids(const std::string& field, std::size_t line) {
  TokenSeq ids;
  std::istringstream is(field);
  long long v = 0;
  while (is >> v) {
    if (v < 0 || v >= Vocabulary::kSize)
      throw ParseError(line, "token id out of range: " + std::to_string(v));
    ids.push_back(static_cast<TokenId>(v));
  }
  if (!is.eof()) throw ParseError(line, "non-numeric token id in '" + field + "'");
  return ids;
}

}  // namespace detail

/// Reads a task set; validates each line by re-evaluating its prompt.
inline std::vector<TaskInstance> read_task_set(std::istream& is) {
  std::vector<TaskInstance> tasks;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split(line, ',');
    if (fields.size() != 5) throw ParseError(line_no, "expected 5 comma-separated fields");
    TaskInstance t;
    try {
      t.seed = std::stoull(fields[0]);
      t.difficulty = std::stoi(fields[1]);
      t.modulus = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw ParseError(line_no, "bad numeric header field");
    }
    t.prompt = detail::parse_ids(fields[3], line_no);
    t.ground_truth = detail::parse_ids(fields[4], line_no);
    try {
      detail::check_task_params(t.difficulty, t.modulus);
      TokenSeq expected;
      detail::append_number(expected, evaluate_prompt(t.prompt, t.modulus));
      if (expected != t.ground_truth) throw ConfigError("ground truth does not match prompt");
    } catch (const ConfigError& e) {
      throw ParseError(line_no, e.what());
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

}  // namespace treerpo
