#pragma once

// Probabilistic decision trees: the agent models shared between a server and
// its legitimate users.
//
// A tree of depth k over n actions stores one distribution per node in
// breadth-first order. The children of node i are i*n + 1 .. i*n + n, one per
// action, so a context of opponent actions (oldest first) selects a node by
// repeated descent. Contexts shorter than k stop at an internal node.

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ami/error.hpp"
#include "ami/rng.hpp"

namespace ami {

/// An action in 1..n.
struct Action {
  int value = 1;

  constexpr Action() = default;
  constexpr explicit Action(int v) : value(v) {}

  constexpr std::size_t index() const { return static_cast<std::size_t>(value - 1); }
  static constexpr Action from_index(std::size_t i) { return Action(static_cast<int>(i) + 1); }

  friend constexpr auto operator<=>(Action, Action) = default;
};

inline bool valid_action(Action a, int n) { return a.value >= 1 && a.value <= n; }

/// Softmax of logits/temperature. Evaluation order is fixed (max subtraction,
/// elementwise exp, left-to-right sum) so every party computes identical bits.
inline std::vector<double> boltzmann(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    fail(ErrorKind::invalid_parameter, "temperature must be positive and finite");
  if (logits.empty()) fail(ErrorKind::invalid_parameter, "logits must be non-empty");
  std::vector<double> out(logits.size());
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) fail(ErrorKind::invalid_parameter, "logit is not finite");
    out[i] = logits[i] / temperature;
    if (out[i] > peak) peak = out[i];
  }
  for (auto& v : out) v = std::exp(v - peak);
  double total = 0.0;
  for (double v : out) total += v;
  for (auto& v : out) v /= total;
  return out;
}

/// (n^(k+1) - 1)/(n - 1), throwing if it does not fit comfortably in memory.
inline std::size_t pdt_node_count(int n_actions, int depth) {
  require(n_actions >= 2, "n_actions must be at least 2");
  require(depth >= 1, "depth must be at least 1");
  std::size_t count = 0;
  std::size_t level = 1;
  constexpr std::size_t cap = std::size_t{1} << 28;
  for (int d = 0; d <= depth; ++d) {
    count += level;
    require(count <= cap, "tree too large");
    if (d < depth) level *= static_cast<std::size_t>(n_actions);
  }
  return count;
}

enum class NodeKind {
  logit,    // node values are logits, distribution = boltzmann(values, temperature)
  literal,  // node values are the distribution itself
};

enum class Role { server, client };

class Pdt {
 public:
  /// `values` holds node_count * n entries, node-major in breadth-first order.
  Pdt(int n_actions, int depth, double temperature, NodeKind kind, std::vector<double> values)
      : n_(n_actions), k_(depth), tau_(temperature), kind_(kind), values_(std::move(values)) {
    const std::size_t nodes = pdt_node_count(n_, k_);
    if (!(tau_ > 0.0) || !std::isfinite(tau_))
      fail(ErrorKind::invalid_parameter, "temperature must be positive and finite");
    if (values_.size() != nodes * static_cast<std::size_t>(n_))
      fail(ErrorKind::invalid_parameter, "node values do not match the tree shape");
    probs_.resize(values_.size());
    const auto stride = static_cast<std::size_t>(n_);
    for (std::size_t node = 0; node < nodes; ++node) {
      std::span<const double> row(values_.data() + node * stride, stride);
      if (kind_ == NodeKind::logit) {
        const auto p = boltzmann(row, tau_);
        std::copy(p.begin(), p.end(), probs_.begin() + static_cast<std::ptrdiff_t>(node * stride));
      } else {
        double total = 0.0;
        for (double v : row) {
          if (!(v >= 0.0 && v <= 1.0))
            fail(ErrorKind::invalid_parameter, "literal probability outside [0,1]");
          total += v;
        }
        if (std::abs(total - 1.0) > 1e-9)
          fail(ErrorKind::invalid_parameter, "literal distribution does not sum to 1");
        std::copy(row.begin(), row.end(), probs_.begin() + static_cast<std::ptrdiff_t>(node * stride));
      }
    }
  }

  int n_actions() const { return n_; }
  int depth() const { return k_; }
  double temperature() const { return tau_; }
  NodeKind kind() const { return kind_; }
  std::size_t node_count() const { return probs_.size() / static_cast<std::size_t>(n_); }

  std::span<const double> node_values(std::size_t node) const {
    return {values_.data() + node * static_cast<std::size_t>(n_), static_cast<std::size_t>(n_)};
  }
  std::span<const double> node_distribution(std::size_t node) const {
    return {probs_.data() + node * static_cast<std::size_t>(n_), static_cast<std::size_t>(n_)};
  }
  const std::vector<double>& values() const { return values_; }

  /// Node reached by descending once per context entry, oldest first.
  std::size_t traverse(std::span<const Action> context) const {
    if (context.size() > static_cast<std::size_t>(k_))
      fail(ErrorKind::invalid_parameter, "context longer than tree depth");
    std::size_t node = 0;
    for (Action a : context) {
      if (!valid_action(a, n_)) fail(ErrorKind::invalid_parameter, "context action out of range");
      node = node * static_cast<std::size_t>(n_) + static_cast<std::size_t>(a.value);
    }
    return node;
  }

  /// The last min(len, k) opponent actions form the context.
  std::span<const Action> window(std::span<const Action> opponent_history) const {
    const std::size_t k = static_cast<std::size_t>(k_);
    return opponent_history.size() > k ? opponent_history.last(k) : opponent_history;
  }

  std::size_t node_for_history(std::span<const Action> opponent_history) const {
    return traverse(window(opponent_history));
  }

  std::span<const double> action_distribution(std::span<const Action> opponent_history) const {
    return node_distribution(node_for_history(opponent_history));
  }

  Action sample_action(std::span<const Action> opponent_history, Rng& rng) const {
    return Action::from_index(sample_index(action_distribution(opponent_history), rng));
  }

  friend bool operator==(const Pdt& a, const Pdt& b) {
    return a.n_ == b.n_ && a.k_ == b.k_ && a.tau_ == b.tau_ && a.kind_ == b.kind_ &&
           a.values_ == b.values_;
  }

 private:
  int n_;
  int k_;
  double tau_;
  NodeKind kind_;
  std::vector<double> values_;
  std::vector<double> probs_;
};

/// Every logit drawn i.i.d. uniform on [0, 1), node by node, action by action.
inline Pdt generate_random_pdt(int n_actions, int depth, double temperature, Rng& rng) {
  const std::size_t nodes = pdt_node_count(n_actions, depth);
  if (!(temperature > 0.0)) fail(ErrorKind::invalid_parameter, "temperature must be positive");
  std::vector<double> logits(nodes * static_cast<std::size_t>(n_actions));
  for (auto& v : logits) v = rng.uniform();
  return Pdt(n_actions, depth, temperature, NodeKind::logit, std::move(logits));
}

/// A recorded transcript as parallel action sequences.
struct TranscriptView {
  std::span<const Action> server;
  std::span<const Action> client;
};

/// Empirical-frequency estimate of one side's tree. The imitated side's action
/// at step t is counted at the node its opponent's actions before t reach.
/// Unvisited nodes fall back to uniform. No smoothing.
inline Pdt fit_mle_pdt(int n_actions, int depth, std::span<const TranscriptView> transcripts,
                       Role imitate) {
  if (transcripts.empty()) fail(ErrorKind::invalid_parameter, "no transcripts to fit");
  const std::size_t nodes = pdt_node_count(n_actions, depth);
  const auto n = static_cast<std::size_t>(n_actions);
  const auto k = static_cast<std::size_t>(depth);
  std::vector<double> counts(nodes * n, 0.0);
  for (const auto& tr : transcripts) {
    const auto own = imitate == Role::client ? tr.client : tr.server;
    const auto other = imitate == Role::client ? tr.server : tr.client;
    require(own.size() == other.size(), "transcript sides differ in length");
    for (std::size_t t = 0; t < own.size(); ++t) {
      const std::size_t begin = t > k ? t - k : 0;
      std::size_t node = 0;
      for (std::size_t i = begin; i < t; ++i) {
        require(valid_action(other[i], n_actions), "transcript action out of range");
        node = node * n + static_cast<std::size_t>(other[i].value);
      }
      require(valid_action(own[t], n_actions), "transcript action out of range");
      counts[node * n + own[t].index()] += 1.0;
    }
  }
  for (std::size_t node = 0; node < nodes; ++node) {
    double total = 0.0;
    for (std::size_t a = 0; a < n; ++a) total += counts[node * n + a];
    for (std::size_t a = 0; a < n; ++a)
      counts[node * n + a] = total > 0.0 ? counts[node * n + a] / total : 1.0 / static_cast<double>(n);
  }
  return Pdt(n_actions, depth, 1.0, NodeKind::literal, std::move(counts));
}

}  // namespace ami
