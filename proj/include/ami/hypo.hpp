#pragma once

// Frequentist authentication test.
//
// Each step's client action is scored against the distribution the shared
// model assigns at that step. The statistic z is the mean step score. Given
// the observed server actions, the step scores under the null are independent
// with per-step moments computable by enumeration, so the null distribution
// of z is sampled by redrawing every client action from its model
// distribution. The p-value is two-sided around the exact null mean.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "ami/engine.hpp"
#include "ami/error.hpp"
#include "ami/pdt.hpp"
#include "ami/rng.hpp"
#include "ami/verdict.hpp"

namespace ami {

inline constexpr double kDefaultAlpha = 0.1;
inline constexpr int kDefaultNullSamples = 1000;

/// Score of every action under q: 0.5 * (q(a) + sum of q(a') with q(a') <= q(a)).
inline std::vector<double> score_table(std::span<const double> q) {
  std::vector<double> out(q.size());
  for (std::size_t a = 0; a < q.size(); ++a) {
    double rank = 0.0;
    for (std::size_t b = 0; b < q.size(); ++b)
      if (q[b] <= q[a]) rank += q[b];
    out[a] = 0.5 * (q[a] + rank);
  }
  return out;
}

inline double step_score(Action observed, std::span<const double> q) {
  if (!valid_action(observed, static_cast<int>(q.size())))
    fail(ErrorKind::invalid_parameter, "observed action out of range");
  return score_table(q)[observed.index()];
}

struct StepMoments {
  double mean = 0.0;
  double variance = 0.0;
};

inline StepMoments score_moments(std::span<const double> q, std::span<const double> scores) {
  StepMoments m;
  for (std::size_t a = 0; a < q.size(); ++a) m.mean += q[a] * scores[a];
  double second = 0.0;
  for (std::size_t a = 0; a < q.size(); ++a) second += q[a] * (scores[a] - m.mean) * (scores[a] - m.mean);
  m.variance = second;
  return m;
}

/// Per-step distributions, scores and moments for a fixed server action
/// sequence. Step t uses the model node reached by the server actions before t.
class NullModel {
 public:
  NullModel(const Pdt& model, std::span<const Action> server_actions)
      : n_(static_cast<std::size_t>(model.n_actions())), steps_(server_actions.size()) {
    require(steps_ >= 1, "null model needs at least one step");
    dists_.reserve(steps_);
    scores_.reserve(steps_ * n_);
    for (std::size_t t = 0; t < steps_; ++t) {
      const auto q = model.action_distribution(server_actions.first(t));
      dists_.push_back(q);
      const auto s = score_table(q);
      scores_.insert(scores_.end(), s.begin(), s.end());
      const auto m = score_moments(q, s);
      sum_mean_ += m.mean;
      sum_var_ += m.variance;
    }
  }

  std::size_t steps() const { return steps_; }
  std::span<const double> distribution(std::size_t t) const { return dists_[t]; }
  std::span<const double> scores(std::size_t t) const { return {scores_.data() + t * n_, n_}; }

  double mean() const { return sum_mean_ / static_cast<double>(steps_); }
  double variance() const {
    const auto s = static_cast<double>(steps_);
    return sum_var_ / (s * s);
  }

  double statistic(std::span<const Action> client_actions) const {
    require(client_actions.size() == steps_, "client actions do not match null model length");
    double total = 0.0;
    for (std::size_t t = 0; t < steps_; ++t) {
      require(valid_action(client_actions[t], static_cast<int>(n_)), "client action out of range");
      total += scores_[t * n_ + client_actions[t].index()];
    }
    return total / static_cast<double>(steps_);
  }

  /// One draw of z with every client action resampled from its step distribution.
  double sample(Rng& rng) const {
    double total = 0.0;
    for (std::size_t t = 0; t < steps_; ++t) total += scores_[t * n_ + sample_index(dists_[t], rng)];
    return total / static_cast<double>(steps_);
  }

 private:
  std::size_t n_;
  std::size_t steps_;
  std::vector<std::span<const double>> dists_;
  std::vector<double> scores_;
  double sum_mean_ = 0.0;
  double sum_var_ = 0.0;
};

inline double test_statistic(const InteractionHistory& history, const Pdt& model) {
  return NullModel(model, history.server_actions()).statistic(history.client_actions());
}

struct NullSummary {
  double mean = 0.0;
  double variance = 0.0;
  std::vector<double> mc_samples;
};

inline NullSummary null_summary(std::span<const Action> server_actions, const Pdt& model, int samples, Rng& rng) {
  require(samples >= 1, "at least one Monte-Carlo sample is required");
  const NullModel null(model, server_actions);
  NullSummary out{null.mean(), null.variance(), {}};
  out.mc_samples.reserve(static_cast<std::size_t>(samples));
  for (int m = 0; m < samples; ++m) out.mc_samples.push_back(null.sample(rng));
  return out;
}

struct PValue {
  double value = 1.0;
};

/// (1 + #{m : |z_m - mean| >= |z - mean|}) / (M + 1).
inline PValue p_value_from(double z, const NullSummary& null) {
  const double d = std::abs(z - null.mean);
  std::size_t extreme = 0;
  for (double zm : null.mc_samples)
    if (std::abs(zm - null.mean) >= d) ++extreme;
  return {static_cast<double>(1 + extreme) / static_cast<double>(null.mc_samples.size() + 1)};
}

inline PValue p_value(const InteractionHistory& history, const Pdt& model, int samples, Rng& rng) {
  require(!history.empty(), "history is empty");
  const NullSummary null = null_summary(history.server_actions(), model, samples, rng);
  return p_value_from(test_statistic(history, model), null);
}

/// Accept iff p >= alpha.
inline AuthVerdict decide(PValue p, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorKind::invalid_parameter, "alpha must lie in (0,1)");
  return {p.value, alpha, p.value >= alpha};
}

inline AuthVerdict hypothesis_test(const InteractionHistory& history, const Pdt& model, double alpha,
                                   int samples, Rng& rng) {
  if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorKind::invalid_parameter, "alpha must lie in (0,1)");
  return decide(p_value(history, model, samples, rng), alpha);
}

/// Two-sided normal-approximation p from a running statistic.
inline double normal_p(double z, double mean, double variance) {
  const double deviation = std::abs(z - mean);
  if (variance <= 0.0) return deviation <= 1e-12 ? 1.0 : 0.0;
  const double p = std::erfc(deviation / std::sqrt(2.0 * variance));
  return std::clamp(p, 0.0, 1.0);
}

/// Streaming accumulator of the statistic and its null moments, one step at a time.
class RunningTest {
 public:
  void add(std::span<const double> q, Action observed) {
    const auto s = score_table(q);
    const auto m = score_moments(q, s);
    sum_score_ += s[observed.index()];
    sum_mean_ += m.mean;
    sum_var_ += m.variance;
    ++steps_;
  }

  std::size_t steps() const { return steps_; }
  double statistic() const { return sum_score_ / static_cast<double>(steps_); }
  double mean() const { return sum_mean_ / static_cast<double>(steps_); }
  double variance() const {
    const auto s = static_cast<double>(steps_);
    return sum_var_ / (s * s);
  }
  double p() const {
    if (steps_ == 0) return 1.0;
    return normal_p(statistic(), mean(), variance());
  }

 private:
  double sum_score_ = 0.0;
  double sum_mean_ = 0.0;
  double sum_var_ = 0.0;
  std::size_t steps_ = 0;
};

inline double incremental_p(const InteractionHistory& prefix, const Pdt& model) {
  require(!prefix.empty(), "prefix must hold at least one step");
  RunningTest running;
  const auto server = prefix.server_actions();
  const auto client = prefix.client_actions();
  for (std::size_t t = 0; t < prefix.size(); ++t)
    running.add(model.action_distribution(server.first(t)), client[t]);
  return running.p();
}

inline nlohmann::json verdict_to_json(const AuthVerdict& v, int l, int samples, std::uint64_t seed) {
  return {{"p", v.score}, {"alpha", v.threshold}, {"accept", v.accept}, {"l", l}, {"M", samples}, {"seed", seed}};
}

}  // namespace ami
