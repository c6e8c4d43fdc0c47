#pragma once

// Learned server probing.
//
// The probing state is the node of the legitimate user's tree that the
// server's own recent actions reach, i.e. where the legitimate user would be
// if it were on the other end. That makes the policy tabular over tree nodes.
// Training is n-step advantage actor-critic with a softmax actor and a
// state-value critic; the per-step reward is 1 - p from the running
// normal-approximation test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include <json.hpp>

#include "ami/adv.hpp"
#include "ami/engine.hpp"
#include "ami/error.hpp"
#include "ami/hypo.hpp"
#include "ami/pdt.hpp"
#include "ami/rng.hpp"

namespace ami {

inline constexpr double kDefaultProbeEpsilon = 0.25;

enum class PolicyMode { greedy, eps_greedy, softmax };

inline const char* to_string(PolicyMode m) {
  switch (m) {
    case PolicyMode::greedy: return "greedy";
    case PolicyMode::eps_greedy: return "eps_greedy";
    case PolicyMode::softmax: return "softmax";
  }
  return "unknown";
}

inline PolicyMode policy_mode_from_string(const std::string& s) {
  for (auto m : {PolicyMode::greedy, PolicyMode::eps_greedy, PolicyMode::softmax})
    if (s == to_string(m)) return m;
  fail(ErrorKind::invalid_parameter, "unknown policy mode '" + s + "'");
}

inline std::size_t probe_state(const Pdt& legit, std::span<const Action> server_actions) {
  return legit.node_for_history(server_actions);
}

class ProbePolicy {
 public:
  ProbePolicy(std::size_t states, int n_actions, double epsilon = kDefaultProbeEpsilon)
      : states_(states), n_(n_actions), epsilon_(epsilon),
        theta_(states * static_cast<std::size_t>(n_actions), 0.0), values_(states, 0.0) {
    require(states >= 1, "policy needs at least one state");
    require(n_actions >= 2, "policy needs at least two actions");
    require(epsilon >= 0.0 && epsilon <= 1.0, "epsilon must lie in [0,1]");
  }

  std::size_t state_count() const { return states_; }
  int n_actions() const { return n_; }
  double epsilon() const { return epsilon_; }
  void set_epsilon(double e) {
    require(e >= 0.0 && e <= 1.0, "epsilon must lie in [0,1]");
    epsilon_ = e;
  }

  std::span<double> preferences(std::size_t s) { return {theta_.data() + offset(s), static_cast<std::size_t>(n_)}; }
  std::span<const double> preferences(std::size_t s) const {
    return {theta_.data() + offset(s), static_cast<std::size_t>(n_)};
  }
  double& value(std::size_t s) { return values_.at(s); }
  double value(std::size_t s) const { return values_.at(s); }
  const std::vector<double>& theta() const { return theta_; }
  const std::vector<double>& values() const { return values_; }

  std::vector<double> probabilities(std::size_t s) const {
    const auto row = preferences(s);
    const double peak = *std::max_element(row.begin(), row.end());
    std::vector<double> p(row.size());
    double total = 0.0;
    for (std::size_t a = 0; a < row.size(); ++a) total += p[a] = std::exp(row[a] - peak);
    for (auto& v : p) v /= total;
    return p;
  }

  /// Highest preference, ties to the lowest action.
  Action greedy(std::size_t s) const {
    const auto row = preferences(s);
    return Action::from_index(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }

  Action act(std::size_t s, PolicyMode mode, Rng& rng) const {
    switch (mode) {
      case PolicyMode::greedy:
        return greedy(s);
      case PolicyMode::eps_greedy:
        if (rng.uniform() < epsilon_) return Action::from_index(rng.below(static_cast<std::uint64_t>(n_)));
        return greedy(s);
      case PolicyMode::softmax: {
        const auto p = probabilities(s);
        return Action::from_index(sample_index(p, rng));
      }
    }
    fail(ErrorKind::invalid_parameter, "unknown policy mode");
  }

  friend bool operator==(const ProbePolicy&, const ProbePolicy&) = default;

 private:
  std::size_t offset(std::size_t s) const {
    if (s >= states_) fail(ErrorKind::invalid_parameter, "probe state out of range");
    return s * static_cast<std::size_t>(n_);
  }

  std::size_t states_;
  int n_;
  double epsilon_;
  std::vector<double> theta_;
  std::vector<double> values_;
};

/// Server agent driven by a probing policy over the legitimate user's tree.
class ProbeAgent final : public Agent {
 public:
  ProbeAgent(std::shared_ptr<const ProbePolicy> policy, std::shared_ptr<const Pdt> legit, PolicyMode mode)
      : policy_(std::move(policy)), legit_(std::move(legit)), mode_(mode) {
    require(policy_ && legit_, "probe agent needs a policy and a legitimate model");
    require(policy_->state_count() == legit_->node_count(), "policy does not match the legitimate tree");
    require(policy_->n_actions() == legit_->n_actions(), "policy action count does not match the tree");
  }

  int n_actions() const override { return policy_->n_actions(); }
  Action next_action(const AgentView& view, Rng& rng) const override {
    return policy_->act(probe_state(*legit_, view.own), mode_, rng);
  }

 private:
  std::shared_ptr<const ProbePolicy> policy_;
  std::shared_ptr<const Pdt> legit_;
  PolicyMode mode_;
};

struct ProbeEnvConfig {
  std::shared_ptr<const Pdt> legit;
  std::vector<std::shared_ptr<const Agent>> population;
  int l = 100;  // server steps per episode
};

struct EnvStep {
  std::size_t state = 0;
  double reward = 0.0;
  bool done = false;
};

/// One authentication episode per reset against a client drawn uniformly
/// from the population.
class ProbeEnv {
 public:
  explicit ProbeEnv(ProbeEnvConfig cfg) : cfg_(std::move(cfg)), history_(2), client_rng_(0) {
    require(cfg_.legit != nullptr, "environment needs the legitimate model");
    require(!cfg_.population.empty(), "environment needs a non-empty population");
    require(cfg_.l >= 1, "episode length must be at least 1");
    for (const auto& c : cfg_.population)
      require(c && c->n_actions() == cfg_.legit->n_actions(), "population member has the wrong action count");
  }

  std::size_t reset(Rng& rng) {
    client_index_ = static_cast<std::size_t>(rng.below(cfg_.population.size()));
    client_rng_ = rng.split(client_index_);
    history_ = InteractionHistory(cfg_.legit->n_actions());
    running_ = RunningTest{};
    active_ = true;
    return 0;
  }

  EnvStep step(Action server_action) {
    if (!active_) fail(ErrorKind::invalid_state, "step called on a finished episode");
    if (!valid_action(server_action, cfg_.legit->n_actions()))
      fail(ErrorKind::invalid_parameter, "server action out of range");
    const auto& client = *cfg_.population[client_index_];
    const Action c = client.next_action({history_.client_actions(), history_.server_actions()}, client_rng_);
    if (!valid_action(c, cfg_.legit->n_actions())) fail(ErrorKind::protocol_violation, "client action out of range");
    running_.add(cfg_.legit->action_distribution(history_.server_actions()), c);
    history_.append(server_action, c);
    const bool done = static_cast<int>(history_.size()) == cfg_.l;
    if (done) active_ = false;
    return {probe_state(*cfg_.legit, history_.server_actions()), 1.0 - running_.p(), done};
  }

  std::size_t client_index() const { return client_index_; }
  const InteractionHistory& history() const { return history_; }
  double current_p() const { return running_.p(); }
  const ProbeEnvConfig& config() const { return cfg_; }

 private:
  ProbeEnvConfig cfg_;
  InteractionHistory history_;
  RunningTest running_;
  Rng client_rng_;
  std::size_t client_index_ = 0;
  bool active_ = false;
};

struct A2cHyper {
  double lr_policy = 0.01;
  double lr_value = 0.1;
  double entropy_bonus = 0.01;
  double discount = 1.0;
  double lr_time = 0.2;   // step size of the critic's (time, running p) baseline
  int p_buckets = 10;     // running-p resolution of that baseline; 1 keeps time only
  int rollout = 5;
};

struct TrainLogRow {
  long step = 0;
  double mean_return = 0.0;
  double mean_final_p = 0.0;
};

struct TrainResult {
  ProbePolicy policy;
  std::vector<TrainLogRow> log;
};

/// Undiscounted n-step actor-critic. Every `rollout` steps (or at episode
/// end) returns are bootstrapped from the critic and one batched update is
/// applied using the policy as it was before the update.
inline TrainResult train_probe(const ProbeEnvConfig& cfg, long steps, const A2cHyper& hyper, Rng& rng,
                               int log_every_episodes = 50) {
  require(steps >= 1, "training needs at least one step");
  require(hyper.rollout >= 1, "rollout length must be positive");
  require(hyper.discount > 0.0 && hyper.discount <= 1.0, "discount must lie in (0,1]");
  require(hyper.p_buckets >= 1, "p_buckets must be positive");
  ProbeEnv env(cfg);
  ProbePolicy policy(cfg.legit->node_count(), cfg.legit->n_actions());
  const auto n = static_cast<std::size_t>(cfg.legit->n_actions());
  // Critic estimate is V[state] + baseline[t, bucket of the running p]. The
  // return-to-go depends heavily on how far the test has already moved, which
  // the tree node alone does not see. The baseline is zero unless lr_time > 0.
  const auto buckets = static_cast<std::size_t>(hyper.p_buckets);
  std::vector<double> time_baseline((static_cast<std::size_t>(cfg.l) + 1) * buckets, 0.0);
  const auto progress = [&](std::size_t t, double p) {
    return t * buckets + std::min(buckets - 1, static_cast<std::size_t>(std::max(0.0, p) * static_cast<double>(buckets)));
  };
  const auto critic = [&](std::size_t s, std::size_t tp) { return policy.value(s) + time_baseline[tp]; };

  struct Transition {
    std::size_t state;
    std::size_t slot;  // baseline index
    Action action;
    double reward;
  };
  std::vector<Transition> buffer;
  buffer.reserve(static_cast<std::size_t>(hyper.rollout));
  std::vector<double> theta_delta(policy.theta().size(), 0.0);
  std::vector<double> value_delta(policy.state_count(), 0.0);
  std::vector<double> time_delta(time_baseline.size(), 0.0);

  TrainResult result{policy, {}};
  double window_return = 0.0;
  double window_p = 0.0;
  int window_episodes = 0;
  double episode_return = 0.0;

  std::size_t state = env.reset(rng);
  std::size_t t = 0;
  std::size_t tp = progress(0, env.current_p());
  for (long step = 1; step <= steps; ++step) {
    const Action a = policy.act(state, PolicyMode::softmax, rng);
    const EnvStep out = env.step(a);
    buffer.push_back({state, tp, a, out.reward});
    episode_return += out.reward;
    state = out.state;
    ++t;
    tp = progress(t, env.current_p());

    if (out.done || static_cast<int>(buffer.size()) == hyper.rollout || step == steps) {
      double ret = out.done ? 0.0 : critic(state, tp);
      for (auto it = buffer.rbegin(); it != buffer.rend(); ++it) {
        ret = it->reward + hyper.discount * ret;
        const double advantage = ret - critic(it->state, it->slot);
        const auto pi = policy.probabilities(it->state);
        double entropy = 0.0;
        for (double p : pi)
          if (p > 0.0) entropy -= p * std::log(p);
        for (std::size_t b = 0; b < n; ++b) {
          const double log_grad = (b == it->action.index() ? 1.0 : 0.0) - pi[b];
          const double entropy_grad = pi[b] > 0.0 ? -pi[b] * (std::log(pi[b]) + entropy) : 0.0;
          theta_delta[it->state * n + b] += hyper.lr_policy * advantage * log_grad + hyper.entropy_bonus * entropy_grad;
        }
        value_delta[it->state] += hyper.lr_value * advantage;
        time_delta[it->slot] += hyper.lr_time * advantage;
      }
      for (const auto& tr : buffer) {
        auto row = policy.preferences(tr.state);
        for (std::size_t b = 0; b < n; ++b) {
          row[b] += theta_delta[tr.state * n + b];
          theta_delta[tr.state * n + b] = 0.0;
        }
        policy.value(tr.state) += value_delta[tr.state];
        value_delta[tr.state] = 0.0;
        time_baseline[tr.slot] += time_delta[tr.slot];
        time_delta[tr.slot] = 0.0;
      }
      buffer.clear();
    }

    if (out.done) {
      window_return += episode_return;
      window_p += env.current_p();
      ++window_episodes;
      episode_return = 0.0;
      if (window_episodes == log_every_episodes) {
        result.log.push_back({step, window_return / window_episodes, window_p / window_episodes});
        window_return = window_p = 0.0;
        window_episodes = 0;
      }
      state = env.reset(rng);
      t = 0;
      tp = progress(0, env.current_p());
    }
  }
  result.policy = std::move(policy);
  return result;
}

/// Monte-Carlo p for every prefix of a transcript, sharing one set of M
/// null draws across prefixes.
inline std::vector<double> prefix_p_values(const InteractionHistory& history, const Pdt& model, int samples,
                                           Rng& rng) {
  require(samples >= 1, "at least one Monte-Carlo sample is required");
  const NullModel null(model, history.server_actions());
  const std::size_t steps = null.steps();
  const auto client = history.client_actions();
  std::vector<double> mean(steps), deviation(steps);
  double sum_mean = 0.0;
  double sum_obs = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const auto q = null.distribution(t);
    const auto s = null.scores(t);
    sum_mean += score_moments(q, s).mean;
    sum_obs += s[client[t].index()];
    const auto len = static_cast<double>(t + 1);
    mean[t] = sum_mean / len;
    deviation[t] = std::abs(sum_obs / len - mean[t]);
  }
  std::vector<std::size_t> extreme(steps, 0);
  for (int m = 0; m < samples; ++m) {
    double total = 0.0;
    for (std::size_t t = 0; t < steps; ++t) {
      total += null.scores(t)[sample_index(null.distribution(t), rng)];
      if (std::abs(total / static_cast<double>(t + 1) - mean[t]) >= deviation[t]) ++extreme[t];
    }
  }
  std::vector<double> p(steps);
  for (std::size_t t = 0; t < steps; ++t)
    p[t] = static_cast<double>(1 + extreme[t]) / static_cast<double>(samples + 1);
  return p;
}

struct PCurve {
  std::vector<double> mean;
  std::vector<double> stderr_;

  /// First step count (1-based prefix length) at which the mean p is <= threshold, or 0.
  std::size_t steps_to(double threshold) const {
    for (std::size_t t = 0; t < mean.size(); ++t)
      if (mean[t] <= threshold) return t + 1;
    return 0;
  }
};

/// Mean and standard error of the prefix p-value at each step over `trials`
/// episodes, trial i facing population member i mod size.
inline PCurve evaluate_policy(std::shared_ptr<const ProbePolicy> policy, PolicyMode mode,
                              std::shared_ptr<const Pdt> legit,
                              std::span<const std::shared_ptr<const Agent>> population, int l, int trials,
                              int samples, Rng& rng) {
  require(trials >= 1, "evaluation needs at least one trial");
  require(l >= 1, "episode length must be at least 1");
  require(!population.empty(), "evaluation population is empty");
  const ProbeAgent server(std::move(policy), legit, mode);
  const auto len = static_cast<std::size_t>(l);
  std::vector<double> sum(len, 0.0), sum_sq(len, 0.0);
  for (int i = 0; i < trials; ++i) {
    Rng trial = rng.split(static_cast<std::uint64_t>(i));
    Rng rng_s = trial.split(1);
    Rng rng_c = trial.split(2);
    Rng rng_t = trial.split(3);
    const auto& client = *population[static_cast<std::size_t>(i) % population.size()];
    const auto history = run_interaction(server, client, l - 1, rng_s, rng_c);
    const auto p = prefix_p_values(history, *legit, samples, rng_t);
    for (std::size_t t = 0; t < len; ++t) {
      sum[t] += p[t];
      sum_sq[t] += p[t] * p[t];
    }
  }
  PCurve curve;
  const auto count = static_cast<double>(trials);
  for (std::size_t t = 0; t < len; ++t) {
    const double m = sum[t] / count;
    const double var = trials > 1 ? std::max(0.0, (sum_sq[t] - count * m * m) / (count - 1.0)) : 0.0;
    curve.mean.push_back(m);
    curve.stderr_.push_back(std::sqrt(var / count));
  }
  return curve;
}

struct ReplaySummary {
  double mean_final_p = 0.0;
  double stderr_final_p = 0.0;
  double rejection_rate = 0.0;
  int trials = 0;
};

/// Each trial records a legitimate session under the probing server, then
/// replays its client actions against a fresh run of the same server.
inline ReplaySummary evaluate_replay(std::shared_ptr<const ProbePolicy> policy, PolicyMode mode,
                                     std::shared_ptr<const Pdt> legit, int l, int trials, double alpha, int samples,
                                     Rng& rng) {
  require(trials >= 1, "evaluation needs at least one trial");
  const ProbeAgent server(std::move(policy), legit, mode);
  const PdtAgent user(legit);
  double sum = 0.0, sum_sq = 0.0;
  int rejected = 0;
  for (int i = 0; i < trials; ++i) {
    Rng trial = rng.split(static_cast<std::uint64_t>(i));
    Rng rec_s = trial.split(1);
    Rng rec_c = trial.split(2);
    const auto recording = run_interaction(server, user, l - 1, rec_s, rec_c);
    const auto replay = make_replay_adversary(recording);
    Rng live_s = trial.split(3);
    Rng live_c = trial.split(4);
    Rng rng_t = trial.split(5);
    const auto live = run_interaction(server, *replay, l - 1, live_s, live_c);
    const auto verdict = hypothesis_test(live, *legit, alpha, samples, rng_t);
    sum += verdict.score;
    sum_sq += verdict.score * verdict.score;
    if (!verdict.accept) ++rejected;
  }
  ReplaySummary out;
  const auto count = static_cast<double>(trials);
  out.trials = trials;
  out.mean_final_p = sum / count;
  const double var = trials > 1 ? std::max(0.0, (sum_sq - count * out.mean_final_p * out.mean_final_p) / (count - 1.0)) : 0.0;
  out.stderr_final_p = std::sqrt(var / count);
  out.rejection_rate = rejected / count;
  return out;
}

inline nlohmann::json policy_to_json(const ProbePolicy& p) {
  return {{"version", 1}, {"states", p.state_count()}, {"n_actions", p.n_actions()}, {"epsilon", p.epsilon()},
          {"theta", p.theta()}, {"values", p.values()}};
}

inline ProbePolicy policy_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != 1) fail(ErrorKind::unsupported_version, "policy checkpoint version");
    ProbePolicy p(j.at("states").get<std::size_t>(), j.at("n_actions").get<int>(), j.at("epsilon").get<double>());
    const auto theta = j.at("theta").get<std::vector<double>>();
    const auto values = j.at("values").get<std::vector<double>>();
    if (theta.size() != p.theta().size()) fail(ErrorKind::parse_error, "field 'theta' has the wrong size");
    if (values.size() != p.values().size()) fail(ErrorKind::parse_error, "field 'values' has the wrong size");
    for (std::size_t s = 0; s < p.state_count(); ++s) {
      auto row = p.preferences(s);
      for (std::size_t a = 0; a < row.size(); ++a) row[a] = theta[s * row.size() + a];
      p.value(s) = values[s];
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, std::string("policy checkpoint: ") + e.what());
  }
}

}  // namespace ami
