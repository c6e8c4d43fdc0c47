#pragma once

// Experiment drivers shared by the command-line tool and the acceptance run.
// Every trial draws from a seed derived from the config seed and the trial's
// coordinates, so rows are reproducible one at a time.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ami/adv.hpp"
#include "ami/clf.hpp"
#include "ami/engine.hpp"
#include "ami/error.hpp"
#include "ami/hypo.hpp"
#include "ami/pdt.hpp"
#include "ami/pdt_io.hpp"
#include "ami/rl.hpp"

namespace ami {

struct ExperimentConfig {
  std::string experiment = "hypo";
  int n_actions = 10;
  int depth = 5;
  int l = 200;
  double tau_server = 1.0;
  double tau_client = 0.1;
  double alpha = kDefaultAlpha;
  int null_samples = kDefaultNullSamples;
  int trials = 100;
  int population = 100;
  int mle_observations = 100;
  std::vector<int> lengths{10, 25, 50, 100, 200};
  std::uint64_t seed = 1;
  std::string models_dir;  // holds server.json and user.json
  std::string out;
  // Classifier.
  TrainConfig clf;
  std::string classifier;  // checkpoint path; the clf test runs only when set
  // Probing.
  long train_steps = 200'000;
  A2cHyper hyper;
  double epsilon = kDefaultProbeEpsilon;
  int eval_trials = 500;
  double p_threshold = 0.2;
  std::string policy;  // checkpoint path for eval-probe
};

/// Defaults for the three experiment families.
inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.experiment = name;
  if (name == "hypo") return c;
  if (name == "clf") {
    c.n_actions = 3;
    return c;
  }
  if (name == "probe") {
    c.n_actions = 3;
    c.tau_client = 0.5;
    c.l = 100;
    return c;
  }
  fail(ErrorKind::invalid_parameter, "unknown experiment '" + name + "' (expected hypo, clf or probe)");
}

inline void validate(const ExperimentConfig& c) {
  require(c.n_actions >= 2 && c.n_actions <= 255, "n must lie in [2,255]");
  require(c.depth >= 0, "k must be non-negative");
  require(c.l >= 0, "l must be non-negative");
  require(c.tau_server > 0.0 && c.tau_client > 0.0, "temperatures must be positive");
  require(c.alpha > 0.0 && c.alpha < 1.0, "alpha must lie in (0,1)");
  require(c.null_samples >= 1 && c.trials >= 1 && c.population >= 1 && c.mle_observations >= 1,
          "counts must be positive");
  require(c.eval_trials >= 1 && c.train_steps >= 1, "probe counts must be positive");
  require(!c.lengths.empty(), "length grid is empty");
  for (int l : c.lengths) require(l >= 0, "length grid entries must be non-negative");
  (void)pdt_node_count(c.n_actions, c.depth);
}

/// Applies the fields present in `j` on top of the preset named by its
/// "experiment" field (or `base` when absent).
inline ExperimentConfig config_from_json(const nlohmann::json& j, const ExperimentConfig& base = {}) {
  ExperimentConfig c = j.contains("experiment") ? preset(j.at("experiment").get<std::string>()) : base;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("n", c.n_actions);
    get("k", c.depth);
    get("l", c.l);
    get("tau_server", c.tau_server);
    get("tau_client", c.tau_client);
    get("alpha", c.alpha);
    get("M", c.null_samples);
    get("trials", c.trials);
    get("population", c.population);
    get("mle_observations", c.mle_observations);
    get("lengths", c.lengths);
    get("seed", c.seed);
    get("models", c.models_dir);
    get("out", c.out);
    get("classifier", c.classifier);
    get("train_steps", c.train_steps);
    get("epsilon", c.epsilon);
    get("eval_trials", c.eval_trials);
    get("p_threshold", c.p_threshold);
    get("policy", c.policy);
    if (j.contains("clf")) {
      const auto& t = j.at("clf");
      auto tget = [&](const char* key, auto& field) {
        if (t.contains(key)) field = t.at(key).get<std::decay_t<decltype(field)>>();
      };
      tget("n_legit", c.clf.n_legit);
      tget("n_adv", c.clf.n_adv);
      tget("epochs", c.clf.epochs);
      tget("batch_size", c.clf.batch_size);
      tget("learning_rate", c.clf.learning_rate);
      tget("hidden", c.clf.hidden);
      tget("seed", c.clf.seed);
    }
    if (j.contains("rl")) {
      const auto& r = j.at("rl");
      auto rget = [&](const char* key, auto& field) {
        if (r.contains(key)) field = r.at(key).get<std::decay_t<decltype(field)>>();
      };
      rget("lr_policy", c.hyper.lr_policy);
      rget("lr_value", c.hyper.lr_value);
      rget("lr_time", c.hyper.lr_time);
      rget("entropy_bonus", c.hyper.entropy_bonus);
      rget("discount", c.hyper.discount);
      rget("rollout", c.hyper.rollout);
      rget("p_buckets", c.hyper.p_buckets);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, std::string("experiment config: ") + e.what());
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const ExperimentConfig& base = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io_error, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, "config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, base);
}

// ---------------------------------------------------------------------------
// Models

struct ModelSet {
  std::shared_ptr<const Pdt> server;
  std::shared_ptr<const Pdt> legit;
  std::uint64_t seed_server = 0;
  std::uint64_t seed_legit = 0;
};

inline ModelSet generate_models(const ExperimentConfig& c) {
  ModelSet m;
  m.seed_server = derive_seed(c.seed, 0x5e);
  m.seed_legit = derive_seed(c.seed, 0xc1);
  Rng rs(m.seed_server), rl(m.seed_legit);
  m.server = std::make_shared<const Pdt>(generate_random_pdt(c.n_actions, c.depth, c.tau_server, rs));
  m.legit = std::make_shared<const Pdt>(generate_random_pdt(c.n_actions, c.depth, c.tau_client, rl));
  return m;
}

inline void save_models(const ModelSet& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_pdt(*m.server, dir / "server.json");
  save_pdt(*m.legit, dir / "user.json");
  std::ofstream seeds(dir / "seeds.json");
  if (!seeds) fail(ErrorKind::io_error, "cannot write " + (dir / "seeds.json").string());
  seeds << nlohmann::json{{"server", m.seed_server}, {"user", m.seed_legit}}.dump(2) << "\n";
}

inline ModelSet load_models(const std::filesystem::path& dir) {
  ModelSet m;
  m.server = std::make_shared<const Pdt>(load_pdt(dir / "server.json"));
  m.legit = std::make_shared<const Pdt>(load_pdt(dir / "user.json"));
  require(m.server->n_actions() == m.legit->n_actions(), "server and user models disagree on n");
  return m;
}

/// Models from `models_dir` when set, else generated from the seed.
inline ModelSet obtain_models(const ExperimentConfig& c) {
  if (!c.models_dir.empty()) return load_models(c.models_dir);
  return generate_models(c);
}

// ---------------------------------------------------------------------------
// Authentication accuracy

enum class Metric { legit, random, replay, mle };

inline constexpr Metric kAllMetrics[] = {Metric::legit, Metric::random, Metric::replay, Metric::mle};

inline const char* to_string(Metric m) {
  switch (m) {
    case Metric::legit: return "legit";
    case Metric::random: return "random";
    case Metric::replay: return "replay";
    case Metric::mle: return "mle";
  }
  return "?";
}

/// Population of adversaries of one kind, seeded from the config seed.
inline PopulationSpec adversary_population(const ExperimentConfig& c, AdversaryKind kind, int l) {
  PopulationSpec s;
  s.kind = kind;
  s.count = c.population;
  s.n_actions = c.n_actions;
  s.depth = c.depth;
  s.temperature = c.tau_client;
  s.seed_begin = derive_seed(c.seed, 0xa000 + static_cast<std::uint64_t>(kind));
  s.l = l;
  s.observations = c.mle_observations;
  return s;
}

/// Decides accept/reject for a transcript; the rng is private to the trial.
using AuthTest = std::function<bool(const InteractionHistory&, Rng&)>;

inline AuthTest hypothesis_auth(std::shared_ptr<const Pdt> legit, double alpha, int samples) {
  return [legit = std::move(legit), alpha, samples](const InteractionHistory& h, Rng& rng) {
    return hypothesis_test(h, *legit, alpha, samples, rng).accept;
  };
}

inline AuthTest classifier_auth(std::shared_ptr<const Mlp> model, int l) {
  return [model = std::move(model), l](const InteractionHistory& h, Rng&) { return classifier_test(*model, h, l).accept; };
}

struct AccuracyRow {
  std::string test;
  Metric metric = Metric::legit;
  int l = 0;
  int trials = 0;
  int correct = 0;
  std::uint64_t seed = 0;
  double accuracy() const { return trials ? static_cast<double>(correct) / trials : 0.0; }
};

/// Builds the client for trial i of one metric. Adversary trial i faces
/// population member i mod count.
class TrialClients {
 public:
  TrialClients(const ExperimentConfig& c, const ModelSet& models, int l)
      : cfg_(c), models_(models), server_(models.server), legit_(models.legit), l_(l) {}

  std::shared_ptr<const Agent> client(Metric m, int trial) {
    if (m == Metric::legit) return legit_agent();
    const AdversaryKind kind = m == Metric::random ? AdversaryKind::random
                               : m == Metric::replay ? AdversaryKind::replay
                                                     : AdversaryKind::mle;
    const auto spec = adversary_population(cfg_, kind, l_);
    const LegitContext ctx{&server_, models_.legit};
    return make_population_member(spec, static_cast<std::size_t>(trial) % static_cast<std::size_t>(spec.count), ctx);
  }

  const Agent& server() const { return server_; }

 private:
  std::shared_ptr<const Agent> legit_agent() { return std::make_shared<const PdtAgent>(legit_.shared_model()); }

  const ExperimentConfig& cfg_;
  const ModelSet& models_;
  PdtAgent server_;
  PdtAgent legit_;
  int l_;
};

inline std::uint64_t trial_seed(std::uint64_t seed, Metric m, int l, int trial) {
  return derive_seed(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(m)), static_cast<std::uint64_t>(l)),
                     static_cast<std::uint64_t>(trial));
}

/// Fraction of `trials` sessions of length l that `test` labels correctly.
inline AccuracyRow measure_accuracy(const ExperimentConfig& c, const ModelSet& models, const std::string& test_name,
                                    const AuthTest& test, Metric metric, int l, int trials) {
  TrialClients clients(c, models, l);
  AccuracyRow row{test_name, metric, l, trials, 0, c.seed};
  for (int i = 0; i < trials; ++i) {
    Rng trial(trial_seed(c.seed, metric, l, i));
    Rng rng_s = trial.split(1), rng_c = trial.split(2), rng_t = trial.split(3);
    const auto client = clients.client(metric, i);
    const auto history = run_interaction(clients.server(), *client, l, rng_s, rng_c);
    const bool accept = test(history, rng_t);
    if (accept == (metric == Metric::legit)) ++row.correct;
  }
  return row;
}

inline std::optional<std::shared_ptr<const Mlp>> load_classifier(const std::string& path, int n, int l) {
  if (path.empty()) return std::nullopt;
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io_error, "cannot open classifier checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, "classifier checkpoint " + path + ": " + e.what());
  }
  const auto ck = mlp_from_json(j);
  if (ck.n_actions != n || ck.l != l)
    fail(ErrorKind::invalid_parameter, "classifier checkpoint was trained for different (n, l)");
  return std::make_shared<const Mlp>(ck.model);
}

inline std::vector<AccuracyRow> eval_auth(const ExperimentConfig& c, const ModelSet& models) {
  std::vector<std::pair<std::string, AuthTest>> tests{{"hypo", hypothesis_auth(models.legit, c.alpha, c.null_samples)}};
  if (auto clf = load_classifier(c.classifier, c.n_actions, c.l)) tests.emplace_back("clf", classifier_auth(*clf, c.l));
  std::vector<AccuracyRow> rows;
  for (const auto& [name, test] : tests)
    for (Metric m : kAllMetrics) rows.push_back(measure_accuracy(c, models, name, test, m, c.l, c.trials));
  return rows;
}

inline std::vector<AccuracyRow> length_sweep(const ExperimentConfig& c, const ModelSet& models) {
  const auto test = hypothesis_auth(models.legit, c.alpha, c.null_samples);
  std::vector<AccuracyRow> rows;
  for (int l : c.lengths)
    for (Metric m : kAllMetrics) rows.push_back(measure_accuracy(c, models, "hypo", test, m, l, c.trials));
  return rows;
}

inline void write_accuracy_csv(std::ostream& out, const std::vector<AccuracyRow>& rows, bool with_length) {
  out << (with_length ? "l,test,metric,trials,accuracy,seed\n" : "test,metric,trials,accuracy,seed\n");
  for (const auto& r : rows) {
    if (with_length) out << r.l << ',';
    char acc[32];
    std::snprintf(acc, sizeof acc, "%.4f", r.accuracy());
    out << r.test << ',' << to_string(r.metric) << ',' << r.trials << ',' << acc << ',' << r.seed << '\n';
  }
}

// ---------------------------------------------------------------------------
// Classifier

/// Fresh random trees drawn from the same process as the legitimate model.
inline AdversarySampler random_tree_sampler(const ExperimentConfig& c) {
  const std::uint64_t base = derive_seed(c.seed, 0xc1f);
  const int n = c.n_actions, k = c.depth;
  const double tau = c.tau_client;
  return [base, n, k, tau](std::size_t member, Rng&) {
    Rng r(derive_seed(base, member));
    return std::make_shared<const Pdt>(generate_random_pdt(n, k, tau, r));
  };
}

struct ClassifierReport {
  TrainingRun run;
  double held_out_accuracy = 0.0;
  double train_accuracy = 0.0;
  std::size_t held_out_size = 0;
};

inline ClassifierReport train_classifier_experiment(const ExperimentConfig& c, const ModelSet& models) {
  Rng rng(derive_seed(c.seed, 0xda7a));
  const Dataset ds = generate_dataset(*models.server, models.legit, random_tree_sampler(c), c.l, c.clf, rng);
  ClassifierReport rep{train_classifier(ds, c.clf), 0.0, 0.0, ds.held_out.size()};
  rep.held_out_accuracy = accuracy(rep.run.model, ds.held_out, ds.n_actions, ds.l);
  rep.train_accuracy = accuracy(rep.run.model, ds.train, ds.n_actions, ds.l);
  return rep;
}

// ---------------------------------------------------------------------------
// Probing

inline PopulationSpec probe_population(const ExperimentConfig& c, bool held_out) {
  PopulationSpec s = adversary_population(c, AdversaryKind::random, c.l);
  s.seed_begin = derive_seed(c.seed, held_out ? 0xe7a1 : 0x7a1);
  return s;
}

inline TrainResult train_probe_experiment(const ExperimentConfig& c, const ModelSet& models) {
  const ProbeEnvConfig env{models.legit, sample_population(probe_population(c, false)), c.l};
  Rng rng(derive_seed(c.seed, 0x7ea1));
  TrainResult res = train_probe(env, c.train_steps, c.hyper, rng);
  res.policy.set_epsilon(c.epsilon);
  return res;
}

inline void write_train_log_csv(std::ostream& out, const std::vector<TrainLogRow>& log, std::uint64_t seed) {
  out << "step,mean_return,mean_final_p,seed\n";
  for (const auto& r : log) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%ld,%.6f,%.6f,", r.step, r.mean_return, r.mean_final_p);
    out << buf << seed << '\n';
  }
}

struct ProbeSeries {
  std::string name;
  PCurve curve;
  ReplaySummary replay;
};

/// Trained greedy, trained epsilon-greedy and uniform-random series, all
/// against the same held-out population with common evaluation seeds.
inline std::vector<ProbeSeries> evaluate_probe_experiment(const ExperimentConfig& c, const ModelSet& models,
                                                          std::shared_ptr<const ProbePolicy> trained) {
  require(trained != nullptr, "no trained policy");
  const auto population = sample_population(probe_population(c, true));
  const auto uniform = std::make_shared<const ProbePolicy>(models.legit->node_count(), c.n_actions, c.epsilon);
  const std::vector<std::tuple<std::string, std::shared_ptr<const ProbePolicy>, PolicyMode>> modes{
      {"trained-greedy", trained, PolicyMode::greedy},
      {"trained-eps", trained, PolicyMode::eps_greedy},
      {"uniform", uniform, PolicyMode::softmax}};
  std::vector<ProbeSeries> out;
  for (const auto& [name, policy, mode] : modes) {
    Rng curve_rng(derive_seed(c.seed, 0xc0e));
    Rng replay_rng(derive_seed(c.seed, 0x4e9));
    out.push_back({name,
                   evaluate_policy(policy, mode, models.legit, population, c.l, c.eval_trials, c.null_samples, curve_rng),
                   evaluate_replay(policy, mode, models.legit, c.l, c.trials, c.alpha, c.null_samples, replay_rng)});
  }
  return out;
}

inline void write_curves_csv(std::ostream& out, const std::vector<ProbeSeries>& series, std::uint64_t seed) {
  out << "policy,step,mean_p,stderr,seed\n";
  for (const auto& s : series)
    for (std::size_t t = 0; t < s.curve.mean.size(); ++t) {
      char buf[96];
      std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f,", t + 1, s.curve.mean[t], s.curve.stderr_[t]);
      out << s.name << buf << seed << '\n';
    }
}

inline void write_replay_csv(std::ostream& out, const std::vector<ProbeSeries>& series, double threshold,
                             std::uint64_t seed) {
  out << "policy,steps_to_threshold,replay_mean_final_p,replay_stderr,replay_rejection_rate,replay_trials,seed\n";
  for (const auto& s : series) {
    char buf[128];
    std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f,%.4f,%d,", s.curve.steps_to(threshold), s.replay.mean_final_p,
                  s.replay.stderr_final_p, s.replay.rejection_rate, s.replay.trials);
    out << s.name << buf << seed << '\n';
  }
}

}  // namespace ami
