// ami: experiment harness, model management and the networked serve/client pair.

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "ami/experiment.hpp"
#include "ami/net/session.hpp"

namespace fs = std::filesystem;
using namespace ami;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct Overrides {
  std::string experiment;
  std::optional<int> n, k, l, trials, population, null_samples, eval_trials;
  std::optional<double> alpha, tau_server, tau_client;
  std::optional<long> steps;
  std::string models, classifier, policy;
};

void add_experiment_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--experiment", o.experiment, "Preset: hypo, clf or probe");
  cmd->add_option("--n", o.n, "Number of actions");
  cmd->add_option("--k", o.k, "Tree depth");
  cmd->add_option("--l", o.l, "Interaction length (l+1 steps)");
  cmd->add_option("--tau-server", o.tau_server, "Server tree temperature");
  cmd->add_option("--tau-client", o.tau_client, "Client tree temperature");
  cmd->add_option("--models", o.models, "Directory with server.json and user.json");
}

void add_test_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--alpha", o.alpha, "Significance level");
  cmd->add_option("--M", o.null_samples, "Monte-Carlo null samples");
  cmd->add_option("--trials", o.trials, "Trials per metric");
  cmd->add_option("--population", o.population, "Adversary population size");
}

ExperimentConfig build_config(const Globals& g, const Overrides& o, const std::string& default_experiment) {
  const std::string name = o.experiment.empty() ? default_experiment : o.experiment;
  ExperimentConfig c = g.config.empty() ? preset(name) : load_config(g.config, preset(name));
  if (!o.experiment.empty() && c.experiment != o.experiment) {
    // An explicit preset flag wins over the file's; file fields still apply.
    ExperimentConfig base = preset(o.experiment);
    c = g.config.empty() ? base : load_config(g.config, base);
  }
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out = g.out;
  if (o.n) c.n_actions = *o.n;
  if (o.k) c.depth = *o.k;
  if (o.l) c.l = *o.l;
  if (o.tau_server) c.tau_server = *o.tau_server;
  if (o.tau_client) c.tau_client = *o.tau_client;
  if (o.alpha) c.alpha = *o.alpha;
  if (o.null_samples) c.null_samples = *o.null_samples;
  if (o.trials) c.trials = *o.trials;
  if (o.population) c.population = *o.population;
  if (o.eval_trials) c.eval_trials = *o.eval_trials;
  if (o.steps) c.train_steps = *o.steps;
  if (!o.models.empty()) c.models_dir = o.models;
  if (!o.classifier.empty()) c.classifier = o.classifier;
  if (!o.policy.empty()) c.policy = o.policy;
  validate(c);
  return c;
}

/// Writes to `path`, or stdout when the path is empty.
template <class Fn>
void with_output(const std::string& path, Fn&& fn) {
  if (path.empty()) {
    fn(std::cout);
    return;
  }
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io_error, "cannot write " + path);
  fn(out);
  if (!out) fail(ErrorKind::io_error, "write failed for " + path);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (const auto parent = path.parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io_error, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io_error, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, path.string() + ": " + e.what());
  }
}

net::Registry load_registry(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::io_error, "registry directory not found: " + dir.string());
  net::Registry reg;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
    reg[entry.path().stem().string()] = std::make_shared<const Pdt>(load_pdt(entry.path()));
  }
  if (reg.empty()) fail(ErrorKind::invalid_parameter, "registry " + dir.string() + " holds no <user>.json models");
  return reg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Authentication via multi-agent interaction"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON experiment config");
  app.add_option("--seed", g.seed, "Base seed");
  app.add_option("--out", g.out, "Output path");

  Overrides o;
  int exit_code = 0;

  auto* gen = app.add_subcommand("gen-models", "Generate server and user trees");
  add_experiment_flags(gen, o);

  auto* eval = app.add_subcommand("eval-auth", "Authentication accuracy per test and metric (CSV)");
  add_experiment_flags(eval, o);
  add_test_flags(eval, o);
  eval->add_option("--classifier", o.classifier, "Classifier checkpoint; enables the clf test");

  auto* sweep = app.add_subcommand("length-sweep", "Hypothesis-test accuracy against interaction length (CSV)");
  add_experiment_flags(sweep, o);
  add_test_flags(sweep, o);
  std::vector<int> lengths;
  sweep->add_option("--lengths", lengths, "Length grid")->delimiter(',');

  auto* train_clf = app.add_subcommand("train-clf", "Train the classifier test and write its checkpoint");
  add_experiment_flags(train_clf, o);
  std::optional<int> epochs, hidden;
  train_clf->add_option("--epochs", epochs, "Training epochs");
  train_clf->add_option("--hidden", hidden, "Hidden units per layer");

  auto* train_probe_cmd = app.add_subcommand("train-probe", "Train a probing policy (policy.json, train_log.csv)");
  add_experiment_flags(train_probe_cmd, o);
  train_probe_cmd->add_option("--steps", o.steps, "Environment steps");
  train_probe_cmd->add_option("--population", o.population, "Training population size");

  auto* eval_probe = app.add_subcommand("eval-probe", "Probe curves and replay summaries (curves.csv, summary.csv)");
  add_experiment_flags(eval_probe, o);
  add_test_flags(eval_probe, o);
  eval_probe->add_option("--policy", o.policy, "Policy checkpoint")->required();
  eval_probe->add_option("--eval-trials", o.eval_trials, "Episodes per curve");

  auto* serve = app.add_subcommand("serve", "Run the authentication server");
  std::string listen = "127.0.0.1:7700", registry_dir, server_model, probe_policy, probe_mode = "eps_greedy";
  std::optional<int> serve_l, serve_m;
  std::optional<double> serve_alpha;
  long max_sessions = 0;
  bool force_accept = false;
  serve->add_option("--listen", listen, "Listen address host:port (port 0 picks one)");
  serve->add_option("--registry", registry_dir, "Directory of <user>.json trees")->required();
  serve->add_option("--server-model", server_model, "Server tree");
  serve->add_option("--policy", probe_policy, "Probe policy checkpoint used instead of a server tree");
  serve->add_option("--mode", probe_mode, "Probe policy mode: greedy, eps_greedy or softmax");
  serve->add_option("--l", serve_l, "Interaction length");
  serve->add_option("--alpha", serve_alpha, "Significance level");
  serve->add_option("--M", serve_m, "Monte-Carlo null samples");
  serve->add_option("--max-sessions", max_sessions, "Exit after this many sessions (0 runs until signalled)");
  serve->add_flag("--force-accept", force_accept, "Send a confirmation tag even when the test rejects");

  auto* client = app.add_subcommand("client", "Authenticate against a server");
  std::string connect, user, model_path, transcript_out;
  client->add_option("--connect", connect, "Server address host:port")->required();
  client->add_option("--user", user, "User id")->required();
  client->add_option("--model", model_path, "Client tree")->required();
  client->add_option("--transcript", transcript_out, "Write the session transcript here");

  auto* key_cmd = app.add_subcommand("derive-key", "Session key of a transcript under a tree");
  std::string transcript_in, key_model;
  key_cmd->add_option("--transcript", transcript_in, "Transcript (JSON lines)")->required();
  key_cmd->add_option("--model", key_model, "Tree")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto c = build_config(g, o, "hypo");
      const auto models = generate_models(c);
      const fs::path dir = c.out.empty() ? fs::path("models") : fs::path(c.out);
      save_models(models, dir);
      std::cout << "wrote " << (dir / "server.json").string() << " (seed " << models.seed_server << ") and "
                << (dir / "user.json").string() << " (seed " << models.seed_legit << ")\n";
    } else if (*eval) {
      const auto c = build_config(g, o, "hypo");
      const auto rows = eval_auth(c, obtain_models(c));
      with_output(c.out, [&](std::ostream& out) { write_accuracy_csv(out, rows, false); });
    } else if (*sweep) {
      auto c = build_config(g, o, "hypo");
      if (!lengths.empty()) c.lengths = lengths;
      validate(c);
      const auto rows = length_sweep(c, obtain_models(c));
      with_output(c.out, [&](std::ostream& out) { write_accuracy_csv(out, rows, true); });
    } else if (*train_clf) {
      auto c = build_config(g, o, "clf");
      if (epochs) c.clf.epochs = *epochs;
      if (hidden) c.clf.hidden = *hidden;
      const auto rep = train_classifier_experiment(c, obtain_models(c));
      const fs::path path = c.out.empty() ? fs::path("classifier.json") : fs::path(c.out);
      write_json(path, mlp_to_json(rep.run.model, c.n_actions, c.l));
      std::cout << "held_out_accuracy " << rep.held_out_accuracy << " (" << rep.held_out_size << " examples)\n"
                << "train_accuracy " << rep.train_accuracy << "\nwrote " << path.string() << "\n";
    } else if (*train_probe_cmd) {
      const auto c = build_config(g, o, "probe");
      const auto res = train_probe_experiment(c, obtain_models(c));
      const fs::path dir = c.out.empty() ? fs::path("probe") : fs::path(c.out);
      write_json(dir / "policy.json", policy_to_json(res.policy));
      with_output((dir / "train_log.csv").string(), [&](std::ostream& out) { write_train_log_csv(out, res.log, c.seed); });
      std::cout << "wrote " << (dir / "policy.json").string() << "\n";
    } else if (*eval_probe) {
      const auto c = build_config(g, o, "probe");
      const auto models = obtain_models(c);
      auto policy = std::make_shared<ProbePolicy>(policy_from_json(read_json(c.policy)));
      policy->set_epsilon(c.epsilon);
      const auto series = evaluate_probe_experiment(c, models, policy);
      const fs::path dir = c.out.empty() ? fs::path("probe") : fs::path(c.out);
      with_output((dir / "curves.csv").string(), [&](std::ostream& out) { write_curves_csv(out, series, c.seed); });
      with_output((dir / "summary.csv").string(),
                  [&](std::ostream& out) { write_replay_csv(out, series, c.p_threshold, c.seed); });
      std::cout << "wrote " << (dir / "curves.csv").string() << " and " << (dir / "summary.csv").string() << "\n";
    } else if (*serve) {
      net::ServerConfig cfg;
      cfg.listen = net::parse_endpoint(listen);
      cfg.registry = load_registry(registry_dir);
      if (!probe_policy.empty()) {
        const PolicyMode mode = policy_mode_from_string(probe_mode);
        cfg.policy = net::probe_server_policy(std::make_shared<const ProbePolicy>(policy_from_json(read_json(probe_policy))),
                                              mode);
      } else {
        require(!server_model.empty(), "serve needs --server-model or --policy");
        cfg.policy = net::pdt_server_policy(std::make_shared<const Pdt>(load_pdt(server_model)));
      }
      if (serve_l) cfg.l = *serve_l;
      if (serve_alpha) cfg.alpha = *serve_alpha;
      if (serve_m) cfg.null_samples = *serve_m;
      if (g.seed) cfg.seed = *g.seed;
      cfg.force_accept = force_accept;
      std::atomic<long> done{0};
      std::mutex log_mutex;
      net::Server server(cfg, [&](const net::SessionRecord& r) {
        {
          std::lock_guard lock(log_mutex);
          std::cout << "session user=" << r.user << " steps=" << (r.history ? r.history->size() : 0);
          if (r.error.empty())
            std::cout << " p=" << r.verdict.score << " accept=" << (r.accepted ? 1 : 0);
          else
            std::cout << " error=\"" << r.error << "\"";
          std::cout << std::endl;
        }
        ++done;
      });
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.start();
      std::cout << "listening on " << cfg.listen.host << ":" << server.port() << std::endl;
      while (!g_stop && (max_sessions == 0 || done.load() < max_sessions))
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
      server.stop();
    } else if (*client) {
      const auto model = std::make_shared<const Pdt>(load_pdt(model_path));
      Rng rng(g.seed ? *g.seed : std::random_device{}());
      const auto result = net::client_authenticate(net::parse_endpoint(connect), user, model, rng);
      if (!transcript_out.empty()) {
        TranscriptMeta meta{result.history.n_actions(), static_cast<int>(result.params.l), std::nullopt, g.seed};
        save_transcript(transcript_out, result.history, meta);
      }
      std::cout << to_string(result.outcome);
      if (result.key) std::cout << " key=" << result.key->hex();
      std::cout << "\n";
      exit_code = result.outcome == net::ClientOutcome::accepted ? 0
                  : result.outcome == net::ClientOutcome::rejected ? 2
                                                                    : 3;
    } else if (*key_cmd) {
      const auto model = load_pdt(key_model);
      const auto history = load_transcript(transcript_in);
      std::cout << derive_key(history, model).hex() << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
