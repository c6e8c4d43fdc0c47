#pragma once

// Supervised authentication test: a feedforward network trained to tell
// legitimate transcripts from adversarial ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include <json.hpp>

#include "ami/engine.hpp"
#include "ami/error.hpp"
#include "ami/pdt.hpp"
#include "ami/rng.hpp"
#include "ami/verdict.hpp"

namespace ami {

inline constexpr double kClassifierThreshold = 0.5;

inline std::size_t encoded_size(int n_actions, int l) {
  return 2 * static_cast<std::size_t>(l + 1) * static_cast<std::size_t>(n_actions);
}

/// For t = 0..l: server one-hot block, then client one-hot block.
inline std::vector<double> encode_history(const InteractionHistory& history, int n_actions, int l) {
  if (history.n_actions() != n_actions || static_cast<int>(history.size()) != l + 1)
    fail(ErrorKind::invalid_parameter, "history shape does not match (n, l)");
  const auto n = static_cast<std::size_t>(n_actions);
  std::vector<double> x(encoded_size(n_actions, l), 0.0);
  for (std::size_t t = 0; t < history.size(); ++t) {
    const auto st = history.step(t);
    x[2 * t * n + st.server.index()] = 1.0;
    x[(2 * t + 1) * n + st.client.index()] = 1.0;
  }
  return x;
}

inline InteractionHistory decode_history(std::span<const double> x, int n_actions) {
  const auto n = static_cast<std::size_t>(n_actions);
  require(x.size() % (2 * n) == 0 && !x.empty(), "encoded history has the wrong length");
  InteractionHistory h(n_actions);
  const auto block = [&](std::size_t b) {
    std::size_t hit = n;
    for (std::size_t a = 0; a < n; ++a) {
      if (x[b * n + a] == 1.0) {
        require(hit == n, "encoded block has more than one active entry");
        hit = a;
      } else {
        require(x[b * n + a] == 0.0, "encoded entry is not 0/1");
      }
    }
    require(hit != n, "encoded block has no active entry");
    return Action::from_index(hit);
  };
  for (std::size_t t = 0; t < x.size() / (2 * n); ++t) h.append(block(2 * t), block(2 * t + 1));
  return h;
}

struct TrainConfig {
  int n_legit = 4000;
  int n_adv = 4000;
  int epochs = 20;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int hidden = 128;
  std::uint64_t seed = 1;
};

/// Dense layer with weights stored input-major: weights[i * out + j].
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weights;
  std::vector<double> bias;
};

inline double logistic(double z) {
  const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

/// Rectifier hidden layers, one logistic output.
class Mlp {
 public:
  Mlp() = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  Mlp(std::vector<std::size_t> sizes, Rng& rng) {
    require(sizes.size() >= 2 && sizes.back() == 1, "layer sizes must end in a single output");
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      require(sizes[l] >= 1 && sizes[l + 1] >= 1, "layer sizes must be positive");
      DenseLayer layer{sizes[l], sizes[l + 1], std::vector<double>(sizes[l] * sizes[l + 1]),
                       std::vector<double>(sizes[l + 1], 0.0)};
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
      for (auto& w : layer.weights) w = (2.0 * rng.uniform() - 1.0) * bound;
      layers_.push_back(std::move(layer));
    }
  }

  explicit Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    require(!layers_.empty() && layers_.back().out == 1, "network must end in a single output");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      require(L.weights.size() == L.in * L.out && L.bias.size() == L.out, "layer parameter shapes are inconsistent");
      if (l > 0) require(layers_[l - 1].out == L.in, "adjacent layer sizes do not chain");
    }
  }

  std::size_t input_size() const { return layers_.front().in; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  std::size_t parameter_count() const {
    std::size_t c = 0;
    for (const auto& L : layers_) c += L.weights.size() + L.bias.size();
    return c;
  }

  /// Pre-activations and activations of every layer; activations[0] is the input.
  struct Trace {
    std::vector<std::vector<double>> activations;
    double logit = 0.0;
  };

  Trace trace(std::span<const double> x) const {
    if (x.size() != input_size()) fail(ErrorKind::invalid_parameter, "input size does not match the network");
    Trace tr;
    tr.activations.emplace_back(x.begin(), x.end());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const auto& in = tr.activations.back();
      std::vector<double> z(L.bias);
      for (std::size_t i = 0; i < L.in; ++i) {
        const double xi = in[i];
        if (xi == 0.0) continue;
        const double* w = L.weights.data() + i * L.out;
        for (std::size_t j = 0; j < L.out; ++j) z[j] += xi * w[j];
      }
      if (l + 1 == layers_.size()) {
        tr.logit = z[0];
      } else {
        for (auto& v : z) v = v > 0.0 ? v : 0.0;
        tr.activations.push_back(std::move(z));
      }
    }
    return tr;
  }

  double forward(std::span<const double> x) const { return logistic(trace(x).logit); }

  /// Mean binary cross-entropy over the batch and its gradient, laid out
  /// like the parameters (per layer: weights then bias).
  double loss_and_gradient(std::span<const std::vector<double>> inputs, std::span<const double> labels,
                           std::vector<DenseLayer>& grad) const {
    require(inputs.size() == labels.size() && !inputs.empty(), "batch inputs and labels differ");
    grad = layers_;
    for (auto& g : grad) {
      std::fill(g.weights.begin(), g.weights.end(), 0.0);
      std::fill(g.bias.begin(), g.bias.end(), 0.0);
    }
    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(inputs.size());
    for (std::size_t e = 0; e < inputs.size(); ++e) {
      const auto tr = trace(inputs[e]);
      const double y = labels[e];
      // softplus(z) - y z, evaluated stably.
      const double z = tr.logit;
      loss += (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) - y * z;
      std::vector<double> delta{(1.0 / (1.0 + std::exp(-z)) - y) * scale};
      for (std::size_t l = layers_.size(); l-- > 0;) {
        const auto& L = layers_[l];
        auto& G = grad[l];
        const auto& in = tr.activations[l];
        for (std::size_t j = 0; j < L.out; ++j) G.bias[j] += delta[j];
        for (std::size_t i = 0; i < L.in; ++i) {
          const double xi = in[i];
          if (xi == 0.0) continue;
          double* g = G.weights.data() + i * L.out;
          for (std::size_t j = 0; j < L.out; ++j) g[j] += xi * delta[j];
        }
        if (l == 0) break;
        std::vector<double> back(L.in, 0.0);
        for (std::size_t i = 0; i < L.in; ++i) {
          if (in[i] <= 0.0) continue;  // rectifier derivative
          const double* w = L.weights.data() + i * L.out;
          double s = 0.0;
          for (std::size_t j = 0; j < L.out; ++j) s += w[j] * delta[j];
          back[i] = s;
        }
        delta = std::move(back);
      }
    }
    return loss * scale;
  }

 private:
  std::vector<DenseLayer> layers_;
};

/// Adam state shaped like the network parameters.
class Adam {
 public:
  explicit Adam(const Mlp& net, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& L : net.layers()) {
      m_.push_back({L.in, L.out, std::vector<double>(L.weights.size(), 0.0), std::vector<double>(L.bias.size(), 0.0)});
    }
    v_ = m_;
  }

  void step(Mlp& net, const std::vector<DenseLayer>& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    auto update = [&](std::vector<double>& param, const std::vector<double>& g, std::vector<double>& m,
                      std::vector<double>& v) {
      for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        param[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    };
    auto& layers = net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      update(layers[l].weights, grad[l].weights, m_[l].weights, v_[l].weights);
      update(layers[l].bias, grad[l].bias, m_[l].bias, v_[l].bias);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<DenseLayer> m_, v_;
};

struct Example {
  InteractionHistory history;
  double label = 0.0;
  // Population member that produced an adversarial example; -1 for legitimate ones.
  long member = -1;
};

struct Dataset {
  int n_actions = 0;
  int l = 0;
  std::vector<Example> train;
  std::vector<Example> held_out;
};

/// Draws one adversarial client tree per call; the argument is the member index.
using AdversarySampler = std::function<std::shared_ptr<const Pdt>(std::size_t member, Rng& rng)>;

/// Legitimate and adversarial transcripts, each class split 90/10 and shuffled.
/// Every adversarial transcript comes from its own member, so no member
/// appears in both splits.
inline Dataset generate_dataset(const Pdt& server, std::shared_ptr<const Pdt> legit, const AdversarySampler& population,
                                int l, const TrainConfig& cfg, Rng& rng) {
  require(static_cast<bool>(population), "adversary population is empty");
  require(legit != nullptr, "legitimate model is required");
  require(cfg.n_legit >= 1 && cfg.n_adv >= 1, "dataset sizes must be positive");
  require(server.n_actions() == legit->n_actions(), "server and legitimate models disagree on n");
  const PdtAgent server_agent(std::make_shared<const Pdt>(server));
  const PdtAgent legit_agent(std::move(legit));
  std::vector<Example> legit_examples, adv_examples;
  for (int i = 0; i < cfg.n_legit; ++i) {
    Rng rs = rng.split(1), rc = rng.split(2);
    legit_examples.push_back({run_interaction(server_agent, legit_agent, l, rs, rc), 1.0, -1});
  }
  for (int i = 0; i < cfg.n_adv; ++i) {
    Rng member_rng = rng.split(3);
    const PdtAgent adversary(population(static_cast<std::size_t>(i), member_rng));
    Rng rs = rng.split(4), rc = rng.split(5);
    adv_examples.push_back({run_interaction(server_agent, adversary, l, rs, rc), 0.0, i});
  }
  Dataset ds;
  ds.n_actions = server.n_actions();
  ds.l = l;
  for (auto* group : {&legit_examples, &adv_examples}) {
    std::shuffle(group->begin(), group->end(), rng);
    const std::size_t cut = group->size() - group->size() / 10;
    for (std::size_t i = 0; i < group->size(); ++i)
      (i < cut ? ds.train : ds.held_out).push_back(std::move((*group)[i]));
  }
  std::shuffle(ds.train.begin(), ds.train.end(), rng);
  std::shuffle(ds.held_out.begin(), ds.held_out.end(), rng);
  return ds;
}

struct TrainingRun {
  Mlp model;
  std::vector<double> epoch_loss;
};

/// Mini-batch Adam on binary cross-entropy.
inline TrainingRun train_classifier(const Dataset& ds, const TrainConfig& cfg) {
  require(!ds.train.empty(), "training split is empty");
  require(cfg.epochs >= 1 && cfg.batch_size >= 1 && cfg.hidden >= 1 && cfg.learning_rate > 0.0,
          "training configuration must be positive");
  const bool has_pos = std::any_of(ds.train.begin(), ds.train.end(), [](const Example& e) { return e.label > 0.5; });
  const bool has_neg = std::any_of(ds.train.begin(), ds.train.end(), [](const Example& e) { return e.label < 0.5; });
  if (!has_pos || !has_neg) fail(ErrorKind::invalid_parameter, "training split holds a single label");

  Rng rng(cfg.seed);
  const std::size_t input = encoded_size(ds.n_actions, ds.l);
  const auto h = static_cast<std::size_t>(cfg.hidden);
  TrainingRun run{Mlp({input, h, h, 1}, rng), {}};
  Adam adam(run.model, cfg.learning_rate);

  std::vector<std::vector<double>> encoded;
  encoded.reserve(ds.train.size());
  for (const auto& e : ds.train) encoded.push_back(encode_history(e.history, ds.n_actions, ds.l));

  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<double>> batch_x;
  std::vector<double> batch_y;
  std::vector<DenseLayer> grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch_x.clear();
      batch_y.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch_x.push_back(encoded[order[i]]);
        batch_y.push_back(ds.train[order[i]].label);
      }
      total += run.model.loss_and_gradient(batch_x, batch_y, grad);
      adam.step(run.model, grad);
      ++batches;
    }
    run.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return run;
}

/// Accept iff output > 0.5.
inline AuthVerdict classify_score(double score) { return {score, kClassifierThreshold, score > kClassifierThreshold}; }

inline AuthVerdict classifier_test(const Mlp& model, const InteractionHistory& history, int l) {
  const std::size_t expected = encoded_size(history.n_actions(), l);
  if (model.input_size() != expected || static_cast<int>(history.size()) != l + 1)
    fail(ErrorKind::invalid_parameter, "classifier input shape does not match the history");
  return classify_score(model.forward(encode_history(history, history.n_actions(), l)));
}

inline double accuracy(const Mlp& model, std::span<const Example> examples, int n_actions, int l) {
  require(!examples.empty(), "no examples to score");
  std::size_t correct = 0;
  for (const auto& e : examples) {
    const bool accept = model.forward(encode_history(e.history, n_actions, l)) > kClassifierThreshold;
    if (accept == (e.label > 0.5)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

inline nlohmann::json mlp_to_json(const Mlp& model, int n_actions, int l) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& L : model.layers())
    layers.push_back({{"in", L.in}, {"out", L.out}, {"weights", L.weights}, {"bias", L.bias}});
  return {{"version", 1}, {"n_actions", n_actions}, {"l", l}, {"hidden_activation", "relu"},
          {"output", "logistic"}, {"layers", std::move(layers)}};
}

struct ClassifierCheckpoint {
  Mlp model;
  int n_actions = 0;
  int l = 0;
};

inline ClassifierCheckpoint mlp_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != 1) fail(ErrorKind::unsupported_version, "classifier checkpoint version");
    std::vector<DenseLayer> layers;
    for (const auto& L : j.at("layers"))
      layers.push_back({L.at("in").get<std::size_t>(), L.at("out").get<std::size_t>(),
                        L.at("weights").get<std::vector<double>>(), L.at("bias").get<std::vector<double>>()});
    ClassifierCheckpoint ck{Mlp(std::move(layers)), j.at("n_actions").get<int>(), j.at("l").get<int>()};
    if (ck.model.input_size() != encoded_size(ck.n_actions, ck.l))
      fail(ErrorKind::parse_error, "classifier input size does not match (n, l)");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, std::string("classifier checkpoint: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::invalid_parameter) fail(ErrorKind::parse_error, e.what());
    throw;
  }
}

}  // namespace ami
