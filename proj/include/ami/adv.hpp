#pragma once

// Adversarial clients: unrelated random trees, replays of recorded legitimate
// sessions, and maximum-likelihood copies fitted from observed sessions.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ami/engine.hpp"
#include "ami/error.hpp"
#include "ami/pdt.hpp"
#include "ami/rng.hpp"

namespace ami {

/// Emits the recorded client action for step t, whatever the live server does.
class ReplayAgent final : public Agent {
 public:
  ReplayAgent(int n_actions, std::vector<Action> recorded) : n_(n_actions), recorded_(std::move(recorded)) {}

  int n_actions() const override { return n_; }
  Action next_action(const AgentView& view, Rng&) const override {
    const std::size_t t = view.own.size();
    if (t >= recorded_.size())
      fail(ErrorKind::exhausted_recording, "replay recording holds " + std::to_string(recorded_.size()) + " steps");
    return recorded_[t];
  }
  std::size_t length() const { return recorded_.size(); }

 private:
  int n_;
  std::vector<Action> recorded_;
};

inline std::shared_ptr<PdtAgent> make_random_adversary(int n, int k, double temperature, Rng& rng) {
  return std::make_shared<PdtAgent>(std::make_shared<const Pdt>(generate_random_pdt(n, k, temperature, rng)));
}

inline std::shared_ptr<ReplayAgent> make_replay_adversary(const InteractionHistory& recorded) {
  require(!recorded.empty(), "replay recording is empty");
  const auto c = recorded.client_actions();
  return std::make_shared<ReplayAgent>(recorded.n_actions(), std::vector<Action>(c.begin(), c.end()));
}

inline std::shared_ptr<PdtAgent> make_mle_adversary(std::span<const InteractionHistory> observed, int n, int k) {
  std::vector<TranscriptView> views;
  views.reserve(observed.size());
  for (const auto& h : observed) views.push_back(h.view());
  return std::make_shared<PdtAgent>(std::make_shared<const Pdt>(fit_mle_pdt(n, k, views, Role::client)));
}

enum class AdversaryKind { random, replay, mle };

inline const char* to_string(AdversaryKind kind) {
  switch (kind) {
    case AdversaryKind::random: return "random";
    case AdversaryKind::replay: return "replay";
    case AdversaryKind::mle: return "mle";
  }
  return "unknown";
}

inline AdversaryKind adversary_kind_from_string(const std::string& s) {
  if (s == "random") return AdversaryKind::random;
  if (s == "replay") return AdversaryKind::replay;
  if (s == "mle") return AdversaryKind::mle;
  fail(ErrorKind::parse_error, "unknown adversary kind '" + s + "'");
}

/// Member i of a population is built from seed `seed_begin + i`, so
/// populations with disjoint seed ranges share no member.
struct PopulationSpec {
  AdversaryKind kind = AdversaryKind::random;
  int count = 100;
  int n_actions = 10;
  int depth = 5;
  double temperature = 0.1;
  std::uint64_t seed_begin = 0;
  // Replay and MLE members record legitimate sessions of this length.
  int l = 200;
  // Legitimate sessions observed by each MLE member.
  int observations = 100;
};

/// The legitimate setting that replay and MLE adversaries eavesdrop on.
struct LegitContext {
  const Agent* server = nullptr;
  std::shared_ptr<const Pdt> legit;
};

inline nlohmann::json population_to_json(const PopulationSpec& s) {
  return {{"kind", to_string(s.kind)}, {"count", s.count}, {"n", s.n_actions}, {"k", s.depth},
          {"tau", s.temperature}, {"seed_begin", s.seed_begin}, {"l", s.l}, {"observations", s.observations}};
}

inline PopulationSpec population_from_json(const nlohmann::json& j) {
  PopulationSpec s;
  try {
    s.kind = adversary_kind_from_string(j.at("kind").get<std::string>());
    s.count = j.at("count").get<int>();
    s.n_actions = j.at("n").get<int>();
    s.depth = j.at("k").get<int>();
    s.temperature = j.at("tau").get<double>();
    s.seed_begin = j.at("seed_begin").get<std::uint64_t>();
    s.l = j.value("l", s.l);
    s.observations = j.value("observations", s.observations);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, std::string("population spec: ") + e.what());
  }
  return s;
}

/// A recorded legitimate session between `ctx.server` and the legitimate model.
inline InteractionHistory record_legit_session(const LegitContext& ctx, int l, Rng& rng) {
  require(ctx.server != nullptr && ctx.legit != nullptr, "legitimate context is incomplete");
  const PdtAgent legit(ctx.legit);
  Rng rng_s = rng.split(1);
  Rng rng_c = rng.split(2);
  return run_interaction(*ctx.server, legit, l, rng_s, rng_c);
}

inline std::shared_ptr<const Agent> make_population_member(const PopulationSpec& spec, std::size_t i,
                                                           const LegitContext& ctx = {}) {
  Rng rng(derive_seed(spec.seed_begin + i, 0xad5));
  switch (spec.kind) {
    case AdversaryKind::random:
      return make_random_adversary(spec.n_actions, spec.depth, spec.temperature, rng);
    case AdversaryKind::replay:
      return make_replay_adversary(record_legit_session(ctx, spec.l, rng));
    case AdversaryKind::mle: {
      require(spec.observations >= 1, "MLE adversary needs at least one observation");
      std::vector<InteractionHistory> observed;
      observed.reserve(static_cast<std::size_t>(spec.observations));
      for (int j = 0; j < spec.observations; ++j) {
        Rng session = rng.split(static_cast<std::uint64_t>(j));
        observed.push_back(record_legit_session(ctx, spec.l, session));
      }
      return make_mle_adversary(observed, spec.n_actions, spec.depth);
    }
  }
  fail(ErrorKind::invalid_parameter, "unknown adversary kind");
}

inline std::vector<std::shared_ptr<const Agent>> sample_population(const PopulationSpec& spec,
                                                                  const LegitContext& ctx = {}) {
  require(spec.count >= 1, "population count must be positive");
  std::vector<std::shared_ptr<const Agent>> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) out.push_back(make_population_member(spec, static_cast<std::size_t>(i), ctx));
  return out;
}

}  // namespace ami
