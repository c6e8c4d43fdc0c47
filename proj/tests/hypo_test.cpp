#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "ami/adv.hpp"
#include "ami/hypo.hpp"

using namespace ami;

namespace {

// Direct transcription of the score: half likelihood, half rank mass.
double oracle_score(std::size_t obs, const std::vector<double>& q) {
  double rank = 0.0;
  for (double v : q)
    if (v <= q[obs]) rank += v;
  return 0.5 * (q[obs] + rank);
}

std::vector<double> dist(const Pdt& model, const std::vector<Action>& server, std::size_t t) {
  const auto d = model.action_distribution(std::span<const Action>(server).first(t));
  return {d.begin(), d.end()};
}

// Exact two-sided p by enumerating every client action sequence.
double brute_force_p(const Pdt& model, const std::vector<Action>& server, const std::vector<Action>& client) {
  const std::size_t steps = server.size();
  const auto n = static_cast<std::size_t>(model.n_actions());
  std::vector<std::vector<double>> qs;
  for (std::size_t t = 0; t < steps; ++t) qs.push_back(dist(model, server, t));
  std::size_t outcomes = 1;
  for (std::size_t t = 0; t < steps; ++t) outcomes *= n;
  std::vector<double> prob(outcomes), z(outcomes);
  double mean = 0.0;
  for (std::size_t o = 0; o < outcomes; ++o) {
    std::size_t code = o;
    double p = 1.0, total = 0.0;
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t a = code % n;
      code /= n;
      p *= qs[t][a];
      total += oracle_score(a, qs[t]);
    }
    prob[o] = p;
    z[o] = total / static_cast<double>(steps);
    mean += p * z[o];
  }
  double observed = 0.0;
  for (std::size_t t = 0; t < steps; ++t) observed += oracle_score(client[t].index(), qs[t]);
  observed /= static_cast<double>(steps);
  const double d = std::abs(observed - mean);
  double p = 0.0;
  for (std::size_t o = 0; o < outcomes; ++o)
    if (std::abs(z[o] - mean) >= d - 1e-12) p += prob[o];
  return p;
}

InteractionHistory history_of(int n, const std::vector<Action>& s, const std::vector<Action>& c) {
  InteractionHistory h(n);
  for (std::size_t t = 0; t < s.size(); ++t) h.append(s[t], c[t]);
  return h;
}

}  // namespace

TEST(StepScore, WorkedExamples) {
  const std::vector<double> q{0.2, 0.5, 0.3};
  EXPECT_DOUBLE_EQ(step_score(Action(2), q), 0.75);
  EXPECT_DOUBLE_EQ(step_score(Action(3), q), 0.40);
  EXPECT_DOUBLE_EQ(step_score(Action(1), q), 0.5 * (0.2 + 0.2));
}

TEST(StepScore, UniformTies) {
  for (int n : {2, 3, 7, 10}) {
    const std::vector<double> q(static_cast<std::size_t>(n), 1.0 / n);
    for (int a = 1; a <= n; ++a) EXPECT_NEAR(step_score(Action(a), q), 0.5 * (1.0 / n + 1.0), 1e-15);
  }
}

TEST(StepScore, RangeAndErrors) {
  const std::vector<double> q{0.2, 0.5, 0.3};
  EXPECT_THROW(step_score(Action(4), q), Error);
  EXPECT_THROW(step_score(Action(0), q), Error);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(5);
    double total = 0.0;
    for (auto& x : v) total += x = rng.uniform();
    for (auto& x : v) x /= total;
    for (int a = 1; a <= 5; ++a) {
      const double s = step_score(Action(a), v);
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0);
      EXPECT_DOUBLE_EQ(s, oracle_score(static_cast<std::size_t>(a - 1), v));
    }
  }
}

TEST(TestStatistic, SingleStepAndDegenerate) {
  Rng g(2);
  const auto model = generate_random_pdt(3, 2, 0.5, g);
  const auto h0 = history_of(3, {Action(1)}, {Action(2)});
  EXPECT_DOUBLE_EQ(test_statistic(h0, model), step_score(Action(2), model.node_distribution(0)));

  const Pdt certain(2, 1, 1.0, NodeKind::literal, {1, 0, 0, 1, 1, 0});
  // Root says 1; after server action 1 says 2; after 2 says 1.
  const auto h = history_of(2, {Action(1), Action(2), Action(1)}, {Action(1), Action(2), Action(1)});
  EXPECT_DOUBLE_EQ(test_statistic(h, certain), 1.0);
}

TEST(TestStatistic, HandComputedThreeSteps) {
  // n=3, k=1 literal tree; l=2.
  const Pdt model(3, 1, 1.0, NodeKind::literal,
                  {0.2, 0.5, 0.3, 0.6, 0.3, 0.1, 1.0 / 3, 1.0 / 3, 1.0 / 3, 0.1, 0.1, 0.8});
  const auto h = history_of(3, {Action(1), Action(3), Action(2)}, {Action(2), Action(1), Action(3)});
  // t=0 root, obs 2: 0.75. t=1 after server 1: q=[0.6,0.3,0.1], obs 1: (0.6+1.0)/2 = 0.8.
  // t=2 after server 3: q=[0.1,0.1,0.8], obs 3: (0.8+1.0)/2 = 0.9.
  EXPECT_NEAR(test_statistic(h, model), (0.75 + 0.8 + 0.9) / 3.0, 1e-15);
}

TEST(NullSummary, DegenerateHasNoSpread) {
  const Pdt certain(2, 1, 1.0, NodeKind::literal, {1, 0, 0, 1, 1, 0});
  const std::vector<Action> server{Action(1), Action(2), Action(2)};
  Rng rng(3);
  const auto null = null_summary(server, certain, 50, rng);
  EXPECT_EQ(null.variance, 0.0);
  ASSERT_EQ(null.mc_samples.size(), 50u);
  for (double z : null.mc_samples) EXPECT_EQ(z, null.mc_samples.front());
  EXPECT_DOUBLE_EQ(null.mean, 1.0);
}

TEST(NullSummary, AnalyticMomentsTwoOutcomes) {
  // Every node [0.9, 0.1]; l=1.
  const Pdt model(2, 1, 1.0, NodeKind::literal, {0.9, 0.1, 0.9, 0.1, 0.9, 0.1});
  const std::vector<double> q{0.9, 0.1};
  const auto s = score_table(q);
  const auto m = score_moments(q, s);
  // Likelihood part 0.9*0.9 + 0.1*0.1 = 0.82, rank part 0.9*1.0 + 0.1*0.1 = 0.91.
  EXPECT_NEAR(m.mean, 0.5 * (0.82 + 0.91), 1e-15);
  const double var = 0.9 * std::pow(0.95 - m.mean, 2) + 0.1 * std::pow(0.1 - m.mean, 2);
  EXPECT_NEAR(m.variance, var, 1e-15);

  const std::vector<Action> server{Action(1), Action(2)};
  Rng rng(4);
  const auto null = null_summary(server, model, 10, rng);
  EXPECT_NEAR(null.mean, m.mean, 1e-15);
  EXPECT_NEAR(null.variance, 2.0 * var / 4.0, 1e-15);
}

TEST(NullSummary, MonteCarloMeanConverges) {
  Rng g(5);
  const auto model = generate_random_pdt(4, 3, 0.5, g);
  std::vector<Action> server;
  for (int t = 0; t < 60; ++t) server.push_back(Action::from_index(g.below(4)));
  for (int M : {100, 1000, 10000}) {
    Rng rng(static_cast<std::uint64_t>(M));
    const auto null = null_summary(server, model, M, rng);
    double mc = 0.0;
    for (double z : null.mc_samples) mc += z;
    mc /= M;
    EXPECT_LE(std::abs(mc - null.mean), 3.0 * std::sqrt(null.variance / M));
  }
  Rng rng(1);
  EXPECT_THROW(null_summary(server, model, 0, rng), Error);
}

TEST(PValue, ZeroExtremityGivesOne) {
  NullSummary null{0.5, 0.01, {0.4, 0.6, 0.5, 0.3}};
  EXPECT_DOUBLE_EQ(p_value_from(0.5, null).value, 1.0);
  EXPECT_DOUBLE_EQ(p_value_from(0.9, null).value, 1.0 / 5.0);
  EXPECT_DOUBLE_EQ(p_value_from(0.61, null).value, 2.0 / 5.0);
}

TEST(PValue, MonotoneInExtremity) {
  Rng rng(6);
  NullSummary null{0.5, 0.0, {}};
  for (int m = 0; m < 999; ++m) null.mc_samples.push_back(0.5 + 0.1 * (rng.uniform() - 0.5));
  double previous = 1.0;
  for (double d = 0.0; d <= 0.06; d += 0.002) {
    const double up = p_value_from(0.5 + d, null).value;
    const double down = p_value_from(0.5 - d, null).value;
    EXPECT_EQ(up, down);
    EXPECT_LE(up, previous);
    EXPECT_GT(up, 0.0);
    previous = up;
  }
}

TEST(PValue, MatchesBruteForceOnMicroInstances) {
  constexpr int M = 20000;
  const double tol = 2.0 / std::sqrt(static_cast<double>(M));
  // l=0, n=2, q=[0.9,0.1], observed action 2.
  {
    const Pdt model(2, 1, 1.0, NodeKind::literal, {0.9, 0.1, 0.5, 0.5, 0.5, 0.5});
    const std::vector<Action> s{Action(1)}, c{Action(2)};
    const double exact = brute_force_p(model, s, c);
    EXPECT_NEAR(exact, 0.1, 1e-12);  // only outcome 2 is as far from the mean
    Rng rng(7);
    EXPECT_NEAR(p_value(history_of(2, s, c), model, M, rng).value, exact, tol);
  }
  // l=1 and l=2 on random trees, every client sequence.
  Rng g(8);
  for (int trial = 0; trial < 4; ++trial) {
    const auto model = generate_random_pdt(3, 2, 0.6, g);
    for (int steps : {2, 3}) {
      std::vector<Action> s;
      for (int t = 0; t < steps; ++t) s.push_back(Action::from_index(g.below(3)));
      std::size_t combos = 1;
      for (int t = 0; t < steps; ++t) combos *= 3;
      for (std::size_t code = 0; code < combos; ++code) {
        std::vector<Action> c;
        std::size_t x = code;
        for (int t = 0; t < steps; ++t, x /= 3) c.push_back(Action::from_index(x % 3));
        Rng rng(derive_seed(trial, code));
        const double mc = p_value(history_of(3, s, c), model, M, rng).value;
        EXPECT_NEAR(mc, brute_force_p(model, s, c), tol) << "trial " << trial << " code " << code;
      }
    }
  }
}

TEST(PValue, UniformUnderTheNull) {
  Rng g(9);
  const PdtAgent server(std::make_shared<const Pdt>(generate_random_pdt(5, 3, 1.0, g)));
  const auto legit = std::make_shared<const Pdt>(generate_random_pdt(5, 3, 0.3, g));
  const PdtAgent client(legit);
  std::vector<double> ps;
  int accepted = 0;
  for (int trial = 0; trial < 500; ++trial) {
    Rng rs(derive_seed(1, trial)), rc(derive_seed(2, trial)), rt(derive_seed(3, trial));
    const auto h = run_interaction(server, client, 60, rs, rc);
    const auto v = hypothesis_test(h, *legit, 0.1, 500, rt);
    ps.push_back(v.score);
    accepted += v.accept;
  }
  std::sort(ps.begin(), ps.end());
  double sup = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double lo = static_cast<double>(i) / ps.size(), hi = static_cast<double>(i + 1) / ps.size();
    sup = std::max({sup, std::abs(ps[i] - lo), std::abs(ps[i] - hi)});
  }
  EXPECT_LE(sup, 0.08);
  EXPECT_NEAR(accepted / 500.0, 0.9, 0.04);
}

TEST(PValue, DeterministicGivenSeed) {
  Rng g(10);
  const auto model = generate_random_pdt(3, 2, 0.5, g);
  const auto h = history_of(3, {Action(1), Action(2), Action(3)}, {Action(3), Action(3), Action(1)});
  Rng a(99), b(99);
  EXPECT_EQ(p_value(h, model, 300, a).value, p_value(h, model, 300, b).value);
}

TEST(HypothesisTest, DecisionRule) {
  EXPECT_TRUE(decide({0.5}, 0.1).accept);
  EXPECT_FALSE(decide({0.05}, 0.1).accept);
  EXPECT_TRUE(decide({0.1}, 0.1).accept);
  EXPECT_EQ(decide({0.5}, 0.1).score, 0.5);
  EXPECT_THROW(decide({0.5}, 0.0), Error);
  EXPECT_THROW(decide({0.5}, 1.0), Error);
}

TEST(HypothesisTest, ReplayPullsStatisticBelowTheNullMean) {
  Rng g(11);
  const PdtAgent server(std::make_shared<const Pdt>(generate_random_pdt(10, 5, 1.0, g)));
  const auto legit = std::make_shared<const Pdt>(generate_random_pdt(10, 5, 0.1, g));
  const PdtAgent user(legit);
  for (int l : {50, 200}) {
    double gap = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
      Rng rs(derive_seed(4, trial)), rc(derive_seed(5, trial));
      const auto recorded = run_interaction(server, user, l, rs, rc);
      const auto replay = make_replay_adversary(recorded);
      Rng ls(derive_seed(6, trial)), lc(derive_seed(7, trial));
      const auto live = run_interaction(server, *replay, l, ls, lc);
      const NullModel null(*legit, live.server_actions());
      gap += null.statistic(live.client_actions()) - null.mean();
    }
    EXPECT_LT(gap / 40.0, 0.0) << "l=" << l;
  }
}

TEST(IncrementalP, BoundaryCases) {
  EXPECT_DOUBLE_EQ(normal_p(0.4, 0.4, 0.01), 1.0);
  EXPECT_NEAR(normal_p(0.4 + 3 * 0.1, 0.4, 0.01), 0.0027, 1e-4);
  EXPECT_NEAR(normal_p(0.4 - 3 * 0.1, 0.4, 0.01), 0.0027, 1e-4);
  EXPECT_DOUBLE_EQ(normal_p(0.4, 0.4, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(normal_p(0.5, 0.4, 0.0), 0.0);
}

TEST(IncrementalP, StreamingMatchesBatchMoments) {
  Rng g(12);
  const auto model = generate_random_pdt(4, 3, 0.4, g);
  InteractionHistory h(4);
  for (int t = 0; t < 40; ++t) h.append(Action::from_index(g.below(4)), Action::from_index(g.below(4)));
  const NullModel null(model, h.server_actions());
  const double z = null.statistic(h.client_actions());
  EXPECT_NEAR(incremental_p(h, model), normal_p(z, null.mean(), null.variance()), 1e-12);
  InteractionHistory empty(4);
  EXPECT_THROW(incremental_p(empty, model), Error);
}

TEST(IncrementalP, AgreesWithMonteCarloForLongPrefixes) {
  Rng g(13);
  const PdtAgent server(std::make_shared<const Pdt>(generate_random_pdt(10, 5, 1.0, g)));
  const auto legit = std::make_shared<const Pdt>(generate_random_pdt(10, 5, 0.1, g));
  for (int trial = 0; trial < 20; ++trial) {
    Rng ra(derive_seed(8, trial));
    const auto adversary = make_random_adversary(10, 5, 0.1, ra);
    Rng rs(derive_seed(9, trial)), rc(derive_seed(10, trial)), rt(derive_seed(11, trial));
    const auto h = run_interaction(server, *adversary, 49 + trial, rs, rc);
    EXPECT_NEAR(incremental_p(h, *legit), p_value(h, *legit, 2000, rt).value, 0.05);
  }
  // Legitimate transcripts cover the bulk of the distribution too.
  const PdtAgent user(legit);
  for (int trial = 0; trial < 20; ++trial) {
    Rng rs(derive_seed(12, trial)), rc(derive_seed(13, trial)), rt(derive_seed(14, trial));
    const auto h = run_interaction(server, user, 60, rs, rc);
    EXPECT_NEAR(incremental_p(h, *legit), p_value(h, *legit, 2000, rt).value, 0.05);
  }
}

TEST(Verdict, JsonRecord) {
  const auto j = verdict_to_json({0.42, 0.1, true}, 200, 1000, 7);
  EXPECT_EQ(j.at("p").get<double>(), 0.42);
  EXPECT_EQ(j.at("alpha").get<double>(), 0.1);
  EXPECT_TRUE(j.at("accept").get<bool>());
  EXPECT_EQ(j.at("l").get<int>(), 200);
  EXPECT_EQ(j.at("M").get<int>(), 1000);
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 7u);
}
