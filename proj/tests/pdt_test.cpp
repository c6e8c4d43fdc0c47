#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include <gtest/gtest.h>

#include "ami/pdt.hpp"
#include "ami/pdt_io.hpp"

using namespace ami;

namespace {

std::vector<Action> acts(std::initializer_list<int> v) {
  std::vector<Action> out;
  for (int a : v) out.emplace_back(a);
  return out;
}

// Breadth-first numbering by explicit queue, independent of the closed form.
std::map<std::vector<int>, std::size_t> bfs_indices(int n, int k) {
  std::map<std::vector<int>, std::size_t> out;
  std::deque<std::vector<int>> queue{{}};
  std::size_t next = 0;
  while (!queue.empty()) {
    auto path = queue.front();
    queue.pop_front();
    out[path] = next++;
    if (static_cast<int>(path.size()) == k) continue;
    for (int a = 1; a <= n; ++a) {
      auto child = path;
      child.push_back(a);
      queue.push_back(child);
    }
  }
  return out;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ami_pdt_test_" + name);
}

}  // namespace

TEST(Boltzmann, EqualLogitsAreUniform) {
  const std::vector<double> logits{0.5, 0.5, 0.5};
  for (double p : boltzmann(logits, 0.1)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(Boltzmann, HighTemperatureApproachesUniform) {
  const std::vector<double> logits{0.0, 1.0};
  for (double p : boltzmann(logits, 1000.0)) EXPECT_NEAR(p, 0.5, 1e-3);
}

TEST(Boltzmann, LowTemperatureClosedForm) {
  const std::vector<double> logits{0.0, 1.0};
  const auto p = boltzmann(logits, 0.1);
  const double lo = 1.0 / (1.0 + std::exp(10.0));
  EXPECT_NEAR(p[0], lo, 1e-15);
  EXPECT_NEAR(p[0], 4.5398e-5, 1e-8);
  EXPECT_NEAR(p[1], std::exp(10.0) / (1.0 + std::exp(10.0)), 1e-15);
  // 0.99995 is the five-digit rendering of 0.9999546.
  EXPECT_NEAR(p[1], 0.99995, 5e-6);
}

TEST(Boltzmann, RejectsBadInput) {
  const std::vector<double> ok{0.1, 0.2};
  EXPECT_THROW(boltzmann(ok, 0.0), Error);
  EXPECT_THROW(boltzmann(ok, -1.0), Error);
  const std::vector<double> nan{0.1, std::nan("")};
  EXPECT_THROW(boltzmann(nan, 1.0), Error);
  const std::vector<double> inf{0.1, INFINITY};
  EXPECT_THROW(boltzmann(inf, 1.0), Error);
  EXPECT_THROW(boltzmann(std::vector<double>{}, 1.0), Error);
  try {
    boltzmann(ok, 0.0);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_parameter);
  }
}

TEST(Boltzmann, SumsToOneAndPositiveOnRandomNodes) {
  Rng rng(11);
  const auto tree = generate_random_pdt(10, 3, 0.1, rng);
  for (std::size_t node = 0; node < tree.node_count(); ++node) {
    const auto d = tree.node_distribution(node);
    EXPECT_NEAR(std::accumulate(d.begin(), d.end(), 0.0), 1.0, 1e-12);
    for (double p : d) EXPECT_GT(p, 0.0);
  }
}

TEST(PdtShape, NodeCounts) {
  EXPECT_EQ(pdt_node_count(3, 5), 364u);
  EXPECT_EQ(pdt_node_count(10, 5), 111111u);
  EXPECT_EQ(pdt_node_count(2, 1), 3u);
  Rng rng(1);
  EXPECT_EQ(generate_random_pdt(3, 5, 1.0, rng).node_count(), 364u);
  EXPECT_EQ(generate_random_pdt(10, 5, 1.0, rng).node_count(), 111111u);
}

TEST(PdtShape, InvalidDimensions) {
  Rng rng(1);
  EXPECT_THROW(generate_random_pdt(1, 3, 1.0, rng), Error);
  EXPECT_THROW(generate_random_pdt(3, 0, 1.0, rng), Error);
  EXPECT_THROW(generate_random_pdt(3, 2, 0.0, rng), Error);
  EXPECT_THROW(Pdt(3, 1, 1.0, NodeKind::logit, std::vector<double>(11, 0.0)), Error);
}

TEST(PdtShape, SameSeedSameTree) {
  Rng a(5), b(5), c(6);
  const auto t1 = generate_random_pdt(3, 4, 0.5, a);
  const auto t2 = generate_random_pdt(3, 4, 0.5, b);
  const auto t3 = generate_random_pdt(3, 4, 0.5, c);
  EXPECT_TRUE(t1 == t2);
  EXPECT_FALSE(t1 == t3);
  for (double v : t1.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Traverse, EmptyContextIsRoot) {
  Rng rng(2);
  const auto tree = generate_random_pdt(4, 3, 1.0, rng);
  EXPECT_EQ(tree.traverse({}), 0u);
}

TEST(Traverse, DepthTwoNodeOnPath12) {
  Rng rng(2);
  const auto tree = generate_random_pdt(3, 5, 1.0, rng);
  EXPECT_EQ(tree.traverse(acts({1, 2})), 5u);
}

TEST(Traverse, AppendixTreePath232) {
  Rng rng(2);
  const auto tree = generate_random_pdt(3, 3, 1.0, rng);
  // Middle branch of the root, then branch 3, then branch 2: a leaf.
  const auto idx = bfs_indices(3, 3);
  EXPECT_EQ(tree.traverse(acts({2, 3, 2})), idx.at({2, 3, 2}));
  EXPECT_EQ(tree.traverse(acts({2, 3, 2})), 29u);
  EXPECT_GE(tree.traverse(acts({2, 3, 2})), pdt_node_count(3, 2));
}

TEST(Traverse, MatchesBreadthFirstEnumeration) {
  for (auto [n, k] : {std::pair{2, 4}, {3, 3}, {4, 2}}) {
    Rng rng(3);
    const auto tree = generate_random_pdt(n, k, 1.0, rng);
    const auto idx = bfs_indices(n, k);
    ASSERT_EQ(idx.size(), tree.node_count());
    for (const auto& [path, expected] : idx) {
      std::vector<Action> context;
      for (int a : path) context.emplace_back(a);
      EXPECT_EQ(tree.traverse(context), expected);
    }
  }
}

TEST(Traverse, RejectsLongOrInvalidContext) {
  Rng rng(2);
  const auto tree = generate_random_pdt(3, 2, 1.0, rng);
  EXPECT_THROW(tree.traverse(acts({1, 2, 3})), Error);
  EXPECT_THROW(tree.traverse(acts({4})), Error);
  EXPECT_THROW(tree.traverse(acts({0})), Error);
}

TEST(ActionDistribution, EmptyHistoryIsRoot) {
  Rng rng(4);
  const auto tree = generate_random_pdt(3, 2, 0.3, rng);
  const auto d = tree.action_distribution({});
  const auto root = boltzmann(tree.node_values(0), 0.3);
  for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(d[a], root[a]);
}

TEST(ActionDistribution, SlidingWindow) {
  Rng rng(4);
  const auto tree = generate_random_pdt(3, 5, 0.3, rng);
  const auto history = acts({3, 1, 2, 2, 3, 1, 2});
  const std::span<const Action> h(history);
  const auto full = tree.action_distribution(h);
  const auto last5 = tree.action_distribution(h.last(5));
  for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(full[a], last5[a]);
  // Arbitrary prefixes do not matter.
  Rng pre(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Action> longer;
    for (int i = 0; i < trial; ++i) longer.push_back(Action::from_index(pre.below(3)));
    longer.insert(longer.end(), history.end() - 5, history.end());
    const auto d = tree.action_distribution(longer);
    for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(d[a], last5[a]);
  }
}

TEST(ActionDistribution, ToyTreeBranchTwo) {
  // n=2, k=1: root, child via 1, child via 2.
  const Pdt tree(2, 1, 0.5, NodeKind::logit, {0.1, 0.9, 0.3, 0.2, 0.0, 1.0});
  const auto d = tree.action_distribution(acts({2}));
  const double e = std::exp(2.0);
  EXPECT_NEAR(d[0], 1.0 / (1.0 + e), 1e-15);
  EXPECT_NEAR(d[1], e / (1.0 + e), 1e-15);
}

TEST(SampleAction, DegenerateDistribution) {
  const Pdt tree(3, 1, 1.0, NodeKind::literal, {1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(tree.sample_action({}, rng).value, 1);
  const auto ctx = acts({3});
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(tree.sample_action(ctx, rng).value, 3);
}

TEST(SampleAction, ReproducibleAndFrequenciesMatch) {
  Rng g(8);
  const auto tree = generate_random_pdt(4, 2, 0.5, g);
  const auto ctx = acts({2, 4});
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(tree.sample_action(ctx, a), tree.sample_action(ctx, b));
  Rng rng(77);
  std::vector<int> counts(4, 0);
  constexpr int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[tree.sample_action(ctx, rng).index()];
  const auto d = tree.action_distribution(ctx);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(counts[i] / static_cast<double>(draws), d[i], 0.01);
}

TEST(FitMle, CountsAndFallback) {
  // n=3, k=1. Root sees client actions 2 x5; node after server action 1 sees
  // counts [1,2,1]; the other children are never visited.
  const auto server = acts({1, 3});
  const auto first = acts({2});
  const auto c1 = acts({2, 1}), c2 = acts({2, 2}), c3 = acts({2, 3});
  std::vector<TranscriptView> views;
  for (int i = 0; i < 5; ++i) views.push_back({std::span(server).first(1), first});
  for (const auto* c : {&c1, &c2, &c2, &c3}) views.push_back({server, *c});
  const auto fit = fit_mle_pdt(3, 1, views, Role::client);
  EXPECT_EQ(fit.kind(), NodeKind::literal);
  const auto root = fit.node_distribution(0);
  EXPECT_DOUBLE_EQ(root[0], 0.0);
  EXPECT_DOUBLE_EQ(root[1], 1.0);
  EXPECT_DOUBLE_EQ(root[2], 0.0);
  const auto after1 = fit.node_distribution(1);
  EXPECT_DOUBLE_EQ(after1[0], 0.25);
  EXPECT_DOUBLE_EQ(after1[1], 0.5);
  EXPECT_DOUBLE_EQ(after1[2], 0.25);
  for (std::size_t node : {2u, 3u})
    for (double p : fit.node_distribution(node)) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
  EXPECT_THROW(fit_mle_pdt(3, 1, std::span<const TranscriptView>{}, Role::client), Error);
}

TEST(FitMle, ConvergesWithManyVisits) {
  Rng g(21);
  const auto truth = generate_random_pdt(2, 1, 0.5, g);
  Rng rs(1), rc(2);
  // Many short sessions so the root (visited only at t=0) collects enough counts.
  std::vector<std::vector<Action>> servers(3000), clients(3000);
  std::vector<TranscriptView> views;
  for (std::size_t i = 0; i < servers.size(); ++i) {
    for (int t = 0; t < 4; ++t) {
      clients[i].push_back(truth.sample_action(std::span<const Action>(servers[i]), rc));
      servers[i].push_back(Action::from_index(rs.below(2)));
    }
    views.push_back({servers[i], clients[i]});
  }
  const auto fit = fit_mle_pdt(2, 1, views, Role::client);
  for (std::size_t node = 0; node < truth.node_count(); ++node) {
    const auto a = fit.node_distribution(node);
    const auto b = truth.node_distribution(node);
    double tv = 0.0;
    for (std::size_t i = 0; i < 2; ++i) tv += 0.5 * std::abs(a[i] - b[i]);
    EXPECT_LE(tv, 0.05) << "node " << node;
  }
}

TEST(PdtIo, RoundTripIsBitExact) {
  Rng g(3);
  const auto tree = generate_random_pdt(3, 3, 0.1, g);
  const auto path = temp_file("roundtrip.json");
  save_pdt(tree, path);
  const auto back = load_pdt(path);
  EXPECT_TRUE(back == tree);
  for (std::size_t node = 0; node < tree.node_count(); ++node)
    for (std::size_t a = 0; a < 3; ++a) EXPECT_EQ(back.node_distribution(node)[a], tree.node_distribution(node)[a]);
  std::filesystem::remove(path);
}

TEST(PdtIo, LiteralRoundTrip) {
  const Pdt tree(2, 1, 1.0, NodeKind::literal, {0.25, 0.75, 1.0, 0.0, 0.5, 0.5});
  EXPECT_TRUE(pdt_from_json(pdt_to_json(tree)) == tree);
}

TEST(PdtIo, RejectsMalformedFiles) {
  Rng g(3);
  const auto good = pdt_to_json(generate_random_pdt(3, 2, 0.5, g));

  auto wrong_count = good;
  wrong_count["nodes"].erase(wrong_count["nodes"].size() - 1);
  try {
    pdt_from_json(wrong_count);
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse_error);
    EXPECT_NE(std::string(e.what()).find("nodes"), std::string::npos);
  }

  auto zero_tau = good;
  zero_tau["temperature"] = 0.0;
  EXPECT_THROW(pdt_from_json(zero_tau), Error);

  auto version = good;
  version["version"] = 99;
  try {
    pdt_from_json(version);
    FAIL() << "expected a version error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unsupported_version);
  }

  auto missing = good;
  missing.erase("depth");
  try {
    pdt_from_json(missing);
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse_error);
    EXPECT_NE(std::string(e.what()).find("depth"), std::string::npos);
  }

  const auto path = temp_file("garbage.json");
  std::ofstream(path) << "{ not json";
  EXPECT_THROW(load_pdt(path), Error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_pdt(temp_file("does_not_exist.json")), Error);
}
