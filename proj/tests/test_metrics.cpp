#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ctncf/ctncf.hpp"

using namespace ctncf;
using Ids = std::vector<std::uint32_t>;

namespace {

double recall_oracle(const Ids& ranking, const Ids& relevant, std::size_t n) {
  std::set<std::uint32_t> top(ranking.begin(), ranking.begin() + std::min(n, ranking.size()));
  std::set<std::uint32_t> rel(relevant.begin(), relevant.end());
  std::vector<std::uint32_t> both;
  std::set_intersection(top.begin(), top.end(), rel.begin(), rel.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(rel.size());
}

double ndcg_oracle(const Ids& ranking, const Ids& relevant, std::size_t n) {
  std::set<std::uint32_t> rel(relevant.begin(), relevant.end());
  double dcg = 0.0, idcg = 0.0;
  for (std::size_t r = 1; r <= std::min(n, ranking.size()); ++r)
    if (rel.count(ranking[r - 1])) dcg += std::log(2.0) / std::log(r + 1.0);
  for (std::size_t r = 1; r <= std::min(n, rel.size()); ++r) idcg += std::log(2.0) / std::log(r + 1.0);
  return dcg / idcg;
}

// Scores are looked up from a fixed per-(user, item) table.
class TableModel final : public Model {
 public:
  TableModel(std::size_t users, std::size_t items, std::function<double(std::uint32_t, std::uint32_t)> f)
      : Model(HyperParams{}, users, items), f_(std::move(f)) {}
  ModelKind kind() const override { return ModelKind::popularity; }
  bool trainable() const override { return false; }
  std::unique_ptr<Model> clone() const override { return std::make_unique<TableModel>(*this); }
  Var logits(Tape&, std::span<const std::uint32_t>, std::span<const std::uint32_t>) const override {
    throw std::logic_error("no logits");
  }
  std::vector<double> score(std::span<const std::uint32_t> users,
                            std::span<const std::uint32_t> items) const override {
    std::vector<double> out;
    for (std::size_t k = 0; k < users.size(); ++k) out.push_back(f_(users[k], items[k]));
    return out;
  }
  std::vector<ParamRef> parameters() override { return {}; }

 private:
  std::function<double(std::uint32_t, std::uint32_t)> f_;
};

SplitDataset random_split(std::size_t users, std::size_t items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ImplicitFeedback fb;
  fb.num_users = users;
  fb.num_items = items;
  fb.items_by_user.resize(users);
  std::uniform_int_distribution<std::size_t> count(3, 30);
  for (auto& row : fb.items_by_user) {
    std::set<std::uint32_t> chosen;
    const std::size_t n = count(rng);
    while (chosen.size() < n) chosen.insert(static_cast<std::uint32_t>(rng() % items));
    row.assign(chosen.begin(), chosen.end());
  }
  return split_721(fb, seed);
}

std::uint64_t mix(std::uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  return x;
}

}  // namespace

TEST(RankItems, Examples) {
  const double scores[] = {0.9, 0.1, 0.5};
  const Ids items = {10, 11, 12};
  EXPECT_EQ(rank_items(scores, items), (Ids{10, 12, 11}));
  const double flat[] = {0.3, 0.3, 0.3, 0.3};
  EXPECT_EQ(rank_items(flat, Ids{7, 2, 9, 4}), (Ids{2, 4, 7, 9}));
  EXPECT_EQ(rank_items(scores, items, 2), (Ids{10, 12}));
  EXPECT_THROW(rank_items({}, {}), std::invalid_argument);
}

TEST(RankItems, MatchesSortOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 60;
    Ids items(n);
    std::iota(items.begin(), items.end(), 0u);
    std::shuffle(items.begin(), items.end(), rng);
    std::vector<double> scores(n);
    for (auto& s : scores) s = static_cast<double>(rng() % 8);  // plenty of ties
    std::vector<std::pair<double, std::uint32_t>> pairs;
    for (std::size_t k = 0; k < n; ++k) pairs.push_back({-scores[k], items[k]});
    std::sort(pairs.begin(), pairs.end());
    Ids oracle;
    for (auto& p : pairs) oracle.push_back(p.second);
    EXPECT_EQ(rank_items(scores, items), oracle);
    const std::size_t top = 1 + rng() % n;
    EXPECT_EQ(rank_items(scores, items, top), Ids(oracle.begin(), oracle.begin() + top));
  }
}

TEST(Recall, Examples) {
  EXPECT_EQ(recall_at_n(Ids{1, 2, 3}, Ids{2, 3}, 3), 1.0);
  EXPECT_EQ(recall_at_n(Ids{1, 9, 3}, Ids{1, 2}, 3), 0.5);
  EXPECT_THROW(recall_at_n(Ids{1}, Ids{}, 3), std::invalid_argument);
  EXPECT_THROW(recall_at_n(Ids{1}, Ids{1}, 0), std::invalid_argument);
}

TEST(Ndcg, Examples) {
  EXPECT_EQ(ndcg_at_n(Ids{4, 1, 2}, Ids{4}, 10), 1.0);
  EXPECT_NEAR(ndcg_at_n(Ids{1, 4, 2}, Ids{4}, 10), 1.0 / std::log2(3.0), 1e-15);
  EXPECT_NEAR(ndcg_at_n(Ids{1, 4, 2}, Ids{4}, 10), 0.63093, 5e-6);
  EXPECT_EQ(ndcg_at_n(Ids{1, 2, 3}, Ids{4}, 3), 0.0);
}

TEST(Metrics, MatchBruteForceOnRandomInstances) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t items = 5 + rng() % 80;
    Ids ranking(items);
    std::iota(ranking.begin(), ranking.end(), 0u);
    std::shuffle(ranking.begin(), ranking.end(), rng);
    std::set<std::uint32_t> rel;
    const std::size_t nrel = 1 + rng() % std::min<std::size_t>(items, 25);
    while (rel.size() < nrel) rel.insert(static_cast<std::uint32_t>(rng() % items));
    const Ids relevant(rel.begin(), rel.end());
    const std::size_t n = 1 + rng() % 30;
    const double r = recall_at_n(ranking, relevant, n), g = ndcg_at_n(ranking, relevant, n);
    ASSERT_LE(std::abs(r - recall_oracle(ranking, relevant, n)), 1e-12);
    ASSERT_LE(std::abs(g - ndcg_oracle(ranking, relevant, n)), 1e-12);
    ASSERT_GE(r, 0.0);
    ASSERT_LE(r, 1.0);
    ASSERT_GE(g, 0.0);
    ASSERT_LE(g, 1.0 + 1e-15);
    ASSERT_LE(recall_at_n(ranking, relevant, 5), recall_at_n(ranking, relevant, 10));
    ASSERT_LE(recall_at_n(ranking, relevant, 10), recall_at_n(ranking, relevant, 20));
    // NDCG is exactly 1 iff the first min(n, |rel|) positions are all hits.
    bool all_hits = true;
    for (std::size_t k = 0; k < std::min(n, relevant.size()); ++k) all_hits &= rel.count(ranking[k]) > 0;
    ASSERT_EQ(g == 1.0, all_hits);
  }
}

TEST(CandidateMode, Parse) {
  EXPECT_EQ(parse_candidate_mode("full"), CandidateMode::full());
  EXPECT_EQ(parse_candidate_mode("sampled:100"), CandidateMode::sampled_with(100));
  EXPECT_EQ(to_string(CandidateMode::sampled_with(7)), "sampled:7");
  for (const char* bad : {"sampled:", "sampled:0", "sampled:x", "all", "sampled:5x"})
    EXPECT_THROW(parse_candidate_mode(bad), std::invalid_argument) << bad;
}

TEST(Evaluate, PerfectOracleModel) {
  const auto split = random_split(200, 150, 3);
  TableModel perfect(200, 150, [&](std::uint32_t u, std::uint32_t i) {
    return std::binary_search(split.test[u].begin(), split.test[u].end(), i) ? 1.0 : 0.0;
  });
  const auto report = evaluate(perfect, split);
  for (const auto& m : report.metrics) {
    double expect = 0.0;
    std::size_t users = 0;
    bool all_fit = true;
    for (std::uint32_t u = 0; u < 200; ++u) {
      if (split.test[u].empty()) continue;
      ++users;
      expect += std::min(1.0, static_cast<double>(m.k) / split.test[u].size());
      all_fit &= split.test[u].size() <= m.k;
    }
    EXPECT_NEAR(m.recall, expect / users, 1e-12);
    if (all_fit) {
      EXPECT_DOUBLE_EQ(m.ndcg, 1.0);
    }
  }
  EXPECT_EQ(report.users_evaluated + report.users_skipped, 200u);
}

TEST(Evaluate, RandomScorerNearAnalyticExpectation) {
  // 1000 items, one test item per user.
  const std::size_t users = 3000, items = 1000;
  SplitDataset s;
  s.num_users = users;
  s.num_items = items;
  s.train.resize(users);
  s.validation.resize(users);
  s.test.resize(users);
  std::mt19937_64 rng(4);
  for (std::uint32_t u = 0; u < users; ++u) s.test[u] = {static_cast<std::uint32_t>(rng() % items)};
  TableModel random(users, items, [](std::uint32_t u, std::uint32_t i) {
    return static_cast<double>(mix(u * 1000003ULL + i) >> 11);
  });
  EvalOptions opt;
  opt.ks = {10};
  const double recall = evaluate(random, s, opt).at(10).recall;
  const double p = 10.0 / items;
  EXPECT_NEAR(recall, p, 3 * std::sqrt(p * (1 - p) / users));
}

TEST(Evaluate, ExclusionAndSampledCandidates) {
  const auto split = random_split(50, 80, 5);
  std::vector<std::size_t> seen_count(50, 0);
  std::vector<std::set<std::uint32_t>> seen(50);
  TableModel probe(50, 80, [&](std::uint32_t u, std::uint32_t i) {
    seen[u].insert(i);
    return 0.0;
  });
  evaluate(probe, split);
  for (std::uint32_t u = 0; u < 50; ++u) {
    if (split.test[u].empty()) continue;
    for (std::uint32_t i : split.train[u]) EXPECT_FALSE(seen[u].count(i));
    for (std::uint32_t i : split.validation[u]) EXPECT_FALSE(seen[u].count(i));
    EXPECT_EQ(seen[u].size(), 80 - split.train[u].size() - split.validation[u].size());
  }
  for (auto& s : seen) s.clear();
  EvalOptions opt;
  opt.candidates = CandidateMode::sampled_with(10);
  evaluate(probe, split, opt);
  for (std::uint32_t u = 0; u < 50; ++u) {
    if (split.test[u].empty()) continue;
    EXPECT_EQ(seen[u].size(), split.test[u].size() + 10);
    for (std::uint32_t i : split.test[u]) EXPECT_TRUE(seen[u].count(i));
  }
}

TEST(Evaluate, DeterministicAndOrderInvariant) {
  const auto split = random_split(80, 60, 6);
  auto m = make_model(ModelKind::gmf, HyperParams{}, 80, 60, 3);
  EvalOptions opt;
  opt.candidates = CandidateMode::sampled_with(20);
  opt.seed = 9;
  const auto a = evaluate(*m, split, opt), b = evaluate(*m, split, opt);
  EXPECT_EQ(a.metrics, b.metrics);

  // Ranking depends on scores only, not on the order candidates arrive in.
  std::mt19937_64 rng(7);
  Ids cands(60);
  std::iota(cands.begin(), cands.end(), 0u);
  const Ids users(60, 1);
  const auto scores = m->score(users, cands);
  const auto ranking = rank_items(scores, cands);
  std::vector<std::size_t> perm(60);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  Ids shuffled;
  std::vector<double> shuffled_scores;
  for (auto k : perm) {
    shuffled.push_back(cands[k]);
    shuffled_scores.push_back(scores[k]);
  }
  EXPECT_EQ(rank_items(shuffled_scores, shuffled), ranking);
}

TEST(Evaluate, NoEvaluableUsersRejected) {
  SplitDataset s;
  s.num_users = 2;
  s.num_items = 3;
  s.train = {{0, 1}, {2}};
  s.validation = s.test = {{}, {}};
  TableModel m(2, 3, [](std::uint32_t, std::uint32_t) { return 0.0; });
  EXPECT_THROW(evaluate(m, s), DataError);
}

TEST(Report, MeanCsvAndTable) {
  EvalReport a, b;
  a.metrics = {{5, 0.1, 0.2}, {10, 0.3, 0.4}};
  b.metrics = {{5, 0.3, 0.4}, {10, 0.5, 0.2}};
  a.seeds = {42};
  b.seeds = {43};
  const auto m = mean_report({a, b});
  EXPECT_DOUBLE_EQ(m.at(5).recall, 0.2);
  EXPECT_DOUBLE_EQ(m.at(10).ndcg, 0.30000000000000004);
  EXPECT_EQ(m.seeds, (std::vector<std::uint64_t>{42, 43}));
  EXPECT_EQ(m.runs.size(), 2u);
  std::ostringstream csv;
  write_report_rows(csv, "ctncf", "ml-1m", m);
  EXPECT_EQ(csv.str(),
            "ctncf,ml-1m,5,0.200000,0.300000,2,42;43\n"
            "ctncf,ml-1m,10,0.400000,0.300000,2,42;43\n");
  EXPECT_EQ(std::string(kReportCsvHeader), "model,dataset,k,recall,ndcg,runs,seed_list");
  std::ostringstream table;
  print_report_table(table, "ctncf", m);
  EXPECT_NE(table.str().find("NDCG@k"), std::string::npos);
}
