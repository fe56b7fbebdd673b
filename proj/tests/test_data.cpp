#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "ctncf/ctncf.hpp"
#include "support/synthetic.hpp"

using namespace ctncf;

namespace {

InteractionLog parse_ml(const std::string& text) {
  std::istringstream in(text);
  return parse_movielens(in);
}

InteractionLog parse_az(const std::string& text) {
  std::istringstream in(text);
  return parse_amazon_csv(in);
}

// Nearest integer to num/10, halves rounded up, found by search.
std::size_t round_tenths(std::size_t num) {
  std::size_t best = 0;
  for (std::size_t t = 0; t * 10 <= num + 10; ++t) {
    const long diff = std::labs(static_cast<long>(10 * t) - static_cast<long>(num));
    const long best_diff = std::labs(static_cast<long>(10 * best) - static_cast<long>(num));
    if (diff < best_diff || (diff == best_diff && t > best)) best = t;
  }
  return best;
}

ImplicitFeedback feedback(std::vector<std::vector<std::uint32_t>> by_user, std::size_t items) {
  ImplicitFeedback fb;
  fb.num_users = by_user.size();
  fb.num_items = items;
  fb.items_by_user = std::move(by_user);
  return fb;
}

}  // namespace

TEST(ParseMovielens, SingleLine) {
  auto log = parse_ml("1::1193::5::978300760\n");
  ASSERT_EQ(log.records.size(), 1u);
  const Rating& r = log.records[0];
  EXPECT_EQ(log.users.raw(r.user), "1");
  EXPECT_EQ(log.items.raw(r.item), "1193");
  EXPECT_EQ(r.rating, 5.0);
  EXPECT_EQ(r.timestamp, 978300760);
}

TEST(ParseMovielens, EmptyRejected) {
  try {
    parse_ml("");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("no records"), std::string::npos);
  }
  EXPECT_THROW(parse_ml("\n  \n"), DataError);
}

TEST(ParseMovielens, MalformedThreshold) {
  std::string good;
  for (int k = 0; k < 199; ++k) good += std::to_string(k % 7) + "::" + std::to_string(k) + "::3::1\n";
  auto ok = parse_ml(good + "bad line\n");  // 1 of 200 = 0.5%
  EXPECT_EQ(ok.malformed_lines, 1u);
  EXPECT_EQ(ok.records.size(), 199u);
  try {
    parse_ml(good + "x::y\n1::2::9::5\n1::2::3::t\n");  // 3 of 202
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find('3'), std::string::npos);
  }
}

TEST(ParseMovielens, MissingFileNamesPath) {
  try {
    parse_movielens(std::filesystem::path("/nonexistent/ratings.dat"));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/ratings.dat"), std::string::npos);
  }
}

TEST(ParseAmazon, LineAndHeader) {
  auto log = parse_az("A1,B0001,4.0,1365811200\n");
  ASSERT_EQ(log.records.size(), 1u);
  EXPECT_EQ(log.users.raw(0), "A1");
  EXPECT_EQ(log.items.raw(0), "B0001");
  EXPECT_EQ(log.records[0].rating, 4.0);
  auto with_header = parse_az("user,item,rating,timestamp\nA1,B0001,4.0,1365811200\n");
  EXPECT_EQ(with_header.records.size(), 1u);
  EXPECT_EQ(with_header.malformed_lines, 0u);
  // A numeric first line is data, not a header.
  EXPECT_EQ(parse_az("A1,B1,2,5\nA2,B1,3,6\n").records.size(), 2u);
}

TEST(KCore, DensityAndThresholds) {
  std::string text;
  // Users u0..u3 each rate items i0..i2; u4 rates only i9 (pruned by 2-core).
  for (int u = 0; u < 4; ++u)
    for (int i = 0; i < 3; ++i) text += "u" + std::to_string(u) + ",i" + std::to_string(i) + ",5,1\n";
  text += "u4,i9,5,1\n";
  auto log = kcore_filter(parse_az(text), 2, 2);
  EXPECT_EQ(log.users.size(), 4u);
  EXPECT_EQ(log.items.size(), 3u);
  EXPECT_EQ(log.records.size(), 12u);
  EXPECT_DOUBLE_EQ(log.density(), 12.0 / (4.0 * 3.0));
  EXPECT_FALSE(log.items.find("i9").has_value());

  std::map<std::uint32_t, int> uc, ic;
  auto big = kcore_filter(parse_az(text + "u5,i0,1,1\nu5,i7,1,1\nu6,i7,1,1\n"), 2, 2);
  for (const auto& r : big.records) {
    ++uc[r.user];
    ++ic[r.item];
  }
  for (auto [k, v] : uc) EXPECT_GE(v, 2);
  for (auto [k, v] : ic) EXPECT_GE(v, 2);
}

TEST(LimitUsers, KeepsFirstUsers) {
  auto log = limit_users(parse_ml("9::1::5::1\n3::2::5::2\n9::3::5::3\n7::1::5::4\n"), 2);
  EXPECT_EQ(log.users.size(), 2u);
  EXPECT_EQ(log.users.raw(0), "9");
  EXPECT_EQ(log.users.raw(1), "3");
  EXPECT_EQ(log.records.size(), 3u);
}

TEST(ToImplicit, AllRatingsPositiveAndDuplicatesCollapse) {
  auto log = parse_ml("1::10::1::5\n1::20::5::3\n1::10::4::2\n");
  auto fb = to_implicit(log);
  EXPECT_EQ(fb.records_before_dedup, 3u);
  ASSERT_EQ(fb.items_by_user[0].size(), 2u);
  // Ordered by earliest timestamp: item 10 at t=2, item 20 at t=3.
  EXPECT_EQ(log.items.raw(fb.items_by_user[0][0]), "10");
  EXPECT_EQ(log.items.raw(fb.items_by_user[0][1]), "20");
  auto filtered = to_implicit(log, 4.0);
  EXPECT_EQ(filtered.num_positives(), 2u);
}

TEST(Split, SizeExamples) {
  EXPECT_EQ(split_sizes(10), (SplitSizes{7, 2, 1}));
  EXPECT_EQ(split_sizes(3), (SplitSizes{1, 1, 1}));
  EXPECT_EQ(split_sizes(2), (SplitSizes{2, 0, 0}));
  auto s = split_721(feedback({{4, 7}}, 10), 1);
  EXPECT_EQ(s.train[0], (std::vector<std::uint32_t>{4, 7}));
  EXPECT_FALSE(s.evaluable(0));
}

TEST(Split, PropertyOverTenThousandUsers) {
  std::mt19937_64 rng(77);
  const std::size_t items = 3000;
  std::uniform_int_distribution<std::size_t> count(0, 400);
  std::vector<std::vector<std::uint32_t>> by_user(10000);
  for (auto& row : by_user) {
    std::set<std::uint32_t> chosen;
    const std::size_t n = count(rng);
    while (chosen.size() < n) chosen.insert(static_cast<std::uint32_t>(rng() % items));
    row.assign(chosen.begin(), chosen.end());
    std::shuffle(row.begin(), row.end(), rng);
  }
  const auto fb = feedback(by_user, items);
  const auto s = split_721(fb, 5);
  for (std::size_t u = 0; u < by_user.size(); ++u) {
    const std::size_t n = by_user[u].size();
    std::multiset<std::uint32_t> all(s.train[u].begin(), s.train[u].end());
    all.insert(s.validation[u].begin(), s.validation[u].end());
    all.insert(s.test[u].begin(), s.test[u].end());
    ASSERT_EQ(all, std::multiset<std::uint32_t>(by_user[u].begin(), by_user[u].end())) << u;
    if (n < 3) {
      ASSERT_TRUE(s.validation[u].empty() && s.test[u].empty());
      continue;
    }
    ASSERT_EQ(s.test[u].size(), std::max<std::size_t>(1, round_tenths(n)));
    ASSERT_EQ(s.validation[u].size(), std::max<std::size_t>(1, round_tenths(2 * n)));
    ASSERT_GE(s.train[u].size(), 1u);
    for (const auto* v : {&s.train[u], &s.validation[u], &s.test[u]})
      ASSERT_TRUE(std::is_sorted(v->begin(), v->end()));
  }
  const auto again = split_721(fb, 5);
  EXPECT_EQ(again.test, s.test);
  EXPECT_EQ(again.train, s.train);
  EXPECT_NE(split_721(fb, 6).test, s.test);
}

TEST(NegativeSampling, OnlyRemainingItem) {
  auto s = split_721(feedback({{0, 1, 2, 4}}, 5), 3);
  s.train[0] = {0, 1, 2, 4};
  s.validation[0].clear();
  s.test[0].clear();
  for (std::uint32_t i : sample_negatives(s, 0, 50, 1)) EXPECT_EQ(i, 3u);
  s.train[0] = {0, 1, 2, 3, 4};
  EXPECT_THROW(sample_negatives(s, 0, 1, 1), DataError);
  EXPECT_THROW(sample_negatives(s, 0, 0, 1), std::invalid_argument);
}

TEST(NegativeSampling, UniformOverNonPositives) {
  SplitDataset s;
  s.num_users = 1;
  s.num_items = 20;
  s.train = {{2, 5, 11}};
  s.validation = {{}};
  s.test = {{}};
  const std::size_t draws = 100000;
  std::vector<std::size_t> freq(20, 0);
  for (std::uint32_t i : sample_negatives(s, 0, draws, 9)) ++freq[i];
  EXPECT_EQ(freq[2] + freq[5] + freq[11], 0u);
  const double p = 1.0 / 17.0;
  const double mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
  for (std::uint32_t i = 0; i < 20; ++i) {
    if (i == 2 || i == 5 || i == 11) continue;
    EXPECT_LE(std::abs(static_cast<double>(freq[i]) - mean), 3 * sd) << "item " << i;
  }
  // Dense user: more than half the catalogue is positive.
  s.train = {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}};
  std::fill(freq.begin(), freq.end(), 0);
  for (std::uint32_t i : sample_negatives(s, 0, draws, 9)) ++freq[i];
  const double p2 = 1.0 / 7.0;
  for (std::uint32_t i = 0; i < 20; ++i) {
    if (i <= 12) {
      EXPECT_EQ(freq[i], 0u);
      continue;
    }
    EXPECT_LE(std::abs(freq[i] - draws * p2), 3 * std::sqrt(draws * p2 * (1 - p2)));
  }
}

TEST(NegativeSampling, Deterministic) {
  SplitDataset s;
  s.num_users = 2;
  s.num_items = 100;
  s.train = {{1, 2, 3}, {4}};
  s.validation = s.test = {{}, {}};
  EXPECT_EQ(sample_negatives(s, 0, 30, 5, 2), sample_negatives(s, 0, 30, 5, 2));
  EXPECT_NE(sample_negatives(s, 0, 30, 5, 2), sample_negatives(s, 0, 30, 5, 3));
  EXPECT_NE(sample_negatives(s, 0, 30, 5, 2), sample_negatives(s, 1, 30, 5, 2));
}

TEST(SplitCache, RoundTripAndBadMagic) {
  std::ostringstream text;
  support::write_movielens_fixture(text, {.users = 50, .items = 40, .min_per_user = 3, .max_per_user = 12});
  std::istringstream in(text.str());
  auto split = split_721(parse_movielens(in), 17);
  std::stringstream buf;
  save_split(buf, split);
  auto back = load_split(buf);
  EXPECT_EQ(back.num_users, split.num_users);
  EXPECT_EQ(back.num_items, split.num_items);
  EXPECT_EQ(back.seed, 17u);
  EXPECT_EQ(back.train, split.train);
  EXPECT_EQ(back.validation, split.validation);
  EXPECT_EQ(back.test, split.test);
  EXPECT_EQ(back.user_ids, split.user_ids);
  EXPECT_EQ(back.item_ids, split.item_ids);

  std::stringstream bad("NOTASPLIT-----------");
  EXPECT_THROW(load_split(bad), DataError);
  std::string truncated = buf.str().substr(0, 40);
  std::stringstream cut(truncated);
  EXPECT_THROW(load_split(cut), DataError);
  EXPECT_THROW(load_split(std::filesystem::path("/nonexistent/split.bin")), DataError);
}

// A corrupt user count is rejected or hits end-of-file without allocating
// per the claimed size.
TEST(SplitCache, CorruptCountsRaiseDataError) {
  SplitDataset s;
  s.num_users = 1;
  s.num_items = 4;
  s.train = {{0, 1}};
  s.validation = {{2}};
  s.test = {{3}};
  std::stringstream buf;
  save_split(buf, s);
  const std::string good = buf.str();
  for (std::uint32_t users : {0xFFFFFFFFu, 1u << 27}) {
    std::string bad = good;
    for (int b = 0; b < 4; ++b) bad[16 + b] = static_cast<char>((users >> (8 * b)) & 0xFF);
    std::stringstream in(bad);
    EXPECT_THROW(load_split(in), DataError) << users;
  }
  std::string bad = good;
  bad[24] = static_cast<char>(0xFF);  // first train count exceeds num_items
  std::stringstream in(bad);
  EXPECT_THROW(load_split(in), DataError);
}

// Counts for the full MovieLens-1M ratings file; runs only when the file is
// provided through CTNCF_ML1M.
TEST(Movielens1M, PublishedCounts) {
  const char* path = std::getenv("CTNCF_ML1M");
  if (!path) GTEST_SKIP() << "set CTNCF_ML1M to the ratings.dat path";
  auto log = parse_movielens(std::filesystem::path(path));
  EXPECT_EQ(log.records.size(), 1000209u);
  EXPECT_EQ(log.users.size(), 6040u);
  EXPECT_EQ(log.items.size(), 3706u);
  EXPECT_EQ(to_implicit(log).records_before_dedup, 1000209u);
}
