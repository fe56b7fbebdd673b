#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "ctncf/ctncf.hpp"
#include "support/gradcheck.hpp"
#include "support/synthetic.hpp"

using namespace ctncf;

namespace {

SplitDataset fixture_split(std::size_t users, std::uint64_t seed = 11) {
  std::stringstream text;
  support::write_movielens_fixture(
      text, {.users = users, .items = 60, .genres = 4, .min_per_user = 8, .max_per_user = 20});
  return split_721(parse_movielens(text), seed);
}

HyperParams tiny() {
  HyperParams h = support::small_ctncf_hyper();
  h.num_heads = 1;
  return h;
}

}  // namespace

TEST(BceLoss, Examples) {
  EXPECT_NEAR(bce_loss(1.0, 1), 0.0, 1e-11);
  EXPECT_NEAR(bce_loss(0.5, 1), 0.693147, 1e-6);
  EXPECT_DOUBLE_EQ(bce_loss(0.5, 0), bce_loss(0.5, 1));
  EXPECT_DOUBLE_EQ(bce_loss(0.5, 1), std::log(2.0));
  EXPECT_TRUE(std::isfinite(bce_loss(0.0, 1)));
}

TEST(L2Penalty, Examples) {
  HyperParams h;
  CtncfModel m(h, 4, 4, 1);
  support::randomize(m, 2);
  double mf = 0, cnn = 0;
  for (double v : m.params().user_mf.data()) mf += v * v;
  for (double v : m.params().item_mf.data()) mf += v * v;
  for (double v : m.params().user_filters.data()) cnn += v * v;
  for (double v : m.params().item_filters.data()) cnn += v * v;
  EXPECT_NEAR(l2_penalty(m, 0.0, 0.01), 0.01 * cnn, 1e-12);
  EXPECT_NEAR(l2_penalty(m, 0.5, 0.01), 0.5 * mf + 0.01 * cnn, 1e-12);
  CtncfModel zero(h, 4, 4);
  EXPECT_EQ(l2_penalty(zero, 1.0, 1.0), 0.0);
  Tape tape;
  EXPECT_FALSE(l2_penalty(tape, m, 0.0, 0.0).has_value());
}

TEST(Adam, ZeroGradientLeavesParamsAndFirstStepIsLr) {
  std::vector<double> p = {1.0, -2.0, 3.0};
  const std::vector<double> zero(3, 0.0);
  AdamSlot slot;
  adam_step(p, zero, slot, 1, {});
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));

  std::vector<double> q = {1.0, -2.0, 3.0};
  const std::vector<double> g = {0.5, -4.0, 1e-3};
  AdamSlot s2;
  AdamOptions opt;
  adam_step(q, g, s2, 1, opt);
  for (std::size_t i = 0; i < 3; ++i) {
    // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
    const double step = opt.lr * g[i] / (std::abs(g[i]) + opt.eps);
    EXPECT_NEAR(q[i], p[i] - step, 1e-15);
    EXPECT_NEAR(std::abs(q[i] - p[i]), opt.lr, 1e-8);
  }
  std::vector<double> wrong = {1.0};
  EXPECT_THROW(adam_step(q, wrong, s2, 2, opt), ShapeError);
}

TEST(Train, PatienceOneWithFrozenLrStopsAfterTwoEpochs) {
  const auto split = fixture_split(30);
  TrainConfig c;
  c.lr = 0.0;
  c.patience = 1;
  c.max_epochs = 50;
  auto m = make_model(ModelKind::gmf, HyperParams{}, split.num_users, split.num_items, 1);
  const auto before = m->parameters().front().tensor->values();
  const auto s = train_model(*m, split, c);
  EXPECT_EQ(s.epochs_run, 2u);
  EXPECT_EQ(s.best_epoch, 1u);
  EXPECT_EQ(m->parameters().front().tensor->values(), before);
}

TEST(Train, SameSeedIsReproducible) {
  const auto split = fixture_split(40);
  TrainConfig c;
  c.max_epochs = 4;
  c.batch_size = 64;
  const auto a = train(ModelKind::ctncf, split, tiny(), c);
  const auto b = train(ModelKind::ctncf, split, tiny(), c);
  EXPECT_EQ(a.epoch, b.epoch);
  EXPECT_EQ(a.best_val_ndcg10, b.best_val_ndcg10);
  EXPECT_EQ(a.params, b.params);
  c.seed = 43;
  const auto other = train(ModelKind::ctncf, split, tiny(), c);
  EXPECT_NE(other.params, a.params);
}

TEST(Train, FirstEpochLowersLossOnPlantedData) {
  const auto split = support::planted_split(50, 100, 10);
  TrainConfig c;
  c.max_epochs = 1;
  c.l2_cnn = 0.0;
  c.batch_size = 64;
  auto m = make_model(ModelKind::ctncf, HyperParams{}, 50, 100, 42);
  const auto samples = epoch_samples(split, c.negatives_per_positive, c.seed, 1);
  const double before = mean_bce(*m, samples);
  train_model(*m, split, c);
  EXPECT_LT(mean_bce(*m, samples), before);
}

TEST(Train, EarlyStoppingRestoresBestParameters) {
  const auto split = fixture_split(40);
  TrainConfig c;
  c.max_epochs = 6;
  c.patience = 2;
  c.lr = 0.05;  // large enough that validation NDCG moves around
  auto m = make_model(ModelKind::gmf, HyperParams{}, split.num_users, split.num_items, 5);
  const auto s = train_model(*m, split, c);
  ASSERT_GE(s.best_epoch, 1u);
  EXPECT_DOUBLE_EQ(validation_ndcg10(*m, split, c), s.best_val_ndcg10);
  for (const auto& r : s.history) EXPECT_LE(r.val_ndcg10, s.best_val_ndcg10);
}

TEST(Train, NoValidationUsersRunsAllEpochs) {
  const auto split = support::planted_split(10, 20, 2);
  TrainConfig c;
  c.max_epochs = 3;
  c.patience = 1;
  auto m = make_model(ModelKind::gmf, HyperParams{}, 10, 20, 5);
  const auto s = train_model(*m, split, c);
  EXPECT_EQ(s.epochs_run, 3u);
  EXPECT_EQ(s.best_epoch, 3u);
  EXPECT_TRUE(std::isnan(s.history.back().val_ndcg10));
}

TEST(Train, NonFiniteLossRaisesNumericError) {
  const auto split = fixture_split(20);
  auto m = make_model(ModelKind::gmf, HyperParams{}, split.num_users, split.num_items, 5);
  m->parameters().front().tensor->fill(std::numeric_limits<double>::quiet_NaN());
  TrainConfig c;
  c.max_epochs = 1;
  try {
    train_model(*m, split, c);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
  }
}

TEST(Train, LogFileHasHeaderAndOneRowPerEpoch) {
  const auto dir = support::scratch_dir("trainlog");
  const auto split = fixture_split(20);
  TrainConfig c;
  c.max_epochs = 3;
  c.patience = 10;
  c.log_path = dir / "train_log.csv";
  auto m = make_model(ModelKind::mlp, HyperParams{}, split.num_users, split.num_items, 5);
  train_model(*m, split, c);
  std::ifstream in(*c.log_path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,loss,val_ndcg10,elapsed_s");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3);
}

TEST(Config, Validation) {
  TrainConfig c;
  c.lr = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.negatives_per_positive = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(RunSeeds, CarriesSeedsAndAverages) {
  const auto split = fixture_split(40);
  TrainConfig c;
  c.max_epochs = 2;
  c.seed = 10;
  const auto cand = CandidateMode::full();
  const auto mean = run_thrice(ModelKind::gmf, split, HyperParams{}, c, cand);
  EXPECT_EQ(mean.seeds, (std::vector<std::uint64_t>{10, 11, 12}));
  ASSERT_EQ(mean.runs.size(), 3u);
  for (std::size_t j = 0; j < mean.metrics.size(); ++j) {
    double r = 0, n = 0;
    for (const auto& run : mean.runs) {
      r += run[j].recall;
      n += run[j].ndcg;
    }
    EXPECT_NEAR(mean.metrics[j].recall, r / 3, 1e-15);
    EXPECT_NEAR(mean.metrics[j].ndcg, n / 3, 1e-15);
  }
  // Three identical deterministic runs: the mean equals each run.
  const auto pop = run_seeds(ModelKind::popularity, split, HyperParams{}, c, {5, 5, 5}, cand);
  for (const auto& run : pop.runs) EXPECT_EQ(run, pop.metrics);
}

TEST(Checkpoint, RoundTripPreservesScores) {
  const auto split = fixture_split(20);
  TrainConfig c;
  c.max_epochs = 1;
  for (ModelKind k : {ModelKind::ctncf, ModelKind::ncf, ModelKind::popularity}) {
    const auto ckpt = train(k, split, tiny(), c);
    std::stringstream buf;
    save_checkpoint(buf, ckpt);
    const auto back = load_checkpoint(buf);
    EXPECT_EQ(back.kind, k);
    EXPECT_EQ(back.hyper, ckpt.hyper);
    EXPECT_EQ(back.params, ckpt.params);
    auto a = model_from_checkpoint(ckpt), b = model_from_checkpoint(back);
    EXPECT_EQ(a->predict(3, 4), b->predict(3, 4));
  }
  std::stringstream bad("CTNCFDS1xxxxxxxx");
  EXPECT_THROW(load_checkpoint(bad), DataError);
  const auto ckpt = train(ModelKind::gmf, split, tiny(), c);
  std::stringstream full;
  save_checkpoint(full, ckpt);
  std::stringstream cut(full.str().substr(0, full.str().size() / 2));
  EXPECT_THROW(load_checkpoint(cut), DataError);
}
