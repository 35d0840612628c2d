#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gpldan/trainer.hpp"
#include "support/helpers.hpp"

using namespace gpldan;
using testing_support::scratch_dir;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.k = 2;
  c.common_width = 8;
  c.entry_width = 6;
  c.batch_size = 8;
  c.epochs = 3;
  c.lr_g = 1e-3;
  c.lr_d = 1e-3;
  c.seed = 7;
  return c;
}

PairedDataset small_data(std::uint64_t seed = 3, std::size_t per_cluster = 10) {
  SyntheticSpec s;
  s.n_clusters = 4;
  s.n_per_cluster = per_cluster;
  s.test_per_cluster = 5;
  s.dim_image = 6;
  s.dim_text = 5;
  s.seed = seed;
  return generate_synthetic(s);
}

void expect_same_params(const Model& a, const Model& b) {
  const auto pa = a.projector.params().all(), pb = b.projector.params().all();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].value(), pb[i].value());
  EXPECT_EQ(a.classifier.w_hidden().value(), b.classifier.w_hidden().value());
  EXPECT_EQ(a.classifier.w_out().value(), b.classifier.w_out().value());
}

double epoch_mean(const std::vector<TrainLogRow>& log, std::size_t epoch, double TrainLogRow::*field) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : log)
    if (r.epoch == epoch) s += r.*field, ++n;
  return s / double(n);
}

}  // namespace

TEST(TrainerConfig, ValidationRejectsBadValues) {
  auto bad = [](auto mutate) {
    TrainConfig c = small_config();
    mutate(c);
    return c;
  };
  EXPECT_NO_THROW(small_config().validate());
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr_g = 0.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr_d = -1.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.alpha = -0.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lambda = NAN; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.batch_size = 1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.epochs = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.denoise_rate = 1.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.k = 3; }).validate(), ConfigError);
}

TEST(TrainerConfig, JsonRoundTrip) {
  TrainConfig c = small_config();
  c.use_mc = false;
  c.udp_signed = true;
  c.alpha = 0.25;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  nlohmann::json broken = to_json(c);
  broken.erase("alpha");
  EXPECT_THROW(train_config_from_json(broken), ConfigError);
}

TEST(TrainerConfig, AblationRowsToggleComponentsInOrder) {
  const auto cs = ablation_configs(small_config());
  ASSERT_EQ(cs.size(), 6u);
  ASSERT_EQ(ablation_names().size(), 6u);
  EXPECT_EQ(ablation_names().front(), "Baseline");
  EXPECT_EQ(ablation_names().back(), "Full");
  const bool want[6][4] = {{0, 0, 0, 0}, {0, 1, 0, 0}, {1, 0, 0, 0}, {1, 1, 0, 0}, {1, 1, 1, 0}, {1, 1, 1, 1}};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(cs[i].use_udp, want[i][0]) << i;
    EXPECT_EQ(cs[i].use_mdp, want[i][1]) << i;
    EXPECT_EQ(cs[i].use_mc, want[i][2]) << i;
    EXPECT_EQ(cs[i].use_da, want[i][3]) << i;
  }
}

TEST(TrainerSeeds, StreamsAreDistinct) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s : {std::uint64_t(detail::projector_init), std::uint64_t(detail::classifier_init), std::uint64_t(detail::shuffle) + 1,
                          std::uint64_t(detail::noise) + 2, std::uint64_t(detail::noise) + 3})
    seen.insert(detail::derive_seed(0, s));
  EXPECT_EQ(seen.size(), 5u);
  EXPECT_NE(detail::derive_seed(1, detail::projector_init), detail::derive_seed(2, detail::projector_init));
}

TEST(TrainerRun, SameSeedIsBitIdentical) {
  const PairedDataset data = small_data();
  const TrainResult a = train(data, small_config()), b = train(data, small_config());
  expect_same_params(a.model, b.model);
  ASSERT_EQ(a.log.size(), b.log.size());
  EXPECT_EQ(training_log_csv(a.log), training_log_csv(b.log));
}

TEST(TrainerRun, DifferentSeedDiffers) {
  const PairedDataset data = small_data();
  TrainConfig other = small_config();
  other.seed = 8;
  EXPECT_NE(train(data, small_config()).model.projector.params().w_shared.value(),
            train(data, other).model.projector.params().w_shared.value());
}

TEST(TrainerRun, LogIsFiniteAndOrdered) {
  const TrainResult r = train(small_data(), small_config());
  ASSERT_FALSE(r.log.empty());
  std::size_t prev_step = 0, prev_epoch = 1;
  for (const auto& row : r.log) {
    for (double v : {row.l_pdl, row.l_udp, row.l_mdp, row.l_gpl, row.l_D, row.l_G}) EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(row.step, prev_step);
    EXPECT_GE(row.epoch, prev_epoch);
    EXPECT_NEAR(row.l_gpl, row.l_pdl + row.l_udp + 0.1 * row.l_mdp, 1e-12);
    prev_step = row.step;
    prev_epoch = row.epoch;
  }
  // 40 training pairs in batches of 8: five steps per epoch.
  EXPECT_EQ(r.log.size(), 15u);
  EXPECT_EQ(r.skipped_batches, 0u);
}

TEST(TrainerRun, BaselineFlagsTrainOnPairwiseLossOnly) {
  TrainConfig c = small_config();
  c.use_udp = c.use_mdp = c.use_mc = c.use_da = false;
  const TrainResult r = train(small_data(), c);
  for (const auto& row : r.log) {
    EXPECT_EQ(row.l_gpl, row.l_pdl);
    EXPECT_EQ(row.l_G, row.l_gpl);
    EXPECT_EQ(row.l_D, 0.0);
  }
}

TEST(TrainerRun, ZeroWeightsMatchDisabledTerms) {
  const PairedDataset data = small_data();
  TrainConfig zero = small_config(), off = small_config();
  zero.alpha = zero.beta = 0.0;
  zero.use_mc = zero.use_da = false;
  off.use_udp = off.use_mdp = off.use_mc = off.use_da = false;
  expect_same_params(train(data, zero).model, train(data, off).model);
}

TEST(TrainerRun, AttentionWeightsStayFrozenWithoutDiversifiedAttention) {
  TrainConfig c = small_config();
  c.use_da = false;
  const PairedDataset data = small_data();
  const Model init = make_model(c, 6, 5);
  std::size_t calls = 0;
  const TrainResult r = train(data, c, [&](const Model& m, const TrainLogRow&) {
    ++calls;
    EXPECT_EQ(m.projector.params().w_att1.grad().norm(), 0.0);
    EXPECT_EQ(m.projector.params().w_att2.grad().norm(), 0.0);
  });
  EXPECT_EQ(calls, r.log.size());
  EXPECT_EQ(r.model.projector.params().w_att1.value(), init.projector.params().w_att1.value());
  EXPECT_EQ(r.model.projector.params().w_att2.value(), init.projector.params().w_att2.value());
}

TEST(TrainerRun, ClassifierFrozenWithoutModalityClassifier) {
  TrainConfig c = small_config();
  c.use_mc = false;
  const Model init = make_model(c, 6, 5);
  const TrainResult r = train(small_data(), c);
  EXPECT_EQ(r.model.classifier.w_hidden().value(), init.classifier.w_hidden().value());
}

TEST(TrainerRun, PairwiseLossDecreases) {
  TrainConfig c = small_config();
  c.epochs = 40;
  const TrainResult r = train(small_data(), c);
  EXPECT_LT(epoch_mean(r.log, 40, &TrainLogRow::l_pdl), 0.5 * epoch_mean(r.log, 1, &TrainLogRow::l_pdl));
}

TEST(TrainerRun, TrailingSingletonJoinsPreviousBatch) {
  TrainConfig c = small_config();
  c.batch_size = 4;
  c.epochs = 2;
  Matrix u = testing_support::gaussian(5, 6, 1), t = testing_support::gaussian(5, 5, 2);
  EXPECT_EQ(train(u, t, c).log.size(), 2u);
  u = testing_support::gaussian(6, 6, 1);
  t = testing_support::gaussian(6, 5, 2);
  EXPECT_EQ(train(u, t, c).log.size(), 4u);
}

TEST(TrainerRun, DegenerateBatchesAreSkippedWithWarning) {
  TrainConfig c = small_config();
  c.denoise_rate = 0.0;
  const Matrix u = Matrix::Ones(8, 6), t = Matrix::Ones(8, 5);
  const TrainResult r = train(u, t, c);
  EXPECT_EQ(r.skipped_batches, 3u);
  EXPECT_TRUE(r.log.empty());
  ASSERT_EQ(r.warnings.size(), 3u);
  EXPECT_NE(r.warnings[0].find("degenerate"), std::string::npos);
}

TEST(TrainerRun, ContractErrors) {
  const TrainConfig c = small_config();
  EXPECT_THROW(train(Matrix::Ones(4, 6), Matrix::Ones(3, 5), c), DimensionError);
  EXPECT_THROW(train(Matrix::Ones(1, 6), Matrix::Ones(1, 5), c), ContractError);
  PairedDataset no_test = small_data();
  no_test.test_count = 0;
  EXPECT_THROW(evaluate(make_model(c, 6, 5), no_test), ContractError);
}

TEST(TrainerCheckpoint, RoundTripPreservesModelAndScores) {
  const PairedDataset data = small_data();
  const TrainResult r = train(data, small_config());
  const auto path = scratch_dir("checkpoint") / "model.gpld";
  save_checkpoint(path, r.model);
  const Model back = load_checkpoint(path);
  expect_same_params(r.model, back);
  EXPECT_EQ(to_json(back.config), to_json(r.model.config));
  EXPECT_EQ(results_csv(evaluate(back, data)), results_csv(evaluate(r.model, data)));
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(r.model));
}

TEST(TrainerCheckpoint, AttentionSettingSurvivesRoundTrip) {
  TrainConfig c = small_config();
  c.use_da = false;
  const PairedDataset data = small_data();
  const Model m = make_model(c, 6, 5);
  const Model back = decode_checkpoint(encode_checkpoint(m));
  EXPECT_EQ(results_csv(evaluate(back, data)), results_csv(evaluate(m, data)));
}

TEST(TrainerCheckpoint, CorruptionIsTyped) {
  const std::string good = encode_checkpoint(make_model(small_config(), 6, 5));
  auto kind_of = [](const std::string& bytes) {
    try {
      decode_checkpoint(bytes);
    } catch (const LoadError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no LoadError";
    return LoadError::Kind::io;
  };
  std::string magic = good;
  magic[3] = 'X';
  EXPECT_EQ(kind_of(magic), LoadError::Kind::bad_magic);
  std::string version = good;
  version[4] = 9;
  EXPECT_EQ(kind_of(version), LoadError::Kind::bad_version);
  EXPECT_EQ(kind_of(good.substr(0, good.size() - 3)), LoadError::Kind::truncated);
  EXPECT_EQ(kind_of(good.substr(0, 2)), LoadError::Kind::truncated);
  EXPECT_EQ(kind_of(good + "xx"), LoadError::Kind::count_mismatch);
  std::string json = good;
  json[12] = '#';
  EXPECT_EQ(kind_of(json), LoadError::Kind::parse);
  EXPECT_THROW(load_checkpoint(scratch_dir("missing") / "none.gpld"), LoadError);
}

TEST(TrainerSweeps, AblationAndGridShapes) {
  const PairedDataset data = small_data();
  TrainConfig c = small_config();
  c.epochs = 1;
  const auto rows = ablate(data, c);
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& r : rows) EXPECT_DOUBLE_EQ(r.avg, 0.5 * (r.img2txt + r.txt2img));
  const std::string csv = ablation_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,img2txt,txt2img,avg");
  EXPECT_NE(csv.find("\n+mdp+udp+MC,"), std::string::npos);

  const auto grid = grid_search(data, {0.0, 0.1, 0.5, 1.0, 2.0}, {0.1}, c);
  ASSERT_EQ(grid.size(), 5u);
  EXPECT_EQ(grid[2].alpha, 0.5);
  EXPECT_EQ(grid[2].beta, 0.1);
  const std::string g = grid_csv(grid);
  EXPECT_NE(g.find("\n0.5,0.1,"), std::string::npos);
  EXPECT_THROW(grid_search(data, {}, {0.1}, c), ConfigError);
}
