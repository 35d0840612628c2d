#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "gpldan/retrieval_eval.hpp"
#include "oracle/brute_force_ap.hpp"
#include "support/helpers.hpp"

using namespace gpldan;
using testing_support::gaussian;
using testing_support::uniform;

namespace {

std::vector<std::vector<double>> rows_of(const Matrix& m) {
  std::vector<std::vector<double>> out(std::size_t(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) out[std::size_t(r)].assign(m.row(r).data(), m.row(r).data() + m.cols());
  return out;
}

ReshapedEmbedding embed_row(const Projector& p, const Matrix& raw, Modality m, std::size_t i) {
  return p.reshape(p.encode(Tensor::constant(raw.row(Eigen::Index(i))), m), m, i);
}

std::vector<int> balanced_labels(std::size_t n, int classes, std::uint64_t seed) {
  std::vector<int> l(n);
  for (std::size_t i = 0; i < n; ++i) l[i] = int(i % std::size_t(classes));
  std::mt19937_64 rng(seed);
  std::shuffle(l.begin(), l.end(), rng);
  return l;
}

}  // namespace

TEST(RetrievalMap, AllRelevantFirstGivesOne) {
  Matrix s(1, 6);
  s << 0.1, 0.2, 0.3, 0.9, 1.0, 1.1;
  const auto r = map_at_k(s, {1}, {1, 1, 1, 0, 0, 0}, 3);
  EXPECT_EQ(r.map, 1.0);
}

TEST(RetrievalMap, SingleRelevantAtRankTwoGivesHalf) {
  Matrix s(1, 4);
  s << 0.5, 0.1, 0.7, 0.9;
  const auto r = map_at_k(s, {2}, {2, 0, 0, 0}, 50);
  EXPECT_DOUBLE_EQ(r.map, 0.5);
  ASSERT_EQ(r.average_precision.size(), 1u);
}

TEST(RetrievalMap, TiesBreakByCandidateIndex) {
  const Matrix s = Matrix::Constant(1, 3, 0.4);
  EXPECT_DOUBLE_EQ(map_at_k(s, {0}, {1, 0, 1}, 1).map, 0.0);
  EXPECT_DOUBLE_EQ(map_at_k(s, {0}, {0, 1, 1}, 1).map, 1.0);
}

TEST(RetrievalMap, QueriesWithoutRelevantCandidatesAreExcludedAndCounted) {
  Matrix s(3, 3);
  s << 0.1, 0.2, 0.3, 0.3, 0.2, 0.1, 0.1, 0.2, 0.3;
  const auto r = map_at_k(s, {0, 5, 1}, {0, 1, 1}, 2);
  EXPECT_EQ(r.n_excluded, 1u);
  EXPECT_EQ(r.n_queries(), 2u);
  EXPECT_EQ(r.query_index, (std::vector<std::size_t>{0, 2}));
  // query 2: label 1 at ranks 2 and 3; within k=2: (1/2) / min(2, 2)
  EXPECT_DOUBLE_EQ(r.average_precision[1], 0.25);
  EXPECT_DOUBLE_EQ(r.map, (1.0 + 0.25) / 2.0);
}

TEST(RetrievalMap, RelevantAtKNormalization) {
  Matrix s(1, 4);
  s << 0.1, 0.2, 0.3, 0.4;
  // relevant at ranks 2 and 4, k = 2: sum = 1/2; min(R,k) = 2, hits in top-2 = 1
  EXPECT_DOUBLE_EQ(map_at_k(s, {1}, {0, 1, 0, 1}, 2, ApNormalization::min_relevant_k).map, 0.25);
  EXPECT_DOUBLE_EQ(map_at_k(s, {1}, {0, 1, 0, 1}, 2, ApNormalization::relevant_at_k).map, 0.5);
  EXPECT_EQ(parse_ap_normalization("rel-at-k"), ApNormalization::relevant_at_k);
  EXPECT_THROW(parse_ap_normalization("bogus"), ConfigError);
}

TEST(RetrievalMap, ContractViolations) {
  const Matrix s = Matrix::Zero(2, 2);
  EXPECT_THROW(map_at_k(s, {0, 1}, {0, 1}, 0), ConfigError);
  EXPECT_THROW(map_at_k(s, {0}, {0, 1}, 1), DimensionError);
}

TEST(RetrievalMap, RandomSixBySixMatchesEnumeration) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix s = uniform(6, 6, seed, 0.0, 2.0);
    const auto labels = balanced_labels(6, 2, seed);
    for (std::size_t k : {1u, 3u, 6u}) {
      const auto got = map_at_k(s, labels, labels, k);
      const auto want = oracle::brute_force_map(rows_of(s), labels, labels, k);
      EXPECT_EQ(got.map, want.map) << "seed " << seed << " k " << k;
    }
  }
}

TEST(RetrievalMap, APsLieInUnitIntervalAndMapIsTheirMean) {
  const Matrix s = uniform(30, 40, 3, 0.0, 2.0);
  const auto q = balanced_labels(30, 4, 1), c = balanced_labels(40, 4, 2);
  const auto r = map_at_k(s, q, c, 10);
  double total = 0.0;
  for (double ap : r.average_precision) {
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);
    total += ap;
  }
  EXPECT_DOUBLE_EQ(r.map, total / double(r.n_queries()));
}

TEST(RetrievalMap, InvariantUnderStrictlyMonotoneTransform) {
  const Matrix s = uniform(15, 15, 4, 0.0, 2.0);
  const auto labels = balanced_labels(15, 3, 5);
  const Matrix t = (s.array() * 3.0).exp().matrix();
  EXPECT_EQ(map_at_k(s, labels, labels, 5).map, map_at_k(t, labels, labels, 5).map);
}

TEST(RetrievalMap, InvariantUnderJointCandidatePermutation) {
  const Matrix s = uniform(12, 12, 6, 0.0, 2.0);
  const auto labels = balanced_labels(12, 3, 7);
  std::vector<Eigen::Index> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(8);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix sp(12, 12);
  std::vector<int> lp(12);
  for (Eigen::Index j = 0; j < 12; ++j) {
    sp.col(j) = s.col(perm[std::size_t(j)]);
    lp[std::size_t(j)] = labels[std::size_t(perm[std::size_t(j)])];
  }
  EXPECT_DOUBLE_EQ(map_at_k(s, labels, labels, 4).map, map_at_k(sp, labels, lp, 4).map);
}

TEST(RetrievalMap, RandomScoresApproachChanceLevel) {
  // Full ranking (k = n) so that AP of a random order concentrates near R / n.
  const std::size_t n = 1000;
  for (int classes : {2, 5, 10}) {
    const Matrix s = uniform(Eigen::Index(n), Eigen::Index(n), std::uint64_t(classes), 0.0, 2.0);
    const auto labels = balanced_labels(n, classes, std::uint64_t(classes) + 1);
    EXPECT_NEAR(map_at_k(s, labels, labels, n).map, 1.0 / classes, 0.05) << classes << " classes";
  }
}

TEST(RetrievalScore, PairScoreIsSymmetricAndBounded) {
  Projector p({5, 4, 6, 8, 4}, 1);
  const Matrix u = gaussian(4, 5, 2), c = gaussian(4, 4, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const auto v = embed_row(p, u, Modality::image, i);
      const auto t = embed_row(p, c, Modality::text, j);
      const double ab = score_pair(p, v, t), ba = score_pair(p, t, v);
      EXPECT_NEAR(ab, ba, 1e-15);
      EXPECT_GE(ab, 0.0);
      EXPECT_LE(ab, 2.0);
      EXPECT_EQ(ab, pair_distance(p, v, t).item());
    }
}

TEST(RetrievalScore, SameModalityIsContractError) {
  Projector p({5, 4, 6, 8, 4}, 4);
  const auto v = embed_row(p, gaussian(1, 5, 5), Modality::image, 0);
  EXPECT_THROW(score_pair(p, v, v), ContractError);
}

TEST(RetrievalScore, MatrixMatchesPairCallsAndTransposes) {
  Projector p({5, 4, 6, 8, 4}, 6);
  const Matrix u = gaussian(3, 5, 7), c = gaussian(3, 4, 8);
  const ScoreMatrix s = score_matrix(p, u, c);
  EXPECT_EQ(s.direction, Direction::img2txt);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_NEAR(s.distances(Eigen::Index(i), Eigen::Index(j)),
                  score_pair(p, embed_row(p, u, Modality::image, i), embed_row(p, c, Modality::text, j)), 1e-14);
  const ScoreMatrix f = flip(s);
  EXPECT_EQ(f.direction, Direction::txt2img);
  EXPECT_EQ(f.distances, Matrix(s.distances.transpose()));
}

TEST(RetrievalScore, WikipediaScaleMatrixShape) {
  Projector p({16, 8, 16, 16, 4}, 9);
  const ScoreMatrix s = score_matrix(p, gaussian(462, 16, 10), gaussian(462, 8, 11));
  EXPECT_EQ(s.distances.rows(), 462);
  EXPECT_EQ(s.distances.cols(), 462);
  EXPECT_GE(s.distances.minCoeff(), 0.0);
  EXPECT_LE(s.distances.maxCoeff(), 2.0);
}

TEST(RetrievalReport, ResultsCsvHasThreeTaskRows) {
  Projector p({5, 4, 6, 8, 4}, 12);
  const EvaluationReport r = evaluate(p, gaussian(6, 5, 13), gaussian(6, 4, 14), {0, 1, 2, 0, 1, 2}, 50);
  const std::string csv = results_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,k,map,n_queries,n_excluded");
  EXPECT_NE(csv.find("\nImg2Txt,50,"), std::string::npos);
  EXPECT_NE(csv.find("\nTxt2Img,50,"), std::string::npos);
  EXPECT_NE(csv.find("\nAvg,50,"), std::string::npos);
  EXPECT_DOUBLE_EQ(r.average(), 0.5 * (r.img2txt.map + r.txt2img.map));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const std::string per_query = per_query_csv(r);
  EXPECT_EQ(std::count(per_query.begin(), per_query.end(), '\n'), 13);
}
