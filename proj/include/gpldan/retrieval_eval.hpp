#pragma once

// Cross-modal retrieval scoring and MAP@k.
//
// At test time a query and a candidate are compared only through
// co-attention: d_cos(Co(x_i, y_j), Co(y_j, x_i)). The score is symmetric in
// the pair, so the Txt2Img matrix is the transpose of the Img2Txt one.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "gpldan/graph_loss.hpp"
#include "gpldan/projector.hpp"

namespace gpldan {

enum class Direction { img2txt, txt2img };

inline const char* to_string(Direction d) { return d == Direction::img2txt ? "Img2Txt" : "Txt2Img"; }

struct ScoreMatrix {
  Matrix distances;  // n_query x n_candidate, entries in [0, 2]
  Direction direction = Direction::img2txt;
};

/// Co-attention distance of one query/candidate pair of opposite modalities.
inline double score_pair(const Projector& projector, const ReshapedEmbedding& query, const ReshapedEmbedding& candidate) {
  if (query.modality == candidate.modality)
    throw ContractError("retrieval_eval", "query and candidate must come from opposite modalities");
  numgrad::NoGradGuard no_grad;
  return pair_distance(projector, query, candidate).item();
}

/// Encodes raw test features in evaluation mode (no denoising) and returns the
/// Img2Txt distance matrix.
inline ScoreMatrix score_matrix(const Projector& projector, const Matrix& raw_image, const Matrix& raw_text) {
  numgrad::NoGradGuard no_grad;
  Tensor v = projector.encode(Tensor::constant(raw_image), Modality::image);
  Tensor t = projector.encode(Tensor::constant(raw_text), Modality::text);
  Tensor d = pair_distance_matrix(v, projector.attention_maps(v), t, projector.attention_maps(t), projector.shape().k);
  return {d.value(), Direction::img2txt};
}

inline ScoreMatrix flip(const ScoreMatrix& s) {
  return {s.distances.transpose(),
          s.direction == Direction::img2txt ? Direction::txt2img : Direction::img2txt};
}

enum class ApNormalization {
  min_relevant_k,  // divide by min(R, k)
  relevant_at_k,   // divide by the number of relevant items within the top k
};

inline ApNormalization parse_ap_normalization(const std::string& s) {
  if (s == "min-r-k") return ApNormalization::min_relevant_k;
  if (s == "rel-at-k") return ApNormalization::relevant_at_k;
  throw ConfigError("retrieval_eval", "unknown AP normalization '" + s + "' (expected min-r-k or rel-at-k)");
}

inline const char* to_string(ApNormalization n) {
  return n == ApNormalization::min_relevant_k ? "min-r-k" : "rel-at-k";
}

struct RetrievalResult {
  std::vector<double> average_precision;  // one per included query
  std::vector<std::size_t> query_index;   // row of each entry above
  double map = 0.0;
  std::size_t k = 0;
  std::size_t n_excluded = 0;  // queries without any relevant candidate

  std::size_t n_queries() const { return average_precision.size(); }
};

/// Candidates are ranked by ascending distance, ties by candidate index.
inline RetrievalResult map_at_k(const Matrix& scores, const std::vector<int>& query_labels,
                                const std::vector<int>& candidate_labels, std::size_t k,
                                ApNormalization norm = ApNormalization::min_relevant_k) {
  if (k < 1) throw ConfigError("retrieval_eval", "MAP@k needs k >= 1");
  if (std::size_t(scores.rows()) != query_labels.size() || std::size_t(scores.cols()) != candidate_labels.size())
    throw DimensionError("retrieval_eval", "label vectors do not match the score matrix axes");
  RetrievalResult res;
  res.k = k;
  std::vector<std::size_t> order(candidate_labels.size());
  for (Eigen::Index q = 0; q < scores.rows(); ++q) {
    const int label = query_labels[std::size_t(q)];
    const auto relevant = std::size_t(std::count(candidate_labels.begin(), candidate_labels.end(), label));
    if (relevant == 0) {
      ++res.n_excluded;
      continue;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto top = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(top), order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = scores(q, Eigen::Index(a)), sb = scores(q, Eigen::Index(b));
      return sa < sb || (sa == sb && a < b);
    });
    double precision_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < top; ++r) {
      if (candidate_labels[order[r]] == label) {
        ++hits;
        precision_sum += double(hits) / double(r + 1);
      }
    }
    const double denom = norm == ApNormalization::min_relevant_k ? double(std::min(relevant, k)) : double(hits);
    res.average_precision.push_back(denom > 0.0 ? precision_sum / denom : 0.0);
    res.query_index.push_back(std::size_t(q));
  }
  if (!res.average_precision.empty())
    res.map = std::accumulate(res.average_precision.begin(), res.average_precision.end(), 0.0) /
              double(res.average_precision.size());
  return res;
}

struct EvaluationReport {
  RetrievalResult img2txt;
  RetrievalResult txt2img;

  double average() const { return 0.5 * (img2txt.map + txt2img.map); }
};

inline EvaluationReport evaluate(const Projector& projector, const Matrix& raw_image, const Matrix& raw_text,
                                 const std::vector<int>& labels, std::size_t k,
                                 ApNormalization norm = ApNormalization::min_relevant_k) {
  const ScoreMatrix s = score_matrix(projector, raw_image, raw_text);
  return {map_at_k(s.distances, labels, labels, k, norm), map_at_k(flip(s).distances, labels, labels, k, norm)};
}

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// task,k,map,n_queries,n_excluded with rows Img2Txt, Txt2Img, Avg.
inline std::string results_csv(const EvaluationReport& r) {
  std::string out = "task,k,map,n_queries,n_excluded\n";
  auto row = [&](const char* task, std::size_t k, double map, std::size_t nq, std::size_t ne) {
    out += std::string(task) + "," + std::to_string(k) + "," + format_metric(map) + "," + std::to_string(nq) + "," +
           std::to_string(ne) + "\n";
  };
  row("Img2Txt", r.img2txt.k, r.img2txt.map, r.img2txt.n_queries(), r.img2txt.n_excluded);
  row("Txt2Img", r.txt2img.k, r.txt2img.map, r.txt2img.n_queries(), r.txt2img.n_excluded);
  row("Avg", r.img2txt.k, r.average(), r.img2txt.n_queries() + r.txt2img.n_queries(),
      r.img2txt.n_excluded + r.txt2img.n_excluded);
  return out;
}

/// task,query,ap for every included query of both directions.
inline std::string per_query_csv(const EvaluationReport& r) {
  std::string out = "task,query,ap\n";
  for (const auto* res : {&r.img2txt, &r.txt2img}) {
    const char* task = res == &r.img2txt ? "Img2Txt" : "Txt2Img";
    for (std::size_t i = 0; i < res->n_queries(); ++i)
      out += std::string(task) + "," + std::to_string(res->query_index[i]) + "," +
             format_metric(res->average_precision[i]) + "\n";
  }
  return out;
}

}  // namespace gpldan
