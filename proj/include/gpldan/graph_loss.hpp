#pragma once

// Graph pattern loss over a mini-batch.
//
// Every distance in the loss is l_p: the cosine distance between the two
// fusions of a pair of instances. For a cross-modal pair the fusions use
// co-attention, for a same-modality pair self-attention; in both cases an
// instance x_i paired with y_j gives d_cos(x_i (a_i + b_j), y_j (b_j + a_i)).
// The batched kernel below evaluates that for all pairs at once through the
// k x k Gram blocks of the reshaped embeddings.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gpldan/numgrad.hpp"
#include "gpldan/projector.hpp"

namespace gpldan {

namespace detail {

struct PairKernelCache {
  Eigen::Index n = 0, m = 0, k = 0, H = 0;
  Matrix cross;   // (n k) x (m k): column-by-column inner products of x_i and y_j
  Matrix x_self;  // (n k) x k: block i is x_i^T x_i
  Matrix y_self;  // (m k) x k
};

// s^T M[row0:row0+k, col0:col0+k] s
inline double quadratic_form(const Matrix& M, Eigen::Index row0, Eigen::Index col0, Eigen::Index k, const double* s) {
  double acc = 0.0;
  for (Eigen::Index r = 0; r < k; ++r) {
    const double* row = &M(row0 + r, col0);
    double t = 0.0;
    for (Eigen::Index c = 0; c < k; ++c) t += row[c] * s[c];
    acc += s[r] * t;
  }
  return acc;
}

inline Matrix self_gram_blocks(Eigen::Map<const Matrix> cols, Eigen::Index count, Eigen::Index k) {
  Matrix out(count * k, k);
  for (Eigen::Index i = 0; i < count; ++i)
    out.middleRows(i * k, k).noalias() = cols.middleRows(i * k, k) * cols.middleRows(i * k, k).transpose();
  return out;
}

}  // namespace detail

/// n x m matrix of l_p(x_i, y_j) = d_cos(x_i (a_i + b_j), y_j (b_j + a_i)) where x
/// is n x L, y is m x L and the maps are n x k and m x k.
inline Tensor pair_distance_matrix(const Tensor& x, const Tensor& x_maps, const Tensor& y, const Tensor& y_maps,
                                   Eigen::Index k) {
  if (k <= 0 || x.cols() % k != 0 || x.cols() != y.cols())
    throw DimensionError("graph_loss", "pair_distance_matrix: incompatible widths " + x.shape() + ", " + y.shape() +
                                           " for k=" + std::to_string(k));
  if (x_maps.rows() != x.rows() || x_maps.cols() != k || y_maps.rows() != y.rows() || y_maps.cols() != k)
    throw DimensionError("graph_loss", "pair_distance_matrix: attention maps " + x_maps.shape() + ", " +
                                           y_maps.shape() + " do not match the embeddings");
  auto cache = std::make_shared<detail::PairKernelCache>();
  cache->n = x.rows();
  cache->m = y.rows();
  cache->k = k;
  cache->H = x.cols() / k;
  Eigen::Map<const Matrix> xc(x.value().data(), cache->n * k, cache->H);
  Eigen::Map<const Matrix> yc(y.value().data(), cache->m * k, cache->H);
  cache->cross.noalias() = xc * yc.transpose();
  cache->x_self = detail::self_gram_blocks(xc, cache->n, k);
  cache->y_self = detail::self_gram_blocks(yc, cache->m, k);

  const Matrix& A = x_maps.value();
  const Matrix& B = y_maps.value();
  Matrix out(cache->n, cache->m);
  std::vector<double> s(std::size_t(k), 0.0);
  for (Eigen::Index i = 0; i < cache->n; ++i) {
    for (Eigen::Index j = 0; j < cache->m; ++j) {
      for (Eigen::Index c = 0; c < k; ++c) s[std::size_t(c)] = A(i, c) + B(j, c);
      const double pq = detail::quadratic_form(cache->cross, i * k, j * k, k, s.data());
      const double pp = detail::quadratic_form(cache->x_self, i * k, 0, k, s.data());
      const double qq = detail::quadratic_form(cache->y_self, j * k, 0, k, s.data());
      if (!(pp > 0.0) || !(qq > 0.0))
        throw NumericDomainError("graph_loss", "zero-norm fused representation for pair (" + std::to_string(i) +
                                                   ", " + std::to_string(j) + ")");
      out(i, j) = 1.0 - std::clamp(pq / std::sqrt(pp * qq), -1.0, 1.0);
    }
  }

  return Tensor::from_op(
      std::move(out), {x, x_maps, y, y_maps},
      [cache](const Matrix&, const Matrix& g, std::span<Tensor> in) {
        const Eigen::Index n = cache->n, m = cache->m, k = cache->k, H = cache->H;
        const Matrix& A = in[1].value();
        const Matrix& B = in[3].value();
        Matrix g_cross = Matrix::Zero(n * k, m * k);
        Matrix g_xself = Matrix::Zero(n * k, k);
        Matrix g_yself = Matrix::Zero(m * k, k);
        Matrix g_a = Matrix::Zero(n, k);
        Matrix g_b = Matrix::Zero(m, k);
        const auto ku = std::size_t(k);
        std::vector<double> s(ku), gc_s(ku), gct_s(ku), gx_s(ku), gy_s(ku);
        for (Eigen::Index i = 0; i < n; ++i) {
          for (Eigen::Index j = 0; j < m; ++j) {
            const double go = g(i, j);
            if (go == 0.0) continue;
            for (Eigen::Index c = 0; c < k; ++c) s[std::size_t(c)] = A(i, c) + B(j, c);
            std::fill(gc_s.begin(), gc_s.end(), 0.0);
            std::fill(gct_s.begin(), gct_s.end(), 0.0);
            std::fill(gx_s.begin(), gx_s.end(), 0.0);
            std::fill(gy_s.begin(), gy_s.end(), 0.0);
            for (Eigen::Index r = 0; r < k; ++r) {
              const double* gc = &cache->cross(i * k + r, j * k);
              const double* gx = &cache->x_self(i * k + r, 0);
              const double* gy = &cache->y_self(j * k + r, 0);
              for (Eigen::Index c = 0; c < k; ++c) {
                gc_s[std::size_t(r)] += gc[c] * s[std::size_t(c)];
                gct_s[std::size_t(c)] += gc[c] * s[std::size_t(r)];
                gx_s[std::size_t(r)] += gx[c] * s[std::size_t(c)];
                gy_s[std::size_t(r)] += gy[c] * s[std::size_t(c)];
              }
            }
            double pq = 0.0, pp = 0.0, qq = 0.0;
            for (std::size_t c = 0; c < ku; ++c) {
              pq += s[c] * gc_s[c];
              pp += s[c] * gx_s[c];
              qq += s[c] * gy_s[c];
            }
            const double r = 1.0 / std::sqrt(pp * qq);
            const double cos = pq * r;
            const double d_pq = -r * go;
            const double d_pp = 0.5 * cos / pp * go;
            const double d_qq = 0.5 * cos / qq * go;
            for (Eigen::Index a = 0; a < k; ++a) {
              double* out_c = &g_cross(i * k + a, j * k);
              double* out_x = &g_xself(i * k + a, 0);
              double* out_y = &g_yself(j * k + a, 0);
              const double sa = s[std::size_t(a)];
              for (Eigen::Index b = 0; b < k; ++b) {
                const double ss = sa * s[std::size_t(b)];
                out_c[b] += d_pq * ss;
                out_x[b] += d_pp * ss;
                out_y[b] += d_qq * ss;
              }
              const auto au = std::size_t(a);
              const double gs = d_pq * (gc_s[au] + gct_s[au]) + 2.0 * d_pp * gx_s[au] + 2.0 * d_qq * gy_s[au];
              g_a(i, a) += gs;
              g_b(j, a) += gs;
            }
          }
        }
        Eigen::Map<const Matrix> xc(in[0].value().data(), n * k, H);
        Eigen::Map<const Matrix> yc(in[2].value().data(), m * k, H);
        if (in[0].requires_grad()) {
          Eigen::Map<Matrix> gx(in[0].mutable_grad().data(), n * k, H);
          gx.noalias() += g_cross * yc;
          for (Eigen::Index i = 0; i < n; ++i)
            gx.middleRows(i * k, k).noalias() += 2.0 * g_xself.middleRows(i * k, k) * xc.middleRows(i * k, k);
        }
        if (in[2].requires_grad()) {
          Eigen::Map<Matrix> gy(in[2].mutable_grad().data(), m * k, H);
          gy.noalias() += g_cross.transpose() * xc;
          for (Eigen::Index j = 0; j < m; ++j)
            gy.middleRows(j * k, k).noalias() += 2.0 * g_yself.middleRows(j * k, k) * yc.middleRows(j * k, k);
        }
        if (in[1].requires_grad()) in[1].mutable_grad() += g_a;
        if (in[3].requires_grad()) in[3].mutable_grad() += g_b;
      });
}

/// l_p of a single pair through the per-instance fusion path.
inline Tensor pair_distance(const Projector& projector, const ReshapedEmbedding& x, const ReshapedEmbedding& y) {
  const bool same = x.modality == y.modality;
  FusedRepresentation p = same ? projector.self_attend(x, y) : projector.co_attend(x, y);
  FusedRepresentation q = same ? projector.self_attend(y, x) : projector.co_attend(y, x);
  try {
    return numgrad::cosine_distance(numgrad::transpose(p.vector), numgrad::transpose(q.vector));
  } catch (const NumericDomainError&) {
    throw NumericDomainError("graph_loss", "zero-norm fused representation");
  }
}

struct GraphLossWeights {
  double alpha = 1.0;
  double beta = 0.1;

  void validate() const {
    if (!(std::isfinite(alpha) && alpha >= 0.0) || !(std::isfinite(beta) && beta >= 0.0))
      throw ConfigError("graph_loss", "alpha and beta must be finite and non-negative");
  }
};

struct GraphLossOptions {
  bool udp_signed = false;     // literal signed (l_p - d) instead of |l_p - d|
  bool symmetric_udp = false;  // add the text-to-image unpaired term
  std::optional<double> global_d_mean;  // precomputed over the training set; otherwise per batch
};

/// One mini-batch: abstract features and attention maps of both modalities
/// plus the raw (denoised) inputs the reference distances are measured on.
struct BatchContext {
  Tensor image;            // n x L
  Tensor text;             // n x L
  Tensor image_attention;  // n x k
  Tensor text_attention;   // n x k
  Matrix raw_image;        // n x d_img
  Matrix raw_text;         // n x d_txt
  Eigen::Index k = 0;

  Eigen::Index size() const { return image.rows(); }
};

inline BatchContext make_batch_context(const Projector& projector, Matrix raw_image, Matrix raw_text) {
  if (raw_image.rows() != raw_text.rows())
    throw DimensionError("graph_loss", "image and text batches differ in size");
  BatchContext ctx;
  ctx.image = projector.encode(Tensor::constant(raw_image), Modality::image);
  ctx.text = projector.encode(Tensor::constant(raw_text), Modality::text);
  ctx.image_attention = projector.attention_maps(ctx.image);
  ctx.text_attention = projector.attention_maps(ctx.text);
  ctx.raw_image = std::move(raw_image);
  ctx.raw_text = std::move(raw_text);
  ctx.k = projector.shape().k;
  return ctx;
}

/// l_p for the three pair families of a batch.
struct PairDistances {
  Tensor image_text;   // [i][j] = l_p(v_i, t_j), co-attention
  Tensor image_image;  // [i][j] = l_p(v_i, v_j), self-attention
  Tensor text_text;    // [i][j] = l_p(t_i, t_j), self-attention
};

inline PairDistances pair_distances(const BatchContext& ctx) {
  return {pair_distance_matrix(ctx.image, ctx.image_attention, ctx.text, ctx.text_attention, ctx.k),
          pair_distance_matrix(ctx.image, ctx.image_attention, ctx.image, ctx.image_attention, ctx.k),
          pair_distance_matrix(ctx.text, ctx.text_attention, ctx.text, ctx.text_attention, ctx.k)};
}

namespace detail {

inline Matrix raw_cosine_distances(const Matrix& x) {
  Eigen::VectorXd norms = x.rowwise().norm();
  if ((norms.array() == 0.0).any())
    throw NumericDomainError("graph_loss", "zero-norm raw feature vector in batch");
  Matrix unit = norms.cwiseInverse().asDiagonal() * x;
  Matrix d = Matrix::Ones(x.rows(), x.rows());
  d.noalias() -= unit * unit.transpose();
  return d;
}

inline Matrix off_diagonal_mask(Eigen::Index n) {
  Matrix m = Matrix::Ones(n, n);
  m.diagonal().setZero();
  return m;
}

}  // namespace detail

/// Geometric mean of the raw image and raw text cosine distances for every
/// pair, zero on the diagonal. Negative rounding residue is clipped to 0.
inline Matrix original_distances(const Matrix& raw_image, const Matrix& raw_text) {
  Matrix du = detail::raw_cosine_distances(raw_image);
  Matrix dc = detail::raw_cosine_distances(raw_text);
  Matrix d = du.cwiseProduct(dc).cwiseMax(0.0).cwiseSqrt();
  d.diagonal().setZero();
  return d;
}

/// d_mean at or below this is rounding noise from identical rows, not a scale.
inline constexpr double kMinMeanDistance = 1e-12;

/// Mean of d_ori over all unordered pairs i != j.
inline double mean_original_distance(const Matrix& d_ori) {
  const Eigen::Index n = d_ori.rows();
  if (n < 2) throw ContractError("graph_loss", "d_mean needs at least two instances");
  return (d_ori.sum() - d_ori.diagonal().sum()) / double(n * (n - 1));
}

/// d = d_ori / d_mean for one pair.
inline double reference_distance(const Eigen::Ref<const Eigen::RowVectorXd>& u_i,
                                 const Eigen::Ref<const Eigen::RowVectorXd>& u_j,
                                 const Eigen::Ref<const Eigen::RowVectorXd>& c_i,
                                 const Eigen::Ref<const Eigen::RowVectorXd>& c_j, double d_mean) {
  if (!(d_mean > kMinMeanDistance)) throw DegenerateBatchError("graph_loss", "d_mean is zero; every pair is identical");
  auto dcos = [](const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw NumericDomainError("graph_loss", "zero-norm raw feature vector");
    return 1.0 - a.dot(b) / (na * nb);
  };
  const double prod = dcos(u_i, u_j) * dcos(c_i, c_j);
  return std::sqrt(std::max(0.0, prod)) / d_mean;
}

/// n x n reference distances of a batch (constants; no gradient reaches U or C).
inline Matrix reference_distances(const BatchContext& ctx, const GraphLossOptions& options = {}) {
  Matrix d_ori = original_distances(ctx.raw_image, ctx.raw_text);
  const double d_mean = options.global_d_mean ? *options.global_d_mean : mean_original_distance(d_ori);
  if (!(d_mean > kMinMeanDistance)) throw DegenerateBatchError("graph_loss", "d_mean is zero; every pair is identical");
  return d_ori / d_mean;
}

/// Mean over i of l_p(v_i, t_i).
inline Tensor pairwise_loss(const PairDistances& pd) {
  const Eigen::Index n = pd.image_text.rows();
  if (n < 1) throw ContractError("graph_loss", "pairwise loss of an empty batch");
  Matrix eye = Matrix::Identity(n, n);
  return numgrad::scale(numgrad::sum(numgrad::hadamard(pd.image_text, Tensor::constant(eye))), 1.0 / double(n));
}

inline Tensor pairwise_loss(const BatchContext& ctx) {
  if (ctx.size() < 1) throw ContractError("graph_loss", "pairwise loss of an empty batch");
  Tensor diag = pair_distance_matrix(ctx.image, ctx.image_attention, ctx.text, ctx.text_attention, ctx.k);
  return pairwise_loss(PairDistances{diag, {}, {}});
}

/// (1/n) sum_i [l_unp(v_i, T) + l_unp(v_i, V) + l_unp(t_i, T)] with
/// l_unp(x_i, Y) = (1/n) sum_{j != i} |l_p(x_i, y_j) - d(i, j)|.
inline Tensor unpaired_loss(const PairDistances& pd, const Matrix& reference, const GraphLossOptions& options = {}) {
  const Eigen::Index n = pd.image_text.rows();
  if (n < 2) throw ContractError("graph_loss", "unpaired loss needs at least two instances");
  Tensor d = Tensor::constant(reference);
  Tensor mask = Tensor::constant(detail::off_diagonal_mask(n));
  auto term = [&](const Tensor& lp) {
    Tensor diff = numgrad::sub(lp, d);
    if (!options.udp_signed) diff = numgrad::abs(diff);
    return numgrad::sum(numgrad::hadamard(diff, mask));
  };
  Tensor total = numgrad::add(numgrad::add(term(pd.image_text), term(pd.image_image)), term(pd.text_text));
  if (options.symmetric_udp) total = numgrad::add(total, term(numgrad::transpose(pd.image_text)));
  return numgrad::scale(total, 1.0 / double(n * n));
}

inline Tensor unpaired_loss(const BatchContext& ctx, const GraphLossOptions& options = {}) {
  if (ctx.size() < 2) throw ContractError("graph_loss", "unpaired loss needs at least two instances");
  return unpaired_loss(pair_distances(ctx), reference_distances(ctx, options), options);
}

/// Mean over ordered pairs i != j of the three absolute disagreements between
/// the cross-modal, image-image and text-text distances.
inline Tensor mutual_loss(const PairDistances& pd) {
  const Eigen::Index n = pd.image_text.rows();
  if (n < 2) throw ContractError("graph_loss", "mutual loss needs at least two instances");
  Tensor mask = Tensor::constant(detail::off_diagonal_mask(n));
  using numgrad::abs;
  using numgrad::sub;
  Tensor per_pair = numgrad::add(numgrad::add(abs(sub(pd.image_text, pd.image_image)),
                                              abs(sub(pd.image_text, pd.text_text))),
                                 abs(sub(pd.image_image, pd.text_text)));
  return numgrad::scale(numgrad::sum(numgrad::hadamard(per_pair, mask)), 1.0 / double(n * (n - 1)));
}

inline Tensor mutual_loss(const BatchContext& ctx) {
  if (ctx.size() < 2) throw ContractError("graph_loss", "mutual loss needs at least two instances");
  return mutual_loss(pair_distances(ctx));
}

struct GraphLossReport {
  Tensor l_pdl;
  Tensor l_udp;
  Tensor l_mdp;
  Tensor l_gpl;
};

/// l_gpl = l_pdl + alpha l_udp + beta l_mdp.
inline GraphLossReport graph_pattern_loss(const BatchContext& ctx, const GraphLossWeights& weights,
                                          const GraphLossOptions& options = {}) {
  weights.validate();
  if (ctx.size() < 2) throw ContractError("graph_loss", "graph pattern loss needs at least two instances");
  PairDistances pd = pair_distances(ctx);
  GraphLossReport r;
  r.l_pdl = pairwise_loss(pd);
  r.l_udp = unpaired_loss(pd, reference_distances(ctx, options), options);
  r.l_mdp = mutual_loss(pd);
  r.l_gpl = numgrad::add(numgrad::add(r.l_pdl, numgrad::scale(r.l_udp, weights.alpha)),
                         numgrad::scale(r.l_mdp, weights.beta));
  return r;
}

}  // namespace gpldan
