#pragma once

// Diversified attention feature projector.
//
// Raw features of each modality pass through a modality-specific entry layer
// and a layer shared by both modalities, giving abstract features of width L.
// Each abstract feature is cut into k contiguous sub-representations of
// height H = L / k, which form the columns of an HxK matrix. An attention map
// over the k columns is computed per instance, and an instance is fused with a
// partner by weighting its columns with the sum of both attention maps.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gpldan/numgrad.hpp"

namespace gpldan {

using numgrad::Matrix;
using numgrad::Tensor;

enum class Modality { image, text };

inline const char* to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

struct ProjectorShape {
  Eigen::Index image_dim = 0;
  Eigen::Index text_dim = 0;
  Eigen::Index entry_width = 1024;   // E
  Eigen::Index common_width = 1024;  // L
  Eigen::Index k = 4;

  Eigen::Index sub_dim() const { return common_width / k; }  // H
  Eigen::Index attention_dim() const { return std::max<Eigen::Index>(1, sub_dim() / 2); }  // D

  void validate() const {
    if (image_dim <= 0 || text_dim <= 0 || entry_width <= 0 || common_width <= 0)
      throw ConfigError("projector", "all layer widths must be positive");
    if (k <= 0 || common_width % k != 0)
      throw ConfigError("projector", "k=" + std::to_string(k) + " does not divide L=" + std::to_string(common_width));
  }
};

struct ProjectorParams {
  Tensor w_image;   // image_dim x E
  Tensor w_text;    // text_dim x E
  Tensor w_shared;  // E x L
  Tensor w_att1;    // D x H
  Tensor w_att2;    // 1 x D

  std::vector<Tensor> all() const { return {w_image, w_text, w_shared, w_att1, w_att2}; }
};

/// An abstract feature viewed as H x k; column j holds elements [jH, (j+1)H).
struct ReshapedEmbedding {
  Tensor matrix;
  Modality modality = Modality::image;
  std::size_t instance = 0;

  Eigen::Index sub_dim() const { return matrix.rows(); }
  Eigen::Index k() const { return matrix.cols(); }
};

struct FusedRepresentation {
  enum class Mode { self, co };

  Tensor vector;  // H x 1
  std::size_t instance = 0;
  std::size_t partner = 0;
  Mode mode = Mode::self;
};

/// Zeroes each element independently with probability `rate`.
inline Matrix denoise(const Matrix& x, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("projector", "denoise rate must lie in [0, 1), got " + std::to_string(rate));
  Matrix out = x;
  if (rate == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (u(rng) < rate) out.data()[i] = 0.0;
  return out;
}

/// Views a 1 x L abstract feature as H x k.
inline Tensor reshape_k(const Tensor& v, Eigen::Index k) {
  if (v.rows() != 1) throw DimensionError("projector", "reshape_k expects a 1xL row, got " + v.shape());
  if (k <= 0 || v.cols() % k != 0)
    throw ConfigError("projector", "k=" + std::to_string(k) + " does not divide L=" + std::to_string(v.cols()));
  return numgrad::transpose(numgrad::reshape(v, k, v.cols() / k));
}

namespace detail {

inline Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace detail

class Projector {
 public:
  Projector(ProjectorShape shape, std::uint64_t seed) : shape_(shape) {
    shape_.validate();
    std::mt19937_64 rng(seed);
    const auto E = shape_.entry_width, L = shape_.common_width, H = shape_.sub_dim(), D = shape_.attention_dim();
    params_.w_image = Tensor::parameter(detail::uniform_init(shape_.image_dim, E, double(shape_.image_dim), rng));
    params_.w_text = Tensor::parameter(detail::uniform_init(shape_.text_dim, E, double(shape_.text_dim), rng));
    params_.w_shared = Tensor::parameter(detail::uniform_init(E, L, double(E), rng));
    params_.w_att1 = Tensor::parameter(detail::uniform_init(D, H, double(H), rng));
    params_.w_att2 = Tensor::parameter(detail::uniform_init(1, D, double(D), rng));
  }

  Projector(ProjectorShape shape, ProjectorParams params) : shape_(shape), params_(std::move(params)) {
    shape_.validate();
    auto check = [](const Tensor& t, Eigen::Index r, Eigen::Index c, const char* name) {
      if (!t.defined() || t.rows() != r || t.cols() != c)
        throw DimensionError("projector", std::string(name) + " must be " + numgrad::detail::shape_str(r, c));
    };
    check(params_.w_image, shape_.image_dim, shape_.entry_width, "w_image");
    check(params_.w_text, shape_.text_dim, shape_.entry_width, "w_text");
    check(params_.w_shared, shape_.entry_width, shape_.common_width, "w_shared");
    check(params_.w_att1, shape_.attention_dim(), shape_.sub_dim(), "w_att1");
    check(params_.w_att2, 1, shape_.attention_dim(), "w_att2");
  }

  const ProjectorShape& shape() const noexcept { return shape_; }
  const ProjectorParams& params() const noexcept { return params_; }
  ProjectorParams& params() noexcept { return params_; }

  /// With diversified attention off every map is the uniform 1/k vector and
  /// the attention weights take no part in the computation.
  void set_diversified_attention(bool on) noexcept { diversified_attention_ = on; }
  bool diversified_attention() const noexcept { return diversified_attention_; }

  /// n x d raw features -> n x L abstract features, tanh(tanh(x W_m) W_shared).
  Tensor encode(const Tensor& x, Modality m) const {
    const Tensor& entry = m == Modality::image ? params_.w_image : params_.w_text;
    if (x.cols() != entry.rows())
      throw DimensionError("projector", std::string("encode(") + to_string(m) + "): expected " +
                                            std::to_string(entry.rows()) + " columns, got " + x.shape());
    using namespace numgrad;
    return numgrad::tanh(matmul(numgrad::tanh(matmul(x, entry)), params_.w_shared));
  }

  ReshapedEmbedding reshape(const Tensor& v, Modality m, std::size_t instance) const {
    if (v.cols() != shape_.common_width)
      throw DimensionError("projector", "abstract feature must have L=" + std::to_string(shape_.common_width) +
                                            " columns, got " + v.shape());
    return {reshape_k(v, shape_.k), m, instance};
  }

  /// k x 1 probability vector softmax((W2 tanh(W1 x))^T).
  Tensor attention_map(const ReshapedEmbedding& x) const {
    if (x.sub_dim() != shape_.sub_dim() || x.k() != shape_.k)
      throw DimensionError("projector", "attention_map: embedding must be " +
                                            numgrad::detail::shape_str(shape_.sub_dim(), shape_.k) + ", got " +
                                            x.matrix.shape());
    if (!diversified_attention_) return Tensor::constant(Matrix::Constant(shape_.k, 1, 1.0 / double(shape_.k)));
    using namespace numgrad;
    Tensor logits = matmul(params_.w_att2, numgrad::tanh(matmul(params_.w_att1, x.matrix)));
    return softmax_cols(transpose(logits));
  }

  /// Attention maps of a whole batch: n x L abstract features -> n x k, one map per row.
  Tensor attention_maps(const Tensor& abstract) const {
    if (abstract.cols() != shape_.common_width)
      throw DimensionError("projector", "attention_maps: expected L=" + std::to_string(shape_.common_width) +
                                            " columns, got " + abstract.shape());
    const Eigen::Index n = abstract.rows(), k = shape_.k, H = shape_.sub_dim();
    if (!diversified_attention_) return Tensor::constant(Matrix::Constant(n, k, 1.0 / double(k)));
    using namespace numgrad;
    // Row (i*k + c) of the reshaped stack is column c of instance i.
    Tensor columns = numgrad::reshape(abstract, n * k, H);
    Tensor hidden = numgrad::tanh(matmul(columns, transpose(params_.w_att1)));
    Tensor logits = matmul(hidden, transpose(params_.w_att2));
    return softmax_rows(numgrad::reshape(logits, n, k));
  }

  FusedRepresentation self_attend(const ReshapedEmbedding& xi, const ReshapedEmbedding& xj) const {
    if (xi.modality != xj.modality)
      throw ContractError("projector", "self_attend needs two embeddings of the same modality");
    return fuse(xi, xj, FusedRepresentation::Mode::self);
  }

  FusedRepresentation co_attend(const ReshapedEmbedding& xi, const ReshapedEmbedding& yj) const {
    if (xi.modality == yj.modality)
      throw ContractError("projector", "co_attend needs embeddings of opposite modalities");
    return fuse(xi, yj, FusedRepresentation::Mode::co);
  }

 private:
  FusedRepresentation fuse(const ReshapedEmbedding& xi, const ReshapedEmbedding& xj,
                           FusedRepresentation::Mode mode) const {
    if (xi.matrix.rows() != xj.matrix.rows() || xi.matrix.cols() != xj.matrix.cols())
      throw DimensionError("projector", "fusion of differently shaped embeddings " + xi.matrix.shape() + " and " +
                                            xj.matrix.shape());
    Tensor weights = numgrad::add(attention_map(xi), attention_map(xj));
    return {numgrad::matmul(xi.matrix, weights), xi.instance, xj.instance, mode};
  }

  ProjectorShape shape_;
  ProjectorParams params_;
  bool diversified_attention_ = true;
};

}  // namespace gpldan
