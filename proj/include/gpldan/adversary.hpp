#pragma once

// Modality classifier D and its coupling to the projector G.

#include <cmath>
#include <cstdint>
#include <random>

#include "gpldan/numgrad.hpp"
#include "gpldan/projector.hpp"

namespace gpldan {

/// One-hot modality labels: image = (1, 0), text = (0, 1).
struct ModalityLabel {
  double image;
  double text;

  static constexpr ModalityLabel of(Modality m) { return m == Modality::image ? ModalityLabel{1, 0} : ModalityLabel{0, 1}; }
  static constexpr ModalityLabel opposite(Modality m) { return of(m == Modality::image ? Modality::text : Modality::image); }
};

inline constexpr double kCrossEntropyClamp = 1e-12;

/// Two-layer perceptron L -> L/2 -> 2 with tanh hidden units and softmax output.
class ModalityClassifier {
 public:
  ModalityClassifier(Eigen::Index common_width, std::uint64_t seed) {
    if (common_width < 2) throw ConfigError("adversary", "classifier input width must be at least 2");
    std::mt19937_64 rng(seed);
    const Eigen::Index hidden = common_width / 2;
    w_hidden_ = Tensor::parameter(detail::uniform_init(common_width, hidden, double(common_width), rng));
    w_out_ = Tensor::parameter(detail::uniform_init(hidden, 2, double(hidden), rng));
  }

  ModalityClassifier(Tensor w_hidden, Tensor w_out) : w_hidden_(std::move(w_hidden)), w_out_(std::move(w_out)) {
    if (w_hidden_.cols() != w_out_.rows() || w_out_.cols() != 2)
      throw DimensionError("adversary", "classifier weights " + w_hidden_.shape() + ", " + w_out_.shape() +
                                            " do not chain to two outputs");
  }

  Eigen::Index input_width() const { return w_hidden_.rows(); }
  const Tensor& w_hidden() const noexcept { return w_hidden_; }
  const Tensor& w_out() const noexcept { return w_out_; }
  std::vector<Tensor> params() const { return {w_hidden_, w_out_}; }

  /// n x L features -> n x 2 modality probabilities. A frozen pass reads the
  /// weights as constants so no gradient reaches them.
  Tensor classify(const Tensor& features, bool frozen = false) const {
    if (features.cols() != input_width())
      throw DimensionError("adversary", "classify expects " + std::to_string(input_width()) + " columns, got " +
                                            features.shape());
    const Tensor w1 = frozen ? w_hidden_.detach() : w_hidden_;
    const Tensor w2 = frozen ? w_out_.detach() : w_out_;
    return numgrad::softmax_rows(numgrad::matmul(numgrad::tanh(numgrad::matmul(features, w1)), w2));
  }

 private:
  Tensor w_hidden_;
  Tensor w_out_;
};

/// -(y log x + (1 - y) log(1 - x)) summed over both components, averaged over rows.
inline Tensor cross_entropy(const Tensor& pred, ModalityLabel label) {
  if (pred.cols() != 2 || pred.rows() < 1)
    throw DimensionError("adversary", "cross_entropy expects n x 2 probabilities, got " + pred.shape());
  using namespace numgrad;
  Matrix y(pred.rows(), 2);
  y.col(0).setConstant(label.image);
  y.col(1).setConstant(label.text);
  Tensor p = clamp(pred, kCrossEntropyClamp, 1.0 - kCrossEntropyClamp);
  Tensor pos = hadamard(Tensor::constant(y), numgrad::log(p));
  Tensor neg = hadamard(Tensor::constant(Matrix::Ones(y.rows(), 2) - y), numgrad::log(add_scalar(scale(p, -1.0), 1.0)));
  return scale(sum(add(pos, neg)), -1.0 / double(pred.rows()));
}

/// L_D: classifier trained to tell image features from text features. The
/// projector outputs are read as constants.
inline Tensor classifier_loss(const ModalityClassifier& d, const Tensor& image_features, const Tensor& text_features) {
  return numgrad::add(cross_entropy(d.classify(image_features.detach()), ModalityLabel::of(Modality::image)),
                      cross_entropy(d.classify(text_features.detach()), ModalityLabel::of(Modality::text)));
}

/// L_D with the labels swapped, evaluated through a frozen classifier.
inline Tensor confusion_loss(const ModalityClassifier& d, const Tensor& image_features, const Tensor& text_features) {
  return numgrad::add(cross_entropy(d.classify(image_features, true), ModalityLabel::opposite(Modality::image)),
                      cross_entropy(d.classify(text_features, true), ModalityLabel::opposite(Modality::text)));
}

/// L_G = L_gpl + lambda * confusion.
inline Tensor generator_loss(const Tensor& graph_loss, const ModalityClassifier& d, const Tensor& image_features,
                             const Tensor& text_features, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("adversary", "lambda must be finite and >= 0");
  if (lambda == 0.0) return graph_loss;
  return numgrad::add(graph_loss, numgrad::scale(confusion_loss(d, image_features, text_features), lambda));
}

}  // namespace gpldan
