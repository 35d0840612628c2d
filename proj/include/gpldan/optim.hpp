#pragma once

#include <cmath>
#include <vector>

#include "gpldan/numgrad.hpp"

namespace gpldan::numgrad {

// Weight decay in both optimizers is decoupled: p -= lr * weight_decay * p,
// applied before the gradient update.

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct RmspropOptions {
  double lr = 5e-5;
  double alpha = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

namespace detail {

inline void require_trainable(const std::vector<Tensor>& params, const char* who) {
  for (const Tensor& p : params) {
    if (!p.defined() || !p.requires_grad() || !p.is_leaf())
      throw ContractError("numgrad", std::string(who) + ": parameter has no gradient buffer");
  }
}

}  // namespace detail

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    detail::require_trainable(params_, "Adam");
    for (const Tensor& p : params_) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  /// Applies one update from the current gradients. Gradients are left as-is.
  void step() {
    detail::require_trainable(params_, "Adam");
    ++steps_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Matrix& w = params_[i].mutable_value();
      const Matrix& g = params_[i].grad();
      const double decay = 1.0 - opt_.lr * opt_.weight_decay;
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseAbs2();
      w.array() = w.array() * decay - opt_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  long steps() const noexcept { return steps_; }
  const AdamOptions& options() const noexcept { return opt_; }
  const std::vector<Matrix>& first_moments() const noexcept { return m_; }
  const std::vector<Matrix>& second_moments() const noexcept { return v_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions opt_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long steps_ = 0;
};

class Rmsprop {
 public:
  Rmsprop(std::vector<Tensor> params, RmspropOptions options) : params_(std::move(params)), opt_(options) {
    detail::require_trainable(params_, "RMSprop");
    for (const Tensor& p : params_) sq_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }

  void step() {
    detail::require_trainable(params_, "RMSprop");
    ++steps_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Matrix& w = params_[i].mutable_value();
      const Matrix& g = params_[i].grad();
      if (opt_.weight_decay != 0.0) w *= (1.0 - opt_.lr * opt_.weight_decay);
      sq_[i] = opt_.alpha * sq_[i] + (1.0 - opt_.alpha) * g.cwiseAbs2();
      w.array() -= opt_.lr * g.array() / (sq_[i].array().sqrt() + opt_.eps);
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  long steps() const noexcept { return steps_; }
  const RmspropOptions& options() const noexcept { return opt_; }
  const std::vector<Matrix>& square_averages() const noexcept { return sq_; }

 private:
  std::vector<Tensor> params_;
  RmspropOptions opt_;
  std::vector<Matrix> sq_;
  long steps_ = 0;
};

}  // namespace gpldan::numgrad
