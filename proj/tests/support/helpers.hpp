#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "gpldan/numgrad.hpp"

namespace testing_support {

using gpldan::numgrad::Matrix;
using gpldan::numgrad::Tensor;

inline Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double sigma = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Matrix uniform(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Central differences of `loss` with respect to every entry of a leaf,
/// perturbing its value in place and restoring it afterwards.
inline Matrix central_difference(Tensor& leaf, const std::function<double()>& loss, double h = 1e-6) {
  Matrix g(leaf.rows(), leaf.cols());
  Matrix& w = leaf.mutable_value();
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double saved = w.data()[i];
    w.data()[i] = saved + h;
    const double up = loss();
    w.data()[i] = saved - h;
    const double down = loss();
    w.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const Matrix& a, const Matrix& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gpldan_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
