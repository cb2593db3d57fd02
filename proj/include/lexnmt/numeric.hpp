#ifndef LEXNMT_NUMERIC_HPP
#define LEXNMT_NUMERIC_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace lexnmt {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

// Column-wise stable softmax (subtracts the column max before exponentiating).
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const Scalar peak = logits.col(j).maxCoeff();
    out.col(j) = (logits.col(j).array() - peak).exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) return -std::numeric_limits<Scalar>::infinity();
  const Scalar peak = x.maxCoeff();
  if (!std::isfinite(peak)) return peak;
  return peak + std::log((x.array() - peak).exp().sum());
}

template <typename Derived>
MatrixX<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    out.col(j) = logits.col(j).array() - log_sum_exp(logits.col(j));
  return out;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

// Portable uniform draw in [0, 1); std::uniform_real_distribution is not
// specified bit-for-bit across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Draws an index from an unnormalized non-negative weight vector.
template <typename Derived>
Eigen::Index sample_categorical(const Eigen::MatrixBase<Derived>& weights, std::mt19937_64& rng) {
  const double total = static_cast<double>(weights.sum());
  const double target = uniform01(rng) * total;
  double running = 0.0;
  Eigen::Index last_positive = 0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    const double w = static_cast<double>(weights(i));
    if (w <= 0.0) continue;
    running += w;
    last_positive = i;
    if (target < running) return i;
  }
  return last_positive;
}

}  // namespace lexnmt

#endif  // LEXNMT_NUMERIC_HPP
