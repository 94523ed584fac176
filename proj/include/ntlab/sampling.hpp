#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ntlab/rng.hpp"

namespace ntlab {

/// Below this temperature sampling is replaced by an exact argmax.
inline constexpr double kArgmaxTemperature = 1e-4;

/// Index of the largest entry; ties go to the smallest index.
template <typename Derived>
Eigen::Index argmax(const Eigen::DenseBase<Derived>& h) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < h.size(); ++i)
    if (h(i) > h(best)) best = i;
  return best;
}

/// exp(h_a / T) / sum_k exp(h_k / T), stabilized by subtracting the maximum.
/// Entries equal to -inf get probability 0. For T below kArgmaxTemperature the
/// result is the argmax one-hot.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax_t(const Eigen::MatrixBase<Derived>& h, double temperature) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax_t: temperature must be positive");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> p(h.size());
  if (temperature < kArgmaxTemperature) {
    p.setZero();
    p(argmax(h)) = Scalar(1);
    return p;
  }
  const Scalar mx = h.maxCoeff();
  if (!std::isfinite(double(mx))) throw std::invalid_argument("softmax_t: no finite logit");
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    const Scalar v = h(i);
    p(i) = v == -std::numeric_limits<Scalar>::infinity() ? Scalar(0) : Scalar(std::exp(double(v - mx) / temperature));
  }
  p /= p.sum();
  return p;
}

/// Draws an index from an unnormalized non-negative weight vector.
template <typename Derived>
Eigen::Index sample_categorical(const Eigen::MatrixBase<Derived>& weights, Rng& rng) {
  const double total = double(weights.sum());
  const double u = rng.uniform01() * total;
  double acc = 0.0;
  Eigen::Index last = 0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (weights(i) <= 0) continue;
    acc += double(weights(i));
    last = i;
    if (u < acc) return i;
  }
  return last;
}

/// softmax_t followed by a draw; exact argmax below kArgmaxTemperature.
template <typename Derived>
Eigen::Index sample_with_temperature(const Eigen::MatrixBase<Derived>& h, double temperature, Rng& rng) {
  if (temperature < kArgmaxTemperature) return argmax(h);
  return sample_categorical(softmax_t(h, temperature), rng);
}

}  // namespace ntlab
