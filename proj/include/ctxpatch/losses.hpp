#pragma once

#include <cmath>
#include <span>

#include "ctxpatch/image.hpp"
#include "json.hpp"

namespace ctxpatch {

/// Smoothing used inside the square root of the TV term while optimizing.
inline constexpr double kTvEpsilon = 1e-8;

struct LossBreakdown {
  double adv = 0;
  double tv = 0;
  double total = 0;
  double lambda = 0;
  int n_detections = 0;
};

/// Mean objectness over the detections matched to targets; 0 when none remain.
inline double adversary_loss(std::span<const double> objectness) {
  if (objectness.empty()) return 0.0;
  double sum = 0;
  for (double p : objectness) sum += p;
  return sum / double(objectness.size());
}

/// Total variation of one channel, summed over every (i, j) that has both a
/// lower and a right neighbor. With epsilon > 0 each term is
/// sqrt(d^2 + eps) - sqrt(eps), which keeps constants at exactly zero.
template <typename Plane>
double tv_plane(const Plane& p, double epsilon = 0.0) {
  const double offset = std::sqrt(epsilon);
  double sum = 0;
  for (Index i = 0; i + 1 < p.rows(); ++i)
    for (Index j = 0; j + 1 < p.cols(); ++j) {
      const double a = double(p(i + 1, j)) - double(p(i, j));
      const double b = double(p(i, j + 1)) - double(p(i, j));
      sum += std::sqrt(a * a + b * b + epsilon) - offset;
    }
  return sum;
}

/// TV of an image canvas, computed per channel and summed.
template <typename Scalar>
double tv_loss(const Image<Scalar>& canvas, double epsilon = 0.0) {
  double sum = 0;
  for (Index ch = 0; ch < 3; ++ch) {
    // Channel rows are contiguous in row-major pixel order.
    Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> plane =
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            canvas.data().data() + ch * canvas.pixels(), canvas.height(), canvas.width());
    sum += tv_plane(plane, epsilon);
  }
  return sum;
}

/// d tv_loss / d canvas. Terms with a zero root contribute nothing (epsilon = 0).
template <typename Scalar>
typename Image<Scalar>::Storage tv_gradient(const Image<Scalar>& canvas, double epsilon = kTvEpsilon) {
  typename Image<Scalar>::Storage g = Image<Scalar>::Storage::Zero(3, canvas.pixels());
  const Index w = canvas.width();
  for (Index ch = 0; ch < 3; ++ch)
    for (Index i = 0; i + 1 < canvas.height(); ++i)
      for (Index j = 0; j + 1 < w; ++j) {
        const double p = canvas(i, j, ch);
        const double a = double(canvas(i + 1, j, ch)) - p;
        const double b = double(canvas(i, j + 1, ch)) - p;
        const double t = std::sqrt(a * a + b * b + epsilon);
        if (t == 0) continue;
        g(ch, (i + 1) * w + j) += Scalar(a / t);
        g(ch, i * w + j + 1) += Scalar(b / t);
        g(ch, i * w + j) -= Scalar((a + b) / t);
      }
  return g;
}

/// L = adv + lambda * tv.
inline LossBreakdown total_loss(double adv, double tv, double lambda, int n_detections = 0) {
  if (!(lambda >= 0)) throw InvalidArgument("lambda must be non-negative");
  return {adv, tv, adv + lambda * tv, lambda, n_detections};
}

inline nlohmann::json to_json(const LossBreakdown& l) {
  return {{"adv", l.adv}, {"tv", l.tv}, {"total", l.total}, {"lambda", l.lambda}, {"n_detections", l.n_detections}};
}

}  // namespace ctxpatch
