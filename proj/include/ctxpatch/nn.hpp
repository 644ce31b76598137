#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "ctxpatch/image.hpp"

namespace ctxpatch::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Spatial shape of a channels x (height*width) feature map.
struct Shape {
  Index channels = 0, height = 0, width = 0;
  Index pixels() const { return height * width; }
};

struct ConvSpec {
  std::string name;
  int in = 0, out = 0, kernel = 3, stride = 1;
  bool activation = true;  // SiLU

  int pad() const { return kernel / 2; }
  Shape output(const Shape& s) const {
    return {out, (s.height + 2 * pad() - kernel) / stride + 1, (s.width + 2 * pad() - kernel) / stride + 1};
  }
};

template <typename Scalar>
void im2col(const Matrix<Scalar>& x, const Shape& in, const ConvSpec& spec, const Shape& out, Matrix<Scalar>& cols) {
  const int k = spec.kernel, s = spec.stride, pad = spec.pad();
  cols.resize(in.channels * k * k, out.pixels());
  for (Index c = 0; c < in.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        Scalar* dst = cols.row((c * k + ky) * k + kx).data();
        const Scalar* src = x.row(c).data();
        for (Index oy = 0; oy < out.height; ++oy) {
          const Index iy = oy * s + ky - pad;
          Scalar* d = dst + oy * out.width;
          if (iy < 0 || iy >= in.height) {
            std::fill(d, d + out.width, Scalar(0));
            continue;
          }
          const Scalar* row = src + iy * in.width;
          for (Index ox = 0; ox < out.width; ++ox) {
            const Index ix = ox * s + kx - pad;
            d[ox] = (ix < 0 || ix >= in.width) ? Scalar(0) : row[ix];
          }
        }
      }
}

/// Adjoint of im2col: scatters column gradients back onto the input map.
template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, const Shape& in, const ConvSpec& spec, const Shape& out, Matrix<Scalar>& x) {
  const int k = spec.kernel, s = spec.stride, pad = spec.pad();
  x.setZero(in.channels, in.pixels());
  for (Index c = 0; c < in.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* src = cols.row((c * k + ky) * k + kx).data();
        Scalar* dst = x.row(c).data();
        for (Index oy = 0; oy < out.height; ++oy) {
          const Index iy = oy * s + ky - pad;
          if (iy < 0 || iy >= in.height) continue;
          const Scalar* g = src + oy * out.width;
          Scalar* row = dst + iy * in.width;
          for (Index ox = 0; ox < out.width; ++ox) {
            const Index ix = ox * s + kx - pad;
            if (ix >= 0 && ix < in.width) row[ix] += g[ox];
          }
        }
      }
}

template <typename Scalar>
struct ConvParams {
  Matrix<Scalar> weight;  // out x (in * k * k)
  Vector<Scalar> bias;    // out
};

/// Intermediate values of one forward pass, kept for backward().
template <typename Scalar>
struct ForwardCache {
  std::vector<Shape> shapes;  // shapes[0] is the input, shapes[l+1] the output of layer l
  std::vector<Matrix<Scalar>> cols;
  std::vector<Matrix<Scalar>> pre;  // pre-activation
  std::vector<Matrix<Scalar>> out;  // post-activation
};

template <typename Scalar>
inline Scalar sigmoid(Scalar z) {
  return Scalar(1) / (Scalar(1) + std::exp(-z));
}

/// A chain of same-padded convolutions.
template <typename Scalar>
class ConvChain {
 public:
  ConvChain() = default;
  ConvChain(std::vector<ConvSpec> specs, std::vector<ConvParams<Scalar>> params)
      : specs_(std::move(specs)), params_(std::move(params)) {}

  const std::vector<ConvSpec>& specs() const { return specs_; }
  const std::vector<ConvParams<Scalar>>& params() const { return params_; }

  template <typename Input>
  Matrix<Scalar> forward(const Input& x, const Shape& in, ForwardCache<Scalar>* cache) const {
    Matrix<Scalar> cur = x;
    Shape shape = in;
    Matrix<Scalar> cols;
    if (cache) {
      cache->shapes.assign(1, in);
      cache->cols.clear();
      cache->pre.clear();
      cache->out.clear();
    }
    for (std::size_t l = 0; l < specs_.size(); ++l) {
      const ConvSpec& spec = specs_[l];
      const Shape out = spec.output(shape);
      im2col(cur, shape, spec, out, cols);
      Matrix<Scalar> z = params_[l].weight * cols;
      z.colwise() += params_[l].bias;
      Matrix<Scalar> y;
      if (spec.activation) {
        y = z.array() / (Scalar(1) + (-z.array()).exp());
      } else {
        y = z;
      }
      if (cache) {
        cache->shapes.push_back(out);
        cache->cols.push_back(std::move(cols));
        cache->pre.push_back(std::move(z));
        cache->out.push_back(y);
      }
      cur = std::move(y);
      shape = out;
    }
    return cur;
  }

  struct Gradients {
    Matrix<Scalar> input;                    // empty unless requested
    std::vector<ConvParams<Scalar>> params;  // empty unless requested
    Matrix<Scalar> captured;                 // gradient w.r.t. capture layer output
  };

  /// Backpropagates `grad_out` (gradient w.r.t. the final output). When
  /// `capture` >= 0, the gradient w.r.t. that layer's output is recorded and,
  /// if neither input nor parameter gradients are wanted, backprop stops there.
  Gradients backward(const ForwardCache<Scalar>& cache, const Matrix<Scalar>& grad_out, bool want_input,
                     bool want_params, int capture = -1) const {
    Gradients g;
    if (want_params) g.params.resize(specs_.size());
    Matrix<Scalar> cur = grad_out;
    for (int l = int(specs_.size()) - 1; l >= 0; --l) {
      const ConvSpec& spec = specs_[std::size_t(l)];
      if (l == capture) {
        g.captured = cur;
        if (!want_input && !want_params) return g;
      }
      Matrix<Scalar> dz;
      if (spec.activation) {
        const auto& z = cache.pre[std::size_t(l)].array();
        const auto sig = (Scalar(1) / (Scalar(1) + (-z).exp())).eval();
        dz = cur.array() * sig * (Scalar(1) + z * (Scalar(1) - sig));
      } else {
        dz = std::move(cur);
      }
      if (want_params) {
        g.params[std::size_t(l)].weight = dz * cache.cols[std::size_t(l)].transpose();
        g.params[std::size_t(l)].bias = dz.rowwise().sum();
      }
      if (l == 0 && !want_input) break;
      const Matrix<Scalar> dcols = params_[std::size_t(l)].weight.transpose() * dz;
      col2im(dcols, cache.shapes[std::size_t(l)], spec, cache.shapes[std::size_t(l) + 1], cur);
    }
    if (want_input) g.input = std::move(cur);
    return g;
  }

 private:
  std::vector<ConvSpec> specs_;
  std::vector<ConvParams<Scalar>> params_;
};

}  // namespace ctxpatch::nn
