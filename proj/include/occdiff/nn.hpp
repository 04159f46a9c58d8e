#pragma once

// Minimal dense 3D network primitives with hand-written backward passes.
//
// Feature maps are Matrix<S> of shape C x N (channel-major, N = X*Y*Z voxels,
// z fastest). Convolutions lower to GEMM through im2col. Everything is
// templated on the scalar so the same code runs in float for training and in
// double for finite-difference gradient checks.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "occdiff/error.hpp"
#include "occdiff/rng.hpp"
#include "occdiff/voxel.hpp"

namespace occdiff::nn {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Learnable tensor: logical shape plus a 2-D view (rows = shape[0],
/// cols = product of the remaining extents).
template <class S>
struct Tensor {
  std::vector<int> shape;
  Matrix<S> m;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    require(!shape.empty(), "Tensor: empty shape");
    const int cols = std::accumulate(shape.begin() + 1, shape.end(), 1, std::multiplies<>());
    m = Matrix<S>::Zero(shape[0], cols);
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(m.size()); }
  S* data() noexcept { return m.data(); }
  const S* data() const noexcept { return m.data(); }
  bool all_finite() const noexcept { return m.allFinite(); }
};

template <class S>
struct NamedTensor {
  std::string name;
  Tensor<S>* tensor;
};

template <class S>
struct NamedConstTensor {
  std::string name;
  const Tensor<S>* tensor;
};

inline void fill_normal(Matrix<float>& m, Rng& rng, double std) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(std * rng.normal());
}
inline void fill_normal(Matrix<double>& m, Rng& rng, double std) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
}

// ---------------------------------------------------------------- activations

template <class S>
inline S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

template <class S>
Matrix<S> silu(const Matrix<S>& x) {
  return x.unaryExpr([](S v) { return v * sigmoid(v); });
}

/// d/dx silu evaluated at the pre-activation x, times upstream gradient.
template <class S>
Matrix<S> silu_backward(const Matrix<S>& x, const Matrix<S>& dy) {
  Matrix<S> dx(x.rows(), x.cols());
  const S* px = x.data();
  const S* pd = dy.data();
  S* po = dx.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const S s = sigmoid(px[i]);
    po[i] = pd[i] * s * (S(1) + px[i] * (S(1) - s));
  }
  return dx;
}

// ------------------------------------------------------------- convolutions

/// 3x3x3 convolution, zero padding 1, stride 1. weight: [Cout, Cin, 3, 3, 3].
template <class S>
struct Conv3 {
  Tensor<S> weight;
  Tensor<S> bias;

  Conv3() = default;
  Conv3(int cin, int cout) : weight({cout, cin, 3, 3, 3}), bias({cout}) {}

  int in_channels() const { return weight.shape[1]; }
  int out_channels() const { return weight.shape[0]; }

  void init(Rng& rng) {
    fill_normal(weight.m, rng, std::sqrt(2.0 / (27.0 * in_channels())));
    bias.m.setZero();
  }
};

/// Zero-padded copy of a C x N block on the (X+2)(Y+2)(Z+2) lattice. In this
/// layout every 3x3x3 neighbour offset is a constant shift of the flat index,
/// so a convolution becomes 27 GEMMs over contiguous column ranges.
struct PaddedLayout {
  Dims dims;
  Eigen::Index py, pz, total, margin, span;

  explicit PaddedLayout(Dims d)
      : dims(d),
        py(d.y + 2),
        pz(d.z + 2),
        total(static_cast<Eigen::Index>(d.x + 2) * (d.y + 2) * (d.z + 2)),
        margin(py * pz + pz + 1),
        span(total - 2 * margin) {}

  Eigen::Index shift(int tap) const { return ((tap / 9 - 1) * py + (tap / 3 % 3 - 1)) * pz + (tap % 3 - 1); }
  Eigen::Index padded(int x, int y) const { return ((x + 1) * py + (y + 1)) * pz + 1; }

  template <class S>
  Matrix<S> pad(const Matrix<S>& in) const {
    Matrix<S> out = Matrix<S>::Zero(in.rows(), total);
    for (Eigen::Index c = 0; c < in.rows(); ++c)
      for (int x = 0; x < dims.x; ++x)
        for (int y = 0; y < dims.y; ++y)
          std::copy_n(in.row(c).data() + dims.index(x, y, 0), dims.z, out.row(c).data() + padded(x, y));
    return out;
  }

  /// Interior of a block whose column j holds padded index margin + j.
  template <class S>
  Matrix<S> crop_span(const Matrix<S>& in) const {
    Matrix<S> out(in.rows(), static_cast<Eigen::Index>(dims.count()));
    for (Eigen::Index c = 0; c < in.rows(); ++c)
      for (int x = 0; x < dims.x; ++x)
        for (int y = 0; y < dims.y; ++y)
          std::copy_n(in.row(c).data() + padded(x, y) - margin, dims.z, out.row(c).data() + dims.index(x, y, 0));
    return out;
  }

  /// Inverse of crop_span: non-interior columns are zero.
  template <class S>
  Matrix<S> expand_span(const Matrix<S>& in) const {
    Matrix<S> out = Matrix<S>::Zero(in.rows(), span);
    for (Eigen::Index c = 0; c < in.rows(); ++c)
      for (int x = 0; x < dims.x; ++x)
        for (int y = 0; y < dims.y; ++y)
          std::copy_n(in.row(c).data() + dims.index(x, y, 0), dims.z, out.row(c).data() + padded(x, y) - margin);
    return out;
  }

  template <class S>
  Matrix<S> crop(const Matrix<S>& in) const {
    Matrix<S> out(in.rows(), static_cast<Eigen::Index>(dims.count()));
    for (Eigen::Index c = 0; c < in.rows(); ++c)
      for (int x = 0; x < dims.x; ++x)
        for (int y = 0; y < dims.y; ++y)
          std::copy_n(in.row(c).data() + padded(x, y), dims.z, out.row(c).data() + dims.index(x, y, 0));
    return out;
  }
};

/// Weight slice for one tap: [Cout, Cin].
template <class S>
Matrix<S> conv3_tap(const Conv3<S>& conv, int tap) {
  Matrix<S> w(conv.out_channels(), conv.in_channels());
  for (int ci = 0; ci < conv.in_channels(); ++ci) w.col(ci) = conv.weight.m.col(ci * 27 + tap);
  return w;
}

template <class S>
Matrix<S> conv3_forward(const Conv3<S>& conv, const Matrix<S>& in, Dims d) {
  require(in.rows() == conv.in_channels(), "conv3: channel mismatch");
  const PaddedLayout lay(d);
  const Matrix<S> padded = lay.pad(in);
  Matrix<S> acc = Matrix<S>::Zero(conv.out_channels(), lay.span);
  for (int tap = 0; tap < 27; ++tap) {
    acc.noalias() += conv3_tap(conv, tap) * padded.middleCols(lay.margin + lay.shift(tap), lay.span);
  }
  Matrix<S> out = lay.crop_span(acc);
  out.colwise() += conv.bias.m.col(0);
  return out;
}

/// Accumulates parameter gradients into grad and returns d(input).
template <class S>
Matrix<S> conv3_backward(const Conv3<S>& conv, const Matrix<S>& in, Dims d, const Matrix<S>& d_out,
                         Conv3<S>& grad, bool need_input_grad = true) {
  const PaddedLayout lay(d);
  const Matrix<S> padded = lay.pad(in);
  const Matrix<S> d_span = lay.expand_span(d_out);
  grad.bias.m.col(0) += d_out.rowwise().sum();
  Matrix<S> d_padded;
  if (need_input_grad) d_padded = Matrix<S>::Zero(in.rows(), lay.total);
  Matrix<S> gw(conv.out_channels(), conv.in_channels());
  for (int tap = 0; tap < 27; ++tap) {
    const Eigen::Index start = lay.margin + lay.shift(tap);
    gw.noalias() = d_span * padded.middleCols(start, lay.span).transpose();
    for (int ci = 0; ci < conv.in_channels(); ++ci) grad.weight.m.col(ci * 27 + tap) += gw.col(ci);
    if (need_input_grad) d_padded.middleCols(start, lay.span).noalias() += conv3_tap(conv, tap).transpose() * d_span;
  }
  if (!need_input_grad) return {};
  return lay.crop(d_padded);
}

/// Pointwise (1x1x1) convolution, equivalently a per-voxel linear map.
/// weight: [Cout, Cin].
template <class S>
struct Pointwise {
  Tensor<S> weight;
  Tensor<S> bias;

  Pointwise() = default;
  Pointwise(int cin, int cout) : weight({cout, cin}), bias({cout}) {}

  int in_channels() const { return weight.shape[1]; }
  int out_channels() const { return weight.shape[0]; }

  void init(Rng& rng, double gain = 1.0) {
    fill_normal(weight.m, rng, gain * std::sqrt(1.0 / in_channels()));
    bias.m.setZero();
  }
};

template <class S>
Matrix<S> pointwise_forward(const Pointwise<S>& p, const Matrix<S>& in) {
  require(in.rows() == p.in_channels(), "pointwise: channel mismatch");
  Matrix<S> out = p.weight.m * in;
  out.colwise() += p.bias.m.col(0);
  return out;
}

template <class S>
Matrix<S> pointwise_backward(const Pointwise<S>& p, const Matrix<S>& in, const Matrix<S>& d_out, Pointwise<S>& grad,
                             bool need_input_grad = true) {
  grad.weight.m.noalias() += d_out * in.transpose();
  grad.bias.m.col(0) += d_out.rowwise().sum();
  if (!need_input_grad) return {};
  return p.weight.m.transpose() * d_out;
}

// ---------------------------------------------------------------- resampling

/// Output extent of 2x downsampling (ceil, so odd extents keep a last cell).
inline Dims pooled_dims(Dims d) { return Dims{(d.x + 1) / 2, (d.y + 1) / 2, (d.z + 1) / 2}; }

/// 2x2x2 average pooling; windows at odd borders average the voxels present.
template <class S>
Matrix<S> avg_pool2(const Matrix<S>& in, Dims d) {
  const Dims p = pooled_dims(d);
  Matrix<S> out = Matrix<S>::Zero(in.rows(), static_cast<Eigen::Index>(p.count()));
  std::vector<S> inv_count(p.count(), S(0));
  for (int x = 0; x < d.x; ++x)
    for (int y = 0; y < d.y; ++y)
      for (int z = 0; z < d.z; ++z) inv_count[p.index(x / 2, y / 2, z / 2)] += S(1);
  for (auto& c : inv_count) c = S(1) / c;
  for (Eigen::Index c = 0; c < in.rows(); ++c) {
    const S* src = in.row(c).data();
    S* dst = out.row(c).data();
    for (int x = 0; x < d.x; ++x)
      for (int y = 0; y < d.y; ++y)
        for (int z = 0; z < d.z; ++z) dst[p.index(x / 2, y / 2, z / 2)] += src[d.index(x, y, z)];
    for (std::size_t i = 0; i < p.count(); ++i) dst[i] *= inv_count[i];
  }
  return out;
}

template <class S>
Matrix<S> avg_pool2_backward(const Matrix<S>& d_out, Dims d) {
  const Dims p = pooled_dims(d);
  std::vector<S> inv_count(p.count(), S(0));
  for (int x = 0; x < d.x; ++x)
    for (int y = 0; y < d.y; ++y)
      for (int z = 0; z < d.z; ++z) inv_count[p.index(x / 2, y / 2, z / 2)] += S(1);
  for (auto& c : inv_count) c = S(1) / c;
  Matrix<S> d_in(d_out.rows(), static_cast<Eigen::Index>(d.count()));
  for (Eigen::Index c = 0; c < d_out.rows(); ++c) {
    const S* src = d_out.row(c).data();
    S* dst = d_in.row(c).data();
    for (int x = 0; x < d.x; ++x)
      for (int y = 0; y < d.y; ++y)
        for (int z = 0; z < d.z; ++z) {
          const std::size_t pi = p.index(x / 2, y / 2, z / 2);
          dst[d.index(x, y, z)] = src[pi] * inv_count[pi];
        }
  }
  return d_in;
}

/// Nearest-neighbour upsampling from pooled_dims(d) back to d.
template <class S>
Matrix<S> upsample2(const Matrix<S>& in, Dims d) {
  const Dims p = pooled_dims(d);
  Matrix<S> out(in.rows(), static_cast<Eigen::Index>(d.count()));
  for (Eigen::Index c = 0; c < in.rows(); ++c) {
    const S* src = in.row(c).data();
    S* dst = out.row(c).data();
    for (int x = 0; x < d.x; ++x)
      for (int y = 0; y < d.y; ++y)
        for (int z = 0; z < d.z; ++z) dst[d.index(x, y, z)] = src[p.index(x / 2, y / 2, z / 2)];
  }
  return out;
}

template <class S>
Matrix<S> upsample2_backward(const Matrix<S>& d_out, Dims d) {
  const Dims p = pooled_dims(d);
  Matrix<S> d_in = Matrix<S>::Zero(d_out.rows(), static_cast<Eigen::Index>(p.count()));
  for (Eigen::Index c = 0; c < d_out.rows(); ++c) {
    const S* src = d_out.row(c).data();
    S* dst = d_in.row(c).data();
    for (int x = 0; x < d.x; ++x)
      for (int y = 0; y < d.y; ++y)
        for (int z = 0; z < d.z; ++z) dst[p.index(x / 2, y / 2, z / 2)] += src[d.index(x, y, z)];
  }
  return d_in;
}

// ------------------------------------------------------------- embeddings

/// Row lookup: out(:, v) = table(labels[v], :)^T.
template <class S>
Matrix<S> embed(const Tensor<S>& table, std::span<const std::uint8_t> labels) {
  const Eigen::Index dim = table.m.cols();
  Matrix<S> out(dim, static_cast<Eigen::Index>(labels.size()));
  for (Eigen::Index c = 0; c < dim; ++c) {
    S* dst = out.row(c).data();
    for (std::size_t v = 0; v < labels.size(); ++v) dst[v] = table.m(labels[v], c);
  }
  return out;
}

template <class S>
void embed_backward(std::span<const std::uint8_t> labels, const Matrix<S>& d_out, Tensor<S>& grad_table) {
  for (Eigen::Index c = 0; c < d_out.rows(); ++c) {
    const S* src = d_out.row(c).data();
    for (std::size_t v = 0; v < labels.size(); ++v) grad_table.m(labels[v], c) += src[v];
  }
}

// ------------------------------------------------------------------ linear

/// Dense layer on vectors. weight: [out, in].
template <class S>
struct Linear {
  Tensor<S> weight;
  Tensor<S> bias;

  Linear() = default;
  Linear(int in, int out) : weight({out, in}), bias({out}) {}

  void init(Rng& rng) {
    fill_normal(weight.m, rng, std::sqrt(1.0 / weight.shape[1]));
    bias.m.setZero();
  }
};

template <class S>
Vector<S> linear_forward(const Linear<S>& l, const Vector<S>& x) {
  return l.weight.m * x + l.bias.m.col(0);
}

template <class S>
Vector<S> linear_backward(const Linear<S>& l, const Vector<S>& x, const Vector<S>& dy, Linear<S>& grad) {
  grad.weight.m.noalias() += dy * x.transpose();
  grad.bias.m.col(0) += dy;
  return l.weight.m.transpose() * dy;
}

template <class S>
Vector<S> silu(const Vector<S>& x) {
  return x.unaryExpr([](S v) { return v * sigmoid(v); });
}

template <class S>
Vector<S> silu_backward(const Vector<S>& x, const Vector<S>& dy) {
  Vector<S> dx(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const S s = sigmoid(x[i]);
    dx[i] = dy[i] * s * (S(1) + x[i] * (S(1) - s));
  }
  return dx;
}

}  // namespace occdiff::nn
