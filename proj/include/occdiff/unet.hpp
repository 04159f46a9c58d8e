#pragma once

// Three-level (configurable) 3D encoder-decoder with skip connections and
// optional per-level time conditioning.

#include <string>
#include <vector>

#include "occdiff/nn.hpp"

namespace occdiff::nn {

struct UNetShape {
  int in_channels = 0;
  std::vector<int> widths{64, 128, 256};
  int time_channels = 0;  // 0 disables time injection

  int levels() const noexcept { return static_cast<int>(widths.size()); }
};

template <class S>
struct UNetParams {
  UNetShape shape;
  std::vector<Conv3<S>> enc1, enc2;
  std::vector<Linear<S>> time;  // one per encoder level when time_channels > 0
  std::vector<Conv3<S>> dec1, dec2;

  UNetParams() = default;
  explicit UNetParams(UNetShape s) : shape(std::move(s)) {
    require(shape.levels() >= 1, "UNet: needs at least one level");
    require(shape.in_channels >= 1, "UNet: in_channels must be >= 1");
    const int levels = shape.levels();
    int cin = shape.in_channels;
    for (int l = 0; l < levels; ++l) {
      const int w = shape.widths[static_cast<std::size_t>(l)];
      require(w >= 1, "UNet: widths must be >= 1");
      enc1.emplace_back(cin, w);
      enc2.emplace_back(w, w);
      if (shape.time_channels > 0) time.emplace_back(shape.time_channels, w);
      cin = w;
    }
    for (int l = 0; l + 1 < levels; ++l) {
      const int w = shape.widths[static_cast<std::size_t>(l)];
      const int below = shape.widths[static_cast<std::size_t>(l + 1)];
      dec1.emplace_back(below + w, w);
      dec2.emplace_back(w, w);
    }
  }

  int out_channels() const { return shape.widths.front(); }

  void init(Rng& rng) {
    for (auto* v : {&enc1, &enc2, &dec1, &dec2})
      for (auto& c : *v) c.init(rng);
    for (auto& t : time) t.init(rng);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < enc1.size(); ++l) {
      const std::string p = prefix + "enc" + std::to_string(l) + ".";
      f(p + "conv1.weight", enc1[l].weight);
      f(p + "conv1.bias", enc1[l].bias);
      f(p + "conv2.weight", enc2[l].weight);
      f(p + "conv2.bias", enc2[l].bias);
      if (!time.empty()) {
        f(p + "time.weight", time[l].weight);
        f(p + "time.bias", time[l].bias);
      }
    }
    for (std::size_t l = 0; l < dec1.size(); ++l) {
      const std::string p = prefix + "dec" + std::to_string(l) + ".";
      f(p + "conv1.weight", dec1[l].weight);
      f(p + "conv1.bias", dec1[l].bias);
      f(p + "conv2.weight", dec2[l].weight);
      f(p + "conv2.bias", dec2[l].bias);
    }
  }
};

template <class S>
struct UNetCache {
  std::vector<Dims> dims;
  std::vector<Matrix<S>> in, pre1, a1, pre2, h;       // encoder, per level
  std::vector<Matrix<S>> cat, pre3, a3, pre4, dec_h;  // decoder, per level (index l < levels-1)
};

/// Runs the network; temb may be empty when the shape has no time channels.
template <class S>
Matrix<S> unet_forward(const UNetParams<S>& p, const Matrix<S>& input, Dims d, const Vector<S>& temb,
                       UNetCache<S>* cache) {
  const int levels = p.shape.levels();
  require(input.rows() == p.shape.in_channels, "UNet: input channel mismatch");
  require(p.shape.time_channels == 0 || temb.size() == p.shape.time_channels, "UNet: time embedding size mismatch");
  UNetCache<S> local;
  UNetCache<S>& c = cache != nullptr ? *cache : local;
  c = UNetCache<S>{};
  c.dims.push_back(d);
  for (int l = 1; l < levels; ++l) c.dims.push_back(pooled_dims(c.dims.back()));
  const auto L = static_cast<std::size_t>(levels);
  c.in.resize(L);
  c.pre1.resize(L);
  c.a1.resize(L);
  c.pre2.resize(L);
  c.h.resize(L);
  c.cat.resize(L);
  c.pre3.resize(L);
  c.a3.resize(L);
  c.pre4.resize(L);
  c.dec_h.resize(L);

  for (std::size_t l = 0; l < L; ++l) {
    c.in[l] = l == 0 ? input : avg_pool2(c.h[l - 1], c.dims[l - 1]);
    c.pre1[l] = conv3_forward(p.enc1[l], c.in[l], c.dims[l]);
    if (!p.time.empty()) c.pre1[l].colwise() += linear_forward(p.time[l], temb);
    c.a1[l] = silu(c.pre1[l]);
    c.pre2[l] = conv3_forward(p.enc2[l], c.a1[l], c.dims[l]);
    c.h[l] = silu(c.pre2[l]);
  }
  Matrix<S> h = c.h[L - 1];
  for (int li = levels - 2; li >= 0; --li) {
    const auto l = static_cast<std::size_t>(li);
    Matrix<S> up = upsample2(h, c.dims[l]);
    c.cat[l].resize(up.rows() + c.h[l].rows(), up.cols());
    c.cat[l].topRows(up.rows()) = up;
    c.cat[l].bottomRows(c.h[l].rows()) = c.h[l];
    c.pre3[l] = conv3_forward(p.dec1[l], c.cat[l], c.dims[l]);
    c.a3[l] = silu(c.pre3[l]);
    c.pre4[l] = conv3_forward(p.dec2[l], c.a3[l], c.dims[l]);
    c.dec_h[l] = silu(c.pre4[l]);
    h = c.dec_h[l];
  }
  return h;
}

template <class S>
struct UNetGradients {
  Matrix<S> d_input;
  Vector<S> d_temb;
};

template <class S>
UNetGradients<S> unet_backward(const UNetParams<S>& p, const UNetCache<S>& c, const Vector<S>& temb,
                               const Matrix<S>& d_out, UNetParams<S>& g, bool need_input_grad = true) {
  const int levels = p.shape.levels();
  const auto L = static_cast<std::size_t>(levels);
  UNetGradients<S> out;
  if (p.shape.time_channels > 0) out.d_temb = Vector<S>::Zero(p.shape.time_channels);

  std::vector<Matrix<S>> d_skip(L);
  Matrix<S> dh = d_out;
  for (std::size_t l = 0; l + 1 < L; ++l) {
    const Matrix<S> d_pre4 = silu_backward(c.pre4[l], dh);
    const Matrix<S> d_a3 = conv3_backward(p.dec2[l], c.a3[l], c.dims[l], d_pre4, g.dec2[l]);
    const Matrix<S> d_pre3 = silu_backward(c.pre3[l], d_a3);
    const Matrix<S> d_cat = conv3_backward(p.dec1[l], c.cat[l], c.dims[l], d_pre3, g.dec1[l]);
    const Eigen::Index up_rows = d_cat.rows() - c.h[l].rows();
    d_skip[l] = d_cat.bottomRows(c.h[l].rows());
    dh = upsample2_backward(Matrix<S>(d_cat.topRows(up_rows)), c.dims[l]);
  }
  // dh now holds the gradient for the bottleneck output h[L-1].
  Matrix<S> d_below;  // gradient w.r.t. the pooled input of the level below
  for (int li = levels - 1; li >= 0; --li) {
    const auto l = static_cast<std::size_t>(li);
    Matrix<S> d_h = (l + 1 == L) ? dh : d_skip[l];
    if (l + 1 < L) d_h += avg_pool2_backward(d_below, c.dims[l]);
    const Matrix<S> d_pre2 = silu_backward(c.pre2[l], d_h);
    const Matrix<S> d_a1 = conv3_backward(p.enc2[l], c.a1[l], c.dims[l], d_pre2, g.enc2[l]);
    const Matrix<S> d_pre1 = silu_backward(c.pre1[l], d_a1);
    if (!p.time.empty()) {
      const Vector<S> d_t = d_pre1.rowwise().sum();
      out.d_temb += linear_backward(p.time[l], temb, d_t, g.time[l]);
    }
    const bool want_input = l > 0 || need_input_grad;
    d_below = conv3_backward(p.enc1[l], c.in[l], c.dims[l], d_pre1, g.enc1[l], want_input);
  }
  if (need_input_grad) out.d_input = std::move(d_below);
  return out;
}

}  // namespace occdiff::nn
