#pragma once

// Test-only reference implementations. They recompute quantities from first
// principles (explicit matrices, explicit sums) and share no code path with
// the library routines they check.

#include <cmath>
#include <cstdint>
#include <vector>

#include "occdiff/voxel.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat identity(int k) {
  Mat m(k, std::vector<double>(k, 0.0));
  for (int i = 0; i < k; ++i) m[i][i] = 1.0;
  return m;
}

inline Mat step_matrix(int k, double beta) {
  Mat m(k, std::vector<double>(k, beta / k));
  for (int i = 0; i < k; ++i) m[i][i] += 1.0 - beta;
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  const int k = static_cast<int>(a.size());
  Mat r(k, std::vector<double>(k, 0.0));
  for (int i = 0; i < k; ++i)
    for (int l = 0; l < k; ++l)
      for (int j = 0; j < k; ++j) r[i][j] += a[i][l] * b[l][j];
  return r;
}

/// Q_1 Q_2 ... Q_t from explicit per-step matrices; t = 0 gives I.
inline Mat cumulative(const std::vector<double>& betas, int k, int t) {
  Mat acc = identity(k);
  for (int s = 1; s <= t; ++s) acc = matmul(acc, step_matrix(k, betas[s - 1]));
  return acc;
}

/// q(x_{t-1} | x_t, x0) by enumerating the joint q(x_{t-1}, x_t | x0).
inline std::vector<double> posterior(const std::vector<double>& betas, int k, int t, int xt, int x0) {
  const Mat qbar = cumulative(betas, k, t - 1);
  const Mat qt = step_matrix(k, betas[t - 1]);
  std::vector<double> joint(k);
  double z = 0.0;
  for (int j = 0; j < k; ++j) {
    joint[j] = qbar[x0][j] * qt[j][xt];
    z += joint[j];
  }
  for (double& v : joint) v /= z;
  return joint;
}

/// sum_c softmax(logits)_c q(x_{t-1} | x_t, x0 = c), by explicit summation.
inline std::vector<double> mixture(const std::vector<double>& betas, int k, int t, int xt,
                                   const std::vector<double>& logits) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  std::vector<double> w(k);
  double z = 0.0;
  for (int c = 0; c < k; ++c) {
    w[c] = std::exp(logits[c] - mx);
    z += w[c];
  }
  std::vector<double> out(k, 0.0);
  for (int c = 0; c < k; ++c) {
    const auto post = posterior(betas, k, t, xt, c);
    for (int j = 0; j < k; ++j) out[j] += (w[c] / z) * post[j];
  }
  return out;
}

/// Per-class IoU counted voxel by voxel from the set definition.
struct IoUCounts {
  std::vector<long> inter, uni;
};

inline IoUCounts count_iou(const occdiff::VoxelGrid& pred, const occdiff::VoxelGrid& gt,
                           const std::vector<std::uint8_t>* mask, int k) {
  IoUCounts r{std::vector<long>(k, 0), std::vector<long>(k, 0)};
  for (int c = 0; c < k; ++c) {
    for (std::size_t v = 0; v < gt.size(); ++v) {
      if (mask && !(*mask)[v]) continue;
      const bool in_p = pred[v] == c, in_g = gt[v] == c;
      r.inter[c] += (in_p && in_g);
      r.uni[c] += (in_p || in_g);
    }
  }
  return r;
}

}  // namespace oracle
