#pragma once

// l1 objectives. Every norm is a per-element mean so weights keep their meaning
// at any resolution.

#include <cmath>
#include <vector>

#include "log.hpp"
#include "ops.hpp"

namespace uldm {

/// Reconstruction loss |x_K - x_gt| (mean).
template <class T>
DiffTensor<T> loss_rec(DiffTensor<T> x_final, DiffTensor<T> x_gt) {
  return mean_abs(sub(x_final, x_gt));
}

/// Weight of stage k (1-based) in the intra-stage consistency loss; stage 1 is excluded.
inline double isda_weight(std::size_t k, std::size_t stages) {
  if (k < 2 || k > stages) return 0.0;
  return std::ldexp(1.0, -static_cast<int>(stages - k));
}

/// sum_{k=2..K} 2^{-(K-k)} |x_hat_k - x_tilde_k| (mean per stage). `pairs[k-1]`
/// holds stage k.
template <class T>
DiffTensor<T> loss_isda(Graph<T>& g, const std::vector<std::pair<DiffTensor<T>, DiffTensor<T>>>& pairs) {
  const std::size_t stages = pairs.size();
  if (stages < 2) {
    log_info("loss_isda: fewer than two stages, consistency loss is zero");
    return g.constant(Tensor<T>({1}, T(0)));
  }
  DiffTensor<T> total;
  for (std::size_t k = 2; k <= stages; ++k) {
    auto term = scalar_mul(mean_abs(sub(pairs[k - 1].first, pairs[k - 1].second)), static_cast<T>(isda_weight(k, stages)));
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

/// Prior consistency |p_pred - p_target| (mean per entry).
template <class T>
DiffTensor<T> loss_diff(DiffTensor<T> p_pred, DiffTensor<T> p_target) {
  return mean_abs(sub(p_pred, p_target));
}

}  // namespace uldm
