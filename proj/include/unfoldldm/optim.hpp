#pragma once

#include <cmath>
#include <map>
#include <string>

#include "graph.hpp"
#include "params.hpp"

namespace uldm {

/// Cosine annealing from lr0 at step 0 to lr_min at step total-1.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0, double lr_min) {
  if (total <= 1) return lr_min;
  const double frac = std::min(1.0, double(step) / double(total - 1));
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(M_PI * frac));
}

/// Adaptive-moment optimizer with bias correction. Frozen registry paths are skipped.
template <class T>
class Adam {
 public:
  struct Moments {
    std::vector<double> m, v;
  };

  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  /// Throws NumericError (and leaves every parameter untouched) if any gradient is non-finite.
  void step(ParamRegistry<T>& reg, const GradMap<T>& grads, double lr) {
    for (auto& [path, g] : grads) {
      if (reg.is_frozen(path)) continue;
      for (T v : g.values())
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite gradient at " + path);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (auto& [path, g] : grads) {
      if (reg.is_frozen(path)) continue;
      Tensor<T>& p = reg.get(path);
      if (p.shape() != g.shape()) throw ShapeError("optimizer_step", path + ": gradient shape " + to_string(g.shape()));
      auto& st = state_[path];
      if (st.m.empty()) {
        st.m.assign(p.size(), 0.0);
        st.v.assign(p.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        st.m[i] = b1_ * st.m[i] + (1 - b1_) * gi;
        st.v[i] = b2_ * st.v[i] + (1 - b2_) * gi * gi;
        const double mh = st.m[i] / c1, vh = st.v[i] / c2;
        p[i] = static_cast<T>(double(p[i]) - lr * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  std::size_t steps_taken() const noexcept { return t_; }
  const std::map<std::string, Moments>& state() const noexcept { return state_; }

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace uldm
