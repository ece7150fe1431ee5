#pragma once

// Gradient-descent half of each unfolding stage: a holistic step through
// learned simulators of D and D^T, a decomposed step through the estimated
// factor pair (W_k, M_k), and the alternating estimators producing that pair.

#include <cmath>
#include <limits>
#include <string>

#include "degradation.hpp"
#include "layers.hpp"
#include "model_config.hpp"

namespace uldm {

/// Per-stage bundle threaded through the unfolding loop. Images are [N, c, h, w],
/// factors are [N, c, h, h] and [N, c, w, w].
template <class T>
struct StageState {
  DiffTensor<T> x_prev;
  DiffTensor<T> x_hat;
  DiffTensor<T> x_tilde;
  DiffTensor<T> w;
  DiffTensor<T> m;
  std::size_t k = 0;
};

/// x_hat = x_prev - beta * simDT(simD(x_prev) - y).
template <class T>
DiffTensor<T> holistic_step(Graph<T>& g, DiffTensor<T> x_prev, DiffTensor<T> y, DiffTensor<T> beta,
                            const SeqMixBlock* sim_d, const SeqMixBlock* sim_dt) {
  auto fwd = sim_d ? (*sim_d)(g, x_prev) : x_prev;
  auto r = sub(fwd, y);
  auto back = sim_dt ? (*sim_dt)(g, r) : r;
  return sub(x_prev, scalar_tensor_mul(beta, back));
}

/// x_tilde = x_prev - gamma * W^T (W x_prev M - y) M^T.
template <class T>
DiffTensor<T> decomposed_step(DiffTensor<T> x_prev, DiffTensor<T> y, DiffTensor<T> gamma, DiffTensor<T> w,
                              DiffTensor<T> m) {
  detail::require_same(x_prev, y, OpKind::Sub);
  auto residual = sub(apply_decomposed(w, x_prev, m), y);
  return sub(x_prev, scalar_tensor_mul(gamma, apply_adjoint(w, residual, m)));
}

/// Learned estimators for M_k and W_k plus the shared step sizes.
struct MgdaModule {
  std::size_t channels = 1, height = 0, width = 0;
  SeqMixBlock sim_d, sim_dt, mix_m, mix_w;
  std::string beta_path = "mgda.beta_raw";
  std::string gamma_path = "mgda.gamma_raw";
  std::string proj_h_path = "mgda.proj_h";  // [w, h]: collapses the h axis
  std::string proj_w_path = "mgda.proj_w";  // [w, h]: right factor collapsing the w axis
  bool use_mixers = true;

  MgdaModule() = default;
  explicit MgdaModule(const ModelConfig& cfg)
      : channels(cfg.channels),
        height(cfg.height),
        width(cfg.width),
        sim_d("mgda.sim_d", cfg.channels, cfg.channels, cfg.mixer_hidden),
        sim_dt("mgda.sim_dt", cfg.channels, cfg.channels, cfg.mixer_hidden),
        mix_m("mgda.mix_m", 2 * cfg.channels, 2 * cfg.channels, cfg.mixer_hidden),
        mix_w("mgda.mix_w", 2 * cfg.channels, 2 * cfg.channels, cfg.mixer_hidden),
        use_mixers(!cfg.ablation.no_seqmix) {}

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng, double step_init) const {
    // softplus(raw) = step_init
    const T raw = step_init > 0 ? static_cast<T>(std::log(std::expm1(step_init))) : -std::numeric_limits<T>::infinity();
    reg.add(beta_path, Tensor<T>({1}, raw));
    reg.add(gamma_path, Tensor<T>({1}, raw));
    sim_d.init(reg, rng);
    sim_dt.init(reg, rng);
    mix_m.init(reg, rng);
    mix_w.init(reg, rng);
    reg.add(proj_h_path, init_uniform<T>({width, height}, height, rng, std::sqrt(3.0)));
    reg.add(proj_w_path, init_uniform<T>({width, height}, width, rng, std::sqrt(3.0)));
  }

  template <class T>
  DiffTensor<T> beta(Graph<T>& g) const {
    return softplus(g.param(beta_path));
  }
  template <class T>
  DiffTensor<T> gamma(Graph<T>& g) const {
    return softplus(g.param(gamma_path));
  }

  template <class T>
  DiffTensor<T> mix(Graph<T>& g, const SeqMixBlock& block, DiffTensor<T> x) const {
    return use_mixers ? block(g, x) : block.residual_path(g, x);
  }

  /// M_k = N((M1)^T M2) where [M1; M2] = P_h * mixer(concat(y, W_{k-1} x)).
  template <class T>
  DiffTensor<T> estimate_m(Graph<T>& g, DiffTensor<T> y, DiffTensor<T> wx) const {
    detail::require_same(y, wx, OpKind::Concat);
    const std::size_t n = y.dim(0), c = y.dim(1), h = y.dim(2), w = y.dim(3);
    auto field = mix(g, mix_m, concat<T>({y, wx}, 1));  // [n, 2c, h, w]
    auto proj = expand(reshape(g.param(proj_h_path), {1, 1, w, h}), {n, 2 * c, w, h});
    auto halves = split(batched_matmul(proj, field), 1, 2);  // 2 x [n, c, w, w]
    return l2_normalize(batched_matmul(transpose(halves[0]), halves[1]));
  }

  /// W_k = N(W1 (W2)^T) where [W1; W2] = mixer(concat(y, x M_k)) * P_w.
  template <class T>
  DiffTensor<T> estimate_w(Graph<T>& g, DiffTensor<T> y, DiffTensor<T> xm) const {
    detail::require_same(y, xm, OpKind::Concat);
    const std::size_t n = y.dim(0), c = y.dim(1), h = y.dim(2), w = y.dim(3);
    auto field = mix(g, mix_w, concat<T>({y, xm}, 1));  // [n, 2c, h, w]
    auto proj = expand(reshape(g.param(proj_w_path), {1, 1, w, h}), {n, 2 * c, w, h});
    auto halves = split(batched_matmul(field, proj), 1, 2);  // 2 x [n, c, h, h]
    return l2_normalize(batched_matmul(halves[0], transpose(halves[1])));
  }

  /// One gradient stage: M_k from (y, W_{k-1} x_{k-1}), then W_k from
  /// (y, x_{k-1} M_k), then both granularity updates.
  template <class T>
  StageState<T> run_stage(Graph<T>& g, DiffTensor<T> x_prev, DiffTensor<T> y, DiffTensor<T> w_prev,
                          std::size_t k) const {
    StageState<T> s;
    s.k = k;
    s.x_prev = x_prev;
    s.m = estimate_m(g, y, batched_matmul(w_prev, x_prev));
    s.w = estimate_w(g, y, batched_matmul(x_prev, s.m));
    s.x_tilde = decomposed_step(x_prev, y, gamma(g), s.w, s.m);
    s.x_hat = holistic_step(g, x_prev, y, beta(g), use_mixers ? &sim_d : nullptr, use_mixers ? &sim_dt : nullptr);
    return s;
  }
};

/// Stage-0 factors for a batch [N, c, h, w], as graph constants.
template <class T>
std::pair<DiffTensor<T>, DiffTensor<T>> initial_factors(Graph<T>& g, const Tensor<T>& y_batch) {
  const std::size_t n = y_batch.dim(0), c = y_batch.dim(1), h = y_batch.dim(2), w = y_batch.dim(3);
  Tensor<T> wf({n, c, h, h}), mf({n, c, w, w});
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> yi({c, h, w});
    std::copy_n(y_batch.data() + i * c * h * w, c * h * w, yi.data());
    auto f = init_factors(yi);
    std::copy(f.w.values().begin(), f.w.values().end(), wf.data() + i * c * h * h);
    std::copy(f.m.values().begin(), f.m.values().end(), mf.data() + i * c * w * w);
  }
  return {g.constant(std::move(wf)), g.constant(std::move(mf))};
}

}  // namespace uldm
