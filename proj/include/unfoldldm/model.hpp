#pragma once

// The unfolded restoration network: K stages of (gradient step, prior, proximal
// refinement) with every parameter shared across stages.

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "losses.hpp"
#include "mgda.hpp"
#include "ocformer.hpp"
#include "prior.hpp"

namespace uldm {

/// Where each stage's prior comes from.
enum class PriorMode {
  Clean,        // PI on (x_hat, x_tilde, x_gt); pretraining
  Generated,    // reverse diffusion conditioned on PI'(x_hat, x_tilde)
  Conditional,  // PI'(x_hat, x_tilde) used directly (diffusion ablated)
};

template <class T>
struct ForwardOptions {
  PriorMode mode = PriorMode::Clean;
  const Tensor<T>* x_gt = nullptr;  // [N, c, h, w]; required by Clean and by diffusion training
  bool train_denoiser = false;      // Generated mode: add the noise-prediction terms
  Rng* rng = nullptr;               // timestep and noise draws for denoiser training
  std::uint64_t seed = 0;           // reverse-chain seed
};

template <class T>
struct ForwardResult {
  std::vector<StageState<T>> stages;
  std::vector<DiffTensor<T>> outputs;    // x_k
  std::vector<DiffTensor<T>> priors;     // prior consumed by the proximal step
  std::vector<DiffTensor<T>> eps_loss;   // per-stage noise-prediction l1 (train_denoiser)
  std::vector<double> rollout_l1;        // per-stage |P_hat - P^h| mean (Generated with x_gt)

  DiffTensor<T> final_output() const { return outputs.back(); }
};

struct UnfoldModel {
  ModelConfig cfg;
  MgdaModule mgda;
  PriorEncoder pi, pi_prime;
  Denoiser denoiser;
  OCFormer ocformer;
  NoiseSchedule schedule;

  static constexpr const char* kPiPrefix = "pi.";

  UnfoldModel() : UnfoldModel(ModelConfig{}) {}
  explicit UnfoldModel(const ModelConfig& c)
      : cfg(c),
        mgda(c),
        pi("pi", 3 * c.channels, c.prior_dim, c.pi_width),
        pi_prime("pi_prime", 2 * c.channels, c.prior_dim, c.pi_width),
        denoiser("denoiser", c.prior_dim, c.denoiser_hidden, c.time_embed, NoiseSchedule::unchecked(c.betas)),
        ocformer(c),
        schedule(c.betas) {
    if (c.betas.size() != c.timesteps)
      throw FormatError("schedule has " + std::to_string(c.betas.size()) + " betas but T = " + std::to_string(c.timesteps));
    if (c.stages < 1) throw FormatError("stage count must be positive");
    if (c.height % 8 != 0 || c.width % 8 != 0) throw FormatError("model extents must be multiples of 8");
  }

  template <class T>
  ParamRegistry<T> init_params(std::uint64_t seed) const {
    ParamRegistry<T> reg;
    Rng rng(seed);
    mgda.init(reg, rng, cfg.step_init);
    pi.init(reg, rng);
    pi_prime.init(reg, rng);
    denoiser.init(reg, rng);
    ocformer.init(reg, rng);
    mgda.sim_d.make_identity(reg);
    mgda.sim_dt.make_identity(reg);
    ocformer.zero_output(reg);
    return reg;
  }

  /// Stage-consistent MGDA outputs after ablation: a dropped branch is replaced by the other one.
  template <class T>
  std::pair<DiffTensor<T>, DiffTensor<T>> branches(const StageState<T>& s) const {
    const auto& ab = cfg.ablation;
    DiffTensor<T> xh = ab.no_x_hat ? s.x_tilde : s.x_hat;
    DiffTensor<T> xt = ab.no_x_tilde ? s.x_hat : s.x_tilde;
    return {xh, xt};
  }

  template <class T>
  ForwardResult<T> forward(Graph<T>& g, const Tensor<T>& y_batch, const ForwardOptions<T>& opt) const {
    if (y_batch.rank() != 4 || y_batch.dim(1) != cfg.channels || y_batch.dim(2) != cfg.height ||
        y_batch.dim(3) != cfg.width)
      throw ShapeError("forward", "expected [N," + std::to_string(cfg.channels) + "," + std::to_string(cfg.height) + "," +
                                      std::to_string(cfg.width) + "], got " + to_string(y_batch.shape()));
    const bool need_gt = opt.mode == PriorMode::Clean || opt.train_denoiser;
    if (need_gt && (!opt.x_gt || opt.x_gt->shape() != y_batch.shape()))
      throw ShapeError("forward", "ground truth batch required with matching shape");
    if (opt.train_denoiser && !opt.rng) throw FormatError("denoiser training needs a generator");

    ForwardResult<T> res;
    auto y = g.constant(y_batch);
    std::optional<DiffTensor<T>> gt;
    if (opt.x_gt) gt = g.constant(*opt.x_gt);
    auto [w, m] = initial_factors(g, y_batch);
    (void)m;
    DiffTensor<T> x = y;
    const std::size_t n = y_batch.dim(0);
    for (std::size_t k = 1; k <= cfg.stages; ++k) {
      StageState<T> s = mgda.run_stage(g, x, y, w, k);
      auto [xh, xt] = branches(s);
      DiffTensor<T> prior;
      switch (opt.mode) {
        case PriorMode::Clean:
          prior = pi(g, {xh, xt, *gt});
          break;
        case PriorMode::Conditional:
          prior = pi_prime(g, {xh, xt});
          break;
        case PriorMode::Generated: {
          auto pc = pi_prime(g, {xh, xt});
          const std::uint64_t stage_seed = opt.seed * 1000003ULL + k;
          auto predictor = denoiser.predictor(*g.registry());
          // The chain output is projected back onto the standardised prior manifold.
          Tensor<T> p_hat = standardize(g, g.constant(generate_prior(pc.value(), predictor, schedule, stage_seed))).value();
          if (gt) {
            // Target prior from the frozen clean encoder, treated as a constant.
            Tensor<T> target = pi(g, {xh, xt, *gt}).value();
            double acc = 0;
            for (std::size_t i = 0; i < target.size(); ++i) acc += std::abs(double(p_hat[i]) - double(target[i]));
            res.rollout_l1.push_back(acc / double(target.size()));
            if (opt.train_denoiser) {
              std::uniform_int_distribution<std::size_t> pick_t(1, schedule.steps());
              std::normal_distribution<double> nd;
              const std::size_t cp = cfg.prior_dim;
              Tensor<T> eps({n, cp}), pt({n, cp});
              std::vector<std::size_t> ts(n);
              for (std::size_t i = 0; i < n; ++i) {
                ts[i] = pick_t(*opt.rng);
                const double a = std::sqrt(schedule.alpha_bar(ts[i])), sd = std::sqrt(1.0 - schedule.alpha_bar(ts[i]));
                for (std::size_t j = 0; j < cp; ++j) {
                  eps[i * cp + j] = static_cast<T>(nd(*opt.rng));
                  pt[i * cp + j] = static_cast<T>(a * double(target[i * cp + j]) + sd * double(eps[i * cp + j]));
                }
              }
              auto pred = denoiser(g, g.constant(std::move(pt)), pc, ts);
              res.eps_loss.push_back(loss_diff(pred, g.constant(std::move(eps))));
            }
          }
          prior = g.constant(std::move(p_hat));
          break;
        }
      }
      x = ocformer(g, xh, xt, prior);
      w = s.w;
      res.stages.push_back(s);
      res.priors.push_back(prior);
      res.outputs.push_back(x);
    }
    return res;
  }
};

}  // namespace uldm
