#pragma once

// Compact priors: the encoders producing clean-informed (PI) and conditional
// (PI') vectors, and the few-step diffusion model over those vectors.

#include <type_traits>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "layers.hpp"
#include "model_config.hpp"

namespace uldm {

enum class PriorKind { Clean, Conditional, Noisy, Predicted };

/// Batch of prior vectors, values [N, C_p].
template <class T>
struct PriorVector {
  Tensor<T> values;
  PriorKind kind = PriorKind::Clean;
  std::size_t stage = 0;
  std::size_t t = 0;  // noisy kind only

  std::size_t length() const { return values.dim(values.rank() - 1); }
};

/// Variance schedule beta^1..beta^T with derived alpha, alpha-bar and posterior sigma^2.
class NoiseSchedule {
 public:
  NoiseSchedule() : NoiseSchedule(std::vector<double>{0.30, 0.60, 0.90}) {}

  explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw FormatError("noise schedule needs at least one step");
    for (double b : betas_)
      if (!(b > 0.0 && b < 1.0)) throw FormatError("schedule beta outside (0,1): " + std::to_string(b));
    derive();
  }

  /// Skips range validation; admits degenerate steps such as beta = 0.
  static NoiseSchedule unchecked(std::vector<double> betas) {
    NoiseSchedule s(Unvalidated{});
    s.betas_ = std::move(betas);
    s.derive();
    return s;
  }

  std::size_t steps() const noexcept { return betas_.size(); }
  // All accessors take t in [1, T].
  double beta(std::size_t t) const { return betas_.at(check(t) - 1); }
  double alpha(std::size_t t) const { return alphas_.at(check(t) - 1); }
  double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars_.at(check(t) - 1); }
  double sigma2(std::size_t t) const { return sigma2_.at(check(t) - 1); }
  const std::vector<double>& betas() const noexcept { return betas_; }

  /// Shape requirements of a default few-step schedule: strictly increasing
  /// betas and a near-Gaussian terminal state (alpha-bar^T < 0.05).
  void validate_terminal() const {
    for (std::size_t i = 1; i < betas_.size(); ++i)
      if (!(betas_[i] > betas_[i - 1])) throw FormatError("schedule betas must be strictly increasing");
    if (!(alpha_bars_.back() < 0.05))
      throw FormatError("terminal alpha-bar " + std::to_string(alpha_bars_.back()) + " is not below 0.05");
  }

 private:
  struct Unvalidated {};
  explicit NoiseSchedule(Unvalidated) {}

  std::size_t check(std::size_t t) const {
    if (t < 1 || t > betas_.size())
      throw FormatError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(betas_.size()) + "]");
    return t;
  }

  void derive() {
    alphas_.clear();
    alpha_bars_.clear();
    sigma2_.clear();
    double prod = 1.0;
    for (double b : betas_) {
      const double prev = prod;
      alphas_.push_back(1.0 - b);
      prod *= 1.0 - b;
      alpha_bars_.push_back(prod);
      sigma2_.push_back(prod < 1.0 ? (1.0 - prev) / (1.0 - prod) * b : 0.0);
    }
  }

  std::vector<double> betas_, alphas_, alpha_bars_, sigma2_;
};

/// q(P^t | P^0) sample: sqrt(abar^t) p0 + sqrt(1 - abar^t) eps. Draws eps from
/// `rng` unless `noise` is given.
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& p0, std::size_t t, const NoiseSchedule& schedule,
                          const std::type_identity_t<Tensor<T>>* noise = nullptr, Rng* rng = nullptr) {
  if (t == 0) throw FormatError("timestep 0 outside [1, T]");
  const double ab = schedule.alpha_bar(t);
  if (noise && noise->shape() != p0.shape())
    throw ShapeError("forward_diffuse", "noise " + to_string(noise->shape()) + " vs prior " + to_string(p0.shape()));
  if (!noise && !rng) throw FormatError("forward_diffuse needs injected noise or a generator");
  const T a = static_cast<T>(std::sqrt(ab)), s = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(p0.shape());
  std::normal_distribution<double> nd;
  for (std::size_t i = 0; i < p0.size(); ++i) {
    const T e = noise ? (*noise)[i] : static_cast<T>(nd(*rng));
    out[i] = a * p0[i] + s * e;
  }
  return out;
}

/// Noise predictor signature: (P^t, P^c, t) -> predicted eps, all [N, C_p].
template <class T>
using EpsPredictor = std::function<Tensor<T>(const Tensor<T>&, const Tensor<T>&, std::size_t)>;

/// P^{t-1} = (P^t - (1 - alpha^t)/sqrt(1 - abar^t) eps_theta) / sqrt(alpha^t) + sqrt(1 - alpha^t) eps^t.
/// The noise term is dropped at t = 1.
template <class T>
Tensor<T> reverse_step(const Tensor<T>& pt, const Tensor<T>& pc, std::size_t t, const EpsPredictor<T>& eps_theta,
                       const NoiseSchedule& schedule, const std::type_identity_t<Tensor<T>>* noise = nullptr, Rng* rng = nullptr) {
  const double alpha = schedule.alpha(t), ab = schedule.alpha_bar(t);
  const Tensor<T> eps = eps_theta(pt, pc, t);
  if (eps.shape() != pt.shape()) throw ShapeError("reverse_step", "predicted noise " + to_string(eps.shape()));
  const double coef = ab < 1.0 ? (1.0 - alpha) / std::sqrt(1.0 - ab) : 0.0;
  const double inv = 1.0 / std::sqrt(alpha);
  const double sd = t > 1 ? std::sqrt(1.0 - alpha) : 0.0;
  if (sd > 0 && !noise && !rng) throw FormatError("reverse_step needs injected noise or a generator");
  Tensor<T> out(pt.shape());
  std::normal_distribution<double> nd;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    double v = inv * (double(pt[i]) - coef * double(eps[i]));
    if (sd > 0) v += sd * (noise ? double((*noise)[i]) : nd(*rng));
    out[i] = static_cast<T>(v);
  }
  return out;
}

/// Runs the reverse chain from P^T ~ N(0, I); deterministic in `seed`.
template <class T>
Tensor<T> generate_prior(const Tensor<T>& pc, const EpsPredictor<T>& eps_theta, const NoiseSchedule& schedule,
                         std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd;
  Tensor<T> p(pc.shape());
  for (auto& v : p.values()) v = static_cast<T>(nd(rng));
  for (std::size_t t = schedule.steps(); t >= 1; --t) p = reverse_step<T>(p, pc, t, eps_theta, schedule, nullptr, &rng);
  return p;
}

/// Sinusoidal embedding of timestep t, length `dim` (sines then cosines).
template <class T>
Tensor<T> timestep_embedding(std::size_t t, std::size_t dim) {
  Tensor<T> e({dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -double(i) / double(std::max<std::size_t>(half, 1)));
    e[i] = static_cast<T>(std::sin(double(t) * freq));
    e[half + i] = static_cast<T>(std::cos(double(t) * freq));
  }
  return e;
}

/// Zero mean, unit variance along each row of [N, C_p] (no affine part).
template <class T>
DiffTensor<T> standardize(Graph<T>& g, DiffTensor<T> p) {
  const std::size_t cp = p.dim(1);
  return layer_norm(p, 1, g.constant(Tensor<T>({cp}, T(1))), g.constant(Tensor<T>({cp}, T(0))));
}

/// Prior encoder: two stride-2 3x3 convolutions (4x downsampling), global
/// mean pooling, a two-layer MLP to C_p and row standardisation.
struct PriorEncoder {
  std::string path;
  std::size_t in_channels = 0, prior_dim = 64, width = 16;
  Conv down1, down2;
  Linear fc1, fc2;

  PriorEncoder() = default;
  PriorEncoder(std::string p, std::size_t in_ch, std::size_t cp, std::size_t w)
      : path(std::move(p)), in_channels(in_ch), prior_dim(cp), width(w) {
    down1 = Conv{path + ".down1", in_channels, width, 3, 2, 1, true};
    down2 = Conv{path + ".down2", width, 2 * width, 3, 2, 1, true};
    fc1 = Linear{path + ".fc1", 2 * width, 2 * prior_dim};
    fc2 = Linear{path + ".fc2", 2 * prior_dim, prior_dim};
  }

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    down1.init(reg, rng);
    down2.init(reg, rng);
    fc1.init(reg, rng);
    fc2.init(reg, rng);
  }

  /// Encodes the channel concatenation of `inputs` to [N, C_p].
  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, const std::vector<DiffTensor<T>>& inputs) const {
    auto x = concat(inputs, 1);
    if (x.dim(1) != in_channels)
      throw ShapeError("prior_encode", "expected " + std::to_string(in_channels) + " input channels, got " +
                                           to_string(x.shape()));
    auto f = gelu(down2(g, gelu(down1(g, x))));
    return standardize(g, fc2(g, gelu(fc1(g, mean_pool(f)))));
  }
};

/// eps_theta: an MLP over [P^t, P^c, embed(t)] estimates P^0, and the noise
/// is read off the forward marginal, (P^t - sqrt(abar) P0_hat) / sqrt(1 - abar).
struct Denoiser {
  std::string path = "denoiser";
  std::size_t prior_dim = 64, hidden = 128, time_dim = 16;
  Linear fc1, fc2, fc3;
  NoiseSchedule schedule;

  Denoiser() = default;
  Denoiser(std::string p, std::size_t cp, std::size_t hid, std::size_t tdim, NoiseSchedule s = {})
      : path(std::move(p)), prior_dim(cp), hidden(hid), time_dim(tdim), schedule(std::move(s)) {
    fc1 = Linear{path + ".fc1", 2 * prior_dim + time_dim, hidden};
    fc2 = Linear{path + ".fc2", hidden, hidden};
    fc3 = Linear{path + ".fc3", hidden, prior_dim};
  }

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    fc1.init(reg, rng);
    fc2.init(reg, rng);
    fc3.init(reg, rng);
  }

  /// `t` holds one timestep per batch row.
  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> pt, DiffTensor<T> pc, const std::vector<std::size_t>& t) const {
    const std::size_t n = pt.dim(0);
    if (t.size() != n) throw ShapeError("denoiser", "one timestep per row required");
    Tensor<T> emb({n, time_dim});
    for (std::size_t i = 0; i < n; ++i) {
      const auto e = timestep_embedding<T>(t[i], time_dim);
      std::copy(e.values().begin(), e.values().end(), emb.data() + i * time_dim);
    }
    auto x = concat<T>({pt, pc, g.constant(std::move(emb))}, 1);
    auto p0 = fc3(g, gelu(fc2(g, gelu(fc1(g, x)))));
    Tensor<T> keep({n, prior_dim}), scale({n, prior_dim});
    for (std::size_t i = 0; i < n; ++i) {
      const double ab = schedule.alpha_bar(t[i]);
      std::fill_n(keep.data() + i * prior_dim, prior_dim, static_cast<T>(std::sqrt(ab)));
      std::fill_n(scale.data() + i * prior_dim, prior_dim, static_cast<T>(1.0 / std::sqrt(1.0 - ab)));
    }
    return mul(sub(pt, mul(g.constant(std::move(keep)), p0)), g.constant(std::move(scale)));
  }

  /// Gradient-free predictor over the current registry values.
  template <class T>
  EpsPredictor<T> predictor(ParamRegistry<T>& reg) const {
    return [this, &reg](const Tensor<T>& pt, const Tensor<T>& pc, std::size_t t) {
      Graph<T> g(reg);
      std::vector<std::size_t> ts(pt.dim(0), t);
      return (*this)(g, g.constant(pt), g.constant(pc), ts).value();
    };
  }
};

}  // namespace uldm
