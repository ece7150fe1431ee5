#pragma once

// Degradation operators acting as x -> W x M per channel, the dense holistic
// matrix they induce, and the synthetic degradations used to build training
// pairs.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "log.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace uldm {

inline constexpr double kNormalizeEps = 1e-12;

/// Per-channel factor pair: w is [c, h, h], m is [c, w, w].
template <class T>
struct DegradationPair {
  Tensor<T> w;
  Tensor<T> m;
};

namespace detail {

template <class T>
void check_factor_shapes(const Tensor<T>& w, const Tensor<T>& x, const Tensor<T>& m, const char* op) {
  const auto& sw = w.shape();
  const auto& sx = x.shape();
  const auto& sm = m.shape();
  const bool ok = sx.size() == 3 && sw.size() == 3 && sm.size() == 3 && sw[0] == sx[0] && sm[0] == sx[0] &&
                  sw[1] == sx[1] && sw[2] == sx[1] && sm[1] == sx[2] && sm[2] == sx[2];
  if (!ok) throw ShapeError(op, "W " + to_string(sw) + ", x " + to_string(sx) + ", M " + to_string(sm));
}

}  // namespace detail

/// Per-channel W_c x_c M_c for x of shape [c, h, w].
template <class T>
Tensor<T> apply_decomposed(const Tensor<T>& w, const Tensor<T>& x, const Tensor<T>& m) {
  detail::check_factor_shapes(w, x, m, "apply_decomposed");
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  Tensor<T> out(x.shape());
  std::vector<T> tmp(h * wd);
  for (std::size_t ch = 0; ch < c; ++ch) {
    detail::gemm(w.data() + ch * h * h, false, x.data() + ch * h * wd, false, tmp.data(), h, wd, h, false);
    detail::gemm(tmp.data(), false, m.data() + ch * wd * wd, false, out.data() + ch * h * wd, h, wd, wd, false);
  }
  return out;
}

/// Batched graph form: w [N,c,h,h], x [N,c,h,w], m [N,c,w,w].
template <class T>
DiffTensor<T> apply_decomposed(DiffTensor<T> w, DiffTensor<T> x, DiffTensor<T> m) {
  return batched_matmul(batched_matmul(w, x), m);
}

/// Adjoint map z -> W^T z M^T, batched graph form.
template <class T>
DiffTensor<T> apply_adjoint(DiffTensor<T> w, DiffTensor<T> z, DiffTensor<T> m) {
  return batched_matmul(batched_matmul(transpose(w), z), transpose(m));
}

/// Dense Kronecker product of two matrices.
template <class T>
Tensor<T> kronecker(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("kronecker", to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  Tensor<T> out({ar * br, ac * bc});
  for (std::size_t i = 0; i < ar; ++i)
    for (std::size_t j = 0; j < ac; ++j)
      for (std::size_t p = 0; p < br; ++p)
        for (std::size_t q = 0; q < bc; ++q) out[(i * br + p) * ac * bc + j * bc + q] = a[i * ac + j] * b[p * bc + q];
  return out;
}

/// Dense per-channel holistic operator D of shape [c, hw, hw] with
/// D vec(x) = vec(W x M) under row-major vec. Meant for oracle-scale inputs only.
template <class T>
Tensor<T> materialize_holistic(const Tensor<T>& w, const Tensor<T>& m, std::size_t max_elements = std::size_t{1} << 24) {
  if (w.rank() != 3 || m.rank() != 3 || w.dim(0) != m.dim(0) || w.dim(1) != w.dim(2) || m.dim(1) != m.dim(2))
    throw ShapeError("materialize_holistic", "W " + to_string(w.shape()) + ", M " + to_string(m.shape()));
  const std::size_t c = w.dim(0), h = w.dim(1), wd = m.dim(1), n = h * wd;
  if (c * n * n > max_elements)
    throw ShapeError("materialize_holistic", "holistic matrix of " + std::to_string(c * n * n) +
                                                 " values exceeds the budget; use oracle-scale inputs");
  Tensor<T> out({c, n, n});
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor<T> wc({h, h}), mt({wd, wd});
    std::copy_n(w.data() + ch * h * h, h * h, wc.data());
    for (std::size_t i = 0; i < wd; ++i)
      for (std::size_t j = 0; j < wd; ++j) mt[i * wd + j] = m[ch * wd * wd + j * wd + i];
    // Row-major vec turns W x M into (W kron M^T) vec(x); under column-major vec
    // the same map is (M^T kron W).
    const Tensor<T> d = kronecker(wc, mt);
    std::copy(d.values().begin(), d.values().end(), out.data() + ch * n * n);
  }
  return out;
}

/// Divides each trailing matrix by its Frobenius norm. Zero-norm blocks are
/// guarded by a 1e-12 floor and reported.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& stack) {
  if (stack.rank() < 2) throw ShapeError("l2_normalize", "needs a matrix stack, got " + to_string(stack.shape()));
  const std::size_t block = stack.dim(stack.rank() - 2) * stack.dim(stack.rank() - 1);
  Tensor<T> out = stack;
  for (std::size_t b = 0; b < stack.size() / block; ++b) {
    T acc = 0;
    for (std::size_t i = 0; i < block; ++i) acc += stack[b * block + i] * stack[b * block + i];
    T nrm = std::sqrt(acc);
    if (nrm < T(kNormalizeEps)) {
      log_warn("l2_normalize: zero-norm block " + std::to_string(b) + " guarded by epsilon");
      nrm = T(kNormalizeEps);
    }
    for (std::size_t i = 0; i < block; ++i) out[b * block + i] /= nrm;
  }
  return out;
}

/// Graph form of l2_normalize over the last two axes.
template <class T>
DiffTensor<T> l2_normalize(DiffTensor<T> x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("l2_normalize", "needs a matrix stack, got " + to_string(s));
  DiffTensor<T> nrm = l2_norm(x, 2);
  const auto& nv = nrm.value().values();
  if (*std::min_element(nv.begin(), nv.end()) < T(kNormalizeEps)) {
    log_warn("l2_normalize: zero-norm block guarded by epsilon");
    nrm = add_scalar(nrm, T(kNormalizeEps));
  }
  Shape ones(s.begin(), s.end() - 2);
  ones.push_back(1);
  ones.push_back(1);
  return div(x, expand(reshape(nrm, ones), s));
}

/// Unnormalised Gram factors of y [c,h,w]: row Gram y y^T ([c,h,h]) and
/// column Gram y^T y ([c,w,w]).
template <class T>
DegradationPair<T> gram_factors(const Tensor<T>& y) {
  if (y.rank() != 3) throw ShapeError("init_factors", "image must be [c,h,w], got " + to_string(y.shape()));
  const std::size_t c = y.dim(0), h = y.dim(1), w = y.dim(2);
  DegradationPair<T> f{Tensor<T>({c, h, h}), Tensor<T>({c, w, w})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* yc = y.data() + ch * h * w;
    detail::gemm(yc, false, yc, true, f.w.data() + ch * h * h, h, h, w, false);
    detail::gemm(yc, true, yc, false, f.m.data() + ch * w * w, w, w, h, false);
  }
  return f;
}

/// Stage-0 factors: W0 = N(y y^T) (h x h), M0 = N(y^T y) (w x w), per channel.
template <class T>
DegradationPair<T> init_factors(const Tensor<T>& y) {
  auto f = gram_factors(y);
  return {l2_normalize(f.w), l2_normalize(f.m)};
}

// ---------------------------------------------------------------------------
// Synthetic degradations

struct GaussianBlur {
  double sigma = 1.5;
};
/// Multiplicative gain field: gain * (1 + variation * (smooth ramp in [-1, 1])).
struct IlluminationScale {
  double gain = 0.4;
  double variation = 0.3;
};
/// Additive bright rows; each row is hit with probability `density`.
struct RowStreaks {
  double density = 0.1;
  double intensity = 0.5;
};

using DegradationKind = std::variant<GaussianBlur, IlluminationScale, RowStreaks>;

struct SyntheticDegradation {
  DegradationKind kind = GaussianBlur{};
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

/// Textual form: "blur:<sigma>@<noise>", "illum:<gain>:<variation>@<noise>",
/// "streaks:<density>:<intensity>@<noise>". The seed is stored separately.
inline std::string to_string(const SyntheticDegradation& d) {
  std::ostringstream os;
  os.precision(17);
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, GaussianBlur>)
          os << "blur:" << k.sigma;
        else if constexpr (std::is_same_v<K, IlluminationScale>)
          os << "illum:" << k.gain << ':' << k.variation;
        else
          os << "streaks:" << k.density << ':' << k.intensity;
      },
      d.kind);
  os << '@' << d.noise_sigma;
  return os.str();
}

inline SyntheticDegradation parse_degradation(const std::string& text) {
  SyntheticDegradation d;
  const auto at = text.find('@');
  const std::string head = text.substr(0, at);
  if (at != std::string::npos) d.noise_sigma = std::stod(text.substr(at + 1));
  std::vector<std::string> parts;
  std::stringstream ss(head);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.empty()) throw FormatError("empty degradation spec");
  auto num = [&](std::size_t i, double def) { return parts.size() > i ? std::stod(parts[i]) : def; };
  if (parts[0] == "blur")
    d.kind = GaussianBlur{num(1, 1.5)};
  else if (parts[0] == "illum")
    d.kind = IlluminationScale{num(1, 0.4), num(2, 0.3)};
  else if (parts[0] == "streaks")
    d.kind = RowStreaks{num(1, 0.1), num(2, 0.5)};
  else
    throw FormatError("unknown degradation kind: " + parts[0]);
  if (d.noise_sigma < 0 || d.noise_sigma > 1) throw FormatError("noise sigma outside [0,1]: " + text);
  return d;
}

/// Symmetric Gaussian blur matrix of size n with reflect borders; x -> B x blurs along rows.
template <class T>
Tensor<T> gaussian_blur_matrix(std::size_t n, double sigma) {
  Tensor<T> b({n, n});
  if (sigma <= 0) {
    for (std::size_t i = 0; i < n; ++i) b[i * n + i] = 1;
    return b;
  }
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double s = 0;
  for (std::ptrdiff_t t = -radius; t <= radius; ++t)
    s += (k[static_cast<std::size_t>(t + radius)] = std::exp(-0.5 * double(t * t) / (sigma * sigma)));
  for (auto& v : k) v /= s;
  for (std::size_t i = 0; i < n; ++i)
    for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
      const std::size_t j = detail::reflect_index(static_cast<std::ptrdiff_t>(i) + t, n);
      b[i * n + j] += static_cast<T>(k[static_cast<std::size_t>(t + radius)]);
    }
  return b;
}

/// Degradation before clipping: kind(clean) + noise.
template <class T>
Tensor<T> synthesize_unclipped(const Tensor<T>& clean, const SyntheticDegradation& spec) {
  if (clean.rank() != 3) throw ShapeError("synthesize", "image must be [c,h,w], got " + to_string(clean.shape()));
  const std::size_t c = clean.dim(0), h = clean.dim(1), w = clean.dim(2);
  std::mt19937_64 rng(spec.seed);
  Tensor<T> out = std::visit(
      [&](const auto& k) -> Tensor<T> {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, GaussianBlur>) {
          // Separable blur is itself a factor pair: B_h x B_w^T.
          const Tensor<T> bh = gaussian_blur_matrix<T>(h, k.sigma);
          const Tensor<T> bw = gaussian_blur_matrix<T>(w, k.sigma);
          Tensor<T> wf({c, h, h}), mf({c, w, w});
          for (std::size_t ch = 0; ch < c; ++ch) {
            std::copy(bh.values().begin(), bh.values().end(), wf.data() + ch * h * h);
            for (std::size_t i = 0; i < w; ++i)
              for (std::size_t j = 0; j < w; ++j) mf[ch * w * w + i * w + j] = bw[j * w + i];
          }
          return apply_decomposed(wf, clean, mf);
        } else if constexpr (std::is_same_v<K, IlluminationScale>) {
          std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
          const double a = angle(rng);
          const double ca = std::cos(a), sa = std::sin(a);
          Tensor<T> o = clean;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h; ++i)
              for (std::size_t j = 0; j < w; ++j) {
                const double u = h > 1 ? 2.0 * double(i) / double(h - 1) - 1.0 : 0.0;
                const double v = w > 1 ? 2.0 * double(j) / double(w - 1) - 1.0 : 0.0;
                const double ramp = (ca * u + sa * v) / std::sqrt(2.0);
                o[(ch * h + i) * w + j] *= static_cast<T>(k.gain * (1.0 + k.variation * ramp));
              }
          return o;
        } else {
          std::bernoulli_distribution hit(k.density);
          Tensor<T> o = clean;
          for (std::size_t i = 0; i < h; ++i)
            if (hit(rng))
              for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t j = 0; j < w; ++j) o[(ch * h + i) * w + j] += static_cast<T>(k.intensity);
          return o;
        }
      },
      spec.kind);
  if (spec.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (auto& v : out.values()) v += static_cast<T>(noise(rng));
  }
  return out;
}

/// clip(kind(clean) + noise, 0, 1); deterministic in spec.seed.
template <class T>
Tensor<T> synthesize(const Tensor<T>& clean, const SyntheticDegradation& spec) {
  Tensor<T> out = synthesize_unclipped(clean, spec);
  for (auto& v : out.values()) v = std::clamp(v, T(0), T(1));
  return out;
}

}  // namespace uldm
