#pragma once

// Prior-guided proximal operator: channel-wise (transposed) attention blocks
// and prior-modulated detail-recovery blocks in a four-level U-shaped network.

#include <array>
#include <string>
#include <vector>

#include "layers.hpp"
#include "model_config.hpp"

namespace uldm {

/// F' = softmax(Q K^T / I) V + F, attention over channels.
struct DRABlock {
  std::string path;
  std::size_t channels = 0;
  Projection q, k, v;

  DRABlock() = default;
  DRABlock(std::string p, std::size_t c)
      : path(std::move(p)), channels(c), q(path + ".q", c), k(path + ".k", c), v(path + ".v", c) {}

  std::string scale_path() const { return path + ".scale_raw"; }

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    q.init(reg, rng);
    k.init(reg, rng);
    v.init(reg, rng);
    reg.add(scale_path(), Tensor<T>({1}, static_cast<T>(std::log(std::expm1(1.0)))));  // I = 1
  }

  /// The learnable temperature I = softplus(raw).
  template <class T>
  DiffTensor<T> scale(Graph<T>& g) const {
    return softplus(g.param(scale_path()));
  }

  /// Each length-hw row scaled to unit norm, so QK^T holds cosine similarities.
  template <class T>
  static DiffTensor<T> unit_rows(DiffTensor<T> x) {
    const Shape& s = x.shape();
    auto nrm = add_scalar(l2_norm(x, 1), T(1e-6));
    return div(x, expand(reshape(nrm, {s[0], s[1], 1}), s));
  }

  /// Row-stochastic attention matrix [N, C, C].
  template <class T>
  DiffTensor<T> attention(Graph<T>& g, DiffTensor<T> f) const {
    const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    auto qm = unit_rows(reshape(q(g, f), {n, c, hw}));
    auto km = unit_rows(reshape(k(g, f), {n, c, hw}));
    auto inv = div(g.constant(Tensor<T>({1}, T(1))), scale(g));
    return softmax(scalar_tensor_mul(inv, batched_matmul(qm, transpose(km))));
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> f) const {
    const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    auto vm = reshape(v(g, f), {n, c, hw});
    auto out = reshape(batched_matmul(attention(g, f), vm), f.shape());
    return add(out, f);
  }
};

/// F'' = Linear1(P) * LN(F') + Linear2(P);  F_x = F' + GELU(W_G F'') * W_H F''.
struct PDRBlock {
  std::string path;
  std::size_t channels = 0, prior_dim = 0;
  ChannelNorm norm;
  Linear mod_scale, mod_shift;
  Projection gate, value;

  PDRBlock() = default;
  PDRBlock(std::string p, std::size_t c, std::size_t cp)
      : path(std::move(p)),
        channels(c),
        prior_dim(cp),
        norm{path + ".norm", c},
        mod_scale{path + ".mod_scale", cp, c},
        mod_shift{path + ".mod_shift", cp, c},
        gate(path + ".gate", c),
        value(path + ".value", c) {}

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    norm.init(reg, rng);
    mod_scale.init(reg, rng);
    mod_shift.init(reg, rng);
    gate.init(reg, rng);
    value.init(reg, rng);
  }

  /// Modulated features F''.
  template <class T>
  DiffTensor<T> modulated(Graph<T>& g, DiffTensor<T> f, DiffTensor<T> prior) const {
    const Shape& s = f.shape();
    const std::size_t n = s[0], c = s[1];
    auto sc = expand(reshape(mod_scale(g, prior), {n, c, 1, 1}), s);
    auto sh = expand(reshape(mod_shift(g, prior), {n, c, 1, 1}), s);
    return add(mul(sc, norm(g, f)), sh);
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> f, DiffTensor<T> prior) const {
    auto fm = modulated(g, f, prior);
    return add(f, mul(gelu(gate(g, fm)), value(g, fm)));
  }
};

struct OCFormer {
  std::size_t channels = 1, base_width = 16, prior_dim = 64;
  std::array<std::size_t, 4> blocks{2, 2, 2, 2};
  bool use_dra = true, use_pdr = true, residual_from_tilde = true;
  Conv embed, out;
  std::array<std::vector<DRABlock>, 4> dra;
  std::array<std::vector<PDRBlock>, 4> pdr;
  std::array<Conv, 3> down;  // level i -> i+1
  std::array<UpConv, 3> up;  // level i+1 -> i
  std::array<Conv, 3> fuse;  // skip fusion at level i

  OCFormer() = default;
  explicit OCFormer(const ModelConfig& cfg)
      : channels(cfg.channels),
        base_width(cfg.base_width),
        prior_dim(cfg.prior_dim),
        blocks(cfg.blocks),
        use_dra(!cfg.ablation.no_dra),
        use_pdr(!cfg.ablation.no_pdr),
        residual_from_tilde(!cfg.ablation.no_x_tilde) {
    embed = Conv{"ocformer.embed", 2 * channels, base_width, 3, 1, 1, true};
    out = Conv{"ocformer.out", base_width, channels, 3, 1, 1, true};
    for (std::size_t l = 0; l < 4; ++l) {
      const std::size_t c = width(l);
      for (std::size_t b = 0; b < blocks[l]; ++b) {
        const std::string p = "ocformer.l" + std::to_string(l) + ".b" + std::to_string(b);
        dra[l].emplace_back(p + ".dra", c);
        pdr[l].emplace_back(p + ".pdr", c, prior_dim);
      }
      if (l < 3) {
        down[l] = Conv{"ocformer.down" + std::to_string(l), c, 2 * c, 2, 2, 0, true};
        up[l] = UpConv{"ocformer.up" + std::to_string(l), 2 * c, c};
        fuse[l] = pointwise("ocformer.fuse" + std::to_string(l), 2 * c, c);
      }
    }
  }

  std::size_t width(std::size_t level) const { return base_width << level; }

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    embed.init(reg, rng);
    for (std::size_t l = 0; l < 4; ++l) {
      for (std::size_t b = 0; b < blocks[l]; ++b) {
        dra[l][b].init(reg, rng);
        pdr[l][b].init(reg, rng);
      }
      if (l < 3) {
        down[l].init(reg, rng);
        up[l].init(reg, rng);
        fuse[l].init(reg, rng);
      }
    }
    out.init(reg, rng);
  }

  /// Zeroes the final projection so the operator reduces to its global residual.
  template <class T>
  void zero_output(ParamRegistry<T>& reg) const {
    out.zero(reg);
  }

  template <class T>
  DiffTensor<T> level(Graph<T>& g, std::size_t l, DiffTensor<T> f, DiffTensor<T> prior) const {
    for (std::size_t b = 0; b < blocks[l]; ++b) {
      if (use_dra) f = dra[l][b](g, f);
      if (use_pdr) f = pdr[l][b](g, f, prior);
    }
    return f;
  }

  /// x_k from (x_hat, x_tilde) guided by one prior [N, C_p] shared by all levels.
  /// Spatial extents must be multiples of 8.
  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> x_hat, DiffTensor<T> x_tilde, DiffTensor<T> prior) const {
    const Shape& s = x_hat.shape();
    if (s.size() != 4 || s[2] % 8 != 0 || s[3] % 8 != 0)
      throw ShapeError("ocformer", "image extents must be multiples of 8, got " + to_string(s));
    if (prior.shape() != Shape{s[0], prior_dim})
      throw ShapeError("ocformer", "prior must be [N, " + std::to_string(prior_dim) + "], got " + to_string(prior.shape()));
    std::array<DiffTensor<T>, 4> skips;
    auto f = embed(g, concat<T>({x_hat, x_tilde}, 1));
    for (std::size_t l = 0; l < 4; ++l) {
      f = level(g, l, f, prior);
      skips[l] = f;
      if (l < 3) f = down[l](g, f);
    }
    for (std::size_t l = 3; l-- > 0;) f = fuse[l](g, concat<T>({up[l](g, f), skips[l]}, 1));
    return add(out(g, f), residual_from_tilde ? x_tilde : x_hat);
  }
};

}  // namespace uldm
