#pragma once

// Parameterised layers. Each layer owns only its registry paths; values live in
// the ParamRegistry so every stage that calls a layer shares its weights.

#include <optional>
#include <random>
#include <string>

#include "ops.hpp"
#include "params.hpp"

namespace uldm {

using Rng = std::mt19937_64;

/// Dense k x k convolution with reflect padding.
struct Conv {
  std::string path;
  std::size_t in = 0, out = 0, kernel = 3, stride = 1, pad = 1;
  bool bias = true;

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    const std::size_t fan_in = in * kernel * kernel;
    reg.add(path + ".weight", init_uniform<T>({out, in, kernel, kernel}, fan_in, rng));
    if (bias) reg.add(path + ".bias", init_uniform<T>({out}, fan_in, rng));
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> x) const {
    std::optional<DiffTensor<T>> b;
    if (bias) b = g.param(path + ".bias");
    return conv2d(x, g.param(path + ".weight"), b, stride, pad);
  }

  template <class T>
  void zero(ParamRegistry<T>& reg) const {
    reg.get(path + ".weight").fill(T(0));
    if (bias) reg.get(path + ".bias").fill(T(0));
  }
};

inline Conv pointwise(std::string path, std::size_t in, std::size_t out, bool bias = true) {
  return Conv{std::move(path), in, out, 1, 1, 0, bias};
}

/// Per-channel k x k convolution, same size.
struct DepthwiseConv {
  std::string path;
  std::size_t channels = 0, kernel = 3;
  bool bias = true;

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    reg.add(path + ".weight", init_uniform<T>({channels, 1, kernel, kernel}, kernel * kernel, rng));
    if (bias) reg.add(path + ".bias", init_uniform<T>({channels}, kernel * kernel, rng));
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> x) const {
    std::optional<DiffTensor<T>> b;
    if (bias) b = g.param(path + ".bias");
    return depthwise_conv2d(x, g.param(path + ".weight"), b);
  }
};

/// Kernel-2 stride-2 transposed convolution (2x upsampling).
struct UpConv {
  std::string path;
  std::size_t in = 0, out = 0;

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    reg.add(path + ".weight", init_uniform<T>({in, out, 2, 2}, in, rng));
    reg.add(path + ".bias", init_uniform<T>({out}, in, rng));
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> x) const {
    return conv_transpose2d(x, g.param(path + ".weight"), std::optional<DiffTensor<T>>(g.param(path + ".bias")));
  }
};

/// Affine map on [N, in] rows: x W + b.
struct Linear {
  std::string path;
  std::size_t in = 0, out = 0;

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    reg.add(path + ".weight", init_uniform<T>({in, out}, in, rng));
    reg.add(path + ".bias", init_uniform<T>({out}, in, rng));
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> x) const {
    const std::size_t n = x.dim(0);
    auto y = matmul(x, g.param(path + ".weight"));
    auto b = expand(reshape(g.param(path + ".bias"), {1, out}), {n, out});
    return add(y, b);
  }

  template <class T>
  void zero_bias(ParamRegistry<T>& reg) const {
    reg.get(path + ".bias").fill(T(0));
  }
};

/// Layer norm across the channel axis of [N, C, H, W].
struct ChannelNorm {
  std::string path;
  std::size_t channels = 0;

  template <class T>
  void init(ParamRegistry<T>& reg, Rng&) const {
    reg.add(path + ".gamma", Tensor<T>({channels}, T(1)));
    reg.add(path + ".beta", Tensor<T>({channels}, T(0)));
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> x) const {
    return layer_norm(x, 1, g.param(path + ".gamma"), g.param(path + ".beta"));
  }
};

/// Pointwise followed by depthwise 3x3, bias-free: the projection used for
/// attention queries/keys/values and the detail-recovery gates.
struct Projection {
  Conv pw;
  DepthwiseConv dw;

  Projection() = default;
  Projection(const std::string& path, std::size_t channels)
      : pw(pointwise(path + ".pw", channels, channels, false)), dw{path + ".dw", channels, 3, false} {}

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    pw.init(reg, rng);
    dw.init(reg, rng);
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> x) const {
    return dw(g, pw(g, x));
  }

  template <class T>
  void zero(ParamRegistry<T>& reg) const {
    pw.zero(reg);
  }
};

/// Shape-preserving learned sequence mixer: depthwise 3x3 -> pointwise ->
/// channel norm -> GELU -> pointwise, added to the (projected) input. The norm
/// runs on the hidden width because image-level channel counts can be 1.
struct SeqMixBlock {
  std::string path;
  std::size_t in = 0, out = 0, hidden = 16;
  DepthwiseConv dw;
  Conv pw1, pw2;
  ChannelNorm norm;
  std::optional<Conv> skip;

  SeqMixBlock() = default;
  SeqMixBlock(std::string p, std::size_t in_ch, std::size_t out_ch, std::size_t hidden_ch)
      : path(std::move(p)), in(in_ch), out(out_ch), hidden(hidden_ch) {
    dw = DepthwiseConv{path + ".dw", in, 3, true};
    pw1 = pointwise(path + ".pw1", in, hidden);
    norm = ChannelNorm{path + ".norm", hidden};
    pw2 = pointwise(path + ".pw2", hidden, out);
    if (in != out) skip = pointwise(path + ".skip", in, out);
  }

  template <class T>
  void init(ParamRegistry<T>& reg, Rng& rng) const {
    dw.init(reg, rng);
    pw1.init(reg, rng);
    norm.init(reg, rng);
    pw2.init(reg, rng);
    if (skip) skip->init(reg, rng);
  }

  /// Makes the block an identity map (when in == out) by zeroing the output projection.
  template <class T>
  void make_identity(ParamRegistry<T>& reg) const {
    pw2.zero(reg);
  }

  template <class T>
  DiffTensor<T> residual_path(Graph<T>& g, DiffTensor<T> x) const {
    return skip ? (*skip)(g, x) : x;
  }

  template <class T>
  DiffTensor<T> operator()(Graph<T>& g, DiffTensor<T> x) const {
    auto r = pw2(g, gelu(norm(g, pw1(g, dw(g, x)))));
    return add(residual_path(g, x), r);
  }
};

}  // namespace uldm
