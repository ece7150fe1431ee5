#pragma once

#include <cmath>
#include <vector>

#include "tensor.hpp"

namespace uldm {

inline constexpr double kPsnrCap = 100.0;

/// PSNR in dB for intensities on [0, 1]; identical images give kPsnrCap.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double cap = kPsnrCap) {
  if (a.shape() != b.shape()) throw ShapeError("psnr", to_string(a.shape()) + " vs " + to_string(b.shape()));
  double mse = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    mse += d * d;
  }
  mse /= double(a.size());
  if (mse <= 0) return cap;
  return std::min(cap, -10.0 * std::log10(mse));
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  double s = 0;
  for (int i = 0; i < size; ++i) {
    const double x = i - (size - 1) / 2.0;
    g[i] = std::exp(-x * x / (2 * sigma * sigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Separable "valid" Gaussian filtering of one h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                        const std::vector<double>& g) {
  const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += g[t] * img[i * w + j + t];
      tmp[i * ow + j] = acc;
    }
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += g[t] * tmp[(i + t) * ow + j];
      out[i * ow + j] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2, dynamic range 1. Images smaller than the window shrink it to fit.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("ssim", to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (a.rank() < 2) throw ShapeError("ssim", "needs at least [h, w], got " + to_string(a.shape()));
  const std::size_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1), planes = a.size() / (h * w);
  int win = static_cast<int>(std::min<std::size_t>({11, h, w}));
  const auto g = detail::gaussian_window(win, 1.5);
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double total = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      x[i] = a[p * h * w + i];
      y[i] = b[p * h * w + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, h, w, g), my = detail::filter_valid(y, h, w, g);
    const auto sxx = detail::filter_valid(xx, h, w, g), syy = detail::filter_valid(yy, h, w, g),
               sxy = detail::filter_valid(xy, h, w, g);
    double acc = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + C1) * (2 * cxy + C2)) / ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
    }
    total += acc / double(mx.size());
  }
  return total / double(planes);
}

}  // namespace uldm
