#pragma once

// Reference computations written from the definitions, sharing no code with the library.

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using Mat = std::vector<double>;  // row-major

inline Mat random_mat(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Mat m(n);
  for (auto& v : m) v = d(rng);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b, std::size_t m, std::size_t k, std::size_t n) {
  Mat c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

inline Mat transpose(const Mat& a, std::size_t m, std::size_t n) {
  Mat t(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

// D = M^T (x) W for one channel, row-major vec: D[(i,j),(p,q)] = W[i,p] * M[q,j].
inline Mat holistic(const Mat& w, const Mat& m, std::size_t h, std::size_t wd) {
  const std::size_t n = h * wd;
  Mat d(n * n);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < wd; ++j)
      for (std::size_t p = 0; p < h; ++p)
        for (std::size_t q = 0; q < wd; ++q) d[(i * wd + j) * n + p * wd + q] = w[i * h + p] * m[q * wd + j];
  return d;
}

inline Mat matvec(const Mat& a, const Mat& x, std::size_t rows, std::size_t cols) {
  Mat y(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[i] += a[i * cols + j] * x[j];
  return y;
}

// Central-difference gradient of f at x.
inline Mat fd_gradient(const std::function<double(const Mat&)>& f, Mat x, double step = 1e-5) {
  Mat g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double o = x[i];
    x[i] = o + step;
    const double fp = f(x);
    x[i] = o - step;
    const double fm = f(x);
    x[i] = o;
    g[i] = (fp - fm) / (2 * step);
  }
  return g;
}

inline double rel_error(const Mat& a, const Mat& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double s = std::sqrt(std::max(na, nb));
  return s == 0 ? std::sqrt(d) : std::sqrt(d) / s;
}

// Symmetric eigenvalues by cyclic Jacobi rotations.
inline std::vector<double> sym_eigenvalues(Mat a, std::size_t n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p * n + q]) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * a[p * n + q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
  return ev;
}

// Mean SSIM of one plane with a direct 2-D Gaussian window (no separability), valid positions only.
inline double ssim_plane(const Mat& x, const Mat& y, std::size_t h, std::size_t w, int win = 11, double sigma = 1.5) {
  const int r = win / 2;
  Mat k(static_cast<std::size_t>(win * win));
  double ks = 0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double v = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2 * sigma * sigma));
      k[i * win + j] = v;
      ks += v;
    }
  for (auto& v : k) v /= ks;
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i + win <= h; ++i)
    for (std::size_t j = 0; j + win <= w; ++j) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int a = 0; a < win; ++a)
        for (int b = 0; b < win; ++b) {
          const double wt = k[a * win + b];
          const double xv = x[(i + a) * w + j + b], yv = y[(i + a) * w + j + b];
          mx += wt * xv;
          my += wt * yv;
          sxx += wt * xv * xv;
          syy += wt * yv * yv;
          sxy += wt * xv * yv;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++cnt;
    }
  return acc / double(cnt);
}

}  // namespace oracle
