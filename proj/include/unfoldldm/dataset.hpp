#pragma once

// Procedural clean images and paired synthetic datasets.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "degradation.hpp"
#include "image_io.hpp"

namespace uldm {

enum class Texture { Checker, Gradient, Shapes, ValueNoise, Stripes };
inline constexpr Texture kAllTextures[] = {Texture::Checker, Texture::Gradient, Texture::Shapes, Texture::ValueNoise,
                                           Texture::Stripes};

namespace detail {

inline double smoothstep(double t) { return t * t * (3 - 2 * t); }

// Bilinearly interpolated lattice noise summed over octaves, roughly in [0, 1].
inline double value_noise(const std::vector<double>& lattice, std::size_t g, double u, double v) {
  const double x = u * double(g - 1), y = v * double(g - 1);
  const std::size_t i = std::min<std::size_t>(std::size_t(x), g - 2), j = std::min<std::size_t>(std::size_t(y), g - 2);
  const double fx = smoothstep(x - double(i)), fy = smoothstep(y - double(j));
  auto at = [&](std::size_t a, std::size_t b) { return lattice[a * g + b]; };
  return (1 - fx) * ((1 - fy) * at(i, j) + fy * at(i, j + 1)) + fx * ((1 - fy) * at(i + 1, j) + fy * at(i + 1, j + 1));
}

}  // namespace detail

/// One procedural image [c, h, w] on [0, 1]. Colour images tint a shared pattern per channel.
template <class T>
Tensor<T> procedural_image(Texture kind, std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<double> plane(h * w, 0.0);
  auto coord = [&](std::size_t i, std::size_t j) {
    return std::pair<double, double>{(double(i) + 0.5) / double(h), (double(j) + 0.5) / double(w)};
  };
  switch (kind) {
    case Texture::Checker: {
      const double period = 4.0 + std::floor(u01(rng) * 8.0);
      const double lo = 0.1 + 0.3 * u01(rng), hi = 0.6 + 0.3 * u01(rng);
      const auto oi = std::size_t(u01(rng) * period), oj = std::size_t(u01(rng) * period);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          plane[i * w + j] = ((std::size_t((i + oi) / period) + std::size_t((j + oj) / period)) % 2) ? hi : lo;
      break;
    }
    case Texture::Gradient: {
      const double a = u01(rng) * 2 * M_PI, base = 0.2 + 0.2 * u01(rng), span = 0.4 + 0.3 * u01(rng);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          auto [y, x] = coord(i, j);
          const double r = 0.5 + 0.5 * (std::cos(a) * (x - 0.5) + std::sin(a) * (y - 0.5)) * 1.41421356;
          plane[i * w + j] = base + span * r;
        }
      break;
    }
    case Texture::Shapes: {
      std::fill(plane.begin(), plane.end(), 0.15 + 0.3 * u01(rng));
      const int count = 3 + int(u01(rng) * 5);
      for (int s = 0; s < count; ++s) {
        const double cy = u01(rng), cx = u01(rng), r = 0.08 + 0.25 * u01(rng), level = 0.1 + 0.85 * u01(rng);
        const bool disc = u01(rng) < 0.5;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            auto [y, x] = coord(i, j);
            const bool in = disc ? (y - cy) * (y - cy) + (x - cx) * (x - cx) < r * r
                                 : std::abs(y - cy) < r && std::abs(x - cx) < 0.7 * r;
            if (in) plane[i * w + j] = level;
          }
      }
      break;
    }
    case Texture::ValueNoise: {
      double amp = 0.5, total = 0;
      for (std::size_t g : {4u, 8u, 16u}) {
        std::vector<double> lattice(g * g);
        for (auto& v : lattice) v = u01(rng);
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            auto [y, x] = coord(i, j);
            plane[i * w + j] += amp * detail::value_noise(lattice, g, y, x);
          }
        total += amp;
        amp *= 0.5;
      }
      for (auto& v : plane) v = 0.05 + 0.9 * v / total;
      break;
    }
    case Texture::Stripes: {
      const double a = u01(rng) * M_PI, freq = 2.0 + 6.0 * u01(rng), phase = u01(rng) * 2 * M_PI;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          auto [y, x] = coord(i, j);
          const double t = std::cos(a) * x + std::sin(a) * y;
          plane[i * w + j] = 0.5 + 0.35 * std::sin(2 * M_PI * freq * t + phase);
        }
      break;
    }
  }
  Tensor<T> img({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double tint = c == 1 ? 1.0 : 0.7 + 0.3 * u01(rng);
    for (std::size_t i = 0; i < h * w; ++i) img[ch * h * w + i] = static_cast<T>(std::clamp(plane[i] * tint, 0.0, 1.0));
  }
  return img;
}

struct PairRecord {
  std::size_t index = 0;
  std::string clean, degraded;  // file names relative to the dataset directory
  std::uint64_t seed = 0;
  std::string spec;
  bool operator==(const PairRecord&) const = default;
};

template <class T>
struct ImagePair {
  Tensor<T> clean, degraded;
  SyntheticDegradation spec;
};

/// Deterministic pair generation: pair i uses a generator seeded from (seed, i), a
/// texture cycled over kAllTextures and a degradation drawn uniformly from `menu`.
template <class T>
std::vector<ImagePair<T>> make_pairs(std::size_t count, std::size_t c, std::size_t h, std::size_t w,
                                     const std::vector<SyntheticDegradation>& menu, std::uint64_t seed) {
  if (menu.empty()) throw FormatError("degradation menu is empty");
  std::vector<ImagePair<T>> out;
  out.reserve(count);
  constexpr std::size_t kinds = std::size(kAllTextures);
  for (std::size_t i = 0; i < count; ++i) {
    std::seed_seq sq{seed, std::uint64_t(i), std::uint64_t(0x5eed)};
    std::mt19937_64 rng(sq);
    ImagePair<T> p;
    p.clean = procedural_image<T>(kAllTextures[i % kinds], c, h, w, rng);
    p.spec = menu[std::uniform_int_distribution<std::size_t>(0, menu.size() - 1)(rng)];
    p.spec.seed = rng();
    p.degraded = synthesize(p.clean, p.spec);
    out.push_back(std::move(p));
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<PairRecord>& recs) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write manifest " + path);
  out << "index,clean,degraded,seed,spec\n";
  for (auto& r : recs) out << r.index << ',' << r.clean << ',' << r.degraded << ',' << r.seed << ',' << r.spec << '\n';
}

inline std::vector<PairRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path);
  std::string line;
  if (!std::getline(in, line) || line != "index,clean,degraded,seed,spec")
    throw FormatError(path + ": missing manifest header");
  std::vector<PairRecord> recs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string p; std::getline(ss, p, ',');) f.push_back(p);
    if (f.size() != 5) throw FormatError(path + ": malformed row: " + line);
    try {
      recs.push_back({std::stoul(f[0]), f[1], f[2], std::stoull(f[3]), f[4]});
    } catch (const std::invalid_argument&) {
      throw FormatError(path + ": malformed row: " + line);
    }
  }
  return recs;
}

/// Writes pairs as clean/NNNN.png, degraded/NNNN.png plus manifest.csv.
template <class T>
std::vector<PairRecord> write_dataset(const std::string& dir, const std::vector<ImagePair<T>>& pairs) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "clean", ec);
  fs::create_directories(fs::path(dir) / "degraded", ec);
  if (ec || !fs::is_directory(fs::path(dir) / "clean")) throw FormatError("cannot create dataset directory " + dir);
  std::vector<PairRecord> recs;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::ostringstream name;
    name << std::setw(4) << std::setfill('0') << i << ".png";
    PairRecord r{i, "clean/" + name.str(), "degraded/" + name.str(), pairs[i].spec.seed, to_string(pairs[i].spec)};
    write_image((fs::path(dir) / r.clean).string(), pairs[i].clean);
    write_image((fs::path(dir) / r.degraded).string(), pairs[i].degraded);
    recs.push_back(std::move(r));
  }
  write_manifest((fs::path(dir) / "manifest.csv").string(), recs);
  return recs;
}

template <class T>
std::vector<ImagePair<T>> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<ImagePair<T>> pairs;
  for (auto& r : read_manifest((fs::path(dir) / "manifest.csv").string())) {
    ImagePair<T> p;
    p.clean = read_image<T>((fs::path(dir) / r.clean).string());
    p.degraded = read_image<T>((fs::path(dir) / r.degraded).string());
    p.spec = parse_degradation(r.spec);
    p.spec.seed = r.seed;
    if (p.clean.shape() != p.degraded.shape()) throw FormatError(dir + ": pair " + std::to_string(r.index) + " shapes differ");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace uldm
