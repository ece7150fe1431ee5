#pragma once

// Binary checkpoint, little-endian throughout:
//   "ULDMCKPT" | u32 version | u32 value bytes (4|8) | u32 phase | u32 count
//   count x { u32 path length | path | u32 rank | u64 extents... | u8 frozen }
//   raw values of every parameter in manifest order

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "params.hpp"

namespace uldm {

inline constexpr char kCheckpointMagic[8] = {'U', 'L', 'D', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ManifestEntry {
  std::string path;
  Shape shape;
  bool frozen = false;
  bool operator==(const ManifestEntry&) const = default;
};

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  std::uint32_t value_bytes = 4;
  std::uint32_t phase = 0;
  std::vector<ManifestEntry> manifest;
};

namespace detail {

template <class U>
void put_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  in.read(reinterpret_cast<char*>(b), sizeof(U));
  if (!in) throw FormatError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

template <class F>
void put_real(std::ostream& out, F v) {
  if constexpr (sizeof(F) == 4)
    put_le(out, std::bit_cast<std::uint32_t>(v));
  else
    put_le(out, std::bit_cast<std::uint64_t>(v));
}

template <class F>
F get_real(std::istream& in) {
  if constexpr (sizeof(F) == 4)
    return std::bit_cast<F>(get_le<std::uint32_t>(in));
  else
    return std::bit_cast<F>(get_le<std::uint64_t>(in));
}

inline CheckpointHeader read_header(std::istream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError(path + ": not a checkpoint");
  CheckpointHeader h;
  h.version = get_le<std::uint32_t>(in);
  if (h.version != kCheckpointVersion) throw FormatError(path + ": unsupported version " + std::to_string(h.version));
  h.value_bytes = get_le<std::uint32_t>(in);
  if (h.value_bytes != 4 && h.value_bytes != 8) throw FormatError(path + ": bad precision field");
  h.phase = get_le<std::uint32_t>(in);
  const auto count = get_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    ManifestEntry e;
    const auto len = get_le<std::uint32_t>(in);
    if (len > (1u << 16)) throw FormatError(path + ": corrupt manifest");
    e.path.resize(len);
    in.read(e.path.data(), len);
    const auto rank = get_le<std::uint32_t>(in);
    if (rank > 8) throw FormatError(path + ": corrupt manifest");
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<std::size_t>(get_le<std::uint64_t>(in)));
    e.frozen = get_le<std::uint8_t>(in) != 0;
    h.manifest.push_back(std::move(e));
  }
  return h;
}

}  // namespace detail

template <class T>
std::vector<ManifestEntry> manifest_of(const ParamRegistry<T>& reg) {
  std::vector<ManifestEntry> m;
  for (auto& p : reg.paths()) m.push_back({p, reg.get(p).shape(), reg.is_frozen(p)});
  return m;
}

template <class T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg, std::uint32_t phase) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 8);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, sizeof(T));
  detail::put_le<std::uint32_t>(out, phase);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(reg.size()));
  for (auto& e : manifest_of(reg)) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.path.size()));
    out.write(e.path.data(), static_cast<std::streamsize>(e.path.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put_le<std::uint64_t>(out, d);
    detail::put_le<std::uint8_t>(out, e.frozen ? 1 : 0);
  }
  for (auto& p : reg.paths())
    for (T v : reg.get(p).values()) detail::put_real(out, v);
  if (!out) throw FormatError("checkpoint write failed: " + path);
}

template <class T>
CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  return detail::read_header(in, path);
}

/// Overwrites `reg` values from `path`. The stored manifest must list exactly the
/// registry's paths and shapes in order. Frozen flags are restored from the file and
/// values stored at the other precision are converted. Returns the header.
template <class T>
CheckpointHeader load_checkpoint(const std::string& path, ParamRegistry<T>& reg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  CheckpointHeader h = detail::read_header(in, path);
  const auto& paths = reg.paths();
  if (h.manifest.size() != paths.size())
    throw FormatError(path + ": manifest has " + std::to_string(h.manifest.size()) + " parameters, registry has " +
                      std::to_string(paths.size()));
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto& e = h.manifest[i];
    if (e.path != paths[i]) throw FormatError(path + ": manifest path " + e.path + " where " + paths[i] + " expected");
    if (e.shape != reg.get(paths[i]).shape())
      throw FormatError(path + ": shape mismatch at " + e.path + ": " + to_string(e.shape) + " vs " +
                        to_string(reg.get(paths[i]).shape()));
  }
  std::vector<Tensor<T>> staged;
  for (auto& e : h.manifest) {
    Tensor<T> t(e.shape);
    for (auto& v : t.values())
      v = h.value_bytes == 4 ? static_cast<T>(detail::get_real<float>(in)) : static_cast<T>(detail::get_real<double>(in));
    staged.push_back(std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after values");
  reg.unfreeze_all();
  for (std::size_t i = 0; i < paths.size(); ++i) {
    reg.get(paths[i]) = std::move(staged[i]);
    if (h.manifest[i].frozen) reg.freeze(paths[i]);
  }
  return h;
}

}  // namespace uldm
