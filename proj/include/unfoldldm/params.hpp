#pragma once

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace uldm {

/// Named learnable parameters. One entry per logical parameter; every unfolding
/// stage resolves the same path to the same tensor.
template <class T>
class ParamRegistry {
 public:
  Tensor<T>& add(const std::string& path, Tensor<T> value) {
    auto [it, inserted] = params_.emplace(path, std::move(value));
    if (!inserted) throw FormatError("duplicate parameter path: " + path);
    order_.push_back(path);
    return it->second;
  }

  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  Tensor<T>& get(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw FormatError("unknown parameter path: " + path);
    return it->second;
  }
  const Tensor<T>& get(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw FormatError("unknown parameter path: " + path);
    return it->second;
  }

  /// Paths in registration order.
  const std::vector<std::string>& paths() const noexcept { return order_; }
  std::size_t size() const noexcept { return order_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (auto& [_, t] : params_) n += t.size();
    return n;
  }

  void freeze(const std::string& path) { frozen_.insert(path); }
  /// Freezes every path starting with `prefix`.
  void freeze_prefix(const std::string& prefix) {
    for (auto& p : order_)
      if (p.rfind(prefix, 0) == 0) frozen_.insert(p);
  }
  void unfreeze_all() { frozen_.clear(); }
  bool is_frozen(const std::string& path) const { return frozen_.count(path) != 0; }
  const std::set<std::string>& frozen() const noexcept { return frozen_; }

  template <class U>
  ParamRegistry<U> cast() const {
    ParamRegistry<U> out;
    for (auto& p : order_) out.add(p, get(p).template cast<U>());
    for (auto& f : frozen_) out.freeze(f);
    return out;
  }

 private:
  std::map<std::string, Tensor<T>> params_;
  std::vector<std::string> order_;
  std::set<std::string> frozen_;
};

/// Uniform(-bound, bound) initialisation with bound = gain / sqrt(fan_in).
template <class T, class Rng>
Tensor<T> init_uniform(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  Tensor<T> t(std::move(shape));
  const double bound = gain / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace uldm
