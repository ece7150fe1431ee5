#pragma once

// Finite-difference gradient suites at 64-bit. Each suite builds a small random
// problem, contracts its output with a fixed random probe and compares the
// reverse-mode gradient of every input and parameter with central differences.

#include <cmath>
#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mgda.hpp"
#include "ocformer.hpp"
#include "prior.hpp"

namespace uldm {

struct FdProblem {
  ParamRegistry<double> reg;
  std::vector<Tensor<double>> inputs;
  std::function<DiffTensor<double>(Graph<double>&, const std::vector<DiffTensor<double>>&)> forward;
};

struct FdSuite {
  std::string name;
  std::vector<OpKind> covers;  // op kinds whose backward rules the suite exercises
  std::function<FdProblem(Rng&)> make;
};

struct FdResult {
  std::string suite;
  double max_rel_error = 0;
  std::string worst;  // tensor with the largest error
  bool passed = false;
};

struct FdOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_coords = 24;  // sampled entries per tensor
  std::uint64_t seed = 11;
};

namespace detail {

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Values with magnitude in [0.2, 1] and random sign, away from kinks at zero.
inline Tensor<double> signed_tensor(Shape s, Rng& rng) {
  Tensor<double> t = random_tensor(std::move(s), rng, 0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.values())
    if (sign(rng)) v = -v;
  return t;
}

// Moves every parameter off its structured initial value (zeros, ones).
inline void jitter(ParamRegistry<double>& reg, Rng& rng, double scale = 0.3) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& p : reg.paths())
    for (auto& v : reg.get(p).values()) v += d(rng);
}

using Fwd = std::function<DiffTensor<double>(Graph<double>&, const std::vector<DiffTensor<double>>&)>;

inline FdSuite op_suite(std::string name, std::vector<OpKind> covers, std::vector<std::function<Tensor<double>(Rng&)>> ins,
                        Fwd f) {
  return {std::move(name), std::move(covers), [ins, f](Rng& rng) {
            FdProblem p;
            for (auto& make : ins) p.inputs.push_back(make(rng));
            p.forward = f;
            return p;
          }};
}

inline std::function<Tensor<double>(Rng&)> uni(Shape s) {
  return [s](Rng& r) { return random_tensor(s, r); };
}
inline std::function<Tensor<double>(Rng&)> away(Shape s) {
  return [s](Rng& r) { return signed_tensor(s, r); };
}
inline std::function<Tensor<double>(Rng&)> positive(Shape s) {
  return [s](Rng& r) { return random_tensor(s, r, 0.5, 1.5); };
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.channels = 1;
  c.height = 8;
  c.width = 8;
  c.stages = 2;
  c.prior_dim = 6;
  c.blocks = {1, 1, 1, 1};
  c.base_width = 2;
  c.mixer_hidden = 3;
  c.pi_width = 3;
  c.denoiser_hidden = 8;
  c.time_embed = 4;
  return c;
}

}  // namespace detail

/// Every registered suite: one per op kind (several for conv2d) and one per block.
inline std::vector<FdSuite> gradcheck_suites() {
  using namespace detail;
  using V = std::vector<DiffTensor<double>>;
  using K = OpKind;
  std::vector<FdSuite> s;
  s.push_back(op_suite("matmul", {K::MatMul}, {uni({3, 4}), uni({4, 5})},
                       [](Graph<double>&, const V& v) { return matmul(v[0], v[1]); }));
  s.push_back(op_suite("batched_matmul", {K::BatchedMatMul}, {uni({2, 3, 4}), uni({2, 4, 3})},
                       [](Graph<double>&, const V& v) { return batched_matmul(v[0], v[1]); }));
  s.push_back(op_suite("conv2d_3x3", {K::Conv2d}, {uni({2, 3, 5, 6}), uni({4, 3, 3, 3}), uni({4})},
                       [](Graph<double>&, const V& v) { return conv2d<double>(v[0], v[1], v[2], 1, 1); }));
  s.push_back(op_suite("conv2d_1x1", {K::Conv2d}, {uni({2, 3, 4, 4}), uni({2, 3, 1, 1})},
                       [](Graph<double>&, const V& v) { return conv2d<double>(v[0], v[1], std::nullopt, 1, 0); }));
  s.push_back(op_suite("conv2d_stride2", {K::Conv2d}, {uni({1, 2, 7, 6}), uni({3, 2, 3, 3}), uni({3})},
                       [](Graph<double>&, const V& v) { return conv2d<double>(v[0], v[1], v[2], 2, 1); }));
  s.push_back(op_suite("depthwise_conv2d", {K::DepthwiseConv2d}, {uni({2, 3, 5, 4}), uni({3, 1, 3, 3}), uni({3})},
                       [](Graph<double>&, const V& v) { return depthwise_conv2d<double>(v[0], v[1], v[2]); }));
  s.push_back(op_suite("conv_transpose2d", {K::ConvTranspose2d}, {uni({2, 3, 3, 4}), uni({3, 2, 2, 2}), uni({2})},
                       [](Graph<double>&, const V& v) { return conv_transpose2d<double>(v[0], v[1], v[2]); }));
  s.push_back(op_suite("transpose", {K::Transpose}, {uni({2, 3, 4})},
                       [](Graph<double>&, const V& v) { return transpose(v[0]); }));
  s.push_back(op_suite("reshape", {K::Reshape}, {uni({2, 3, 4})},
                       [](Graph<double>&, const V& v) { return reshape(v[0], {4, 6}); }));
  s.push_back(op_suite("concat", {K::Concat}, {uni({2, 1, 3}), uni({2, 2, 3}), uni({2, 3, 3})},
                       [](Graph<double>&, const V& v) { return concat(v, 1); }));
  s.push_back(op_suite("slice", {K::Slice}, {uni({2, 6, 3})},
                       [](Graph<double>&, const V& v) { return mul(split(v[0], 1, 3)[1], split(v[0], 1, 3)[2]); }));
  s.push_back(op_suite("expand", {K::Expand}, {uni({2, 1, 3})},
                       [](Graph<double>&, const V& v) { return expand(v[0], {2, 4, 3}); }));
  s.push_back(op_suite("add", {K::Add}, {uni({3, 4}), uni({3, 4})},
                       [](Graph<double>&, const V& v) { return add(v[0], v[1]); }));
  s.push_back(op_suite("sub", {K::Sub}, {uni({3, 4}), uni({3, 4})},
                       [](Graph<double>&, const V& v) { return sub(v[0], v[1]); }));
  s.push_back(op_suite("mul", {K::Mul}, {uni({3, 4}), uni({3, 4})},
                       [](Graph<double>&, const V& v) { return mul(v[0], v[1]); }));
  s.push_back(op_suite("div", {K::Div}, {uni({3, 4}), positive({3, 4})},
                       [](Graph<double>&, const V& v) { return div(v[0], v[1]); }));
  s.push_back(op_suite("scalar_mul", {K::ScalarMul}, {uni({3, 4})},
                       [](Graph<double>&, const V& v) { return scalar_mul(v[0], -1.7); }));
  s.push_back(op_suite("scalar_tensor_mul", {K::ScalarTensorMul}, {uni({1}), uni({3, 4})},
                       [](Graph<double>&, const V& v) { return scalar_tensor_mul(v[0], v[1]); }));
  s.push_back(op_suite("add_scalar", {K::AddScalar, K::Mul}, {uni({3, 4})},
                       [](Graph<double>&, const V& v) { return mul(add_scalar(v[0], 0.7), v[0]); }));
  s.push_back(op_suite("softmax", {K::Softmax}, {uni({3, 5})},
                       [](Graph<double>&, const V& v) { return softmax(scalar_mul(v[0], 2.0)); }));
  s.push_back(op_suite("gelu", {K::Gelu}, {uni({3, 5})}, [](Graph<double>&, const V& v) { return gelu(scalar_mul(v[0], 2.0)); }));
  s.push_back(op_suite("softplus", {K::Softplus}, {uni({3, 5})},
                       [](Graph<double>&, const V& v) { return softplus(scalar_mul(v[0], 2.0)); }));
  s.push_back(op_suite("layer_norm", {K::LayerNorm}, {uni({2, 5, 3}), uni({5}), uni({5})},
                       [](Graph<double>&, const V& v) { return layer_norm(v[0], 1, v[1], v[2]); }));
  s.push_back(op_suite("mean_pool", {K::MeanPool}, {uni({2, 3, 4, 5})},
                       [](Graph<double>&, const V& v) { return mean_pool(v[0]); }));
  s.push_back(op_suite("sum", {K::Sum, K::Mul}, {uni({3, 4})},
                       [](Graph<double>&, const V& v) { return mul(sum(v[0]), sum(v[0])); }));
  s.push_back(op_suite("l1_sum", {K::L1Sum}, {away({3, 4})}, [](Graph<double>&, const V& v) { return l1_sum(v[0]); }));
  s.push_back(op_suite("l2_norm", {K::L2Norm}, {uni({2, 3, 4})},
                       [](Graph<double>&, const V& v) { return l2_norm(v[0], 2); }));

  // Blocks.
  s.push_back({"seqmix",
               {K::DepthwiseConv2d, K::Conv2d, K::LayerNorm, K::Gelu, K::Add},
               [](Rng& rng) {
                 FdProblem p;
                 auto blk = std::make_shared<SeqMixBlock>("mix", 2, 3, 4);
                 blk->init(p.reg, rng);
                 jitter(p.reg, rng);
                 p.inputs.push_back(random_tensor({2, 2, 5, 4}, rng));
                 p.forward = [blk](Graph<double>& g, const V& v) { return (*blk)(g, v[0]); };
                 return p;
               }});
  s.push_back({"dra",
               {K::Softmax, K::BatchedMatMul, K::Transpose, K::L2Norm, K::Div, K::Softplus, K::ScalarTensorMul},
               [](Rng& rng) {
                 FdProblem p;
                 auto blk = std::make_shared<DRABlock>("dra", 3);
                 blk->init(p.reg, rng);
                 jitter(p.reg, rng);
                 p.inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
                 p.forward = [blk](Graph<double>& g, const V& v) { return (*blk)(g, v[0]); };
                 return p;
               }});
  s.push_back({"pdr",
               {K::LayerNorm, K::MatMul, K::Expand, K::Mul, K::Gelu},
               [](Rng& rng) {
                 FdProblem p;
                 auto blk = std::make_shared<PDRBlock>("pdr", 3, 5);
                 blk->init(p.reg, rng);
                 jitter(p.reg, rng);
                 p.inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
                 p.inputs.push_back(random_tensor({2, 5}, rng));
                 p.forward = [blk](Graph<double>& g, const V& v) { return (*blk)(g, v[0], v[1]); };
                 return p;
               }});
  auto encoder_suite = [](std::string name, std::size_t streams) {
    return FdSuite{name,
                   {K::Concat, K::Conv2d, K::Gelu, K::MeanPool, K::MatMul, K::LayerNorm},
                   [name, streams](Rng& rng) {
                     FdProblem p;
                     auto enc = std::make_shared<PriorEncoder>(name, streams, 6, 3);
                     enc->init(p.reg, rng);
                     jitter(p.reg, rng);
                     for (std::size_t i = 0; i < streams; ++i) p.inputs.push_back(random_tensor({2, 1, 8, 8}, rng));
                     p.forward = [enc](Graph<double>& g, const V& v) { return (*enc)(g, v); };
                     return p;
                   }};
  };
  s.push_back(encoder_suite("pi", 3));
  s.push_back(encoder_suite("pi_prime", 2));
  s.push_back({"denoiser",
               {K::Concat, K::MatMul, K::Gelu},
               [](Rng& rng) {
                 FdProblem p;
                 auto den = std::make_shared<Denoiser>("denoiser", 5, 8, 4);
                 den->init(p.reg, rng);
                 jitter(p.reg, rng);
                 p.inputs.push_back(random_tensor({3, 5}, rng));
                 p.inputs.push_back(random_tensor({3, 5}, rng));
                 p.forward = [den](Graph<double>& g, const V& v) { return (*den)(g, v[0], v[1], {1, 2, 3}); };
                 return p;
               }});
  s.push_back({"mgda_stage",
               {K::BatchedMatMul, K::Transpose, K::L2Norm, K::Div, K::Slice, K::ScalarTensorMul, K::Softplus},
               [](Rng& rng) {
                 FdProblem p;
                 const auto cfg = tiny_config();
                 auto mg = std::make_shared<MgdaModule>(cfg);
                 mg->init(p.reg, rng, 0.5);
                 jitter(p.reg, rng);
                 p.inputs.push_back(random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0));  // x_prev
                 p.inputs.push_back(random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0));  // y
                 p.inputs.push_back(random_tensor({2, 1, 8, 8}, rng));            // W_{k-1}
                 p.forward = [mg](Graph<double>& g, const V& v) {
                   auto st = mg->run_stage(g, v[0], v[1], v[2], 2);
                   return concat<double>({st.x_hat, st.x_tilde, st.w, st.m}, 1);
                 };
                 return p;
               }});
  s.push_back({"ocformer",
               {K::Conv2d, K::ConvTranspose2d, K::Concat, K::Softmax, K::LayerNorm},
               [](Rng& rng) {
                 FdProblem p;
                 const auto cfg = tiny_config();
                 auto oc = std::make_shared<OCFormer>(cfg);
                 oc->init(p.reg, rng);
                 jitter(p.reg, rng);
                 p.inputs.push_back(random_tensor({1, 1, 16, 16}, rng));
                 p.inputs.push_back(random_tensor({1, 1, 16, 16}, rng));
                 p.inputs.push_back(random_tensor({1, cfg.prior_dim}, rng));
                 p.forward = [oc](Graph<double>& g, const V& v) { return (*oc)(g, v[0], v[1], v[2]); };
                 return p;
               }});
  return s;
}

/// Runs one suite: analytic vs central-difference gradients on sampled entries of
/// every input and parameter. The error of a tensor is ||a - n|| / max(||a||, ||n||)
/// over its sampled entries.
inline FdResult run_suite(const FdSuite& suite, const FdOptions& opt = {}) {
  Rng rng(opt.seed);
  FdProblem p = suite.make(rng);
  // Probe weights: loss = sum(out * R).
  Tensor<double> probe;
  auto eval = [&](const std::vector<Tensor<double>>& ins) {
    Graph<double> g(p.reg);
    std::vector<DiffTensor<double>> vs;
    for (auto& t : ins) vs.push_back(g.constant(t));
    const Tensor<double>& out = p.forward(g, vs).value();
    double acc = 0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * probe[i];
    return acc;
  };

  Graph<double> g(p.reg);
  std::vector<DiffTensor<double>> vars;
  for (auto& t : p.inputs) vars.push_back(g.variable(t));
  auto out = p.forward(g, vars);
  probe = detail::random_tensor(out.shape(), rng);
  auto loss = sum(mul(out, g.constant(probe)));
  auto pgrads = g.backward(loss);

  FdResult res{suite.name, 0.0, "", true};
  auto check_tensor = [&](const std::string& label, Tensor<double>& target, const Tensor<double>& analytic) {
    std::vector<std::size_t> idx(target.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opt.max_coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_coords);
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i : idx) {
      const double orig = target[i];
      target[i] = orig + opt.step;
      const double fp = eval(p.inputs);
      target[i] = orig - opt.step;
      const double fm = eval(p.inputs);
      target[i] = orig;
      const double num = (fp - fm) / (2 * opt.step);
      diff += (analytic[i] - num) * (analytic[i] - num);
      na += analytic[i] * analytic[i];
      nn += num * num;
    }
    const double scale = std::sqrt(std::max(na, nn));
    const double err = scale < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / scale;
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst = label;
    }
  };
  for (std::size_t i = 0; i < p.inputs.size(); ++i) check_tensor("input" + std::to_string(i), p.inputs[i], g.grad(vars[i]));
  for (auto& path : p.reg.paths()) check_tensor(path, p.reg.get(path), pgrads.at(path));
  res.passed = res.max_rel_error <= opt.tolerance;
  return res;
}

inline std::vector<FdResult> run_gradcheck(const FdOptions& opt = {}) {
  std::vector<FdResult> out;
  for (auto& s : gradcheck_suites()) out.push_back(run_suite(s, opt));
  return out;
}

}  // namespace uldm
