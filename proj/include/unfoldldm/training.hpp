#pragma once

// Two-phase optimisation and the inference loop.

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "dataset.hpp"
#include "log.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace uldm {

struct LossReport {
  std::size_t step = 0;
  int phase = 1;
  double l_rec = 0, l_isda = 0, l_diff = 0, total = 0, lr = 0;
  double zeta_isda = 1, zeta_diff = 0;  // weights actually applied
  double rollout_l_diff = NAN;          // |P_hat - P^h| over a full reverse chain (phase II)
  std::vector<double> stage_gaps;       // mean |x_hat_k - x_tilde_k|, k = 1..K
};

inline std::string loss_csv_header(std::size_t stages) {
  std::string h = "step,l_rec,l_isda,l_diff,total,lr,rollout_l_diff";
  for (std::size_t k = 1; k <= stages; ++k) h += ",gap_" + std::to_string(k);
  return h;
}

inline std::string loss_csv_row(const LossReport& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.step << ',' << r.l_rec << ',' << r.l_isda << ',' << r.l_diff << ',' << r.total << ','
     << r.lr << ',' << r.rollout_l_diff;
  for (double g : r.stage_gaps) os << ',' << g;
  return os.str();
}

/// ISDA is meaningful only while both gradient branches are in use.
inline bool isda_active(const Ablation& ab) { return !ab.no_isda && !ab.no_x_hat && !ab.no_x_tilde; }

/// Total objective for one forward pass; fills every scalar of `rep` except step and lr.
template <class T>
DiffTensor<T> total_loss(Graph<T>& g, const UnfoldModel& model, const ForwardResult<T>& res, const Tensor<T>& gt,
                         int phase, const RunConfig& cfg, LossReport& rep) {
  rep.phase = phase;
  auto rec = loss_rec(res.final_output(), g.constant(gt));
  std::vector<std::pair<DiffTensor<T>, DiffTensor<T>>> pairs;
  rep.stage_gaps.clear();
  for (auto& s : res.stages) {
    pairs.emplace_back(s.x_hat, s.x_tilde);
    double acc = 0;
    const auto& a = s.x_hat.value();
    const auto& b = s.x_tilde.value();
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(double(a[i]) - double(b[i]));
    rep.stage_gaps.push_back(acc / double(a.size()));
  }
  rep.zeta_isda = isda_active(model.cfg.ablation) ? (phase == 1 ? cfg.zeta1 : cfg.zeta2) : 0.0;
  DiffTensor<T> total = rec;
  rep.l_rec = rec.value()[0];
  if (pairs.size() >= 2) {
    auto isda = loss_isda(g, pairs);
    rep.l_isda = isda.value()[0];
    if (rep.zeta_isda != 0) total = add(total, scalar_mul(isda, static_cast<T>(rep.zeta_isda)));
  } else {
    rep.l_isda = 0;
  }
  rep.zeta_diff = 0;
  rep.l_diff = 0;
  if (phase == 2 && !res.eps_loss.empty()) {
    DiffTensor<T> diff = res.eps_loss[0];
    for (std::size_t k = 1; k < res.eps_loss.size(); ++k) diff = add(diff, res.eps_loss[k]);
    diff = scalar_mul(diff, static_cast<T>(1.0 / double(res.eps_loss.size())));
    rep.l_diff = diff.value()[0];
    rep.zeta_diff = cfg.zeta3;
    if (rep.zeta_diff != 0) total = add(total, scalar_mul(diff, static_cast<T>(rep.zeta_diff)));
  }
  if (!res.rollout_l1.empty()) {
    double s = 0;
    for (double v : res.rollout_l1) s += v;
    rep.rollout_l_diff = s / double(res.rollout_l1.size());
  }
  rep.total = total.value()[0];
  return total;
}

inline PriorMode inference_mode(const UnfoldModel& model) {
  return model.cfg.ablation.no_drldm ? PriorMode::Conditional : PriorMode::Generated;
}

/// Stacks [c, h, w] images into [N, c, h, w].
template <class T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& imgs) {
  if (imgs.empty()) throw ShapeError("stack", "no images");
  const Shape s = imgs[0]->shape();
  Shape out{imgs.size()};
  out.insert(out.end(), s.begin(), s.end());
  Tensor<T> t(out);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    if (imgs[i]->shape() != s) throw ShapeError("stack", to_string(imgs[i]->shape()) + " vs " + to_string(s));
    std::copy(imgs[i]->values().begin(), imgs[i]->values().end(), t.data() + i * numel(s));
  }
  return t;
}

struct TrainHooks {
  std::function<void(const LossReport&)> on_step;  // every step
  std::string csv_path;                            // appended every log_every steps when set
};

/// Runs one training phase in place on `reg`. Each step draws `batch` clean images
/// from `clean` and degrades each with a fresh draw from the configured menu.
/// Phase 2 freezes the clean-prior encoder. Throws NumericError on a non-finite loss.
template <class T>
std::vector<LossReport> train_phase(const UnfoldModel& model, ParamRegistry<T>& reg, const RunConfig& cfg, int phase,
                                    const std::vector<Tensor<T>>& clean, const TrainHooks& hooks = {}) {
  if (phase != 1 && phase != 2) throw ConfigError("phase must be 1 or 2");
  if (clean.empty()) throw FormatError("training set is empty");
  const std::size_t steps = phase == 1 ? cfg.phase1_steps : cfg.phase2_steps;
  const auto menu = cfg.degradation_menu();
  reg.unfreeze_all();
  if (phase == 2) reg.freeze_prefix(UnfoldModel::kPiPrefix);

  std::ofstream csv;
  if (!hooks.csv_path.empty()) {
    csv.open(hooks.csv_path, std::ios::app);
    if (!csv) throw FormatError("cannot append to " + hooks.csv_path);
    if (csv.tellp() == 0) csv << loss_csv_header(model.cfg.stages) << '\n';
  }

  Rng rng(cfg.seed * 7919 + static_cast<std::uint64_t>(phase));
  Adam<T> opt;
  std::vector<LossReport> reports;
  reports.reserve(steps);
  std::uniform_int_distribution<std::size_t> pick_img(0, clean.size() - 1), pick_deg(0, menu.size() - 1);
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<Tensor<T>> ys, gts;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const Tensor<T>& img = clean[pick_img(rng)];
      SyntheticDegradation d = menu[pick_deg(rng)];
      d.seed = rng();
      ys.push_back(synthesize(img, d));
      gts.push_back(img);
    }
    std::vector<const Tensor<T>*> yp, gp;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      yp.push_back(&ys[b]);
      gp.push_back(&gts[b]);
    }
    const Tensor<T> yb = stack(yp), gb = stack(gp);

    Graph<T> g(reg);
    ForwardOptions<T> fo;
    fo.x_gt = &gb;
    fo.rng = &rng;
    fo.seed = rng();
    if (phase == 1) {
      fo.mode = PriorMode::Clean;
    } else {
      fo.mode = inference_mode(model);
      fo.train_denoiser = fo.mode == PriorMode::Generated;
    }
    auto res = model.forward(g, yb, fo);
    LossReport rep;
    auto loss = total_loss(g, model, res, gb, phase, cfg, rep);
    rep.step = step;
    rep.lr = cosine_lr(step, steps, cfg.lr, cfg.lr_min);
    if (!std::isfinite(rep.total)) {
      std::ostringstream os;
      os << "non-finite loss at phase " << phase << " step " << step << ": l_rec=" << rep.l_rec
         << " l_isda=" << rep.l_isda << " l_diff=" << rep.l_diff;
      throw NumericError(os.str());
    }
    auto grads = g.backward(loss);
    opt.step(reg, grads, rep.lr);
    if (csv.is_open() && (step % std::max<std::size_t>(cfg.log_every, 1) == 0 || step + 1 == steps))
      csv << loss_csv_row(rep) << '\n';
    if (hooks.on_step) hooks.on_step(rep);
    reports.push_back(std::move(rep));
  }
  return reports;
}

template <class T>
struct StageTrace {
  Tensor<T> x_hat, x_tilde, x;  // cropped to the input extents
  std::vector<double> w_norms, m_norms;  // Frobenius norm per channel
};

template <class T>
struct InferResult {
  Tensor<T> restored;
  std::vector<StageTrace<T>> stages;
  bool padded = false;
  std::string note;
};

/// Reflect-pads [c, h, w] to [c, H, W].
template <class T>
Tensor<T> reflect_pad(const Tensor<T>& x, std::size_t H, std::size_t W) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({c, H, W});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        out[(ch * H + i) * W + j] =
            x[(ch * h + detail::reflect_index(std::ptrdiff_t(i), h)) * w + detail::reflect_index(std::ptrdiff_t(j), w)];
  return out;
}

/// Top-left [c, h, w] window of image `n` in a batch [N, c, H, W].
template <class T>
Tensor<T> crop(const Tensor<T>& batch, std::size_t n, std::size_t h, std::size_t w) {
  const std::size_t c = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  Tensor<T> out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(batch.data() + ((n * c + ch) * H + i) * W, w, out.data() + (ch * h + i) * w);
  return out;
}

/// Restores one [c, h, w] image. Inputs smaller than the configured extents are
/// reflect-padded and the outputs cropped back; larger inputs are rejected.
template <class T>
InferResult<T> infer(const UnfoldModel& model, ParamRegistry<T>& reg, const Tensor<T>& y, std::uint64_t seed) {
  const auto& mc = model.cfg;
  if (y.rank() != 3 || y.dim(0) != mc.channels)
    throw ShapeError("infer", "expected [" + std::to_string(mc.channels) + ", h, w], got " + to_string(y.shape()));
  const std::size_t h = y.dim(1), w = y.dim(2);
  if (h > mc.height || w > mc.width)
    throw ShapeError("infer", "image " + to_string(y.shape()) + " exceeds the model extents " +
                                  std::to_string(mc.height) + "x" + std::to_string(mc.width));
  InferResult<T> out;
  Tensor<T> yin = y;
  if (h != mc.height || w != mc.width) {
    yin = reflect_pad(y, mc.height, mc.width);
    out.padded = true;
    out.note = "reflect-padded " + std::to_string(h) + "x" + std::to_string(w) + " to " + std::to_string(mc.height) +
               "x" + std::to_string(mc.width) + ", outputs cropped";
  }
  Graph<T> g(reg);
  ForwardOptions<T> fo;
  fo.mode = inference_mode(model);
  fo.seed = seed;
  auto res = model.forward(g, stack<T>({&yin}), fo);
  for (std::size_t k = 0; k < res.stages.size(); ++k) {
    const auto& s = res.stages[k];
    StageTrace<T> st;
    st.x_hat = crop(s.x_hat.value(), 0, h, w);
    st.x_tilde = crop(s.x_tilde.value(), 0, h, w);
    st.x = crop(res.outputs[k].value(), 0, h, w);
    auto norms = [](const Tensor<T>& f) {
      const std::size_t c = f.dim(1), block = f.dim(2) * f.dim(3);
      std::vector<double> r(c);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (std::size_t i = 0; i < block; ++i) acc += double(f[ch * block + i]) * double(f[ch * block + i]);
        r[ch] = std::sqrt(acc);
      }
      return r;
    };
    st.w_norms = norms(s.w.value());
    st.m_norms = norms(s.m.value());
    out.stages.push_back(std::move(st));
  }
  out.restored = out.stages.back().x;
  return out;
}

struct EvalSummary {
  std::size_t images = 0;
  double psnr_input = 0, ssim_input = 0, psnr_output = 0, ssim_output = 0;
  std::vector<double> stage_psnr;  // mean PSNR of x_k, k = 1..K
  std::vector<double> per_image_psnr, per_image_ssim;
};

/// PSNR/SSIM of degraded inputs and restored outputs over `pairs`; image i uses seed + i.
template <class T>
EvalSummary evaluate(const UnfoldModel& model, ParamRegistry<T>& reg, const std::vector<ImagePair<T>>& pairs,
                     std::uint64_t seed) {
  EvalSummary s;
  s.stage_psnr.assign(model.cfg.stages, 0.0);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto r = infer(model, reg, pairs[i].degraded, seed + i);
    const double p = psnr(r.restored, pairs[i].clean), q = ssim(r.restored, pairs[i].clean);
    s.per_image_psnr.push_back(p);
    s.per_image_ssim.push_back(q);
    s.psnr_output += p;
    s.ssim_output += q;
    s.psnr_input += psnr(pairs[i].degraded, pairs[i].clean);
    s.ssim_input += ssim(pairs[i].degraded, pairs[i].clean);
    for (std::size_t k = 0; k < r.stages.size(); ++k) s.stage_psnr[k] += psnr(r.stages[k].x, pairs[i].clean);
  }
  s.images = pairs.size();
  if (s.images) {
    const double n = double(s.images);
    s.psnr_input /= n;
    s.ssim_input /= n;
    s.psnr_output /= n;
    s.ssim_output /= n;
    for (auto& v : s.stage_psnr) v /= n;
  }
  return s;
}

}  // namespace uldm
