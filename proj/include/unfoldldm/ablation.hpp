#pragma once

#include <array>
#include <ostream>
#include <string>
#include <vector>

#include "training.hpp"

namespace uldm {

inline constexpr std::array<const char*, 7> kAblationSwitches = {"no_x_hat", "no_x_tilde", "no_seqmix", "no_isda",
                                                                 "no_dra",   "no_pdr",     "no_drldm"};

/// The full model with exactly one switch set ("full" sets none).
inline Ablation ablation_variant(const std::string& name) {
  Ablation a;
  if (name == "full") return a;
  if (name == "no_x_hat") a.no_x_hat = true;
  else if (name == "no_x_tilde") a.no_x_tilde = true;
  else if (name == "no_seqmix") a.no_seqmix = true;
  else if (name == "no_isda") a.no_isda = true;
  else if (name == "no_dra") a.no_dra = true;
  else if (name == "no_pdr") a.no_pdr = true;
  else if (name == "no_drldm") a.no_drldm = true;
  else throw ConfigError("unknown ablation switch: " + name);
  return a;
}

struct AblationColumn {
  std::string name;
  double psnr = 0, ssim = 0;
};

struct AblationTable {
  double psnr_input = 0, ssim_input = 0;
  std::vector<AblationColumn> columns;  // "full" first, then kAblationSwitches in order

  /// Rows psnr and ssim; columns full then the switches.
  std::string csv() const {
    std::string out = "metric";
    for (auto& c : columns) out += "," + c.name;
    out += "\npsnr";
    for (auto& c : columns) out += "," + detail::fmt_real(c.psnr);
    out += "\nssim";
    for (auto& c : columns) out += "," + detail::fmt_real(c.ssim);
    return out + "\n";
  }
};

/// Trains one variant through both phases from `base` and evaluates it.
inline EvalSummary train_and_evaluate(const RunConfig& base, const Ablation& ab, const std::vector<Tensor<float>>& clean,
                                      const std::vector<ImagePair<float>>& test) {
  RunConfig cfg = base;
  cfg.model.ablation = ab;
  UnfoldModel model(cfg.model);
  auto reg = model.init_params<float>(cfg.seed);
  train_phase(model, reg, cfg, 1, clean);
  train_phase(model, reg, cfg, 2, clean);
  return evaluate(model, reg, test, cfg.seed);
}

/// Runs the full model and every single-switch variant with identical data and
/// seeds. A variant beating the full model is logged, not treated as an error.
inline AblationTable run_ablation(const RunConfig& base, const std::vector<Tensor<float>>& clean,
                                  const std::vector<ImagePair<float>>& test) {
  AblationTable table;
  std::vector<std::string> names{"full"};
  names.insert(names.end(), kAblationSwitches.begin(), kAblationSwitches.end());
  for (auto& n : names) {
    log_info("ablation: training variant " + n);
    const auto s = train_and_evaluate(base, ablation_variant(n), clean, test);
    table.psnr_input = s.psnr_input;
    table.ssim_input = s.ssim_input;
    table.columns.push_back({n, s.psnr_output, s.ssim_output});
  }
  for (std::size_t i = 1; i < table.columns.size(); ++i)
    if (table.columns[i].psnr > table.columns[0].psnr)
      log_warn("ablation: " + table.columns[i].name + " exceeds the full model in PSNR (" +
               detail::fmt_real(table.columns[i].psnr) + " > " + detail::fmt_real(table.columns[0].psnr) + ")");
  return table;
}

}  // namespace uldm
