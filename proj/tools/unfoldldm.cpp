// Command-line front end: synth, train, infer, eval, gradcheck, ablate.
// Exit status: 0 success, 1 failure, 2 configuration error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "unfoldldm/ablation.hpp"
#include "unfoldldm/checkpoint.hpp"
#include "unfoldldm/gradcheck.hpp"
#include "unfoldldm/training.hpp"

namespace fs = std::filesystem;
using namespace uldm;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (const char* d = std::getenv("UNFOLDLDM_DATA_DIR")) cfg.data_dir = d;
  if (const char* o = std::getenv("UNFOLDLDM_OUT_DIR")) cfg.out_dir = o;
  for (auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  validate(cfg);
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "run configuration file (key = value)");
  app->add_option("-s,--set", c.overrides, "override one config key, e.g. --set lr=1e-3");
}

std::vector<Tensor<float>> clean_images(const std::vector<ImagePair<float>>& pairs) {
  std::vector<Tensor<float>> out;
  for (auto& p : pairs) out.push_back(p.clean);
  return out;
}

std::vector<ImagePair<float>> load_split(const RunConfig& cfg, const std::string& split) {
  const fs::path dir = fs::path(cfg.data_dir) / split;
  if (!fs::exists(dir / "manifest.csv"))
    throw FormatError("no dataset at " + dir.string() + " (run 'unfoldldm synth' first)");
  return read_dataset<float>(dir.string());
}

std::string ckpt_path(const RunConfig& cfg, int phase) {
  return (fs::path(cfg.out_dir) / ("phase" + std::to_string(phase) + ".ckpt")).string();
}

ParamRegistry<float> load_model(const UnfoldModel& model, const RunConfig& cfg, const std::string& path) {
  if (!fs::exists(path)) throw FormatError("checkpoint not found: " + path);
  auto reg = model.init_params<float>(cfg.seed);
  load_checkpoint(path, reg);
  return reg;
}

int cmd_synth(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto menu = cfg.degradation_menu();
  const auto& m = cfg.model;
  const auto train = make_pairs<float>(cfg.train_pairs, m.channels, m.height, m.width, menu, cfg.seed);
  const auto test = make_pairs<float>(cfg.test_pairs, m.channels, m.height, m.width, menu, cfg.seed + 1);
  write_dataset((fs::path(cfg.data_dir) / "train").string(), train);
  write_dataset((fs::path(cfg.data_dir) / "test").string(), test);
  std::cout << "wrote " << train.size() << " training and " << test.size() << " held-out pairs to " << cfg.data_dir
            << "\n";
  return 0;
}

int cmd_train(const Common& c, int phase, const std::string& init) {
  const RunConfig cfg = resolve(c);
  UnfoldModel model(cfg.model);
  fs::create_directories(cfg.out_dir);
  ParamRegistry<float> reg = phase == 1 ? model.init_params<float>(cfg.seed)
                                        : load_model(model, cfg, init.empty() ? ckpt_path(cfg, 1) : init);
  const auto clean = clean_images(load_split(cfg, "train"));
  TrainHooks hooks;
  hooks.csv_path = (fs::path(cfg.out_dir) / ("phase" + std::to_string(phase) + "_loss.csv")).string();
  const std::size_t steps = phase == 1 ? cfg.phase1_steps : cfg.phase2_steps;
  hooks.on_step = [&](const LossReport& r) {
    if (r.step % std::max<std::size_t>(cfg.log_every, 1) == 0 || r.step + 1 == steps)
      std::cout << "phase " << phase << " step " << r.step << "/" << steps << " l_rec " << r.l_rec << " l_isda "
                << r.l_isda << " l_diff " << r.l_diff << " total " << r.total << " lr " << r.lr << std::endl;
  };
  train_phase(model, reg, cfg, phase, clean, hooks);
  save_checkpoint(ckpt_path(cfg, phase), reg, static_cast<std::uint32_t>(phase));
  std::ofstream(fs::path(cfg.out_dir) / "run.cfg") << serialize_config(cfg);
  std::cout << "saved " << ckpt_path(cfg, phase) << "\n";
  return 0;
}

int cmd_infer(const Common& c, const std::string& ckpt, const std::string& input, const std::string& output,
              const std::string& trace_dir, std::uint64_t seed) {
  const RunConfig cfg = resolve(c);
  UnfoldModel model(cfg.model);
  auto reg = load_model(model, cfg, ckpt.empty() ? ckpt_path(cfg, 2) : ckpt);
  const auto y = read_image<float>(input);
  const auto r = infer(model, reg, y, seed);
  write_image(output, r.restored);
  if (!r.note.empty()) std::cout << r.note << "\n";
  if (!trace_dir.empty()) {
    fs::create_directories(trace_dir);
    for (std::size_t k = 0; k < r.stages.size(); ++k) {
      const auto stem = (fs::path(trace_dir) / ("stage" + std::to_string(k + 1))).string();
      write_image(stem + "_x_hat.pgm", r.stages[k].x_hat);
      write_image(stem + "_x_tilde.pgm", r.stages[k].x_tilde);
      write_image(stem + "_x.pgm", r.stages[k].x);
    }
  }
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data, std::uint64_t seed) {
  const RunConfig cfg = resolve(c);
  UnfoldModel model(cfg.model);
  auto reg = load_model(model, cfg, ckpt.empty() ? ckpt_path(cfg, 2) : ckpt);
  const auto pairs = data.empty() ? load_split(cfg, "test") : read_dataset<float>(data);
  const auto s = evaluate(model, reg, pairs, seed);
  nlohmann::json j;
  j["images"] = s.images;
  j["psnr_input"] = s.psnr_input;
  j["ssim_input"] = s.ssim_input;
  j["psnr_output"] = s.psnr_output;
  j["ssim_output"] = s.ssim_output;
  j["stage_psnr"] = s.stage_psnr;
  j["per_image_psnr"] = s.per_image_psnr;
  j["per_image_ssim"] = s.per_image_ssim;
  std::cout << j.dump(2) << "\n";
  fs::create_directories(cfg.out_dir);
  std::ofstream(fs::path(cfg.out_dir) / "eval.json") << j.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(const std::vector<std::string>& flips, double tol) {
  for (auto& f : flips) {
    try {
      BackwardFaults::flip(parse_op_kind(f));
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
  }
  FdOptions opt;
  opt.tolerance = tol;
  bool ok = true;
  std::cout << "suite,max_rel_error,worst,result\n";
  for (auto& r : run_gradcheck(opt)) {
    std::cout << r.suite << ',' << r.max_rel_error << ',' << r.worst << ',' << (r.passed ? "pass" : "FAIL") << "\n";
    ok = ok && r.passed;
  }
  BackwardFaults::clear();
  return ok ? 0 : 1;
}

int cmd_ablate(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto train = load_split(cfg, "train");
  const auto test = load_split(cfg, "test");
  const auto table = run_ablation(cfg, clean_images(train), test);
  fs::create_directories(cfg.out_dir);
  std::ofstream(fs::path(cfg.out_dir) / "ablation.csv") << table.csv();
  std::cout << "input psnr " << table.psnr_input << " ssim " << table.ssim_input << "\n" << table.csv();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep-unfolding blind image restoration with a compact diffusion prior"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "write paired clean/degraded datasets");
  add_common(synth, common);

  int phase = 1;
  std::string init_ckpt;
  auto* train = app.add_subcommand("train", "run one training phase");
  add_common(train, common);
  train->add_option("--phase", phase, "1 (pretraining) or 2 (diffusion prior)")->required()->check(CLI::IsMember({1, 2}));
  train->add_option("--init", init_ckpt, "phase 2 starting checkpoint (default <out_dir>/phase1.ckpt)");

  std::string ckpt, input, output, trace_dir, data;
  std::uint64_t seed = 0;
  auto* inf = app.add_subcommand("infer", "restore one image");
  add_common(inf, common);
  inf->add_option("--checkpoint", ckpt, "default <out_dir>/phase2.ckpt");
  inf->add_option("-i,--input", input)->required();
  inf->add_option("-o,--output", output)->required();
  inf->add_option("--trace-dir", trace_dir, "write per-stage x_hat, x_tilde, x as PGM");
  inf->add_option("--seed", seed, "reverse-diffusion seed");

  auto* ev = app.add_subcommand("eval", "PSNR/SSIM on a paired dataset");
  add_common(ev, common);
  ev->add_option("--checkpoint", ckpt, "default <out_dir>/phase2.ckpt");
  ev->add_option("--data", data, "dataset directory (default <data_dir>/test)");
  ev->add_option("--seed", seed, "reverse-diffusion seed of the first image");

  std::vector<std::string> flips;
  double tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  gc->add_option("--flip", flips, "negate the backward rule of an op kind (mutation check)");
  gc->add_option("--tolerance", tol, "maximum relative error");

  auto* abl = app.add_subcommand("ablate", "train and evaluate every ablation variant");
  add_common(abl, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(common);
    if (*train) return cmd_train(common, phase, init_ckpt);
    if (*inf) return cmd_infer(common, ckpt, input, output, trace_dir, seed);
    if (*ev) return cmd_eval(common, ckpt, data, seed);
    if (*gc) return cmd_gradcheck(flips, tol);
    if (*abl) return cmd_ablate(common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
