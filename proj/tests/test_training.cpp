#include <gtest/gtest.h>

#include <numeric>

#include "unfoldldm/gradcheck.hpp"
#include "unfoldldm/training.hpp"

using namespace uldm;

namespace {

double loop_mean_abs(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / double(a.size());
}

double norm2(const Tensor<double>& t) {
  double s = 0;
  for (double v : t.values()) s += v * v;
  return s;
}

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

RunConfig tiny_run() {
  RunConfig cfg;
  cfg.model = detail::tiny_config();
  cfg.batch = 2;
  cfg.phase1_steps = 4;
  cfg.phase2_steps = 4;
  cfg.lr = 1e-3;
  cfg.degradations = {"blur:1.2@0.02", "illum:0.5:0.2@0.02"};
  return cfg;
}

std::vector<Tensor<double>> clean_set(const RunConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::vector<Tensor<double>> out;
  for (auto& p : make_pairs<double>(n, cfg.model.channels, cfg.model.height, cfg.model.width, cfg.degradation_menu(), seed))
    out.push_back(p.clean);
  return out;
}

}  // namespace

TEST(Losses, RecIsZeroOnIdenticalImages) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>({1, 1, 4, 4}, 0.3));
  EXPECT_EQ(loss_rec(x, x).value()[0], 0.0);
}

TEST(Losses, RecOfConstantOffset) {
  Graph<double> g;
  Tensor<double> a({1, 1, 4, 4}, 0.2), b = a;
  for (auto& v : b.values()) v += 0.1;
  EXPECT_NEAR(loss_rec(g.constant(b), g.constant(a)).value()[0], 0.1, 1e-15);
}

TEST(Losses, RecMatchesLoop) {
  Rng rng(1);
  const auto a = detail::random_tensor({2, 1, 5, 7}, rng), b = detail::random_tensor({2, 1, 5, 7}, rng);
  Graph<double> g;
  EXPECT_NEAR(loss_rec(g.constant(a), g.constant(b)).value()[0], loop_mean_abs(a, b), 1e-12);
}

TEST(Losses, DiffExamples) {
  Rng rng(2);
  const auto a = detail::random_tensor({3, 64}, rng), b = detail::random_tensor({3, 64}, rng);
  Tensor<double> off = a;
  for (auto& v : off.values()) v += 0.1;
  Graph<double> g;
  EXPECT_EQ(loss_diff(g.constant(a), g.constant(a)).value()[0], 0.0);
  EXPECT_NEAR(loss_diff(g.constant(off), g.constant(a)).value()[0], 0.1, 1e-12);
  EXPECT_NEAR(loss_diff(g.constant(a), g.constant(b)).value()[0], loop_mean_abs(a, b), 1e-12);
}

TEST(Losses, IsdaWeightPattern) {
  for (std::size_t K : {2u, 3u, 4u}) {
    EXPECT_EQ(isda_weight(1, K), 0.0);
    for (std::size_t k = 2; k <= K; ++k) EXPECT_EQ(isda_weight(k, K), 1.0 / double(1u << (K - k)));
  }
}

TEST(Losses, IsdaExamples) {
  Graph<double> g;
  auto zero = g.constant(Tensor<double>({1, 1, 2, 2}, 0.0)), one = g.constant(Tensor<double>({1, 1, 2, 2}, 1.0));
  using P = std::pair<DiffTensor<double>, DiffTensor<double>>;
  EXPECT_EQ(loss_isda(g, std::vector<P>{{one, one}, {one, one}, {one, one}}).value()[0], 0.0);
  EXPECT_DOUBLE_EQ(loss_isda(g, std::vector<P>{{zero, zero}, {one, zero}, {zero, zero}}).value()[0], 0.5);
  EXPECT_DOUBLE_EQ(loss_isda(g, std::vector<P>{{one, zero}, {one, zero}, {one, zero}}).value()[0], 1.5);
  EXPECT_EQ(loss_isda(g, std::vector<P>{{one, zero}}).value()[0], 0.0);
}

// Property: scaling stage k's discrepancy by s adds exactly (s - 1) * gap / 2^(K-k).
TEST(Losses, IsdaScalesLinearlyPerStage) {
  Rng rng(3);
  using P = std::pair<DiffTensor<double>, DiffTensor<double>>;
  for (std::size_t K : {2u, 3u, 4u})
    for (std::size_t k = 2; k <= K; ++k) {
      Graph<double> g;
      std::vector<Tensor<double>> a, b;
      for (std::size_t j = 0; j < K; ++j) {
        a.push_back(detail::random_tensor({1, 1, 3, 3}, rng));
        b.push_back(detail::random_tensor({1, 1, 3, 3}, rng));
      }
      std::vector<P> base, scaled;
      const double s = 2.5;
      for (std::size_t j = 0; j < K; ++j) {
        base.emplace_back(g.constant(a[j]), g.constant(b[j]));
        Tensor<double> as = a[j];
        if (j + 1 == k)
          for (std::size_t i = 0; i < as.size(); ++i) as[i] = b[j][i] + s * (a[j][i] - b[j][i]);
        scaled.emplace_back(g.constant(as), g.constant(b[j]));
      }
      const double gap = loop_mean_abs(a[k - 1], b[k - 1]);
      const double delta = loss_isda(g, scaled).value()[0] - loss_isda(g, base).value()[0];
      EXPECT_NEAR(delta, (s - 1) * gap / double(1u << (K - k)), 1e-12);
    }
}

TEST(Defaults, ReferenceHyperparameters) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.model.stages, 3u);
  EXPECT_EQ(cfg.model.timesteps, 3u);
  EXPECT_EQ(cfg.model.prior_dim, 64u);
  EXPECT_EQ(cfg.zeta1, 1.0);
  EXPECT_EQ(cfg.zeta2, 1.0);
  EXPECT_EQ(cfg.zeta3, 1.0);
  EXPECT_EQ(cfg.lr, 2e-4);
  EXPECT_EQ(cfg.lr_min, 1e-6);
  EXPECT_EQ(cfg.model.blocks, (std::array<std::size_t, 4>{2, 2, 2, 2}));
}

// Property: the reported total equals its weighted parts in both phases.
TEST(Training, TotalsDecompose) {
  RunConfig cfg = tiny_run();
  cfg.zeta1 = 0.7;
  cfg.zeta2 = 1.3;
  cfg.zeta3 = 0.4;
  const UnfoldModel model(cfg.model);
  auto reg = model.init_params<double>(cfg.seed);
  const auto clean = clean_set(cfg, 4, 1);
  for (int phase : {1, 2})
    for (auto& r : train_phase(model, reg, cfg, phase, clean)) {
      const double expect = r.l_rec + (phase == 1 ? 0.7 : 1.3) * r.l_isda + (phase == 2 ? 0.4 * r.l_diff : 0.0);
      EXPECT_NEAR(r.total, expect, 1e-6 * std::max(1.0, std::abs(expect)));
      EXPECT_EQ(r.stage_gaps.size(), cfg.model.stages);
      if (phase == 2) {
        EXPECT_GT(r.l_diff, 0.0);
        EXPECT_TRUE(std::isfinite(r.rollout_l_diff));
      }
    }
}

TEST(Training, IsdaSwitchedOffWithEitherBranchMissing) {
  for (const char* sw : {"no_isda", "no_x_hat", "no_x_tilde"}) {
    RunConfig cfg = tiny_run();
    cfg.phase1_steps = 2;
    set_config_value(cfg, sw, "true");
    const UnfoldModel model(cfg.model);
    auto reg = model.init_params<double>(1);
    for (auto& r : train_phase(model, reg, cfg, 1, clean_set(cfg, 2, 2))) {
      EXPECT_EQ(r.zeta_isda, 0.0) << sw;
      EXPECT_DOUBLE_EQ(r.total, r.l_rec) << sw;
    }
  }
}

TEST(Training, PhaseTwoLeavesCleanEncoderUntouched) {
  RunConfig cfg = tiny_run();
  const UnfoldModel model(cfg.model);
  auto reg = model.init_params<double>(cfg.seed);
  const auto clean = clean_set(cfg, 4, 3);
  train_phase(model, reg, cfg, 1, clean);
  std::map<std::string, Tensor<double>> before, others;
  for (auto& p : reg.paths()) (starts_with(p, UnfoldModel::kPiPrefix) ? before : others)[p] = reg.get(p);
  ASSERT_FALSE(before.empty());
  train_phase(model, reg, cfg, 2, clean);
  for (auto& [p, v] : before) {
    EXPECT_EQ(reg.get(p), v) << p;
    EXPECT_TRUE(reg.is_frozen(p));
  }
  std::size_t changed = 0;
  for (auto& [p, v] : others) changed += !(reg.get(p) == v);
  EXPECT_GT(changed, 0u);
}

TEST(Training, PhaseTwoGradientsOfCleanEncoderAreZero) {
  const UnfoldModel model(detail::tiny_config());
  auto reg = model.init_params<double>(5);
  Rng rng(5);
  detail::jitter(reg, rng);
  reg.freeze_prefix(UnfoldModel::kPiPrefix);
  const auto y = detail::random_tensor({2, 1, 8, 8}, rng, 0, 1), gt = detail::random_tensor({2, 1, 8, 8}, rng, 0, 1);
  Graph<double> g(reg);
  ForwardOptions<double> fo;
  fo.mode = PriorMode::Generated;
  fo.x_gt = &gt;
  fo.train_denoiser = true;
  fo.rng = &rng;
  auto res = model.forward(g, y, fo);
  LossReport rep;
  const auto grads = g.backward(total_loss(g, model, res, gt, 2, RunConfig{}, rep));
  for (auto& [p, t] : grads)
    if (starts_with(p, UnfoldModel::kPiPrefix)) {
      EXPECT_EQ(norm2(t), 0.0) << p;
    }
  for (auto& [p, t] : grads)
    if (starts_with(p, "pi_prime.") || starts_with(p, "denoiser.")) {
      EXPECT_GT(norm2(t), 0.0) << p;
    }
}

// Property: every trainable parameter of the pretraining graph receives a nonzero
// gradient on a random batch. The conditional encoder and the noise predictor are
// only part of the second phase and are checked in the test above.
TEST(Training, PhaseOneReachesEveryParameter) {
  const UnfoldModel model(detail::tiny_config());
  auto reg = model.init_params<double>(6);
  Rng rng(6);
  detail::jitter(reg, rng);
  const auto y = detail::random_tensor({2, 1, 8, 8}, rng, 0, 1), gt = detail::random_tensor({2, 1, 8, 8}, rng, 0, 1);
  Graph<double> g(reg);
  ForwardOptions<double> fo;
  fo.x_gt = &gt;
  auto res = model.forward(g, y, fo);
  LossReport rep;
  const auto grads = g.backward(total_loss(g, model, res, gt, 1, RunConfig{}, rep));
  for (auto& [p, t] : grads) {
    if (starts_with(p, "pi_prime.") || starts_with(p, "denoiser.")) continue;
    EXPECT_GT(norm2(t), 0.0) << p;
  }
}

TEST(Training, NonFiniteLossAborts) {
  RunConfig cfg = tiny_run();
  const UnfoldModel model(cfg.model);
  auto reg = model.init_params<double>(1);
  reg.get(model.mgda.beta_path)[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train_phase(model, reg, cfg, 1, clean_set(cfg, 2, 4)), NumericError);
}

TEST(Training, RunsAreReproducible) {
  RunConfig cfg = tiny_run();
  const UnfoldModel model(cfg.model);
  const auto clean = clean_set(cfg, 3, 5);
  auto a = model.init_params<double>(cfg.seed), b = model.init_params<double>(cfg.seed);
  const auto ra = train_phase(model, a, cfg, 1, clean), rb = train_phase(model, b, cfg, 1, clean);
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(ra[i].total, rb[i].total);
  for (auto& p : a.paths()) EXPECT_EQ(a.get(p), b.get(p)) << p;
}

TEST(Training, CsvStreamHasSpecifiedColumns) {
  RunConfig cfg = tiny_run();
  cfg.log_every = 1;
  const UnfoldModel model(cfg.model);
  auto reg = model.init_params<double>(1);
  const auto path = (std::filesystem::temp_directory_path() / "uldm_loss.csv").string();
  std::filesystem::remove(path);
  TrainHooks hooks;
  hooks.csv_path = path;
  train_phase(model, reg, cfg, 1, clean_set(cfg, 2, 6), hooks);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("step,l_rec,l_isda,l_diff,total,lr", 0), 0u);
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, cfg.phase1_steps);
  std::filesystem::remove(path);
}

TEST(Infer, DeterministicWithOneTraceEntryPerStage) {
  const UnfoldModel model(detail::tiny_config());
  auto reg = model.init_params<double>(2);
  Rng rng(7);
  detail::jitter(reg, rng, 0.05);
  const auto y = detail::random_tensor({1, 8, 8}, rng, 0, 1);
  const auto a = infer(model, reg, y, 3), b = infer(model, reg, y, 3);
  EXPECT_EQ(a.restored, b.restored);
  ASSERT_EQ(a.stages.size(), model.cfg.stages);
  EXPECT_EQ(a.restored, a.stages.back().x);
  for (auto& s : a.stages) {
    EXPECT_NEAR(s.w_norms[0], 1.0, 1e-9);
    EXPECT_NEAR(s.m_norms[0], 1.0, 1e-9);
  }
  EXPECT_FALSE(a.padded);
}

TEST(Infer, PadsSmallerInputsAndRejectsLarger) {
  const UnfoldModel model(detail::tiny_config());
  auto reg = model.init_params<double>(2);
  Rng rng(8);
  const auto y = detail::random_tensor({1, 5, 7}, rng, 0, 1);
  const auto r = infer(model, reg, y, 1);
  EXPECT_TRUE(r.padded);
  EXPECT_FALSE(r.note.empty());
  EXPECT_EQ(r.restored.shape(), y.shape());
  EXPECT_THROW(infer(model, reg, Tensor<double>({1, 16, 8}), 1), ShapeError);
  EXPECT_THROW(infer(model, reg, Tensor<double>({2, 8, 8}), 1), ShapeError);
}

TEST(Infer, ZeroStepsAndZeroOutputAreIdentity) {
  ModelConfig cfg;
  cfg.step_init = 0.0;
  const UnfoldModel model(cfg);
  auto reg = model.init_params<float>(3);
  Rng rng(9);
  const auto y = detail::random_tensor({1, 32, 32}, rng, 0, 1).cast<float>();
  EXPECT_EQ(infer(model, reg, y, 4).restored, y);
}

// Overfitting one image: pretraining then the diffusion prior.
class OverfitOneImage : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new RunConfig();
    cfg_->lr = 1e-3;
    cfg_->batch = 1;
    cfg_->phase1_steps = 500;
    cfg_->phase2_steps = 500;
    cfg_->degradations = {"blur:1.5@0"};
    model_ = new UnfoldModel(cfg_->model);
    reg_ = new ParamRegistry<float>(model_->init_params<float>(cfg_->seed));
    Rng rng(3);
    clean_ = new std::vector<Tensor<float>>{procedural_image<float>(Texture::Shapes, 1, 32, 32, rng)};
    p1_ = new std::vector<LossReport>(train_phase(*model_, *reg_, *cfg_, 1, *clean_));
    p2_ = new std::vector<LossReport>(train_phase(*model_, *reg_, *cfg_, 2, *clean_));
  }
  static void TearDownTestSuite() {
    delete p2_;
    delete p1_;
    delete clean_;
    delete reg_;
    delete model_;
    delete cfg_;
  }
  static double mean(const std::vector<LossReport>& r, std::size_t from, std::size_t to, double LossReport::*f) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += r[i].*f;
    return s / double(to - from);
  }

  static inline RunConfig* cfg_ = nullptr;
  static inline UnfoldModel* model_ = nullptr;
  static inline ParamRegistry<float>* reg_ = nullptr;
  static inline std::vector<Tensor<float>>* clean_ = nullptr;
  static inline std::vector<LossReport>*p1_ = nullptr, *p2_ = nullptr;
};

TEST_F(OverfitOneImage, ReconstructionLossDropsTenfold) {
  const double early = (*p1_)[10].l_rec, late = p1_->back().l_rec;
  EXPECT_GE(early / late, 10.0) << "step 10: " << early << " final: " << late;
}

TEST_F(OverfitOneImage, RolloutConsistencyDropsFivefold) {
  const double early = mean(*p2_, 0, 10, &LossReport::rollout_l_diff);
  const double late = mean(*p2_, p2_->size() - 10, p2_->size(), &LossReport::rollout_l_diff);
  EXPECT_GE(early / late, 5.0) << "first 10: " << early << " last 10: " << late;
}

TEST_F(OverfitOneImage, RestoresItsTrainingImage) {
  auto d = cfg_->degradation_menu()[0];
  const auto y = synthesize((*clean_)[0], d);
  const auto r = infer(*model_, *reg_, y, 0);
  EXPECT_GT(psnr(r.restored, (*clean_)[0]), psnr(y, (*clean_)[0]));
}
