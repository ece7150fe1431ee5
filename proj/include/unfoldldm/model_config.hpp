#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace uldm {

/// Component switches for ablation runs. All off is the full model.
struct Ablation {
  bool no_x_hat = false;    // drop the holistic gradient branch
  bool no_x_tilde = false;  // drop the decomposed gradient branch
  bool no_seqmix = false;   // learned mixers replaced by identity maps
  bool no_isda = false;     // intra-stage consistency loss disabled
  bool no_dra = false;      // attention blocks skipped
  bool no_pdr = false;      // prior-guided blocks skipped
  bool no_drldm = false;    // conditional cue used directly as the prior

  bool any() const {
    return no_x_hat || no_x_tilde || no_seqmix || no_isda || no_dra || no_pdr || no_drldm;
  }
  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct ModelConfig {
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t stages = 3;       // K
  std::size_t timesteps = 3;    // T
  std::size_t prior_dim = 64;   // C_p
  std::vector<double> betas{0.30, 0.60, 0.90};
  std::array<std::size_t, 4> blocks{2, 2, 2, 2};
  std::size_t base_width = 16;
  std::size_t mixer_hidden = 16;
  std::size_t pi_width = 16;
  std::size_t denoiser_hidden = 128;
  std::size_t time_embed = 16;
  double step_init = 0.5;  // initial beta_k and gamma_k
  Ablation ablation;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace uldm
