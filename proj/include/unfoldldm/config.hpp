#pragma once

// Run configuration as flat "key = value" text. '#' starts a comment, lists are
// comma separated. Unknown keys and malformed values are rejected.

#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "degradation.hpp"
#include "model_config.hpp"

namespace uldm {

/// Invalid configuration; CLI verbs map this to exit status 2.
class ConfigError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct RunConfig {
  ModelConfig model;
  double zeta1 = 1.0;  // ISDA weight, phase I
  double zeta2 = 1.0;  // ISDA weight, phase II
  double zeta3 = 1.0;  // diffusion weight, phase II
  double lr = 2e-4;
  double lr_min = 1e-6;
  std::size_t phase1_steps = 1500;
  std::size_t phase2_steps = 1000;
  std::size_t batch = 2;
  std::size_t log_every = 50;
  std::uint64_t seed = 7;
  std::vector<std::string> degradations{"blur:1.5@0.05"};
  std::size_t train_pairs = 200;
  std::size_t test_pairs = 50;
  std::string data_dir = "data";
  std::string out_dir = "runs";

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  std::vector<SyntheticDegradation> degradation_menu() const {
    std::vector<SyntheticDegradation> out;
    for (auto& s : degradations) out.push_back(parse_degradation(s));
    return out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, ',');) {
    p = trim(p);
    if (!p.empty()) out.push_back(p);
  }
  return out;
}

inline std::string fmt_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": integer out of range: " + v);
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class U>
Field count_field(std::string key, U RunConfig::*m) {
  return {key, [m](const RunConfig& c) { return std::to_string(c.*m); },
          [m, key](RunConfig& c, const std::string& v) { c.*m = static_cast<U>(parse_count(key, v)); }};
}
template <class U>
Field model_count(std::string key, U ModelConfig::*m) {
  return {key, [m](const RunConfig& c) { return std::to_string(c.model.*m); },
          [m, key](RunConfig& c, const std::string& v) { c.model.*m = static_cast<U>(parse_count(key, v)); }};
}
inline Field real_field(std::string key, double RunConfig::*m) {
  return {key, [m](const RunConfig& c) { return fmt_real(c.*m); },
          [m, key](RunConfig& c, const std::string& v) { c.*m = parse_real(key, v); }};
}
inline Field text_field(std::string key, std::string RunConfig::*m) {
  return {key, [m](const RunConfig& c) { return c.*m; }, [m](RunConfig& c, const std::string& v) { c.*m = v; }};
}
inline Field switch_field(std::string key, bool Ablation::*m) {
  return {key, [m](const RunConfig& c) { return std::string(c.model.ablation.*m ? "true" : "false"); },
          [m, key](RunConfig& c, const std::string& v) { c.model.ablation.*m = parse_bool(key, v); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v{
        model_count("channels", &ModelConfig::channels),
        model_count("height", &ModelConfig::height),
        model_count("width", &ModelConfig::width),
        model_count("stages", &ModelConfig::stages),
        model_count("timesteps", &ModelConfig::timesteps),
        model_count("prior_dim", &ModelConfig::prior_dim),
        Field{"betas",
              [](const RunConfig& c) {
                std::string s;
                for (std::size_t i = 0; i < c.model.betas.size(); ++i) s += (i ? ", " : "") + fmt_real(c.model.betas[i]);
                return s;
              },
              [](RunConfig& c, const std::string& v) {
                c.model.betas.clear();
                for (auto& p : split_list(v)) c.model.betas.push_back(parse_real("betas", p));
              }},
        Field{"blocks",
              [](const RunConfig& c) {
                std::string s;
                for (std::size_t i = 0; i < 4; ++i) s += (i ? ", " : "") + std::to_string(c.model.blocks[i]);
                return s;
              },
              [](RunConfig& c, const std::string& v) {
                const auto parts = split_list(v);
                if (parts.size() != 4) throw ConfigError("blocks: expected four counts, got '" + v + "'");
                for (std::size_t i = 0; i < 4; ++i) c.model.blocks[i] = parse_count("blocks", parts[i]);
              }},
        model_count("base_width", &ModelConfig::base_width),
        model_count("mixer_hidden", &ModelConfig::mixer_hidden),
        model_count("pi_width", &ModelConfig::pi_width),
        model_count("denoiser_hidden", &ModelConfig::denoiser_hidden),
        model_count("time_embed", &ModelConfig::time_embed),
        Field{"step_init", [](const RunConfig& c) { return fmt_real(c.model.step_init); },
              [](RunConfig& c, const std::string& v) { c.model.step_init = parse_real("step_init", v); }},
        switch_field("no_x_hat", &Ablation::no_x_hat),
        switch_field("no_x_tilde", &Ablation::no_x_tilde),
        switch_field("no_seqmix", &Ablation::no_seqmix),
        switch_field("no_isda", &Ablation::no_isda),
        switch_field("no_dra", &Ablation::no_dra),
        switch_field("no_pdr", &Ablation::no_pdr),
        switch_field("no_drldm", &Ablation::no_drldm),
        real_field("zeta1", &RunConfig::zeta1),
        real_field("zeta2", &RunConfig::zeta2),
        real_field("zeta3", &RunConfig::zeta3),
        real_field("lr", &RunConfig::lr),
        real_field("lr_min", &RunConfig::lr_min),
        count_field("phase1_steps", &RunConfig::phase1_steps),
        count_field("phase2_steps", &RunConfig::phase2_steps),
        count_field("batch", &RunConfig::batch),
        count_field("log_every", &RunConfig::log_every),
        count_field("seed", &RunConfig::seed),
        Field{"degradations",
              [](const RunConfig& c) {
                std::string s;
                for (std::size_t i = 0; i < c.degradations.size(); ++i) s += (i ? ", " : "") + c.degradations[i];
                return s;
              },
              [](RunConfig& c, const std::string& v) { c.degradations = split_list(v); }},
        count_field("train_pairs", &RunConfig::train_pairs),
        count_field("test_pairs", &RunConfig::test_pairs),
        text_field("data_dir", &RunConfig::data_dir),
        text_field("out_dir", &RunConfig::out_dir),
    };
    return v;
  }();
  return f;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (auto& f : detail::fields()) k.push_back(f.key);
  return k;
}

/// Applies one key/value pair (used for files and command-line overrides).
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (auto& f : detail::fields())
    if (f.key == key) return f.set(cfg, detail::trim(value));
  throw ConfigError("unknown config key: " + key);
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (auto& f : detail::fields())
    if (f.key == key) return f.get(cfg);
  throw ConfigError("unknown config key: " + key);
}

/// Cross-field checks; throws ConfigError naming the first violation.
inline void validate(const RunConfig& c) {
  const auto& m = c.model;
  if (m.channels != 1 && m.channels != 3) throw ConfigError("channels must be 1 or 3");
  if (m.height == 0 || m.width == 0 || m.height % 8 || m.width % 8)
    throw ConfigError("height and width must be positive multiples of 8");
  if (m.stages < 1) throw ConfigError("stages must be at least 1");
  if (m.timesteps < 1 || m.betas.size() != m.timesteps)
    throw ConfigError("betas must list exactly 'timesteps' values");
  for (double b : m.betas)
    if (!(b > 0 && b < 1)) throw ConfigError("betas must lie in (0, 1)");
  if (m.prior_dim == 0 || m.base_width == 0 || m.mixer_hidden == 0 || m.pi_width == 0 || m.denoiser_hidden == 0)
    throw ConfigError("layer widths must be positive");
  if (m.time_embed == 0 || m.time_embed % 2) throw ConfigError("time_embed must be a positive even number");
  if (m.ablation.no_x_hat && m.ablation.no_x_tilde) throw ConfigError("no_x_hat and no_x_tilde cannot both be set");
  if (!(c.lr > 0) || !(c.lr_min >= 0) || c.lr_min > c.lr) throw ConfigError("need lr > 0 and 0 <= lr_min <= lr");
  if (c.zeta1 < 0 || c.zeta2 < 0 || c.zeta3 < 0) throw ConfigError("loss weights must be non-negative");
  if (c.batch == 0) throw ConfigError("batch must be positive");
  if (c.degradations.empty()) throw ConfigError("degradation menu is empty");
  for (auto& d : c.degradations) {
    try {
      parse_degradation(d);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("degradations: ") + e.what());
    }
  }
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "config") {
  RunConfig cfg;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(no) + ": expected key = value");
    try {
      set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  validate(cfg);
  return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config(in, path);
}

/// Every key, in schema order.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (auto& f : detail::fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace uldm
