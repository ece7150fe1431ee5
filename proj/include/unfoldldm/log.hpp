#pragma once

#include <atomic>
#include <iostream>
#include <string>

namespace uldm {

enum class LogLevel { Quiet = 0, Warn = 1, Info = 2 };

inline std::atomic<int>& log_level_storage() {
  static std::atomic<int> level{static_cast<int>(LogLevel::Warn)};
  return level;
}

inline void set_log_level(LogLevel l) { log_level_storage() = static_cast<int>(l); }

inline void log_warn(const std::string& msg) {
  if (log_level_storage() >= static_cast<int>(LogLevel::Warn)) std::cerr << "[warn] " << msg << '\n';
}

inline void log_info(const std::string& msg) {
  if (log_level_storage() >= static_cast<int>(LogLevel::Info)) std::cerr << "[info] " << msg << '\n';
}

}  // namespace uldm
