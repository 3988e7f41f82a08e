// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace mmt {

// Shared stderr logger. Verbosity comes from MMT_LOG_LEVEL
// (trace, debug, info, warn, error, off); default is warn.
inline spdlog::logger& log() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto l = spdlog::stderr_color_mt("mmt");
    const char* env = std::getenv("MMT_LOG_LEVEL");
    l->set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
    l->set_pattern("[%l] %v");
    return l;
  }();
  return *logger;
}

}  // namespace mmt
