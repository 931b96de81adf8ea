#pragma once

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <memory>

namespace ordgaze {

// Level defaults to info; ORDGAZE_LOG_LEVEL (trace..off) overrides it.
inline std::shared_ptr<spdlog::logger> logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto existing = spdlog::get("ordgaze");
    if (existing) return existing;
    auto l = spdlog::stderr_color_mt("ordgaze");
    l->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    l->set_level(spdlog::level::info);
    if (const char* env = std::getenv("ORDGAZE_LOG_LEVEL"))
      l->set_level(spdlog::level::from_str(env));
    return l;
  }();
  return instance;
}

}  // namespace ordgaze
