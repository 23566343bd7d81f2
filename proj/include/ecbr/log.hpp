#pragma once

// Minimal stderr logger gated by the ECBR_LOG environment variable
// (off | error | info | debug). Defaults to error.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <string>

namespace ecbr::log {

enum class Level : int { off = 0, error = 1, info = 2, debug = 3 };

inline Level level() {
  static Level lvl = [] {
    const char* env = std::getenv("ECBR_LOG");
    if (env == nullptr) return Level::error;
    if (std::strcmp(env, "off") == 0) return Level::off;
    if (std::strcmp(env, "info") == 0) return Level::info;
    if (std::strcmp(env, "debug") == 0) return Level::debug;
    return Level::error;
  }();
  return lvl;
}

inline void write(Level lvl, const char* tag, const std::string& msg) {
  if (static_cast<int>(lvl) > static_cast<int>(level())) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void error(const std::string& msg) { write(Level::error, "error", msg); }
inline void info(const std::string& msg) { write(Level::info, "info", msg); }
inline void debug(const std::string& msg) { write(Level::debug, "debug", msg); }

}  // namespace ecbr::log
