#pragma once

#include <iostream>
#include <sstream>
#include <string_view>

namespace komet::log {

enum class Level { kError = 0, kInfo = 1, kDebug = 2 };

// Reads KOMET_LOG once (error|info|debug); unknown values fall back to info.
Level threshold();
void set_threshold(Level level);

namespace detail {
void emit(Level level, std::string_view message);
}

template <typename... Args>
void write(Level level, const Args&... args) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  std::ostringstream out;
  (out << ... << args);
  detail::emit(level, out.str());
}

template <typename... Args>
void error(const Args&... args) { write(Level::kError, args...); }
template <typename... Args>
void info(const Args&... args) { write(Level::kInfo, args...); }
template <typename... Args>
void debug(const Args&... args) { write(Level::kDebug, args...); }

}  // namespace komet::log
