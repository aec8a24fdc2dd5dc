#include "komet/errors.hpp"

#include <atomic>
#include <cstdlib>
#include <mutex>
#include <string>

#include "komet/log.hpp"

namespace komet::log {

namespace {

Level parse_env() {
  const char* raw = std::getenv("KOMET_LOG");
  if (raw == nullptr) return Level::kInfo;
  const std::string value(raw);
  if (value == "error") return Level::kError;
  if (value == "debug") return Level::kDebug;
  return Level::kInfo;
}

std::atomic<int>& level_slot() {
  static std::atomic<int> slot{static_cast<int>(parse_env())};
  return slot;
}

}  // namespace

Level threshold() { return static_cast<Level>(level_slot().load()); }

void set_threshold(Level level) { level_slot().store(static_cast<int>(level)); }

namespace detail {

void emit(Level level, std::string_view message) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  const char* tag = level == Level::kError ? "error" : level == Level::kInfo ? "info" : "debug";
  std::cerr << "[komet " << tag << "] " << message << '\n';
}

}  // namespace detail
}  // namespace komet::log
