#include "hsi/log.hpp"

#include <iostream>
#include <mutex>

namespace hsi::log {

namespace {

std::mutex g_mutex;
Level g_min = Level::warn;

void default_sink(Level level, const std::string& message) {
  std::cerr << "[" << level_name(level) << "] " << message << '\n';
}

Sink& sink_ref() {
  static Sink sink = default_sink;
  return sink;
}

}  // namespace

const char* level_name(Level level) {
  switch (level) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "?";
}

Sink set_sink(Sink sink) {
  std::lock_guard lock(g_mutex);
  Sink old = std::move(sink_ref());
  sink_ref() = sink ? std::move(sink) : Sink(default_sink);
  return old;
}

void set_min_level(Level level) {
  std::lock_guard lock(g_mutex);
  g_min = level;
}

void write(Level level, const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (level < g_min) return;
  sink_ref()(level, message);
}

}  // namespace hsi::log
