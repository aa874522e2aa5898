#pragma once

#include <functional>
#include <string>

namespace hsi::log {

enum class Level { debug, info, warn, error };

using Sink = std::function<void(Level, const std::string&)>;

/// Replaces the process-wide sink; returns the previous one. The default sink
/// writes warnings and errors to stderr.
Sink set_sink(Sink sink);
void set_min_level(Level level);

void write(Level level, const std::string& message);
inline void debug(const std::string& m) { write(Level::debug, m); }
inline void info(const std::string& m) { write(Level::info, m); }
inline void warn(const std::string& m) { write(Level::warn, m); }
inline void error(const std::string& m) { write(Level::error, m); }

const char* level_name(Level level);

}  // namespace hsi::log
