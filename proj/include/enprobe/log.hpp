#pragma once

#include <functional>
#include <string>

namespace enprobe::log {

enum class Level { Info, Warning };

void info(const std::string& message);
void warn(const std::string& message);

// Replaces the sink (default: stderr). Returns the previous one.
using Sink = std::function<void(Level, const std::string&)>;
Sink set_sink(Sink sink);

// Silences info output for the process (warnings still go through).
void set_quiet(bool quiet);

} // namespace enprobe::log
