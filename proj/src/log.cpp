#include "enprobe/log.hpp"

#include <iostream>
#include <mutex>

namespace enprobe::log {

namespace {

std::mutex g_mutex;
bool g_quiet = false;

void stderr_sink(Level level, const std::string& message) {
    if (level == Level::Info && g_quiet) return;
    std::cerr << (level == Level::Warning ? "[warn] " : "[info] ") << message << '\n';
}

Sink& sink() {
    static Sink s = stderr_sink;
    return s;
}

} // namespace

void info(const std::string& message) {
    std::lock_guard lock(g_mutex);
    sink()(Level::Info, message);
}

void warn(const std::string& message) {
    std::lock_guard lock(g_mutex);
    sink()(Level::Warning, message);
}

Sink set_sink(Sink s) {
    std::lock_guard lock(g_mutex);
    Sink prev = sink();
    sink() = s ? std::move(s) : Sink(stderr_sink);
    return prev;
}

void set_quiet(bool quiet) {
    std::lock_guard lock(g_mutex);
    g_quiet = quiet;
}

} // namespace enprobe::log
