#include "dsmoe/log.hpp"

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace dsmoe::logging {

namespace {

Level parse_env() {
    const char* v = std::getenv("DSMOE_LOG");
    if (v == nullptr) return Level::info;
    if (std::strcmp(v, "quiet") == 0) return Level::quiet;
    if (std::strcmp(v, "info") == 0) return Level::info;
    if (std::strcmp(v, "debug") == 0) return Level::debug;
    std::fprintf(stderr, "dsmoe: unknown DSMOE_LOG value '%s', using 'info'\n", v);
    return Level::info;
}

Level& current() {
    static Level lv = parse_env();
    return lv;
}

void vlog(const char* tag, const char* fmt, va_list ap) {
    std::fprintf(stderr, "[%s] ", tag);
    std::vfprintf(stderr, fmt, ap);
    std::fputc('\n', stderr);
}

}  // namespace

Level level() { return current(); }
void set_level(Level lv) { current() = lv; }
bool enabled(Level lv) { return static_cast<int>(current()) >= static_cast<int>(lv); }

void info(const char* fmt, ...) {
    if (!enabled(Level::info)) return;
    va_list ap;
    va_start(ap, fmt);
    vlog("info", fmt, ap);
    va_end(ap);
}

void debug(const char* fmt, ...) {
    if (!enabled(Level::debug)) return;
    va_list ap;
    va_start(ap, fmt);
    vlog("debug", fmt, ap);
    va_end(ap);
}

}  // namespace dsmoe::logging
