#pragma once

namespace dsmoe::logging {

// Stderr verbosity, controlled by the DSMOE_LOG env var: quiet | info | debug.
// Unknown values fall back to info.
enum class Level { quiet = 0, info = 1, debug = 2 };

Level level();
void set_level(Level lv);
bool enabled(Level lv);

void info(const char* fmt, ...);
void debug(const char* fmt, ...);

}  // namespace dsmoe::logging
