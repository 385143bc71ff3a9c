#pragma once

#include <string>

namespace tsrm::log {

enum class Level { Error, Info, Debug };

/// Reads TSRM_LOG (error|info|debug); unset means info. Unknown values are
/// rejected with a config error.
Level level_from_env();
void set_level(Level level);

// All diagnostics go to stderr.
void error(const std::string& msg);
void warn(const std::string& msg);
void info(const std::string& msg);
void debug(const std::string& msg);

}  // namespace tsrm::log
