#include "tsrm/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>

#include "tsrm/error.hpp"

namespace tsrm::log {
namespace {

spdlog::logger& logger() {
  static auto instance = [] {
    auto l = spdlog::stderr_logger_st("tsrm");
    l->set_pattern("[%H:%M:%S.%e] [%l] %v");
    l->set_level(spdlog::level::info);
    return l;
  }();
  return *instance;
}

}  // namespace

Level level_from_env() {
  const char* v = std::getenv("TSRM_LOG");
  if (!v || !*v) return Level::Info;
  const std::string s(v);
  if (s == "error") return Level::Error;
  if (s == "info") return Level::Info;
  if (s == "debug") return Level::Debug;
  fail(ErrorKind::Config,
       "TSRM_LOG must be one of error|info|debug, got '" + s + "'");
}

void set_level(Level level) {
  switch (level) {
    case Level::Error: logger().set_level(spdlog::level::err); break;
    case Level::Info: logger().set_level(spdlog::level::info); break;
    case Level::Debug: logger().set_level(spdlog::level::debug); break;
  }
}

void error(const std::string& msg) { logger().error(msg); }
void warn(const std::string& msg) { logger().warn(msg); }
void info(const std::string& msg) { logger().info(msg); }
void debug(const std::string& msg) { logger().debug(msg); }

}  // namespace tsrm::log
