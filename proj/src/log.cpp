#include "lesion/log.hpp"
#include "lesion/log_text.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

namespace lesion {

std::shared_ptr<spdlog::logger> logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto sink = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
    auto l = std::make_shared<spdlog::logger>("lesion", sink);
    l->set_pattern("[%l] %v");
    return l;
  }();
  return instance;
}

void log_info(const std::string& message) { logger()->info(message); }
void log_warn(const std::string& message) { logger()->warn(message); }

}  // namespace lesion
