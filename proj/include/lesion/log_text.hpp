#pragma once

#include <sstream>
#include <string>

namespace lesion {

// Logging entry points free of spdlog/fmt headers. libtorch bundles its own
// fmt, which cannot share a translation unit with the system one.
void log_info(const std::string& message);
void log_warn(const std::string& message);

/// Streams every argument into one string.
template <typename... Parts>
std::string cat(const Parts&... parts) {
  std::ostringstream out;
  (out << ... << parts);
  return out.str();
}

}  // namespace lesion
