#pragma once

#include <memory>

#include <spdlog/spdlog.h>

namespace lesion {

/// Shared project logger ("lesion"). Warnings that the API promises
/// ("warn, don't fail") go through here so tests can attach a sink.
std::shared_ptr<spdlog::logger> logger();

}  // namespace lesion
