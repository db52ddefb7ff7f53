#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace lesion {

/// Writes to a sibling temp file and renames it over `path`, so readers see
/// either the old or the new content. Creates parent directories.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace lesion
