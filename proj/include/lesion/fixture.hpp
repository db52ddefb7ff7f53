#pragma once

#include <cstdint>
#include <filesystem>

namespace lesion {

struct FixtureSpec {
  int images = 32;
  int height = 96;
  int width = 128;
  std::uint64_t seed = 7;
};

/// Writes a synthetic ISIC-2018 style set (images, ground-truth masks,
/// metadata) and a HAM10000 style set (images, `image_id,dx` metadata) under
/// `dir`, plus `pipeline.json`, a config sized for a quick CPU run whose
/// outputs go to `dir/run`. Returns the config path.
std::filesystem::path write_fixture(const std::filesystem::path& dir, const FixtureSpec& spec = {});

}  // namespace lesion
