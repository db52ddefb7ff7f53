#pragma once

#include <cstdint>

#include <opencv2/core.hpp>

#include "lesion/dataset.hpp"
#include "lesion/mask.hpp"

namespace lesion {

struct SyntheticLesion {
  cv::Mat3b image;
  BinaryMask mask;
};

/// Skin-toned noisy background with one elliptical lesion whose colour
/// depends on the class. Deterministic in (size, class, seed).
SyntheticLesion synthetic_lesion(int height, int width, LesionClass cls, std::uint64_t seed);

}  // namespace lesion
