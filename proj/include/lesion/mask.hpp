#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "lesion/dataset.hpp"

namespace lesion {

/// Foreground/background mask, one byte per pixel holding 0 or 1.
struct BinaryMask {
  cv::Mat1b pixels;

  int width() const { return pixels.cols; }
  int height() const { return pixels.rows; }
  std::size_t foreground() const { return static_cast<std::size_t>(cv::countNonZero(pixels)); }
  std::size_t area() const { return pixels.total(); }
  /// cv::Mat copies share pixels; use this for an independent mask.
  BinaryMask clone() const { return BinaryMask{pixels.clone()}; }
};

/// Writes {0,255} single-channel PNG.
void save_mask_png(const BinaryMask& mask, const fs::path& path);
/// Reads any single- or multi-channel mask image; nonzero (>127) is foreground.
BinaryMask load_mask_png(const fs::path& path);

/// Inclusive pixel bounds.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min + 1; }
  int height() const { return y_max - y_min + 1; }
  cv::Rect rect() const { return {x_min, y_min, width(), height()}; }
  bool operator==(const BBox&) const = default;
};

struct RegionStats {
  int label = 0;
  std::size_t area = 0;
  BBox bbox;
  cv::Point2d centroid;
};

enum class Connectivity { four = 4, eight = 8 };

enum class QcReason { ok, multi_region, empty_mask, area_too_small, area_too_large };
std::string_view to_string(QcReason r);

struct QcPolicy {
  double min_area_fraction = 0.005;
  double max_area_fraction = 0.95;
  double small_component_ignore_fraction = 0.002;
  Connectivity connectivity = Connectivity::eight;
};

struct QCVerdict {
  QcStatus status = QcStatus::rejected;
  QcReason reason = QcReason::empty_mask;
  /// Components left after noise removal.
  std::size_t regions = 0;
  /// Area fraction of the largest surviving component (0 if none).
  double area_fraction = 0.0;

  bool accepted() const { return status == QcStatus::accepted; }
};

/// pixel > threshold -> 1. The comparison is strict.
BinaryMask binarize(const cv::Mat1f& prob_map, float threshold = 0.5f);

/// Maximal connected foreground regions, labelled 1.. in raster-scan order of
/// each region's first pixel.
std::vector<RegionStats> connected_components(const BinaryMask& mask,
                                              Connectivity connectivity = Connectivity::eight);

/// Single-region test: drop components smaller than the noise fraction, then
/// accept iff exactly one survives and its area fraction lies within bounds.
QCVerdict qc_mask(const BinaryMask& mask, const QcPolicy& policy = {});

/// Dilation with a (2r+1)x(2r+1) square, applied `iterations` times.
BinaryMask dilate(const BinaryMask& mask, int radius, int iterations);

std::optional<BBox> foreground_bbox(const BinaryMask& mask);

struct Crop {
  cv::Mat3b pixels;
  BBox bbox;
};

/// Zeroes background, trims to the mask's bounding box and resizes
/// (bilinear) to out_size x out_size. Throws on an empty mask or a size
/// mismatch.
Crop crop_and_resize(const cv::Mat3b& image, const BinaryMask& mask, int out_size = 224);

struct NormalizedImage {
  cv::Mat pixels;  ///< CV_32F, same channel count as the input
  double source_min = 0.0;
  double source_max = 0.0;
  bool constant = false;
};

/// Per-image affine map of all channels jointly onto [-1, 1]:
/// I_N = (I - min) * 2 / (max - min) - 1. A constant image maps to zeros and
/// logs a warning.
NormalizedImage normalize_range(const cv::Mat& image);

struct DilationParams {
  int radius = 2;
  int iterations = 2;
};

struct PreprocessedImage {
  cv::Mat3f pixels;  ///< out_size x out_size, values in [-1, 1]
  std::string image_id;
  std::string mask_digest;
  BBox crop_bbox;
};

/// Dilate -> crop/resize. The returned crop is what gets cached on disk.
Crop preprocess_crop(const cv::Mat3b& image, const BinaryMask& qc_mask_accepted,
                     const DilationParams& dilation, int out_size = 224);

/// Crop -> normalized classifier input.
PreprocessedImage finalize_crop(const Crop& crop, std::string image_id, std::string mask_digest);

/// SHA-256 over the mask's dimensions and bytes.
std::string mask_digest(const BinaryMask& mask);

struct MaskAgreement {
  double pixel_accuracy = 0.0;
  double dice = 0.0;
  double iou = 0.0;
};

/// Agreement of a predicted mask with ground truth. Dice and IoU are 1 when
/// both masks are empty.
MaskAgreement compare_masks(const BinaryMask& predicted, const BinaryMask& truth);

}  // namespace lesion
