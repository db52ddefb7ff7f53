#include "lesion/mask.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lesion/digest.hpp"
#include "lesion/log.hpp"

namespace lesion {

std::string_view to_string(QcReason r) {
  switch (r) {
    case QcReason::ok: return "ok";
    case QcReason::multi_region: return "multi_region";
    case QcReason::empty_mask: return "empty_mask";
    case QcReason::area_too_small: return "area_too_small";
    case QcReason::area_too_large: return "area_too_large";
  }
  return "?";
}

void save_mask_png(const BinaryMask& mask, const fs::path& path) {
  cv::Mat1b out = mask.pixels * 255;
  if (!cv::imwrite(path.string(), out)) throw std::runtime_error("cannot write " + path.string());
}

BinaryMask load_mask_png(const fs::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw std::runtime_error("cannot read mask " + path.string());
  BinaryMask m;
  cv::threshold(img, m.pixels, 127, 1, cv::THRESH_BINARY);
  return m;
}

BinaryMask binarize(const cv::Mat1f& prob_map, float threshold) {
  BinaryMask m;
  m.pixels = cv::Mat1b(prob_map.size(), 0);
  for (int y = 0; y < prob_map.rows; ++y) {
    const float* src = prob_map[y];
    uchar* dst = m.pixels[y];
    for (int x = 0; x < prob_map.cols; ++x) dst[x] = src[x] > threshold ? 1 : 0;
  }
  return m;
}

namespace {

struct DisjointSet {
  std::vector<int> parent;

  int make() {
    parent.push_back(static_cast<int>(parent.size()));
    return parent.back();
  }
  int find(int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    // Keep the older label as root so raster order survives.
    if (a < b)
      parent[b] = a;
    else
      parent[a] = b;
  }
};

}  // namespace

std::vector<RegionStats> connected_components(const BinaryMask& mask, Connectivity connectivity) {
  const int h = mask.height();
  const int w = mask.width();
  cv::Mat1i provisional(h, w, -1);
  DisjointSet sets;
  const bool eight = connectivity == Connectivity::eight;

  // First pass: provisional labels from already-visited neighbours.
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.pixels(y, x)) continue;
      int label = -1;
      auto visit = [&](int ny, int nx) {
        if (ny < 0 || nx < 0 || nx >= w) return;
        int other = provisional(ny, nx);
        if (other < 0) return;
        if (label < 0)
          label = other;
        else
          sets.unite(label, other);
      };
      visit(y, x - 1);
      visit(y - 1, x);
      if (eight) {
        visit(y - 1, x - 1);
        visit(y - 1, x + 1);
      }
      provisional(y, x) = label < 0 ? sets.make() : label;
    }
  }

  // Second pass: resolve roots, renumber in first-seen order, accumulate.
  std::vector<int> final_label(sets.parent.size(), 0);
  std::vector<RegionStats> regions;
  std::vector<double> sum_x, sum_y;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int p = provisional(y, x);
      if (p < 0) continue;
      int root = sets.find(p);
      int& id = final_label[root];
      if (id == 0) {
        RegionStats r;
        r.label = static_cast<int>(regions.size()) + 1;
        r.bbox = {x, y, x, y};
        regions.push_back(r);
        sum_x.push_back(0.0);
        sum_y.push_back(0.0);
        id = r.label;
      }
      auto& r = regions[id - 1];
      ++r.area;
      r.bbox.x_min = std::min(r.bbox.x_min, x);
      r.bbox.x_max = std::max(r.bbox.x_max, x);
      r.bbox.y_min = std::min(r.bbox.y_min, y);
      r.bbox.y_max = std::max(r.bbox.y_max, y);
      sum_x[id - 1] += x;
      sum_y[id - 1] += y;
    }
  }
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const double n = static_cast<double>(regions[i].area);
    regions[i].centroid = {sum_x[i] / n, sum_y[i] / n};
  }
  return regions;
}

QCVerdict qc_mask(const BinaryMask& mask, const QcPolicy& policy) {
  QCVerdict v;
  const auto regions = connected_components(mask, policy.connectivity);
  if (regions.empty()) {
    v.reason = QcReason::empty_mask;
    return v;
  }
  const double total = static_cast<double>(mask.area());
  const double noise_floor = policy.small_component_ignore_fraction * total;
  std::vector<const RegionStats*> kept;
  for (const auto& r : regions)
    if (static_cast<double>(r.area) >= noise_floor) kept.push_back(&r);
  v.regions = kept.size();
  if (kept.empty()) {
    // Foreground exists but every blob is below the noise floor.
    std::size_t largest = 0;
    for (const auto& r : regions) largest = std::max(largest, r.area);
    v.area_fraction = static_cast<double>(largest) / total;
    v.reason = QcReason::area_too_small;
    return v;
  }
  std::size_t largest = 0;
  for (const auto* r : kept) largest = std::max(largest, r->area);
  v.area_fraction = static_cast<double>(largest) / total;
  if (kept.size() > 1) {
    v.reason = QcReason::multi_region;
  } else if (v.area_fraction < policy.min_area_fraction) {
    v.reason = QcReason::area_too_small;
  } else if (v.area_fraction > policy.max_area_fraction) {
    v.reason = QcReason::area_too_large;
  } else {
    v.reason = QcReason::ok;
    v.status = QcStatus::accepted;
  }
  return v;
}

BinaryMask dilate(const BinaryMask& mask, int radius, int iterations) {
  if (radius < 1) throw std::invalid_argument("dilation radius must be >= 1");
  if (iterations < 0) throw std::invalid_argument("dilation iterations must be >= 0");
  const int h = mask.height();
  const int w = mask.width();
  cv::Mat1b cur = mask.pixels.clone();
  cv::Mat1b tmp(h, w);
  for (int it = 0; it < iterations; ++it) {
    // A square element is separable: horizontal max then vertical max.
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        uchar v = 0;
        for (int dx = std::max(0, x - radius); dx <= std::min(w - 1, x + radius) && !v; ++dx)
          v = cur(y, dx);
        tmp(y, x) = v;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        uchar v = 0;
        for (int dy = std::max(0, y - radius); dy <= std::min(h - 1, y + radius) && !v; ++dy)
          v = tmp(dy, x);
        cur(y, x) = v;
      }
  }
  return BinaryMask{cur};
}

std::optional<BBox> foreground_bbox(const BinaryMask& mask) {
  std::optional<BBox> box;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.pixels(y, x)) continue;
      if (!box) {
        box = BBox{x, y, x, y};
      } else {
        box->x_min = std::min(box->x_min, x);
        box->x_max = std::max(box->x_max, x);
        box->y_min = std::min(box->y_min, y);
        box->y_max = std::max(box->y_max, y);
      }
    }
  return box;
}

Crop crop_and_resize(const cv::Mat3b& image, const BinaryMask& mask, int out_size) {
  if (image.size() != mask.pixels.size())
    throw std::invalid_argument("mask and image dimensions differ");
  if (out_size < 1) throw std::invalid_argument("output size must be positive");
  const auto box = foreground_bbox(mask);
  if (!box) throw std::invalid_argument("cannot crop to an empty mask");
  cv::Mat3b masked(image.size(), cv::Vec3b(0, 0, 0));
  image.copyTo(masked, mask.pixels);
  Crop crop;
  crop.bbox = *box;
  cv::resize(masked(box->rect()), crop.pixels, cv::Size(out_size, out_size), 0, 0,
             cv::INTER_LINEAR);
  return crop;
}

NormalizedImage normalize_range(const cv::Mat& image) {
  if (image.empty()) throw std::invalid_argument("cannot normalize an empty image");
  cv::Mat as_double;
  image.convertTo(as_double, CV_64F);
  cv::Mat flat = as_double.reshape(1);
  NormalizedImage out;
  cv::minMaxLoc(flat, &out.source_min, &out.source_max);
  if (out.source_max == out.source_min) {
    logger()->warn("normalize_range: constant image (value {}), emitting zeros", out.source_min);
    out.constant = true;
    out.pixels = cv::Mat::zeros(image.size(), CV_MAKETYPE(CV_32F, image.channels()));
    return out;
  }
  const double scale = 2.0 / (out.source_max - out.source_min);
  cv::Mat scaled = (flat - out.source_min) * scale - 1.0;
  scaled.reshape(image.channels()).convertTo(out.pixels, CV_32F);
  return out;
}

Crop preprocess_crop(const cv::Mat3b& image, const BinaryMask& accepted, const DilationParams& d,
                     int out_size) {
  return crop_and_resize(image, dilate(accepted, d.radius, d.iterations), out_size);
}

PreprocessedImage finalize_crop(const Crop& crop, std::string image_id, std::string digest) {
  PreprocessedImage p;
  p.pixels = normalize_range(crop.pixels).pixels;
  p.image_id = std::move(image_id);
  p.mask_digest = std::move(digest);
  p.crop_bbox = crop.bbox;
  return p;
}

std::string mask_digest(const BinaryMask& mask) {
  std::string bytes = std::to_string(mask.width()) + "x" + std::to_string(mask.height()) + ":";
  cv::Mat1b contiguous = mask.pixels.isContinuous() ? mask.pixels : mask.pixels.clone();
  bytes.append(reinterpret_cast<const char*>(contiguous.data), contiguous.total());
  return sha256_hex(bytes);
}

MaskAgreement compare_masks(const BinaryMask& predicted, const BinaryMask& truth) {
  if (predicted.pixels.size() != truth.pixels.size())
    throw std::invalid_argument("mask sizes differ");
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (int y = 0; y < truth.height(); ++y)
    for (int x = 0; x < truth.width(); ++x) {
      const bool p = predicted.pixels(y, x) != 0;
      const bool t = truth.pixels(y, x) != 0;
      if (p && t)
        ++tp;
      else if (!p && !t)
        ++tn;
      else if (p)
        ++fp;
      else
        ++fn;
    }
  MaskAgreement a;
  const double total = static_cast<double>(truth.area());
  a.pixel_accuracy = total > 0 ? static_cast<double>(tp + tn) / total : 1.0;
  const double dice_den = static_cast<double>(2 * tp + fp + fn);
  a.dice = dice_den > 0 ? 2.0 * static_cast<double>(tp) / dice_den : 1.0;
  const double iou_den = static_cast<double>(tp + fp + fn);
  a.iou = iou_den > 0 ? static_cast<double>(tp) / iou_den : 1.0;
  return a;
}

}  // namespace lesion
