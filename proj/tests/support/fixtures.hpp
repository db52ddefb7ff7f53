#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <random>
#include <string>

#include "lesion/dataset.hpp"

namespace lesion::testing {

/// Post-QC HAM10000 class counts (9238 records).
inline const std::map<LesionClass, std::size_t> kPostQcCounts = {
    {LesionClass::akiec, 262}, {LesionClass::bcc, 388}, {LesionClass::bkl, 915},
    {LesionClass::df, 88},     {LesionClass::mel, 1008}, {LesionClass::nv, 6489},
    {LesionClass::vasc, 88}};

/// Raw HAM10000 class counts (10015 records).
inline const std::map<LesionClass, std::size_t> kRawCounts = {
    {LesionClass::akiec, 327}, {LesionClass::bcc, 514}, {LesionClass::bkl, 1099},
    {LesionClass::df, 115},    {LesionClass::mel, 1113}, {LesionClass::nv, 6705},
    {LesionClass::vasc, 142}};

/// In-memory manifest with the given class counts; ids interleave classes so
/// manifest order carries no class information.
inline DatasetManifest synthetic_manifest(const std::map<LesionClass, std::size_t>& counts,
                                          DatasetSource source = DatasetSource::ham10000) {
  DatasetManifest m;
  m.source = source;
  std::size_t serial = 0;
  for (const auto& [cls, n] : counts)
    for (std::size_t i = 0; i < n; ++i) {
      ImageRecord r;
      char buf[32];
      std::snprintf(buf, sizeof buf, "ISIC_%07zu", (serial * 7919) % 1000003);
      ++serial;
      r.image_id = buf;
      r.image_path = r.image_id + ".jpg";
      r.base_class = cls;
      m.records.push_back(std::move(r));
    }
  return m;
}

/// Unlabelled manifest of n records (ISIC-2018 style).
inline DatasetManifest unlabelled_manifest(std::size_t n) {
  DatasetManifest m;
  m.source = DatasetSource::isic2018;
  for (std::size_t i = 0; i < n; ++i) {
    ImageRecord r;
    char buf[32];
    std::snprintf(buf, sizeof buf, "ISIC_%07zu", i);
    r.image_id = buf;
    r.image_path = r.image_id + ".jpg";
    r.mask_path = r.image_id + "_segmentation.png";
    m.records.push_back(std::move(r));
  }
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("lesion_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
};

}  // namespace lesion::testing
