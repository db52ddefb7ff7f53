#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "lesion/classifier.hpp"
#include "lesion/dataset.hpp"
#include "lesion/mask.hpp"
#include "lesion/segmentation.hpp"

namespace lesion {

struct DatasetPaths {
  fs::path root;
  fs::path metadata;
  std::optional<fs::path> mask_root;
};

/// Everything one run needs. Serialised as a JSON document; relative paths in
/// a config file resolve against the file's directory.
struct PipelineConfig {
  /// Segmentation training data (ground-truth masks).
  std::optional<DatasetPaths> isic2018;
  /// Classification data; masks come from the segmenter.
  std::optional<DatasetPaths> ham10000;
  /// Use these segmenter weights instead of running train-seg.
  std::optional<fs::path> segmenter_weights;

  TaskId task = TaskId::mel_vs_nv;
  std::uint64_t seed = 42;
  fs::path out = "out";

  SplitRatios isic_ratios{0.70, 0.10, 0.20};
  /// Protocol of the seven-class task.
  SplitRatios holdout_ratios{0.70, 0.13, 0.17};
  /// Cross-validation folds of the binary tasks.
  int folds = 5;

  SegmenterConfig segmenter;
  TrainSchedule schedule;
  float mask_threshold = 0.5f;
  QcPolicy qc;
  DilationParams dilation;

  /// Partial classifier config merged over the task defaults. A "per_task"
  /// object may refine it further for individual tasks.
  nlohmann::json classifier = nlohmann::json::object();
  /// Binary decision rule p(positive) > threshold.
  double decision_threshold = 0.5;

  ClassifierConfig classifier_for(TaskId task) const;
  static bool uses_folds(TaskId task) { return task != TaskId::seven_class; }
  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& c);
/// Missing fields keep their defaults. Relative paths are resolved against
/// `base_dir`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const fs::path& base_dir = {});
PipelineConfig load_pipeline_config(const fs::path& path);

}  // namespace lesion
