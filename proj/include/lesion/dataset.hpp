#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace lesion {

namespace fs = std::filesystem;

/// The seven HAM10000 diagnosis categories, in metadata (`dx`) order.
enum class LesionClass { akiec, bcc, bkl, df, mel, nv, vasc };

inline constexpr std::array<LesionClass, 7> kAllClasses = {
    LesionClass::akiec, LesionClass::bcc, LesionClass::bkl, LesionClass::df,
    LesionClass::mel,   LesionClass::nv,  LesionClass::vasc};

std::string_view to_string(LesionClass c);
std::optional<LesionClass> parse_lesion_class(std::string_view token);

enum class QcStatus { pending, accepted, rejected };
std::string_view to_string(QcStatus s);
QcStatus parse_qc_status(std::string_view token);

enum class DatasetSource { isic2018, ham10000, custom };
std::string_view to_string(DatasetSource s);
DatasetSource parse_dataset_source(std::string_view token);

enum class TaskId { melanocytic_vs_non, mel_vs_nv, benign_vs_malignant, cancer_vs_noncancer, seven_class };

inline constexpr std::array<TaskId, 4> kBinaryTasks = {
    TaskId::melanocytic_vs_non, TaskId::mel_vs_nv, TaskId::benign_vs_malignant,
    TaskId::cancer_vs_noncancer};

std::string_view to_string(TaskId t);
TaskId parse_task_id(std::string_view token);

struct ImageRecord {
  std::string image_id;
  fs::path image_path;
  std::optional<fs::path> mask_path;
  std::optional<LesionClass> base_class;
  QcStatus qc_status = QcStatus::pending;
  /// Index into TaskGrouping::labels once a grouping has been applied.
  std::optional<int> task_label;
};

/// Relabelling of the base classes for one experiment. Label index 0 is the
/// positive class of every binary task.
struct TaskGrouping {
  TaskId id = TaskId::seven_class;
  std::vector<std::string> labels;
  std::map<LesionClass, int> class_map;
  std::optional<int> positive_label;

  static TaskGrouping make(TaskId id);

  bool admits(LesionClass c) const { return class_map.contains(c); }
  bool is_binary() const { return labels.size() == 2; }
  std::size_t num_labels() const { return labels.size(); }
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  DatasetSource source = DatasetSource::custom;
  std::optional<TaskId> task;

  std::size_t record_count() const { return records.size(); }
  std::map<LesionClass, std::size_t> class_counts() const;
  /// Counts per task label; empty when no grouping was applied.
  std::vector<std::size_t> label_counts() const;
  const ImageRecord* find(std::string_view image_id) const;
};

nlohmann::json to_json(const ImageRecord& r);
ImageRecord record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

struct LoadOptions {
  /// Directory holding ground-truth masks; defaults to the image root.
  std::optional<fs::path> mask_root;
  /// Decode every image and check it has three channels.
  bool verify_decode = false;
};

/// Reads a metadata CSV (`image_id` column required, `dx` optional, extra
/// columns ignored) and resolves every image under `root`.
///
/// Throws RecordError listing every id whose image (or, for ISIC-2018, mask)
/// is missing; throws std::runtime_error naming the row for an unknown `dx`.
DatasetManifest load_manifest(const fs::path& root, const fs::path& metadata_file,
                              DatasetSource source, const LoadOptions& options = {});

/// Drops records outside the task's filter and tags the rest with task labels.
DatasetManifest apply_grouping(const DatasetManifest& manifest, const TaskGrouping& task);

/// Records not rejected by mask QC.
DatasetManifest accepted_only(const DatasetManifest& manifest);

struct SplitRatios {
  double train = 0.0;
  double val = 0.0;
  double test = 0.0;
};

enum class SplitMode {
  /// Per-class quotas n*ratio rounded by the largest-remainder method.
  largest_remainder,
  /// Test quota ceil(n*test) first, then validation ceil(m*val) out of the
  /// remaining m; train gets the rest (two-stage holdout).
  nested_holdout,
};
std::string_view to_string(SplitMode m);
SplitMode parse_split_mode(std::string_view token);

struct SplitPlan {
  std::string task;
  std::uint64_t seed = 0;
  SplitRatios ratios;
  SplitMode mode = SplitMode::largest_remainder;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
};

struct FoldPlan {
  std::string task;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::string>> fold_test_ids;

  std::size_t k() const { return fold_test_ids.size(); }
  /// Complement of fold i's test set, sorted.
  std::vector<std::string> train_ids(std::size_t fold) const;
};

/// Largest-remainder apportionment of n over the given weights (summing to 1).
/// Ties go to the lower index.
std::vector<std::size_t> largest_remainder(std::size_t n, const std::vector<double>& weights);

/// Stratified holdout split. Strata are task labels when present, otherwise
/// base classes, otherwise a single stratum.
SplitPlan make_holdout_split(const DatasetManifest& manifest, const SplitRatios& ratios,
                             std::uint64_t seed, SplitMode mode = SplitMode::largest_remainder);

/// Stratified k-fold partition. Fold sizes differ by at most one overall and
/// per stratum.
FoldPlan make_folds(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed);

nlohmann::json to_json(const SplitPlan& p);
SplitPlan split_plan_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FoldPlan& p);
FoldPlan fold_plan_from_json(const nlohmann::json& j);

/// Records whose ids appear in `ids`, in manifest order.
DatasetManifest subset(const DatasetManifest& manifest, const std::vector<std::string>& ids);

}  // namespace lesion
