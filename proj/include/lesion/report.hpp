#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lesion/metrics.hpp"

namespace lesion {

/// Test-set predictions of one fold: true label index and one probability
/// column per class. Binary tasks carry {p(label 0), p(label 1)}.
struct FoldPredictions {
  std::vector<std::string> image_ids;
  std::vector<int> truth;
  std::vector<std::vector<double>> probabilities;
};

struct PerClassSummary {
  std::string class_name;
  /// Diagonal over row sum of each fold's confusion matrix ("detection
  /// accuracy" of that class).
  std::optional<FoldAggregate> recall;
  std::optional<FoldAggregate> auc;
  std::optional<FoldAggregate> precision;
  std::optional<FoldAggregate> f1;
};

struct EvaluationReport {
  std::string task;
  std::vector<std::string> class_names;
  std::optional<std::size_t> positive_index;
  std::size_t folds = 0;
  std::vector<FoldAggregate> metrics;
  /// Summed over folds.
  ConfusionMatrix confusion;
  std::vector<PerClassSummary> per_class;
  /// Pooled one-vs-rest curves; one entry per plotted class.
  std::vector<std::pair<std::string, std::vector<RocPoint>>> roc;

  const FoldAggregate* metric(const std::string& name) const;
};

/// Accuracy, sensitivity, specificity and AUC per fold with mean ± std, plus
/// per-class detection accuracy. Hard labels use p(positive) > threshold.
EvaluationReport build_binary_report(const std::string& task,
                                     const std::vector<std::string>& class_names,
                                     std::size_t positive_index,
                                     const std::vector<FoldPredictions>& folds,
                                     double threshold = 0.5);

/// Micro/macro precision, F1 and AUC plus per-class one-vs-rest AUC.
EvaluationReport build_multiclass_report(const std::string& task,
                                         const std::vector<std::string>& class_names,
                                         const std::vector<FoldPredictions>& folds);

nlohmann::json to_json(const FoldAggregate& a);
nlohmann::json to_json(const EvaluationReport& r);

struct ReportFiles {
  std::filesystem::path json;
  std::filesystem::path confusion_png;
  std::vector<std::filesystem::path> roc_pngs;
};

/// Writes report.json, cm_<task>.png and roc_<task>_<class>.png. Throws if
/// the directory cannot be created or written.
ReportFiles render_report(const EvaluationReport& report, const std::filesystem::path& out_dir);

}  // namespace lesion
