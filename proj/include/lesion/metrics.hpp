#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lesion {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::vector<std::string> class_names;
  std::vector<std::vector<std::size_t>> counts;

  std::size_t size() const { return class_names.size(); }
  std::size_t total() const;
  std::vector<std::size_t> row_sums() const;
  std::vector<std::size_t> col_sums() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted,
                                 const std::vector<std::string>& class_names);
ConfusionMatrix confusion_matrix(std::span<const std::string> truth,
                                 std::span<const std::string> predicted,
                                 const std::vector<std::string>& class_names);

struct BinaryMetrics {
  std::string positive_class;
  std::optional<double> accuracy;
  /// TP / (TP + FN); absent without positive examples.
  std::optional<double> sensitivity;
  /// TN / (TN + FP); absent without negative examples.
  std::optional<double> specificity;
  std::optional<double> auc;
};

BinaryMetrics binary_metrics(const ConfusionMatrix& cm, std::size_t positive_index);

/// P(score_pos > score_neg) + 0.5 P(tie), from average ranks.
/// Throws std::domain_error unless both classes are present.
double roc_auc(std::span<const int> is_positive, std::span<const double> scores);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

/// ROC vertices from (0,0) to (1,1), one per distinct score.
std::vector<RocPoint> roc_curve(std::span<const int> is_positive, std::span<const double> scores);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_lowest(std::span<const double> values);

struct MulticlassMetrics {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class_auc;
  std::vector<double> per_class_precision;
  std::vector<double> per_class_recall;
  std::vector<double> per_class_f1;
  double precision_micro = 0.0;
  double precision_macro = 0.0;
  double recall_micro = 0.0;
  double f1_micro = 0.0;
  double f1_macro = 0.0;
  std::optional<double> auc_micro;
  std::optional<double> auc_macro;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
};

/// One-vs-rest reduction of a probability matrix (rows sum to 1). Hard
/// predictions are the row argmax. A class missing from `truth` has no AUC
/// and is left out of the macro AUC; precision of a never-predicted class
/// counts as 0.
MulticlassMetrics multiclass_metrics(std::span<const int> truth,
                                     const std::vector<std::vector<double>>& probabilities,
                                     const std::vector<std::string>& class_names);

/// Per-class recall (diagonal over row sum); absent for empty rows.
std::vector<std::optional<double>> per_class_recall(const ConfusionMatrix& cm);

struct FoldAggregate {
  std::string metric_name;
  std::vector<double> per_fold;
  double mean = 0.0;
  /// Sample standard deviation (n - 1); absent for fewer than two folds.
  std::optional<double> stddev;

  /// "92.34 ± 1.76" with values scaled by `scale`.
  std::string display(double scale = 100.0, int precision = 2) const;
};

FoldAggregate aggregate_folds(std::string metric_name, std::vector<double> per_fold);

}  // namespace lesion
