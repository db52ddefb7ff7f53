#include "lesion/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "lesion/log.hpp"

namespace lesion {

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

std::vector<std::size_t> ConfusionMatrix::row_sums() const {
  std::vector<std::size_t> s;
  for (const auto& row : counts) s.push_back(std::accumulate(row.begin(), row.end(), std::size_t{0}));
  return s;
}

std::vector<std::size_t> ConfusionMatrix::col_sums() const {
  std::vector<std::size_t> s(size(), 0);
  for (const auto& row : counts)
    for (std::size_t j = 0; j < row.size(); ++j) s[j] += row[j];
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.class_names != class_names)
    throw std::invalid_argument("cannot add confusion matrices over different classes");
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t j = 0; j < size(); ++j) counts[i][j] += other.counts[i][j];
  return *this;
}

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted,
                                 const std::vector<std::string>& class_names) {
  if (truth.size() != predicted.size())
    throw std::invalid_argument("truth and prediction lengths differ");
  const auto n = class_names.size();
  ConfusionMatrix cm{class_names, std::vector<std::vector<std::size_t>>(n, std::vector<std::size_t>(n, 0))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i];
    const int p = predicted[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= n || static_cast<std::size_t>(p) >= n)
      throw std::invalid_argument(fmt::format("label out of range at index {} ({}, {})", i, t, p));
    ++cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return cm;
}

ConfusionMatrix confusion_matrix(std::span<const std::string> truth,
                                 std::span<const std::string> predicted,
                                 const std::vector<std::string>& class_names) {
  auto index_of = [&](const std::string& name) {
    auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) throw std::invalid_argument("unknown label '" + name + "'");
    return static_cast<int>(it - class_names.begin());
  };
  std::vector<int> t, p;
  for (const auto& s : truth) t.push_back(index_of(s));
  for (const auto& s : predicted) p.push_back(index_of(s));
  return confusion_matrix(t, p, class_names);
}

BinaryMetrics binary_metrics(const ConfusionMatrix& cm, std::size_t positive_index) {
  if (cm.size() != 2) throw std::invalid_argument("binary metrics need a 2x2 confusion matrix");
  if (positive_index > 1) throw std::invalid_argument("positive index must be 0 or 1");
  const std::size_t neg = 1 - positive_index;
  const double tp = static_cast<double>(cm.counts[positive_index][positive_index]);
  const double fn = static_cast<double>(cm.counts[positive_index][neg]);
  const double tn = static_cast<double>(cm.counts[neg][neg]);
  const double fp = static_cast<double>(cm.counts[neg][positive_index]);
  BinaryMetrics m;
  m.positive_class = cm.class_names[positive_index];
  const double total = tp + fn + tn + fp;
  if (total > 0) m.accuracy = (tp + tn) / total;
  if (tp + fn > 0) m.sensitivity = tp / (tp + fn);
  if (tn + fp > 0) m.specificity = tn / (tn + fp);
  return m;
}

double roc_auc(std::span<const int> is_positive, std::span<const double> scores) {
  if (is_positive.size() != scores.size()) throw std::invalid_argument("label/score lengths differ");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // Ranks i+1..j share their average.
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t)
      if (is_positive[order[t]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::domain_error("AUC is undefined without both positive and negative examples");
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

std::vector<RocPoint> roc_curve(std::span<const int> is_positive, std::span<const double> scores) {
  if (is_positive.size() != scores.size()) throw std::invalid_argument("label/score lengths differ");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t n_pos = 0;
  for (int v : is_positive) n_pos += v ? 1 : 0;
  const std::size_t n_neg = n - n_pos;

  std::vector<RocPoint> curve{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (is_positive[order[j]])
        ++tp;
      else
        ++fp;
      ++j;
    }
    curve.push_back({n_neg ? static_cast<double>(fp) / static_cast<double>(n_neg) : 0.0,
                     n_pos ? static_cast<double>(tp) / static_cast<double>(n_pos) : 0.0,
                     scores[order[i]]});
    i = j;
  }
  return curve;
}

std::size_t argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

MulticlassMetrics multiclass_metrics(std::span<const int> truth,
                                     const std::vector<std::vector<double>>& probabilities,
                                     const std::vector<std::string>& class_names) {
  if (truth.size() != probabilities.size())
    throw std::invalid_argument("label/probability row counts differ");
  const std::size_t k = class_names.size();
  const std::size_t n = truth.size();
  for (const auto& row : probabilities) {
    if (row.size() != k) throw std::invalid_argument("probability row has wrong width");
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-4) throw std::invalid_argument("probability row does not sum to 1");
  }

  MulticlassMetrics m;
  m.class_names = class_names;
  std::vector<int> predicted(n);
  for (std::size_t i = 0; i < n; ++i) predicted[i] = static_cast<int>(argmax_lowest(probabilities[i]));
  m.confusion = confusion_matrix(truth, predicted, class_names);

  const auto rows = m.confusion.row_sums();
  const auto cols = m.confusion.col_sums();
  std::size_t diag = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(m.confusion.counts[c][c]);
    diag += m.confusion.counts[c][c];
    const double precision = cols[c] ? tp / static_cast<double>(cols[c]) : 0.0;
    const double recall = rows[c] ? tp / static_cast<double>(rows[c]) : 0.0;
    if (!cols[c]) logger()->debug("class {} never predicted; precision taken as 0", class_names[c]);
    m.per_class_precision.push_back(precision);
    m.per_class_recall.push_back(recall);
    m.per_class_f1.push_back(precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0);
  }
  const double dn = static_cast<double>(n);
  m.accuracy = n ? static_cast<double>(diag) / dn : 0.0;
  // Single-label problem: every false positive is someone's false negative.
  m.precision_micro = m.accuracy;
  m.recall_micro = m.accuracy;
  m.f1_micro = m.accuracy;
  const double dk = static_cast<double>(k);
  m.precision_macro = std::accumulate(m.per_class_precision.begin(), m.per_class_precision.end(), 0.0) / dk;
  m.f1_macro = std::accumulate(m.per_class_f1.begin(), m.per_class_f1.end(), 0.0) / dk;

  std::vector<int> pooled_labels;
  std::vector<double> pooled_scores;
  pooled_labels.reserve(n * k);
  pooled_scores.reserve(n * k);
  double auc_sum = 0.0;
  std::size_t auc_count = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<int> is_c(n);
    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) {
      is_c[i] = truth[i] == static_cast<int>(c) ? 1 : 0;
      score[i] = probabilities[i][c];
      pooled_labels.push_back(is_c[i]);
      pooled_scores.push_back(score[i]);
    }
    if (rows[c] == 0 || rows[c] == n) {
      logger()->warn("class {} has no one-vs-rest AUC; left out of the macro average", class_names[c]);
      m.per_class_auc.emplace_back();
      continue;
    }
    const double auc = roc_auc(is_c, score);
    m.per_class_auc.emplace_back(auc);
    auc_sum += auc;
    ++auc_count;
  }
  if (auc_count) m.auc_macro = auc_sum / static_cast<double>(auc_count);
  if (n && k > 1) {
    const bool both = std::any_of(pooled_labels.begin(), pooled_labels.end(), [](int v) { return v; }) &&
                      std::any_of(pooled_labels.begin(), pooled_labels.end(), [](int v) { return !v; });
    if (both) m.auc_micro = roc_auc(pooled_labels, pooled_scores);
  }
  return m;
}

std::vector<std::optional<double>> per_class_recall(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out;
  const auto rows = cm.row_sums();
  for (std::size_t c = 0; c < cm.size(); ++c) {
    if (rows[c])
      out.emplace_back(static_cast<double>(cm.counts[c][c]) / static_cast<double>(rows[c]));
    else
      out.emplace_back();
  }
  return out;
}

FoldAggregate aggregate_folds(std::string metric_name, std::vector<double> per_fold) {
  if (per_fold.empty()) throw std::invalid_argument("no fold values to aggregate");
  FoldAggregate a;
  a.metric_name = std::move(metric_name);
  a.per_fold = std::move(per_fold);
  const double n = static_cast<double>(a.per_fold.size());
  a.mean = std::accumulate(a.per_fold.begin(), a.per_fold.end(), 0.0) / n;
  if (a.per_fold.size() >= 2) {
    double ss = 0.0;
    for (double v : a.per_fold) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / (n - 1.0));
  }
  return a;
}

std::string FoldAggregate::display(double scale, int precision) const {
  if (!stddev) return fmt::format("{:.{}f}", mean * scale, precision);
  return fmt::format("{:.{}f} ± {:.{}f}", mean * scale, precision, *stddev * scale, precision);
}

}  // namespace lesion
