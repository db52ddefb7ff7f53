#include "lesion/report.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace lesion {

namespace fs = std::filesystem;
using nlohmann::json;

const FoldAggregate* EvaluationReport::metric(const std::string& name) const {
  for (const auto& m : metrics)
    if (m.metric_name == name) return &m;
  return nullptr;
}

namespace {

/// Aggregate of the fold values that exist; nullopt if none do.
std::optional<FoldAggregate> aggregate_present(const std::string& name,
                                               const std::vector<std::optional<double>>& values) {
  std::vector<double> present;
  for (const auto& v : values)
    if (v) present.push_back(*v);
  if (present.empty()) return std::nullopt;
  return aggregate_folds(name, std::move(present));
}

void pooled_roc(EvaluationReport& report, const std::vector<FoldPredictions>& folds,
                std::size_t cls) {
  std::vector<int> labels;
  std::vector<double> scores;
  for (const auto& f : folds)
    for (std::size_t i = 0; i < f.truth.size(); ++i) {
      labels.push_back(f.truth[i] == static_cast<int>(cls) ? 1 : 0);
      scores.push_back(f.probabilities[i][cls]);
    }
  report.roc.emplace_back(report.class_names[cls], roc_curve(labels, scores));
}

}  // namespace

EvaluationReport build_binary_report(const std::string& task,
                                     const std::vector<std::string>& class_names,
                                     std::size_t positive_index,
                                     const std::vector<FoldPredictions>& folds, double threshold) {
  if (class_names.size() != 2) throw std::invalid_argument("binary report needs two classes");
  if (folds.empty()) throw std::invalid_argument("no folds to report");
  EvaluationReport report;
  report.task = task;
  report.class_names = class_names;
  report.positive_index = positive_index;
  report.folds = folds.size();
  report.confusion = confusion_matrix(std::vector<int>{}, std::vector<int>{}, class_names);

  const int pos = static_cast<int>(positive_index);
  const int neg = 1 - pos;
  std::vector<std::optional<double>> acc, sens, spec, auc;
  std::vector<std::vector<std::optional<double>>> recall(2);
  for (const auto& f : folds) {
    std::vector<int> predicted, is_pos;
    std::vector<double> score;
    for (std::size_t i = 0; i < f.truth.size(); ++i) {
      const double p = f.probabilities[i][positive_index];
      predicted.push_back(p > threshold ? pos : neg);
      is_pos.push_back(f.truth[i] == pos ? 1 : 0);
      score.push_back(p);
    }
    const auto cm = confusion_matrix(f.truth, predicted, class_names);
    report.confusion += cm;
    auto bm = binary_metrics(cm, positive_index);
    const bool both = std::count(is_pos.begin(), is_pos.end(), 1) > 0 &&
                      std::count(is_pos.begin(), is_pos.end(), 0) > 0;
    if (both) bm.auc = roc_auc(is_pos, score);
    acc.push_back(bm.accuracy);
    sens.push_back(bm.sensitivity);
    spec.push_back(bm.specificity);
    auc.push_back(bm.auc);
    const auto r = per_class_recall(cm);
    recall[0].push_back(r[0]);
    recall[1].push_back(r[1]);
  }
  for (auto [name, values] : {std::pair{"accuracy", &acc}, std::pair{"sensitivity", &sens},
                              std::pair{"specificity", &spec}, std::pair{"auc", &auc}}) {
    if (auto a = aggregate_present(name, *values)) report.metrics.push_back(*a);
  }
  for (std::size_t c = 0; c < 2; ++c) {
    PerClassSummary s;
    s.class_name = class_names[c];
    s.recall = aggregate_present("recall", recall[c]);
    report.per_class.push_back(std::move(s));
  }
  pooled_roc(report, folds, positive_index);
  return report;
}

EvaluationReport build_multiclass_report(const std::string& task,
                                         const std::vector<std::string>& class_names,
                                         const std::vector<FoldPredictions>& folds) {
  if (folds.empty()) throw std::invalid_argument("no folds to report");
  const std::size_t k = class_names.size();
  EvaluationReport report;
  report.task = task;
  report.class_names = class_names;
  report.folds = folds.size();
  report.confusion = confusion_matrix(std::vector<int>{}, std::vector<int>{}, class_names);

  std::map<std::string, std::vector<std::optional<double>>> series;
  std::vector<std::vector<std::optional<double>>> cls_auc(k), cls_prec(k), cls_rec(k), cls_f1(k);
  const std::vector<std::string> order = {"accuracy",    "precision_micro", "precision_macro",
                                          "f1_micro",    "f1_macro",        "auc_micro",
                                          "auc_macro"};
  for (const auto& f : folds) {
    const auto m = multiclass_metrics(f.truth, f.probabilities, class_names);
    report.confusion += m.confusion;
    series["accuracy"].push_back(m.accuracy);
    series["precision_micro"].push_back(m.precision_micro);
    series["precision_macro"].push_back(m.precision_macro);
    series["f1_micro"].push_back(m.f1_micro);
    series["f1_macro"].push_back(m.f1_macro);
    series["auc_micro"].push_back(m.auc_micro);
    series["auc_macro"].push_back(m.auc_macro);
    const auto rec = per_class_recall(m.confusion);
    for (std::size_t c = 0; c < k; ++c) {
      cls_auc[c].push_back(m.per_class_auc[c]);
      cls_prec[c].push_back(m.per_class_precision[c]);
      cls_rec[c].push_back(rec[c]);
      cls_f1[c].push_back(m.per_class_f1[c]);
    }
  }
  for (const auto& name : order)
    if (auto a = aggregate_present(name, series[name])) report.metrics.push_back(*a);
  for (std::size_t c = 0; c < k; ++c) {
    PerClassSummary s;
    s.class_name = class_names[c];
    s.recall = aggregate_present("recall", cls_rec[c]);
    s.auc = aggregate_present("auc", cls_auc[c]);
    s.precision = aggregate_present("precision", cls_prec[c]);
    s.f1 = aggregate_present("f1", cls_f1[c]);
    report.per_class.push_back(std::move(s));
  }
  for (std::size_t c = 0; c < k; ++c) pooled_roc(report, folds, c);
  return report;
}

json to_json(const FoldAggregate& a) {
  json j;
  j["per_fold"] = a.per_fold;
  j["mean"] = a.mean;
  j["std"] = a.stddev ? json(*a.stddev) : json(nullptr);
  j["display"] = a.display();
  return j;
}

json to_json(const EvaluationReport& r) {
  json j;
  j["task"] = r.task;
  j["folds"] = r.folds;
  j["classes"] = r.class_names;
  j["positive_class"] =
      r.positive_index ? json(r.class_names[*r.positive_index]) : json(nullptr);
  json metrics = json::object();
  for (const auto& m : r.metrics) metrics[m.metric_name] = to_json(m);
  j["metrics"] = metrics;
  j["confusion_matrix"] = {{"classes", r.confusion.class_names}, {"counts", r.confusion.counts}};
  json per_class = json::object();
  for (const auto& s : r.per_class) {
    json c = json::object();
    if (s.recall) c["recall"] = to_json(*s.recall);
    if (s.auc) c["auc"] = to_json(*s.auc);
    if (s.precision) c["precision"] = to_json(*s.precision);
    if (s.f1) c["f1"] = to_json(*s.f1);
    per_class[s.class_name] = c;
  }
  j["per_class"] = per_class;
  return j;
}

namespace {

void write_png(const fs::path& path, const cv::Mat& img) {
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

cv::Mat draw_confusion(const ConfusionMatrix& cm, const std::string& title) {
  const int k = static_cast<int>(cm.size());
  const int cell = 64, left = 120, top = 60, right = 20, bottom = 100;
  cv::Mat img(top + k * cell + bottom, left + k * cell + right, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(img, title, {10, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
  const auto rows = cm.row_sums();
  cv::Mat1b level(1, 1);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const double frac = rows[i] ? static_cast<double>(cm.counts[i][j]) / static_cast<double>(rows[i]) : 0.0;
      level(0, 0) = static_cast<uchar>(std::lround(frac * 255.0));
      cv::Mat colored;
      cv::applyColorMap(level, colored, cv::COLORMAP_VIRIDIS);
      const cv::Vec3b c = colored.at<cv::Vec3b>(0, 0);
      const cv::Rect r(left + j * cell, top + i * cell, cell, cell);
      cv::rectangle(img, r, cv::Scalar(c[0], c[1], c[2]), cv::FILLED);
      cv::rectangle(img, r, cv::Scalar(80, 80, 80), 1);
      const cv::Scalar ink = frac > 0.5 ? cv::Scalar(0, 0, 0) : cv::Scalar(255, 255, 255);
      cv::putText(img, std::to_string(cm.counts[i][j]), {r.x + 6, r.y + cell / 2 + 5},
                  cv::FONT_HERSHEY_SIMPLEX, 0.45, ink, 1, cv::LINE_AA);
    }
    cv::putText(img, cm.class_names[i], {8, top + i * cell + cell / 2 + 5},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
    cv::Point anchor(left + i * cell + 4, top + k * cell + 18);
    cv::putText(img, cm.class_names[i].substr(0, 8), anchor, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                {0, 0, 0}, 1, cv::LINE_AA);
  }
  cv::putText(img, "rows: true, columns: predicted", {10, top + k * cell + 60},
              cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
  return img;
}

cv::Mat draw_roc(const std::vector<RocPoint>& curve, const std::string& title) {
  const int size = 400, margin = 50;
  cv::Mat img(size + 2 * margin, size + 2 * margin, CV_8UC3, cv::Scalar(255, 255, 255));
  auto to_px = [&](double fpr, double tpr) {
    return cv::Point(margin + static_cast<int>(std::lround(fpr * size)),
                     margin + size - static_cast<int>(std::lround(tpr * size)));
  };
  cv::rectangle(img, to_px(0, 1), to_px(1, 0), {0, 0, 0}, 1);
  cv::line(img, to_px(0, 0), to_px(1, 1), {180, 180, 180}, 1, cv::LINE_AA);
  for (std::size_t i = 1; i < curve.size(); ++i)
    cv::line(img, to_px(curve[i - 1].fpr, curve[i - 1].tpr), to_px(curve[i].fpr, curve[i].tpr),
             {200, 80, 20}, 2, cv::LINE_AA);
  // Trapezoid area of the drawn polyline, for the legend.
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  cv::putText(img, title, {margin, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.55, {0, 0, 0}, 1, cv::LINE_AA);
  cv::putText(img, fmt::format("AUC = {:.4f}", area), {margin + size - 150, margin + size - 12},
              cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0}, 1, cv::LINE_AA);
  cv::putText(img, "false positive rate", {margin + size / 2 - 80, margin + size + 35},
              cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
  cv::putText(img, "TPR", {8, margin + size / 2}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1,
              cv::LINE_AA);
  return img;
}

}  // namespace

ReportFiles render_report(const EvaluationReport& report, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw std::runtime_error("cannot create report directory " + out_dir.string());

  ReportFiles files;
  files.json = out_dir / "report.json";
  {
    std::ofstream out(files.json);
    if (!out) throw std::runtime_error("cannot write " + files.json.string());
    out << to_json(report).dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + files.json.string());
  }
  files.confusion_png = out_dir / ("cm_" + report.task + ".png");
  write_png(files.confusion_png, draw_confusion(report.confusion, "Confusion matrix: " + report.task));
  for (const auto& [cls, curve] : report.roc) {
    auto path = out_dir / ("roc_" + report.task + "_" + cls + ".png");
    write_png(path, draw_roc(curve, "ROC " + report.task + " / " + cls));
    files.roc_pngs.push_back(path);
  }
  return files;
}

}  // namespace lesion
