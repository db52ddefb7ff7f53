#include "doctest.h"

#include <fstream>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "lesion/report.hpp"

using namespace lesion;
using lesion::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

FoldPredictions random_binary_fold(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FoldPredictions f;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 3 == 0 ? 0 : 1);
    // Positive class (index 0) scores skew high.
    const double p = std::clamp(u(rng) * 0.6 + (label == 0 ? 0.4 : 0.0), 0.0, 1.0);
    f.image_ids.push_back("id" + std::to_string(i));
    f.truth.push_back(label);
    f.probabilities.push_back({p, 1.0 - p});
  }
  return f;
}

}  // namespace

TEST_CASE("binary 5-fold report carries mean ± std for the four metrics") {
  std::mt19937_64 rng(4);
  std::vector<FoldPredictions> folds;
  for (int f = 0; f < 5; ++f) folds.push_back(random_binary_fold(rng, 40));
  const auto report = build_binary_report("mel_vs_nv", {"mel", "nv"}, 0, folds);

  for (const char* name : {"accuracy", "sensitivity", "specificity", "auc"}) {
    const auto* m = report.metric(name);
    REQUIRE(m != nullptr);
    CHECK(m->per_fold.size() == 5);
    CHECK(m->stddev.has_value());
  }
  CHECK(report.confusion.total() == 200);

  // Fold 0 accuracy recomputed by hand from the threshold rule.
  std::size_t correct = 0;
  for (std::size_t i = 0; i < folds[0].truth.size(); ++i) {
    const int pred = folds[0].probabilities[i][0] > 0.5 ? 0 : 1;
    correct += pred == folds[0].truth[i];
  }
  CHECK(report.metric("accuracy")->per_fold[0] == doctest::Approx(correct / 40.0));

  // Per-class recall of the positive class equals sensitivity fold by fold.
  const auto& pos_recall = report.per_class[0].recall;
  REQUIRE(pos_recall.has_value());
  for (std::size_t f = 0; f < 5; ++f)
    CHECK(pos_recall->per_fold[f] == doctest::Approx(report.metric("sensitivity")->per_fold[f]));

  TempDir dir("report_bin");
  const auto files = render_report(report, dir.path());
  const auto json = nlohmann::json::parse(slurp(files.json));
  CHECK(json["task"] == "mel_vs_nv");
  CHECK(json["folds"] == 5);
  for (const char* name : {"accuracy", "sensitivity", "specificity", "auc"}) {
    CHECK(json["metrics"][name].contains("mean"));
    CHECK(json["metrics"][name].contains("std"));
    CHECK(json["metrics"][name]["display"].get<std::string>().find("±") != std::string::npos);
  }
  CHECK(std::filesystem::exists(dir.path() / "cm_mel_vs_nv.png"));
  CHECK(files.roc_pngs.size() == 1);
}

TEST_CASE("seven-class report writes one heatmap, seven ROC plots, one JSON") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FoldPredictions f;
  for (int i = 0; i < 70; ++i) {
    const int label = i % 7;
    std::vector<double> row(7);
    double sum = 0;
    for (int c = 0; c < 7; ++c) sum += (row[c] = u(rng) + (c == label ? 1.5 : 0.0));
    for (auto& v : row) v /= sum;
    f.truth.push_back(label);
    f.probabilities.push_back(row);
    f.image_ids.push_back("img" + std::to_string(i));
  }
  const std::vector<std::string> names = {"akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"};
  const auto report = build_multiclass_report("seven_class", names, {f});
  CHECK(report.metric("precision_micro") != nullptr);
  CHECK(report.metric("auc_macro") != nullptr);
  CHECK_FALSE(report.metric("f1_macro")->stddev.has_value());

  TempDir dir("report_seven");
  const auto files = render_report(report, dir.path());
  CHECK(files.roc_pngs.size() == 7);
  std::size_t pngs = 0, jsons = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    pngs += e.path().extension() == ".png";
    jsons += e.path().extension() == ".json";
  }
  CHECK(pngs == 8);
  CHECK(jsons == 1);
  CHECK(std::filesystem::exists(dir.path() / "roc_seven_class_vasc.png"));

  // Rerun: byte-identical JSON and images.
  TempDir again("report_seven_again");
  const auto files2 = render_report(report, again.path());
  CHECK(slurp(files.json) == slurp(files2.json));
  CHECK(slurp(files.confusion_png) == slurp(files2.confusion_png));

  const auto json = nlohmann::json::parse(slurp(files.json));
  CHECK(json["per_class"]["mel"].contains("auc"));
  CHECK(json["confusion_matrix"]["counts"].size() == 7);
}

TEST_CASE("unwritable report directory is a hard failure") {
  TempDir dir("report_bad");
  std::ofstream(dir.path() / "file") << "x";
  FoldPredictions f{{"a", "b"}, {0, 1}, {{0.9, 0.1}, {0.2, 0.8}}};
  const auto report = build_binary_report("t", {"p", "n"}, 0, {f});
  CHECK_THROWS(render_report(report, dir.path() / "file" / "sub"));
}
