#include "doctest.h"

#include <algorithm>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "fixtures.hpp"
#include "lesion/dataset.hpp"
#include "lesion/error.hpp"

using namespace lesion;
using lesion::testing::kPostQcCounts;
using lesion::testing::kRawCounts;
using lesion::testing::synthetic_manifest;
using lesion::testing::TempDir;

namespace {

void touch(const fs::path& p) { std::ofstream(p) << "x"; }

void write_csv(const fs::path& p, const std::string& body) { std::ofstream(p) << body; }

std::map<std::string, int> label_of(const DatasetManifest& m) {
  std::map<std::string, int> out;
  for (const auto& r : m.records) out[r.image_id] = r.task_label.value_or(static_cast<int>(*r.base_class));
  return out;
}

void check_partition(const std::vector<std::vector<std::string>>& parts,
                     const DatasetManifest& universe) {
  std::set<std::string> all;
  std::size_t total = 0;
  for (const auto& p : parts) {
    total += p.size();
    all.insert(p.begin(), p.end());
  }
  CHECK(total == all.size());  // pairwise disjoint
  std::set<std::string> expected;
  for (const auto& r : universe.records) expected.insert(r.image_id);
  CHECK(all == expected);
}

}  // namespace

TEST_CASE("task groupings follow the class tables") {
  const auto cancer = TaskGrouping::make(TaskId::cancer_vs_noncancer);
  CHECK(cancer.labels == std::vector<std::string>{"cancerous", "non_cancerous"});
  CHECK(cancer.positive_label == 0);
  CHECK(cancer.class_map.at(LesionClass::mel) == 0);
  CHECK(cancer.class_map.at(LesionClass::nv) == 1);

  const auto mel = TaskGrouping::make(TaskId::mel_vs_nv);
  CHECK(mel.class_map.size() == 2);
  CHECK_FALSE(mel.admits(LesionClass::bcc));

  const auto bm = TaskGrouping::make(TaskId::benign_vs_malignant);
  CHECK(bm.class_map.size() == 5);
  CHECK_FALSE(bm.admits(LesionClass::mel));
  CHECK_FALSE(bm.admits(LesionClass::nv));

  const auto seven = TaskGrouping::make(TaskId::seven_class);
  CHECK(seven.num_labels() == 7);
  CHECK_FALSE(seven.positive_label.has_value());
  CHECK(seven.labels[4] == "mel");
}

TEST_CASE("apply_grouping reproduces the per-task totals on the post-QC counts") {
  const auto m = synthetic_manifest(kPostQcCounts);
  REQUIRE(m.record_count() == 9238);

  auto counts = [&](TaskId t) { return apply_grouping(m, TaskGrouping::make(t)).label_counts(); };
  CHECK(counts(TaskId::cancer_vs_noncancer) == std::vector<std::size_t>{1658, 7580});
  CHECK(counts(TaskId::mel_vs_nv) == std::vector<std::size_t>{1008, 6489});
  CHECK(counts(TaskId::melanocytic_vs_non) == std::vector<std::size_t>{7497, 1741});
  CHECK(counts(TaskId::benign_vs_malignant) == std::vector<std::size_t>{1091, 650});

  const auto mel = apply_grouping(m, TaskGrouping::make(TaskId::mel_vs_nv));
  CHECK(mel.record_count() == 7497);

  DatasetManifest empty;
  CHECK(apply_grouping(empty, TaskGrouping::make(TaskId::seven_class)).record_count() == 0);

  DatasetManifest unlabelled = lesion::testing::unlabelled_manifest(3);
  CHECK_THROWS_AS(apply_grouping(unlabelled, TaskGrouping::make(TaskId::seven_class)),
                  std::invalid_argument);
}

TEST_CASE("load_manifest reads HAM10000-style metadata") {
  TempDir dir("ingest");
  const auto root = dir.path() / "images";
  fs::create_directories(root);

  SUBCASE("full HAM10000 class census") {
    std::string csv = "lesion_id,image_id,dx,dx_type,age,sex,localization\n";
    std::size_t serial = 0;
    for (const auto& [cls, n] : kRawCounts)
      for (std::size_t i = 0; i < n; ++i, ++serial) {
        const std::string id = "ISIC_" + std::to_string(24306 + serial);
        touch(root / (id + ".jpg"));
        csv += "HAM_" + std::to_string(serial) + "," + id + "," + std::string(to_string(cls)) +
               ",histo,45.0,male,back\n";
      }
    write_csv(dir.path() / "meta.csv", csv);
    const auto m = load_manifest(root, dir.path() / "meta.csv", DatasetSource::ham10000);
    CHECK(m.record_count() == 10015);
    CHECK(m.class_counts() == kRawCounts);
    CHECK(std::none_of(m.records.begin(), m.records.end(),
                       [](const ImageRecord& r) { return r.mask_path.has_value(); }));
  }

  SUBCASE("empty metadata file") {
    write_csv(dir.path() / "meta.csv", "");
    CHECK(load_manifest(root, dir.path() / "meta.csv", DatasetSource::ham10000).record_count() == 0);
    write_csv(dir.path() / "meta.csv", "image_id,dx\n");
    CHECK(load_manifest(root, dir.path() / "meta.csv", DatasetSource::ham10000).record_count() == 0);
  }

  SUBCASE("missing image files are listed") {
    touch(root / "a.jpg");
    write_csv(dir.path() / "meta.csv", "image_id,dx\na,nv\nb,mel\nc,bcc\n");
    try {
      load_manifest(root, dir.path() / "meta.csv", DatasetSource::ham10000);
      FAIL("expected RecordError");
    } catch (const RecordError& e) {
      CHECK(e.ids() == std::vector<std::string>{"b", "c"});
    }
  }

  SUBCASE("unknown class token names the row") {
    touch(root / "a.jpg");
    touch(root / "b.jpg");
    write_csv(dir.path() / "meta.csv", "image_id,dx\na,nv\nb,melanoma\n");
    try {
      load_manifest(root, dir.path() / "meta.csv", DatasetSource::ham10000);
      FAIL("expected failure");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("row 3") != std::string::npos);
      CHECK(msg.find("melanoma") != std::string::npos);
    }
  }

  SUBCASE("duplicate ids are rejected") {
    touch(root / "a.jpg");
    write_csv(dir.path() / "meta.csv", "image_id,dx\na,nv\na,nv\n");
    CHECK_THROWS(load_manifest(root, dir.path() / "meta.csv", DatasetSource::ham10000));
  }

  SUBCASE("ISIC-2018 records need a ground-truth mask") {
    touch(root / "ISIC_0000000.jpg");
    touch(root / "ISIC_0000001.jpg");
    touch(root / "ISIC_0000000_segmentation.png");
    write_csv(dir.path() / "meta.csv", "image_id\nISIC_0000000\nISIC_0000001\n");
    try {
      load_manifest(root, dir.path() / "meta.csv", DatasetSource::isic2018);
      FAIL("expected RecordError");
    } catch (const RecordError& e) {
      CHECK(e.ids() == std::vector<std::string>{"ISIC_0000001"});
    }
    touch(root / "ISIC_0000001_segmentation.png");
    const auto m = load_manifest(root, dir.path() / "meta.csv", DatasetSource::isic2018);
    CHECK(m.record_count() == 2);
    CHECK(m.records[1].mask_path == root / "ISIC_0000001_segmentation.png");
    CHECK_FALSE(m.records[0].base_class.has_value());
  }

  SUBCASE("decode verification catches grey images") {
    cv::imwrite((root / "rgb.png").string(), cv::Mat3b(4, 4, cv::Vec3b(1, 2, 3)));
    cv::imwrite((root / "grey.png").string(), cv::Mat1b(4, 4, uchar{9}));
    write_csv(dir.path() / "meta.csv", "image_id,dx\nrgb,nv\ngrey,nv\n");
    LoadOptions opt;
    opt.verify_decode = true;
    try {
      load_manifest(root, dir.path() / "meta.csv", DatasetSource::custom, opt);
      FAIL("expected RecordError");
    } catch (const RecordError& e) {
      CHECK(e.ids() == std::vector<std::string>{"grey"});
    }
  }
}

TEST_CASE("manifest JSON round trip") {
  auto m = apply_grouping(synthetic_manifest({{LesionClass::mel, 3}, {LesionClass::nv, 2}}),
                          TaskGrouping::make(TaskId::mel_vs_nv));
  m.records[0].qc_status = QcStatus::rejected;
  m.records[1].mask_path = "masks/x_mask.png";
  const auto back = manifest_from_json(to_json(m));
  CHECK(to_json(back).dump() == to_json(m).dump());

  auto j = to_json(m);
  j["record_count"] = 17;
  CHECK_THROWS(manifest_from_json(j));
}

TEST_CASE("largest remainder apportionment") {
  CHECK(largest_remainder(10, {0.5, 0.5}) == std::vector<std::size_t>{5, 5});
  CHECK(largest_remainder(3, {0.5, 0.5}) == std::vector<std::size_t>{2, 1});  // tie -> lower index
  CHECK(largest_remainder(262, {0.70, 0.13, 0.17}) == std::vector<std::size_t>{183, 34, 45});
  CHECK(largest_remainder(0, {0.7, 0.3}) == std::vector<std::size_t>{0, 0});
}

TEST_CASE("holdout split on the 7-class post-QC manifest") {
  const auto m = apply_grouping(synthetic_manifest(kPostQcCounts), TaskGrouping::make(TaskId::seven_class));
  const auto plan = make_holdout_split(m, {0.70, 0.13, 0.17}, 7);
  CHECK(plan.train_ids.size() == 6467);
  CHECK(plan.val_ids.size() == 1200);
  CHECK(plan.test_ids.size() == 1571);
  check_partition({plan.train_ids, plan.val_ids, plan.test_ids}, m);

  // Stratification: per class and partition within one record of n*ratio.
  const auto label = label_of(m);
  const std::vector<double> ratios = {0.70, 0.13, 0.17};
  const std::vector<const std::vector<std::string>*> parts = {&plan.train_ids, &plan.val_ids, &plan.test_ids};
  for (const auto& [cls, n] : kPostQcCounts) {
    for (std::size_t p = 0; p < 3; ++p) {
      const auto got = std::count_if(parts[p]->begin(), parts[p]->end(),
                                     [&](const std::string& id) { return label.at(id) == static_cast<int>(cls); });
      CHECK(std::abs(static_cast<double>(got) - static_cast<double>(n) * ratios[p]) <= 1.0);
    }
  }
}

TEST_CASE("holdout split edge cases") {
  const auto m = synthetic_manifest({{LesionClass::mel, 40}, {LesionClass::nv, 60}});

  SUBCASE("identity ratios") {
    const auto plan = make_holdout_split(m, {1.0, 0.0, 0.0}, 1);
    CHECK(plan.train_ids.size() == 100);
    CHECK(plan.val_ids.empty());
    CHECK(plan.test_ids.empty());
  }

  SUBCASE("determinism and seed sensitivity") {
    const auto a = make_holdout_split(m, {0.6, 0.2, 0.2}, 11);
    const auto b = make_holdout_split(m, {0.6, 0.2, 0.2}, 11);
    const auto c = make_holdout_split(m, {0.6, 0.2, 0.2}, 12);
    CHECK(to_json(a).dump() == to_json(b).dump());
    CHECK(a.test_ids != c.test_ids);
    CHECK(a.test_ids.size() == c.test_ids.size());
    CHECK(a.val_ids.size() == c.val_ids.size());
  }

  SUBCASE("manifest order does not matter") {
    auto reversed = m;
    std::reverse(reversed.records.begin(), reversed.records.end());
    CHECK(to_json(make_holdout_split(m, {0.6, 0.2, 0.2}, 3)).dump() ==
          to_json(make_holdout_split(reversed, {0.6, 0.2, 0.2}, 3)).dump());
  }

  SUBCASE("invalid ratios") {
    CHECK_THROWS_AS(make_holdout_split(m, {0.6, 0.2, 0.3}, 1), std::invalid_argument);
    CHECK_THROWS_AS(make_holdout_split(m, {1.2, -0.2, 0.0}, 1), std::invalid_argument);
  }

  SUBCASE("tiny strata still split without failing") {
    const auto tiny = synthetic_manifest({{LesionClass::df, 2}});
    const auto plan = make_holdout_split(tiny, {0.7, 0.13, 0.17}, 1);
    CHECK(plan.train_ids.size() + plan.val_ids.size() + plan.test_ids.size() == 2);
  }

  SUBCASE("JSON round trip") {
    const auto plan = make_holdout_split(m, {0.6, 0.2, 0.2}, 5);
    CHECK(to_json(split_plan_from_json(to_json(plan))).dump() == to_json(plan).dump());
  }
}

TEST_CASE("nested holdout reproduces the ISIC-2018 category sizes") {
  const auto isic = lesion::testing::unlabelled_manifest(2594);
  const auto cat1 = make_holdout_split(isic, {0.70, 0.10, 0.20}, 1, SplitMode::nested_holdout);
  CHECK(cat1.train_ids.size() == 1867);
  CHECK(cat1.val_ids.size() == 208);
  CHECK(cat1.test_ids.size() == 519);
  check_partition({cat1.train_ids, cat1.val_ids, cat1.test_ids}, isic);

  // The flat largest-remainder reading gives different sizes on the same ratios.
  const auto flat = make_holdout_split(isic, {0.70, 0.10, 0.20}, 1);
  CHECK(flat.train_ids.size() == 1816);
  CHECK(flat.val_ids.size() == 259);
  CHECK(flat.test_ids.size() == 519);
}

TEST_CASE("stratified 5-fold on the cancer task") {
  const auto m = apply_grouping(synthetic_manifest(kPostQcCounts), TaskGrouping::make(TaskId::cancer_vs_noncancer));
  const auto plan = make_folds(m, 5, 42);
  REQUIRE(plan.k() == 5);
  std::vector<std::size_t> sizes;
  for (const auto& f : plan.fold_test_ids) sizes.push_back(f.size());
  CHECK(sizes == std::vector<std::size_t>{1848, 1848, 1848, 1847, 1847});
  for (std::size_t f = 0; f < 5; ++f) {
    const auto train = plan.train_ids(f);
    CHECK((train.size() == 7390 || train.size() == 7391));
    std::vector<std::string> overlap;
    std::set_intersection(train.begin(), train.end(), plan.fold_test_ids[f].begin(),
                          plan.fold_test_ids[f].end(), std::back_inserter(overlap));
    CHECK(overlap.empty());
  }
  check_partition(plan.fold_test_ids, m);
}

TEST_CASE("fold sizes for the other binary tasks") {
  const auto base = synthetic_manifest(kPostQcCounts);
  auto train_sizes = [&](TaskId t) {
    const auto plan = make_folds(apply_grouping(base, TaskGrouping::make(t)), 5, 1);
    std::set<std::size_t> s;
    for (std::size_t f = 0; f < 5; ++f) s.insert(plan.train_ids(f).size());
    return s;
  };
  CHECK(train_sizes(TaskId::mel_vs_nv) == std::set<std::size_t>{5997, 5998});
  CHECK(train_sizes(TaskId::benign_vs_malignant) == std::set<std::size_t>{1392, 1393});
  CHECK(train_sizes(TaskId::melanocytic_vs_non) == std::set<std::size_t>{7390, 7391});
}

TEST_CASE("fold edge cases") {
  const auto four = synthetic_manifest({{LesionClass::nv, 4}});
  const auto plan = make_folds(four, 2, 9);
  CHECK(plan.fold_test_ids[0].size() == 2);
  CHECK(plan.fold_test_ids[1].size() == 2);
  CHECK_THROWS_AS(make_folds(four, 5, 9), std::invalid_argument);
  CHECK_THROWS_AS(make_folds(four, 1, 9), std::invalid_argument);

  // Fewer records than folds in one stratum only warns.
  const auto skewed = synthetic_manifest({{LesionClass::nv, 20}, {LesionClass::df, 2}});
  CHECK_NOTHROW(make_folds(skewed, 5, 9));

  const auto json_a = to_json(make_folds(skewed, 5, 9)).dump();
  CHECK(json_a == to_json(make_folds(skewed, 5, 9)).dump());
  CHECK(to_json(fold_plan_from_json(nlohmann::json::parse(json_a))).dump() == json_a);
}

TEST_CASE("property: random manifests partition and stratify") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    std::map<LesionClass, std::size_t> counts;
    for (auto c : kAllClasses)
      if (rng() % 3 != 0) counts[c] = 1 + rng() % 60;
    if (counts.empty()) counts[LesionClass::nv] = 5;
    const auto m = synthetic_manifest(counts);
    const auto label = label_of(m);
    const std::size_t k = 2 + rng() % 6;
    if (k > m.record_count()) continue;
    const auto folds = make_folds(m, k, rng());
    check_partition(folds.fold_test_ids, m);

    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& f : folds.fold_test_ids) {
      lo = std::min(lo, f.size());
      hi = std::max(hi, f.size());
    }
    CHECK(hi - lo <= 1);
    for (const auto& [cls, n] : counts) {
      std::size_t clo = SIZE_MAX, chi = 0;
      for (const auto& f : folds.fold_test_ids) {
        const auto c = static_cast<std::size_t>(std::count_if(
            f.begin(), f.end(), [&](const std::string& id) { return label.at(id) == static_cast<int>(cls); }));
        clo = std::min(clo, c);
        chi = std::max(chi, c);
      }
      CHECK(chi - clo <= 1);
    }

    const double a = 0.05 + 0.9 * static_cast<double>(rng() % 1000) / 1000.0;
    const double b = (1.0 - a) * static_cast<double>(rng() % 1000) / 1000.0;
    const SplitRatios ratios{a, b, 1.0 - a - b};
    const auto split = make_holdout_split(m, ratios, rng());
    check_partition({split.train_ids, split.val_ids, split.test_ids}, m);
  }
}
