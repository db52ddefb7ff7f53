#include "lesion/fixture.hpp"

#include <array>
#include <cstdio>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "lesion/fsutil.hpp"
#include "lesion/mask.hpp"
#include "lesion/synthetic.hpp"

namespace lesion {

namespace fs = std::filesystem;

namespace {

void write_png(const fs::path& path, const cv::Mat& img) {
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

std::string fixture_id(int serial) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ISIC_%07d", serial);
  return buf;
}

}  // namespace

fs::path write_fixture(const fs::path& dir, const FixtureSpec& spec) {
  if (spec.images < 7) throw std::invalid_argument("fixture needs at least one image per class");
  const auto isic = dir / "isic2018";
  const auto ham = dir / "ham10000";
  fs::create_directories(isic / "images");
  fs::create_directories(isic / "masks");
  fs::create_directories(ham / "images");

  std::string isic_csv = "image_id\n";
  std::string ham_csv = "image_id,lesion_id,dx\n";
  for (int i = 0; i < spec.images; ++i) {
    // Classes cycle in enum order.
    const auto cls = kAllClasses[static_cast<std::size_t>(i) % kAllClasses.size()];
    const auto seed = spec.seed * 100003 + static_cast<std::uint64_t>(i);

    const auto seg = synthetic_lesion(spec.height, spec.width, cls, seed);
    const auto seg_id = fixture_id(i);
    write_png(isic / "images" / (seg_id + ".png"), seg.image);
    save_mask_png(seg.mask, isic / "masks" / (seg_id + "_segmentation.png"));
    isic_csv += seg_id + "\n";

    const auto labelled = synthetic_lesion(spec.height, spec.width, cls, seed + 7919);
    const auto labelledid = fixture_id(10000 + i);
    write_png(ham / "images" / (labelledid + ".png"), labelled.image);
    ham_csv += labelledid + ",HAM_" + std::to_string(i) + "," + std::string(to_string(cls)) + "\n";
  }
  write_file_atomic(isic / "metadata.csv", isic_csv);
  write_file_atomic(ham / "metadata.csv", ham_csv);

  const nlohmann::json config = {
      {"datasets",
       {{"isic2018",
         {{"root", "isic2018/images"},
          {"metadata", "isic2018/metadata.csv"},
          {"mask_root", "isic2018/masks"}}},
        {"ham10000", {{"root", "ham10000/images"}, {"metadata", "ham10000/metadata.csv"}}}}},
      {"task", "cancer_vs_noncancer"},
      {"seed", 42},
      {"out", "run"},
      {"folds", 5},
      {"segmenter",
       {{"input_height", 64}, {"input_width", 96}, {"depth", 3}, {"primary_filters", 8}}},
      {"schedule", {{"max_epochs", 20}, {"batch_size", 4}, {"plateau_patience", 5}}},
      {"classifier",
       {{"input_size", 64}, {"epochs", 2}, {"batch_size", 8}, {"allow_random_init", true}}}};
  const auto path = dir / "pipeline.json";
  write_file_atomic(path, config.dump(2) + "\n");
  return path;
}

}  // namespace lesion
