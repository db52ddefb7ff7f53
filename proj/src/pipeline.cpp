#include "lesion/pipeline.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lesion/classifier.hpp"
#include "lesion/digest.hpp"
#include "lesion/error.hpp"
#include "lesion/fsutil.hpp"
#include "lesion/log_text.hpp"
#include "lesion/report.hpp"
#include "lesion/segmentation.hpp"

extern char** environ;

namespace lesion {

using json = nlohmann::json;

namespace {

std::string digest_of(const json& j) { return sha256_hex(j.dump()); }

std::string abbrev(const std::string& digest) { return digest.substr(0, 12); }

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(p.string() + " is not valid JSON: " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

/// Digest embedded in a JSON artifact, if the file exists and carries one.
std::optional<std::string> stamped_digest(const fs::path& p) {
  if (!fs::exists(p)) return std::nullopt;
  try {
    const auto j = read_json(p);
    if (j.contains("config_digest") && j.at("config_digest").is_string())
      return j.at("config_digest").get<std::string>();
  } catch (const std::exception&) {
    // Unreadable counts as stale.
  }
  return std::nullopt;
}

bool up_to_date(const fs::path& p, const std::string& digest) {
  const auto d = stamped_digest(p);
  return d && *d == digest;
}

/// Loads an upstream artifact, refusing it when missing or built under a
/// different digest.
json require(const fs::path& p, const std::string& digest, const std::string& stage,
             const std::string& what) {
  if (!fs::exists(p))
    throw PreconditionError(stage, what + " not found at " + p.string() + "; run `lesion " +
                                       stage + "` first");
  const auto j = read_json(p);
  const auto found = j.value("config_digest", std::string());
  if (found != digest)
    throw PreconditionError(stage, what + " at " + p.string() + " is stale (digest " +
                                       abbrev(found) + ", current config expects " +
                                       abbrev(digest) + "); rerun `lesion " + stage + "`");
  return j;
}

cv::Mat3b read_image(const fs::path& p) {
  cv::Mat img = cv::imread(p.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw std::runtime_error("cannot decode image " + p.string());
  return img;
}

json ratios_json(const SplitRatios& r) { return {r.train, r.val, r.test}; }

json qc_json(const QcPolicy& q) {
  return {{"min_area_fraction", q.min_area_fraction},
          {"max_area_fraction", q.max_area_fraction},
          {"small_component_ignore_fraction", q.small_component_ignore_fraction},
          {"connectivity", static_cast<int>(q.connectivity)}};
}

std::vector<SegSample> load_seg_samples(const DatasetManifest& m,
                                        const std::vector<std::string>& ids,
                                        std::optional<cv::Size> resize_to) {
  std::vector<SegSample> out;
  std::vector<std::string> bad;
  const auto sub = subset(m, ids);
  for (const auto& r : sub.records) {
    try {
      if (!r.mask_path) throw std::runtime_error("no ground-truth mask");
      SegSample s{r.image_id, read_image(r.image_path), load_mask_png(*r.mask_path)};
      if (s.image.size() != s.mask.pixels.size())
        throw std::runtime_error("mask and image sizes differ");
      if (resize_to) {
        cv::resize(s.image, s.image, *resize_to, 0, 0, cv::INTER_LINEAR);
        cv::resize(s.mask.pixels, s.mask.pixels, *resize_to, 0, 0, cv::INTER_NEAREST);
      }
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      log_warn(cat("segmentation sample ", r.image_id, ": ", e.what()));
      bad.push_back(r.image_id);
    }
  }
  if (!bad.empty()) throw RecordError("unusable segmentation samples", bad);
  return out;
}

std::string run_digest(const std::string& stage_digest, const std::string& run) {
  return digest_of({{"train-clf", stage_digest}, {"run", run}});
}

struct CropIndex {
  std::vector<std::string> labels;
  std::map<std::string, int> label_of;
};

CropIndex crop_index(const json& index) {
  CropIndex c;
  c.labels = index.at("labels").get<std::vector<std::string>>();
  for (const auto& item : index.at("items"))
    c.label_of[item.at("image_id").get<std::string>()] = item.at("label").get<int>();
  return c;
}

std::vector<ClsSample> load_crops(const fs::path& dir, const CropIndex& index,
                                  const std::vector<std::string>& ids) {
  std::vector<ClsSample> out;
  std::vector<std::string> missing;
  for (const auto& id : ids) {
    const auto it = index.label_of.find(id);
    const auto path = dir / (id + ".png");
    if (it == index.label_of.end() || !fs::exists(path)) {
      missing.push_back(id);
      continue;
    }
    out.push_back({id, read_image(path), it->second});
  }
  if (!missing.empty())
    throw PreconditionError("preprocess", RecordError("crops missing from " + dir.string(), missing).what());
  return out;
}

void write_predictions(const fs::path& path, const std::vector<std::string>& labels,
                       const FoldPredictions& f, TaskId task, double threshold) {
  std::ostringstream csv;
  csv << "image_id,true_label,pred_label";
  for (const auto& l : labels) csv << ",p_" << l;
  csv << "\n";
  csv.precision(10);
  for (std::size_t i = 0; i < f.image_ids.size(); ++i) {
    csv << f.image_ids[i] << "," << labels[static_cast<std::size_t>(f.truth[i])] << ","
        << labels[static_cast<std::size_t>(decide_label(f.probabilities[i], task, threshold))];
    for (double p : f.probabilities[i]) csv << "," << p;
    csv << "\n";
  }
  write_file_atomic(path, csv.str());
}

json metric_summary(const json& m) {
  return {{"mean", m.at("mean")}, {"std", m.at("std")}, {"display", m.at("display")}};
}

}  // namespace

fs::path RunLayout::manifest(DatasetSource s) const {
  return root / "manifests" / (std::string(to_string(s)) + ".json");
}
fs::path RunLayout::task_plan(TaskId t) const {
  return root / "plans" / (std::string(to_string(t)) + ".json");
}
fs::path RunLayout::preprocessed(TaskId t) const { return root / "preprocessed" / to_string(t); }
fs::path RunLayout::models(TaskId t) const { return root / "models" / to_string(t); }
fs::path RunLayout::reports(TaskId t) const { return root / "reports" / to_string(t); }
fs::path RunLayout::table(const std::string& id) const { return root / "reports" / (id + ".json"); }

const std::vector<std::string>& reproducible_tables() {
  static const std::vector<std::string> tables = {"table1", "table4", "table9", "table10",
                                                  "table11"};
  return tables;
}

Pipeline::Pipeline(PipelineConfig config, RunOptions options)
    : config_(std::move(config)), options_(std::move(options)) {
  config_.validate();
  // Absolute paths throughout; fold jobs reload the effective config.
  config_.out = fs::absolute(config_.out).lexically_normal();
  for (auto* d : {&config_.isic2018, &config_.ham10000})
    if (*d) {
      (*d)->root = fs::absolute((*d)->root);
      (*d)->metadata = fs::absolute((*d)->metadata);
      if ((*d)->mask_root) (*d)->mask_root = fs::absolute(*(*d)->mask_root);
    }
  if (config_.segmenter_weights) config_.segmenter_weights = fs::absolute(*config_.segmenter_weights);
  if (options_.parallel_folds < 1) throw std::invalid_argument("--parallel-folds must be >= 1");
  layout_.root = config_.out;
}

void Pipeline::write_effective_config() const {
  write_json(layout_.effective_config(), to_json(config_));
}

const DatasetPaths& Pipeline::dataset(DatasetSource source) const {
  const auto& d = source == DatasetSource::isic2018 ? config_.isic2018 : config_.ham10000;
  if (!d)
    throw std::invalid_argument("config has no datasets." + std::string(to_string(source)) +
                                " entry");
  return *d;
}

fs::path Pipeline::segmenter_weights() const {
  return config_.segmenter_weights ? *config_.segmenter_weights
                                   : layout_.segmenter_dir() / "segmenter.pt";
}

std::vector<std::string> Pipeline::run_names(TaskId task) const {
  if (!PipelineConfig::uses_folds(task)) return {"holdout"};
  std::vector<std::string> names;
  for (int i = 0; i < config_.folds; ++i) names.push_back("fold" + std::to_string(i));
  return names;
}

// ---- digests ---------------------------------------------------------------

std::string Pipeline::ingest_digest(DatasetSource source) const {
  const auto& d = dataset(source);
  json j = {{"stage", "ingest"},
            {"source", to_string(source)},
            {"root", d.root.string()},
            {"metadata", d.metadata.string()},
            {"mask_root", d.mask_root ? json(d.mask_root->string()) : json(nullptr)},
            {"metadata_sha256", fs::exists(d.metadata) ? sha256_file(d.metadata) : "missing"}};
  return digest_of(j);
}

std::string Pipeline::isic_split_digest() const {
  return digest_of({{"stage", "split"},
                    {"manifest", ingest_digest(DatasetSource::isic2018)},
                    {"ratios", ratios_json(config_.isic_ratios)},
                    {"mode", to_string(SplitMode::nested_holdout)},
                    {"seed", config_.seed}});
}

std::string Pipeline::train_seg_digest() const {
  if (config_.segmenter_weights) {
    const auto& w = *config_.segmenter_weights;
    if (!fs::exists(w)) throw std::runtime_error("segmenter_weights " + w.string() + " does not exist");
    return digest_of({{"stage", "train-seg"}, {"weights_sha256", sha256_file(w)}});
  }
  return digest_of({{"stage", "train-seg"},
                    {"plan", isic_split_digest()},
                    {"model", config_digest(config_.segmenter, config_.schedule)},
                    {"seed", config_.seed}});
}

std::string Pipeline::segment_digest() const {
  return digest_of({{"stage", "segment"},
                    {"manifest", ingest_digest(DatasetSource::ham10000)},
                    {"segmenter", train_seg_digest()},
                    {"threshold", config_.mask_threshold},
                    {"qc", qc_json(config_.qc)}});
}

std::string Pipeline::task_split_digest(TaskId task) const {
  json j = {{"stage", "split"},
            {"masks", segment_digest()},
            {"task", to_string(task)},
            {"seed", config_.seed}};
  if (PipelineConfig::uses_folds(task))
    j["k"] = config_.folds;
  else
    j["ratios"] = ratios_json(config_.holdout_ratios);
  return digest_of(j);
}

std::string Pipeline::preprocess_digest(TaskId task) const {
  return digest_of({{"stage", "preprocess"},
                    {"masks", segment_digest()},
                    {"task", to_string(task)},
                    {"dilation", {config_.dilation.radius, config_.dilation.iterations}},
                    {"crop_size", config_.classifier_for(task).input_size}});
}

std::string Pipeline::train_clf_digest(TaskId task) const {
  return digest_of({{"stage", "train-clf"},
                    {"plan", task_split_digest(task)},
                    {"crops", preprocess_digest(task)},
                    {"model", config_digest(config_.classifier_for(task))},
                    {"seed", config_.seed}});
}

std::string Pipeline::evaluate_digest(TaskId task) const {
  return digest_of({{"stage", "evaluate"},
                    {"models", train_clf_digest(task)},
                    {"decision_threshold", config_.decision_threshold}});
}

// ---- stages ----------------------------------------------------------------

StageOutcome Pipeline::ingest() {
  StageOutcome out{"ingest", {}, 0};
  bool any = false;
  for (auto source : {DatasetSource::isic2018, DatasetSource::ham10000}) {
    const auto& entry = source == DatasetSource::isic2018 ? config_.isic2018 : config_.ham10000;
    if (!entry) continue;
    any = true;
    const auto path = layout_.manifest(source);
    const auto digest = ingest_digest(source);
    out.artifacts.push_back(path);
    if (!options_.force && up_to_date(path, digest)) {
      log_info(cat("ingest ", to_string(source), ": cache hit (", abbrev(digest), ")"));
      ++out.cache_hits;
      continue;
    }
    LoadOptions opts;
    opts.mask_root = entry->mask_root;
    const auto m = load_manifest(entry->root, entry->metadata, source, opts);
    json counts = json::object();
    for (const auto& [cls, n] : m.class_counts()) counts[std::string(to_string(cls))] = n;
    write_json(path, {{"config_digest", digest},
                      {"source", to_string(source)},
                      {"record_count", m.record_count()},
                      {"class_counts", counts},
                      {"manifest", to_json(m)}});
    log_info(cat("ingest ", to_string(source), ": ", m.record_count(), " records -> ", path.string()));
  }
  if (!any) throw std::invalid_argument("config lists no datasets to ingest");
  return out;
}

StageOutcome Pipeline::split_isic() {
  StageOutcome out{"split", {layout_.isic_plan()}, 0};
  const auto digest = isic_split_digest();
  if (!options_.force && up_to_date(layout_.isic_plan(), digest)) {
    log_info(cat("split isic2018: cache hit (", abbrev(digest), ")"));
    out.cache_hits = 1;
    return out;
  }
  const auto mj = require(layout_.manifest(DatasetSource::isic2018),
                          ingest_digest(DatasetSource::isic2018), "ingest", "isic2018 manifest");
  const auto m = manifest_from_json(mj.at("manifest"));
  const auto plan =
      make_holdout_split(m, config_.isic_ratios, config_.seed, SplitMode::nested_holdout);
  write_json(layout_.isic_plan(),
             {{"config_digest", digest},
              {"sizes",
               {{"train", plan.train_ids.size()},
                {"val", plan.val_ids.size()},
                {"test", plan.test_ids.size()}}},
              {"plan", to_json(plan)}});
  log_info(cat("split isic2018: ", plan.train_ids.size(), "/", plan.val_ids.size(), "/",
               plan.test_ids.size()));
  return out;
}

StageOutcome Pipeline::split_task(TaskId task) {
  const auto path = layout_.task_plan(task);
  StageOutcome out{"split", {path}, 0};
  const auto digest = task_split_digest(task);
  if (!options_.force && up_to_date(path, digest)) {
    log_info(cat("split ", to_string(task), ": cache hit (", abbrev(digest), ")"));
    out.cache_hits = 1;
    return out;
  }
  const auto mj = require(layout_.masked_manifest(), segment_digest(), "segment", "masked manifest");
  const auto grouped =
      apply_grouping(accepted_only(manifest_from_json(mj.at("manifest"))), TaskGrouping::make(task));
  json doc = {{"config_digest", digest}, {"task", to_string(task)}};
  if (PipelineConfig::uses_folds(task)) {
    const auto plan = make_folds(grouped, static_cast<std::size_t>(config_.folds), config_.seed);
    std::vector<std::size_t> sizes;
    for (const auto& f : plan.fold_test_ids) sizes.push_back(f.size());
    doc["protocol"] = "kfold";
    doc["sizes"] = sizes;
    doc["plan"] = to_json(plan);
    log_info(cat("split ", to_string(task), ": ", plan.k(), " folds over ", grouped.record_count(),
                 " records"));
  } else {
    const auto plan = make_holdout_split(grouped, config_.holdout_ratios, config_.seed);
    doc["protocol"] = "holdout";
    doc["sizes"] = {{"train", plan.train_ids.size()},
                    {"val", plan.val_ids.size()},
                    {"test", plan.test_ids.size()}};
    doc["plan"] = to_json(plan);
    log_info(cat("split ", to_string(task), ": ", plan.train_ids.size(), "/", plan.val_ids.size(),
                 "/", plan.test_ids.size()));
  }
  write_json(path, doc);
  return out;
}

StageOutcome Pipeline::split() {
  StageOutcome out{"split", {}, 0};
  auto absorb = [&](const StageOutcome& s) {
    out.artifacts.insert(out.artifacts.end(), s.artifacts.begin(), s.artifacts.end());
    out.cache_hits += s.cache_hits;
  };
  if (config_.isic2018) absorb(split_isic());
  if (config_.ham10000) {
    if (up_to_date(layout_.masked_manifest(), segment_digest()))
      absorb(split_task(config_.task));
    else if (!config_.isic2018)
      throw PreconditionError("segment", "the " + std::string(to_string(config_.task)) +
                                             " plan is drawn from QC-accepted records; run "
                                             "`lesion segment` first");
    else
      log_info(cat("split ", to_string(config_.task), ": waits for `lesion segment`"));
  }
  if (out.artifacts.empty() && !config_.isic2018 && !config_.ham10000)
    throw std::invalid_argument("config lists no datasets to split");
  return out;
}

StageOutcome Pipeline::train_seg() {
  const auto stamp = layout_.segmenter_dir() / "stage.json";
  if (config_.segmenter_weights) {
    train_seg_digest();  // checks the file exists
    log_info(cat("train-seg: using configured weights ", config_.segmenter_weights->string()));
    return {"train-seg", {*config_.segmenter_weights}, 1};
  }
  StageOutcome out{"train-seg", {stamp}, 0};
  const auto digest = train_seg_digest();
  if (!options_.force && up_to_date(stamp, digest) && fs::exists(segmenter_weights())) {
    log_info(cat("train-seg: cache hit (", abbrev(digest), ")"));
    out.cache_hits = 1;
    return out;
  }
  const auto pj = require(layout_.isic_plan(), isic_split_digest(), "split", "isic2018 split plan");
  const auto mj = require(layout_.manifest(DatasetSource::isic2018),
                          ingest_digest(DatasetSource::isic2018), "ingest", "isic2018 manifest");
  const auto m = manifest_from_json(mj.at("manifest"));
  const auto plan = split_plan_from_json(pj.at("plan"));
  const cv::Size size(config_.segmenter.input_width, config_.segmenter.input_height);

  SegTrainResult trained;
  {
    const auto train = load_seg_samples(m, plan.train_ids, size);
    const auto val = load_seg_samples(m, plan.val_ids, size);
    log_info(cat("train-seg: ", train.size(), " train / ", val.size(), " val images"));
    trained = train_segmenter(train, val, config_.segmenter, config_.schedule, config_.seed,
                              layout_.segmenter_dir());
  }

  json test = nullptr;
  if (!plan.test_ids.empty()) {
    auto model = Segmenter::load(trained.checkpoint.weights_path);
    SegmentationReport total;
    for (std::size_t start = 0; start < plan.test_ids.size(); start += 32) {
      const auto end = std::min(plan.test_ids.size(), start + 32);
      const std::vector<std::string> chunk(plan.test_ids.begin() + static_cast<long>(start),
                                           plan.test_ids.begin() + static_cast<long>(end));
      const auto r = evaluate_segmenter(model, load_seg_samples(m, chunk, std::nullopt));
      const double n = static_cast<double>(r.images);
      total.images += r.images;
      total.pixel_accuracy += r.pixel_accuracy * n;
      total.dice += r.dice * n;
      total.iou += r.iou * n;
    }
    const double n = static_cast<double>(total.images);
    test = {{"images", total.images},
            {"pixel_accuracy", total.pixel_accuracy / n},
            {"dice", total.dice / n},
            {"iou", total.iou / n}};
    log_info(cat("train-seg: test pixel accuracy ", total.pixel_accuracy / n, ", dice ",
                 total.dice / n));
  }
  write_json(stamp, {{"config_digest", digest},
                     {"weights", trained.checkpoint.weights_path.filename().string()},
                     {"weights_sha256", sha256_file(trained.checkpoint.weights_path)},
                     {"epoch", trained.checkpoint.epoch},
                     {"monitored_value", trained.checkpoint.monitored_value},
                     {"epochs_run", trained.history.epochs.size()},
                     {"test", test}});
  return out;
}

StageOutcome Pipeline::segment() {
  StageOutcome out{"segment", {layout_.masked_manifest(), layout_.qc_summary()}, 0};
  const auto digest = segment_digest();
  if (!options_.force && up_to_date(layout_.masked_manifest(), digest) &&
      up_to_date(layout_.qc_summary(), digest)) {
    log_info(cat("segment: cache hit (", abbrev(digest), ")"));
    out.cache_hits = 2;
    return out;
  }
  const auto mj = require(layout_.manifest(DatasetSource::ham10000),
                          ingest_digest(DatasetSource::ham10000), "ingest", "ham10000 manifest");
  if (!config_.segmenter_weights)
    require(layout_.segmenter_dir() / "stage.json", train_seg_digest(), "train-seg",
            "segmenter checkpoint");
  auto model = Segmenter::load(segmenter_weights());
  auto manifest = manifest_from_json(mj.at("manifest"));
  fs::create_directories(layout_.masks_dir());

  std::vector<std::string> failed;
  std::map<std::string, std::size_t> reasons;
  auto finish = [&](ImageRecord& r, const cv::Mat1f& prob) {
    const auto mask = binarize(prob, config_.mask_threshold);
    const auto verdict = qc_mask(mask, config_.qc);
    const auto path = layout_.masks_dir() / (r.image_id + "_mask.png");
    save_mask_png(mask, path);
    r.mask_path = path;
    r.qc_status = verdict.status;
    ++reasons[std::string(to_string(verdict.reason))];
  };
  auto fail = [&](ImageRecord& r, const std::string& why) {
    log_warn(cat("segment ", r.image_id, ": ", why));
    r.qc_status = QcStatus::rejected;
    r.mask_path.reset();
    failed.push_back(r.image_id);
  };

  constexpr std::size_t kChunk = 8;
  for (std::size_t start = 0; start < manifest.records.size(); start += kChunk) {
    std::vector<ImageRecord*> batch;
    std::vector<cv::Mat3b> images;
    for (std::size_t i = start; i < std::min(start + kChunk, manifest.records.size()); ++i) {
      auto& r = manifest.records[i];
      try {
        images.push_back(read_image(r.image_path));
        batch.push_back(&r);
      } catch (const std::exception& e) {
        fail(r, e.what());
      }
    }
    if (images.empty()) continue;
    try {
      const auto maps = model.predict(images);
      for (std::size_t k = 0; k < batch.size(); ++k) finish(*batch[k], maps[k]);
    } catch (const std::exception&) {
      // Per-image fallback.
      for (std::size_t k = 0; k < batch.size(); ++k) {
        try {
          finish(*batch[k], model.predict(images[k]));
        } catch (const std::exception& e) {
          fail(*batch[k], e.what());
        }
      }
    }
    if ((start / kChunk) % 50 == 0)
      log_info(cat("segment: ", std::min(start + kChunk, manifest.records.size()), "/",
                   manifest.records.size()));
  }

  // Removal table per base class.
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_class;  // before, after
  for (const auto& r : manifest.records) {
    auto& [before, after] =
        by_class[r.base_class ? std::string(to_string(*r.base_class)) : std::string("unlabelled")];
    ++before;
    after += r.qc_status == QcStatus::accepted;
  }
  const double total_before = static_cast<double>(manifest.records.size());
  auto row = [&](const std::string& name, std::size_t before, std::size_t after) {
    const auto removed = before - after;
    return json{{"class", name},
                {"before", before},
                {"after", after},
                {"removed", removed},
                {"removed_rate", before ? static_cast<double>(removed) / static_cast<double>(before) : 0.0},
                {"removed_percent_of_total",
                 total_before > 0 ? 100.0 * static_cast<double>(removed) / total_before : 0.0}};
  };
  json rows = json::array();
  std::size_t before_sum = 0, after_sum = 0;
  for (const auto& [name, counts] : by_class) {
    rows.push_back(row(name, counts.first, counts.second));
    before_sum += counts.first;
    after_sum += counts.second;
  }
  json summary = {{"config_digest", digest},
                  {"classes", rows},
                  {"total", row("total", before_sum, after_sum)},
                  {"reasons", reasons},
                  {"failed", failed}};
  write_json(layout_.qc_summary(), summary);
  write_json(layout_.masked_manifest(), {{"config_digest", digest}, {"manifest", to_json(manifest)}});
  log_info(cat("segment: ", after_sum, " of ", before_sum, " accepted, ", failed.size(), " failed"));
  return out;
}

StageOutcome Pipeline::preprocess(TaskId task) {
  const auto dir = layout_.preprocessed(task);
  const auto index_path = dir / "index.json";
  StageOutcome out{"preprocess", {index_path}, 0};
  const auto digest = preprocess_digest(task);
  if (!options_.force && up_to_date(index_path, digest)) {
    log_info(cat("preprocess ", to_string(task), ": cache hit (", abbrev(digest), ")"));
    out.cache_hits = 1;
    return out;
  }
  const auto mj = require(layout_.masked_manifest(), segment_digest(), "segment", "masked manifest");
  const auto grouping = TaskGrouping::make(task);
  const auto records =
      apply_grouping(accepted_only(manifest_from_json(mj.at("manifest"))), grouping);
  const int size = config_.classifier_for(task).input_size;

  fs::remove_all(dir);
  fs::create_directories(dir);
  json items = json::array();
  std::vector<std::string> bad;
  for (const auto& r : records.records) {
    try {
      if (!r.mask_path) throw std::runtime_error("accepted record without a mask");
      const auto image = read_image(r.image_path);
      const auto mask = load_mask_png(*r.mask_path);
      const auto crop = preprocess_crop(image, mask, config_.dilation, size);
      if (!cv::imwrite((dir / (r.image_id + ".png")).string(), crop.pixels))
        throw std::runtime_error("cannot write crop");
      items.push_back({{"image_id", r.image_id},
                       {"label", *r.task_label},
                       {"base_class", to_string(*r.base_class)},
                       {"mask_digest", mask_digest(mask)},
                       {"bbox",
                        {crop.bbox.x_min, crop.bbox.y_min, crop.bbox.x_max, crop.bbox.y_max}}});
    } catch (const std::exception& e) {
      log_warn(cat("preprocess ", r.image_id, ": ", e.what()));
      bad.push_back(r.image_id);
    }
  }
  if (!bad.empty()) throw RecordError("preprocessing failed", bad);
  write_json(index_path, {{"config_digest", digest},
                          {"task", to_string(task)},
                          {"labels", grouping.labels},
                          {"crop_size", size},
                          {"items", items}});
  log_info(cat("preprocess ", to_string(task), ": ", items.size(), " crops -> ", dir.string()));
  return out;
}

void Pipeline::train_run(TaskId task, std::size_t run, const json& plan_doc, const json& index_doc) {
  const auto names = run_names(task);
  const auto cfg = config_.classifier_for(task);
  const auto index = crop_index(index_doc);
  const auto seed = config_.seed + run;
  std::vector<std::string> train_ids, val_ids, test_ids;
  if (PipelineConfig::uses_folds(task)) {
    const auto folds = fold_plan_from_json(plan_doc.at("plan"));
    test_ids = folds.fold_test_ids.at(run);
    const auto pool = folds.train_ids(run);
    if (cfg.val_fraction > 0.0) {
      // Inner split of the fold's training ids for checkpoint selection.
      DatasetManifest m;
      m.task = task;
      for (const auto& id : pool) {
        ImageRecord r;
        r.image_id = id;
        r.task_label = index.label_of.at(id);
        m.records.push_back(std::move(r));
      }
      const auto inner =
          make_holdout_split(m, {1.0 - cfg.val_fraction, cfg.val_fraction, 0.0}, seed + 1);
      train_ids = inner.train_ids;
      val_ids = inner.val_ids;
    } else {
      train_ids = pool;
    }
  } else {
    const auto plan = split_plan_from_json(plan_doc.at("plan"));
    train_ids = plan.train_ids;
    val_ids = plan.val_ids;
    test_ids = plan.test_ids;
  }

  const auto dir = layout_.models(task) / names[run];
  log_info(cat("train-clf ", to_string(task), " ", names[run], ": ", train_ids.size(), " train / ",
               val_ids.size(), " val / ", test_ids.size(), " test"));
  ClsTrainResult result;
  {
    const auto crops_dir = layout_.preprocessed(task);
    const auto train = load_crops(crops_dir, index, train_ids);
    const auto val = load_crops(crops_dir, index, val_ids);
    std::optional<int> fold;
    if (PipelineConfig::uses_folds(task)) fold = static_cast<int>(run);
    result = train_classifier(train, val, cfg, seed, dir, fold);
  }
  write_json(dir / "stage.json", {{"config_digest", run_digest(train_clf_digest(task), names[run])},
                                  {"run", names[run]},
                                  {"task", to_string(task)},
                                  {"best_epoch", result.model.best_epoch},
                                  {"best_val_metric", result.model.best_val_metric},
                                  {"train_ids", train_ids},
                                  {"val_ids", val_ids},
                                  {"test_ids", test_ids}});
}

void Pipeline::spawn_fold_jobs(TaskId task, const std::vector<std::size_t>& runs) {
  write_effective_config();
  const auto exe =
      options_.executable.empty() ? fs::read_symlink("/proc/self/exe") : options_.executable;
  std::map<pid_t, std::size_t> running;
  std::vector<std::string> failures;
  std::size_t next = 0;
  while (next < runs.size() || !running.empty()) {
    while (next < runs.size() && running.size() < static_cast<std::size_t>(options_.parallel_folds)) {
      std::vector<std::string> args = {exe.string(),
                                       "train-clf",
                                       "--config",
                                       layout_.effective_config().string(),
                                       "--task",
                                       std::string(to_string(task)),
                                       "--fold",
                                       std::to_string(runs[next])};
      if (options_.force) args.push_back("--force");
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      argv.push_back(nullptr);
      pid_t pid = 0;
      if (const int rc = posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv.data(), environ); rc != 0)
        throw std::runtime_error("cannot launch fold job: " + std::string(std::strerror(rc)));
      log_info(cat("train-clf: fold job ", runs[next], " started (pid ", pid, ")"));
      running[pid] = runs[next++];
    }
    int status = 0;
    const pid_t done = waitpid(-1, &status, 0);
    if (done < 0) throw std::runtime_error("waitpid failed while fold jobs were running");
    const auto it = running.find(done);
    if (it == running.end()) continue;
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
      failures.push_back("fold" + std::to_string(it->second) + " (status " +
                         std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1) + ")");
    running.erase(it);
  }
  if (!failures.empty()) {
    std::string list;
    for (const auto& f : failures) list += (list.empty() ? "" : ", ") + f;
    throw std::runtime_error("fold jobs failed: " + list);
  }
}

StageOutcome Pipeline::train_clf(TaskId task) {
  const auto names = run_names(task);
  const auto digest = train_clf_digest(task);
  const auto plan = require(layout_.task_plan(task), task_split_digest(task), "split",
                            std::string(to_string(task)) + " plan");
  const auto index = require(layout_.preprocessed(task) / "index.json", preprocess_digest(task),
                             "preprocess", std::string(to_string(task)) + " crop cache");
  if (options_.only_fold &&
      (*options_.only_fold < 0 || static_cast<std::size_t>(*options_.only_fold) >= names.size()))
    throw std::invalid_argument("--fold " + std::to_string(*options_.only_fold) + " is outside 0.." +
                                std::to_string(names.size() - 1));

  StageOutcome out{"train-clf", {}, 0};
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (options_.only_fold && static_cast<std::size_t>(*options_.only_fold) != i) continue;
    const auto dir = layout_.models(task) / names[i];
    out.artifacts.push_back(dir / "stage.json");
    if (!options_.force && up_to_date(dir / "stage.json", run_digest(digest, names[i])) &&
        fs::exists(dir / "model.pt")) {
      log_info(cat("train-clf ", to_string(task), " ", names[i], ": cache hit"));
      ++out.cache_hits;
    } else {
      todo.push_back(i);
    }
  }
  if (options_.parallel_folds > 1 && todo.size() > 1 && !options_.only_fold)
    spawn_fold_jobs(task, todo);
  else
    for (auto i : todo) train_run(task, i, plan, index);
  if (options_.only_fold) return out;

  json runs = json::array();
  for (const auto& name : names) {
    const auto s = read_json(layout_.models(task) / name / "stage.json");
    runs.push_back({{"run", name},
                    {"best_epoch", s.at("best_epoch")},
                    {"best_val_metric", s.at("best_val_metric")}});
  }
  write_json(layout_.models(task) / "stage.json",
             {{"config_digest", digest},
              {"task", to_string(task)},
              {"classifier_digest", config_digest(config_.classifier_for(task))},
              {"runs", runs}});
  return out;
}

StageOutcome Pipeline::evaluate(TaskId task) {
  const auto dir = layout_.reports(task);
  const auto report_path = dir / "report.json";
  StageOutcome out{"evaluate", {report_path}, 0};
  const auto task_name = std::string(to_string(task));
  const auto stamp = layout_.models(task) / "stage.json";
  if (!fs::exists(stamp))
    throw PreconditionError("train-clf", "no trained model for task " + task_name + " under " +
                                             layout_.models(task).string() +
                                             "; run `lesion train-clf --task " + task_name +
                                             "` first");
  require(stamp, train_clf_digest(task), "train-clf", "trained models for " + task_name);
  const auto digest = evaluate_digest(task);
  if (!options_.force && up_to_date(report_path, digest)) {
    log_info(cat("evaluate ", task_name, ": cache hit (", abbrev(digest), ")"));
    out.cache_hits = 1;
    return out;
  }
  const auto index_doc = require(layout_.preprocessed(task) / "index.json", preprocess_digest(task),
                                 "preprocess", task_name + " crop cache");
  const auto index = crop_index(index_doc);
  const auto expected_model = config_digest(config_.classifier_for(task));

  std::vector<FoldPredictions> folds;
  for (const auto& name : run_names(task)) {
    const auto run_dir = layout_.models(task) / name;
    const auto run_stamp = require(run_dir / "stage.json", run_digest(train_clf_digest(task), name),
                                   "train-clf", task_name + " " + name + " model");
    const auto sidecar = run_dir / "model.json";
    if (!fs::exists(sidecar) || !fs::exists(run_dir / "model.pt"))
      throw PreconditionError("train-clf", "model files missing in " + run_dir.string() +
                                               "; run `lesion train-clf --task " + task_name + "`");
    const auto found = read_json(sidecar).value("config_digest", std::string());
    if (found != expected_model)
      throw PreconditionError("train-clf", "model in " + run_dir.string() +
                                               " was trained under classifier digest " +
                                               abbrev(found) + ", current config expects " +
                                               abbrev(expected_model) + "; rerun `lesion train-clf`");

    auto model = Classifier::load(run_dir / "model.pt");
    const auto test_ids = run_stamp.at("test_ids").get<std::vector<std::string>>();
    FoldPredictions f;
    for (std::size_t start = 0; start < test_ids.size(); start += 32) {
      const std::vector<std::string> chunk(
          test_ids.begin() + static_cast<long>(start),
          test_ids.begin() + static_cast<long>(std::min(test_ids.size(), start + 32)));
      const auto samples = load_crops(layout_.preprocessed(task), index, chunk);
      std::vector<cv::Mat3b> crops;
      for (const auto& s : samples) {
        crops.push_back(s.crop);
        f.image_ids.push_back(s.image_id);
        f.truth.push_back(s.label);
      }
      for (auto& row : model.predict_proba(crops)) f.probabilities.push_back(std::move(row));
    }
    fs::create_directories(dir);
    write_predictions(dir / ("predictions_" + name + ".csv"), index.labels, f, task,
                      config_.decision_threshold);
    folds.push_back(std::move(f));
  }

  const auto report =
      TaskGrouping::make(task).is_binary()
          ? build_binary_report(task_name, index.labels, 0, folds, config_.decision_threshold)
          : build_multiclass_report(task_name, index.labels, folds);
  const auto files = render_report(report, dir);
  auto doc = read_json(files.json);
  doc["config_digest"] = digest;
  write_json(files.json, doc);
  for (const auto& m : report.metrics)
    log_info(cat("evaluate ", task_name, ": ", m.metric_name, " ", m.display()));
  return out;
}

// ---- table drivers ---------------------------------------------------------

StageOutcome Pipeline::run_task(TaskId task) {
  split_task(task);
  preprocess(task);
  train_clf(task);
  return evaluate(task);
}

json Pipeline::reproduce(const std::string& table) {
  const auto& known = reproducible_tables();
  if (std::find(known.begin(), known.end(), table) == known.end())
    throw std::invalid_argument("unknown table '" + table +
                                "' (expected table1, table4, table9, table10 or table11)");
  write_effective_config();
  json doc = {{"table", table}};
  if (table == "table1") {
    ingest();
    split_isic();
    const auto plan = read_json(layout_.isic_plan());
    doc["config_digest"] = isic_split_digest();
    doc["rows"] = plan.at("sizes");
    doc["rows"]["total"] = plan.at("sizes").at("train").get<std::size_t>() +
                           plan.at("sizes").at("val").get<std::size_t>() +
                           plan.at("sizes").at("test").get<std::size_t>();
    doc["ratios"] = ratios_json(config_.isic_ratios);
  } else {
    ingest();
    if (!config_.segmenter_weights) split_isic();
    train_seg();
    segment();
    if (table == "table4") {
      auto qc = read_json(layout_.qc_summary());
      doc["config_digest"] = segment_digest();
      doc["rows"] = qc.at("classes");
      doc["total"] = qc.at("total");
      doc["failed"] = qc.at("failed");
    } else if (table == "table9") {
      json digests = json::array();
      for (TaskId t : kBinaryTasks) {
        run_task(t);
        const auto r = read_json(layout_.reports(t) / "report.json");
        json row = {{"task", to_string(t)}, {"positive_class", r.at("positive_class")}};
        for (const char* m : {"accuracy", "sensitivity", "specificity", "auc"})
          row[m] = metric_summary(r.at("metrics").at(m));
        json per_class = json::object();
        for (const auto& [cls, v] : r.at("per_class").items())
          if (v.contains("recall")) per_class[cls] = metric_summary(v.at("recall"));
        row["per_class_recall"] = per_class;
        doc["rows"].push_back(row);
        digests.push_back(evaluate_digest(t));
      }
      doc["config_digest"] = digest_of(digests);
    } else {
      run_task(TaskId::seven_class);
      const auto r = read_json(layout_.reports(TaskId::seven_class) / "report.json");
      doc["config_digest"] = evaluate_digest(TaskId::seven_class);
      if (table == "table10") {
        json rows = json::array();
        for (const auto& [cls, v] : r.at("per_class").items())
          rows.push_back({{"class", cls}, {"auc", v.contains("auc") ? v.at("auc").at("mean") : json(nullptr)}});
        doc["rows"] = rows;
        doc["auc_micro"] = r.at("metrics").at("auc_micro").at("mean");
        doc["auc_macro"] = r.at("metrics").at("auc_macro").at("mean");
      } else {
        for (const char* m : {"precision", "f1", "auc"})
          doc["rows"].push_back({{"metric", m},
                                 {"micro", r.at("metrics").at(std::string(m) + "_micro").at("mean")},
                                 {"macro", r.at("metrics").at(std::string(m) + "_macro").at("mean")}});
      }
    }
  }
  write_json(layout_.table(table), doc);
  log_info(cat("reproduce ", table, " -> ", layout_.table(table).string()));
  return doc;
}

}  // namespace lesion
