#include "lesion/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include <opencv2/imgcodecs.hpp>

#include "lesion/error.hpp"
#include "lesion/log.hpp"
#include "lesion/random.hpp"

namespace lesion {

using nlohmann::json;

std::string_view to_string(LesionClass c) {
  switch (c) {
    case LesionClass::akiec: return "akiec";
    case LesionClass::bcc: return "bcc";
    case LesionClass::bkl: return "bkl";
    case LesionClass::df: return "df";
    case LesionClass::mel: return "mel";
    case LesionClass::nv: return "nv";
    case LesionClass::vasc: return "vasc";
  }
  return "?";
}

std::optional<LesionClass> parse_lesion_class(std::string_view token) {
  for (auto c : kAllClasses)
    if (to_string(c) == token) return c;
  return std::nullopt;
}

std::string_view to_string(QcStatus s) {
  switch (s) {
    case QcStatus::pending: return "pending";
    case QcStatus::accepted: return "accepted";
    case QcStatus::rejected: return "rejected";
  }
  return "?";
}

QcStatus parse_qc_status(std::string_view token) {
  for (auto s : {QcStatus::pending, QcStatus::accepted, QcStatus::rejected})
    if (to_string(s) == token) return s;
  throw std::invalid_argument("unknown qc status '" + std::string(token) + "'");
}

std::string_view to_string(DatasetSource s) {
  switch (s) {
    case DatasetSource::isic2018: return "isic2018";
    case DatasetSource::ham10000: return "ham10000";
    case DatasetSource::custom: return "custom";
  }
  return "?";
}

DatasetSource parse_dataset_source(std::string_view token) {
  for (auto s : {DatasetSource::isic2018, DatasetSource::ham10000, DatasetSource::custom})
    if (to_string(s) == token) return s;
  throw std::invalid_argument("unknown dataset source '" + std::string(token) + "'");
}

std::string_view to_string(TaskId t) {
  switch (t) {
    case TaskId::melanocytic_vs_non: return "melanocytic_vs_non";
    case TaskId::mel_vs_nv: return "mel_vs_nv";
    case TaskId::benign_vs_malignant: return "benign_vs_malignant";
    case TaskId::cancer_vs_noncancer: return "cancer_vs_noncancer";
    case TaskId::seven_class: return "seven_class";
  }
  return "?";
}

TaskId parse_task_id(std::string_view token) {
  for (auto t : {TaskId::melanocytic_vs_non, TaskId::mel_vs_nv, TaskId::benign_vs_malignant,
                 TaskId::cancer_vs_noncancer, TaskId::seven_class})
    if (to_string(t) == token) return t;
  throw std::invalid_argument("unknown task '" + std::string(token) + "'");
}

std::string_view to_string(SplitMode m) {
  return m == SplitMode::largest_remainder ? "largest_remainder" : "nested_holdout";
}

SplitMode parse_split_mode(std::string_view token) {
  if (token == "largest_remainder") return SplitMode::largest_remainder;
  if (token == "nested_holdout") return SplitMode::nested_holdout;
  throw std::invalid_argument("unknown split mode '" + std::string(token) + "'");
}

TaskGrouping TaskGrouping::make(TaskId id) {
  using C = LesionClass;
  TaskGrouping g;
  g.id = id;
  auto binary = [&](std::string pos, std::vector<C> pos_classes, std::string neg,
                    std::vector<C> neg_classes) {
    g.labels = {std::move(pos), std::move(neg)};
    for (auto c : pos_classes) g.class_map[c] = 0;
    for (auto c : neg_classes) g.class_map[c] = 1;
    g.positive_label = 0;
  };
  switch (id) {
    case TaskId::melanocytic_vs_non:
      binary("melanocytic", {C::mel, C::nv}, "non_melanocytic",
             {C::akiec, C::bcc, C::bkl, C::df, C::vasc});
      break;
    case TaskId::mel_vs_nv:
      binary("mel", {C::mel}, "nv", {C::nv});
      break;
    case TaskId::benign_vs_malignant:
      binary("benign", {C::bkl, C::df, C::vasc}, "malignant", {C::akiec, C::bcc});
      break;
    case TaskId::cancer_vs_noncancer:
      binary("cancerous", {C::akiec, C::bcc, C::mel}, "non_cancerous",
             {C::bkl, C::df, C::nv, C::vasc});
      break;
    case TaskId::seven_class:
      for (auto c : kAllClasses) {
        g.class_map[c] = static_cast<int>(g.labels.size());
        g.labels.emplace_back(to_string(c));
      }
      break;
  }
  return g;
}

std::map<LesionClass, std::size_t> DatasetManifest::class_counts() const {
  std::map<LesionClass, std::size_t> counts;
  for (const auto& r : records)
    if (r.base_class) ++counts[*r.base_class];
  return counts;
}

std::vector<std::size_t> DatasetManifest::label_counts() const {
  if (!task) return {};
  std::vector<std::size_t> counts(TaskGrouping::make(*task).num_labels(), 0);
  for (const auto& r : records)
    if (r.task_label) ++counts.at(static_cast<std::size_t>(*r.task_label));
  return counts;
}

const ImageRecord* DatasetManifest::find(std::string_view image_id) const {
  for (const auto& r : records)
    if (r.image_id == image_id) return &r;
  return nullptr;
}

json to_json(const ImageRecord& r) {
  json j;
  j["image_id"] = r.image_id;
  j["image_path"] = r.image_path.string();
  j["mask_path"] = r.mask_path ? json(r.mask_path->string()) : json(nullptr);
  j["base_class"] = r.base_class ? json(std::string(to_string(*r.base_class))) : json(nullptr);
  j["qc_status"] = std::string(to_string(r.qc_status));
  j["task_label"] = r.task_label ? json(*r.task_label) : json(nullptr);
  return j;
}

ImageRecord record_from_json(const json& j) {
  ImageRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.image_path = j.at("image_path").get<std::string>();
  if (j.contains("mask_path") && !j["mask_path"].is_null())
    r.mask_path = fs::path(j["mask_path"].get<std::string>());
  if (j.contains("base_class") && !j["base_class"].is_null()) {
    auto token = j["base_class"].get<std::string>();
    r.base_class = parse_lesion_class(token);
    if (!r.base_class) throw std::runtime_error("unknown class '" + token + "' for " + r.image_id);
  }
  if (j.contains("qc_status")) r.qc_status = parse_qc_status(j["qc_status"].get<std::string>());
  if (j.contains("task_label") && !j["task_label"].is_null())
    r.task_label = j["task_label"].get<int>();
  return r;
}

json to_json(const DatasetManifest& m) {
  json j;
  j["source"] = std::string(to_string(m.source));
  j["task"] = m.task ? json(std::string(to_string(*m.task))) : json(nullptr);
  j["record_count"] = m.record_count();
  j["records"] = json::array();
  for (const auto& r : m.records) j["records"].push_back(to_json(r));
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.source = parse_dataset_source(j.at("source").get<std::string>());
  if (j.contains("task") && !j["task"].is_null())
    m.task = parse_task_id(j["task"].get<std::string>());
  for (const auto& r : j.at("records")) m.records.push_back(record_from_json(r));
  if (j.at("record_count").get<std::size_t>() != m.records.size())
    throw std::runtime_error("manifest record_count does not match its records");
  return m;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::optional<fs::path> resolve_image(const fs::path& root, const std::string& id) {
  for (const char* ext : {".jpg", ".jpeg", ".png", ".JPG", ".PNG"}) {
    auto p = root / (id + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& root, const fs::path& metadata_file,
                              DatasetSource source, const LoadOptions& options) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root not found: " + root.string());
  std::ifstream in(metadata_file);
  if (!in) throw std::runtime_error("cannot open metadata file " + metadata_file.string());

  DatasetManifest manifest;
  manifest.source = source;

  std::string line;
  if (!std::getline(in, line)) return manifest;  // empty file
  const auto header = split_csv_line(line);
  auto column = [&](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  };
  const auto id_col = column("image_id");
  if (!id_col) throw std::runtime_error(metadata_file.string() + ": missing image_id column");
  const auto dx_col = column("dx");
  const fs::path mask_root = options.mask_root.value_or(root);

  std::unordered_set<std::string> seen;
  std::vector<std::string> missing;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (*id_col >= fields.size())
      throw std::runtime_error(metadata_file.string() + " row " + std::to_string(row) +
                               ": missing image_id");
    ImageRecord r;
    r.image_id = fields[*id_col];
    if (!seen.insert(r.image_id).second)
      throw std::runtime_error(metadata_file.string() + " row " + std::to_string(row) +
                               ": duplicate image_id " + r.image_id);
    if (dx_col && *dx_col < fields.size() && !fields[*dx_col].empty()) {
      r.base_class = parse_lesion_class(fields[*dx_col]);
      if (!r.base_class)
        throw std::runtime_error(metadata_file.string() + " row " + std::to_string(row) + " (" +
                                 r.image_id + "): unknown class '" + fields[*dx_col] + "'");
    }
    auto image = resolve_image(root, r.image_id);
    if (!image) {
      missing.push_back(r.image_id);
      continue;
    }
    r.image_path = *image;
    if (source == DatasetSource::isic2018) {
      auto mask = mask_root / (r.image_id + "_segmentation.png");
      if (!fs::exists(mask)) {
        missing.push_back(r.image_id);
        continue;
      }
      r.mask_path = mask;
    }
    manifest.records.push_back(std::move(r));
  }
  if (!missing.empty()) throw RecordError("missing image or mask files", missing);

  if (options.verify_decode) {
    std::vector<std::string> bad;
    for (const auto& r : manifest.records) {
      cv::Mat img = cv::imread(r.image_path.string(), cv::IMREAD_UNCHANGED);
      if (img.empty() || img.channels() != 3) bad.push_back(r.image_id);
    }
    if (!bad.empty()) throw RecordError("images that are not 3-channel color", bad);
  }

  auto log = logger();
  log->info("loaded {} records from {}", manifest.record_count(), metadata_file.string());
  for (const auto& [cls, n] : manifest.class_counts()) log->info("  {}: {}", to_string(cls), n);
  return manifest;
}

DatasetManifest apply_grouping(const DatasetManifest& manifest, const TaskGrouping& task) {
  DatasetManifest out;
  out.source = manifest.source;
  out.task = task.id;
  for (const auto& r : manifest.records) {
    if (!r.base_class)
      throw std::invalid_argument("record " + r.image_id + " has no class label");
    auto it = task.class_map.find(*r.base_class);
    if (it == task.class_map.end()) continue;
    ImageRecord copy = r;
    copy.task_label = it->second;
    out.records.push_back(std::move(copy));
  }
  const auto counts = out.label_counts();
  for (std::size_t i = 0; i < counts.size(); ++i)
    logger()->debug("{} {}: {}", to_string(task.id), task.labels[i], counts[i]);
  return out;
}

DatasetManifest accepted_only(const DatasetManifest& manifest) {
  DatasetManifest out;
  out.source = manifest.source;
  out.task = manifest.task;
  for (const auto& r : manifest.records)
    if (r.qc_status != QcStatus::rejected) out.records.push_back(r);
  return out;
}

DatasetManifest subset(const DatasetManifest& manifest, const std::vector<std::string>& ids) {
  std::unordered_set<std::string> keep(ids.begin(), ids.end());
  DatasetManifest out;
  out.source = manifest.source;
  out.task = manifest.task;
  for (const auto& r : manifest.records)
    if (keep.contains(r.image_id)) out.records.push_back(r);
  return out;
}

std::vector<std::size_t> largest_remainder(std::size_t n, const std::vector<double>& weights) {
  std::vector<std::size_t> quota(weights.size(), 0);
  std::vector<double> remainder(weights.size(), 0.0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(n) * weights[i];
    quota[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(quota[i]);
    assigned += quota[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < n && i < order.size(); ++i, ++assigned) ++quota[order[i]];
  return quota;
}

namespace {

/// Ids grouped by stratum in stratum order, each group sorted.
std::vector<std::vector<std::string>> strata_of(const DatasetManifest& manifest) {
  std::map<int, std::vector<std::string>> by_key;
  for (const auto& r : manifest.records) {
    int key = 0;
    if (r.task_label)
      key = *r.task_label;
    else if (r.base_class)
      key = static_cast<int>(*r.base_class);
    by_key[key].push_back(r.image_id);
  }
  std::vector<std::vector<std::string>> strata;
  for (auto& [key, ids] : by_key) {
    std::sort(ids.begin(), ids.end());
    strata.push_back(std::move(ids));
  }
  return strata;
}

std::string task_name(const DatasetManifest& m) {
  return m.task ? std::string(to_string(*m.task)) : std::string("none");
}

std::size_t ceil_fraction(std::size_t n, double fraction) {
  // Guard against 0.2*2594 landing at 518.80000000000001 vs an exact integer.
  const double exact = static_cast<double>(n) * fraction;
  const double rounded = std::round(exact);
  if (std::abs(exact - rounded) < 1e-9) return static_cast<std::size_t>(rounded);
  return static_cast<std::size_t>(std::ceil(exact));
}

}  // namespace

SplitPlan make_holdout_split(const DatasetManifest& manifest, const SplitRatios& ratios,
                             std::uint64_t seed, SplitMode mode) {
  const std::vector<double> w = {ratios.train, ratios.val, ratios.test};
  for (double x : w)
    if (x < 0.0 || !std::isfinite(x)) throw std::invalid_argument("split ratios must be >= 0");
  if (std::abs(w[0] + w[1] + w[2] - 1.0) > 1e-9)
    throw std::invalid_argument("split ratios must sum to 1");

  SplitPlan plan;
  plan.task = task_name(manifest);
  plan.seed = seed;
  plan.ratios = ratios;
  plan.mode = mode;

  std::mt19937_64 rng(seed);
  for (auto& ids : strata_of(manifest)) {
    portable_shuffle(std::span<std::string>(ids), rng);
    std::vector<std::size_t> quota;
    if (mode == SplitMode::largest_remainder) {
      quota = largest_remainder(ids.size(), w);
    } else {
      const std::size_t n_test = std::min(ids.size(), ceil_fraction(ids.size(), ratios.test));
      const std::size_t rest = ids.size() - n_test;
      const std::size_t n_val = std::min(rest, ceil_fraction(rest, ratios.val));
      quota = {rest - n_val, n_val, n_test};
    }
    const auto nonzero = static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double x) {
      return x > 0.0;
    }));
    if (ids.size() < nonzero)
      logger()->warn("stratum of {} records is smaller than the {} partitions it feeds", ids.size(),
                     nonzero);
    auto it = ids.begin();
    auto take = [&](std::vector<std::string>& dst, std::size_t n) {
      dst.insert(dst.end(), it, it + static_cast<std::ptrdiff_t>(n));
      it += static_cast<std::ptrdiff_t>(n);
    };
    take(plan.train_ids, quota[0]);
    take(plan.val_ids, quota[1]);
    take(plan.test_ids, quota[2]);
  }
  std::sort(plan.train_ids.begin(), plan.train_ids.end());
  std::sort(plan.val_ids.begin(), plan.val_ids.end());
  std::sort(plan.test_ids.begin(), plan.test_ids.end());
  return plan;
}

FoldPlan make_folds(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("k-fold needs k >= 2");
  if (k > manifest.record_count())
    throw std::invalid_argument("k = " + std::to_string(k) + " exceeds record count " +
                                std::to_string(manifest.record_count()));
  FoldPlan plan;
  plan.task = task_name(manifest);
  plan.seed = seed;
  plan.fold_test_ids.resize(k);

  std::mt19937_64 rng(seed);
  std::size_t cursor = 0;  // next fold to receive a remainder record
  for (auto& ids : strata_of(manifest)) {
    if (ids.size() < k)
      logger()->warn("stratum of {} records has fewer records than k = {}", ids.size(), k);
    portable_shuffle(std::span<std::string>(ids), rng);
    const std::size_t base = ids.size() / k;
    const std::size_t extra = ids.size() % k;
    std::vector<std::size_t> sizes(k, base);
    for (std::size_t e = 0; e < extra; ++e) ++sizes[(cursor + e) % k];
    cursor = (cursor + extra) % k;
    auto it = ids.begin();
    for (std::size_t f = 0; f < k; ++f) {
      auto& dst = plan.fold_test_ids[f];
      dst.insert(dst.end(), it, it + static_cast<std::ptrdiff_t>(sizes[f]));
      it += static_cast<std::ptrdiff_t>(sizes[f]);
    }
  }
  for (auto& f : plan.fold_test_ids) std::sort(f.begin(), f.end());
  return plan;
}

std::vector<std::string> FoldPlan::train_ids(std::size_t fold) const {
  std::vector<std::string> out;
  for (std::size_t f = 0; f < fold_test_ids.size(); ++f)
    if (f != fold) out.insert(out.end(), fold_test_ids[f].begin(), fold_test_ids[f].end());
  std::sort(out.begin(), out.end());
  return out;
}

json to_json(const SplitPlan& p) {
  json j;
  j["task"] = p.task;
  j["seed"] = p.seed;
  j["ratios"] = {p.ratios.train, p.ratios.val, p.ratios.test};
  j["mode"] = std::string(to_string(p.mode));
  j["partitions"] = {{"train", p.train_ids}, {"val", p.val_ids}, {"test", p.test_ids}};
  return j;
}

SplitPlan split_plan_from_json(const json& j) {
  SplitPlan p;
  p.task = j.at("task").get<std::string>();
  p.seed = j.at("seed").get<std::uint64_t>();
  const auto r = j.at("ratios").get<std::vector<double>>();
  if (r.size() != 3) throw std::runtime_error("split plan ratios must have three entries");
  p.ratios = {r[0], r[1], r[2]};
  if (j.contains("mode")) p.mode = parse_split_mode(j["mode"].get<std::string>());
  const auto& parts = j.at("partitions");
  p.train_ids = parts.at("train").get<std::vector<std::string>>();
  p.val_ids = parts.at("val").get<std::vector<std::string>>();
  p.test_ids = parts.at("test").get<std::vector<std::string>>();
  return p;
}

json to_json(const FoldPlan& p) {
  json j;
  j["task"] = p.task;
  j["seed"] = p.seed;
  j["k"] = p.k();
  json parts = json::object();
  for (std::size_t f = 0; f < p.k(); ++f) parts["fold" + std::to_string(f)] = p.fold_test_ids[f];
  j["partitions"] = parts;
  return j;
}

FoldPlan fold_plan_from_json(const json& j) {
  FoldPlan p;
  p.task = j.at("task").get<std::string>();
  p.seed = j.at("seed").get<std::uint64_t>();
  const auto k = j.at("k").get<std::size_t>();
  for (std::size_t f = 0; f < k; ++f)
    p.fold_test_ids.push_back(
        j.at("partitions").at("fold" + std::to_string(f)).get<std::vector<std::string>>());
  return p;
}

}  // namespace lesion
