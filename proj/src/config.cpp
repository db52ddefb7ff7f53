#include "lesion/config.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace lesion {

namespace {

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal();
}

nlohmann::json to_json(const DatasetPaths& d) {
  nlohmann::json j = {{"root", d.root.string()}, {"metadata", d.metadata.string()}};
  j["mask_root"] = d.mask_root ? nlohmann::json(d.mask_root->string()) : nlohmann::json(nullptr);
  return j;
}

DatasetPaths dataset_from_json(const nlohmann::json& j, const fs::path& base) {
  DatasetPaths d;
  d.root = resolve(j.at("root").get<std::string>(), base);
  d.metadata = resolve(j.at("metadata").get<std::string>(), base);
  if (j.contains("mask_root") && !j.at("mask_root").is_null())
    d.mask_root = resolve(j.at("mask_root").get<std::string>(), base);
  return d;
}

nlohmann::json ratios_json(const SplitRatios& r) { return {r.train, r.val, r.test}; }

SplitRatios ratios_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("ratios must be [train, val, test]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

void check_ratios(const SplitRatios& r, const char* name) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9)
    throw std::invalid_argument(std::string(name) + " must be non-negative and sum to 1");
}

}  // namespace

ClassifierConfig PipelineConfig::classifier_for(TaskId t) const {
  auto merged = lesion::to_json(ClassifierConfig::for_task(t));
  auto overrides = classifier;
  nlohmann::json per_task;
  if (overrides.contains("per_task")) {
    per_task = overrides.at("per_task");
    overrides.erase("per_task");
  }
  merged.merge_patch(overrides);
  const auto name = std::string(to_string(t));
  if (per_task.contains(name)) merged.merge_patch(per_task.at(name));
  // The task and its output arity are fixed by the task itself.
  merged["task"] = name;
  merged["head"]["outputs"] = ClassifierConfig::for_task(t).head.outputs;
  return classifier_config_from_json(merged);
}

void PipelineConfig::validate() const {
  check_ratios(isic_ratios, "isic_ratios");
  check_ratios(holdout_ratios, "holdout_ratios");
  if (folds < 2) throw std::invalid_argument("folds must be >= 2");
  if (!(mask_threshold > 0.0f && mask_threshold < 1.0f))
    throw std::invalid_argument("mask_threshold must lie in (0, 1)");
  if (!(decision_threshold > 0.0 && decision_threshold < 1.0))
    throw std::invalid_argument("decision_threshold must lie in (0, 1)");
  if (!(qc.min_area_fraction >= 0 && qc.min_area_fraction <= qc.max_area_fraction &&
        qc.max_area_fraction <= 1 && qc.small_component_ignore_fraction >= 0))
    throw std::invalid_argument("qc fractions must satisfy 0 <= min <= max <= 1");
  if (dilation.radius < 1 || dilation.iterations < 0)
    throw std::invalid_argument("dilation needs radius >= 1 and iterations >= 0");
  segmenter.validate();
  schedule.validate();
  for (TaskId t : kBinaryTasks) classifier_for(t).validate();
  classifier_for(TaskId::seven_class).validate();
}

nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["datasets"]["isic2018"] = c.isic2018 ? to_json(*c.isic2018) : nlohmann::json(nullptr);
  j["datasets"]["ham10000"] = c.ham10000 ? to_json(*c.ham10000) : nlohmann::json(nullptr);
  j["segmenter_weights"] =
      c.segmenter_weights ? nlohmann::json(c.segmenter_weights->string()) : nlohmann::json(nullptr);
  j["task"] = to_string(c.task);
  j["seed"] = c.seed;
  j["out"] = c.out.string();
  j["isic_ratios"] = ratios_json(c.isic_ratios);
  j["holdout_ratios"] = ratios_json(c.holdout_ratios);
  j["folds"] = c.folds;
  j["segmenter"] = to_json(c.segmenter);
  j["schedule"] = to_json(c.schedule);
  j["mask_threshold"] = c.mask_threshold;
  j["qc"] = {{"min_area_fraction", c.qc.min_area_fraction},
             {"max_area_fraction", c.qc.max_area_fraction},
             {"small_component_ignore_fraction", c.qc.small_component_ignore_fraction},
             {"connectivity", static_cast<int>(c.qc.connectivity)}};
  j["dilation"] = {{"radius", c.dilation.radius}, {"iterations", c.dilation.iterations}};
  j["classifier"] = c.classifier;
  j["decision_threshold"] = c.decision_threshold;
  return j;
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  PipelineConfig c;
  if (j.contains("datasets")) {
    const auto& d = j.at("datasets");
    if (d.contains("isic2018") && !d.at("isic2018").is_null())
      c.isic2018 = dataset_from_json(d.at("isic2018"), base_dir);
    if (d.contains("ham10000") && !d.at("ham10000").is_null())
      c.ham10000 = dataset_from_json(d.at("ham10000"), base_dir);
  }
  if (j.contains("segmenter_weights") && !j.at("segmenter_weights").is_null())
    c.segmenter_weights = resolve(j.at("segmenter_weights").get<std::string>(), base_dir);
  if (j.contains("task")) c.task = parse_task_id(j.at("task").get<std::string>());
  c.seed = j.value("seed", c.seed);
  if (j.contains("out")) c.out = resolve(j.at("out").get<std::string>(), base_dir);
  if (j.contains("isic_ratios")) c.isic_ratios = ratios_from_json(j.at("isic_ratios"));
  if (j.contains("holdout_ratios")) c.holdout_ratios = ratios_from_json(j.at("holdout_ratios"));
  c.folds = j.value("folds", c.folds);
  if (j.contains("segmenter")) {
    auto merged = to_json(c.segmenter);
    merged.merge_patch(j.at("segmenter"));
    c.segmenter = segmenter_config_from_json(merged);
  }
  if (j.contains("schedule")) {
    auto merged = to_json(c.schedule);
    merged.merge_patch(j.at("schedule"));
    c.schedule = train_schedule_from_json(merged);
  }
  c.mask_threshold = j.value("mask_threshold", c.mask_threshold);
  if (j.contains("qc")) {
    const auto& q = j.at("qc");
    c.qc.min_area_fraction = q.value("min_area_fraction", c.qc.min_area_fraction);
    c.qc.max_area_fraction = q.value("max_area_fraction", c.qc.max_area_fraction);
    c.qc.small_component_ignore_fraction =
        q.value("small_component_ignore_fraction", c.qc.small_component_ignore_fraction);
    const int conn = q.value("connectivity", 8);
    if (conn != 4 && conn != 8) throw std::invalid_argument("qc.connectivity must be 4 or 8");
    c.qc.connectivity = conn == 4 ? Connectivity::four : Connectivity::eight;
  }
  if (j.contains("dilation")) {
    c.dilation.radius = j.at("dilation").value("radius", c.dilation.radius);
    c.dilation.iterations = j.at("dilation").value("iterations", c.dilation.iterations);
  }
  if (j.contains("classifier")) {
    c.classifier = j.at("classifier");
    if (!c.classifier.is_object()) throw std::invalid_argument("classifier must be an object");
    if (c.classifier.contains("backbone_weights") && c.classifier["backbone_weights"].is_string())
      c.classifier["backbone_weights"] =
          resolve(c.classifier["backbone_weights"].get<std::string>(), base_dir).string();
  }
  c.decision_threshold = j.value("decision_threshold", c.decision_threshold);
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return pipeline_config_from_json(j, fs::absolute(path).parent_path());
}

}  // namespace lesion
