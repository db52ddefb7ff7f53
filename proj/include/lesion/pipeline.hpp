#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lesion/config.hpp"

namespace lesion {

struct RunOptions {
  /// Recompute even when the artifact on disk carries the current digest.
  bool force = false;
  /// Concurrent fold jobs in train-clf (child processes).
  int parallel_folds = 1;
  /// Train only this run of train-clf (what a fold job executes).
  std::optional<int> only_fold;
  /// Binary re-invoked for fold jobs; defaults to /proc/self/exe.
  std::filesystem::path executable;
};

struct StageOutcome {
  std::string stage;
  std::vector<std::filesystem::path> artifacts;
  std::size_t cache_hits = 0;

  bool all_cached() const { return !artifacts.empty() && cache_hits == artifacts.size(); }
};

/// Output tree under PipelineConfig::out.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path effective_config() const { return root / "config.effective.json"; }
  std::filesystem::path manifest(DatasetSource s) const;
  std::filesystem::path isic_plan() const { return root / "plans" / "isic2018.json"; }
  std::filesystem::path task_plan(TaskId t) const;
  std::filesystem::path segmenter_dir() const { return root / "models" / "segmenter"; }
  std::filesystem::path masks_dir() const { return root / "masks"; }
  std::filesystem::path masked_manifest() const { return masks_dir() / "manifest.json"; }
  std::filesystem::path qc_summary() const { return masks_dir() / "qc_summary.json"; }
  std::filesystem::path preprocessed(TaskId t) const;
  std::filesystem::path models(TaskId t) const;
  std::filesystem::path reports(TaskId t) const;
  std::filesystem::path table(const std::string& id) const;
};

/// Stage driver. Every stage derives a digest from the config and the digests
/// of its inputs, embeds it in what it writes, and skips work when the
/// artifact on disk already carries that digest. A missing or stale input
/// raises PreconditionError naming the stage that produces it.
class Pipeline {
public:
  explicit Pipeline(PipelineConfig config, RunOptions options = {});

  const PipelineConfig& config() const { return config_; }
  const RunLayout& layout() const { return layout_; }

  /// Writes the merged config next to the outputs.
  void write_effective_config() const;

  StageOutcome ingest();
  /// Segmentation split, plus the task plan once masks exist.
  StageOutcome split();
  StageOutcome split_task(TaskId task);
  StageOutcome train_seg();
  StageOutcome segment();
  StageOutcome preprocess(TaskId task);
  StageOutcome train_clf(TaskId task);
  StageOutcome evaluate(TaskId task);

  /// Runs whatever stages the table needs and writes reports/<table>.json.
  /// Tables: table1, table4, table9, table10, table11.
  nlohmann::json reproduce(const std::string& table);

  /// Digests the stages would stamp under the current config.
  std::string ingest_digest(DatasetSource source) const;
  std::string isic_split_digest() const;
  std::string train_seg_digest() const;
  std::string segment_digest() const;
  std::string task_split_digest(TaskId task) const;
  std::string preprocess_digest(TaskId task) const;
  std::string train_clf_digest(TaskId task) const;
  std::string evaluate_digest(TaskId task) const;

  /// Run names of the task's protocol: fold0..fold{k-1}, or holdout.
  std::vector<std::string> run_names(TaskId task) const;

private:
  StageOutcome split_isic();
  StageOutcome run_task(TaskId task);
  const DatasetPaths& dataset(DatasetSource source) const;
  std::filesystem::path segmenter_weights() const;
  void train_run(TaskId task, std::size_t run, const nlohmann::json& plan,
                 const nlohmann::json& index);
  void spawn_fold_jobs(TaskId task, const std::vector<std::size_t>& runs);

  PipelineConfig config_;
  RunOptions options_;
  RunLayout layout_;
};

/// Tables understood by Pipeline::reproduce.
const std::vector<std::string>& reproducible_tables();

}  // namespace lesion
