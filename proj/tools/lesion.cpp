#include <chrono>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "lesion/config.hpp"
#include "lesion/error.hpp"
#include "lesion/fixture.hpp"
#include "lesion/pipeline.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kInternal = 1;
constexpr int kPrecondition = 2;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string task;
  std::string out;
  bool force = false;
  int parallel_folds = 1;
  std::optional<int> fold;
  std::string table;
  std::string fixture_dir;
};

lesion::PipelineConfig effective_config(const Flags& f) {
  auto c = f.config.empty() ? lesion::PipelineConfig{} : lesion::load_pipeline_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.task.empty()) c.task = lesion::parse_task_id(f.task);
  if (!f.out.empty()) c.out = f.out;
  return c;
}

void report(const lesion::StageOutcome& s) {
  std::cout << s.stage << ": " << s.artifacts.size() << " artifact(s)";
  if (s.all_cached())
    std::cout << ", cache hit (use --force to recompute)";
  else if (s.cache_hits)
    std::cout << ", " << s.cache_hits << " cached";
  std::cout << "\n";
  for (const auto& a : s.artifacts) std::cout << "  " << a.string() << "\n";
}

int dry_run(Flags flags) {
  const auto start = std::chrono::steady_clock::now();
  const std::filesystem::path dir = flags.out.empty() ? "dry_run" : flags.out;
  const auto config_path = lesion::write_fixture(dir);
  flags.config = config_path.string();
  flags.out.clear();
  lesion::Pipeline p(effective_config(flags),
                     {flags.force, flags.parallel_folds, std::nullopt, {}});
  p.write_effective_config();
  const auto task = p.config().task;
  report(p.ingest());
  report(p.split());
  report(p.train_seg());
  report(p.segment());
  report(p.split());
  report(p.preprocess(task));
  report(p.train_clf(task));
  report(p.evaluate(task));
  for (const auto& t : lesion::reproducible_tables()) std::cout << p.reproduce(t).dump(2) << "\n";
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "dry run finished in " << secs << " s under " << p.layout().root.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dermoscopy lesion pipeline: segment, QC, crop, classify, evaluate"};
  app.require_subcommand(1);
  app.fallthrough();

  Flags flags;
  app.add_option("--config", flags.config, "pipeline config (JSON)");
  app.add_option("--seed", flags.seed, "override the config seed");
  app.add_option("--task", flags.task,
                 "melanocytic_vs_non | mel_vs_nv | benign_vs_malignant | cancer_vs_noncancer | "
                 "seven_class");
  app.add_option("--out", flags.out, "output root (dry-run: fixture directory)");
  app.add_flag("--force", flags.force, "recompute even on a cache hit");
  app.add_option("--parallel-folds", flags.parallel_folds, "concurrent fold jobs in train-clf")
      ->check(CLI::PositiveNumber);
  app.add_option("--fold", flags.fold, "train a single run (used by fold jobs)")->group("");

  app.add_subcommand("ingest", "load and validate the metadata of every configured dataset");
  app.add_subcommand("split", "segmentation split plan, and the task plan once masks exist");
  app.add_subcommand("train-seg", "train the U-Net segmenter");
  app.add_subcommand("segment", "predict masks, apply QC, write the removal summary");
  app.add_subcommand("preprocess", "dilate, crop and resize accepted images for the task");
  app.add_subcommand("train-clf", "train one classifier per fold (or the holdout run)");
  app.add_subcommand("evaluate", "predict held-out images and write the metric report");
  auto* reproduce = app.add_subcommand("reproduce", "run every stage a table needs");
  reproduce->add_option("table", flags.table, "table1 | table4 | table9 | table10 | table11")
      ->required();
  auto* fixture = app.add_subcommand("fixture", "write the 32-image synthetic fixture");
  fixture->add_option("dir", flags.fixture_dir, "destination directory")->required();
  app.add_subcommand("dry-run", "run every stage on the synthetic fixture");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInternal;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const auto name = sub->get_name();
    if (name == "fixture") {
      std::cout << "fixture config: " << lesion::write_fixture(flags.fixture_dir).string() << "\n";
      return kOk;
    }
    if (name == "dry-run") return dry_run(flags);

    lesion::RunOptions options{flags.force, flags.parallel_folds, flags.fold, {}};
    lesion::Pipeline p(effective_config(flags), options);
    p.write_effective_config();
    const auto task = p.config().task;
    if (name == "ingest") report(p.ingest());
    else if (name == "split") report(p.split());
    else if (name == "train-seg") report(p.train_seg());
    else if (name == "segment") report(p.segment());
    else if (name == "preprocess") report(p.preprocess(task));
    else if (name == "train-clf") report(p.train_clf(task));
    else if (name == "evaluate") report(p.evaluate(task));
    else if (name == "reproduce") std::cout << p.reproduce(flags.table).dump(2) << "\n";
    return kOk;
  } catch (const lesion::PreconditionError& e) {
    std::cerr << "error: " << e.what() << "\n(missing upstream stage: " << e.stage() << ")\n";
    return kPrecondition;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
}
