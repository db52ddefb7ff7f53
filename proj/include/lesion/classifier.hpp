#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "lesion/dataset.hpp"
#include "lesion/densenet.hpp"
#include "lesion/segmentation.hpp"

namespace lesion {

struct HeadConfig {
  int fc_units = 256;
  double dropout_rate = 0.25;
  /// 1 (sigmoid) for binary tasks, the class count (softmax) otherwise.
  int outputs = 1;
};

struct ClassifierConfig {
  TaskId task = TaskId::mel_vs_nv;
  HeadConfig head;
  int input_size = 224;
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 1e-4;
  /// Per-update decay: lr_t = learning_rate / (1 + decay * t).
  double decay = 1e-6;
  // RMSprop smoothing and epsilon.
  double rho = 0.9;
  double epsilon = 1e-7;
  /// Pickled state dict with torchvision DenseNet-121 names.
  std::optional<std::filesystem::path> backbone_weights;
  bool allow_random_init = false;
  bool freeze_backbone = false;
  /// Random horizontal/vertical flips.
  bool augment = false;
  /// Inverse-frequency loss weights.
  bool class_weighting = false;
  bool shuffle = true;
  /// Share of each fold's training ids held out for checkpoint selection.
  double val_fraction = 0.1;

  /// Table defaults: binary 30 epochs / batch 16 / lr 1e-4, seven-class
  /// 50 / 32 / 6e-4, decay 1e-6 for both.
  static ClassifierConfig for_task(TaskId task);
  void validate() const;
};

nlohmann::json to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);
std::string config_digest(const ClassifierConfig& c);

/// DenseNet-121 backbone and the custom head:
/// global average pool -> dense(fc_units) -> ReLU -> batch norm -> dropout ->
/// dense(outputs) -> sigmoid | softmax.
class ClassifierNetImpl : public torch::nn::Module {
public:
  explicit ClassifierNetImpl(const ClassifierConfig& config);

  torch::Tensor forward_logits(torch::Tensor x);
  /// Probabilities: sigmoid column for binary tasks, softmax rows otherwise.
  torch::Tensor forward(torch::Tensor x);

  /// Module type names of the head in execution order, output activation
  /// included.
  std::vector<std::string> head_layers() const;

  DenseNet121 backbone{nullptr};
  torch::nn::Sequential head{nullptr};
  torch::nn::Sequential activation{nullptr};
};
TORCH_MODULE(ClassifierNet);

/// Builds the network and loads the backbone weights. Throws if the weights
/// are missing and random initialisation was not allowed explicitly.
ClassifierNet build_classifier(const ClassifierConfig& config);

struct ClsSample {
  std::string image_id;
  /// Cached crop; range normalization happens on batch assembly.
  cv::Mat3b crop;
  int label = 0;
};

struct TrainedClassifier {
  std::filesystem::path weights_path;
  TaskId task = TaskId::mel_vs_nv;
  std::optional<int> fold_index;
  int best_epoch = 0;
  double best_val_metric = 0.0;
  std::string config_digest;
};

struct ClsTrainResult {
  TrainedClassifier model;
  TrainingHistory history;
};

/// RMSprop fine-tuning with best-by-validation-accuracy checkpointing to
/// `<out_dir>/model.pt` (+ `model.json`, `history.csv`). Train accuracy is
/// accumulated over the epoch's batches in training mode.
ClsTrainResult train_classifier(const std::vector<ClsSample>& train,
                                const std::vector<ClsSample>& val, const ClassifierConfig& config,
                                std::uint64_t seed, const std::filesystem::path& out_dir,
                                std::optional<int> fold = std::nullopt);

/// Crops -> normalized [N,3,S,S] input batch in torch's default dtype.
torch::Tensor crops_to_batch(const std::vector<cv::Mat3b>& crops, int input_size);

/// Rows of per-class probabilities. Binary rows are {p(positive), 1 - p}.
using Probabilities = std::vector<std::vector<double>>;

class Classifier {
public:
  /// Checks the sidecar digest and loads the weights.
  static Classifier load(const std::filesystem::path& weights);
  Classifier(ClassifierNet net, ClassifierConfig config);

  /// Throws std::invalid_argument for crops of the wrong size.
  Probabilities predict_proba(const std::vector<cv::Mat3b>& crops);

  const ClassifierConfig& config() const { return config_; }

private:
  ClassifierNet net_;
  ClassifierConfig config_;
};

/// Binary: label 0 (positive) iff probs[0] > threshold. Otherwise argmax with
/// the lowest index winning ties.
int decide_label(const std::vector<double>& probs, TaskId task, double threshold = 0.5);

}  // namespace lesion
