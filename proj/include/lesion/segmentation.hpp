#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "lesion/mask.hpp"
#include "lesion/plateau.hpp"

namespace lesion {

/// U-Net shape. Sizes are (height, width); width 320 by height 224 by default.
struct SegmenterConfig {
  int input_height = 224;
  int input_width = 320;
  int depth = 5;
  int primary_filters = 32;
  double dropout_rate = 0.4;

  /// Throws std::invalid_argument with an explanation when the input is not
  /// divisible by 2^depth or a field is out of range.
  void validate() const;
};

struct TrainSchedule {
  int max_epochs = 150;
  int batch_size = 24;
  double initial_lr = 1e-3;
  int plateau_patience = 10;
  double plateau_factor = 0.01;
  // Adam moments.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;

  void validate() const;
  PlateauPolicy plateau() const { return {plateau_patience, plateau_factor}; }
};

nlohmann::json to_json(const SegmenterConfig& c);
SegmenterConfig segmenter_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainSchedule& s);
TrainSchedule train_schedule_from_json(const nlohmann::json& j);

/// SHA-256 of the serialized config and schedule.
std::string config_digest(const SegmenterConfig& config, const TrainSchedule& schedule);

class ConvBlockImpl : public torch::nn::Module {
public:
  ConvBlockImpl(int in_channels, int out_channels);
  torch::Tensor forward(torch::Tensor x);

private:
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Encoder of `depth` conv blocks (channels primary_filters * 2^i) with 2x2
/// max pooling, a bottleneck with dropout, `depth` decoder blocks with
/// transposed-conv upsampling and skip concatenation, and a 1x1 output conv.
/// forward() returns logits; sigmoid gives the lesion probability.
class UNetImpl : public torch::nn::Module {
public:
  explicit UNetImpl(const SegmenterConfig& config);
  torch::Tensor forward(torch::Tensor x);

  std::vector<int> encoder_channels() const;
  int bottleneck_channels() const;
  const SegmenterConfig& config() const { return config_; }

private:
  SegmenterConfig config_;
  std::vector<ConvBlock> down_;
  ConvBlock bottleneck_{nullptr};
  torch::nn::Dropout dropout_{nullptr};
  std::vector<torch::nn::ConvTranspose2d> up_;
  std::vector<ConvBlock> decode_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNet);

std::int64_t parameter_count(const torch::nn::Module& module, bool trainable_only = true);

struct SegSample {
  std::string image_id;
  cv::Mat3b image;
  BinaryMask mask;
};

struct CheckpointRecord {
  std::filesystem::path weights_path;
  int epoch = 0;
  double monitored_value = 0.0;
  std::string config_digest;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double train_acc = 0.0;
  std::optional<double> val_acc;
  double lr = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;

  /// `epoch,train_loss,val_loss,train_acc,val_acc,lr`; absent values are empty.
  void write_csv(const std::filesystem::path& path) const;
};

struct SegTrainResult {
  CheckpointRecord checkpoint;
  TrainingHistory history;
};

/// Adam + binary cross-entropy, monitored on validation pixel accuracy (train
/// accuracy with a warning when `val` is empty). The best epoch is written to
/// `<out_dir>/segmenter.pt` with sidecar `segmenter.json`; history goes to
/// `history.csv`.
SegTrainResult train_segmenter(const std::vector<SegSample>& train,
                               const std::vector<SegSample>& val, const SegmenterConfig& config,
                               const TrainSchedule& schedule, std::uint64_t seed,
                               const std::filesystem::path& out_dir);

/// Sidecar JSON path next to a weights file.
std::filesystem::path sidecar_path(const std::filesystem::path& weights);

/// A loaded checkpoint in inference mode.
class Segmenter {
public:
  /// Reads the sidecar, checks its digest against the stored config and
  /// loads the weights. Throws on any mismatch or a corrupt file.
  static Segmenter load(const std::filesystem::path& weights);
  explicit Segmenter(UNet net);

  /// Probability map at the source image's native size.
  cv::Mat1f predict(const cv::Mat3b& image);
  /// One map per image, in input order.
  std::vector<cv::Mat1f> predict(const std::vector<cv::Mat3b>& images);

  const SegmenterConfig& config() const { return net_->config(); }
  const std::string& digest() const { return digest_; }

private:
  UNet net_;
  std::string digest_;
};

struct SegmentationReport {
  std::size_t images = 0;
  double pixel_accuracy = 0.0;
  double dice = 0.0;
  double iou = 0.0;
};

/// Mean per-image agreement at threshold 0.5 against ground truth, measured
/// at native resolution.
SegmentationReport evaluate_segmenter(Segmenter& model, const std::vector<SegSample>& test);

}  // namespace lesion
