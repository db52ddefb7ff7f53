#include "lesion/segmentation.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "lesion/digest.hpp"
#include "lesion/error.hpp"
#include "lesion/fsutil.hpp"
#include "lesion/log_text.hpp"
#include "lesion/random.hpp"
#include "lesion/tensor_io.hpp"

namespace lesion {

void SegmenterConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("segmenter depth must be >= 1");
  if (primary_filters < 1) throw std::invalid_argument("primary_filters must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw std::invalid_argument("dropout_rate must lie in [0, 1)");
  const int div = 1 << depth;
  if (input_height <= 0 || input_width <= 0 || input_height % div || input_width % div)
    throw std::invalid_argument(
        "input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
        " (height x width) must be divisible by 2^depth = " + std::to_string(div) +
        " so every pooling stage halves it exactly and the decoder can restore it");
}

void TrainSchedule::validate() const {
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(initial_lr > 0.0)) throw std::invalid_argument("initial_lr must be positive");
  plateau().validate();
}

nlohmann::json to_json(const SegmenterConfig& c) {
  return {{"input_height", c.input_height},   {"input_width", c.input_width},
          {"depth", c.depth},                 {"primary_filters", c.primary_filters},
          {"dropout_rate", c.dropout_rate},   {"output_channels", 1},
          {"output_activation", "sigmoid"}};
}

SegmenterConfig segmenter_config_from_json(const nlohmann::json& j) {
  SegmenterConfig c;
  c.input_height = j.value("input_height", c.input_height);
  c.input_width = j.value("input_width", c.input_width);
  c.depth = j.value("depth", c.depth);
  c.primary_filters = j.value("primary_filters", c.primary_filters);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  return c;
}

nlohmann::json to_json(const TrainSchedule& s) {
  return {{"max_epochs", s.max_epochs},
          {"batch_size", s.batch_size},
          {"initial_lr", s.initial_lr},
          {"plateau_patience", s.plateau_patience},
          {"plateau_factor", s.plateau_factor},
          {"monitored_metric", "val_pixel_accuracy"},
          {"loss", "binary_cross_entropy"},
          {"optimizer", {{"name", "adam"}, {"beta1", s.beta1}, {"beta2", s.beta2},
                         {"epsilon", s.epsilon}}}};
}

TrainSchedule train_schedule_from_json(const nlohmann::json& j) {
  TrainSchedule s;
  s.max_epochs = j.value("max_epochs", s.max_epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.initial_lr = j.value("initial_lr", s.initial_lr);
  s.plateau_patience = j.value("plateau_patience", s.plateau_patience);
  s.plateau_factor = j.value("plateau_factor", s.plateau_factor);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    s.beta1 = o.value("beta1", s.beta1);
    s.beta2 = o.value("beta2", s.beta2);
    s.epsilon = o.value("epsilon", s.epsilon);
  }
  return s;
}

std::string config_digest(const SegmenterConfig& config, const TrainSchedule& schedule) {
  const nlohmann::json j = {{"config", to_json(config)}, {"schedule", to_json(schedule)}};
  return sha256_hex(j.dump());
}

ConvBlockImpl::ConvBlockImpl(int in_channels, int out_channels) {
  namespace nn = torch::nn;
  body = register_module(
      "body",
      nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)),
                     nn::BatchNorm2d(out_channels), nn::ReLU(),
                     nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)),
                     nn::BatchNorm2d(out_channels), nn::ReLU()));
}

torch::Tensor ConvBlockImpl::forward(torch::Tensor x) { return body->forward(x); }

UNetImpl::UNetImpl(const SegmenterConfig& config) : config_(config) {
  namespace nn = torch::nn;
  config_.validate();
  const auto channels = encoder_channels();
  int in = 3;
  for (int i = 0; i < config_.depth; ++i) {
    down_.push_back(register_module("down" + std::to_string(i), ConvBlock(in, channels[i])));
    in = channels[i];
  }
  bottleneck_ = register_module("bottleneck", ConvBlock(in, bottleneck_channels()));
  dropout_ = register_module("dropout", nn::Dropout(config_.dropout_rate));
  in = bottleneck_channels();
  for (int i = config_.depth - 1; i >= 0; --i) {
    const int c = channels[i];
    up_.push_back(register_module("up" + std::to_string(i),
                                  nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, c, 2).stride(2))));
    decode_.push_back(register_module("decode" + std::to_string(i), ConvBlock(2 * c, c)));
    in = c;
  }
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, 1, 1)));
}

std::vector<int> UNetImpl::encoder_channels() const {
  std::vector<int> out;
  for (int i = 0; i < config_.depth; ++i) out.push_back(config_.primary_filters << i);
  return out;
}

int UNetImpl::bottleneck_channels() const { return config_.primary_filters << config_.depth; }

torch::Tensor UNetImpl::forward(torch::Tensor x) {
  std::vector<torch::Tensor> skips;
  for (auto& block : down_) {
    x = block->forward(x);
    skips.push_back(x);
    x = torch::max_pool2d(x, 2);
  }
  x = dropout_->forward(bottleneck_->forward(x));
  for (std::size_t i = 0; i < up_.size(); ++i) {
    x = up_[i]->forward(x);
    x = torch::cat({skips[skips.size() - 1 - i], x}, 1);
    x = decode_[i]->forward(x);
  }
  return head_->forward(x);
}

std::int64_t parameter_count(const torch::nn::Module& module, bool trainable_only) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters(true))
    if (!trainable_only || p.requires_grad()) n += p.numel();
  return n;
}

void TrainingHistory::write_csv(const std::filesystem::path& path) const {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,train_loss,val_loss,train_acc,val_acc,lr\n";
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream s;
    s.precision(10);
    s << *v;
    return s.str();
  };
  for (const auto& e : epochs)
    out << e.epoch << ',' << e.train_loss << ',' << opt(e.val_loss) << ',' << e.train_acc << ','
        << opt(e.val_acc) << ',' << e.lr << '\n';
  write_file_atomic(path, out.str());
}

std::filesystem::path sidecar_path(const std::filesystem::path& weights) {
  auto p = weights;
  p.replace_extension(".json");
  return p;
}

namespace {

struct SegTensors {
  torch::Tensor images;  // uint8 [N,3,H,W]
  torch::Tensor masks;   // uint8 [N,1,H,W]
};

SegTensors stack_samples(const std::vector<SegSample>& samples, const SegmenterConfig& c) {
  std::vector<std::string> bad;
  for (const auto& s : samples)
    if (s.image.empty() || s.image.size() != s.mask.pixels.size()) bad.push_back(s.image_id);
  if (!bad.empty()) throw RecordError("image/mask size mismatch", bad);

  const auto n = static_cast<std::int64_t>(samples.size());
  SegTensors t{torch::empty({n, 3, c.input_height, c.input_width}, torch::kUInt8),
               torch::empty({n, 1, c.input_height, c.input_width}, torch::kUInt8)};
  const cv::Size size(c.input_width, c.input_height);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    cv::Mat3b img;
    cv::resize(s.image, img, size, 0, 0, cv::INTER_LINEAR);
    cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
    t.images[i].copy_(torch::from_blob(img.data, {img.rows, img.cols, 3}, torch::kUInt8)
                          .permute({2, 0, 1}));
    cv::Mat1b m;
    cv::resize(s.mask.pixels, m, size, 0, 0, cv::INTER_NEAREST);
    t.masks[i].copy_(torch::from_blob(m.data, {1, m.rows, m.cols}, torch::kUInt8));
  }
  return t;
}

torch::Tensor as_input(const torch::Tensor& u8) { return u8.to(torch::kFloat32).div_(255.0); }

struct PassStats {
  double loss = 0.0;
  double acc = 0.0;
};

PassStats evaluate_pass(UNet& net, const SegTensors& data, int batch_size) {
  torch::NoGradGuard no_grad;
  net->eval();
  const auto n = data.images.size(0);
  double loss = 0.0, correct = 0.0, pixels = 0.0;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const auto end = std::min<std::int64_t>(n, start + batch_size);
    auto x = as_input(data.images.slice(0, start, end));
    auto y = data.masks.slice(0, start, end).to(torch::kFloat32);
    auto logits = net->forward(x);
    loss += torch::binary_cross_entropy_with_logits(logits, y).item<double>() *
            static_cast<double>(y.numel());
    correct += (logits.gt(0) == y.gt(0.5)).sum().item<double>();
    pixels += static_cast<double>(y.numel());
  }
  return {loss / pixels, correct / pixels};
}

}  // namespace

SegTrainResult train_segmenter(const std::vector<SegSample>& train,
                               const std::vector<SegSample>& val, const SegmenterConfig& config,
                               const TrainSchedule& schedule, std::uint64_t seed,
                               const std::filesystem::path& out_dir) {
  config.validate();
  schedule.validate();
  if (train.empty()) throw std::invalid_argument("train_segmenter: empty training set");

  torch::manual_seed(seed);
  const auto train_t = stack_samples(train, config);
  const auto val_t = stack_samples(val, config);
  const bool have_val = !val.empty();
  if (!have_val)
    log_warn("train_segmenter: empty validation set, monitoring train pixel accuracy");

  UNet net(config);
  torch::optim::Adam optimizer(net->parameters(),
                               torch::optim::AdamOptions(schedule.initial_lr)
                                   .betas({schedule.beta1, schedule.beta2})
                                   .eps(schedule.epsilon));
  PlateauController plateau(schedule.plateau(), schedule.initial_lr);
  std::mt19937_64 rng(seed);

  const std::string digest = config_digest(config, schedule);
  SegTrainResult result;
  result.checkpoint.weights_path = out_dir / "segmenter.pt";
  result.checkpoint.config_digest = digest;
  std::filesystem::create_directories(out_dir);

  const auto n = train_t.images.size(0);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < schedule.max_epochs; ++epoch) {
    const double lr = plateau.lr();
    std::iota(order.begin(), order.end(), 0);
    portable_shuffle(std::span(order), rng);
    net->train();
    double loss_sum = 0.0, correct = 0.0, pixels = 0.0;
    for (std::int64_t start = 0; start < n; start += schedule.batch_size) {
      const auto end = std::min<std::int64_t>(n, start + schedule.batch_size);
      auto idx = torch::from_blob(order.data() + start, {end - start}, torch::kInt64).clone();
      auto x = as_input(train_t.images.index_select(0, idx));
      auto y = train_t.masks.index_select(0, idx).to(torch::kFloat32);
      optimizer.zero_grad();
      auto logits = net->forward(x);
      auto loss = torch::binary_cross_entropy_with_logits(logits, y);
      loss.backward();
      optimizer.step();
      loss_sum += loss.item<double>() * static_cast<double>(y.numel());
      correct += (logits.detach().gt(0) == y.gt(0.5)).sum().item<double>();
      pixels += static_cast<double>(y.numel());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / pixels;
    rec.train_acc = correct / pixels;
    rec.lr = lr;
    if (have_val) {
      const auto v = evaluate_pass(net, val_t, schedule.batch_size);
      rec.val_loss = v.loss;
      rec.val_acc = v.acc;
    }
    result.history.epochs.push_back(rec);
    const double monitored = have_val ? *rec.val_acc : rec.train_acc;
    log_info(cat("segmenter epoch ", epoch, " loss ", rec.train_loss, " acc ", rec.train_acc,
                 " monitored ", monitored, " lr ", lr));

    const auto action = plateau.observe(monitored);
    if (action == PlateauAction::improved) {
      save_state_dict(*net, result.checkpoint.weights_path);
      result.checkpoint.epoch = epoch;
      result.checkpoint.monitored_value = monitored;
      const nlohmann::json sidecar = {
          {"config", to_json(config)},
          {"schedule", to_json(schedule)},
          {"epoch", epoch},
          {"monitored_value", monitored},
          {"monitored_metric", have_val ? "val_pixel_accuracy" : "train_pixel_accuracy"},
          {"config_digest", digest},
          {"seed", seed}};
      write_file_atomic(sidecar_path(result.checkpoint.weights_path), sidecar.dump(2) + "\n");
    } else if (action == PlateauAction::reduce_lr) {
      for (auto& group : optimizer.param_groups())
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(plateau.lr());
      log_info(cat("segmenter plateau: lr -> ", plateau.lr()));
    } else if (action == PlateauAction::stop) {
      log_info(cat("segmenter early stop after epoch ", epoch));
      break;
    }
  }
  result.history.write_csv(out_dir / "history.csv");
  return result;
}

Segmenter::Segmenter(UNet net) : net_(std::move(net)) {
  net_->eval();
}

Segmenter Segmenter::load(const std::filesystem::path& weights) {
  const auto side = sidecar_path(weights);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(side));
  } catch (const std::exception& e) {
    throw std::runtime_error("cannot read checkpoint sidecar " + side.string() + ": " + e.what());
  }
  const auto config = segmenter_config_from_json(j.at("config"));
  const auto schedule = train_schedule_from_json(j.at("schedule"));
  const auto digest = config_digest(config, schedule);
  if (digest != j.at("config_digest").get<std::string>())
    throw std::runtime_error("checkpoint " + weights.string() +
                             ": config digest does not match its sidecar config");
  UNet net(config);
  load_state_dict(*net, read_state_dict(weights));
  Segmenter s(std::move(net));
  s.digest_ = digest;
  return s;
}

cv::Mat1f Segmenter::predict(const cv::Mat3b& image) { return predict(std::vector{image}).front(); }

std::vector<cv::Mat1f> Segmenter::predict(const std::vector<cv::Mat3b>& images) {
  constexpr std::size_t kChunk = 8;
  const auto& c = config();
  std::vector<cv::Mat1f> out;
  out.reserve(images.size());
  torch::NoGradGuard no_grad;
  net_->eval();
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto end = std::min(images.size(), start + kChunk);
    std::vector<torch::Tensor> batch;
    for (std::size_t i = start; i < end; ++i) {
      if (images[i].empty()) throw std::invalid_argument("predict: empty image");
      cv::Mat3b resized;
      cv::resize(images[i], resized, cv::Size(c.input_width, c.input_height), 0, 0,
                 cv::INTER_LINEAR);
      batch.push_back(bgr_to_tensor(resized));
    }
    auto probs = torch::sigmoid(net_->forward(torch::stack(batch)));
    for (std::size_t i = start; i < end; ++i) {
      cv::Mat1f map = tensor_to_map(probs[static_cast<std::int64_t>(i - start)][0]);
      cv::Mat1f native;
      cv::resize(map, native, images[i].size(), 0, 0, cv::INTER_LINEAR);
      // Bilinear resampling of values in [0,1] stays in [0,1]; clamp rounding.
      cv::min(cv::max(native, 0.0f), 1.0f, native);
      out.push_back(native);
    }
  }
  return out;
}

SegmentationReport evaluate_segmenter(Segmenter& model, const std::vector<SegSample>& test) {
  if (test.empty()) throw std::invalid_argument("evaluate_segmenter: empty test set");
  SegmentationReport r;
  for (const auto& s : test) {
    const auto a = compare_masks(binarize(model.predict(s.image)), s.mask);
    r.pixel_accuracy += a.pixel_accuracy;
    r.dice += a.dice;
    r.iou += a.iou;
  }
  r.images = test.size();
  const double n = static_cast<double>(test.size());
  r.pixel_accuracy /= n;
  r.dice /= n;
  r.iou /= n;
  return r;
}

}  // namespace lesion
