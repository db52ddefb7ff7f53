#include "lesion/classifier.hpp"

#include <numeric>
#include <random>
#include <span>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "lesion/digest.hpp"
#include "lesion/fsutil.hpp"
#include "lesion/log_text.hpp"
#include "lesion/mask.hpp"
#include "lesion/metrics.hpp"
#include "lesion/random.hpp"
#include "lesion/tensor_io.hpp"

namespace lesion {

namespace nn = torch::nn;

ClassifierConfig ClassifierConfig::for_task(TaskId task) {
  ClassifierConfig c;
  c.task = task;
  c.head.outputs = task == TaskId::seven_class ? 7 : 1;
  if (task == TaskId::seven_class) {
    c.epochs = 50;
    c.batch_size = 32;
    c.learning_rate = 6e-4;
  }
  return c;
}

void ClassifierConfig::validate() const {
  const int expected = task == TaskId::seven_class ? 7 : 1;
  if (head.outputs != expected)
    throw std::invalid_argument("head outputs must be " + std::to_string(expected) + " for " +
                                std::string(to_string(task)));
  if (head.fc_units < 1) throw std::invalid_argument("fc_units must be >= 1");
  if (!(head.dropout_rate >= 0.0 && head.dropout_rate < 1.0))
    throw std::invalid_argument("head dropout must lie in [0, 1)");
  // Five stride-2 stages need at least 32 pixels.
  if (input_size < 32) throw std::invalid_argument("classifier input_size must be >= 32");
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("epochs and batch_size must be >= 1");
  if (!(learning_rate > 0.0) || decay < 0.0) throw std::invalid_argument("bad learning rate or decay");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("val_fraction must lie in [0, 1)");
}

nlohmann::json to_json(const ClassifierConfig& c) {
  nlohmann::json j = {
      {"task", std::string(to_string(c.task))},
      {"backbone", "densenet121"},
      {"head",
       {{"fc_units", c.head.fc_units},
        {"dropout_rate", c.head.dropout_rate},
        {"outputs", c.head.outputs},
        {"activation", c.head.outputs == 1 ? "sigmoid" : "softmax"}}},
      {"input_size", c.input_size},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"optimizer",
       {{"name", "rmsprop"},
        {"learning_rate", c.learning_rate},
        {"decay", c.decay},
        {"decay_mode", "per_update_lr"},
        {"rho", c.rho},
        {"epsilon", c.epsilon}}},
      {"loss", c.head.outputs == 1 ? "binary_cross_entropy" : "categorical_cross_entropy"},
      {"allow_random_init", c.allow_random_init},
      {"freeze_backbone", c.freeze_backbone},
      {"augment", c.augment},
      {"class_weighting", c.class_weighting},
      {"shuffle", c.shuffle},
      {"val_fraction", c.val_fraction}};
  j["backbone_weights"] = c.backbone_weights ? nlohmann::json(c.backbone_weights->string())
                                             : nlohmann::json(nullptr);
  return j;
}

ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  auto c = ClassifierConfig::for_task(parse_task_id(j.at("task").get<std::string>()));
  if (j.contains("head")) {
    const auto& h = j.at("head");
    c.head.fc_units = h.value("fc_units", c.head.fc_units);
    c.head.dropout_rate = h.value("dropout_rate", c.head.dropout_rate);
    c.head.outputs = h.value("outputs", c.head.outputs);
  }
  c.input_size = j.value("input_size", c.input_size);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.learning_rate = o.value("learning_rate", c.learning_rate);
    c.decay = o.value("decay", c.decay);
    c.rho = o.value("rho", c.rho);
    c.epsilon = o.value("epsilon", c.epsilon);
  }
  if (j.contains("backbone_weights") && !j.at("backbone_weights").is_null())
    c.backbone_weights = j.at("backbone_weights").get<std::string>();
  c.allow_random_init = j.value("allow_random_init", c.allow_random_init);
  c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
  c.augment = j.value("augment", c.augment);
  c.class_weighting = j.value("class_weighting", c.class_weighting);
  c.shuffle = j.value("shuffle", c.shuffle);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  return c;
}

std::string config_digest(const ClassifierConfig& c) { return sha256_hex(to_json(c).dump()); }

ClassifierNetImpl::ClassifierNetImpl(const ClassifierConfig& config) {
  config.validate();
  backbone = register_module("backbone", DenseNet121());
  head = register_module(
      "head", nn::Sequential(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)), nn::Flatten(),
                             nn::Linear(DenseNet121Impl::kFeatures, config.head.fc_units),
                             nn::ReLU(), nn::BatchNorm1d(config.head.fc_units),
                             nn::Dropout(config.head.dropout_rate),
                             nn::Linear(config.head.fc_units, config.head.outputs)));
  activation = config.head.outputs == 1
                   ? nn::Sequential(nn::Sigmoid())
                   : nn::Sequential(nn::Softmax(nn::SoftmaxOptions(1)));
  register_module("activation", activation);
}

torch::Tensor ClassifierNetImpl::forward_logits(torch::Tensor x) {
  return head->forward(backbone->forward(x));
}

torch::Tensor ClassifierNetImpl::forward(torch::Tensor x) {
  return activation->forward(forward_logits(x));
}

std::vector<std::string> ClassifierNetImpl::head_layers() const {
  std::vector<std::string> out;
  for (const auto& m : head->children()) out.push_back(m->name());
  for (const auto& m : activation->children()) out.push_back(m->name());
  return out;
}

ClassifierNet build_classifier(const ClassifierConfig& config) {
  ClassifierNet net(config);
  if (config.backbone_weights && std::filesystem::exists(*config.backbone_weights)) {
    auto dict = read_state_dict(*config.backbone_weights);
    // torchvision names start at "features."; ours sit under "backbone.".
    StateDict renamed;
    for (auto& [name, t] : dict) renamed.emplace("backbone." + name, t);
    const auto s = load_state_dict(*net, renamed, "backbone.");
    log_info(cat("loaded ", s.loaded, " backbone tensors from ", config.backbone_weights->string(),
                 " (", s.skipped, " unused)"));
  } else if (config.allow_random_init) {
    log_warn("classifier backbone randomly initialised (no pretrained weights)");
  } else {
    const std::string where =
        config.backbone_weights ? config.backbone_weights->string() : std::string("<unset>");
    throw std::runtime_error(
        "pretrained DenseNet-121 weights not found at " + where +
        ". Export them with `python3 tools/export_densenet_weights.py <out.pt>` and set "
        "classifier.backbone_weights, or set classifier.allow_random_init to train from scratch.");
  }
  if (config.freeze_backbone)
    for (auto& p : net->backbone->parameters()) p.set_requires_grad(false);
  return net;
}

torch::Tensor crops_to_batch(const std::vector<cv::Mat3b>& crops, int input_size) {
  std::vector<torch::Tensor> items;
  items.reserve(crops.size());
  for (const auto& c : crops) {
    if (c.rows != input_size || c.cols != input_size)
      throw std::invalid_argument("classifier expects " + std::to_string(input_size) + "x" +
                                  std::to_string(input_size) + " crops, got " +
                                  std::to_string(c.cols) + "x" + std::to_string(c.rows));
    items.push_back(float_bgr_to_tensor(normalize_range(c).pixels));
  }
  const auto dtype = c10::typeMetaToScalarType(torch::get_default_dtype());
  if (items.empty()) return torch::empty({0, 3, input_size, input_size}, dtype);
  return torch::stack(items).to(dtype);
}

namespace {

/// Batch index ranges. A trailing batch of one sample is merged into the
/// previous batch because batch normalization needs two values per channel.
std::vector<std::pair<std::size_t, std::size_t>> training_batches(std::size_t n, int batch_size) {
  const auto b = static_cast<std::size_t>(batch_size);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start < n; start += b) out.emplace_back(start, std::min(n, start + b));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out.pop_back();
    out.back().second = n;
  }
  return out;
}

std::vector<std::string> class_names(TaskId task) { return TaskGrouping::make(task).labels; }

torch::Tensor targets_for(const std::vector<const ClsSample*>& batch, bool binary) {
  std::vector<std::int64_t> labels;
  for (const auto* s : batch) labels.push_back(s->label);
  auto t = torch::tensor(labels, torch::kInt64);
  return binary ? t.eq(0).to(c10::typeMetaToScalarType(torch::get_default_dtype())).unsqueeze(1) : t;
}

torch::Tensor predicted_labels(const torch::Tensor& logits, bool binary) {
  return binary ? logits.squeeze(1).le(0).to(torch::kInt64) : logits.argmax(1);
}

struct EvalStats {
  double loss = 0.0;
  double acc = 0.0;
};

EvalStats evaluate(ClassifierNet& net, const std::vector<ClsSample>& data, const ClassifierConfig& c) {
  torch::NoGradGuard no_grad;
  net->eval();
  const bool binary = c.head.outputs == 1;
  double loss = 0.0, correct = 0.0;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(c.batch_size)) {
    const auto end = std::min(data.size(), start + static_cast<std::size_t>(c.batch_size));
    std::vector<cv::Mat3b> crops;
    std::vector<const ClsSample*> batch;
    for (std::size_t i = start; i < end; ++i) {
      crops.push_back(data[i].crop);
      batch.push_back(&data[i]);
    }
    auto logits = net->forward_logits(crops_to_batch(crops, c.input_size));
    auto y = targets_for(batch, binary);
    auto l = binary ? torch::binary_cross_entropy_with_logits(logits, y)
                    : torch::nn::functional::cross_entropy(logits, y);
    loss += l.item<double>() * static_cast<double>(batch.size());
    std::vector<std::int64_t> labels;
    for (const auto* s : batch) labels.push_back(s->label);
    correct += predicted_labels(logits, binary).eq(torch::tensor(labels)).sum().item<double>();
  }
  const double n = static_cast<double>(data.size());
  return {loss / n, correct / n};
}

}  // namespace

ClsTrainResult train_classifier(const std::vector<ClsSample>& train,
                                const std::vector<ClsSample>& val, const ClassifierConfig& config,
                                std::uint64_t seed, const std::filesystem::path& out_dir,
                                std::optional<int> fold) {
  config.validate();
  const auto names = class_names(config.task);
  const bool binary = config.head.outputs == 1;
  std::vector<std::size_t> counts(names.size(), 0);
  for (const auto& s : train) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= names.size())
      throw std::invalid_argument("sample " + s.image_id + " has label index " +
                                  std::to_string(s.label) + " outside the task");
    ++counts[static_cast<std::size_t>(s.label)];
  }
  if (train.size() < 2) throw std::invalid_argument("train_classifier: need at least 2 samples");
  for (std::size_t c = 0; c < names.size(); ++c)
    if (counts[c] == 0)
      throw std::invalid_argument("train_classifier: class '" + names[c] +
                                  "' is absent from the training set");

  torch::manual_seed(seed);
  auto net = build_classifier(config);
  std::vector<torch::Tensor> trainable;
  for (auto& p : net->parameters())
    if (p.requires_grad()) trainable.push_back(p);
  torch::optim::RMSprop optimizer(
      trainable,
      torch::optim::RMSpropOptions(config.learning_rate).alpha(config.rho).eps(config.epsilon));

  // Inverse-frequency weights, normalised so a balanced set gets all ones.
  std::vector<float> class_weight(names.size(), 1.0f);
  if (config.class_weighting)
    for (std::size_t c = 0; c < names.size(); ++c)
      class_weight[c] = static_cast<float>(static_cast<double>(train.size()) /
                                           (static_cast<double>(names.size() * counts[c])));

  const bool have_val = !val.empty();
  if (!have_val)
    log_warn("train_classifier: empty validation set, monitoring train accuracy");

  ClsTrainResult result;
  auto& model = result.model;
  model.weights_path = out_dir / "model.pt";
  model.task = config.task;
  model.fold_index = fold;
  model.config_digest = config_digest(config);
  std::filesystem::create_directories(out_dir);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(train.size());
  std::int64_t step = 0;
  std::optional<double> best;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (config.shuffle) portable_shuffle(std::span(order), rng);
    net->train();
    if (config.freeze_backbone) net->backbone->eval();
    double loss_sum = 0.0, correct = 0.0, lr = config.learning_rate;
    for (const auto& [start, end] : training_batches(order.size(), config.batch_size)) {
      std::vector<const ClsSample*> batch;
      std::vector<cv::Mat3b> crops;
      std::vector<float> weights;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train[order[i]];
        batch.push_back(&s);
        cv::Mat3b crop = config.augment ? s.crop.clone() : s.crop;
        if (config.augment) {
          const auto flips = bounded_draw(rng, 4);
          if (flips & 1u) cv::flip(crop, crop, 1);
          if (flips & 2u) cv::flip(crop, crop, 0);
        }
        crops.push_back(crop);
        weights.push_back(class_weight[static_cast<std::size_t>(s.label)]);
      }
      lr = config.learning_rate / (1.0 + config.decay * static_cast<double>(step));
      for (auto& group : optimizer.param_groups())
        static_cast<torch::optim::RMSpropOptions&>(group.options()).lr(lr);

      auto x = crops_to_batch(crops, config.input_size);
      auto y = targets_for(batch, binary);
      auto w = torch::tensor(weights);
      optimizer.zero_grad();
      auto logits = net->forward_logits(x);
      torch::Tensor loss;
      if (binary) {
        loss = (torch::binary_cross_entropy_with_logits(logits, y, {}, {}, at::Reduction::None)
                    .squeeze(1) * w).mean();
      } else {
        namespace F = torch::nn::functional;
        loss = (F::cross_entropy(logits, y, F::CrossEntropyFuncOptions().reduction(torch::kNone)) * w)
                   .mean();
      }
      loss.backward();
      optimizer.step();
      ++step;
      std::vector<std::int64_t> labels;
      for (const auto* s : batch) labels.push_back(s->label);
      loss_sum += loss.item<double>() * static_cast<double>(batch.size());
      correct += predicted_labels(logits.detach(), binary).eq(torch::tensor(labels)).sum().item<double>();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_acc = correct / static_cast<double>(train.size());
    rec.lr = lr;
    if (have_val) {
      const auto v = evaluate(net, val, config);
      rec.val_loss = v.loss;
      rec.val_acc = v.acc;
    }
    result.history.epochs.push_back(rec);
    const double monitored = have_val ? *rec.val_acc : rec.train_acc;
    log_info(cat("classifier ", to_string(config.task), " epoch ", epoch, " loss ", rec.train_loss,
                 " acc ", rec.train_acc, " monitored ", monitored, " lr ", lr));
    if (!best || monitored > *best) {
      best = monitored;
      model.best_epoch = epoch;
      model.best_val_metric = monitored;
      save_state_dict(*net, model.weights_path);
      nlohmann::json sidecar = {
          {"config", to_json(config)},
          {"task", std::string(to_string(config.task))},
          {"epoch", epoch},
          {"best_val_metric", monitored},
          {"monitored_metric", have_val ? "val_accuracy" : "train_accuracy"},
          {"config_digest", model.config_digest},
          {"seed", seed}};
      sidecar["fold"] = fold ? nlohmann::json(*fold) : nlohmann::json(nullptr);
      write_file_atomic(sidecar_path(model.weights_path), sidecar.dump(2) + "\n");
    }
  }
  result.history.write_csv(out_dir / "history.csv");
  return result;
}

Classifier::Classifier(ClassifierNet net, ClassifierConfig config)
    : net_(std::move(net)), config_(std::move(config)) {
  net_->eval();
}

Classifier Classifier::load(const std::filesystem::path& weights) {
  const auto side = sidecar_path(weights);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(side));
  } catch (const std::exception& e) {
    throw std::runtime_error("cannot read model sidecar " + side.string() + ": " + e.what());
  }
  auto config = classifier_config_from_json(j.at("config"));
  if (config_digest(config) != j.at("config_digest").get<std::string>())
    throw std::runtime_error("model " + weights.string() +
                             ": config digest does not match its sidecar config");
  ClassifierNet net(config);
  load_state_dict(*net, read_state_dict(weights));
  return Classifier(std::move(net), std::move(config));
}

Probabilities Classifier::predict_proba(const std::vector<cv::Mat3b>& crops) {
  Probabilities out;
  if (crops.empty()) return out;
  torch::NoGradGuard no_grad;
  net_->eval();
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < crops.size(); start += kChunk) {
    const auto end = std::min(crops.size(), start + kChunk);
    std::vector<cv::Mat3b> chunk(crops.begin() + static_cast<std::ptrdiff_t>(start),
                                 crops.begin() + static_cast<std::ptrdiff_t>(end));
    auto probs = net_->forward(crops_to_batch(chunk, config_.input_size)).to(torch::kFloat64).contiguous();
    const auto cols = probs.size(1);
    const double* p = probs.data_ptr<double>();
    for (std::int64_t r = 0; r < probs.size(0); ++r) {
      if (cols == 1) {
        out.push_back({p[r], 1.0 - p[r]});
      } else {
        out.emplace_back(p + r * cols, p + (r + 1) * cols);
      }
    }
  }
  return out;
}

int decide_label(const std::vector<double>& probs, TaskId task, double threshold) {
  if (task != TaskId::seven_class) {
    if (probs.empty()) throw std::invalid_argument("decide_label: empty probability row");
    return probs[0] > threshold ? 0 : 1;
  }
  return static_cast<int>(argmax_lowest(probs));
}

}  // namespace lesion
