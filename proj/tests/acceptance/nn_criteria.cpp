#include <cmath>
#include <filesystem>
#include <sstream>

#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "criteria.hpp"
#include "fixtures.hpp"
#include "lesion/classifier.hpp"
#include "lesion/plateau.hpp"
#include "lesion/segmentation.hpp"
#include "lesion/synthetic.hpp"

namespace lesion::acceptance {

namespace {

template <typename... Parts>
std::string str(const Parts&... parts) {
  std::ostringstream out;
  (out << ... << parts);
  return out.str();
}

ClassifierConfig random_init(TaskId task) {
  auto c = ClassifierConfig::for_task(task);
  c.allow_random_init = true;
  return c;
}

}  // namespace

Outcome architecture_shapes() {
  torch::NoGradGuard no_grad;
  torch::manual_seed(1);
  std::ostringstream detail;

  UNet unet(SegmenterConfig{});
  unet->eval();
  const auto seg = unet->forward(torch::rand({1, 3, 224, 320}));
  const bool seg_ok = seg.size(1) == 1 && seg.size(2) == 224 && seg.size(3) == 320;
  detail << "U-Net 224x320 -> " << seg.size(2) << "x" << seg.size(3);

  const std::vector<std::string> chain = {
      "torch::nn::AdaptiveAvgPool2dImpl", "torch::nn::FlattenImpl", "torch::nn::LinearImpl",
      "torch::nn::ReLUImpl", "torch::nn::BatchNorm1dImpl", "torch::nn::DropoutImpl",
      "torch::nn::LinearImpl"};
  bool head_ok = true;
  for (TaskId task : {TaskId::mel_vs_nv, TaskId::seven_class}) {
    ClassifierNet net(random_init(task));
    auto expected = chain;
    expected.push_back(task == TaskId::seven_class ? "torch::nn::SoftmaxImpl" : "torch::nn::SigmoidImpl");
    const auto params = net->head->named_parameters();
    const std::int64_t arity = task == TaskId::seven_class ? 7 : 1;
    head_ok &= net->head_layers() == expected && params["2.weight"].size(0) == 256 &&
               params["6.weight"].size(0) == arity &&
               net->head[5]->as<torch::nn::Dropout>()->options.p() == 0.25;
  }
  detail << "; head chain " << (head_ok ? "matches" : "differs");

  ClassifierNet seven(random_init(TaskId::seven_class));
  seven->eval();
  const auto p = seven->forward(torch::randn({4, 3, 224, 224}));
  const double err = (p.sum(1) - 1).abs().max().item<double>();
  const bool simplex = p.size(1) == 7 && err < 1e-6 && p.min().item<float>() >= 0.0f;
  detail << "; 7-class row-sum error " << err;
  return {seg_ok && head_ok && simplex, detail.str()};
}

Outcome overfit_smoke() {
  std::ostringstream detail;
  testing::TempDir dir("acceptance_smoke");

  // Segmenter: 16 synthetic lesions, reduced network, Adam at lr 1e-3.
  std::vector<SegSample> seg_train;
  for (int i = 0; i < 16; ++i) {
    auto s = synthetic_lesion(96, 128, kAllClasses[static_cast<std::size_t>(i) % 7],
                              1000 + static_cast<std::uint64_t>(i));
    seg_train.push_back({"s" + std::to_string(i), s.image, s.mask});
  }
  SegmenterConfig sc;
  sc.input_height = 64;
  sc.input_width = 96;
  sc.depth = 3;
  sc.primary_filters = 8;
  TrainSchedule ss;
  ss.max_epochs = 50;
  ss.batch_size = 4;
  const auto seg = train_segmenter(seg_train, {}, sc, ss, 1, dir.path() / "seg");
  double seg_best = 0.0;
  int seg_epoch = -1;
  for (const auto& e : seg.history.epochs)
    if (e.train_acc > seg_best) {
      seg_best = e.train_acc;
      if (seg_epoch < 0 && e.train_acc >= 0.95) seg_epoch = e.epoch;
    }
  auto seg_model = Segmenter::load(seg.checkpoint.weights_path);
  const auto native = evaluate_segmenter(seg_model, seg_train);
  const bool seg_ok = seg_epoch >= 0 && native.pixel_accuracy >= 0.95;
  detail << "segmenter train pixel acc " << seg_best << " (>=0.95 at epoch " << seg_epoch
         << ", checkpoint " << native.pixel_accuracy << " at native size)";

  // Classifier: 8 crops, full DenseNet-121 + head at 224x224, binary defaults.
  std::vector<ClsSample> crops;
  for (int i = 0; i < 8; ++i) {
    const int label = i % 2;
    auto s = synthetic_lesion(224, 224, label == 0 ? LesionClass::mel : LesionClass::nv,
                              2000 + static_cast<std::uint64_t>(i));
    crops.push_back({"c" + std::to_string(i), s.image, label});
  }
  auto cc = random_init(TaskId::mel_vs_nv);
  const auto clf = train_classifier(crops, {}, cc, 1, dir.path() / "clf");
  int clf_epoch = -1;
  for (const auto& e : clf.history.epochs)
    if (clf_epoch < 0 && e.train_acc == 1.0) clf_epoch = e.epoch;
  const bool clf_ok = clf_epoch >= 0;
  detail << "; classifier 100% train acc at epoch " << clf_epoch << " of " << cc.epochs;

  // Plateau schedule under a metric that never improves.
  PlateauController plateau({1, 0.01}, 1e-3);
  int reductions = 0, epochs = 0;
  std::vector<double> lrs;
  for (; epochs < 100; ++epochs) {
    lrs.push_back(plateau.lr());
    const auto a = plateau.observe(0.5);
    reductions += a == PlateauAction::reduce_lr;
    if (a == PlateauAction::stop) break;
  }
  const bool plateau_ok = reductions == 1 && plateau.stopped() &&
                          std::abs(plateau.lr() - 1e-5) < 1e-18 && epochs == 2;
  detail << "; plateau " << reductions << " reduction(s), lr " << plateau.lr() << ", stop after epoch "
         << epochs;
  return {seg_ok && clf_ok && plateau_ok, detail.str()};
}

}  // namespace lesion::acceptance
