#include "doctest_torch.hpp"

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "lesion/error.hpp"
#include "lesion/fsutil.hpp"
#include "lesion/plateau.hpp"
#include "lesion/segmentation.hpp"
#include "lesion/synthetic.hpp"

using namespace lesion;
using lesion::testing::TempDir;

namespace {

// Closed-form trainable parameter count of the U-Net layer graph.
std::int64_t unet_params_oracle(int depth, int filters) {
  auto conv_block = [](std::int64_t in, std::int64_t out) {
    return (9 * in * out + out) + 2 * out + (9 * out * out + out) + 2 * out;
  };
  std::int64_t total = 0, in = 3;
  for (int i = 0; i < depth; ++i) {
    const std::int64_t c = static_cast<std::int64_t>(filters) << i;
    total += conv_block(in, c);
    in = c;
  }
  total += conv_block(in, 2 * in);
  in *= 2;
  for (int i = depth - 1; i >= 0; --i) {
    const std::int64_t c = static_cast<std::int64_t>(filters) << i;
    total += 4 * in * c + c + conv_block(2 * c, c);
    in = c;
  }
  return total + in + 1;
}

std::vector<SegSample> disc_samples(int n, int h, int w, std::uint64_t seed) {
  std::vector<SegSample> out;
  for (int i = 0; i < n; ++i) {
    auto s = synthetic_lesion(h, w, kAllClasses[static_cast<std::size_t>(i) % 7], seed + i);
    out.push_back({"img" + std::to_string(i), s.image, s.mask});
  }
  return out;
}

SegmenterConfig tiny_config() {
  SegmenterConfig c;
  c.input_height = 32;
  c.input_width = 48;
  c.depth = 2;
  c.primary_filters = 4;
  return c;
}

}  // namespace

TEST_CASE("plateau controller: one x0.01 reduction, then stop") {
  PlateauController p({1, 0.01}, 1e-3);
  CHECK(p.observe(0.5) == PlateauAction::improved);
  CHECK(p.observe(0.5) == PlateauAction::reduce_lr);
  CHECK(p.lr() == doctest::Approx(1e-5));
  CHECK(p.observe(0.5) == PlateauAction::stop);
  CHECK(p.reductions() == 1);
  CHECK(p.stopped());

  SUBCASE("improvements reset the counter") {
    PlateauController q({2, 0.1}, 1.0);
    CHECK(q.observe(0.1) == PlateauAction::improved);
    CHECK(q.observe(0.1) == PlateauAction::waiting);
    CHECK(q.observe(0.2) == PlateauAction::improved);
    CHECK(q.observe(0.2) == PlateauAction::waiting);
    CHECK(q.observe(0.15) == PlateauAction::reduce_lr);
    CHECK(q.observe(0.3) == PlateauAction::improved);
    CHECK(q.observe(0.3) == PlateauAction::waiting);
    CHECK(q.observe(0.3) == PlateauAction::stop);
    CHECK(q.lr() == doctest::Approx(0.1));
  }
  SUBCASE("invalid policies") {
    CHECK_THROWS_AS(PlateauController({0, 0.1}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(PlateauController({1, 1.0}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(PlateauController({1, 0.5}, 0.0), std::invalid_argument);
  }
}

TEST_CASE("segmenter config validation") {
  SegmenterConfig c;
  CHECK(c.input_height == 224);
  CHECK(c.input_width == 320);
  CHECK_NOTHROW(c.validate());
  c.input_height = 225;
  try {
    c.validate();
    FAIL("expected a divisibility error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("divisible by 2^depth = 32") != std::string::npos);
  }
  c = {};
  c.dropout_rate = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.primary_filters = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  TrainSchedule s;
  CHECK(s.max_epochs == 150);
  CHECK(s.batch_size == 24);
  s.plateau_factor = 1.5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("U-Net channel layout and parameter count") {
  SegmenterConfig c;
  UNet net(c);
  const std::vector<int> expected_channels = {32, 64, 128, 256, 512};
  CHECK(net->encoder_channels() == expected_channels);
  CHECK(net->bottleneck_channels() == 1024);
  // The same layout read from the registered weights.
  const auto params = net->named_parameters();
  for (int i = 0; i < 5; ++i)
    CHECK(params["down" + std::to_string(i) + ".body.0.weight"].size(0) == (32 << i));
  CHECK(params["bottleneck.body.0.weight"].size(0) == 1024);
  CHECK(params["head.weight"].size(0) == 1);

  CHECK(parameter_count(*net) == unet_params_oracle(5, 32));
  SegmenterConfig small = c;
  small.primary_filters = 16;
  UNet net16(small);
  CHECK(parameter_count(*net16) == unet_params_oracle(5, 16));
  CHECK(parameter_count(*net16) < parameter_count(*net));
}

TEST_CASE("U-Net output spatial size equals input size") {
  torch::NoGradGuard no_grad;
  SegmenterConfig c;
  c.primary_filters = 2;
  UNet net(c);
  net->eval();
  auto y = net->forward(torch::rand({1, 3, 224, 320}));
  const std::vector<std::int64_t> full = {1, 1, 224, 320};
  CHECK(y.sizes().vec() == full);
  auto t = tiny_config();
  UNet tiny(t);
  tiny->eval();
  const std::vector<std::int64_t> small = {3, 1, 32, 48};
  CHECK(tiny->forward(torch::rand({3, 3, 32, 48})).sizes().vec() == small);
}

TEST_CASE("train, checkpoint, reload and predict") {
  TempDir dir("seg");
  const auto train = disc_samples(6, 40, 60, 11);
  const auto val = disc_samples(2, 40, 60, 99);
  TrainSchedule s;
  s.max_epochs = 6;
  s.batch_size = 3;
  s.initial_lr = 1e-2;
  s.plateau_patience = 2;
  const auto result = train_segmenter(train, val, tiny_config(), s, 5, dir.path());

  const auto& h = result.history.epochs;
  REQUIRE(!h.empty());
  CHECK(h.size() <= 6);
  double best = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    REQUIRE(h[i].val_acc.has_value());
    best = std::max(best, *h[i].val_acc);
    if (i > 0) {
      CHECK(h[i].lr <= h[i - 1].lr);
      if (h[i].lr < h[i - 1].lr) CHECK(h[i].lr == doctest::Approx(h[i - 1].lr * 0.01));
    }
  }
  CHECK(result.checkpoint.monitored_value == best);
  CHECK(*h[static_cast<std::size_t>(result.checkpoint.epoch)].val_acc == best);
  CHECK(std::filesystem::exists(dir.path() / "segmenter.pt"));
  CHECK(std::filesystem::exists(dir.path() / "history.csv"));
  const auto sidecar = nlohmann::json::parse(read_file(dir.path() / "segmenter.json"));
  for (const char* key : {"config", "schedule", "epoch", "monitored_value", "config_digest"})
    CHECK(sidecar.contains(key));
  CHECK(sidecar["config_digest"] == config_digest(tiny_config(), s));
  const auto csv = read_file(dir.path() / "history.csv");
  CHECK(csv.rfind("epoch,train_loss,val_loss,train_acc,val_acc,lr\n", 0) == 0);

  auto model = Segmenter::load(result.checkpoint.weights_path);
  const auto maps = model.predict(std::vector{train[0].image, train[1].image, val[0].image});
  REQUIRE(maps.size() == 3);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    CHECK(maps[i].size() == cv::Size(60, 40));
    double lo, hi;
    cv::minMaxLoc(maps[i], &lo, &hi);
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);
  }
  // Inference is deterministic and batching preserves order.
  const auto once = model.predict(val[0].image);
  CHECK(cv::norm(model.predict(val[0].image), once, cv::NORM_INF) == 0.0);
  CHECK(cv::norm(once, maps[2], cv::NORM_INF) < 1e-5);
  CHECK(cv::norm(model.predict(train[1].image), maps[1], cv::NORM_INF) < 1e-5);

  const auto report = evaluate_segmenter(model, val);
  CHECK(report.images == 2);
  CHECK(report.pixel_accuracy >= 0.0);
  CHECK(report.pixel_accuracy <= 1.0);
  CHECK_THROWS_AS(evaluate_segmenter(model, {}), std::invalid_argument);

  SUBCASE("corrupt weights are a hard failure") {
    std::ofstream(dir.path() / "segmenter.pt", std::ios::trunc) << "not a pickle";
    CHECK_THROWS_AS(Segmenter::load(dir.path() / "segmenter.pt"), std::runtime_error);
  }
  SUBCASE("tampered sidecar fails the digest check") {
    auto j = sidecar;
    j["config"]["dropout_rate"] = 0.1;
    write_file_atomic(dir.path() / "segmenter.json", j.dump());
    CHECK_THROWS_WITH_AS(Segmenter::load(dir.path() / "segmenter.pt"),
                         doctest::Contains("digest"), std::runtime_error);
  }
}

TEST_CASE("training preconditions") {
  TempDir dir("seg_pre");
  TrainSchedule s;
  s.max_epochs = 1;
  CHECK_THROWS_AS(train_segmenter({}, {}, tiny_config(), s, 1, dir.path()), std::invalid_argument);
  auto bad = disc_samples(3, 32, 48, 1);
  bad[1].mask.pixels = cv::Mat1b::zeros(10, 10);
  try {
    train_segmenter(bad, {}, tiny_config(), s, 1, dir.path());
    FAIL("expected RecordError");
  } catch (const RecordError& e) {
    const std::vector<std::string> expected_ids = {"img1"};
    CHECK(e.ids() == expected_ids);
  }
}

TEST_CASE("same seed reproduces the first epoch loss") {
  TempDir a("seg_a"), b("seg_b");
  const auto train = disc_samples(4, 32, 48, 3);
  TrainSchedule s;
  s.max_epochs = 1;
  s.batch_size = 2;
  const auto r1 = train_segmenter(train, {}, tiny_config(), s, 42, a.path());
  const auto r2 = train_segmenter(train, {}, tiny_config(), s, 42, b.path());
  CHECK(r1.history.epochs[0].train_loss == r2.history.epochs[0].train_loss);
  CHECK_FALSE(r1.history.epochs[0].val_acc.has_value());
}
