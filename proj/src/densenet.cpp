#include "lesion/densenet.hpp"

#include <array>

namespace lesion {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv(int in, int out, int kernel, int stride = 1, int padding = 0) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding).bias(false));
}

}  // namespace

DenseLayerImpl::DenseLayerImpl(int in_channels, int growth_rate, int bn_size) {
  norm1 = register_module("norm1", nn::BatchNorm2d(in_channels));
  conv1 = register_module("conv1", conv(in_channels, bn_size * growth_rate, 1));
  norm2 = register_module("norm2", nn::BatchNorm2d(bn_size * growth_rate));
  conv2 = register_module("conv2", conv(bn_size * growth_rate, growth_rate, 3, 1, 1));
}

torch::Tensor DenseLayerImpl::forward(torch::Tensor x) {
  auto y = conv1->forward(torch::relu(norm1->forward(x)));
  return conv2->forward(torch::relu(norm2->forward(y)));
}

DenseBlockImpl::DenseBlockImpl(int layers, int in_channels, int growth_rate, int bn_size) {
  for (int i = 0; i < layers; ++i)
    layers_.push_back(register_module("denselayer" + std::to_string(i + 1),
                                      DenseLayer(in_channels + i * growth_rate, growth_rate, bn_size)));
}

torch::Tensor DenseBlockImpl::forward(torch::Tensor x) {
  std::vector<torch::Tensor> maps{x};
  for (auto& layer : layers_) maps.push_back(layer->forward(torch::cat(maps, 1)));
  return torch::cat(maps, 1);
}

TransitionImpl::TransitionImpl(int in_channels, int out_channels) {
  norm = register_module("norm", nn::BatchNorm2d(in_channels));
  conv = register_module("conv", lesion::conv(in_channels, out_channels, 1));
}

torch::Tensor TransitionImpl::forward(torch::Tensor x) {
  return torch::avg_pool2d(conv->forward(torch::relu(norm->forward(x))), 2, 2);
}

DenseNet121Impl::DenseNet121Impl() {
  constexpr std::array<int, 4> kBlocks = {6, 12, 24, 16};
  constexpr int kGrowth = 32;
  constexpr int kBnSize = 4;
  constexpr int kInit = 64;

  nn::Sequential f;
  f->push_back("conv0", conv(3, kInit, 7, 2, 3));
  f->push_back("norm0", nn::BatchNorm2d(kInit));
  f->push_back("relu0", nn::ReLU());
  f->push_back("pool0", nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
  int channels = kInit;
  for (std::size_t b = 0; b < kBlocks.size(); ++b) {
    const auto idx = std::to_string(b + 1);
    f->push_back("denseblock" + idx, DenseBlock(kBlocks[b], channels, kGrowth, kBnSize));
    channels += kBlocks[b] * kGrowth;
    if (b + 1 < kBlocks.size()) {
      f->push_back("transition" + idx, Transition(channels, channels / 2));
      channels /= 2;
    }
  }
  f->push_back("norm5", nn::BatchNorm2d(channels));
  features = register_module("features", f);
}

torch::Tensor DenseNet121Impl::forward(torch::Tensor x) { return torch::relu(features->forward(x)); }

}  // namespace lesion
