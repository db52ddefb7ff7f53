#pragma once

#include <torch/torch.h>

namespace lesion {

class DenseLayerImpl : public torch::nn::Module {
public:
  DenseLayerImpl(int in_channels, int growth_rate, int bn_size);
  /// New feature maps only; the enclosing block concatenates.
  torch::Tensor forward(torch::Tensor x);

private:
  torch::nn::BatchNorm2d norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(DenseLayer);

class DenseBlockImpl : public torch::nn::Module {
public:
  DenseBlockImpl(int layers, int in_channels, int growth_rate, int bn_size);
  torch::Tensor forward(torch::Tensor x);

private:
  std::vector<DenseLayer> layers_;
};
TORCH_MODULE(DenseBlock);

class TransitionImpl : public torch::nn::Module {
public:
  TransitionImpl(int in_channels, int out_channels);
  torch::Tensor forward(torch::Tensor x);

private:
  torch::nn::BatchNorm2d norm{nullptr};
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Transition);

/// DenseNet-121 feature extractor (blocks of 6, 12, 24, 16 layers, growth 32).
/// Parameter names follow torchvision (`features.denseblock1.denselayer1.
/// norm1.weight`, ...) so its ImageNet state dict loads directly. forward()
/// returns the ReLU'd final feature map with `kFeatures` channels.
class DenseNet121Impl : public torch::nn::Module {
public:
  static constexpr int kFeatures = 1024;

  DenseNet121Impl();
  torch::Tensor forward(torch::Tensor x);

  torch::nn::Sequential features{nullptr};
};
TORCH_MODULE(DenseNet121);

}  // namespace lesion
