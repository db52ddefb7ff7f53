#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "lesion/mask.hpp"

namespace lesion {

/// 8-bit BGR image -> float RGB tensor [3,H,W] scaled to [0,1].
torch::Tensor bgr_to_tensor(const cv::Mat3b& image);

/// CV_32FC3 BGR image -> float RGB tensor [3,H,W], values copied unchanged.
torch::Tensor float_bgr_to_tensor(const cv::Mat& image);

/// {0,1} mask -> float tensor [1,H,W].
torch::Tensor mask_to_tensor(const BinaryMask& mask);

/// Float tensor [H,W] -> single-channel float image.
cv::Mat1f tensor_to_map(const torch::Tensor& map);

using StateDict = std::map<std::string, torch::Tensor>;

/// Every parameter and buffer under its dotted module path.
StateDict state_dict(const torch::nn::Module& module);

/// Pickled {name: tensor} dictionary, written atomically. Files written by
/// Python's torch.save of a state dict use the same layout.
void save_state_dict(const torch::nn::Module& module, const std::filesystem::path& path);

/// Throws std::runtime_error if the file is unreadable or not a tensor dict.
StateDict read_state_dict(const std::filesystem::path& path);

struct LoadSummary {
  std::size_t loaded = 0;
  std::size_t skipped = 0;  ///< entries in the file with no counterpart
};

/// Copies matching entries into `module`. Every module entry whose name
/// starts with `prefix` must be present with the right shape, else throws.
LoadSummary load_state_dict(torch::nn::Module& module, const StateDict& dict,
                            const std::string& prefix = "");

}  // namespace lesion
