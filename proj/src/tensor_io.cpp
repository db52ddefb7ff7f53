#include "lesion/tensor_io.hpp"

#include <cstring>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "lesion/fsutil.hpp"

namespace lesion {

torch::Tensor bgr_to_tensor(const cv::Mat3b& image) {
  cv::Mat rgb;
  cv::cvtColor(image, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  return torch::from_blob(f.data, {f.rows, f.cols, 3}, torch::kFloat32).permute({2, 0, 1}).clone();
}

torch::Tensor float_bgr_to_tensor(const cv::Mat& image) {
  if (image.type() != CV_32FC3) throw std::invalid_argument("expected a CV_32FC3 image");
  cv::Mat rgb;
  cv::cvtColor(image, rgb, cv::COLOR_BGR2RGB);
  if (!rgb.isContinuous()) rgb = rgb.clone();
  return torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kFloat32)
      .permute({2, 0, 1})
      .clone();
}

torch::Tensor mask_to_tensor(const BinaryMask& mask) {
  cv::Mat1b m = mask.pixels.isContinuous() ? mask.pixels : mask.pixels.clone();
  return torch::from_blob(m.data, {1, m.rows, m.cols}, torch::kUInt8).to(torch::kFloat32);
}

cv::Mat1f tensor_to_map(const torch::Tensor& map) {
  if (map.dim() != 2) throw std::invalid_argument("expected a 2-D tensor");
  auto t = map.detach().to(torch::kFloat32).contiguous();
  cv::Mat1f out(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)));
  std::memcpy(out.data, t.data_ptr<float>(), out.total() * sizeof(float));
  return out;
}

StateDict state_dict(const torch::nn::Module& module) {
  StateDict out;
  for (const auto& p : module.named_parameters(true)) out.emplace(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) out.emplace(b.key(), b.value());
  return out;
}

void save_state_dict(const torch::nn::Module& module, const std::filesystem::path& path) {
  c10::Dict<std::string, torch::Tensor> dict;
  for (const auto& [name, t] : state_dict(module)) dict.insert(name, t.detach().cpu());
  const auto bytes = torch::pickle_save(dict);
  write_file_atomic(path, std::string_view(bytes.data(), bytes.size()));
}

StateDict read_state_dict(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw std::runtime_error("weights file " + path.string() + ": " + e.what());
  }
  StateDict out;
  try {
    const auto value = torch::pickle_load(std::vector<char>(bytes.begin(), bytes.end()));
    if (!value.isGenericDict()) throw std::runtime_error("not a dictionary");
    for (const auto& entry : value.toGenericDict()) {
      if (!entry.key().isString() || !entry.value().isTensor())
        throw std::runtime_error("entries must map names to tensors");
      out.emplace(entry.key().toStringRef(), entry.value().toTensor());
    }
  } catch (const std::exception& e) {
    throw std::runtime_error("corrupt weights file " + path.string() + ": " + e.what());
  }
  return out;
}

LoadSummary load_state_dict(torch::nn::Module& module, const StateDict& dict,
                            const std::string& prefix) {
  LoadSummary summary;
  torch::NoGradGuard no_grad;
  auto targets = state_dict(module);
  for (auto& [name, target] : targets) {
    if (name.rfind(prefix, 0) != 0) continue;
    auto it = dict.find(name);
    if (it == dict.end()) throw std::runtime_error("weights file lacks '" + name + "'");
    if (it->second.sizes() != target.sizes())
      throw std::runtime_error("shape mismatch for '" + name + "'");
    target.copy_(it->second.to(target.dtype()));
    ++summary.loaded;
  }
  for (const auto& [name, t] : dict)
    if (name.rfind(prefix, 0) != 0 || !targets.count(name)) ++summary.skipped;
  return summary;
}

}  // namespace lesion
