#include "lesion/synthetic.hpp"

#include <algorithm>
#include <array>

#include <opencv2/imgproc.hpp>

namespace lesion {

namespace {

// BGR lesion tint per class, in enum order.
constexpr std::array<std::array<int, 3>, 7> kPalette = {{{60, 60, 150},
                                                         {110, 80, 170},
                                                         {70, 110, 140},
                                                         {90, 120, 120},
                                                         {40, 30, 50},
                                                         {50, 70, 110},
                                                         {80, 40, 190}}};

}  // namespace

SyntheticLesion synthetic_lesion(int height, int width, LesionClass cls, std::uint64_t seed) {
  cv::RNG rng(seed);
  SyntheticLesion out;
  out.image = cv::Mat3b(height, width, cv::Vec3b(150, 170, 205));
  cv::Mat noise(height, width, CV_16SC3);
  rng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(8));
  cv::add(out.image, noise, out.image, cv::noArray(), CV_8UC3);

  const cv::Point center(width / 2 + rng.uniform(-width / 8, width / 8 + 1),
                         height / 2 + rng.uniform(-height / 8, height / 8 + 1));
  const cv::Size axes(std::max(2, static_cast<int>(width * rng.uniform(0.18, 0.3))),
                      std::max(2, static_cast<int>(height * rng.uniform(0.18, 0.3))));
  const double angle = rng.uniform(0.0, 180.0);

  out.mask.pixels = cv::Mat1b::zeros(height, width);
  cv::ellipse(out.mask.pixels, center, axes, angle, 0, 360, cv::Scalar(1), cv::FILLED);
  const auto& tint = kPalette[static_cast<std::size_t>(cls)];
  cv::Mat3b lesion(height, width, cv::Vec3b(static_cast<uchar>(tint[0]), static_cast<uchar>(tint[1]),
                                            static_cast<uchar>(tint[2])));
  rng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(10));
  cv::add(lesion, noise, lesion, cv::noArray(), CV_8UC3);
  lesion.copyTo(out.image, out.mask.pixels);
  return out;
}

}  // namespace lesion
