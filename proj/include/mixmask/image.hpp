#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mixmask {

// Per-channel affine normalization applied to [0,1] pixel values:
// normalized = (value - mean[c]) / std[c].
struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;

  bool identity() const { return mean.empty(); }
  float lo(int c) const { return identity() ? 0.0f : (0.0f - mean[c]) / std[c]; }
  float hi(int c) const { return identity() ? 1.0f : (1.0f - mean[c]) / std[c]; }
};

// A batch of images in NCHW layout, values already normalized. labels is
// either empty or holds one class id per image.
struct ImageBatch {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;
  std::vector<int> labels;
  Normalization norm;

  std::size_t size() const {
    std::size_t per = static_cast<std::size_t>(channels) * height * width;
    return per == 0 ? 0 : data.size() / per;
  }
  std::size_t pixels_per_image() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  float* image(std::size_t n) { return data.data() + n * pixels_per_image(); }
  const float* image(std::size_t n) const {
    return data.data() + n * pixels_per_image();
  }
  float& at(std::size_t n, int c, int y, int x) {
    return data[((n * channels + c) * height + y) * width + x];
  }
  float at(std::size_t n, int c, int y, int x) const {
    return data[((n * channels + c) * height + y) * width + x];
  }
};

// Throws std::invalid_argument describing the first problem found: empty
// batch, inconsistent sizes, mismatched labels, or non-finite values.
void validate(const ImageBatch& batch);

}  // namespace mixmask
