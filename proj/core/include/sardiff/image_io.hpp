#pragma once

#include <string>
#include <vector>

#include "sardiff/tensor.hpp"

namespace sardiff {

/// 8-bit image, row-major interleaved, channels 1 (gray) or 3 (RGB).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<unsigned char> pixels;
};

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

/// u8 [0,255] -> float [-1,1], planar [C,H,W].
Tensor image_to_tensor(const ImageU8& img);
/// float [-1,1] -> u8, clamping out-of-range values.
ImageU8 tensor_to_image(const Tensor& chw);

Tensor load_image_tensor(const std::string& path);
void save_image_tensor(const std::string& path, const Tensor& chw);

}  // namespace sardiff
