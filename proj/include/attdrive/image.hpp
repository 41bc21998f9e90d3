#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attdrive/tensor.hpp"

namespace attdrive {

// 8-bit RGB image, PPM-style layout: rows top to bottom, pixels left to
// right, so rgb[(y*w + x)*3 + c].
struct Image8 {
  int w = 0;
  int h = 0;
  std::vector<std::uint8_t> rgb;

  std::uint8_t& at(int x, int y, int c) {
    return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  }
};

// Float frame {W,H,3} in [0,1] -> u8 (round, clamp). This is the single
// quantization point shared by dataset recording and closed-loop inference.
Image8 quantize(const nn::Tensor& frame);

// u8 -> float frame {W,H,3}, value/255.
nn::Tensor to_tensor(const Image8& img);

// Binary PPM (P6, maxval 255).
void write_ppm(const std::string& path, const Image8& img);
Image8 read_ppm(const std::string& path);

}  // namespace attdrive
