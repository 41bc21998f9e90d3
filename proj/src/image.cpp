#include "attdrive/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "attdrive/errors.hpp"

namespace attdrive {

Image8 quantize(const nn::Tensor& frame) {
  if (frame.dims().size() != 3 || frame.dim(2) != 3)
    throw ShapeError("quantize: frame must be {W,H,3}");
  const int W = frame.dim(0), H = frame.dim(1);
  Image8 img;
  img.w = W;
  img.h = H;
  img.rgb.resize(static_cast<std::size_t>(W) * H * 3);
  auto d = frame.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = d[nn::Tensor::at3(H, 3, x, y, c)] * 255.0;
        const double r = std::nearbyint(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
        img.at(x, y, c) = static_cast<std::uint8_t>(r);
      }
  return img;
}

nn::Tensor to_tensor(const Image8& img) {
  if (img.w <= 0 || img.h <= 0 ||
      img.rgb.size() != static_cast<std::size_t>(img.w) * img.h * 3)
    throw ShapeError("to_tensor: malformed image");
  nn::Tensor t({img.w, img.h, 3});
  auto d = t.data();
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c)
        d[nn::Tensor::at3(img.h, 3, x, y, c)] = img.at(x, y, c) / 255.0;
  return t;
}

void write_ppm(const std::string& path, const Image8& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw IoError("write_ppm: short write to " + path);
}

Image8 read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw IoError("read_ppm: " + path + " is not P6");
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0 || maxval != 255)
    throw IoError("read_ppm: bad header in " + path);
  f.get();  // single whitespace after maxval
  Image8 img;
  img.w = w;
  img.h = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(img.rgb.data()),
         static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw IoError("read_ppm: truncated pixel data in " + path);
  return img;
}

}  // namespace attdrive
