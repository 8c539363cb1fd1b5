#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellmamba/core/tensor.hpp"

namespace cm {

// 8-bit RGB raster, row-major, tightly packed (h * w * 3 bytes).
struct ImageU8 {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> rgb;

  bool empty() const { return h == 0 || w == 0; }
  std::uint8_t* pixel(int y, int x) { return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3; }
  const std::uint8_t* pixel(int y, int x) const {
    return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3;
  }
};

// Integer label raster: 0 = background, k > 0 = instance id k.
struct LabelRaster {
  int h = 0;
  int w = 0;
  std::vector<std::uint16_t> labels;

  std::uint16_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
  std::uint16_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * w + x]; }
};

// PNG I/O. Reads promote grayscale/palette/alpha inputs to 8-bit RGB; label
// rasters are stored as 16-bit grayscale PNG.
ImageU8 read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const ImageU8& img);
LabelRaster read_png_labels(const std::string& path);
void write_png_labels(const std::string& path, const LabelRaster& mask);

// Portable graymap label rasters (P2 text or P5 binary; maxval up to 65535).
LabelRaster read_pgm_labels(const std::string& path);
void write_pgm_labels(const std::string& path, const LabelRaster& mask);

// Dispatches on extension: .png / .pgm.
LabelRaster read_labels(const std::string& path);

// [1,H,W,3] float tensor in [0,1] <-> 8-bit RGB. from_tensor clamps.
template <typename S>
Tensor<S> image_to_tensor(const ImageU8& img) {
  CM_CHECK(!img.empty(), "image_to_tensor: empty image");
  Tensor<S> t({1, img.h, img.w, 3});
  S* d = t.data();
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    d[i] = static_cast<S>(img.rgb[i]) / S(255);
  }
  return t;
}

template <typename S>
ImageU8 tensor_to_image(const Tensor<S>& t) {
  CM_CHECK(t.rank() == 4 && t.dim(0) == 1 && t.dim(3) == 3,
           "tensor_to_image: expected [1,H,W,3], got ", shape_str(t.shape()));
  ImageU8 img;
  img.h = static_cast<int>(t.dim(1));
  img.w = static_cast<int>(t.dim(2));
  img.rgb.resize(t.numel());
  const S* d = t.data();
  for (i64 i = 0; i < t.numel(); ++i) {
    double v = static_cast<double>(d[i]) * 255.0;
    img.rgb[i] = static_cast<std::uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v + 0.5));
  }
  return img;
}

}  // namespace cm
