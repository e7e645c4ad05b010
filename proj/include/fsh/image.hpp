#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <vector>

namespace fsh {

/// Three-channel image with values in [-1, 1]. Pixels are stored as a
/// 3 x (height*width) matrix, row-major over pixel positions.
struct Image {
  int height = 0;
  int width = 0;
  Eigen::MatrixXf pixels;

  Image() = default;
  Image(int h, int w, float fill = -1.0f) : height(h), width(w), pixels(Eigen::MatrixXf::Constant(3, h * w, fill)) {}

  auto at(int row, int col) { return pixels.col(row * width + col); }
  auto at(int row, int col) const { return pixels.col(row * width + col); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
  bool operator==(const Image& o) const { return same_shape(o) && pixels == o.pixels; }
};

/// 8-bit value v maps to v / 127.5 - 1.
inline float from_byte(unsigned char v) { return static_cast<float>(v) / 127.5f - 1.0f; }
unsigned char to_byte(float v);

/// Reads an 8-bit RGB (or RGBA/gray, converted) PNG. Throws DataError.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Lays images out left-to-right, top-to-bottom in a grid with `columns` tiles per row.
Image tile_images(const std::vector<Image>& images, int columns);

}  // namespace fsh
