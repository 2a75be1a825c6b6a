#pragma once

// Shared plumbing for the rgbdo toolkit: error taxonomy and a minimal
// row-major raster container used for intensity, depth and color images.
//
// Error policy: hard failures (bad arguments, unreadable files, broken
// invariants) throw. Conditions that an alignment loop is expected to
// recover from per residual (pixel out of view, missing depth) are status
// values, not exceptions; see geometry.hpp / optim.hpp.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rgbdo {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad caller input: out-of-range parameter, violated precondition.
struct InvalidArgument : Error {
  using Error::Error;
};

// Projection of a point with non-positive depth.
struct BehindCameraError : Error {
  using Error::Error;
};

// Backprojection of a pixel whose stored depth is missing (d <= 0).
struct InvalidDepthError : Error {
  using Error::Error;
};

// A rank-deficient or otherwise unsolvable estimation problem.
struct DegenerateError : Error {
  using Error::Error;
};

// Linear algebra gave up: indefinite normal equations, damping ceiling.
struct NumericError : Error {
  using Error::Error;
};

// Missing file or directory.
struct NotFoundError : Error {
  using Error::Error;
};

// A dataset with no usable frames after association.
struct EmptySequenceError : Error {
  using Error::Error;
};

// Malformed input; carries the 1-based line number for text sources
// (line 0 means the source has no line structure, e.g. binary files).
struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error(what) {}
  ParseError(const std::string& what, int line_number)
      : Error(what + " (line " + std::to_string(line_number) + ")"),
        line(line_number) {}
  int line = 0;
};

// Dense row-major image container. (0,0) is the top-left pixel, x grows to
// the right, y grows downward.
template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, T fill = T{})
      : width_(width),
        height_(height),
        data_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    if (width < 0 || height < 0) throw InvalidArgument("Raster: negative dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  bool in_bounds(int x, int y) const {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  T& operator()(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& operator()(int x, int y) const {
    return data_[static_cast<std::size_t>(y) * width_ + x];
  }

  T& at(int x, int y) {
    if (!in_bounds(x, y)) throw InvalidArgument("Raster::at: index out of bounds");
    return (*this)(x, y);
  }
  const T& at(int x, int y) const {
    if (!in_bounds(x, y)) throw InvalidArgument("Raster::at: index out of bounds");
    return (*this)(x, y);
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

// Linear RGB triple in [0, 1].
struct Rgb {
  float r = 0.f;
  float g = 0.f;
  float b = 0.f;
};

using RasterF = Raster<float>;
using RasterRgb = Raster<Rgb>;

}  // namespace rgbdo
