#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace wavedepth {

// Extents of a rank-4 grid: (batch, channel, height, width).
struct Shape {
  std::array<std::size_t, 4> dims{0, 0, 0, 0};

  Shape() = default;
  Shape(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
      : dims{n, c, h, w} {}

  std::size_t n() const { return dims[0]; }
  std::size_t c() const { return dims[1]; }
  std::size_t h() const { return dims[2]; }
  std::size_t w() const { return dims[3]; }
  std::size_t operator[](std::size_t i) const { return dims[i]; }
  std::size_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3]; }

  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dense rank-4 tensor of doubles, row-major with width fastest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape(1, 1, 1, 1), v); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y,
                     std::size_t x) const {
    return ((n * shape_.dims[1] + c) * shape_.dims[2] + y) * shape_.dims[3] + x;
  }
  double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[offset(n, c, y, x)];
  }
  double at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }

  double item() const;

  // Same data, new extents with equal element count.
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  bool all_finite() const;
  double sum() const;
  double sum_squares() const;
  double max_abs() const;

  // Bitwise equality of shape and every element.
  bool identical(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Largest |a - b| over matching elements.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace wavedepth
