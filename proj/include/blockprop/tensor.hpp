#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace blockprop {

// Raised for shape and contract violations anywhere in the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense float32 array, row-major with the batch dimension outermost.
// Feature maps use (batch, channels, height, width).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor nchw(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                     float fill = 0.0f) {
    return Tensor(Shape{n, c, h, w}, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // 4-d accessors; only valid for rank-4 tensors.
  std::size_t n() const { return dim(0); }
  std::size_t c() const { return dim(1); }
  std::size_t h() const { return dim(2); }
  std::size_t w() const { return dim(3); }

  float& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  const float& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Pointer to the (n, c) plane of a rank-4 tensor.
  float* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_[1] + c) * shape_[2] * shape_[3]; }
  const float* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_[1] + c) * shape_[2] * shape_[3];
  }

  Tensor reshaped(Shape shape) const;
  void fill(float v);
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Throws Error naming `what` if any element is NaN or infinite.
void require_finite(const Tensor& t, const std::string& what);
void require_rank4(const Tensor& t, const std::string& what);

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace blockprop
