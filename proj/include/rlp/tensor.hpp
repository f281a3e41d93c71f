#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown when operand extents are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major float32 array. A rank-0 tensor (empty shape) is a scalar.
///
/// The gradient buffer exists iff requires_grad() is set and always has the
/// same extent as the data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  /// Value of a single-element tensor.
  float item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);
  std::span<float> grad() { return grad_; }
  std::span<const float> grad() const { return grad_; }
  void zero_grad();

  /// Copy with a new shape of equal element count.
  Tensor reshaped(Shape shape) const;
  /// Throws NonFiniteError naming `what` if any element is NaN or Inf.
  void check_finite(const char* what) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
  std::vector<float> grad_;
  bool requires_grad_ = false;
};

}  // namespace rlp
