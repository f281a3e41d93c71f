#include "rlp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rlp {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

float Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) {
    grad_.assign(data_.size(), 0.0f);
  } else {
    grad_.clear();
  }
}

void Tensor::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0f); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::check_finite(const char* what) const {
  for (float v : data_) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value in ") + what);
  }
}

}  // namespace rlp
