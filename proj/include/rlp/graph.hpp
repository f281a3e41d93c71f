#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

#include "rlp/tensor.hpp"

namespace rlp {

enum class Primitive : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kConv2d,
  kRelu,
  kLeakyRelu,
  kMean,
  kSum,
  kAbs,
  kClamp,
  kReshape,
  kPad,
  kSlice,
  kSoftmax,
  kLogSoftmax,
  kSpatialMean,
};

std::string_view primitive_name(Primitive op);

/// Per-op scalar and geometric parameters.
///  - leaky_relu: lo = negative slope
///  - clamp: [lo, hi]
///  - conv2d: window[0] = padding
///  - pad: window = {top, bottom, left, right}
///  - slice: window = {row0, row1, col0, col1}
///  - reshape: shape
struct OpAttrs {
  float lo = 0.0f;
  float hi = 0.0f;
  std::array<std::size_t, 4> window{};
  Shape shape;
};

/// Handle to a value recorded on a Graph.
struct Var {
  std::uint32_t id = UINT32_MAX;
};

/// Tape of primitive applications in creation (hence topological) order.
///
/// Leaves are either constants or bound to an external Tensor. When a bound
/// tensor has requires_grad set, backward() accumulates dL/dtensor into its
/// grad buffer. Nodes whose inputs carry no gradient are recorded as plain
/// values with no backward work. A graph can be differentiated once.
///
/// Binary elementwise ops broadcast operands of equal rank whose extents are
/// equal or 1. Images are NCHW.
class Graph {
 public:
  Var constant(Tensor value);
  /// Binds an external tensor. The tensor must outlive the graph's backward().
  Var bind(Tensor& tensor);

  const Tensor& value(Var v) const;
  bool tracks_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  Var apply(Primitive op, std::initializer_list<Var> inputs, const OpAttrs& attrs = {});

  Var add(Var a, Var b) { return apply(Primitive::kAdd, {a, b}); }
  Var sub(Var a, Var b) { return apply(Primitive::kSub, {a, b}); }
  Var mul(Var a, Var b) { return apply(Primitive::kMul, {a, b}); }
  /// [m,k] x [k,n] -> [m,n]
  Var matmul(Var a, Var b) { return apply(Primitive::kMatMul, {a, b}); }
  /// x [N,Cin,H,W], w [Cout,Cin,k,k], bias [Cout] -> [N,Cout,H+2p-k+1,W+2p-k+1]
  Var conv2d(Var x, Var w, Var bias, std::size_t padding);
  Var conv2d(Var x, Var w, std::size_t padding);
  Var relu(Var x) { return apply(Primitive::kRelu, {x}); }
  Var leaky_relu(Var x, float slope);
  Var mean(Var x) { return apply(Primitive::kMean, {x}); }
  Var sum(Var x) { return apply(Primitive::kSum, {x}); }
  /// Backward uses sign(x) with sign(0) = 0.
  Var abs(Var x) { return apply(Primitive::kAbs, {x}); }
  Var clamp(Var x, float lo, float hi);
  Var reshape(Var x, Shape shape);
  /// Zero-pads the two trailing (spatial) axes.
  Var pad(Var x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right);
  /// Crops the two trailing (spatial) axes to [row0,row1) x [col0,col1).
  Var slice(Var x, std::size_t row0, std::size_t row1, std::size_t col0, std::size_t col1);
  Var softmax(Var x) { return apply(Primitive::kSoftmax, {x}); }
  Var log_softmax(Var x) { return apply(Primitive::kLogSoftmax, {x}); }
  /// [N,C,H,W] -> [N,C]
  Var spatial_mean(Var x) { return apply(Primitive::kSpatialMean, {x}); }

  /// Reverse-mode sweep from a single-element root. Consumes the graph.
  void backward(Var root);

 private:
  struct Node {
    Primitive op = Primitive::kLeaf;
    std::array<std::int32_t, 3> in{-1, -1, -1};
    OpAttrs attrs;
    Tensor value;
    Tensor* bound = nullptr;
    bool tracks_grad = false;
  };

  const Node& node(Var v) const;
  Tensor forward(Primitive op, const std::vector<const Tensor*>& xs, const OpAttrs& attrs) const;
  void backprop(const Node& n, const std::vector<float>& gout,
                std::vector<std::vector<float>>& grads) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace rlp
