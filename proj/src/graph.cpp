#include "rlp/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rlp/kernels.hpp"

namespace rlp {

std::string_view primitive_name(Primitive op) {
  switch (op) {
    case Primitive::kLeaf: return "leaf";
    case Primitive::kAdd: return "add";
    case Primitive::kSub: return "sub";
    case Primitive::kMul: return "mul";
    case Primitive::kMatMul: return "matmul";
    case Primitive::kConv2d: return "conv2d";
    case Primitive::kRelu: return "relu";
    case Primitive::kLeakyRelu: return "leaky_relu";
    case Primitive::kMean: return "mean";
    case Primitive::kSum: return "sum";
    case Primitive::kAbs: return "abs";
    case Primitive::kClamp: return "clamp";
    case Primitive::kReshape: return "reshape";
    case Primitive::kPad: return "pad";
    case Primitive::kSlice: return "slice";
    case Primitive::kSoftmax: return "softmax";
    case Primitive::kLogSoftmax: return "log_softmax";
    case Primitive::kSpatialMean: return "spatial_mean";
  }
  return "?";
}

namespace {

// Output shape plus per-operand strides (0 on broadcast axes).
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast broadcast_shapes(const Shape& a, const Shape& b, std::string_view op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const auto sa = row_major_strides(a), sb = row_major_strides(b);
  bc.out.resize(a.size());
  bc.stride_a.resize(a.size());
  bc.stride_b.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    bc.out[i] = std::max(a[i], b[i]);
    bc.stride_a[i] = a[i] == 1 ? 0 : sa[i];
    bc.stride_b[i] = b[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) for every output element in order.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t n = shape_numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

kernels::ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  kernels::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), pad};
  if (g.in_h + 2 * pad < g.kernel || g.in_w + 2 * pad < g.kernel) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  return g;
}

void softmax_rows(const float* x, float* y, std::size_t rows, std::size_t cols, bool log) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float* yr = y + r * cols;
    const float mx = *std::max_element(xr, xr + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(static_cast<double>(xr[c] - mx));
    if (log) {
      const double lse = std::log(total);
      for (std::size_t c = 0; c < cols; ++c) yr[c] = static_cast<float>((xr[c] - mx) - lse);
    } else {
      for (std::size_t c = 0; c < cols; ++c)
        yr[c] = static_cast<float>(std::exp(static_cast<double>(xr[c] - mx)) / total);
    }
  }
}

}  // namespace

Var Graph::constant(Tensor value) {
  if (consumed_) throw std::logic_error("graph already consumed by backward()");
  Node n;
  n.value = std::move(value);
  n.value.check_finite("constant");
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::bind(Tensor& tensor) {
  if (consumed_) throw std::logic_error("graph already consumed by backward()");
  Node n;
  n.value = Tensor(tensor.shape(), tensor.storage());
  n.value.check_finite("bound tensor");
  n.bound = &tensor;
  n.tracks_grad = tensor.requires_grad();
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this graph");
  return nodes_[v.id];
}

const Tensor& Graph::value(Var v) const { return node(v).value; }
bool Graph::tracks_grad(Var v) const { return node(v).tracks_grad; }

Var Graph::conv2d(Var x, Var w, Var bias, std::size_t padding) {
  OpAttrs a;
  a.window[0] = padding;
  return apply(Primitive::kConv2d, {x, w, bias}, a);
}

Var Graph::conv2d(Var x, Var w, std::size_t padding) {
  OpAttrs a;
  a.window[0] = padding;
  return apply(Primitive::kConv2d, {x, w}, a);
}

Var Graph::leaky_relu(Var x, float slope) {
  OpAttrs a;
  a.lo = slope;
  return apply(Primitive::kLeakyRelu, {x}, a);
}

Var Graph::clamp(Var x, float lo, float hi) {
  OpAttrs a;
  a.lo = lo;
  a.hi = hi;
  return apply(Primitive::kClamp, {x}, a);
}

Var Graph::reshape(Var x, Shape shape) {
  OpAttrs a;
  a.shape = std::move(shape);
  return apply(Primitive::kReshape, {x}, a);
}

Var Graph::pad(Var x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right) {
  OpAttrs a;
  a.window = {top, bottom, left, right};
  return apply(Primitive::kPad, {x}, a);
}

Var Graph::slice(Var x, std::size_t row0, std::size_t row1, std::size_t col0,
                 std::size_t col1) {
  OpAttrs a;
  a.window = {row0, row1, col0, col1};
  return apply(Primitive::kSlice, {x}, a);
}

Var Graph::apply(Primitive op, std::initializer_list<Var> inputs, const OpAttrs& attrs) {
  if (consumed_) throw std::logic_error("graph already consumed by backward()");
  if (op == Primitive::kLeaf) throw std::invalid_argument("apply: leaf is not a primitive");
  if (inputs.size() == 0 || inputs.size() > 3) throw std::invalid_argument("apply: arity");
  Node n;
  n.op = op;
  n.attrs = attrs;
  std::vector<const Tensor*> xs;
  std::size_t i = 0;
  for (Var v : inputs) {
    const Node& in = node(v);
    n.in[i++] = static_cast<std::int32_t>(v.id);
    n.tracks_grad = n.tracks_grad || in.tracks_grad;
    xs.push_back(&in.value);
  }
  n.value = forward(op, xs, attrs);
  n.value.check_finite(primitive_name(op).data());
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Graph::forward(Primitive op, const std::vector<const Tensor*>& xs,
                      const OpAttrs& attrs) const {
  const auto arity = [&](std::size_t k) {
    if (xs.size() != k) {
      throw std::invalid_argument(std::string(primitive_name(op)) + ": expected " +
                                  std::to_string(k) + " inputs");
    }
  };
  switch (op) {
    case Primitive::kAdd:
    case Primitive::kSub:
    case Primitive::kMul: {
      arity(2);
      const Tensor& a = *xs[0];
      const Tensor& b = *xs[1];
      const Broadcast bc = broadcast_shapes(a.shape(), b.shape(), primitive_name(op));
      Tensor out(bc.out);
      const float* pa = a.data().data();
      const float* pb = b.data().data();
      float* po = out.data().data();
      if (op == Primitive::kAdd)
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = pa[ia] + pb[ib]; });
      else if (op == Primitive::kSub)
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = pa[ia] - pb[ib]; });
      else
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = pa[ia] * pb[ib]; });
      return out;
    }
    case Primitive::kMatMul: {
      arity(2);
      const Tensor& a = *xs[0];
      const Tensor& b = *xs[1];
      require_rank(a, 2, "matmul");
      require_rank(b, 2, "matmul");
      if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
      }
      Tensor out({a.dim(0), b.dim(1)});
      kernels::gemm_acc(a.data().data(), b.data().data(), out.data().data(), a.dim(0), a.dim(1),
                        b.dim(1));
      return out;
    }
    case Primitive::kConv2d: {
      if (xs.size() != 2 && xs.size() != 3) throw std::invalid_argument("conv2d: arity");
      const Tensor& x = *xs[0];
      const Tensor& w = *xs[1];
      const auto g = conv_geometry(x, w, attrs.window[0]);
      const float* bias = nullptr;
      if (xs.size() == 3) {
        if (xs[2]->numel() != g.out_ch) throw ShapeError("conv2d: bias length");
        bias = xs[2]->data().data();
      }
      const std::size_t batch = x.dim(0);
      Tensor out({batch, g.out_ch, g.out_h(), g.out_w()});
      const kernels::Rect full{0, g.out_h(), 0, g.out_w()};
      std::vector<float> scratch;
      const std::size_t in_sz = g.in_ch * g.in_h * g.in_w;
      const std::size_t out_sz = g.out_ch * g.out_h() * g.out_w();
      for (std::size_t n = 0; n < batch; ++n) {
        kernels::conv2d_region(x.data().data() + n * in_sz, g, w.data().data(), bias, full,
                               out.data().data() + n * out_sz, scratch);
      }
      return out;
    }
    case Primitive::kRelu:
    case Primitive::kLeakyRelu:
    case Primitive::kAbs:
    case Primitive::kClamp: {
      arity(1);
      Tensor out = *xs[0];
      out.set_requires_grad(false);
      for (float& v : out.data()) {
        switch (op) {
          case Primitive::kRelu: v = v > 0.0f ? v : 0.0f; break;
          case Primitive::kLeakyRelu: v = v > 0.0f ? v : attrs.lo * v; break;
          case Primitive::kAbs: v = std::fabs(v); break;
          default: v = std::clamp(v, attrs.lo, attrs.hi); break;
        }
      }
      return out;
    }
    case Primitive::kMean:
    case Primitive::kSum: {
      arity(1);
      double total = 0.0;
      for (float v : xs[0]->data()) total += v;
      if (op == Primitive::kMean) {
        if (xs[0]->numel() == 0) throw ShapeError("mean of empty tensor");
        total /= static_cast<double>(xs[0]->numel());
      }
      return Tensor::scalar(static_cast<float>(total));
    }
    case Primitive::kReshape: {
      arity(1);
      return xs[0]->reshaped(attrs.shape);
    }
    case Primitive::kPad:
    case Primitive::kSlice: {
      arity(1);
      const Tensor& x = *xs[0];
      if (x.rank() < 2) throw ShapeError(std::string(primitive_name(op)) + ": rank < 2");
      const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
      const std::size_t planes = x.numel() / (h * w);
      Shape os = x.shape();
      const auto& win = attrs.window;
      std::size_t oh, ow, r0, c0;
      if (op == Primitive::kPad) {
        oh = h + win[0] + win[1];
        ow = w + win[2] + win[3];
        r0 = win[0];
        c0 = win[2];
      } else {
        if (win[0] > win[1] || win[1] > h || win[2] > win[3] || win[3] > w) {
          throw ShapeError("slice: window out of range for " + shape_str(x.shape()));
        }
        oh = win[1] - win[0];
        ow = win[3] - win[2];
        r0 = win[0];
        c0 = win[2];
      }
      os[os.size() - 2] = oh;
      os[os.size() - 1] = ow;
      Tensor out(os);
      const float* px = x.data().data();
      float* po = out.data().data();
      for (std::size_t p = 0; p < planes; ++p) {
        if (op == Primitive::kPad) {
          for (std::size_t y = 0; y < h; ++y)
            std::copy(px + p * h * w + y * w, px + p * h * w + (y + 1) * w,
                      po + p * oh * ow + (y + r0) * ow + c0);
        } else {
          for (std::size_t y = 0; y < oh; ++y)
            std::copy(px + p * h * w + (y + r0) * w + c0, px + p * h * w + (y + r0) * w + c0 + ow,
                      po + p * oh * ow + y * ow);
        }
      }
      return out;
    }
    case Primitive::kSoftmax:
    case Primitive::kLogSoftmax: {
      arity(1);
      const Tensor& x = *xs[0];
      if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax: empty last axis");
      Tensor out(x.shape());
      const std::size_t cols = x.shape().back();
      softmax_rows(x.data().data(), out.data().data(), x.numel() / cols, cols,
                   op == Primitive::kLogSoftmax);
      return out;
    }
    case Primitive::kSpatialMean: {
      arity(1);
      const Tensor& x = *xs[0];
      require_rank(x, 4, "spatial_mean");
      const std::size_t plane = x.dim(2) * x.dim(3);
      if (plane == 0) throw ShapeError("spatial_mean: empty plane");
      Tensor out({x.dim(0), x.dim(1)});
      for (std::size_t p = 0; p < out.numel(); ++p) {
        float s = 0.0f;
        const float* src = x.data().data() + p * plane;
        for (std::size_t i = 0; i < plane; ++i) s += src[i];
        out[p] = s / static_cast<float>(plane);
      }
      return out;
    }
    case Primitive::kLeaf:
      break;
  }
  throw std::invalid_argument("unknown primitive");
}

void Graph::backward(Var root) {
  if (consumed_) throw std::logic_error("graph already consumed by backward()");
  const Node& r = node(root);
  if (r.value.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + shape_str(r.value.shape()));
  }
  if (!r.tracks_grad) throw std::logic_error("backward: root does not depend on any gradient leaf");

  std::vector<std::vector<float>> grads(nodes_.size());
  grads[root.id].assign(1, 1.0f);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.tracks_grad || grads[i].empty()) continue;
    if (n.op == Primitive::kLeaf) {
      if (n.bound != nullptr && n.bound->requires_grad()) {
        auto g = n.bound->grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += grads[i][k];
      }
    } else {
      backprop(n, grads[i], grads);
    }
    std::vector<float>().swap(grads[i]);
  }
  consumed_ = true;
}

void Graph::backprop(const Node& n, const std::vector<float>& gout,
                     std::vector<std::vector<float>>& grads) const {
  // Returns the gradient buffer of input k, or null when it needs none.
  const auto sink = [&](std::size_t k) -> float* {
    if (n.in[k] < 0) return nullptr;
    const Node& in = nodes_[static_cast<std::size_t>(n.in[k])];
    if (!in.tracks_grad) return nullptr;
    auto& g = grads[static_cast<std::size_t>(n.in[k])];
    if (g.empty()) g.assign(in.value.numel(), 0.0f);
    return g.data();
  };
  const auto input = [&](std::size_t k) -> const Tensor& {
    return nodes_[static_cast<std::size_t>(n.in[k])].value;
  };
  const float* go = gout.data();

  switch (n.op) {
    case Primitive::kAdd:
    case Primitive::kSub:
    case Primitive::kMul: {
      const Tensor& a = input(0);
      const Tensor& b = input(1);
      const Broadcast bc = broadcast_shapes(a.shape(), b.shape(), primitive_name(n.op));
      float* ga = sink(0);
      float* gb = sink(1);
      const float* pa = a.data().data();
      const float* pb = b.data().data();
      for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (n.op == Primitive::kAdd) {
          if (ga) ga[ia] += go[o];
          if (gb) gb[ib] += go[o];
        } else if (n.op == Primitive::kSub) {
          if (ga) ga[ia] += go[o];
          if (gb) gb[ib] -= go[o];
        } else {
          if (ga) ga[ia] += go[o] * pb[ib];
          if (gb) gb[ib] += go[o] * pa[ia];
        }
      });
      return;
    }
    case Primitive::kMatMul: {
      const Tensor& a = input(0);
      const Tensor& b = input(1);
      const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
      if (float* ga = sink(0)) kernels::gemm_acc_bt(go, b.data().data(), ga, m, nn, k);
      if (float* gb = sink(1)) kernels::gemm_acc_at(a.data().data(), go, gb, k, m, nn);
      return;
    }
    case Primitive::kConv2d: {
      const Tensor& x = input(0);
      const Tensor& w = input(1);
      const auto g = conv_geometry(x, w, n.attrs.window[0]);
      float* gx = sink(0);
      float* gw = sink(1);
      float* gb = n.in[2] >= 0 ? sink(2) : nullptr;
      const std::size_t batch = x.dim(0);
      const std::size_t in_sz = g.in_ch * g.in_h * g.in_w;
      const std::size_t opix = g.out_h() * g.out_w();
      const std::size_t plen = g.patch_len();
      const kernels::Rect full{0, g.out_h(), 0, g.out_w()};
      std::vector<float> cols(plen * opix), dcols(plen * opix);
      for (std::size_t b = 0; b < batch; ++b) {
        const float* gob = go + b * g.out_ch * opix;
        if (gb) {
          for (std::size_t co = 0; co < g.out_ch; ++co) {
            float s = 0.0f;
            for (std::size_t p = 0; p < opix; ++p) s += gob[co * opix + p];
            gb[co] += s;
          }
        }
        if (gw) {
          kernels::im2col(x.data().data() + b * in_sz, g, full, cols.data());
          kernels::gemm_acc_bt(gob, cols.data(), gw, g.out_ch, opix, plen);
        }
        if (gx) {
          std::fill(dcols.begin(), dcols.end(), 0.0f);
          kernels::gemm_acc_at(w.data().data(), gob, dcols.data(), plen, g.out_ch, opix);
          kernels::col2im_acc(dcols.data(), g, full, gx + b * in_sz);
        }
      }
      return;
    }
    case Primitive::kRelu:
    case Primitive::kLeakyRelu:
    case Primitive::kAbs:
    case Primitive::kClamp: {
      float* gx = sink(0);
      if (!gx) return;
      const auto x = input(0).data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        float d;
        switch (n.op) {
          case Primitive::kRelu: d = x[i] > 0.0f ? 1.0f : 0.0f; break;
          case Primitive::kLeakyRelu: d = x[i] > 0.0f ? 1.0f : n.attrs.lo; break;
          case Primitive::kAbs: d = x[i] > 0.0f ? 1.0f : (x[i] < 0.0f ? -1.0f : 0.0f); break;
          default: d = (x[i] >= n.attrs.lo && x[i] <= n.attrs.hi) ? 1.0f : 0.0f; break;
        }
        gx[i] += d * go[i];
      }
      return;
    }
    case Primitive::kMean:
    case Primitive::kSum: {
      float* gx = sink(0);
      if (!gx) return;
      const std::size_t cnt = input(0).numel();
      const float g = n.op == Primitive::kMean ? go[0] / static_cast<float>(cnt) : go[0];
      for (std::size_t i = 0; i < cnt; ++i) gx[i] += g;
      return;
    }
    case Primitive::kReshape: {
      float* gx = sink(0);
      if (!gx) return;
      for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += go[i];
      return;
    }
    case Primitive::kPad:
    case Primitive::kSlice: {
      float* gx = sink(0);
      if (!gx) return;
      const Tensor& x = input(0);
      const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
      const std::size_t planes = x.numel() / (h * w);
      const Shape& os = n.value.shape();
      const std::size_t oh = os[os.size() - 2], ow = os[os.size() - 1];
      const auto& win = n.attrs.window;
      for (std::size_t p = 0; p < planes; ++p) {
        if (n.op == Primitive::kPad) {
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t c = 0; c < w; ++c)
              gx[p * h * w + y * w + c] += go[p * oh * ow + (y + win[0]) * ow + c + win[2]];
        } else {
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t c = 0; c < ow; ++c)
              gx[p * h * w + (y + win[0]) * w + c + win[2]] += go[p * oh * ow + y * ow + c];
        }
      }
      return;
    }
    case Primitive::kSoftmax:
    case Primitive::kLogSoftmax: {
      float* gx = sink(0);
      if (!gx) return;
      const auto y = n.value.data();
      const std::size_t cols = n.value.shape().back();
      const std::size_t rows = n.value.numel() / cols;
      for (std::size_t r = 0; r < rows; ++r) {
        const float* yr = y.data() + r * cols;
        const float* gr = go + r * cols;
        float* dx = gx + r * cols;
        if (n.op == Primitive::kSoftmax) {
          float dot = 0.0f;
          for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
          for (std::size_t c = 0; c < cols; ++c) dx[c] += yr[c] * (gr[c] - dot);
        } else {
          float gsum = 0.0f;
          for (std::size_t c = 0; c < cols; ++c) gsum += gr[c];
          for (std::size_t c = 0; c < cols; ++c) dx[c] += gr[c] - std::exp(yr[c]) * gsum;
        }
      }
      return;
    }
    case Primitive::kSpatialMean: {
      float* gx = sink(0);
      if (!gx) return;
      const Tensor& x = input(0);
      const std::size_t plane = x.dim(2) * x.dim(3);
      for (std::size_t p = 0; p < n.value.numel(); ++p) {
        const float g = go[p] / static_cast<float>(plane);
        for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += g;
      }
      return;
    }
    case Primitive::kLeaf:
      return;
  }
}

}  // namespace rlp
