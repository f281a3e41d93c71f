#pragma once

// Dense float kernels shared by the autodiff graph and the inference paths.
//
// Forward kernels accumulate every output element in a fixed order that does
// not depend on how many elements are computed per call. Computing a conv over
// a sub-rectangle therefore gives bit-identical values to computing it over the
// whole plane, which the region-wise purification relies on.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace rlp::kernels {

/// Half-open pixel rectangle [row0, row1) x [col0, col1).
struct Rect {
  std::size_t row0 = 0, row1 = 0, col0 = 0, col1 = 0;
  std::size_t rows() const { return row1 - row0; }
  std::size_t cols() const { return col1 - col0; }
  std::size_t area() const { return rows() * cols(); }
  friend bool operator==(const Rect&, const Rect&) = default;
};

/// C[m,n] += A[m,k] * B[k,n]
void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
              std::size_t n);
/// C[m,n] += A[m,k] * B[n,k]^T
void gemm_acc_bt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n);
/// C[m,n] += A[k,m]^T * B[k,n]
void gemm_acc_at(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n);

/// Stride-1 zero-padded 2-D convolution geometry for one image.
struct ConvGeometry {
  std::size_t in_ch = 0, in_h = 0, in_w = 0;
  std::size_t out_ch = 0, kernel = 1, pad = 0;
  std::size_t out_h() const { return in_h + 2 * pad - kernel + 1; }
  std::size_t out_w() const { return in_w + 2 * pad - kernel + 1; }
  std::size_t patch_len() const { return in_ch * kernel * kernel; }
};

/// Gathers the receptive fields of the output pixels in `region` into
/// cols[patch_len, region.area()].
void im2col(const float* img, const ConvGeometry& g, const Rect& region, float* cols);
/// Scatter-adds cols[patch_len, region.area()] back into an image gradient.
void col2im_acc(const float* cols, const ConvGeometry& g, const Rect& region, float* img);

/// Computes out[co, y, x] for (y, x) in `region`; `out` has the full
/// [out_ch, out_h, out_w] layout and pixels outside the region are untouched.
/// `bias` may be null.
void conv2d_region(const float* img, const ConvGeometry& g, const float* weight,
                   const float* bias, const Rect& region, float* out,
                   std::vector<float>& scratch);

/// Per-pixel linear map (a 1x1 convolution) applied to an arbitrary pixel set.
/// feat has layout [in_ch, plane]; out has layout [out_ch, plane].
void conv1x1_pixels(const float* feat, std::size_t in_ch, std::size_t plane,
                    const float* weight, const float* bias, std::size_t out_ch,
                    std::span<const std::uint32_t> pixels, float* out,
                    std::vector<float>& scratch);

/// Pixel-major variant for inference over arbitrary pixel sets.
/// rows has layout [plane, patch_len], weight_t is [patch_len, out_ch] and out
/// is [out_ch, plane]. Each output starts at bias and accumulates over the
/// patch index in increasing order, the same order as the gemm path.
void affine_pixels(const float* rows, std::size_t patch_len, std::size_t plane,
                   const float* weight_t, const float* bias, std::size_t out_ch,
                   std::span<const std::uint32_t> pixels, float* out,
                   std::vector<float>& scratch);

/// Pixel-major receptive fields of a same-size convolution: rows[p] lists, tap
/// by tap (ky, kx), the in_ch values under that tap. A tap reads zero when it
/// leaves the frame or lands on a pixel whose owner differs from p's, so each
/// owner sees its pixels as a zero-padded image of their own.
void gather_rows_masked(const float* img, const ConvGeometry& g, const std::uint32_t* owner,
                        float* rows, std::vector<float>& scratch);

/// [rows, cols] -> [cols, rows]
void transpose(const float* src, std::size_t rows, std::size_t cols, float* dst);

}  // namespace rlp::kernels
