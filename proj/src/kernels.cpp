#include "rlp/kernels.hpp"

#include <algorithm>

namespace rlp::kernels {

void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
              std::size_t n) {
  // Four rows of C share each pass over a row of B. Every C element still
  // accumulates over p in increasing order.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    float* c0 = c + i * n;
    float* c1 = c0 + n;
    float* c2 = c1 + n;
    float* c3 = c2 + n;
    const float* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const float bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    float* crow = c + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_acc_bt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  // Transpose B once so the inner loop runs over contiguous memory.
  std::vector<float> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_acc(a, bt.data(), c, m, k, n);
}

void gemm_acc_at(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = a + p * m;
    const float* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const float av = arow[i];
      float* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void im2col(const float* img, const ConvGeometry& g, const Rect& region, float* cols) {
  const std::size_t area = region.area();
  const std::size_t rw = region.cols();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
    const float* plane = img + ci * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        float* dst = cols + row * area;
        for (std::size_t y = region.row0; y < region.row1; ++y) {
          float* d = dst + (y - region.row0) * rw;
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(d, d + rw, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(sy) * g.in_w;
          for (std::size_t x = region.col0; x < region.col1; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            d[x - region.col0] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(g.in_w))
                                     ? 0.0f
                                     : src[static_cast<std::size_t>(sx)];
          }
        }
      }
    }
  }
}

void col2im_acc(const float* cols, const ConvGeometry& g, const Rect& region, float* img) {
  const std::size_t area = region.area();
  const std::size_t rw = region.cols();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.in_ch; ++ci) {
    float* plane = img + ci * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        const float* src = cols + row * area;
        for (std::size_t y = region.row0; y < region.row1; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          float* dst = plane + static_cast<std::size_t>(sy) * g.in_w;
          const float* s = src + (y - region.row0) * rw;
          for (std::size_t x = region.col0; x < region.col1; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            dst[static_cast<std::size_t>(sx)] += s[x - region.col0];
          }
        }
      }
    }
  }
}

namespace {

// tmp[co, j] = bias[co] + sum_p weight[co, p] * cols[p, j], accumulated in p order.
void affine_columns(const float* cols, std::size_t patch_len, std::size_t count,
                    const float* weight, const float* bias, std::size_t out_ch,
                    float* tmp) {
  for (std::size_t co = 0; co < out_ch; ++co) {
    std::fill(tmp + co * count, tmp + (co + 1) * count, bias ? bias[co] : 0.0f);
  }
  gemm_acc(weight, cols, tmp, out_ch, patch_len, count);
}

}  // namespace

void conv2d_region(const float* img, const ConvGeometry& g, const float* weight,
                   const float* bias, const Rect& region, float* out,
                   std::vector<float>& scratch) {
  const std::size_t area = region.area();
  if (area == 0) return;
  const std::size_t plen = g.patch_len();
  scratch.resize(plen * area + g.out_ch * area);
  float* cols = scratch.data();
  float* tmp = cols + plen * area;
  im2col(img, g, region, cols);
  affine_columns(cols, plen, area, weight, bias, g.out_ch, tmp);
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t rw = region.cols();
  for (std::size_t co = 0; co < g.out_ch; ++co) {
    for (std::size_t y = region.row0; y < region.row1; ++y) {
      const float* s = tmp + co * area + (y - region.row0) * rw;
      std::copy(s, s + rw, out + co * oh * ow + y * ow + region.col0);
    }
  }
}

void conv1x1_pixels(const float* feat, std::size_t in_ch, std::size_t plane,
                    const float* weight, const float* bias, std::size_t out_ch,
                    std::span<const std::uint32_t> pixels, float* out,
                    std::vector<float>& scratch) {
  const std::size_t count = pixels.size();
  if (count == 0) return;
  scratch.resize(in_ch * count + out_ch * count);
  float* cols = scratch.data();
  float* tmp = cols + in_ch * count;
  for (std::size_t c = 0; c < in_ch; ++c) {
    for (std::size_t j = 0; j < count; ++j) cols[c * count + j] = feat[c * plane + pixels[j]];
  }
  affine_columns(cols, in_ch, count, weight, bias, out_ch, tmp);
  for (std::size_t co = 0; co < out_ch; ++co) {
    for (std::size_t j = 0; j < count; ++j) out[co * plane + pixels[j]] = tmp[co * count + j];
  }
}

namespace {

// Output channels [co0, co0 + kW) for up to four pixels.
template <std::size_t kW>
void affine_block(const float* const* r, std::size_t np, std::size_t patch_len,
                  const float* weight_t, const float* bias, std::size_t out_ch, std::size_t co0,
                  const std::uint32_t* px, float* out, std::size_t plane) {
  float acc[4][kW];
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t q = 0; q < kW; ++q) acc[k][q] = bias ? bias[co0 + q] : 0.0f;
  for (std::size_t p = 0; p < patch_len; ++p) {
    const float* w = weight_t + p * out_ch + co0;
    const float x0 = r[0][p], x1 = r[1][p], x2 = r[2][p], x3 = r[3][p];
    for (std::size_t q = 0; q < kW; ++q) {
      acc[0][q] += w[q] * x0;
      acc[1][q] += w[q] * x1;
      acc[2][q] += w[q] * x2;
      acc[3][q] += w[q] * x3;
    }
  }
  for (std::size_t k = 0; k < np; ++k)
    for (std::size_t q = 0; q < kW; ++q) out[(co0 + q) * plane + px[k]] = acc[k][q];
}

// Eight-lane vector type; lanes never interact, so each output keeps the
// scalar accumulation order.
typedef float v8 __attribute__((vector_size(32), aligned(4)));

// 16 output channels for NP pixels, two vector registers per pixel.
template <std::size_t NP>
void affine_block16(const float* const* r, std::size_t patch_len, const float* weight_t,
                    const float* bias, std::size_t out_ch, std::size_t co0, const std::uint32_t* px,
                    float* out, std::size_t plane) {
  v8 b0 = {}, b1 = {};
  if (bias) {
    __builtin_memcpy(&b0, bias + co0, sizeof b0);
    __builtin_memcpy(&b1, bias + co0 + 8, sizeof b1);
  }
  v8 lo[NP], hi[NP];
  for (std::size_t k = 0; k < NP; ++k) {
    lo[k] = b0;
    hi[k] = b1;
  }
  for (std::size_t p = 0; p < patch_len; ++p) {
    const v8 w0 = *reinterpret_cast<const v8*>(weight_t + p * out_ch + co0);
    const v8 w1 = *reinterpret_cast<const v8*>(weight_t + p * out_ch + co0 + 8);
    for (std::size_t k = 0; k < NP; ++k) {
      const float xv = r[k][p];
      lo[k] += w0 * xv;
      hi[k] += w1 * xv;
    }
  }
  for (std::size_t k = 0; k < NP; ++k)
    for (std::size_t q = 0; q < 8; ++q) {
      out[(co0 + q) * plane + px[k]] = lo[k][q];
      out[(co0 + 8 + q) * plane + px[k]] = hi[k][q];
    }
}

}  // namespace

void affine_pixels(const float* rows, std::size_t patch_len, std::size_t plane,
                   const float* weight_t, const float* bias, std::size_t out_ch,
                   std::span<const std::uint32_t> pixels, float* out,
                   std::vector<float>& scratch) {
  (void)scratch;
  for (std::size_t j = 0; j < pixels.size();) {
    const std::size_t left = pixels.size() - j;
    const std::size_t np = left >= 4 ? 4 : (left >= 2 ? 2 : 1);
    const std::uint32_t* px = pixels.data() + j;
    const float* r[4];
    for (std::size_t k = 0; k < 4; ++k) r[k] = rows + px[std::min(k, np - 1)] * patch_len;
    std::size_t co = 0;
    for (; co + 16 <= out_ch; co += 16) {
      if (np == 4) affine_block16<4>(r, patch_len, weight_t, bias, out_ch, co, px, out, plane);
      else if (np == 2) affine_block16<2>(r, patch_len, weight_t, bias, out_ch, co, px, out, plane);
      else affine_block16<1>(r, patch_len, weight_t, bias, out_ch, co, px, out, plane);
    }
    // Narrow tails compute four lanes and keep the first np.
    for (; co + 4 <= out_ch; co += 4)
      affine_block<4>(r, np, patch_len, weight_t, bias, out_ch, co, px, out, plane);
    for (; co < out_ch; ++co)
      affine_block<1>(r, np, patch_len, weight_t, bias, out_ch, co, px, out, plane);
    j += np;
  }
}

void gather_rows_masked(const float* img, const ConvGeometry& g, const std::uint32_t* owner,
                        float* rows, std::vector<float>& scratch) {
  const std::size_t h = g.in_h, w = g.in_w, plane = h * w, k = g.kernel, c = g.in_ch;
  const std::size_t plen = g.patch_len();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  scratch.resize(plane * c);
  float* pix = scratch.data();
  transpose(img, c, plane, pix);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = y * w + x;
      const std::uint32_t own = owner[p];
      float* dst = rows + p * plen;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
        for (std::size_t kx = 0; kx < k; ++kx, dst += c) {
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - pad;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) {
            std::fill(dst, dst + c, 0.0f);
            continue;
          }
          const std::size_t q = static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx);
          if (owner[q] != own) std::fill(dst, dst + c, 0.0f);
          else std::copy(pix + q * c, pix + (q + 1) * c, dst);
        }
      }
    }
  }
}

void transpose(const float* src, std::size_t rows, std::size_t cols, float* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace rlp::kernels
