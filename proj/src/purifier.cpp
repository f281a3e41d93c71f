#include "rlp/purifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "rlp/models.hpp"
#include "rlp/optim.hpp"
#include "rlp/rng.hpp"

namespace rlp {

std::string_view family_name(EncoderFamily f) {
  return f == EncoderFamily::kRcanLite ? "rcan-lite" : "edsr-lite";
}

std::string_view family_tag(EncoderFamily f) {
  return f == EncoderFamily::kRcanLite ? "RCAN" : "EDSR";
}

EncoderFamily parse_family(std::string_view s) {
  if (s == "edsr-lite" || s == "EDSR" || s == "edsr") return EncoderFamily::kEdsrLite;
  if (s == "rcan-lite" || s == "RCAN" || s == "rcan") return EncoderFamily::kRcanLite;
  throw std::invalid_argument("unknown encoder family '" + std::string(s) + "'");
}

namespace {

std::string block_name(std::size_t b, const char* leaf) {
  return "b" + std::to_string(b) + "." + leaf;
}

std::size_t gate_width(std::size_t depth) { return std::max<std::size_t>(1, depth / 4); }

Tensor he_normal(Shape shape, std::size_t fan_in, double gain, Stream& rng) {
  Tensor t(std::move(shape));
  const double scale = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (float& v : t.data()) v = static_cast<float>(scale * rng.normal());
  return t;
}

void check_depth(std::size_t depth, std::size_t channels) {
  if (depth == 0 || channels == 0) throw std::invalid_argument("purifier depth/channels must be positive");
}

}  // namespace

Purifier::Purifier(EncoderFamily family, std::size_t depth, std::uint64_t seed, std::size_t channels)
    : channels_(channels) {
  check_depth(depth, channels);
  prov_.family = family;
  prov_.depth = depth;
  prov_.seed = seed;
  Stream rng(seed, {0x9E71F});
  const std::size_t d = depth;
  params_.add("head.w", he_normal({d, channels, 3, 3}, channels * 9, 1.0, rng));
  params_.add("head.b", Tensor({d}));
  for (std::size_t b = 0; b < kBlocks; ++b) {
    params_.add(block_name(b, "c1.w"), he_normal({d, d, 3, 3}, d * 9, 1.0, rng));
    params_.add(block_name(b, "c1.b"), Tensor({d}));
    // Residual branches start small so the untrained encoder is close to the head.
    params_.add(block_name(b, "c2.w"), he_normal({d, d, 3, 3}, d * 9, 0.1, rng));
    params_.add(block_name(b, "c2.b"), Tensor({d}));
    if (family == EncoderFamily::kRcanLite) {
      const std::size_t r = gate_width(d);
      params_.add(block_name(b, "g1.w"), he_normal({d, r}, d, 1.0, rng));
      params_.add(block_name(b, "g1.b"), Tensor({1, r}));
      params_.add(block_name(b, "g2.w"), he_normal({r, d}, r, 0.1, rng));
      params_.add(block_name(b, "g2.b"), Tensor({1, d}, 0.5f));
    }
  }
  params_.add("dec.w1", he_normal({kDecoderHidden, d, 1, 1}, d, 1.0, rng));
  params_.add("dec.b1", Tensor({kDecoderHidden}));
  params_.add("dec.w2", he_normal({channels, kDecoderHidden, 1, 1}, kDecoderHidden, 0.5, rng));
  params_.add("dec.b2", Tensor({channels}, 0.5f));
}

Purifier::Purifier(PurifierProvenance provenance, std::size_t channels, ParameterSet params)
    : prov_(std::move(provenance)), channels_(channels), params_(std::move(params)) {
  check_depth(prov_.depth, channels);
  const Purifier ref(prov_.family, prov_.depth, 0, channels);
  if (params_.size() != ref.params_.size()) {
    throw std::invalid_argument("purifier checkpoint has " + std::to_string(params_.size()) +
                                " tensors, expected " + std::to_string(ref.params_.size()));
  }
  for (const auto& [name, t] : ref.params_) {
    if (!params_.contains(name) || params_.at(name).shape() != t.shape()) {
      throw std::invalid_argument("purifier checkpoint does not match at " + name);
    }
  }
}

template <typename Bind>
Var Purifier::encode_impl(Graph& g, Var x, Bind&& bind) const {
  const Shape& s = g.value(x).shape();
  if (s.size() != 4 || s[1] != channels_) {
    throw ShapeError("purifier input must be [N," + std::to_string(channels_) + ",H,W], got " +
                     shape_str(s));
  }
  const std::size_t n = s[0], d = prov_.depth;
  Var h0 = g.conv2d(x, bind("head.w"), bind("head.b"), 1);
  Var h = h0;
  for (std::size_t b = 0; b < kBlocks; ++b) {
    Var t = g.relu(g.conv2d(h, bind(block_name(b, "c1.w")), bind(block_name(b, "c1.b")), 1));
    Var r = g.conv2d(t, bind(block_name(b, "c2.w")), bind(block_name(b, "c2.b")), 1);
    if (prov_.family == EncoderFamily::kRcanLite) {
      Var z = g.relu(g.add(g.matmul(g.spatial_mean(r), bind(block_name(b, "g1.w"))),
                           bind(block_name(b, "g1.b"))));
      Var gate = g.clamp(g.add(g.matmul(z, bind(block_name(b, "g2.w"))), bind(block_name(b, "g2.b"))),
                         0.0f, 1.0f);
      r = g.mul(r, g.reshape(gate, {n, d, 1, 1}));
    }
    h = g.add(h, r);
  }
  return g.add(h, h0);
}

template <typename Bind>
Var Purifier::decode_impl(Graph& g, Var feat, Bind&& bind) const {
  Var hid = g.relu(g.conv2d(feat, bind("dec.w1"), bind("dec.b1"), 0));
  return g.clamp(g.conv2d(hid, bind("dec.w2"), bind("dec.b2"), 0), 0.0f, 1.0f);
}

Var Purifier::forward(Graph& g, Var x, bool train) {
  if (!train) return std::as_const(*this).forward(g, x);
  auto bind = [&](const std::string& name) { return g.bind(params_.at(name)); };
  return decode_impl(g, encode_impl(g, x, bind), bind);
}

Var Purifier::forward(Graph& g, Var x) const {
  auto bind = [&](const std::string& name) { return g.constant(params_.at(name)); };
  return decode_impl(g, encode_impl(g, x, bind), bind);
}

Var Purifier::encode(Graph& g, Var x) const {
  return encode_impl(g, x, [&](const std::string& name) { return g.constant(params_.at(name)); });
}

Purifier build_purifier(std::string_view family, std::size_t depth, std::uint64_t seed,
                        std::size_t channels) {
  if (depth != 32 && depth != 64) throw std::invalid_argument("purifier depth must be 32 or 64");
  return Purifier(parse_family(family), depth, seed, channels);
}

// ---------------------------------------------------------------------------
// Region-wise inference

PackedPurifier::PackedPurifier(const Purifier& p)
    : family_(p.family()), depth_(p.depth()), channels_(p.channels()) {
  for (const auto& [name, t] : p.params()) {
    std::vector<float> v(t.data().begin(), t.data().end());
    if (t.rank() == 4) {
      // [out, in, ky, kx] -> [(ky, kx, in), out], the row order of the gather.
      const std::size_t out = t.dim(0), in = t.dim(1), taps = t.dim(2) * t.dim(3);
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t ci = 0; ci < in; ++ci)
          for (std::size_t k = 0; k < taps; ++k) v[(k * in + ci) * out + o] = t[(o * in + ci) * taps + k];
    }
    tensors_.emplace(name, std::move(v));
  }
}

const float* PackedPurifier::get(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("purifier has no tensor " + name);
  return it->second.data();
}

namespace {

void check_members(std::span<const PackedPurifier* const> members) {
  if (members.empty()) throw std::invalid_argument("no purifier members");
  for (const PackedPurifier* m : members) {
    if (m->depth() != members[0]->depth() || m->channels() != members[0]->channels()) {
      throw std::invalid_argument("pool members must share depth and channel count");
    }
  }
}

void check_tiling(std::span<const RegionAssignment> regions, std::size_t members, std::size_t h,
                  std::size_t w) {
  std::vector<std::uint8_t> hit(h * w, 0);
  for (const RegionAssignment& r : regions) {
    if (r.member >= members) throw std::out_of_range("region member index");
    if (r.rect.row1 > h || r.rect.col1 > w || r.rect.row0 > r.rect.row1 || r.rect.col0 > r.rect.col1) {
      throw std::out_of_range("region outside image");
    }
    for (std::size_t y = r.rect.row0; y < r.rect.row1; ++y)
      for (std::size_t x = r.rect.col0; x < r.rect.col1; ++x) {
        if (hit[y * w + x]++) throw std::invalid_argument("regions overlap");
      }
  }
  if (std::find(hit.begin(), hit.end(), 0) != hit.end()) {
    throw std::invalid_argument("regions do not cover the image");
  }
}

const float* weights(const PackedPurifier* m, const std::string& name) { return m->get(name); }

}  // namespace

namespace {

// Applies a conv (or 1x1 conv) layer to each member's pixels. `rows` holds the
// pixel-major receptive fields of the whole frame.
void apply_members(std::span<const PackedPurifier* const> members,
                   std::span<const std::vector<std::uint32_t>> pixels, const float* rows,
                   std::size_t patch_len, std::size_t plane, std::size_t out_ch,
                   const std::string& w, const std::string& b, float* out,
                   std::vector<float>& scratch) {
  for (std::size_t mi = 0; mi < members.size(); ++mi) {
    if (pixels[mi].empty()) continue;
    kernels::affine_pixels(rows, patch_len, plane, weights(members[mi], w), weights(members[mi], b), out_ch,
                           pixels[mi], out, scratch);
  }
}

}  // namespace

std::vector<float> encode_regions(std::span<const PackedPurifier* const> members,
                                  std::span<const float> image, std::size_t height,
                                  std::size_t width, std::span<const RegionAssignment> regions,
                                  PurifyStats* stats) {
  check_members(members);
  check_tiling(regions, members.size(), height, width);
  const std::size_t c = members[0]->channels(), d = members[0]->depth();
  const std::size_t plane = height * width;
  if (image.size() != c * plane) throw ShapeError("encode_regions: image extent");

  const kernels::ConvGeometry head{c, height, width, d, 3, 1};
  const kernels::ConvGeometry body{d, height, width, d, 3, 1};
  std::vector<float> h0(d * plane), h(d * plane), t(d * plane), r(d * plane);
  std::vector<float> rows, scratch;

  // Each member sees only its own pixels; neighbours owned by another member
  // read as zero padding, the same as at the frame border.
  std::vector<std::uint32_t> owner(plane);
  std::vector<std::vector<std::uint32_t>> pixels(members.size());
  for (const RegionAssignment& reg : regions)
    for (std::size_t y = reg.rect.row0; y < reg.rect.row1; ++y)
      for (std::size_t x = reg.rect.col0; x < reg.rect.col1; ++x)
        owner[y * width + x] = static_cast<std::uint32_t>(reg.member);
  for (std::size_t p = 0; p < plane; ++p) pixels[owner[p]].push_back(static_cast<std::uint32_t>(p));
  auto conv_all = [&](const float* in, const kernels::ConvGeometry& geo, const std::string& w,
                      const std::string& b, float* out) {
    const std::size_t plen = geo.patch_len();
    rows.resize(plen * plane);
    kernels::gather_rows_masked(in, geo, owner.data(), rows.data(), scratch);
    apply_members(members, pixels, rows.data(), plen, plane, geo.out_ch, w, b, out, scratch);
  };

  conv_all(image.data(), head, "head.w", "head.b", h0.data());
  h = h0;
  for (std::size_t b = 0; b < Purifier::kBlocks; ++b) {
    conv_all(h.data(), body, block_name(b, "c1.w"), block_name(b, "c1.b"), t.data());
    for (float& v : t) v = std::max(v, 0.0f);
    conv_all(t.data(), body, block_name(b, "c2.w"), block_name(b, "c2.b"), r.data());

    // Channel gating pools each rcan member's residual over its own pixels.
    std::vector<float> pooled(d);
    for (std::size_t mi = 0; mi < members.size(); ++mi) {
      const PackedPurifier* m = members[mi];
      if (m->family() != EncoderFamily::kRcanLite || pixels[mi].empty()) continue;
      for (std::size_t ch = 0; ch < d; ++ch) {
        float s = 0.0f;
        for (std::uint32_t p : pixels[mi]) s += r[ch * plane + p];
        pooled[ch] = s / static_cast<float>(pixels[mi].size());
      }
      const std::size_t rw = gate_width(d);
      std::vector<float> z(rw, 0.0f), gate(d, 0.0f);
      kernels::gemm_acc(pooled.data(), weights(m, block_name(b, "g1.w")), z.data(), 1, d, rw);
      const float* zb = weights(m, block_name(b, "g1.b"));
      for (std::size_t k = 0; k < rw; ++k) z[k] = std::max(z[k] + zb[k], 0.0f);
      kernels::gemm_acc(z.data(), weights(m, block_name(b, "g2.w")), gate.data(), 1, rw, d);
      const float* gb = weights(m, block_name(b, "g2.b"));
      for (std::size_t k = 0; k < d; ++k) gate[k] = std::clamp(gate[k] + gb[k], 0.0f, 1.0f);
      for (std::size_t ch = 0; ch < d; ++ch)
        for (std::uint32_t p : pixels[mi]) r[ch * plane + p] *= gate[ch];
    }
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += r[i];
  }
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += h0[i];
  if (stats) stats->encoder_pixels += plane;
  return h;
}

void decode_pixels(std::span<const PackedPurifier* const> members, std::span<const float> features,
                   std::size_t height, std::size_t width,
                   std::span<const std::vector<std::uint32_t>> pixel_sets, std::span<float> out) {
  check_members(members);
  if (pixel_sets.size() != members.size()) throw std::invalid_argument("decode_pixels: pixel sets");
  const std::size_t c = members[0]->channels(), d = members[0]->depth();
  const std::size_t plane = height * width, hd = Purifier::kDecoderHidden;
  if (features.size() != d * plane || out.size() != c * plane) {
    throw ShapeError("decode_pixels: buffer extents");
  }
  std::vector<float> rows(d * plane), hid(hd * plane), hid_rows(hd * plane), scratch;
  kernels::transpose(features.data(), d, plane, rows.data());
  apply_members(members, pixel_sets, rows.data(), d, plane, hd, "dec.w1", "dec.b1", hid.data(),
                scratch);
  for (float& v : hid) v = std::max(v, 0.0f);
  kernels::transpose(hid.data(), hd, plane, hid_rows.data());
  apply_members(members, pixel_sets, hid_rows.data(), hd, plane, c, "dec.w2", "dec.b2", out.data(),
                scratch);
  for (const auto& px : pixel_sets)
    for (std::size_t k = 0; k < c; ++k)
      for (std::uint32_t p : px) out[k * plane + p] = std::clamp(out[k * plane + p], 0.0f, 1.0f);
}

Tensor purify_full(const Purifier& p, const Tensor& x, PurifyStats* stats) {
  if (!((x.rank() == 4 && x.dim(0) == 1) || x.rank() == 3)) {
    throw ShapeError("purify_full expects one image, got " + shape_str(x.shape()));
  }
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const PackedPurifier packed(p);
  const PackedPurifier* members[] = {&packed};
  const RegionAssignment whole{{0, h, 0, w}, 0};
  const std::vector<float> feat = encode_regions(members, x.data(), h, w, {&whole, 1}, stats);
  std::vector<std::vector<std::uint32_t>> px(1);
  px[0].resize(h * w);
  std::iota(px[0].begin(), px[0].end(), 0u);
  Tensor out({1, p.channels(), h, w});
  decode_pixels(members, feat, h, w, px, out.data());
  if (stats) ++stats->images;
  return out;
}

// ---------------------------------------------------------------------------
// Training

Var purifier_loss(Graph& g, Purifier& p, const Tensor& clean, const Tensor& adversarial,
                  float lambda, int p_norm, bool force_fidelity_term) {
  if (p_norm != 1 && p_norm != 2) throw std::invalid_argument("purifier loss: p must be 1 or 2");
  if (clean.shape() != adversarial.shape()) throw ShapeError("purifier loss: pair shapes differ");
  auto term = [&](const Tensor& input) {
    Var diff = g.sub(g.constant(clean), p.forward(g, g.constant(input), true));
    return g.mean(p_norm == 1 ? g.abs(diff) : g.mul(diff, diff));
  };
  Var loss = term(adversarial);
  if (lambda != 0.0f || force_fidelity_term) {
    loss = g.add(loss, g.mul(g.constant(Tensor::scalar(lambda)), term(clean)));
  }
  return loss;
}

PurifierTrainReport train_purifier(Purifier& p, const AdversarialPairs& pairs,
                                   const PurifierTrainConfig& cfg) {
  if (pairs.size() == 0) throw std::invalid_argument("train_purifier: no pairs");
  if (pairs.shape.channels != p.channels()) throw ShapeError("train_purifier: channel mismatch");
  if (cfg.batch == 0) throw std::invalid_argument("train_purifier: batch must be positive");
  const std::size_t n = pairs.size();
  const std::size_t per = pairs.shape.channels * pairs.shape.height * pairs.shape.width;
  const Shape img = {pairs.shape.channels, pairs.shape.height, pairs.shape.width};

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  {
    Stream rng(cfg.seed, {0x5B17});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::size_t held = static_cast<std::size_t>(std::llround(cfg.heldout_fraction * static_cast<double>(n)));
  if (held >= n) held = 0;
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
  const std::vector<std::size_t> heldout(order.end() - static_cast<std::ptrdiff_t>(held), order.end());

  auto gather = [&](const std::vector<float>& src, std::span<const std::size_t> idx) {
    Tensor t({idx.size(), img[0], img[1], img[2]});
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[k] * per), per,
                  t.data().begin() + static_cast<std::ptrdiff_t>(k * per));
    return t;
  };

  Adam opt(p.params(), AdamConfig{cfg.lr});
  PurifierTrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Stream rng(cfg.seed, {0x7EA2, epoch});
    for (std::size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[rng.below(i)]);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < train.size(); s += cfg.batch) {
      const std::span<const std::size_t> idx(train.data() + s, std::min(cfg.batch, train.size() - s));
      Graph g;
      Var loss;
      try {
        loss = purifier_loss(g, p, gather(pairs.clean, idx), gather(pairs.adversarial, idx),
                             cfg.lambda, cfg.p_norm);
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged(std::string("purifier training diverged: ") + e.what());
      }
      const float value = g.value(loss).item();
      if (!std::isfinite(value)) throw TrainingDiverged("purifier training diverged");
      g.backward(loss);
      opt.step();
      total += value;
      ++batches;
    }
    report.final_loss = batches ? total / static_cast<double>(batches) : 0.0;
  }

  const auto& eval = heldout.empty() ? train : heldout;
  double err = 0.0;
  for (std::size_t i : eval) {
    const Tensor adv = gather(pairs.adversarial, {&i, 1});
    const Tensor out = purify_full(p, adv);
    for (std::size_t k = 0; k < per; ++k) err += std::abs(out[k] - pairs.clean[i * per + k]);
  }
  report.heldout_l1 = err / static_cast<double>(eval.size() * per);
  return report;
}

}  // namespace rlp
