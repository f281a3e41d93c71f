#include "rlp/dataset.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "rlp/rng.hpp"

namespace rlp {

LabeledImages::LabeledImages(ImageShape shape, std::size_t num_classes)
    : shape_(shape), num_classes_(num_classes) {}

void LabeledImages::push(std::span<const float> pixels, int label) {
  if (pixels.size() != shape_.numel()) throw ShapeError("LabeledImages::push: pixel count");
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes_) {
    throw std::out_of_range("LabeledImages::push: label " + std::to_string(label));
  }
  pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
  labels_.push_back(label);
}

std::span<const float> LabeledImages::pixels(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("LabeledImages::pixels");
  return std::span<const float>(pixels_).subspan(i * shape_.numel(), shape_.numel());
}

Tensor LabeledImages::image(std::size_t i) const {
  auto p = pixels(i);
  return Tensor(shape_.batch(1), std::vector<float>(p.begin(), p.end()));
}

Tensor LabeledImages::batch(std::span<const std::size_t> idx) const {
  std::vector<float> data;
  data.reserve(idx.size() * shape_.numel());
  for (std::size_t i : idx) {
    auto p = pixels(i);
    data.insert(data.end(), p.begin(), p.end());
  }
  return Tensor(shape_.batch(idx.size()), std::move(data));
}

LabeledImages LabeledImages::subset(std::span<const std::size_t> idx) const {
  LabeledImages out(shape_, num_classes_);
  for (std::size_t i : idx) out.push(pixels(i), label(i));
  return out;
}

std::vector<std::size_t> LabeledImages::class_counts() const {
  std::vector<std::size_t> counts(num_classes_, 0);
  for (int l : labels_) ++counts[static_cast<std::size_t>(l)];
  return counts;
}

LabeledImages synthetic_textures(const SyntheticTexturesSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("synthetic_textures: need >= 2 classes");
  if (spec.count == 0 || spec.height == 0 || spec.width == 0 || spec.channels == 0) {
    throw std::invalid_argument("synthetic_textures: empty spec");
  }
  const ImageShape shape{spec.channels, spec.height, spec.width};
  const std::size_t plane = spec.height * spec.width;

  // Class templates: oriented gratings, zero mean and unit RMS per channel.
  Stream tpl(0x7E47ULL, {spec.classes, spec.channels, spec.height, spec.width});
  std::vector<std::vector<float>> templates(spec.classes, std::vector<float>(shape.numel()));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const double theta = std::numbers::pi * (static_cast<double>(c) + 0.15 * tpl.uniform()) /
                         static_cast<double>(spec.classes);
    const double freq = 1.5 + tpl.uniform();
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      const double phase = 2.0 * std::numbers::pi * tpl.uniform();
      float* t = templates[c].data() + ch * plane;
      double mean = 0.0;
      for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
          const double u = (std::cos(theta) * static_cast<double>(x) / spec.width +
                            std::sin(theta) * static_cast<double>(y) / spec.height);
          t[y * spec.width + x] = static_cast<float>(std::sin(2.0 * std::numbers::pi * freq * u + phase));
          mean += t[y * spec.width + x];
        }
      }
      mean /= static_cast<double>(plane);
      double rms = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        t[i] = static_cast<float>(t[i] - mean);
        rms += static_cast<double>(t[i]) * t[i];
      }
      rms = std::sqrt(rms / static_cast<double>(plane));
      for (std::size_t i = 0; i < plane; ++i) t[i] = static_cast<float>(t[i] / std::max(rms, 1e-6));
    }
  }

  LabeledImages out(shape, spec.classes);
  Stream rng(spec.seed, {0x5EED});
  std::vector<float> px(shape.numel());
  for (std::size_t i = 0; i < spec.count; ++i) {
    const int label = static_cast<int>(i % spec.classes);
    const double amp = rng.uniform(spec.amplitude_lo, spec.amplitude_hi);
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      const double offset = rng.uniform(0.3, 0.7);
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = ch * plane + p;
        const double v = offset + amp * templates[static_cast<std::size_t>(label)][k] +
                         spec.noise * rng.normal();
        px[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    out.push(px, label);
  }
  return out;
}

LabeledImages read_cifar10_binary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open CIFAR-10 batch " + path.string());
  constexpr std::size_t kPixels = 3 * 32 * 32;
  LabeledImages out(ImageShape{3, 32, 32}, 10);
  std::array<unsigned char, kPixels + 1> rec{};
  std::vector<float> px(kPixels);
  while (true) {
    is.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    const auto got = static_cast<std::size_t>(is.gcount());
    if (got == 0) break;
    if (got != rec.size()) throw std::runtime_error("CIFAR-10 batch: truncated record in " + path.string());
    if (rec[0] > 9) throw std::runtime_error("CIFAR-10 batch: label byte out of range");
    for (std::size_t k = 0; k < kPixels; ++k) px[k] = static_cast<float>(rec[k + 1]) / 255.0f;
    out.push(px, rec[0]);
  }
  return out;
}

LabeledImages balanced_subset(const LabeledImages& data, std::size_t n, std::uint64_t seed) {
  const std::size_t classes = data.num_classes();
  if (classes == 0 || n % classes != 0) {
    throw std::invalid_argument("balanced_subset: " + std::to_string(n) +
                                " is not divisible by the class count");
  }
  const std::size_t per = n / classes;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Stream rng(seed, {0xBA1A});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::size_t> taken(classes, 0);
  std::vector<std::size_t> pick;
  for (std::size_t i : order) {
    const auto c = static_cast<std::size_t>(data.label(i));
    if (taken[c] < per) {
      ++taken[c];
      pick.push_back(i);
    }
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (taken[c] < per) {
      throw std::runtime_error("balanced_subset: class " + std::to_string(c) + " has only " +
                               std::to_string(taken[c]) + " images, need " + std::to_string(per));
    }
  }
  std::sort(pick.begin(), pick.end());
  return data.subset(pick);
}

std::pair<LabeledImages, LabeledImages> split_holdout(const LabeledImages& data,
                                                      double heldout_fraction,
                                                      std::uint64_t seed) {
  if (heldout_fraction < 0.0 || heldout_fraction >= 1.0) {
    throw std::invalid_argument("split_holdout: fraction must be in [0,1)");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Stream rng(seed, {0x5917});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_hold = static_cast<std::size_t>(std::round(heldout_fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::sort(hold.begin(), hold.end());
  std::sort(train.begin(), train.end());
  return {data.subset(train), data.subset(hold)};
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) os.put(static_cast<char>((v >> s) & 0xFF));
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw std::runtime_error("pair file: truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_floats(std::ostream& os, std::span<const float> v) {
  for (float f : v) put_u32(os, std::bit_cast<std::uint32_t>(f));
}

void get_floats(std::istream& is, float* dst, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = std::bit_cast<float>(get_u32(is));
}

}  // namespace

void save_pairs(const std::filesystem::path& path, const AdversarialPairs& pairs) {
  const std::size_t n = pairs.shape.numel();
  if (pairs.clean.size() != pairs.size() * n || pairs.adversarial.size() != pairs.size() * n) {
    throw ShapeError("save_pairs: inconsistent buffers");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("PDS1", 4);
  put_u32(os, static_cast<std::uint32_t>(pairs.attack.size()));
  os.write(pairs.attack.data(), static_cast<std::streamsize>(pairs.attack.size()));
  put_u32(os, static_cast<std::uint32_t>(pairs.size()));
  put_u32(os, static_cast<std::uint32_t>(pairs.shape.channels));
  put_u32(os, static_cast<std::uint32_t>(pairs.shape.height));
  put_u32(os, static_cast<std::uint32_t>(pairs.shape.width));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    put_u32(os, static_cast<std::uint32_t>(pairs.labels[i]));
    put_floats(os, std::span<const float>(pairs.clean).subspan(i * n, n));
    put_floats(os, std::span<const float>(pairs.adversarial).subspan(i * n, n));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

AdversarialPairs load_pairs(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::string_view(magic.data(), 4) != "PDS1") {
    throw std::runtime_error("pair file: bad magic in " + path.string());
  }
  AdversarialPairs p;
  p.attack.resize(get_u32(is));
  if (!is.read(p.attack.data(), static_cast<std::streamsize>(p.attack.size()))) {
    throw std::runtime_error("pair file: truncated");
  }
  const std::size_t count = get_u32(is);
  p.shape.channels = get_u32(is);
  p.shape.height = get_u32(is);
  p.shape.width = get_u32(is);
  const std::size_t n = p.shape.numel();
  p.labels.resize(count);
  p.clean.resize(count * n);
  p.adversarial.resize(count * n);
  for (std::size_t i = 0; i < count; ++i) {
    p.labels[i] = static_cast<int>(get_u32(is));
    get_floats(is, p.clean.data() + i * n, n);
    get_floats(is, p.adversarial.data() + i * n, n);
  }
  return p;
}

}  // namespace rlp
