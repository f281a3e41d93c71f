#include "rlp/pool.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace rlp {

PatchGrid PatchGrid::make(std::size_t height, std::size_t width, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("patch grid needs at least one row and column");
  if (rows > height || cols > width) {
    throw std::invalid_argument("patch grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " is finer than the " + std::to_string(height) + "x" +
                                std::to_string(width) + " image");
  }
  PatchGrid g;
  g.rows = rows;
  g.cols = cols;
  g.height = height;
  g.width = width;
  const std::size_t ph = height / rows, pw = width / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      kernels::Rect rect;
      rect.row0 = r * ph;
      rect.row1 = r + 1 == rows ? height : (r + 1) * ph;
      rect.col0 = c * pw;
      rect.col1 = c + 1 == cols ? width : (c + 1) * pw;
      g.rects.push_back(rect);
    }
  }
  return g;
}

PurifierPool::PurifierPool(std::vector<Purifier> members, double nu_hat, std::uint64_t stream_id)
    : members_(std::move(members)), stream_id_(stream_id) {
  for (const Purifier& m : members_) {
    if (m.channels() != members_[0].channels() || m.depth() != members_[0].depth()) {
      throw std::invalid_argument("pool members must share depth and channel count");
    }
  }
  for (const Purifier& m : members_) packed_.emplace_back(m);
  for (std::size_t i = 0; i < members_.size(); ++i) {
    std::size_t j = 0;
    while (members_[j].family() != members_[i].family() || !(members_[j].params() == members_[i].params())) ++j;
    canonical_.push_back(j);
  }
  set_nu_hat(nu_hat);
}

void PurifierPool::set_nu_hat(double v) {
  if (!(v >= 0.0)) throw std::invalid_argument("nu_hat must be non-negative");
  nu_hat_ = v;
}

PurifierPool PurifierPool::prefix(std::size_t k) const {
  if (k == 0 || k > members_.size()) throw std::out_of_range("pool prefix size");
  return PurifierPool(std::vector<Purifier>(members_.begin(), members_.begin() + static_cast<std::ptrdiff_t>(k)),
                      0.0, stream_id_);
}

std::vector<const PackedPurifier*> PurifierPool::packed_pointers() const {
  std::vector<const PackedPurifier*> out;
  for (const PackedPurifier& m : packed_) out.push_back(&m);
  return out;
}

namespace {

struct Frame {
  std::size_t c, h, w;
};

Frame frame_of(const PurifierPool& pool, const Tensor& x) {
  if (pool.empty()) throw std::invalid_argument("purification with an empty pool");
  if (!((x.rank() == 4 && x.dim(0) == 1) || x.rank() == 3)) {
    throw ShapeError("purification expects one image, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.rank();
  const Frame f{x.dim(r - 3), x.dim(r - 2), x.dim(r - 1)};
  if (f.c != pool.member(0).channels()) throw ShapeError("image channels do not match the pool");
  return f;
}

}  // namespace

Tensor purify_patchwise(const PurifierPool& pool, const Tensor& x, const PatchGrid& grid,
                        Stream& rng, PurifyStats* stats, std::vector<std::size_t>* assignment) {
  const Frame f = frame_of(pool, x);
  if (grid.height != f.h || grid.width != f.w) throw ShapeError("patch grid does not match image");
  const std::vector<const PackedPurifier*> members = pool.packed_pointers();
  std::vector<RegionAssignment> regions;
  regions.reserve(grid.size());
  for (const kernels::Rect& rect : grid.rects) regions.push_back({rect, pool.canonical(rng.below(pool.size()))});

  const std::vector<float> feat = encode_regions(members, x.data(), f.h, f.w, regions, stats);
  std::vector<std::vector<std::uint32_t>> px(members.size());
  for (const RegionAssignment& r : regions)
    for (std::size_t y = r.rect.row0; y < r.rect.row1; ++y)
      for (std::size_t c = r.rect.col0; c < r.rect.col1; ++c)
        px[r.member].push_back(static_cast<std::uint32_t>(y * f.w + c));
  Tensor out({1, f.c, f.h, f.w});
  decode_pixels(members, feat, f.h, f.w, px, out.data());
  if (stats) ++stats->images;
  if (assignment) {
    assignment->clear();
    for (const RegionAssignment& r : regions) assignment->push_back(r.member);
  }
  return out;
}

Tensor purify_ensemble(const PurifierPool& pool, const Tensor& x, Stream& rng, PurifyStats* stats) {
  const Frame f = frame_of(pool, x);
  const std::size_t plane = f.h * f.w, k = pool.size();
  const std::size_t d = pool.member(0).depth();
  const RegionAssignment whole{{0, f.h, 0, f.w}, 0};
  std::vector<std::vector<float>> feats;
  feats.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const PackedPurifier* one[] = {&pool.packed(i)};
    feats.push_back(encode_regions(one, x.data(), f.h, f.w, {&whole, 1}, stats));
  }
  // Gather each pixel's feature from its drawn member into one map, then
  // decode per member.
  std::vector<float> mixed(d * plane);
  std::vector<std::vector<std::uint32_t>> px(k);
  for (std::size_t p = 0; p < plane; ++p) {
    const std::size_t m = rng.below(k);
    px[m].push_back(static_cast<std::uint32_t>(p));
    for (std::size_t ch = 0; ch < d; ++ch) mixed[ch * plane + p] = feats[m][ch * plane + p];
  }
  Tensor out({1, f.c, f.h, f.w});
  decode_pixels(pool.packed_pointers(), mixed, f.h, f.w, px, out.data());
  if (stats) ++stats->images;
  return out;
}

double estimate_nu(const PurifierPool& pool, std::span<const Tensor> probes) {
  if (pool.empty()) throw std::invalid_argument("estimate_nu: empty pool");
  if (probes.empty()) throw std::invalid_argument("estimate_nu: no probes");
  double nu = 0.0;
  for (const Tensor& x : probes) {
    std::vector<Tensor> outs;
    for (const Purifier& m : pool.members()) outs.push_back(purify_full(m, x));
    for (std::size_t i = 0; i < outs.size(); ++i) {
      for (std::size_t j = i + 1; j < outs.size(); ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < outs[i].numel(); ++k) {
          const double diff = static_cast<double>(outs[i][k]) - outs[j][k];
          s += diff * diff;
        }
        nu = std::max(nu, std::sqrt(s));
      }
    }
  }
  return nu;
}

std::vector<PoolFactor> default_pool_factors(std::size_t depth) {
  std::vector<PoolFactor> out;
  for (WhiteBoxMethod a : {WhiteBoxMethod::kBim, WhiteBoxMethod::kFgsm, WhiteBoxMethod::kPgd})
    for (EncoderFamily f : {EncoderFamily::kEdsrLite, EncoderFamily::kRcanLite})
      out.push_back({a, f, depth});
  return out;
}

std::string factor_name(const PoolFactor& f) {
  return std::string(whitebox_name(f.attack)) + "_" + std::string(family_tag(f.family));
}

PurifierPool train_pool(std::span<const PoolFactor> factors,
                        const std::map<WhiteBoxMethod, AdversarialPairs>& pairs,
                        std::span<const Tensor> probes, const PurifierTrainConfig& cfg,
                        std::uint64_t seed, std::size_t extra) {
  if (factors.empty()) throw std::invalid_argument("train_pool: no factor combinations");
  std::vector<Purifier> members;
  const std::size_t total = factors.size() + extra;
  for (std::size_t i = 0; i < total; ++i) {
    const PoolFactor& fac = factors[i % factors.size()];
    const auto it = pairs.find(fac.attack);
    if (it == pairs.end()) {
      throw std::invalid_argument("train_pool: no pairs for " + std::string(whitebox_name(fac.attack)));
    }
    const std::uint64_t member_seed = derive_key(seed, i);
    Purifier p(fac.family, fac.depth, member_seed, it->second.shape.channels);
    p.provenance().attack = std::string(whitebox_name(fac.attack));
    PurifierTrainConfig local = cfg;
    local.seed = derive_key(member_seed, 0x7A1);
    train_purifier(p, it->second, local);
    members.push_back(std::move(p));
  }
  PurifierPool pool(std::move(members), 0.0, seed);
  if (pool.size() > 1 && !probes.empty()) pool.set_nu_hat(estimate_nu(pool, probes));
  return pool;
}

void save_pool(const std::filesystem::path& dir, const PurifierPool& pool) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["format"] = "rlp-pool-1";
  j["nu_hat"] = pool.nu_hat();
  j["stream_id"] = pool.stream_id();
  j["members"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Purifier& m = pool.member(i);
    const std::string file = "p" + std::to_string(i) + ".pdt";
    save_checkpoint(dir / file, m.params());
    nlohmann::ordered_json e;
    e["id"] = "p" + std::to_string(i);
    e["attack"] = m.provenance().attack;
    e["family"] = std::string(family_name(m.family()));
    e["depth"] = m.depth();
    e["channels"] = m.channels();
    e["seed"] = m.provenance().seed;
    e["checkpoint"] = file;
    e["digest"] = file_digest(dir / file);
    j["members"].push_back(e);
  }
  std::ofstream os(dir / "pool.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "pool.json").string());
  os << j.dump(2) << "\n";
}

PurifierPool load_pool(const std::filesystem::path& dir) {
  std::ifstream is(dir / "pool.json");
  if (!is) throw std::runtime_error("missing pool manifest " + (dir / "pool.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed pool manifest: ") + e.what());
  }
  if (j.value("format", "") != "rlp-pool-1") throw std::runtime_error("unknown pool manifest format");
  std::vector<Purifier> members;
  for (const auto& e : j.at("members")) {
    PurifierProvenance prov;
    prov.attack = e.at("attack").get<std::string>();
    prov.family = parse_family(e.at("family").get<std::string>());
    prov.depth = e.at("depth").get<std::size_t>();
    prov.seed = e.at("seed").get<std::uint64_t>();
    members.emplace_back(prov, e.at("channels").get<std::size_t>(),
                         load_checkpoint(dir / e.at("checkpoint").get<std::string>()));
  }
  if (members.empty()) throw std::runtime_error("pool manifest lists no members");
  return PurifierPool(std::move(members), j.at("nu_hat").get<double>(),
                      j.value("stream_id", std::uint64_t{0}));
}

}  // namespace rlp
