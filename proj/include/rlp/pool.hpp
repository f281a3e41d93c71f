#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "rlp/purifier.hpp"
#include "rlp/rng.hpp"
#include "rlp/whitebox.hpp"

namespace rlp {

/// rows x cols partition of an H x W frame. Patches are listed row-major; the
/// last row and column absorb the remainder when the extent does not divide.
struct PatchGrid {
  std::size_t rows = 3, cols = 3;
  std::size_t height = 0, width = 0;
  std::vector<kernels::Rect> rects;

  static PatchGrid make(std::size_t height, std::size_t width, std::size_t rows, std::size_t cols);
  std::size_t size() const { return rects.size(); }
};

/// Ordered purifiers m_0..m_K plus their measured diversity.
class PurifierPool {
 public:
  PurifierPool() = default;
  explicit PurifierPool(std::vector<Purifier> members, double nu_hat = 0.0,
                        std::uint64_t stream_id = 0);

  std::size_t size() const { return members_.size(); }
  bool empty() const { return members_.empty(); }
  const Purifier& member(std::size_t i) const { return members_.at(i); }
  const std::vector<Purifier>& members() const { return members_; }
  double nu_hat() const { return nu_hat_; }
  void set_nu_hat(double v);
  std::uint64_t stream_id() const { return stream_id_; }
  /// Pool of the first k members; nu_hat must be re-estimated by the caller.
  PurifierPool prefix(std::size_t k) const;
  const PackedPurifier& packed(std::size_t i) const { return packed_.at(i); }
  std::vector<const PackedPurifier*> packed_pointers() const;
  /// Lowest index of a member with the same family and parameters as member i.
  std::size_t canonical(std::size_t i) const { return canonical_.at(i); }

 private:
  std::vector<Purifier> members_;
  std::vector<PackedPurifier> packed_;
  std::vector<std::size_t> canonical_;
  double nu_hat_ = 0.0;
  std::uint64_t stream_id_ = 0;
};

/// Purifies x [1,C,H,W] with one uniformly drawn member per patch. Draws are
/// taken from `rng` in patch order, one below(K) each. The whole frame is
/// encoded once (see encode_regions); patches drawn for the same member are
/// purified together. Members with equal parameters count as the same member,
/// so a pool of copies behaves like a pool of one.
Tensor purify_patchwise(const PurifierPool& pool, const Tensor& x, const PatchGrid& grid,
                        Stream& rng, PurifyStats* stats = nullptr,
                        std::vector<std::size_t>* assignment = nullptr);

/// Every member encodes the full frame; each pixel then takes the feature and
/// decoder of a uniformly drawn member (row-major pixel order, one draw each).
Tensor purify_ensemble(const PurifierPool& pool, const Tensor& x, Stream& rng,
                       PurifyStats* stats = nullptr);

/// max over probes and member pairs of ||m_i(x) - m_j(x)||_2.
double estimate_nu(const PurifierPool& pool, std::span<const Tensor> probes);

/// One cell of the diversity grid.
struct PoolFactor {
  WhiteBoxMethod attack = WhiteBoxMethod::kPgd;
  EncoderFamily family = EncoderFamily::kEdsrLite;
  std::size_t depth = 32;
};

/// {BIM, FGSM, PGD} x {edsr-lite, rcan-lite} at one depth, in p0..p5 order.
std::vector<PoolFactor> default_pool_factors(std::size_t depth = 32);
/// "BIM_EDSR" style name.
std::string factor_name(const PoolFactor& f);

/// Trains one purifier per factor on the pairs of its attack. Member i is
/// seeded from (seed, i); `extra` appends members that cycle through the
/// factors again with fresh seeds. nu_hat is measured on `probes`.
PurifierPool train_pool(std::span<const PoolFactor> factors,
                        const std::map<WhiteBoxMethod, AdversarialPairs>& pairs,
                        std::span<const Tensor> probes, const PurifierTrainConfig& cfg,
                        std::uint64_t seed, std::size_t extra = 0);

/// Writes pool.json plus p<i>.pdt checkpoints into `dir`.
void save_pool(const std::filesystem::path& dir, const PurifierPool& pool);
PurifierPool load_pool(const std::filesystem::path& dir);

}  // namespace rlp
