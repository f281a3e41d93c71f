#include "rlp/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <mutex>
#include <thread>

namespace rlp {

// ---------------------------------------------------------------------------
// Defense

Defense Defense::none() { return Defense(); }

Defense Defense::transform(HeuristicTransform t) {
  Defense d;
  d.kind_ = Kind::kTransform;
  d.transform_ = t;
  d.name_ = t.name();
  return d;
}

Defense Defense::purifier(std::shared_ptr<const PurifierPool> single) {
  if (!single || single->size() != 1) throw std::invalid_argument("purifier defense needs exactly one purifier");
  Defense d;
  d.kind_ = Kind::kPurifier;
  d.pool_ = std::move(single);
  d.name_ = "purifier";
  return d;
}

Defense Defense::patchwise(std::shared_ptr<const PurifierPool> pool, std::size_t rows, std::size_t cols) {
  if (!pool || pool->empty()) throw std::invalid_argument("patchwise defense needs a non-empty pool");
  Defense d;
  d.kind_ = Kind::kPatchwise;
  d.pool_ = std::move(pool);
  d.rows_ = rows;
  d.cols_ = cols;
  d.name_ = "patchwise";
  return d;
}

Defense Defense::ensemble(std::shared_ptr<const PurifierPool> pool) {
  if (!pool || pool->empty()) throw std::invalid_argument("ensemble defense needs a non-empty pool");
  Defense d;
  d.kind_ = Kind::kEnsemble;
  d.pool_ = std::move(pool);
  d.name_ = "ensemble";
  return d;
}

bool Defense::randomized() const {
  switch (kind_) {
    case Kind::kTransform: return transform_.randomized();
    case Kind::kPatchwise:
    case Kind::kEnsemble: return pool_->size() > 1;
    default: return false;
  }
}

Defense Defense::renamed(std::string name) const {
  Defense d = *this;
  d.name_ = std::move(name);
  return d;
}

Tensor Defense::apply(const Tensor& x, Stream& rng, PurifyStats* stats) const {
  switch (kind_) {
    case Kind::kNone: return x;
    case Kind::kTransform: return transform_.apply(x, rng);
    case Kind::kPurifier: return purify_full(pool_->member(0), x, stats);
    case Kind::kPatchwise: {
      const std::size_t r = x.rank();
      const PatchGrid grid = PatchGrid::make(x.dim(r - 2), x.dim(r - 1), rows_, cols_);
      return purify_patchwise(*pool_, x, grid, rng, stats);
    }
    case Kind::kEnsemble: return purify_ensemble(*pool_, x, rng, stats);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Oracle

DefendedOracle::DefendedOracle(const Classifier& classifier, Defense defense, OutputMode mode,
                               std::size_t budget, std::uint64_t stream_root)
    : classifier_(&classifier), defense_(std::move(defense)), mode_(mode), budget_(budget),
      root_(stream_root) {}

std::optional<std::vector<float>> DefendedOracle::forward(const Tensor& x) {
  const ImageShape& s = classifier_->input_shape();
  const bool ok = (x.rank() == 4 && x.dim(0) == 1 && x.dim(1) == s.channels && x.dim(2) == s.height &&
                   x.dim(3) == s.width);
  if (!ok) throw ShapeError("oracle query has shape " + shape_str(x.shape()));
  if (exhausted()) return std::nullopt;
  Stream rng(root_, {queries_});
  ++queries_;
  const Tensor defended = defense_.apply(x, rng);
  const Tensor scores = predict(*classifier_, defended);
  return std::vector<float>(scores.data().begin(), scores.data().end());
}

std::optional<std::vector<float>> DefendedOracle::scores(const Tensor& x) {
  if (mode_ != OutputMode::kScores) throw std::logic_error("oracle is in label mode");
  return forward(x);
}

std::optional<std::size_t> DefendedOracle::label(const Tensor& x) {
  auto s = forward(x);
  if (!s) return std::nullopt;
  return argmax(*s);
}

// ---------------------------------------------------------------------------
// Shared attack plumbing

std::string_view attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::kNes: return "NES";
    case AttackKind::kSimba: return "SimBA";
    case AttackKind::kSquare: return "Square";
    case AttackKind::kBoundary: return "Boundary";
    case AttackKind::kHopSkipJump: return "HopSkipJump";
  }
  return "?";
}

AttackKind parse_attack(std::string_view s) {
  for (AttackKind k : {AttackKind::kNes, AttackKind::kSimba, AttackKind::kSquare, AttackKind::kBoundary,
                       AttackKind::kHopSkipJump}) {
    std::string a(attack_name(k)), b(s);
    std::transform(a.begin(), a.end(), a.begin(), ::tolower);
    std::transform(b.begin(), b.end(), b.begin(), ::tolower);
    if (a == b) return k;
  }
  if (s == "hsj" || s == "HSJ") return AttackKind::kHopSkipJump;
  throw std::invalid_argument("unknown attack '" + std::string(s) + "'");
}

OutputMode attack_mode(AttackKind k) {
  return (k == AttackKind::kBoundary || k == AttackKind::kHopSkipJump) ? OutputMode::kLabel
                                                                        : OutputMode::kScores;
}

double perturbation_norm(std::span<const float> a, std::span<const float> b, NormKind norm) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc = norm == NormKind::kLinf ? std::max(acc, std::abs(d)) : acc + d * d;
  }
  return norm == NormKind::kLinf ? acc : std::sqrt(acc);
}

void project_ball(std::span<float> v, std::span<const float> x, NormKind norm, double radius) {
  if (norm == NormKind::kLinf) {
    const float e = static_cast<float>(radius);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(std::clamp(v[i], x[i] - e, x[i] + e), 0.0f, 1.0f);
    return;
  }
  for (float& f : v) f = std::clamp(f, 0.0f, 1.0f);
  const double n = perturbation_norm(v, x, NormKind::kL2);
  if (n > radius) {
    // Shrinking toward x keeps the point inside [0,1] since both ends are.
    const double s = radius / n;
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = std::clamp(static_cast<float>(x[i] + s * (static_cast<double>(v[i]) - x[i])), 0.0f, 1.0f);
  }
}

namespace {

struct BudgetExhausted {};

bool in_ball(std::span<const float> v, std::span<const float> x, NormKind norm, double radius) {
  for (float f : v)
    if (!(f >= 0.0f && f <= 1.0f)) return false;
  const double n = perturbation_norm(v, x, norm);
  return norm == NormKind::kLinf ? n <= radius + 1e-6 : n <= radius * (1.0 + 1e-6) + 1e-9;
}

// Wraps the oracle for one attack run: phase accounting, success detection and
// the trace.
class Session {
 public:
  Session(DefendedOracle& o, const AttackProblem& p, AttackOutcome& out)
      : o_(o), p_(p), out_(out), start_(o.queries()) {
    p.validate(o.num_classes());
    out_.best = p.x;
  }

  double margin(const Tensor& x, const char* phase) {
    auto s = o_.scores(x);
    if (!s) throw BudgetExhausted{};
    ++out_.phase_queries[phase];
    const double m = margin_loss(*s, p_.label, p_.target);
    if (m < 0.0) note_adversarial(x);
    return m;
  }

  bool adversarial(const Tensor& x, const char* phase) {
    auto l = o_.label(x);
    if (!l) throw BudgetExhausted{};
    ++out_.phase_queries[phase];
    const bool adv = p_.target ? *l == *p_.target : *l != p_.label;
    if (adv) note_adversarial(x);
    return adv;
  }

  void trace(double value, bool accepted, const Tensor& x) {
    out_.trace.push_back({o_.queries(), value, accepted, norm(x)});
  }

  double norm(const Tensor& x) const { return perturbation_norm(x.data(), p_.x.data(), p_.norm); }
  bool done() const { return out_.success; }

  void finish(const Tensor& fallback) {
    out_.queries = o_.queries() - start_;
    if (!out_.success) {
      Tensor b = fallback;
      project_ball(b.data(), p_.x.data(), p_.norm, p_.radius);
      out_.best = std::move(b);
    }
    out_.norm = norm(out_.best);
  }

 private:
  void note_adversarial(const Tensor& x) {
    if (out_.success || !in_ball(x.data(), p_.x.data(), p_.norm, p_.radius)) return;
    out_.success = true;
    out_.success_query = o_.queries();
    out_.best = x;
  }

  DefendedOracle& o_;
  const AttackProblem& p_;
  AttackOutcome& out_;
  std::size_t start_;
};

std::vector<double> normal_vector(std::size_t n, Stream& rng) {
  std::vector<double> v(n);
  for (double& f : v) f = rng.normal();
  return v;
}

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double f : v) s += f * f;
  return std::sqrt(s);
}

Tensor clipped(const Tensor& base, std::span<const double> dir, double scale) {
  Tensor out = base;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = std::clamp(static_cast<float>(base[i] + scale * dir[i]), 0.0f, 1.0f);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// NES

AttackOutcome nes_attack(DefendedOracle& o, const AttackProblem& p, const NesParams& prm, Stream& rng) {
  if (prm.samples < 2 || prm.samples % 2) throw std::invalid_argument("NES samples must be even and >= 2");
  if (!(prm.sigma > 0.0) || !(prm.lr > 0.0)) throw std::invalid_argument("NES lr and sigma must be positive");
  AttackOutcome out;
  Session s(o, p, out);
  Tensor cur = p.x;
  const std::size_t d = cur.numel();
  try {
    s.trace(s.margin(cur, "init"), true, cur);
    while (!s.done()) {
      std::vector<double> g(d, 0.0);
      for (std::size_t k = 0; k < prm.samples / 2; ++k) {
        const std::vector<double> u = normal_vector(d, rng);
        const double fp = s.margin(clipped(cur, u, prm.sigma), "estimate");
        if (s.done()) break;
        const double fm = s.margin(clipped(cur, u, -prm.sigma), "estimate");
        if (s.done()) break;
        for (std::size_t i = 0; i < d; ++i) g[i] += (fp - fm) * u[i];
      }
      if (s.done()) break;
      for (double& v : g) v /= static_cast<double>(prm.samples) * prm.sigma;
      if (p.norm == NormKind::kLinf) {
        for (std::size_t i = 0; i < d; ++i) {
          const double sg = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
          cur[i] = static_cast<float>(cur[i] - prm.lr * sg);
        }
      } else if (const double n = l2(g); n > 0.0) {
        for (std::size_t i = 0; i < d; ++i) cur[i] = static_cast<float>(cur[i] - prm.lr * g[i] / n);
      }
      project_ball(cur.data(), p.x.data(), p.norm, p.radius);
      s.trace(s.margin(cur, "step"), true, cur);
    }
  } catch (const BudgetExhausted&) {
  }
  s.finish(cur);
  return out;
}

// ---------------------------------------------------------------------------
// SimBA (pixel basis)

AttackOutcome simba_attack(DefendedOracle& o, const AttackProblem& p, const SimbaParams& prm, Stream& rng) {
  if (!(prm.step > 0.0)) throw std::invalid_argument("SimBA step must be positive");
  AttackOutcome out;
  Session s(o, p, out);
  Tensor cur = p.x;
  const std::size_t d = cur.numel();
  std::vector<std::size_t> perm(d);
  std::size_t next = d;
  bool queried_this_pass = true;
  try {
    double best = s.margin(cur, "init");
    s.trace(best, true, cur);
    while (!s.done()) {
      if (next == d) {
        if (!queried_this_pass) break;  // every move is blocked by the constraints
        queried_this_pass = false;
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = d; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        next = 0;
      }
      const std::size_t coord = perm[next++];
      for (double sign : {-1.0, 1.0}) {
        Tensor cand = cur;
        cand[coord] = static_cast<float>(cand[coord] + sign * prm.step);
        project_ball(cand.data(), p.x.data(), p.norm, p.radius);
        if (cand == cur) continue;
        queried_this_pass = true;
        const double m = s.margin(cand, "search");
        const bool accepted = m < best;
        s.trace(m, accepted, cand);
        if (accepted) {
          cur = std::move(cand);
          best = m;
          break;
        }
        if (s.done()) break;
      }
    }
  } catch (const BudgetExhausted&) {
  }
  s.finish(cur);
  return out;
}

// ---------------------------------------------------------------------------
// Square

double square_p_schedule(double p_init, std::size_t it, std::size_t n_iters) {
  const std::size_t i = n_iters ? static_cast<std::size_t>(static_cast<double>(it) / static_cast<double>(n_iters) * 10000.0) : 0;
  if (10 < i && i <= 50) return p_init / 2;
  if (50 < i && i <= 200) return p_init / 4;
  if (200 < i && i <= 500) return p_init / 8;
  if (500 < i && i <= 1000) return p_init / 16;
  if (1000 < i && i <= 2000) return p_init / 32;
  if (2000 < i && i <= 4000) return p_init / 64;
  if (4000 < i && i <= 6000) return p_init / 128;
  if (6000 < i && i <= 8000) return p_init / 256;
  if (8000 < i && i <= 10000) return p_init / 512;
  return p_init;
}

AttackOutcome square_attack(DefendedOracle& o, const AttackProblem& p, const SquareParams& prm, Stream& rng) {
  if (p.norm != NormKind::kLinf) throw std::invalid_argument("Square attack is implemented for l_inf only");
  if (!(prm.p_init >= 0.05 && prm.p_init <= 0.5)) throw std::invalid_argument("Square p_init must be in [0.05, 0.5]");
  AttackOutcome out;
  Session s(o, p, out);
  const std::size_t c = p.x.dim(1), h = p.x.dim(2), w = p.x.dim(3);
  const float eps = static_cast<float>(p.radius);
  const auto& x = p.x;
  auto at = [&](std::size_t ch, std::size_t y, std::size_t col) { return (ch * h + y) * w + col; };
  Tensor cur = x;
  try {
    // The clean point is only a reference; the stripe init below replaces it
    // whatever its margin.
    s.trace(s.margin(x, "init"), false, x);
    if (s.done()) throw BudgetExhausted{};
    // Vertical stripes: one random sign per (channel, column).
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t col = 0; col < w; ++col) {
        const float v = static_cast<float>(rng.sign()) * eps;
        for (std::size_t y = 0; y < h; ++y) {
          const std::size_t k = at(ch, y, col);
          cur[k] = std::clamp(x[k] + v, 0.0f, 1.0f);
        }
      }
    }
    double best = s.margin(cur, "init");
    s.trace(best, true, cur);
    const std::size_t n_iters = o.budget();
    for (std::size_t it = 1; !s.done(); ++it) {
      const double pf = square_p_schedule(prm.p_init, it - 1, n_iters);
      long side = std::lround(std::sqrt(pf * static_cast<double>(h * w)));
      side = std::clamp<long>(side, 1, static_cast<long>(std::max<std::size_t>(h, 2) - 1));
      const std::size_t sz = static_cast<std::size_t>(side);
      const std::size_t r0 = rng.below(h - sz + 1), c0 = rng.below(w - sz + 1);
      Tensor cand = cur;
      for (int attempt = 0; attempt < 10; ++attempt) {
        bool changed = false;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const float v = static_cast<float>(rng.sign()) * eps;
          for (std::size_t y = r0; y < r0 + sz; ++y)
            for (std::size_t col = c0; col < c0 + sz; ++col) {
              const std::size_t k = at(ch, y, col);
              cand[k] = std::clamp(x[k] + v, 0.0f, 1.0f);
              changed |= cand[k] != cur[k];
            }
        }
        if (changed) break;
      }
      const double m = s.margin(cand, "search");
      const bool accepted = m < best;
      s.trace(m, accepted, cand);
      if (accepted) {
        cur = std::move(cand);
        best = m;
      }
    }
  } catch (const BudgetExhausted&) {
  }
  s.finish(cur);
  return out;
}

// ---------------------------------------------------------------------------
// Decision-based attacks

namespace {

// Random uniform images until one is adversarial, then a binary search on the
// blend toward x. Returns nullopt when no start is found within the sub-budget.
std::optional<Tensor> find_start(Session& s, const AttackProblem& p, DefendedOracle& o,
                                 double init_fraction, Stream& rng) {
  const std::size_t sub = std::max<std::size_t>(
      2, static_cast<std::size_t>(init_fraction * static_cast<double>(o.budget())));
  const std::size_t start = o.queries();
  if (s.adversarial(p.x, "init")) return p.x;
  const std::size_t blend_steps = 10;
  std::optional<Tensor> adv;
  while (!adv && o.queries() - start + blend_steps < sub) {
    Tensor r = p.x;
    for (float& v : r.data()) v = static_cast<float>(rng.uniform());
    if (s.adversarial(r, "init")) adv = std::move(r);
  }
  if (!adv) return std::nullopt;
  double lo = 0.0, hi = 1.0;
  auto blend = [&](double t) {
    Tensor b = p.x;
    for (std::size_t i = 0; i < b.numel(); ++i)
      b[i] = static_cast<float>((1.0 - t) * p.x[i] + t * (*adv)[i]);
    return b;
  };
  for (std::size_t k = 0; k < blend_steps; ++k) {
    const double mid = 0.5 * (lo + hi);
    if (s.adversarial(blend(mid), "init")) hi = mid;
    else lo = mid;
  }
  return blend(hi);
}

}  // namespace

AttackOutcome boundary_attack(DefendedOracle& o, const AttackProblem& p, const BoundaryParams& prm,
                              Stream& rng) {
  if (p.norm != NormKind::kL2) throw std::invalid_argument("Boundary attack is implemented for l2 only");
  AttackOutcome out;
  Session s(o, p, out);
  Tensor best = p.x;
  try {
    auto start = find_start(s, p, o, prm.init_fraction, rng);
    if (!start) {
      out.failed_init = true;
      throw BudgetExhausted{};
    }
    best = std::move(*start);
    double best_dist = s.norm(best);
    s.trace(best_dist, true, best);
    if (best_dist == 0.0 || (s.done() && prm.stop_at_success)) throw BudgetExhausted{};

    const std::size_t d = best.numel();
    double sph = prm.spherical_step, src = prm.source_step;
    std::deque<bool> sph_stats, step_stats;
    for (std::size_t step = 1;; ++step) {
      if (src < prm.source_step_convergence) break;
      const bool check = step % prm.stats_every == 0;
      // Proposal: an orthogonal step on the sphere around x, then a step
      // toward x.
      std::vector<double> unnorm(d);
      for (std::size_t i = 0; i < d; ++i) unnorm[i] = static_cast<double>(p.x[i]) - best[i];
      const double src_norm = l2(unnorm);
      std::vector<double> eta = normal_vector(d, rng);
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += eta[i] * unnorm[i] / src_norm;
      for (std::size_t i = 0; i < d; ++i) eta[i] -= dot * unnorm[i] / src_norm;
      const double en = l2(eta);
      for (double& v : eta) v *= sph * src_norm / en;
      std::vector<double> dir(d);
      for (std::size_t i = 0; i < d; ++i) dir[i] = eta[i] - unnorm[i];
      const double dn = l2(dir);
      Tensor spherical = p.x;
      for (std::size_t i = 0; i < d; ++i)
        spherical[i] = std::clamp(static_cast<float>(p.x[i] + dir[i] * src_norm / dn), 0.0f, 1.0f);
      std::vector<double> toward(d);
      for (std::size_t i = 0; i < d; ++i) toward[i] = static_cast<double>(p.x[i]) - spherical[i];
      const double tn = l2(toward);
      const double len = tn > 0.0 ? std::max(0.0, src * src_norm + tn - src_norm) / tn : 0.0;
      Tensor cand = spherical;
      for (std::size_t i = 0; i < d; ++i)
        cand[i] = std::clamp(static_cast<float>(spherical[i] + len * toward[i]), 0.0f, 1.0f);

      if (check) sph_stats.push_back(s.adversarial(spherical, "step"));
      if (s.done() && prm.stop_at_success) break;
      const bool adv = s.adversarial(cand, "step");
      if (check) step_stats.push_back(adv);
      const double dist = s.norm(cand);
      const bool accepted = adv && dist < best_dist;
      s.trace(dist, accepted, cand);
      if (accepted) {
        best = std::move(cand);
        best_dist = dist;
      }
      if (s.done() && prm.stop_at_success) break;
      if (check) {
        if (sph_stats.size() >= 100) {
          const double rate = static_cast<double>(std::count(sph_stats.begin(), sph_stats.end(), true)) / 100.0;
          if (rate > 0.5) {
            sph *= prm.step_adaptation;
            src *= prm.step_adaptation;
          } else if (rate < 0.2) {
            sph /= prm.step_adaptation;
            src /= prm.step_adaptation;
          }
          sph_stats.clear();
        }
        if (step_stats.size() >= 30) {
          const double rate = static_cast<double>(std::count(step_stats.begin(), step_stats.end(), true)) / 30.0;
          if (rate > 0.25) src *= prm.step_adaptation;
          else if (rate < 0.1) src /= prm.step_adaptation;
          step_stats.clear();
        }
      }
    }
  } catch (const BudgetExhausted&) {
  }
  s.finish(best);
  return out;
}

namespace {

// Point between x (eps = 0) and v (eps = full) under the constraint geometry.
Tensor hsj_project(const Tensor& x, const Tensor& v, double eps, NormKind norm) {
  Tensor out = v;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (norm == NormKind::kLinf) {
      out[i] = static_cast<float>(std::clamp(static_cast<double>(v[i]), x[i] - eps, x[i] + eps));
    } else {
      out[i] = static_cast<float>((1.0 - eps) * x[i] + eps * v[i]);
    }
  }
  return out;
}

Tensor hsj_binary_search(Session& s, const AttackProblem& p, const Tensor& adv, double theta) {
  double hi, threshold;
  if (p.norm == NormKind::kLinf) {
    hi = perturbation_norm(adv.data(), p.x.data(), NormKind::kLinf);
    threshold = std::min(hi * theta, theta);
  } else {
    hi = 1.0;
    threshold = theta;
  }
  double lo = 0.0;
  while ((hi - lo) / threshold > 1.0) {
    const double mid = 0.5 * (lo + hi);
    if (s.adversarial(hsj_project(p.x, adv, mid, p.norm), "binary")) hi = mid;
    else lo = mid;
  }
  return hsj_project(p.x, adv, hi, p.norm);
}

}  // namespace

AttackOutcome hopskipjump_attack(DefendedOracle& o, const AttackProblem& p, const HsjParams& prm,
                                 Stream& rng) {
  if (prm.n_est == 0) throw std::invalid_argument("HopSkipJump needs n_est >= 1");
  AttackOutcome out;
  Session s(o, p, out);
  Tensor best = p.x;
  const std::size_t d = p.x.numel();
  const double dd = static_cast<double>(d);
  const double theta = p.norm == NormKind::kLinf ? prm.gamma / (dd * dd) : prm.gamma / (dd * std::sqrt(dd));
  try {
    auto start = find_start(s, p, o, prm.init_fraction, rng);
    if (!start) {
      out.failed_init = true;
      throw BudgetExhausted{};
    }
    if (s.norm(*start) == 0.0) {
      best = std::move(*start);
      throw BudgetExhausted{};
    }
    Tensor bnd = hsj_binary_search(s, p, *start, theta);
    best = bnd;
    double best_dist = s.norm(best);
    s.trace(best_dist, true, best);
    for (std::size_t t = 1; !(s.done() && prm.stop_at_success); ++t) {
      const double dist = s.norm(bnd);
      const double delta = t == 1 ? 0.1
                                  : (p.norm == NormKind::kLinf ? dd * theta * dist
                                                               : std::sqrt(dd) * theta * dist);
      // Monte Carlo estimate of the boundary normal from label queries.
      std::vector<std::vector<double>> rvs(prm.n_est);
      std::vector<double> fval(prm.n_est);
      for (std::size_t k = 0; k < prm.n_est; ++k) {
        std::vector<double> rv(d);
        if (p.norm == NormKind::kLinf) {
          for (double& v : rv) v = rng.uniform(-1.0, 1.0);
        } else {
          rv = normal_vector(d, rng);
        }
        const double n = l2(rv);
        for (double& v : rv) v /= n;
        Tensor q = clipped(bnd, rv, delta);
        for (std::size_t i = 0; i < d; ++i) rv[i] = (static_cast<double>(q[i]) - bnd[i]) / delta;
        fval[k] = s.adversarial(q, "estimate") ? 1.0 : -1.0;
        rvs[k] = std::move(rv);
      }
      const double mean = std::accumulate(fval.begin(), fval.end(), 0.0) / static_cast<double>(prm.n_est);
      std::vector<double> grad(d, 0.0);
      for (std::size_t k = 0; k < prm.n_est; ++k) {
        const double wgt = (mean == 1.0 || mean == -1.0) ? mean : fval[k] - mean;
        for (std::size_t i = 0; i < d; ++i) grad[i] += wgt * rvs[k][i];
      }
      for (double& v : grad) v /= static_cast<double>(prm.n_est);
      const double gn = l2(grad);
      if (gn > 0.0)
        for (double& v : grad) v /= gn;
      out.hsj_directions.emplace_back(grad.begin(), grad.end());
      std::vector<double> update = grad;
      if (p.norm == NormKind::kLinf)
        for (double& v : update) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);

      // Geometric step-size search away from the boundary.
      double eps = dist / std::sqrt(static_cast<double>(t));
      Tensor next = bnd;
      for (int halvings = 0; halvings < 30; ++halvings) {
        Tensor q = clipped(bnd, update, eps);
        if (s.adversarial(q, "step")) {
          next = std::move(q);
          break;
        }
        eps /= 2.0;
      }
      bnd = hsj_binary_search(s, p, next, theta);
      const double nd = s.norm(bnd);
      const bool accepted = nd <= best_dist;
      s.trace(nd, accepted, bnd);
      if (accepted) {
        best = bnd;
        best_dist = nd;
      }
    }
  } catch (const BudgetExhausted&) {
  }
  s.finish(best);
  return out;
}

AttackOutcome run_attack(DefendedOracle& o, const AttackProblem& p, const AttackConfig& cfg, Stream& rng) {
  switch (cfg.kind) {
    case AttackKind::kNes: return nes_attack(o, p, cfg.nes, rng);
    case AttackKind::kSimba: return simba_attack(o, p, cfg.simba, rng);
    case AttackKind::kSquare: return square_attack(o, p, cfg.square, rng);
    case AttackKind::kBoundary: return boundary_attack(o, p, cfg.boundary, rng);
    case AttackKind::kHopSkipJump: return hopskipjump_attack(o, p, cfg.hsj, rng);
  }
  throw std::invalid_argument("unknown attack kind");
}

// ---------------------------------------------------------------------------
// Evaluation

EvaluationResult evaluate_attack(const Classifier& c, const Defense& defense, const LabeledImages& images,
                                 const AttackConfig& cfg, std::size_t budget, NormKind norm,
                                 double radius, std::uint64_t seed, std::size_t jobs) {
  EvaluationResult r;
  const std::size_t n = images.size();
  r.outcomes.resize(n);
  r.image_ids.resize(n);
  std::iota(r.image_ids.begin(), r.image_ids.end(), 0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        AttackProblem prob;
        prob.x = images.image(i);
        prob.label = static_cast<std::size_t>(images.label(i));
        prob.norm = norm;
        prob.radius = radius;
        DefendedOracle oracle(c, defense, attack_mode(cfg.kind), budget,
                              Stream(seed, {i, 1}).key());
        Stream rng(seed, {i, 2});
        r.outcomes[i] = run_attack(oracle, prob, cfg, rng);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  std::size_t robust = 0;
  for (const auto& o : r.outcomes) robust += o.success ? 0 : 1;
  r.robust_accuracy = n ? static_cast<double>(robust) / static_cast<double>(n) : 0.0;
  return r;
}

std::vector<double> robust_curve(const EvaluationResult& r, std::span<const std::size_t> grid) {
  std::vector<double> out;
  for (std::size_t q : grid) {
    std::size_t robust = 0;
    for (const auto& o : r.outcomes) robust += (o.success_query && *o.success_query <= q) ? 0 : 1;
    out.push_back(r.outcomes.empty() ? 0.0 : static_cast<double>(robust) / static_cast<double>(r.outcomes.size()));
  }
  return out;
}

void write_trace_csv(std::ostream& os, const EvaluationResult& r) {
  os << "image_id,query_index,margin_or_distance,accepted,norm\n";
  char buf[160];
  for (std::size_t i = 0; i < r.outcomes.size(); ++i) {
    for (const TracePoint& t : r.outcomes[i].trace) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%d,%.9g\n", r.image_ids[i], t.query, t.value,
                    t.accepted ? 1 : 0, t.norm);
      os << buf;
    }
  }
}

}  // namespace rlp
