// Acceptance run: evaluates every criterion and prints one PASS/FAIL line each.
//
//   rlp_acceptance [--workdir DIR]
//
// The end-to-end criteria train and evaluate the default configuration twice,
// into DIR/run_a and DIR/run_b. Exit status is 0 when all criteria pass.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "rlp/attacks.hpp"
#include "rlp/config.hpp"
#include "rlp/harness.hpp"
#include "rlp/pool.hpp"
#include "rlp/theory.hpp"
#include "support/fd_check.hpp"
#include "support/hsj_oracle.hpp"
#include "support/toy.hpp"

using namespace rlp;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// Criteria run in dependency order; lines are printed by number at the end.
std::map<int, std::pair<bool, std::string>> verdicts;

void verdict(int n, bool ok, const std::string& what, const std::string& detail) {
  std::string line = std::string(ok ? "PASS" : "FAIL") + " criterion " + std::to_string(n) + ": " + what + " | " + detail;
  std::cerr << "[acceptance] " << line << std::endl;
  verdicts[n] = {ok, std::move(line)};
}

void note(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

Tensor random_image(std::size_t c, std::size_t h, std::size_t w, Stream& rng) {
  Tensor x({1, c, h, w});
  for (float& v : x.data()) v = static_cast<float>(rng.uniform());
  return x;
}

// ---------------------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  double worst = 0, worst_fwd = 0, worst_abs = 0;
  std::string worst_op;
  bool ok = true;
  for (Primitive op : fd::all_primitives()) {
    auto r = fd::fd_check_primitive(op, 100, 20240611);
    ok &= r.cases == 100 && r.max_err < 1e-3;
    if (r.max_err >= worst) worst = r.max_err, worst_op = std::string(primitive_name(op));
    worst_fwd = std::max(worst_fwd, r.forward_err);
    worst_abs = std::max(worst_abs, r.max_abs);
  }
  const double secs = seconds_since(t0);
  verdict(1, ok && secs < 60, "finite-difference check of every primitive, 100 cases each",
          "max rel err " + fmt("%.2e", worst) + " (" + worst_op + "), max abs diff " + fmt("%.2e", worst_abs) + ", " + fmt("%.1f", secs) + " s");
}

void criterion2() {
  Stream rng(2, {1});
  std::size_t checked = 0, mismatches = 0;
  for (EncoderFamily fam : {EncoderFamily::kEdsrLite, EncoderFamily::kRcanLite}) {
    PurifierPool pool(std::vector<Purifier>{Purifier(fam, 32, 17)});
    for (std::size_t i = 0; i < 50; ++i) {
      Tensor x = random_image(3, 16, 16, rng);
      Tensor ref = purify_full(pool.member(0), x);
      for (std::size_t g : {1u, 3u, 5u}) {
        Stream s(i, {g});
        mismatches += purify_patchwise(pool, x, PatchGrid::make(16, 16, g, g), s) != ref;
        ++checked;
      }
      Stream s(i, {9});
      mismatches += purify_ensemble(pool, x, s) != ref;
      ++checked;
    }
  }
  verdict(2, mismatches == 0, "pool size 1 is bit-identical to the single purifier",
          std::to_string(checked - mismatches) + "/" + std::to_string(checked) + " outputs identical");
}

void criterion3() {
  std::vector<Purifier> members;
  for (std::size_t k = 0; k < 10; ++k) members.emplace_back(EncoderFamily::kEdsrLite, 32, 300 + k);
  const std::size_t h = 16, w = 16, images = 3;
  const auto grid = PatchGrid::make(h, w, 3, 3);
  Stream rng(3, {1});
  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < images; ++i) xs.push_back(random_image(3, h, w, rng));
  bool ok = true;
  std::uint64_t patch_ref = 0;
  std::string detail;
  for (std::size_t K = 1; K <= 10; ++K) {
    PurifierPool pool(std::vector<Purifier>(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(K)));
    PurifyStats ps, es;
    for (std::size_t i = 0; i < images; ++i) {
      Stream s1(i, {K, 1}), s2(i, {K, 2});
      purify_patchwise(pool, xs[i], grid, s1, &ps);
      purify_ensemble(pool, xs[i], s2, &es);
    }
    const std::uint64_t per_patch = ps.encoder_pixels / images, per_ens = es.encoder_pixels / images;
    if (K == 1) patch_ref = per_patch;
    ok &= ps.encoder_pixels == patch_ref * images && per_patch == patch_ref;
    ok &= es.encoder_pixels == K * h * w * images;
    if (K == 1 || K == 10)
      detail += "K=" + std::to_string(K) + ": patchwise " + std::to_string(per_patch) + ", ensemble " +
                std::to_string(per_ens) + "; ";
  }
  verdict(3, ok, "encoder pixels per image: patchwise constant, ensemble K x H x W", detail);
}

void criterion4(const ExperimentConfig& base, const PurifierPool& pool) {
  ExperimentConfig cfg = base;
  cfg.bench.pool_sizes = {1, 10};
  const auto t0 = Clock::now();
  auto rows = latency_bench(cfg, pool);
  const double secs = seconds_since(t0);
  std::map<std::pair<std::string, std::size_t>, double> med;
  for (const auto& r : rows) med[{r.method, r.pool_size}] = r.median_ms;
  const double pr = med[{"patchwise", 10}] / med[{"patchwise", 1}];
  const double er = med[{"ensemble", 10}] / med[{"ensemble", 1}];
  verdict(4, pr <= 1.2 && er >= 5.0 && secs < 600,
          "latency at pool 10 vs 1: patchwise within 1.2x, ensemble at least 5x",
          "patchwise " + fmt("%.3f", pr) + "x (" + fmt("%.3f", med[{"patchwise", 1}]) + " -> " +
              fmt("%.3f", med[{"patchwise", 10}]) + " ms), ensemble " + fmt("%.2f", er) + "x, " +
              std::to_string(cfg.bench.reps) + " reps, " + fmt("%.0f", secs) + " s");
}

void criterion5(const std::vector<theory::TheoremRow>& rows, double secs, const ExperimentConfig& cfg) {
  std::map<std::string, std::size_t> informative;
  std::size_t fails = 0;
  double worst_slack = 1e9;
  for (const auto& r : rows) {
    if (!r.pass) ++fails;
    if (r.note == "skipped") continue;
    informative[r.config_id.substr(0, r.config_id.find("-probe"))]++;
    worst_slack = std::min(worst_slack, r.bound - r.measured);
  }
  bool enough = !informative.empty() && cfg.theory.t2_trials >= 1000;
  std::string detail;
  for (const auto& [k, n] : informative) {
    enough &= n >= 20;
    detail += k + ": " + std::to_string(n) + " probes; ";
  }
  detail += std::to_string(cfg.theory.t2_trials) + " trials, " + std::to_string(fails) + " violations, min slack " +
            fmt("%.3f", worst_slack) + ", theory section " + fmt("%.0f", secs) + " s";
  verdict(5, enough && fails == 0 && secs < 300, "sign-flip frequency within the bound at every probe", detail);
}

void criterion6() {
  using namespace theory;
  Stream rng(6, {1});
  const std::size_t d = 5;
  Vec a(d), x(d);
  for (double& v : a) v = rng.uniform(-1, 1);
  for (double& v : x) v = rng.uniform(-1, 1);
  ScalarFn lin = [&](std::span<const double> z) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += a[i] * z[i];
    return s;
  };
  std::vector<VectorFn> pool{[](std::span<const double> z) { return Vec(z.begin(), z.end()); }};
  Stream s1(6, {2});
  auto [mean, se] = mean_gradient(lin, pool, x, 0.1, 100000, s1);
  double worst = 0;
  for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::fabs(mean[i] - a[i]) / se[i]);

  ScalarFn sq = [](std::span<const double> z) {
    double s = 0;
    for (double v : z) s += v * v;
    return s;
  };
  const double mu = 0.2;
  auto e = gaussian_smooth(sq, x, {.mu = mu, .n = 100000, .seed = 6});
  double xx = 0;
  for (double v : x) xx += v * v;
  const double z = std::fabs(e.mean - (xx + mu * mu * d)) / e.stderr_;
  verdict(6, worst <= 3 && z <= 3, "estimator mean and smoothed squared norm within 3 stderr",
          "gradient worst " + fmt("%.2f", worst) + " stderr over " + std::to_string(d) + " coords; smoothing " +
              fmt("%.2f", z) + " stderr");
}

void criterion7(const std::vector<theory::TheoremRow>& rows) {
  std::size_t pass = 0;
  std::string detail;
  for (const auto& r : rows) {
    pass += r.pass;
    detail += "K" + std::to_string(r.K) + " " + fmt("%.3g", r.measured) + "<=" + fmt("%.3g", r.bound) + "; ";
  }
  // Formula: the bound at fixed constants strictly increases with nu.
  bool monotone = true;
  double prev = -1;
  for (int i = 0; i <= 1000; ++i) {
    const double nu = 1e-3 * i;
    const double b = theory::theorem1_bound(1.3, 1.0, 8, 200, 0.1, theory::gamma(nu, 0.01, 1.05, 8), 1.05);
    if (i > 0) monotone &= b > prev;
    prev = b;
  }
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].nu_hat > rows[i - 1].nu_hat) monotone &= rows[i].bound > rows[i - 1].bound;
  const double frac = rows.empty() ? 0.0 : static_cast<double>(pass) / static_cast<double>(rows.size());
  verdict(7, rows.size() >= 4 && frac >= 0.95 && monotone,
          "trajectory gradient norm below the bound, bound increasing in nu",
          detail + fmt("%.0f", 100 * frac) + "% pass, monotone " + (monotone ? "yes" : "no"));
}

void criterion8(const std::vector<SweepRow>& rows) {
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows) acc[r.K].first += r.robust_accuracy, acc[r.K].second++;
  bool ok = acc.size() == 4;
  double running = -1;
  std::string detail;
  for (const auto& [K, v] : acc) {
    const double m = v.first / static_cast<double>(v.second);
    ok &= v.second >= 5 && m >= running - 0.03;
    running = std::max(running, m);
    detail += "K" + std::to_string(K) + " " + fmt("%.3f", m) + "; ";
  }
  verdict(8, ok, "Square@500 robust accuracy non-decreasing in pool size (3pp band)", detail + "5 seeds");
}

void criterion9(const ExperimentConfig& cfg, const Artifacts& a, const std::vector<RobustRow>& robust) {
  double patch = -1, puri = -1;
  for (const auto& r : robust) {
    if (r.attack != "Square" || r.budget != 2500) continue;
    if (r.defense == "patchwise") patch = r.robust_accuracy;
    if (r.defense == "purifier") puri = r.robust_accuracy;
  }
  const bool first = patch >= 0 && puri >= 0 && patch - puri >= 0.10;

  // Shrinkage against no defense, Square@2500, same images and streams as the grid.
  std::vector<std::size_t> idx(std::min(cfg.attacks.images, a.test.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const LabeledImages images = a.test.subset(idx);
  AttackConfig ac = cfg.attacks.params;
  ac.kind = AttackKind::kSquare;
  const std::uint64_t seed = component_seed(cfg, "attack/Square/2500");
  auto med = [&](const std::string& name) {
    auto res = evaluate_attack(*a.classifier, make_defense(name, a, cfg), images, ac, 2500, NormKind::kLinf,
                               cfg.attacks.linf_radius, seed, cfg.jobs);
    return median_queries_to_success(res, 2500);
  };
  const double m_shrink = med("shrink"), m_none = med("none");
  verdict(9, first && m_shrink <= m_none,
          "patchwise beats the single purifier by 10pp under Square@2500; shrinkage median queries <= undefended",
          "patchwise " + fmt("%.3f", patch) + " vs purifier " + fmt("%.3f", puri) + "; shrink median " +
              fmt("%.1f", m_shrink) + " vs undefended " + fmt("%.1f", m_none));
}

NormKind natural_norm(AttackKind k) {
  return k == AttackKind::kSimba || k == AttackKind::kBoundary ? NormKind::kL2 : NormKind::kLinf;
}

void criterion10() {
  const auto& c = toy::classifier().model;
  const auto& test = toy::test_set();
  std::size_t audits = 0, audit_bad = 0, balls = 0, ball_bad = 0, mono = 0, mono_bad = 0;
  for (AttackKind k : {AttackKind::kNes, AttackKind::kSimba, AttackKind::kSquare, AttackKind::kBoundary,
                       AttackKind::kHopSkipJump}) {
    AttackConfig cfg;
    cfg.kind = k;
    for (std::size_t i = 0; i < 20; ++i) {
      AttackProblem p;
      p.x = test.image(i);
      p.label = static_cast<std::size_t>(test.label(i));
      p.norm = natural_norm(k);
      p.radius = p.norm == NormKind::kLinf ? 8.0 / 255.0 : 1.0;
      for (std::size_t budget : {0u, 1u, 37u, 300u, 600u}) {
        DefendedOracle o(c, Defense::none(), attack_mode(k), budget, 10 + i);
        Stream rng(10 + i, {budget});
        AttackOutcome out = run_attack(o, p, cfg, rng);
        std::size_t phases = 0;
        for (const auto& [name, n] : out.phase_queries) phases += n;
        ++audits;
        audit_bad += !(phases == o.queries() && out.queries == o.queries() && out.queries <= budget);
        ++balls;
        bool in = true;
        for (float v : out.best.data()) in &= v >= 0.0f && v <= 1.0f;
        const double n = perturbation_norm(out.best.data(), p.x.data(), p.norm);
        in &= p.norm == NormKind::kLinf ? n <= p.radius + 1e-6 : n <= p.radius * (1 + 1e-6);
        ball_bad += !in;
        if (k != AttackKind::kNes) {
          ++mono;
          double last = std::numeric_limits<double>::infinity();
          bool ok = true;
          for (const auto& t : out.trace) {
            if (!t.accepted) continue;
            ok &= t.value <= last;
            last = t.value;
          }
          mono_bad += !ok;
        }
      }
    }
  }
  auto h = hsj_oracle::boundary_normal_cosine(10);
  const bool ok = audit_bad == 0 && ball_bad == 0 && mono_bad == 0 && h.mean_cosine >= 0.7 && h.failed_init == 0 &&
                  h.estimate_counts_exact;
  verdict(10, ok, "query audits, ball containment, monotone traces, HSJ normal cosine",
          std::to_string(audits - audit_bad) + "/" + std::to_string(audits) + " audits, " +
              std::to_string(balls - ball_bad) + "/" + std::to_string(balls) + " in ball, " +
              std::to_string(mono - mono_bad) + "/" + std::to_string(mono) + " monotone, HSJ cosine " +
              fmt("%.3f", h.mean_cosine) + " over " + std::to_string(h.directions) + " directions");
}

std::map<std::string, std::string> csv_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    const auto rel = fs::relative(e.path(), dir).string();
    if (rel.rfind("artifacts", 0) == 0) continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    out[rel] = ss.str();
  }
  return out;
}

void criterion11(const fs::path& a, const fs::path& b) {
  auto fa = csv_files(a), fb = csv_files(b);
  std::size_t same = 0;
  std::string differing;
  for (const auto& [name, bytes] : fa) {
    auto it = fb.find(name);
    if (it != fb.end() && it->second == bytes) ++same;
    else differing += " " + name;
  }
  const bool ok = !fa.empty() && fa.size() == fb.size() && same == fa.size();
  verdict(11, ok, "two runs of the default config give byte-identical CSVs",
          std::to_string(same) + "/" + std::to_string(fa.size()) + " files identical" +
              (differing.empty() ? "" : ", differ:" + differing));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "rlp_acceptance";
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg == "--workdir" && i + 1 < argc) work = argv[++i];
    else {
      std::cerr << "usage: rlp_acceptance [--workdir DIR]\n";
      return 64;
    }
  }
  const auto t_all = Clock::now();

  criterion1();
  criterion2();
  criterion3();
  criterion6();
  criterion10();

  ExperimentConfig cfg;
  const fs::path run_a = work / "run_a", run_b = work / "run_b";
  fs::remove_all(work);
  RunReport report;
  for (const fs::path& out : {run_a, run_b}) {
    cfg.out = out;
    note("default configuration into " + out.string());
    const auto t0 = Clock::now();
    RunReport r = run_experiment(cfg);
    emit_report(r, out);
    note(fmt("%.0f", seconds_since(t0)) + " s");
    if (out == run_a) report = std::move(r);
  }
  cfg.out = run_a;
  Artifacts art = prepare(cfg, "pool");  // cached by run_a

  {
    RunReport theory_only;
    const auto t0 = Clock::now();
    run_theory(cfg, &art, theory_only);
    const double secs = seconds_since(t0);
    criterion5(report.theorem2, secs, cfg);
  }
  criterion7(report.theorem1);
  criterion8(report.sweep);
  criterion9(cfg, art, report.robust);
  criterion4(cfg, *art.pool);
  criterion11(run_a, run_b);

  int failures = 0;
  for (const auto& [n, v] : verdicts) {
    failures += !v.first;
    std::cout << v.second << "\n";
  }
  const int evaluated = static_cast<int>(verdicts.size());
  std::cout << "acceptance: " << evaluated << " criteria evaluated, " << evaluated - failures << " passed, "
            << failures << " failed (" << fmt("%.0f", seconds_since(t_all)) << " s)" << std::endl;
  return failures == 0 ? 0 : 1;
}
