#include "rlp/harness.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace rlp {
namespace fs = std::filesystem;

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// Lines of the canonical config whose key starts with one of `prefixes`.
std::string config_slice(const ExperimentConfig& cfg, std::initializer_list<std::string_view> prefixes) {
  std::stringstream in(canonical_config(cfg));
  std::string line, out;
  while (std::getline(in, line))
    for (auto p : prefixes)
      if (line.rfind(p, 0) == 0) {
        out += line + "\n";
        break;
      }
  return out;
}

std::string stage_key(const ExperimentConfig& cfg, std::initializer_list<std::string_view> prefixes) {
  return git_blob_hash(config_slice(cfg, prefixes)).substr(0, 12);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::vector<Tensor> probe_images(const LabeledImages& data, std::size_t n) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < std::min(n, data.size()); ++i) out.push_back(data.image(i));
  return out;
}

LabeledImages first_n(const LabeledImages& data, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, data.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return data.subset(idx);
}

std::shared_ptr<const PurifierPool> members_pool(const PurifierPool& pool, std::vector<std::size_t> idx) {
  std::vector<Purifier> m;
  for (auto i : idx) m.push_back(pool.member(i));
  return std::make_shared<PurifierPool>(std::move(m), 0.0, pool.stream_id());
}

void hash_dir(const fs::path& root, const fs::path& dir, std::map<std::string, std::string>& out) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out[fs::relative(f, root).generic_string()] = git_blob_hash_file(f);
}

}  // namespace

LabeledImages load_dataset(const DatasetConfig& spec, bool test_split, std::uint64_t seed) {
  if (spec.kind == "synthetic-textures") {
    SyntheticTexturesSpec s = spec.synthetic;
    s.seed = seed;
    if (test_split) s.count = spec.test_count;
    return synthetic_textures(s);
  }
  if (spec.kind == "cifar10-binary") {
    LabeledImages all = read_cifar10_binary(test_split ? spec.test_path : spec.train_path);
    std::size_t n = test_split ? spec.test_subset : spec.train_subset;
    return n ? balanced_subset(all, n, seed) : all;
  }
  throw ConfigError("unknown dataset kind " + spec.kind);
}

void save_classifier(const fs::path& dir, const Classifier& c) {
  fs::create_directories(dir);
  save_checkpoint(dir / "classifier.pdt", c.params());
  nlohmann::ordered_json j;
  j["format"] = "rlp-classifier-1";
  j["architecture"] = c.architecture().str();
  j["channels"] = c.input_shape().channels;
  j["height"] = c.input_shape().height;
  j["width"] = c.input_shape().width;
  j["num_classes"] = c.num_classes();
  write_file(dir / "classifier.json", j.dump(2) + "\n");
}

Classifier load_classifier(const fs::path& dir) {
  std::ifstream is(dir / "classifier.json");
  if (!is) throw std::runtime_error("missing " + (dir / "classifier.json").string());
  auto j = nlohmann::json::parse(is);
  if (j.value("format", "") != "rlp-classifier-1") throw std::runtime_error("unknown classifier format");
  ImageShape shape{j.at("channels").get<std::size_t>(), j.at("height").get<std::size_t>(),
                   j.at("width").get<std::size_t>()};
  return Classifier(Architecture::parse(j.at("architecture").get<std::string>()), shape,
                    j.at("num_classes").get<std::size_t>(), load_checkpoint(dir / "classifier.pdt"));
}

Artifacts prepare(const ExperimentConfig& cfg, const std::string& stage) {
  static const std::vector<std::string> order{"data", "classifier", "advdata", "pool"};
  auto level = std::find(order.begin(), order.end(), stage) - order.begin();
  if (level == static_cast<long>(order.size())) throw ConfigError("unknown stage " + stage);

  Artifacts a;
  a.train = load_dataset(cfg.dataset, false, component_seed(cfg, "dataset.train"));
  a.test = load_dataset(cfg.dataset, true, component_seed(cfg, "dataset.test"));
  if (level < 1) return a;

  const fs::path root = cfg.out / "artifacts";
  const fs::path cdir = root / ("classifier-" + stage_key(cfg, {"run.seed", "dataset.", "classifier."}));
  if (fs::exists(cdir / "classifier.json")) {
    a.classifier = std::make_shared<Classifier>(load_classifier(cdir));
  } else {
    ClassifierTrainConfig tc = cfg.classifier.train;
    tc.seed = component_seed(cfg, "classifier");
    auto trained = train_classifier(a.train, Architecture::parse(cfg.classifier.architecture), tc);
    std::cerr << "classifier: train acc " << trained.train_accuracy << ", held-out acc "
              << trained.heldout_accuracy << "\n";
    save_classifier(cdir, trained.model);
    a.classifier = std::make_shared<Classifier>(std::move(trained.model));
  }
  hash_dir(root, cdir, a.checkpoint_hashes);
  if (level < 2) return a;

  const fs::path adir =
      root / ("advdata-" + stage_key(cfg, {"run.seed", "dataset.", "classifier.", "whitebox."}));
  for (WhiteBoxMethod m : {WhiteBoxMethod::kBim, WhiteBoxMethod::kFgsm, WhiteBoxMethod::kPgd}) {
    fs::path file = adir / (std::string(whitebox_name(m)) + ".pds");
    if (fs::exists(file)) {
      a.pairs[m] = load_pairs(file);
    } else {
      WhiteBoxConfig w = cfg.pool.whitebox;
      w.method = m;
      w.seed = component_seed(cfg, "whitebox." + std::string(whitebox_name(m)));
      a.pairs[m] = generate_pairs(*a.classifier, a.train, w);
      fs::create_directories(adir);
      save_pairs(file, a.pairs[m]);
    }
  }
  hash_dir(root, adir, a.checkpoint_hashes);
  if (level < 3) return a;

  const fs::path pdir = root / ("pool-" + stage_key(cfg, {"run.seed", "dataset.", "classifier.", "whitebox.",
                                                          "pool.depth", "pool.extra", "pool.epochs",
                                                          "pool.lr", "pool.batch", "pool.lambda",
                                                          "pool.p_norm", "pool.heldout", "pool.probes"}));
  if (fs::exists(pdir / "pool.json")) {
    a.pool = std::make_shared<PurifierPool>(load_pool(pdir));
  } else {
    auto factors = default_pool_factors(cfg.pool.depth);
    auto probes = probe_images(a.test, cfg.pool.probes);
    a.pool = std::make_shared<PurifierPool>(
        train_pool(factors, a.pairs, probes, cfg.pool.train, component_seed(cfg, "pool"), cfg.pool.extra));
    save_pool(pdir, *a.pool);
  }
  hash_dir(root, pdir, a.checkpoint_hashes);
  return a;
}

Defense make_defense(const std::string& name, const Artifacts& a, const ExperimentConfig& cfg) {
  auto need_pool = [&] {
    if (!a.pool) throw std::runtime_error("defense " + name + " needs a trained pool");
  };
  if (name == "none") return Defense::none();
  if (name == "gaussian-noise") return Defense::transform({TransformKind::kGaussianNoise});
  if (name == "shrink") return Defense::transform({TransformKind::kShrink});
  if (name.rfind("median-", 0) == 0) {
    HeuristicTransform t{TransformKind::kMedianSmooth};
    t.kernel = std::stoi(name.substr(7));
    return Defense::transform(t);
  }
  if (name.rfind("bit-reduce-", 0) == 0) {
    HeuristicTransform t{TransformKind::kBitReduce};
    t.bits = std::stoi(name.substr(11));
    return Defense::transform(t);
  }
  if (name == "purifier" || name.rfind("purifier-", 0) == 0) {
    need_pool();
    std::size_t i = name == "purifier" ? 0 : std::stoul(name.substr(9));
    if (i >= a.pool->size()) throw std::runtime_error("no pool member " + std::to_string(i));
    return Defense::purifier(members_pool(*a.pool, {i})).renamed(name);
  }
  if (name == "patchwise" || name == "ensemble") {
    need_pool();
    auto pool = std::make_shared<PurifierPool>(a.pool->prefix(cfg.pool.members));
    return name == "patchwise" ? Defense::patchwise(pool, cfg.pool.grid_rows, cfg.pool.grid_cols)
                               : Defense::ensemble(pool);
  }
  throw ConfigError("unknown defense '" + name + "'");
}

double median_queries_to_success(const EvaluationResult& r, std::size_t budget) {
  std::vector<double> q;
  for (const auto& o : r.outcomes)
    q.push_back(o.success_query ? static_cast<double>(*o.success_query) : static_cast<double>(budget + 1));
  if (q.empty()) return 0.0;
  std::sort(q.begin(), q.end());
  std::size_t n = q.size();
  return n % 2 ? q[n / 2] : 0.5 * (q[n / 2 - 1] + q[n / 2]);
}

double defended_clean_accuracy(const Classifier& c, const Defense& d, const LabeledImages& data,
                               std::uint64_t seed, std::size_t draws) {
  if (data.empty()) return 0.0;
  if (!d.randomized()) draws = 1;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tensor x = data.image(i);
    for (std::size_t r = 0; r < draws; ++r) {
      DefendedOracle o(c, d, OutputMode::kLabel, 1, derive_key(seed, i * draws + r));
      correct += *o.label(x) == static_cast<std::size_t>(data.label(i));
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size() * draws);
}

void run_attack_grid(const ExperimentConfig& cfg, const Artifacts& a, RunReport& report) {
  const auto& g = cfg.attacks;
  LabeledImages images = first_n(a.test, g.images);
  for (const auto& dname : g.defenses) {
    std::optional<Defense> defense;
    try {
      defense = make_defense(dname, a, cfg);
    } catch (const std::exception& e) {
      for (const auto& at : g.attacks)
        for (std::size_t b : g.budgets)
          report.failures.push_back({dname, std::string(attack_name(at.kind)), b, e.what()});
      continue;
    }
    auto& curves = report.curves[dname];
    for (const auto& at : g.attacks) {
      const std::string aname(attack_name(at.kind));
      const std::size_t max_budget = *std::max_element(g.budgets.begin(), g.budgets.end());
      for (std::size_t budget : g.budgets) {
        try {
          AttackConfig ac = g.params;
          ac.kind = at.kind;
          double radius = at.norm == NormKind::kLinf ? g.linf_radius : g.l2_radius;
          std::uint64_t seed = component_seed(cfg, "attack/" + aname + "/" + std::to_string(budget));
          auto res = evaluate_attack(*a.classifier, *defense, images, ac, budget, at.norm, radius, seed, cfg.jobs);
          report.robust.push_back(
              {dname, aname, at.norm, budget, res.robust_accuracy, median_queries_to_success(res, budget)});
          if (g.write_traces) {
            std::ostringstream ts;
            write_trace_csv(ts, res);
            report.traces["trace_" + dname + "_" + aname + "_" + std::to_string(budget) + ".csv"] = ts.str();
          }
          std::cerr << dname << " / " << aname << " @" << budget << ": robust " << res.robust_accuracy << "\n";
          if (budget == max_budget) {
            std::vector<std::size_t> grid;
            std::size_t pts = std::max<std::size_t>(1, g.curve_points);
            for (std::size_t k = 0; k <= pts; ++k) grid.push_back(budget * k / pts);
            grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
            auto curve = robust_curve(res, grid);
            for (std::size_t k = 0; k < grid.size(); ++k) curves.push_back({aname, budget, grid[k], curve[k]});
          }
        } catch (const std::exception& e) {
          report.failures.push_back({dname, aname, budget, e.what()});
        }
      }
    }
  }
  report.sections_run.insert("attacks");
}

void run_clean(const ExperimentConfig& cfg, const Artifacts& a, RunReport& report) {
  std::vector<std::string> names{"none", "gaussian-noise"};
  for (const auto& d : cfg.attacks.defenses) names.push_back(d);
  if (a.pool) {
    for (std::size_t i = 0; i < std::min(cfg.pool.members, a.pool->size()); ++i)
      names.push_back("purifier-" + std::to_string(i));
    names.push_back("patchwise");
  }
  std::set<std::string> seen;
  const std::uint64_t seed = component_seed(cfg, "clean");
  for (const auto& n : names) {
    if (!seen.insert(n).second) continue;
    try {
      Defense d = make_defense(n, a, cfg);
      report.clean.push_back({n, defended_clean_accuracy(*a.classifier, d, a.test, seed)});
    } catch (const std::exception& e) {
      report.failures.push_back({n, "clean", 0, e.what()});
    }
  }
  report.sections_run.insert("clean");
}

void run_sweep(const ExperimentConfig& cfg, const Artifacts& a, RunReport& report) {
  const auto& s = cfg.sweep;
  LabeledImages images = first_n(a.test, s.images);
  auto probes = probe_images(a.test, cfg.pool.probes);
  AttackConfig ac = cfg.attacks.params;
  ac.kind = AttackKind::kSquare;
  // Seed s fixes both the attack stream and a random member order; the pool
  // of size K is the first K members of that order, so pools are nested in K
  // and no single member's quality is tied to one pool size.
  std::vector<std::vector<std::size_t>> orders;
  const std::size_t n = a.pool ? a.pool->size() : 0;
  for (std::size_t seed = 0; seed < s.seeds; ++seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Stream rng(component_seed(cfg, "sweep/order/" + std::to_string(seed)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    orders.push_back(std::move(order));
  }
  for (std::size_t K : s.pool_sizes) {
    try {
      if (K == 0 || K > n) throw std::runtime_error("pool smaller than sweep size");
      for (std::size_t seed = 0; seed < s.seeds; ++seed) {
        std::vector<std::size_t> idx(orders[seed].begin(), orders[seed].begin() + static_cast<long>(K));
        auto pool = members_pool(*a.pool, idx);
        double nu = K > 1 ? estimate_nu(*pool, probes) : 0.0;
        Defense d = Defense::patchwise(pool, cfg.pool.grid_rows, cfg.pool.grid_cols);
        auto res = evaluate_attack(*a.classifier, d, images, ac, s.budget, NormKind::kLinf,
                                   cfg.attacks.linf_radius, component_seed(cfg, "sweep/" + std::to_string(seed)),
                                   cfg.jobs);
        report.sweep.push_back({K, seed, nu, res.robust_accuracy, median_queries_to_success(res, s.budget)});
        std::cerr << "sweep K=" << K << " seed " << seed << ": robust " << res.robust_accuracy << "\n";
      }
    } catch (const std::exception& e) {
      report.failures.push_back({"patchwise-K" + std::to_string(K), "Square", s.budget, e.what()});
    }
  }
  report.sections_run.insert("sweep");
}

void run_theory(const ExperimentConfig& cfg, const Artifacts* a, RunReport& report) {
  using namespace theory;
  const auto& t = cfg.theory;

  Theorem1Config c1 = t.theorem1;
  c1.seed = component_seed(cfg, "theorem1");
  report.theorem1 = theorem1_experiment(c1).rows;

  // Toy pool: offsets of the identity on the synthetic objective.
  {
    const std::uint64_t seed = component_seed(cfg, "theorem2.toy");
    const std::size_t d = c1.dim;
    ToyFunction toy = make_toy_function(c1.function, d, seed);
    auto pool = offset_pool(t.t2_toy_pool, d, t.t2_toy_spread, seed);
    Stream pg(seed, {1});
    std::vector<Theorem2Probe> probes(t.t2_probes);
    std::vector<Vec> points;
    for (auto& p : probes) {
      for (std::size_t i = 0; i < d; ++i) p.x.push_back(0.5 * pg.normal());
      for (std::size_t i = 0; i < d; ++i) p.u.push_back(pg.normal());
      points.push_back(p.x);
    }
    double nu = estimate_nu(pool, points);
    auto fv = [&](std::span<const double> x) { return Vec{toy.f(x)}; };
    auto L = estimate_lipschitz(
        fv, [d](Stream& s) { Vec v(d); for (auto& e : v) e = s.normal(); return v; }, t.t2_lipschitz_pairs,
        derive_key(seed, 2));
    auto rows = theorem2_experiment(toy.f, pool, probes, t.t2_toy_mu, t.t2_trials, nu,
                                    L.L0_hat * t.t2_inflation, derive_key(seed, 3), "toy-offset");
    report.theorem2.insert(report.theorem2.end(), rows.begin(), rows.end());
  }

  // Trained pool: f is the classifier margin, members purify whole images.
  if (t.t2_trained_pool && a && a->pool && a->classifier) {
    const std::uint64_t seed = component_seed(cfg, "theorem2.trained");
    const Classifier& clf = *a->classifier;
    const ImageShape shape = clf.input_shape();
    const std::size_t d = shape.numel();
    auto pool = std::make_shared<PurifierPool>(a->pool->prefix(cfg.pool.members));
    auto to_tensor = [shape](std::span<const double> v) {
      Tensor x(shape.batch(1));
      auto px = x.data();
      for (std::size_t i = 0; i < v.size(); ++i) px[i] = static_cast<float>(v[i]);
      return x;
    };
    std::vector<VectorFn> members;
    for (std::size_t k = 0; k < pool->size(); ++k)
      members.push_back([pool, k, to_tensor](std::span<const double> v) {
        Tensor y = purify_full(pool->member(k), to_tensor(v));
        return Vec(y.data().begin(), y.data().end());
      });
    const std::size_t n = std::min(t.t2_probes, a->test.size());
    std::vector<Theorem2Probe> probes(n);
    std::vector<Vec> points;
    Stream pg(seed, {1});
    for (std::size_t p = 0; p < n; ++p) {
      auto px = a->test.pixels(p);
      probes[p].x.assign(px.begin(), px.end());
      for (std::size_t i = 0; i < d; ++i) probes[p].u.push_back(pg.normal());
      points.push_back(probes[p].x);
    }
    double nu = estimate_nu(members, points);
    // Each probe is scored against its own label.
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t label = static_cast<std::size_t>(a->test.label(p));
      ScalarFn f = [&clf, to_tensor, label](std::span<const double> v) {
        Tensor s = predict(clf, to_tensor(v));
        return margin_loss(s.data(), label);
      };
      // Local Lipschitz pairs inside a box around the probe, clipped to [0,1].
      const Vec& x0 = probes[p].x;
      Stream lg(seed, {2, p});
      std::vector<std::pair<Vec, Vec>> pairs;
      for (std::size_t k = 0; k < t.t2_lipschitz_pairs / std::max<std::size_t>(1, n); ++k) {
        Vec u(d), v(d);
        for (std::size_t i = 0; i < d; ++i) {
          u[i] = std::clamp(x0[i] + lg.uniform(-0.05, 0.05), 0.0, 1.0);
          v[i] = std::clamp(u[i] + lg.uniform(-0.01, 0.01), 0.0, 1.0);
        }
        pairs.emplace_back(std::move(u), std::move(v));
      }
      auto L = estimate_lipschitz([&f](std::span<const double> v) { return Vec{f(v)}; }, pairs);
      std::vector<Theorem2Probe> one{probes[p]};
      auto rows = theorem2_experiment(f, members, one, t.t2_mu, t.t2_trials, nu, L.L0_hat * t.t2_inflation,
                                      derive_key(seed, 3 + p), "trained-pool-probe" + std::to_string(p));
      report.theorem2.insert(report.theorem2.end(), rows.begin(), rows.end());
    }
  }
  report.sections_run.insert("theory");
}

std::vector<LatencyRow> latency_bench(const ExperimentConfig& cfg, const PurifierPool& pool) {
  const auto& b = cfg.bench;
  const std::size_t channels = pool.member(0).channels();
  Tensor x({1, channels, b.height, b.width});
  Stream img(component_seed(cfg, "bench"), {0});
  for (float& v : x.data()) v = static_cast<float>(img.uniform());
  const PatchGrid grid = PatchGrid::make(b.height, b.width, b.grid_rows, b.grid_cols);

  std::vector<LatencyRow> rows;
  for (const auto& method : b.methods) {
    for (std::size_t K : b.pool_sizes) {
      if (K == 0 || K > pool.size())
        throw std::runtime_error("bench pool size " + std::to_string(K) + " exceeds the trained pool");
      PurifierPool sub = pool.prefix(K);
      std::vector<double> ms;
      PurifyStats stats;
      for (std::size_t r = 0; r < b.reps; ++r) {
        Stream rng(component_seed(cfg, "bench"), {1, K, r});
        PurifyStats* sp = r == 0 ? &stats : nullptr;
        auto t0 = std::chrono::steady_clock::now();
        Tensor y = method == "patchwise" ? purify_patchwise(sub, x, grid, rng, sp) : purify_ensemble(sub, x, rng, sp);
        auto t1 = std::chrono::steady_clock::now();
        if (r >= b.warmup) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      std::sort(ms.begin(), ms.end());
      auto at = [&](double q) { return ms[std::min(ms.size() - 1, static_cast<std::size_t>(q * (ms.size() - 1) + 0.5))]; };
      double med = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
      rows.push_back({method, K, med, at(0.9), stats.images ? stats.encoder_pixels / stats.images : 0});
      std::cerr << "bench " << method << " K=" << K << ": median " << med << " ms\n";
    }
  }
  return rows;
}

RunReport run_experiment(const ExperimentConfig& cfg) {
  RunReport report;
  report.seed = cfg.seed;
  report.config_hash = git_blob_hash(canonical_config(cfg));
  report.canonical_config = canonical_config(cfg);
  const bool need_pool = std::any_of(cfg.attacks.defenses.begin(), cfg.attacks.defenses.end(),
                                     [](const std::string& d) {
                                       return d.rfind("purifier", 0) == 0 || d == "patchwise" || d == "ensemble";
                                     }) ||
                         cfg.sweep.enabled || (cfg.theory.enabled && cfg.theory.t2_trained_pool);
  Artifacts a = prepare(cfg, need_pool ? "pool" : "classifier");
  report.checkpoint_hashes = a.checkpoint_hashes;
  run_clean(cfg, a, report);
  run_attack_grid(cfg, a, report);
  if (cfg.sweep.enabled) run_sweep(cfg, a, report);
  if (cfg.theory.enabled) run_theory(cfg, &a, report);
  return report;
}

// ---- emission ----

void write_robust_csv(std::ostream& os, const std::vector<RobustRow>& rows) {
  os << "defense,attack,budget,robust_accuracy\n";
  for (const auto& r : rows)
    os << r.defense << "," << r.attack << "," << r.budget << "," << fmt("%.6f", r.robust_accuracy) << "\n";
}

void write_queries_csv(std::ostream& os, const std::vector<RobustRow>& rows) {
  os << "defense,attack,norm,budget,median_queries_to_success\n";
  for (const auto& r : rows)
    os << r.defense << "," << r.attack << "," << norm_name(r.norm) << "," << r.budget << ","
       << fmt("%.1f", r.median_queries) << "\n";
}

void write_clean_csv(std::ostream& os, const std::vector<CleanRow>& rows) {
  os << "defense,clean_accuracy\n";
  for (const auto& r : rows) os << r.defense << "," << fmt("%.6f", r.clean_accuracy) << "\n";
}

void write_curve_csv(std::ostream& os, const std::vector<CurveRow>& rows) {
  os << "attack,budget,query_index,robust_accuracy\n";
  for (const auto& r : rows)
    os << r.attack << "," << r.budget << "," << r.query << "," << fmt("%.6f", r.robust_accuracy) << "\n";
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "K,seed,nu_hat,robust_accuracy,median_queries_to_success\n";
  for (const auto& r : rows)
    os << r.K << "," << r.seed << "," << fmt("%.9g", r.nu_hat) << "," << fmt("%.6f", r.robust_accuracy) << ","
       << fmt("%.1f", r.median_queries) << "\n";
}

void write_theorem_csv(std::ostream& os, const std::vector<theory::TheoremRow>& rows) {
  os << "experiment,config_id,K,nu_hat,measured,bound,pass\n";
  for (const auto& r : rows)
    os << r.experiment << "," << r.config_id << "," << r.K << "," << fmt("%.9g", r.nu_hat) << ","
       << fmt("%.9g", r.measured) << "," << fmt("%.9g", r.bound) << "," << (r.pass ? "true" : "false") << "\n";
}

void write_theorem_notes_csv(std::ostream& os, const std::vector<theory::TheoremRow>& rows) {
  os << "experiment,config_id,note\n";
  for (const auto& r : rows)
    if (!r.note.empty()) os << r.experiment << "," << r.config_id << "," << r.note << "\n";
}

void write_latency_csv(std::ostream& os, const std::vector<LatencyRow>& rows) {
  os << "method,pool_size,median_ms,p90_ms,encoder_pixels_per_image\n";
  for (const auto& r : rows)
    os << r.method << "," << r.pool_size << "," << fmt("%.6f", r.median_ms) << "," << fmt("%.6f", r.p90_ms) << ","
       << r.encoder_pixels << "\n";
}

void write_failures_csv(std::ostream& os, const std::vector<CellFailure>& rows) {
  os << "defense,attack,budget,error\n";
  for (const auto& r : rows) {
    std::string e = r.error;
    std::replace(e.begin(), e.end(), ',', ';');
    std::replace(e.begin(), e.end(), '\n', ' ');
    os << r.defense << "," << r.attack << "," << r.budget << "," << e << "\n";
  }
}

void write_svg_chart(std::ostream& os, const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series) {
  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        x0 = x1 = s.x[i];
        y0 = y1 = s.y[i];
        first = false;
      }
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  y0 = std::min(y0, 0.0);
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
     << W << " " << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    os << "<text x=\"" << fmt("%.1f", px(xv)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
       << fmt("%.4g", xv) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << fmt("%.1f", py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
       << fmt("%.3g", yv) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"13\">"
     << xml_escape(x_label) << "</text>\n";
  os << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
     << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colors[s % 10];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i)
      os << (i ? " " : "") << fmt("%.2f", px(series[s].x[i])) << "," << fmt("%.2f", py(series[s].y[i]));
    os << "\"/>\n";
    double ly = T + 14 + 18 * static_cast<double>(s);
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
       << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">" << xml_escape(series[s].name) << "</text>\n";
  }
  os << "</svg>\n";
}

void emit_report(const RunReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  auto csv = [&](const std::string& name, auto&& writer) {
    std::ostringstream ss;
    writer(ss);
    write_file(dir / name, ss.str());
  };
  auto svg = [&](const std::string& name, const std::string& title, const std::string& xl, const std::string& yl,
                 const std::vector<Series>& s) {
    std::ostringstream ss;
    write_svg_chart(ss, title, xl, yl, s);
    write_file(dir / name, ss.str());
  };
  const auto& run = report.sections_run;

  if (run.count("attacks")) {
    csv("robust_accuracy.csv", [&](std::ostream& os) { write_robust_csv(os, report.robust); });
    csv("queries_to_success.csv", [&](std::ostream& os) { write_queries_csv(os, report.robust); });
    std::set<std::string> attacks;
    for (const auto& [defense, rows] : report.curves) {
      csv("convergence_" + defense + ".csv", [&](std::ostream& os) { write_curve_csv(os, rows); });
      for (const auto& r : rows) attacks.insert(r.attack);
    }
    for (const auto& at : attacks) {
      std::vector<Series> s;
      for (const auto& [defense, rows] : report.curves) {
        Series se{defense, {}, {}};
        for (const auto& r : rows)
          if (r.attack == at) se.x.push_back(static_cast<double>(r.query)), se.y.push_back(r.robust_accuracy);
        if (!se.x.empty()) s.push_back(std::move(se));
      }
      svg("convergence_" + at + ".svg", at + " attack", "queries", "robust accuracy", s);
    }
  }
  if (run.count("clean")) csv("clean_accuracy.csv", [&](std::ostream& os) { write_clean_csv(os, report.clean); });
  if (run.count("sweep")) {
    csv("pool_sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, report.sweep); });
    std::map<std::size_t, std::pair<double, double>> acc, med;  // K -> (sum, count)
    for (const auto& r : report.sweep) {
      acc[r.K].first += r.robust_accuracy, acc[r.K].second += 1;
      med[r.K].first += r.median_queries, med[r.K].second += 1;
    }
    Series sa{"robust accuracy", {}, {}}, sm{"median queries", {}, {}};
    for (const auto& [K, v] : acc) sa.x.push_back(static_cast<double>(K)), sa.y.push_back(v.first / v.second);
    for (const auto& [K, v] : med) sm.x.push_back(static_cast<double>(K)), sm.y.push_back(v.first / v.second);
    svg("pool_sweep_accuracy.svg", "Square attack vs pool size", "pool size", "robust accuracy", {sa});
    svg("pool_sweep_queries.svg", "Square attack vs pool size", "pool size", "median queries to success", {sm});
  }
  if (run.count("theory")) {
    csv("theorem1.csv", [&](std::ostream& os) { write_theorem_csv(os, report.theorem1); });
    csv("theorem2.csv", [&](std::ostream& os) { write_theorem_csv(os, report.theorem2); });
    auto all = report.theorem1;
    all.insert(all.end(), report.theorem2.begin(), report.theorem2.end());
    csv("theorem_notes.csv", [&](std::ostream& os) { write_theorem_notes_csv(os, all); });
  }
  if (run.count("bench")) {
    csv("latency.csv", [&](std::ostream& os) { write_latency_csv(os, report.latency); });
    std::map<std::string, Series> by;
    for (const auto& r : report.latency) {
      auto& s = by[r.method];
      s.name = r.method;
      s.x.push_back(static_cast<double>(r.pool_size));
      s.y.push_back(r.median_ms);
    }
    std::vector<Series> s;
    for (auto& [m, se] : by) s.push_back(se);
    svg("latency.svg", "Purification latency", "pool size", "median ms per image", s);
  }
  if (!report.traces.empty()) {
    fs::create_directories(dir / "traces");
    for (const auto& [name, text] : report.traces) write_file(dir / "traces" / name, text);
  }
  csv("failures.csv", [&](std::ostream& os) { write_failures_csv(os, report.failures); });

  nlohmann::ordered_json prov;
  prov["config_hash"] = report.config_hash;
  prov["seed"] = report.seed;
  prov["checkpoints"] = report.checkpoint_hashes;
  prov["config"] = report.canonical_config;
  write_file(dir / "provenance.json", prov.dump(2) + "\n");

  nlohmann::ordered_json meta;
  std::time_t now = std::time(nullptr);
  char ts[32];
  std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  meta["timestamp"] = ts;
  meta["config_hash"] = report.config_hash;
  write_file(dir / "run_meta.json", meta.dump(2) + "\n");
}

}  // namespace rlp
