// rlp: train the toy models, run the attack grid, theory checks and the
// latency bench, and write CSV/SVG reports.

#include <CLI11.hpp>

#include <iostream>

#include "rlp/harness.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> jobs;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Master seed (overrides run.seed)");
  cmd->add_option("--out", c.out, "Output directory (overrides run.out)");
  cmd->add_option("--jobs", c.jobs, "Worker threads for attack cells");
}

rlp::ExperimentConfig resolve(const Common& c) {
  rlp::ExperimentConfig cfg = c.config.empty() ? rlp::ExperimentConfig{} : rlp::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  if (c.jobs) cfg.jobs = std::max<std::size_t>(1, *c.jobs);
  cfg.validate();
  return cfg;
}

rlp::RunReport fresh_report(const rlp::ExperimentConfig& cfg, const rlp::Artifacts* a) {
  rlp::RunReport r;
  r.seed = cfg.seed;
  r.canonical_config = rlp::canonical_config(cfg);
  r.config_hash = rlp::git_blob_hash(r.canonical_config);
  if (a) r.checkpoint_hashes = a->checkpoint_hashes;
  return r;
}

int finish(const rlp::RunReport& r, const rlp::ExperimentConfig& cfg) {
  rlp::emit_report(r, cfg.out);
  for (const auto& f : r.failures)
    std::cerr << "cell failed: " << f.defense << " / " << f.attack << " @" << f.budget << ": " << f.error << "\n";
  std::cout << "wrote " << cfg.out.string() << "\n";
  return r.failures.empty() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Randomized local-implicit purification: experiments at desk scale"};
  app.require_subcommand(1);
  Common common;
  std::map<std::string, CLI::App*> cmds;
  for (const char* name : {"train-classifier", "gen-advdata", "train-pool", "attack", "theory", "bench", "report"}) {
    cmds[name] = app.add_subcommand(name);
    add_common(cmds[name], common);
  }
  cmds["train-classifier"]->description("Train (or load) the toy classifier");
  cmds["gen-advdata"]->description("Generate white-box training pairs for the purifiers");
  cmds["train-pool"]->description("Train the purifier pool");
  cmds["attack"]->description("Run the defense x attack x budget grid and clean accuracy");
  cmds["theory"]->description("Theorem checks on the toy objective and the trained pool");
  cmds["bench"]->description("Patchwise vs ensemble latency");
  cmds["report"]->description("Everything except the bench");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    const rlp::ExperimentConfig cfg = resolve(common);
    if (cmds["train-classifier"]->parsed()) {
      auto a = rlp::prepare(cfg, "classifier");
      std::cout << "test accuracy " << rlp::accuracy(*a.classifier, a.test) << "\n";
      return 0;
    }
    if (cmds["gen-advdata"]->parsed()) {
      auto a = rlp::prepare(cfg, "advdata");
      for (const auto& [m, p] : a.pairs) std::cout << rlp::whitebox_name(m) << ": " << p.size() << " pairs\n";
      return 0;
    }
    if (cmds["train-pool"]->parsed()) {
      auto a = rlp::prepare(cfg, "pool");
      std::cout << a.pool->size() << " members, nu_hat " << a.pool->nu_hat() << "\n";
      return 0;
    }
    if (cmds["attack"]->parsed()) {
      auto a = rlp::prepare(cfg, "pool");
      auto r = fresh_report(cfg, &a);
      rlp::run_clean(cfg, a, r);
      rlp::run_attack_grid(cfg, a, r);
      return finish(r, cfg);
    }
    if (cmds["theory"]->parsed()) {
      std::optional<rlp::Artifacts> a;
      if (cfg.theory.t2_trained_pool) a = rlp::prepare(cfg, "pool");
      auto r = fresh_report(cfg, a ? &*a : nullptr);
      rlp::run_theory(cfg, a ? &*a : nullptr, r);
      return finish(r, cfg);
    }
    if (cmds["bench"]->parsed()) {
      auto a = rlp::prepare(cfg, "pool");
      auto r = fresh_report(cfg, &a);
      r.latency = rlp::latency_bench(cfg, *a.pool);
      r.sections_run.insert("bench");
      return finish(r, cfg);
    }
    auto r = rlp::run_experiment(cfg);
    return finish(r, cfg);
  } catch (const rlp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
