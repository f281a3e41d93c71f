#include "rlp/config.hpp"

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace rlp {
namespace {

std::string trim(std::string_view s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string unquote(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front())
    return s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_list(std::string_view text) {
  std::string s = trim(text);
  if (!s.empty() && s.front() == '[') {
    if (s.back() != ']') throw ConfigError("unterminated list: " + s);
    s = s.substr(1, s.size() - 2);
  }
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = unquote(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Scalars. Doubles also accept "a/b".
void parse_value(std::string_view t, std::size_t& v) {
  std::string s = unquote(std::string(t));
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("not an unsigned integer: " + s);
}
void parse_value(std::string_view t, int& v) {
  std::string s = unquote(std::string(t));
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("not an integer: " + s);
}
void parse_value(std::string_view t, double& v) {
  std::string s = unquote(std::string(t));
  auto one = [&](const std::string& part) {
    double x = 0;
    auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), x);
    if (ec != std::errc() || p != part.data() + part.size()) throw ConfigError("not a number: " + s);
    return x;
  };
  if (auto slash = s.find('/'); slash != std::string::npos)
    v = one(trim(s.substr(0, slash))) / one(trim(s.substr(slash + 1)));
  else
    v = one(s);
}
void parse_value(std::string_view t, float& v) {
  double d = 0;
  parse_value(t, d);
  v = static_cast<float>(d);
}
void parse_value(std::string_view t, bool& v) {
  std::string s = unquote(std::string(t));
  if (s == "true") v = true;
  else if (s == "false") v = false;
  else throw ConfigError("not a boolean: " + s);
}
void parse_value(std::string_view t, std::string& v) { v = unquote(std::string(t)); }
void parse_value(std::string_view t, std::filesystem::path& v) { v = unquote(std::string(t)); }
void parse_value(std::string_view t, std::vector<std::size_t>& v) {
  v.clear();
  for (auto& s : split_list(t)) parse_value(s, v.emplace_back());
}
void parse_value(std::string_view t, std::vector<std::string>& v) { v = split_list(t); }
void parse_value(std::string_view t, std::vector<AttackEntry>& v) {
  v.clear();
  for (auto& s : split_list(t)) {
    auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError("attack entries are name:norm, got " + s);
    try {
      v.push_back({parse_attack(trim(s.substr(0, colon))), parse_norm(trim(s.substr(colon + 1)))});
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
}

std::string to_text(std::size_t v) { return std::to_string(v); }
std::string to_text(int v) { return std::to_string(v); }
std::string to_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string to_text(float v) { return to_text(static_cast<double>(v)); }
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(const std::string& v) { return "\"" + v + "\""; }
std::string to_text(const std::filesystem::path& v) { return "\"" + v.string() + "\""; }
std::string to_text(const AttackEntry& a) {
  return "\"" + std::string(attack_name(a.kind)) + ":" + std::string(norm_name(a.norm)) + "\"";
}
template <typename T>
std::string to_text(const std::vector<T>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + to_text(v[i]);
  return s + "]";
}

struct Field {
  std::string key;  // section.name
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool canonical = true;
};

template <typename Ref>
Field field(std::string key, Ref ref, bool canonical = true) {
  return Field{std::move(key), [ref](ExperimentConfig& c, std::string_view t) { parse_value(t, ref(c)); },
               [ref](const ExperimentConfig& c) { return to_text(ref(const_cast<ExperimentConfig&>(c))); },
               canonical};
}

#define RLP_FIELD(key, expr) field(key, [](ExperimentConfig& c) -> auto& { return c.expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(RLP_FIELD("run.seed", seed));
    f.push_back(field("run.out", [](ExperimentConfig& c) -> auto& { return c.out; }, false));
    f.push_back(field("run.jobs", [](ExperimentConfig& c) -> auto& { return c.jobs; }, false));

    f.push_back(RLP_FIELD("dataset.kind", dataset.kind));
    f.push_back(RLP_FIELD("dataset.count", dataset.synthetic.count));
    f.push_back(RLP_FIELD("dataset.classes", dataset.synthetic.classes));
    f.push_back(RLP_FIELD("dataset.height", dataset.synthetic.height));
    f.push_back(RLP_FIELD("dataset.width", dataset.synthetic.width));
    f.push_back(RLP_FIELD("dataset.channels", dataset.synthetic.channels));
    f.push_back(RLP_FIELD("dataset.amplitude_lo", dataset.synthetic.amplitude_lo));
    f.push_back(RLP_FIELD("dataset.amplitude_hi", dataset.synthetic.amplitude_hi));
    f.push_back(RLP_FIELD("dataset.noise", dataset.synthetic.noise));
    f.push_back(RLP_FIELD("dataset.test_count", dataset.test_count));
    f.push_back(RLP_FIELD("dataset.train_path", dataset.train_path));
    f.push_back(RLP_FIELD("dataset.test_path", dataset.test_path));
    f.push_back(RLP_FIELD("dataset.train_subset", dataset.train_subset));
    f.push_back(RLP_FIELD("dataset.test_subset", dataset.test_subset));

    f.push_back(RLP_FIELD("classifier.architecture", classifier.architecture));
    f.push_back(RLP_FIELD("classifier.epochs", classifier.train.epochs));
    f.push_back(RLP_FIELD("classifier.lr", classifier.train.lr));
    f.push_back(RLP_FIELD("classifier.batch", classifier.train.batch));
    f.push_back(RLP_FIELD("classifier.heldout_fraction", classifier.train.heldout_fraction));
    f.push_back(RLP_FIELD("classifier.noise_sigma", classifier.train.noise_sigma));

    f.push_back(RLP_FIELD("whitebox.epsilon", pool.whitebox.epsilon));
    f.push_back(RLP_FIELD("whitebox.step_size", pool.whitebox.step_size));
    f.push_back(RLP_FIELD("whitebox.steps", pool.whitebox.steps));
    f.push_back(RLP_FIELD("whitebox.random_start", pool.whitebox.random_start));

    f.push_back(RLP_FIELD("pool.depth", pool.depth));
    f.push_back(RLP_FIELD("pool.members", pool.members));
    f.push_back(RLP_FIELD("pool.extra", pool.extra));
    f.push_back(RLP_FIELD("pool.epochs", pool.train.epochs));
    f.push_back(RLP_FIELD("pool.lr", pool.train.lr));
    f.push_back(RLP_FIELD("pool.batch", pool.train.batch));
    f.push_back(RLP_FIELD("pool.lambda", pool.train.lambda));
    f.push_back(RLP_FIELD("pool.p_norm", pool.train.p_norm));
    f.push_back(RLP_FIELD("pool.heldout_fraction", pool.train.heldout_fraction));
    f.push_back(RLP_FIELD("pool.grid_rows", pool.grid_rows));
    f.push_back(RLP_FIELD("pool.grid_cols", pool.grid_cols));
    f.push_back(RLP_FIELD("pool.probes", pool.probes));

    f.push_back(RLP_FIELD("attacks.defenses", attacks.defenses));
    f.push_back(RLP_FIELD("attacks.attacks", attacks.attacks));
    f.push_back(RLP_FIELD("attacks.budgets", attacks.budgets));
    f.push_back(RLP_FIELD("attacks.linf_radius", attacks.linf_radius));
    f.push_back(RLP_FIELD("attacks.l2_radius", attacks.l2_radius));
    f.push_back(RLP_FIELD("attacks.images", attacks.images));
    f.push_back(RLP_FIELD("attacks.curve_points", attacks.curve_points));
    f.push_back(RLP_FIELD("attacks.write_traces", attacks.write_traces));
    f.push_back(RLP_FIELD("attacks.nes_lr", attacks.params.nes.lr));
    f.push_back(RLP_FIELD("attacks.nes_samples", attacks.params.nes.samples));
    f.push_back(RLP_FIELD("attacks.nes_sigma", attacks.params.nes.sigma));
    f.push_back(RLP_FIELD("attacks.simba_step", attacks.params.simba.step));
    f.push_back(RLP_FIELD("attacks.square_p_init", attacks.params.square.p_init));
    f.push_back(RLP_FIELD("attacks.boundary_spherical_step", attacks.params.boundary.spherical_step));
    f.push_back(RLP_FIELD("attacks.boundary_source_step", attacks.params.boundary.source_step));
    f.push_back(RLP_FIELD("attacks.boundary_step_adaptation", attacks.params.boundary.step_adaptation));
    f.push_back(RLP_FIELD("attacks.boundary_init_fraction", attacks.params.boundary.init_fraction));
    f.push_back(RLP_FIELD("attacks.hsj_n_est", attacks.params.hsj.n_est));
    f.push_back(RLP_FIELD("attacks.hsj_gamma", attacks.params.hsj.gamma));
    f.push_back(RLP_FIELD("attacks.hsj_init_fraction", attacks.params.hsj.init_fraction));

    f.push_back(RLP_FIELD("sweep.enabled", sweep.enabled));
    f.push_back(RLP_FIELD("sweep.pool_sizes", sweep.pool_sizes));
    f.push_back(RLP_FIELD("sweep.budget", sweep.budget));
    f.push_back(RLP_FIELD("sweep.seeds", sweep.seeds));
    f.push_back(RLP_FIELD("sweep.images", sweep.images));

    f.push_back(RLP_FIELD("theory.enabled", theory.enabled));
    f.push_back(RLP_FIELD("theory.function", theory.theorem1.function));
    f.push_back(RLP_FIELD("theory.dim", theory.theorem1.dim));
    f.push_back(RLP_FIELD("theory.pool_sizes", theory.theorem1.pool_sizes));
    f.push_back(RLP_FIELD("theory.spread", theory.theorem1.spread));
    f.push_back(RLP_FIELD("theory.Q", theory.theorem1.Q));
    f.push_back(RLP_FIELD("theory.R", theory.theorem1.R));
    f.push_back(RLP_FIELD("theory.epsilon", theory.theorem1.epsilon));
    f.push_back(RLP_FIELD("theory.seeds", theory.theorem1.seeds));
    f.push_back(RLP_FIELD("theory.grad_samples", theory.theorem1.grad_samples));
    f.push_back(RLP_FIELD("theory.lipschitz_pairs", theory.theorem1.lipschitz_pairs));
    f.push_back(RLP_FIELD("theory.inflation", theory.theorem1.inflation));
    f.push_back(RLP_FIELD("theory.t2_probes", theory.t2_probes));
    f.push_back(RLP_FIELD("theory.t2_trials", theory.t2_trials));
    f.push_back(RLP_FIELD("theory.t2_mu", theory.t2_mu));
    f.push_back(RLP_FIELD("theory.t2_toy_mu", theory.t2_toy_mu));
    f.push_back(RLP_FIELD("theory.t2_toy_pool", theory.t2_toy_pool));
    f.push_back(RLP_FIELD("theory.t2_toy_spread", theory.t2_toy_spread));
    f.push_back(RLP_FIELD("theory.t2_inflation", theory.t2_inflation));
    f.push_back(RLP_FIELD("theory.t2_lipschitz_pairs", theory.t2_lipschitz_pairs));
    f.push_back(RLP_FIELD("theory.t2_trained_pool", theory.t2_trained_pool));

    f.push_back(RLP_FIELD("bench.pool_sizes", bench.pool_sizes));
    f.push_back(RLP_FIELD("bench.methods", bench.methods));
    f.push_back(RLP_FIELD("bench.reps", bench.reps));
    f.push_back(RLP_FIELD("bench.warmup", bench.warmup));
    f.push_back(RLP_FIELD("bench.height", bench.height));
    f.push_back(RLP_FIELD("bench.width", bench.width));
    f.push_back(RLP_FIELD("bench.grid_rows", bench.grid_rows));
    f.push_back(RLP_FIELD("bench.grid_cols", bench.grid_cols));
    return f;
  }();
  return table;
}

#undef RLP_FIELD

// '#' starts a comment outside quotes; ini_parser only knows ';' at line start.
std::string strip_comments(std::string_view text) {
  std::string out;
  std::stringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    char quote = 0;
    std::size_t cut = line.size();
    for (std::size_t i = 0; i < line.size(); ++i) {
      char ch = line[i];
      if (quote) {
        if (ch == quote) quote = 0;
      } else if (ch == '"' || ch == '\'') {
        quote = ch;
      } else if (ch == '#' || ch == ';') {
        cut = i;
        break;
      }
    }
    out += line.substr(0, cut);
    out += '\n';
  }
  return out;
}

bool is_transform_name(const std::string& d) {
  return d == "gaussian-noise" || d == "shrink" || d.rfind("median-", 0) == 0 ||
         d.rfind("bit-reduce-", 0) == 0;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset.kind != "synthetic-textures" && dataset.kind != "cifar10-binary")
    throw ConfigError("dataset.kind must be synthetic-textures or cifar10-binary");
  if (dataset.kind == "cifar10-binary") {
    if (dataset.train_path.empty() || dataset.test_path.empty())
      throw ConfigError("cifar10-binary needs dataset.train_path and dataset.test_path");
    if (std::abs(attacks.linf_radius - 8.0 / 255.0) > 1e-9 || std::abs(attacks.l2_radius - 1.0) > 1e-9)
      throw ConfigError("CIFAR-10 runs use linf radius 8/255 and l2 radius 1.0");
  }
  if (dataset.test_count == 0 && dataset.kind == "synthetic-textures")
    throw ConfigError("dataset.test_count must be positive");
  for (std::size_t b : attacks.budgets)
    if (b == 0) throw ConfigError("budgets must be positive");
  if (attacks.linf_radius <= 0 || attacks.l2_radius <= 0) throw ConfigError("radii must be positive");
  if (pool.members == 0) throw ConfigError("pool.members must be positive");
  if (pool.grid_rows == 0 || pool.grid_cols == 0) throw ConfigError("pool grid must be non-empty");
  std::size_t trained = 6 + pool.extra;
  if (pool.members > trained) throw ConfigError("pool.members exceeds the trained pool (6 + pool.extra)");
  if (sweep.enabled)
    for (std::size_t k : sweep.pool_sizes)
      if (k == 0 || k > trained) throw ConfigError("sweep.pool_sizes must lie in [1, 6 + pool.extra]");
  for (const auto& d : attacks.defenses) {
    bool ok = d == "none" || d == "purifier" || d == "patchwise" || d == "ensemble" || is_transform_name(d);
    if (d.rfind("purifier-", 0) == 0) ok = true;
    if (!ok) throw ConfigError("unknown defense '" + d + "'");
  }
  for (const auto& m : bench.methods)
    if (m != "patchwise" && m != "ensemble") throw ConfigError("bench.methods: patchwise or ensemble");
  if (bench.reps <= bench.warmup) throw ConfigError("bench.reps must exceed bench.warmup");
  try {
    Architecture::parse(classifier.architecture);
    pool.whitebox.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig parse_config(std::string_view text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  const std::string stripped = strip_comments(text);
  const auto& table = fields();
  // read_ini drops sections without keys, so headers are checked here.
  {
    std::istringstream lines(stripped);
    for (std::string line; std::getline(lines, line);) {
      const auto b = line.find_first_not_of(" \t");
      if (b == std::string::npos || line[b] != '[') continue;
      const auto e = line.find(']', b);
      if (e == std::string::npos) continue;  // left to the parser
      const std::string section = line.substr(b + 1, e - b - 1);
      if (std::none_of(table.begin(), table.end(), [&](const Field& f) { return f.key.starts_with(section + "."); }))
        throw ConfigError("config: unknown section [" + section + "]");
    }
  }
  std::stringstream ss(stripped);
  try {
    pt::read_ini(ss, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      std::string full = section + "." + key;
      auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == full; });
      if (it == table.end()) throw ConfigError("config: unknown key " + full);
      try {
        it->set(cfg, value.data());
      } catch (const ConfigError& e) {
        throw ConfigError("config: " + full + ": " + e.what());
      }
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string canonical_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : fields())
    if (f.canonical) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::uint64_t component_seed(const ExperimentConfig& cfg, std::string_view component) {
  std::uint64_t tag = 0xCBF29CE484222325ULL;  // FNV-1a of the name
  for (unsigned char ch : component) tag = (tag ^ ch) * 0x100000001B3ULL;
  return derive_key(cfg.seed, tag);
}

std::string git_blob_hash(std::string_view bytes) {
  std::string framed = "blob " + std::to_string(bytes.size());
  framed.push_back('\0');
  framed.append(bytes);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(framed.data(), framed.size(), md, &len, EVP_sha1(), nullptr))
    throw std::runtime_error("sha1 failed");
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s.push_back(hex[md[i] >> 4]);
    s.push_back(hex[md[i] & 15]);
  }
  return s;
}

std::string git_blob_hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return git_blob_hash(ss.str());
}

}  // namespace rlp
