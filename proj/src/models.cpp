#include "rlp/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rlp/optim.hpp"
#include "rlp/rng.hpp"

namespace rlp {

namespace {

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string layer_name(std::size_t i, const char* what) {
  return "l" + std::to_string(i) + "." + what;
}

}  // namespace

Architecture Architecture::tiny_cnn() {
  return Architecture{{{LayerKind::kConv, 8, 3},
                       {LayerKind::kRelu},
                       {LayerKind::kConv, 8, 3},
                       {LayerKind::kRelu},
                       {LayerKind::kFlatten},
                       {LayerKind::kLinear}}};
}

Architecture Architecture::linear() {
  return Architecture{{{LayerKind::kFlatten}, {LayerKind::kLinear}}};
}

Architecture Architecture::parse(std::string_view text) {
  if (text == "tiny-cnn") return tiny_cnn();
  if (text == "linear") return linear();
  Architecture a;
  for (const std::string& tok : split(text, ',')) {
    const auto parts = split(tok, ':');
    const std::string& kind = parts[0];
    if (kind == "conv") {
      if (parts.size() != 3) throw std::invalid_argument("conv layer needs conv:<out>:<kernel>");
      const auto out = std::stoul(parts[1]), k = std::stoul(parts[2]);
      if (out == 0 || k % 2 == 0) throw std::invalid_argument("conv layer needs out>0 and odd kernel");
      a.layers.push_back({LayerKind::kConv, out, k});
    } else if (kind == "relu") {
      a.layers.push_back({LayerKind::kRelu});
    } else if (kind == "pool") {
      a.layers.push_back({LayerKind::kPool});
    } else if (kind == "flatten") {
      a.layers.push_back({LayerKind::kFlatten});
    } else if (kind == "linear") {
      std::size_t out = 0;
      if (parts.size() == 2) out = std::stoul(parts[1]);
      a.layers.push_back({LayerKind::kLinear, out});
    } else {
      throw std::invalid_argument("unknown layer kind '" + kind + "'");
    }
  }
  if (a.layers.empty() || a.layers.back().kind != LayerKind::kLinear) {
    throw std::invalid_argument("architecture must end with a linear layer");
  }
  return a;
}

std::string Architecture::str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ',';
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::kConv: os << "conv:" << l.out << ':' << l.kernel; break;
      case LayerKind::kRelu: os << "relu"; break;
      case LayerKind::kPool: os << "pool"; break;
      case LayerKind::kFlatten: os << "flatten"; break;
      case LayerKind::kLinear:
        os << "linear";
        if (l.out && i + 1 != layers.size()) os << ':' << l.out;
        break;
    }
  }
  return os.str();
}

std::size_t argmax(std::span<const float> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax of empty scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

double margin_loss(std::span<const float> scores, std::size_t label,
                   std::optional<std::size_t> target) {
  if (scores.size() < 2) throw std::invalid_argument("margin_loss: need at least 2 scores");
  if (label >= scores.size()) throw std::out_of_range("margin_loss: label out of range");
  if (target) {
    if (*target >= scores.size()) throw std::out_of_range("margin_loss: target out of range");
    if (*target == label) throw std::invalid_argument("margin_loss: target equals true label");
    return static_cast<double>(scores[label]) - static_cast<double>(scores[*target]);
  }
  double best = -INFINITY;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (j != label) best = std::max(best, static_cast<double>(scores[j]));
  return static_cast<double>(scores[label]) - best;
}

Classifier::Classifier(Architecture arch, ImageShape input, std::size_t num_classes,
                       std::uint64_t seed)
    : arch_(std::move(arch)), input_(input), num_classes_(num_classes) {
  if (num_classes_ < 2) throw std::invalid_argument("Classifier: need >= 2 classes");
  Stream rng(seed, {0xC1A5});
  std::size_t ch = input_.channels, h = input_.height, w = input_.width;
  std::size_t flat = 0;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& l = arch_.layers[i];
    switch (l.kind) {
      case LayerKind::kConv: {
        if (flat) throw std::invalid_argument("conv after flatten");
        Tensor wt({l.out, ch, l.kernel, l.kernel});
        const double scale = std::sqrt(2.0 / static_cast<double>(ch * l.kernel * l.kernel));
        for (float& v : wt.data()) v = static_cast<float>(scale * rng.normal());
        params_.add(layer_name(i, "w"), std::move(wt));
        params_.add(layer_name(i, "b"), Tensor({l.out}));
        ch = l.out;
        break;
      }
      case LayerKind::kRelu:
        break;
      case LayerKind::kPool:
        flat = ch;
        break;
      case LayerKind::kFlatten:
        flat = ch * h * w;
        break;
      case LayerKind::kLinear: {
        if (!flat) throw std::invalid_argument("linear layer needs flatten or pool first");
        const bool last = i + 1 == arch_.layers.size();
        const std::size_t out = last ? num_classes_ : l.out;
        if (out == 0) throw std::invalid_argument("hidden linear layer needs a width");
        Tensor wt({flat, out});
        const double scale = std::sqrt(1.0 / static_cast<double>(flat));
        for (float& v : wt.data()) v = static_cast<float>(scale * rng.normal());
        params_.add(layer_name(i, "w"), std::move(wt));
        params_.add(layer_name(i, "b"), Tensor({1, out}));
        flat = out;
        break;
      }
    }
  }
}

Classifier::Classifier(Architecture arch, ImageShape input, std::size_t num_classes,
                       ParameterSet params)
    : arch_(std::move(arch)), input_(input), num_classes_(num_classes), params_(std::move(params)) {
  Classifier shape_ref(arch_, input_, num_classes_, 0);
  for (const auto& [name, t] : shape_ref.params_) {
    if (!params_.contains(name) || params_.at(name).shape() != t.shape()) {
      throw std::invalid_argument("checkpoint does not match architecture at " + name);
    }
  }
  if (params_.size() != shape_ref.params_.size()) {
    throw std::invalid_argument("checkpoint has extra tensors for this architecture");
  }
}

template <typename Bind>
Var Classifier::forward(Graph& g, Var x, Bind&& bind) const {
  const Shape& xs = g.value(x).shape();
  if (xs.size() != 4 || xs[1] != input_.channels || xs[2] != input_.height ||
      xs[3] != input_.width) {
    throw ShapeError("classifier input " + shape_str(xs) + " does not match " +
                     shape_str(input_.batch(xs.empty() ? 0 : xs[0])));
  }
  const std::size_t batch = xs[0];
  Var h = x;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& l = arch_.layers[i];
    switch (l.kind) {
      case LayerKind::kConv:
        h = g.conv2d(h, bind(layer_name(i, "w")), bind(layer_name(i, "b")), l.kernel / 2);
        break;
      case LayerKind::kRelu:
        h = g.relu(h);
        break;
      case LayerKind::kPool:
        h = g.spatial_mean(h);
        break;
      case LayerKind::kFlatten:
        h = g.reshape(h, {batch, g.value(h).numel() / batch});
        break;
      case LayerKind::kLinear:
        h = g.add(g.matmul(h, bind(layer_name(i, "w"))), bind(layer_name(i, "b")));
        break;
    }
  }
  return h;
}

Var Classifier::logits(Graph& g, Var x, bool train) {
  if (train) return forward(g, x, [&](const std::string& n) { return g.bind(params_.at(n)); });
  return std::as_const(*this).logits(g, x);
}

Var Classifier::logits(Graph& g, Var x) const {
  return forward(g, x, [&](const std::string& n) { return g.constant(params_.at(n)); });
}

Tensor predict(const Classifier& c, const Tensor& x) {
  Graph g;
  Tensor in = x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
  in.set_requires_grad(false);
  Var out = g.softmax(c.logits(g, g.constant(std::move(in))));
  return g.value(out);
}

double accuracy(const Classifier& c, const LabeledImages& data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Tensor scores = predict(c, data.batch(idx));
    const std::size_t k = c.num_classes();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = scores.data().subspan(r * k, k);
      if (argmax(row) == static_cast<std::size_t>(data.label(idx[r]))) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainedClassifier train_classifier(const LabeledImages& data, const Architecture& arch,
                                   const ClassifierTrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_classifier: empty dataset");
  for (int l : data.labels()) {
    if (l < 0 || static_cast<std::size_t>(l) >= data.num_classes()) {
      throw std::out_of_range("train_classifier: label out of range");
    }
  }
  auto [train, held] = split_holdout(data, cfg.heldout_fraction, cfg.seed);
  Classifier model(arch, data.shape(), data.num_classes(), cfg.seed);
  Adam opt(model.params(), AdamConfig{cfg.lr});
  const std::size_t k = data.num_classes();
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch);
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Stream rng(cfg.seed, {0x7EA1, epoch});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor onehot({idx.size(), k});
      for (std::size_t r = 0; r < idx.size(); ++r)
        onehot[r * k + static_cast<std::size_t>(train.label(idx[r]))] = 1.0f;
      Tensor xb = train.batch(idx);
      if (cfg.noise_sigma > 0.0f) {
        Stream noise(cfg.seed, {0xA06, epoch, start});
        for (float& v : xb.data())
          v = std::clamp(v + cfg.noise_sigma * static_cast<float>(noise.normal()), 0.0f, 1.0f);
      }
      Graph g;
      Var logp = g.log_softmax(model.logits(g, g.constant(std::move(xb)), true));
      Var nll = g.mul(g.mean(g.mul(logp, g.constant(std::move(onehot)))),
                      g.constant(Tensor::scalar(-static_cast<float>(k))));
      const float loss = g.value(nll).item();
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("classifier training diverged at epoch " + std::to_string(epoch));
      }
      g.backward(nll);
      opt.step();
    }
  }
  TrainedClassifier out{std::move(model), 0.0, 0.0};
  out.train_accuracy = accuracy(out.model, train);
  out.heldout_accuracy = held.empty() ? out.train_accuracy : accuracy(out.model, held);
  return out;
}

std::string_view norm_name(NormKind n) { return n == NormKind::kL2 ? "l2" : "linf"; }

NormKind parse_norm(std::string_view s) {
  if (s == "l2") return NormKind::kL2;
  if (s == "linf") return NormKind::kLinf;
  throw std::invalid_argument("unknown norm '" + std::string(s) + "'");
}

void AttackProblem::validate(std::size_t num_classes) const {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("AttackProblem: x must be [1,C,H,W]");
  for (float v : x.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("AttackProblem: x outside [0,1]");
  }
  if (!(radius > 0.0)) throw std::invalid_argument("AttackProblem: radius must be positive");
  if (label >= num_classes) throw std::out_of_range("AttackProblem: label");
  if (target && (*target >= num_classes || *target == label)) {
    throw std::invalid_argument("AttackProblem: invalid target");
  }
}

}  // namespace rlp
