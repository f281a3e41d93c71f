#include "rlp/optim.hpp"

#include <cmath>

namespace rlp {

Adam::Adam(ParameterSet& params, AdamConfig cfg) : params_(params), cfg_(cfg) {
  for (const auto& e : params_) {
    m_.emplace_back(e.second.numel(), 0.0f);
    v_.emplace_back(e.second.numel(), 0.0f);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  const float step = static_cast<float>(cfg_.lr * std::sqrt(bc2) / bc1);
  std::size_t idx = 0;
  for (auto& e : params_) {
    Tensor& t = e.second;
    auto g = t.grad();
    auto& m = m_[idx];
    auto& v = v_[idx];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
      t[i] -= step * m[i] / (std::sqrt(v[i]) + cfg_.eps);
    }
    t.zero_grad();
    ++idx;
  }
}

}  // namespace rlp
