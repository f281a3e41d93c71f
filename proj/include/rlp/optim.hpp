#pragma once

#include <vector>

#include "rlp/parameters.hpp"

namespace rlp {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Adam over every tensor of a ParameterSet. step() consumes and clears the
/// accumulated gradients.
class Adam {
 public:
  Adam(ParameterSet& params, AdamConfig cfg);
  void step();

 private:
  ParameterSet& params_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

}  // namespace rlp
