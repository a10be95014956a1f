#pragma once

#include <cstddef>
#include <vector>

#include "glab/tensor.hpp"

namespace glab {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

/// Adam with bias correction and decoupled weight decay. Reads each
/// parameter's accumulated grad and updates its data in place.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {});

  /// Throws NumericError naming the parameter when a gradient is not finite.
  void step(double lr);
  void zero_grad();

  std::size_t steps_taken() const { return step_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

}  // namespace glab
