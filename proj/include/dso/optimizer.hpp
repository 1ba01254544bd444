#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dso/tensor.hpp"

namespace dso::optim {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment update with bias correction followed by decoupled weight
/// decay applied to the parameters directly: p <- p * (1 - lr * wd).
/// Moment buffers are created on the first step and keyed by position, so the
/// parameter list must keep the same order and shapes across steps.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads);

  std::size_t step_count() const noexcept { return t_; }
  const std::vector<ad::Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<ad::Tensor>& second_moments() const noexcept { return v_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  AdamWConfig config_;
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
  std::size_t t_ = 0;
};

}  // namespace dso::optim
