#include "dso/optimizer.hpp"

#include <cmath>

#include "dso/errors.hpp"

namespace dso::optim {

void AdamW::step(std::span<ad::Tensor* const> params, std::span<const ad::Tensor> grads) {
  if (params.size() != grads.size()) throw ShapeError("AdamW: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const ad::Tensor* p : params) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ShapeError("AdamW: parameter list changed between steps");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - config_.lr * config_.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Tensor& p = *params[k];
    const ad::Tensor& g = grads[k];
    if (!p.same_shape(g) || !p.same_shape(m_[k])) {
      throw ShapeError("AdamW: shape mismatch for parameter " + std::to_string(k));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m_[k][i] = b1 * m_[k][i] + (1.0 - b1) * g[i];
      v_[k][i] = b2 * v_[k][i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m_[k][i] / c1;
      const double vhat = v_[k][i] / c2;
      p[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      p[i] *= decay;
    }
  }
}

}  // namespace dso::optim
