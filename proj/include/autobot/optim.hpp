#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "autobot/error.hpp"
#include "autobot/tensor.hpp"

namespace autobot {

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) with bias correction.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit Adam(Options o) : o_(o) {
    if (!(o.lr > 0.0)) throw ValueError("adam: learning rate must be positive");
  }

  /// Updates params[i] in place from grads[i].
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw ValueError("adam: params / grads count mismatch");
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(p->numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ValueError("adam: parameter set changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(o_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(o_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      const auto& g = grads[i];
      if (g.numel() != p.numel()) throw ShapeError("adam: gradient shape mismatch");
      for (std::size_t k = 0; k < p.numel(); ++k) {
        m_[i][k] = o_.beta1 * m_[i][k] + (1 - o_.beta1) * g[k];
        v_[i][k] = o_.beta2 * v_[i][k] + (1 - o_.beta2) * double(g[k]) * g[k];
        const double mh = m_[i][k] / c1;
        const double vh = v_[i][k] / c2;
        p[k] = static_cast<float>(p[k] - o_.lr * mh / (std::sqrt(vh) + o_.eps));
      }
    }
  }

 private:
  Options o_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

/// SGD with momentum and coupled weight decay:
///   g' = g + wd * p;  buf = momentum * buf + g';  p -= lr * buf
class Sgd {
 public:
  struct Options {
    double momentum = 0.9;
    double weight_decay = 0.0;
  };

  explicit Sgd(Options o) : o_(o) {}

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
    if (params.size() != grads.size()) throw ValueError("sgd: params / grads count mismatch");
    if (buf_.empty()) {
      for (auto* p : params) buf_.emplace_back(p->numel(), 0.0f);
    }
    if (buf_.size() != params.size()) throw ValueError("sgd: parameter set changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      const auto& g = grads[i];
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const float d = g[k] + float(o_.weight_decay) * p[k];
        buf_[i][k] = float(o_.momentum) * buf_[i][k] + d;
        p[k] -= float(lr) * buf_[i][k];
      }
    }
  }

 private:
  Options o_;
  std::vector<std::vector<float>> buf_;
};

/// lr * (1 + cos(pi * epoch / epochs)) / 2.
inline double cosine_lr(double base, std::size_t epoch, std::size_t epochs) {
  if (epochs == 0) return base;
  return base * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(epochs))) / 2.0;
}

}  // namespace autobot
