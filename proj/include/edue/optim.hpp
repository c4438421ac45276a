#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "edue/error.hpp"
#include "edue/tensor.hpp"

namespace edue {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter set; moment buffers start at 0.
template <class T>
class Adam {
 public:
  Adam(std::vector<NamedParam<T>> params, AdamOptions opts = {})
      : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor->numel(), 0.0);
      v_.emplace_back(p.tensor->numel(), 0.0);
    }
  }

  void step() {
    for (const auto& p : params_) {
      for (T g : p.tensor->grad())
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto data = params_[k].tensor->data();
      auto grad = params_[k].tensor->grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad[i];
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g;
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g * g;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        data[i] -= static_cast<T>(opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
      }
    }
  }

  void zero_grad() {
    for (const auto& p : params_) p.tensor->zero_grad();
  }

  [[nodiscard]] long step_count() const { return t_; }
  void set_lr(double lr) { opts_.lr = lr; }

 private:
  std::vector<NamedParam<T>> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace edue
