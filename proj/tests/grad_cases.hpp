#pragma once

// Finite-difference cases for every differentiable op. Each case projects the
// op output to a scalar through an RMSE against a fixed random target, so
// every output element carries a distinct weight.

#include <string>
#include <vector>

#include "edue/autodiff.hpp"
#include "edue/dgm.hpp"
#include "edue/model.hpp"
#include "oracles.hpp"

namespace gradcases {

using edue::Shape;
using edue::Tensor;
namespace ad = edue::ad;

template <class T>
struct Case {
  std::string name;
  std::vector<Tensor<T>> leaves;
  oracle::ScalarFn<T> fn;
};

template <class T>
ad::Var<T> project(ad::Var<T> y, const Tensor<T>& target) {
  return ad::rmse_loss(y, target, {}, T(0));
}

template <class T>
std::vector<Case<T>> all(std::uint64_t seed) {
  oracle::Gen g(seed);
  std::vector<Case<T>> cases;
  auto target = [&](Shape s) { return g.tensor<T>(s, -2.0, 2.0); };

  {
    const Shape xs{2, 3, 5, 5};
    const auto t = target(Shape{2, 4, 5, 5});
    cases.push_back({"conv2d_3x3_pad1",
                     {g.tensor<T>(xs), g.tensor<T>(Shape{4, 3, 3, 3}), g.tensor<T>(Shape{1, 4, 1, 1})},
                     [t](ad::Tape<T>&, std::vector<ad::Var<T>>& v) {
                       return project(ad::conv2d(v[0], v[1], v[2], 1, 1), t);
                     }});
  }
  {
    const auto t = target(Shape{1, 3, 3, 3});
    cases.push_back({"conv2d_stride2",
                     {g.tensor<T>(Shape{1, 2, 6, 6}), g.tensor<T>(Shape{3, 2, 3, 3}), g.tensor<T>(Shape{1, 3, 1, 1})},
                     [t](ad::Tape<T>&, std::vector<ad::Var<T>>& v) {
                       return project(ad::conv2d(v[0], v[1], v[2], 2, 1), t);
                     }});
  }
  {
    const auto t = target(Shape{2, 3, 4, 4});
    cases.push_back({"channel_norm",
                     {g.tensor<T>(Shape{2, 3, 4, 4}, -2.0, 2.0), g.tensor<T>(Shape{1, 3, 1, 1}, 0.5, 1.5),
                      g.tensor<T>(Shape{1, 3, 1, 1})},
                     [t](ad::Tape<T>&, std::vector<ad::Var<T>>& v) {
                       return project(ad::channel_norm(v[0], v[1], v[2], T(1e-5)), t);
                     }});
  }
  {
    const auto t = target(Shape{2, 2, 3, 3});
    cases.push_back({"sigmoid", {g.tensor<T>(Shape{2, 2, 3, 3}, -4.0, 4.0)},
                     [t](ad::Tape<T>&, std::vector<ad::Var<T>>& v) { return project(ad::sigmoid(v[0]), t); }});
  }
  {
    const auto t = target(Shape{2, 2, 3, 3});
    cases.push_back({"relu", {g.tensor_away_from_zero<T>(Shape{2, 2, 3, 3}, 0.05)},
                     [t](ad::Tape<T>&, std::vector<ad::Var<T>>& v) { return project(ad::relu(v[0]), t); }});
  }
  {
    const auto t = target(Shape{1, 2, 6, 6});
    cases.push_back({"upsample_nearest", {g.tensor<T>(Shape{1, 2, 3, 3})},
                     [t](ad::Tape<T>&, std::vector<ad::Var<T>>& v) {
                       return project(ad::upsample_nearest(v[0], 2), t);
                     }});
  }
  {
    const auto t = target(Shape{1, 2, 3, 3});
    cases.push_back({"variance_along_first_axis", {g.tensor<T>(Shape{4, 2, 3, 3})},
                     [t](ad::Tape<T>&, std::vector<ad::Var<T>>& v) {
                       return project(ad::variance_along_first_axis(v[0]), t);
                     }});
  }
  {
    const auto t = target(Shape{1, 5, 3, 3});
    cases.push_back({"concat_channels", {g.tensor<T>(Shape{1, 2, 3, 3}), g.tensor<T>(Shape{1, 3, 3, 3})},
                     [t](ad::Tape<T>&, std::vector<ad::Var<T>>& v) {
                       return project(ad::concat_channels(v[0], v[1]), t);
                     }});
  }
  {
    const auto tgt = g.binary<T>(Shape{2, 1, 4, 4});
    cases.push_back({"bce_loss", {g.tensor<T>(Shape{2, 1, 4, 4}, 0.05, 0.95)},
                     [tgt](ad::Tape<T>&, std::vector<ad::Var<T>>& v) { return ad::bce_loss(v[0], tgt, T(1e-7)); }});
  }
  {
    const auto tgt = g.tensor<T>(Shape{2, 1, 4, 4});
    std::vector<T> w(32);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = i < 16 ? T(1) : T(0);
    cases.push_back({"rmse_loss_weighted", {g.tensor<T>(Shape{2, 1, 4, 4})},
                     [tgt, w](ad::Tape<T>&, std::vector<ad::Var<T>>& v) {
                       return ad::rmse_loss(v[0], tgt, std::span<const T>(w), T(1e-12));
                     }});
  }
  {
    // Two 4x4 heads: the leaves are the head logits.
    const std::vector<Tensor<T>> targets{g.binary<T>(Shape{1, 1, 4, 4}), g.binary<T>(Shape{1, 1, 4, 4})};
    const auto masks = g.binary<T>(Shape{1, 3, 4, 4});
    const auto h_gt = edue::dgm::gt_heatmap(masks);
    cases.push_back({"total_loss_two_heads",
                     {g.tensor<T>(Shape{1, 1, 4, 4}, -3.0, 3.0), g.tensor<T>(Shape{1, 1, 4, 4}, -3.0, 3.0)},
                     [targets, h_gt](ad::Tape<T>&, std::vector<ad::Var<T>>& v) {
                       edue::HeadOutputs<T> heads{{v[0], v[1]}, {ad::sigmoid(v[0]), ad::sigmoid(v[1])}};
                       return edue::dgm::total_loss(heads, targets, h_gt, edue::dgm::LossWeights{1.0, 5.0}).total;
                     }});
  }
  return cases;
}

template <class T>
struct Tolerance;
template <>
struct Tolerance<float> {
  static constexpr double step = 1e-2;
  static constexpr double rel = 1e-2;
};
template <>
struct Tolerance<double> {
  static constexpr double step = 1e-6;
  static constexpr double rel = 1e-5;
};

// Full network: gradient of the total loss with respect to a sample of
// parameter entries from every tensor, by central differences.
inline oracle::GradCheck full_model_check(std::uint64_t seed, std::size_t per_tensor = 6) {
  using T = double;
  edue::ModelConfig cfg;
  cfg.n_e = 3;
  cfg.n_d = 2;
  cfg.base_channels = 3;
  cfg.input_h = cfg.input_w = 8;
  cfg.head_hidden = 2;
  cfg.seed = seed;
  edue::UNet<T> model(cfg);
  oracle::Gen g(seed);
  // Zero-initialised biases over all-zero ReLU outputs sit exactly on the kink.
  for (auto& p : model.parameters())
    if (p.name.ends_with(".bias") || p.name.ends_with(".shift"))
      for (T& v : p.tensor->data()) v = static_cast<T>(g.uniform(-0.2, 0.2));
  const auto x = g.tensor<T>(Shape{2, 1, 8, 8}, 0.0, 1.0);
  const auto masks_a = g.binary<T>(Shape{1, 3, 8, 8}), masks_b = g.binary<T>(Shape{1, 3, 8, 8});
  std::vector<const Tensor<T>*> hm{nullptr, nullptr};
  const auto ha = edue::dgm::gt_heatmap(masks_a), hb = edue::dgm::gt_heatmap(masks_b);
  hm[0] = &ha;
  hm[1] = &hb;
  const Tensor<T> h_gt = edue::batch_of<T>(hm);
  std::vector<Tensor<T>> targets;
  for (std::size_t i = 0; i < model.head_count(); ++i) targets.push_back(g.binary<T>(Shape{2, 1, 8, 8}));

  auto loss = [&](bool record) {
    ad::Tape<T> tape(record);
    auto heads = model.forward(tape, tape.constant(x));
    auto terms = edue::dgm::total_loss(heads, targets, h_gt, edue::dgm::LossWeights{1.0, 5.0});
    if (record) tape.backward(terms.total);
    return static_cast<double>(terms.total.item());
  };
  for (auto& p : model.parameters()) p.tensor->zero_grad();
  loss(true);

  oracle::GradCheck out;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  const double h = 1e-6;
  for (auto& p : model.parameters()) {
    Tensor<T>& t = *p.tensor;
    for (std::size_t s = 0; s < std::min(per_tensor, t.numel()); ++s) {
      const std::size_t i = g.index(t.numel());
      const double a = t.grad()[i];
      const T saved = t[i];
      t[i] = saved + h;
      const double up = loss(false);
      t[i] = saved - h;
      const double down = loss(false);
      t[i] = saved;
      const double numeric = (up - down) / (2 * h);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      out.max_abs_error = std::max(out.max_abs_error, std::abs(a - numeric));
      ++out.n;
    }
  }
  out.rel_error = std::sqrt(diff2) / std::max(std::sqrt(std::max(a2, n2)), 1e-30);
  return out;
}

}  // namespace gradcases
