#pragma once

// Disagreement guidance: rater variance heatmaps, the heatmap alignment loss,
// per-head label sampling and the combined training objective
//
//   L = alpha * sum_i BCE(head_i, target_i) + beta * RMSE(var(heads), var(raters))

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "edue/autodiff.hpp"
#include "edue/error.hpp"
#include "edue/model.hpp"
#include "edue/optim.hpp"
#include "edue/rng.hpp"
#include "edue/tensor.hpp"

namespace edue::dgm {

struct LossWeights {
  double alpha = 1.0;
  double beta = 5.0;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ValidationError("loss weights must be non-negative");
    if (alpha == 0.0 && beta == 0.0) throw ValidationError("alpha and beta cannot both be zero");
  }
};

inline constexpr double kRigaBeta = 5.0;       // fundus-like preset
inline constexpr double kHecktorBeta = 2.5;  // head-and-neck-like preset
inline constexpr double kBceClamp = 1e-7;
inline constexpr double kRmseEpsilon = 1e-12;

namespace detail {

template <class T>
Shape rater_shape(const Tensor<T>& masks) {
  const Shape s = masks.shape();
  if (s.n != 1) throw ShapeError("rater masks must be stored as (1,Y,H,W), got " + s.str());
  return s;
}

}  // namespace detail

// Per-pixel mean of Y rater masks, (1,Y,H,W) -> (1,1,H,W).
template <class T>
Tensor<T> soft_majority(const Tensor<T>& masks) {
  const Shape s = detail::rater_shape(masks);
  if (s.c == 0) throw ValidationError("soft_majority: no rater masks");
  Tensor<T> out(Shape{1, 1, s.h, s.w});
  const std::size_t hw = s.plane();
  for (std::size_t j = 0; j < s.c; ++j)
    for (std::size_t i = 0; i < hw; ++i) out[i] += masks[j * hw + i];
  for (T& v : out.data()) v /= static_cast<T>(s.c);
  return out;
}

// Hard label from a soft mask; an exact 0.5 rounds up to 1.
template <class T>
Tensor<T> binarize(const Tensor<T>& soft, T threshold = T(0.5)) {
  Tensor<T> out(soft.shape());
  for (std::size_t i = 0; i < soft.numel(); ++i) out[i] = soft[i] >= threshold ? T(1) : T(0);
  return out;
}

// Population variance across the Y binary masks, (1,Y,H,W) -> (1,1,H,W).
template <class T>
Tensor<T> gt_heatmap(const Tensor<T>& masks) {
  const Shape s = detail::rater_shape(masks);
  if (s.c < 2)
    throw ValidationError("gt_heatmap: need at least 2 rater masks, got " + std::to_string(s.c));
  for (T v : masks.data())
    if (v != T(0) && v != T(1)) throw ValidationError("gt_heatmap: rater masks must be binary");
  const Tensor<T> mean = soft_majority(masks);
  Tensor<T> out(mean.shape());
  const std::size_t hw = s.plane();
  for (std::size_t j = 0; j < s.c; ++j)
    for (std::size_t i = 0; i < hw; ++i) {
      const T d = masks[j * hw + i] - mean[i];
      out[i] += d * d;
    }
  for (T& v : out.data()) v /= static_cast<T>(s.c);
  return out;
}

// Differentiable variance across the (first `skip` excluded) head probabilities.
template <class T>
ad::Var<T> model_heatmap(const HeadOutputs<T>& heads, std::size_t skip = 0) {
  if (heads.probs.size() < skip + 2)
    throw ValidationError("model_heatmap: need at least 2 heads, got " +
                          std::to_string(heads.probs.size() - std::min(skip, heads.probs.size())));
  return stacked_variance<T>(std::span<const ad::Var<T>>(heads.probs).subspan(skip));
}

template <class T>
ad::Var<T> rmse_loss(ad::Var<T> h_model, const Tensor<T>& h_gt, std::span<const T> weights = {}) {
  return ad::rmse_loss(h_model, h_gt, weights, static_cast<T>(kRmseEpsilon));
}

enum class LabelPolicy {
  rater_sampling,     // random rater per head, soft majority on the last head
  soft_majority_all,  // every head sees the soft majority
  fixed_rater,        // every head sees one designated rater
};

template <class T>
struct HeadTargets {
  std::vector<Tensor<T>> masks;     // one (1,1,H,W) target per head
  std::vector<int> rater_indices;   // -1 marks the soft-majority target
};

namespace detail {

template <class T>
Tensor<T> rater_mask(const Tensor<T>& masks, std::size_t j) {
  const Shape s = masks.shape();
  const std::size_t hw = s.plane();
  return Tensor<T>(Shape{1, 1, s.h, s.w},
                   std::vector<T>(masks.vec().begin() + j * hw, masks.vec().begin() + (j + 1) * hw));
}

}  // namespace detail

// Heads 1..n-1 draw a rater uniformly with replacement; head n gets the soft majority.
template <class T>
HeadTargets<T> sample_labels(const Tensor<T>& masks, std::size_t n_heads, Rng& rng,
                             LabelPolicy policy = LabelPolicy::rater_sampling,
                             std::size_t fixed_rater = 0) {
  const Shape s = detail::rater_shape(masks);
  if (s.c == 0) throw ValidationError("sample_labels: no rater masks");
  if (n_heads == 0) throw ValidationError("sample_labels: need at least one head");
  HeadTargets<T> out;
  if (policy == LabelPolicy::fixed_rater) {
    if (fixed_rater >= s.c)
      throw ValidationError("sample_labels: fixed rater " + std::to_string(fixed_rater) +
                            " out of range for Y=" + std::to_string(s.c));
    for (std::size_t i = 0; i < n_heads; ++i) {
      out.masks.push_back(detail::rater_mask(masks, fixed_rater));
      out.rater_indices.push_back(static_cast<int>(fixed_rater));
    }
    return out;
  }
  if (s.c == 1) {
    // Degenerate single-rater image: every head sees that mask.
    for (std::size_t i = 0; i < n_heads; ++i) {
      out.masks.push_back(detail::rater_mask(masks, 0));
      out.rater_indices.push_back(0);
    }
    return out;
  }
  const Tensor<T> soft = soft_majority(masks);
  for (std::size_t i = 0; i + 1 < n_heads; ++i) {
    if (policy == LabelPolicy::soft_majority_all) {
      out.masks.push_back(soft);
      out.rater_indices.push_back(-1);
    } else {
      const std::size_t j = rng.index(s.c);
      out.masks.push_back(detail::rater_mask(masks, j));
      out.rater_indices.push_back(static_cast<int>(j));
    }
  }
  out.masks.push_back(soft);
  out.rater_indices.push_back(-1);
  return out;
}

template <class T>
struct LossTerms {
  ad::Var<T> total;
  double bce_sum = 0.0;  // sum over heads of mean BCE
  double rmse = 0.0;     // 0 when the heatmap term is inactive
  bool rmse_active = false;
};

// targets[i] is the (b,1,h,w) target of head i. `heatmap_weights`, when
// non-empty, masks pixels of images that cannot supply a rater heatmap.
template <class T>
LossTerms<T> total_loss(const HeadOutputs<T>& heads, const std::vector<Tensor<T>>& targets,
                        const Tensor<T>& h_gt, const LossWeights& w,
                        std::span<const T> heatmap_weights = {}) {
  w.validate();
  if (targets.size() != heads.probs.size())
    throw ShapeError("total_loss: " + std::to_string(heads.probs.size()) + " heads but " +
                     std::to_string(targets.size()) + " targets");
  LossTerms<T> out;
  ad::Var<T> bce_total{};
  for (std::size_t i = 0; i < heads.probs.size(); ++i) {
    auto term = ad::bce_loss(heads.probs[i], targets[i], static_cast<T>(kBceClamp));
    out.bce_sum += term.item();
    bce_total = i == 0 ? term : ad::add(bce_total, term);
  }
  out.total = ad::scale(bce_total, static_cast<T>(w.alpha));
  const bool weights_live =
      heatmap_weights.empty() ||
      std::any_of(heatmap_weights.begin(), heatmap_weights.end(), [](T v) { return v > T(0); });
  if (w.beta > 0.0 && heads.probs.size() >= 2 && weights_live) {
    auto rmse = dgm::rmse_loss(model_heatmap(heads), h_gt, heatmap_weights);
    out.rmse = rmse.item();
    out.rmse_active = true;
    out.total = ad::add(out.total, ad::scale(rmse, static_cast<T>(w.beta)));
  }
  if (!std::isfinite(out.total.item())) throw NumericError("total_loss is not finite");
  return out;
}

// One training image with its Y rater masks (1,Y,H,W).
template <class T>
struct TrainingExample {
  Tensor<T> image;
  Tensor<T> masks;
};

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  LossWeights weights{};
  LabelPolicy policy = LabelPolicy::rater_sampling;
  std::size_t fixed_rater = 0;

  void validate() const {
    if (epochs == 0) throw ValidationError("epochs must be positive");
    if (batch_size == 0) throw ValidationError("batch_size must be positive");
    if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
    weights.validate();
  }
};

struct EpochLoss {
  std::size_t epoch;
  double mean_total, mean_bce, mean_rmse;
};

// Shuffled mini-batch Adam training. Head targets are redrawn once per
// epoch per image; everything random derives from `rng`.
template <class T>
std::vector<EpochLoss> train(UNet<T>& model, const std::vector<TrainingExample<T>>& data,
                             const TrainOptions& opts, const Rng& rng) {
  opts.validate();
  if (data.empty()) throw ValidationError("train: empty dataset");
  const auto& cfg = model.config();
  const Shape img{1, cfg.in_channels, cfg.input_h, cfg.input_w};
  std::vector<Tensor<T>> heatmaps;
  std::vector<T> has_heatmap;
  for (std::size_t k = 0; k < data.size(); ++k) {
    require_same_shape(data[k].image.shape(), img, "train image");
    const Shape ms = data[k].masks.shape();
    if (ms.n != 1 || ms.c == 0 || ms.h != cfg.input_h || ms.w != cfg.input_w)
      throw ShapeError("train masks of image " + std::to_string(k) + ": " + ms.str());
    if (ms.c >= 2) {
      heatmaps.push_back(gt_heatmap(data[k].masks));
      has_heatmap.push_back(T(1));
    } else {
      heatmaps.emplace_back(Shape{1, 1, ms.h, ms.w});
      has_heatmap.push_back(T(0));
    }
  }

  Adam<T> adam(model.parameters(), AdamOptions{opts.lr});
  const std::size_t n_heads = model.head_count();
  const std::size_t hw = cfg.input_h * cfg.input_w;
  std::vector<EpochLoss> trace;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng epoch_rng = rng.split(epoch);
    std::vector<HeadTargets<T>> targets;
    targets.reserve(data.size());
    for (std::size_t k = 0; k < data.size(); ++k) {
      Rng label_rng = epoch_rng.split(k + 1);
      targets.push_back(sample_labels(data[k].masks, n_heads, label_rng, opts.policy, opts.fixed_rater));
    }
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), epoch_rng);

    double sum_total = 0.0, sum_bce = 0.0, sum_rmse = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<const Tensor<T>*> imgs, hms;
      std::vector<T> weights;
      std::vector<std::vector<const Tensor<T>*>> head_targets(n_heads);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t k = order[b];
        imgs.push_back(&data[k].image);
        hms.push_back(&heatmaps[k]);
        weights.insert(weights.end(), hw, has_heatmap[k]);
        for (std::size_t i = 0; i < n_heads; ++i) head_targets[i].push_back(&targets[k].masks[i]);
      }
      std::vector<Tensor<T>> batch_targets;
      for (auto& ht : head_targets) batch_targets.push_back(batch_of<T>(ht));
      const Tensor<T> x = batch_of<T>(imgs);
      const Tensor<T> h_gt = batch_of<T>(hms);

      ad::Tape<T> tape;
      auto heads = model.forward(tape, tape.constant(x));
      LossTerms<T> terms;
      try {
        terms = total_loss(heads, batch_targets, h_gt, opts.weights, std::span<const T>(weights));
      } catch (const NumericError&) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches));
      }
      tape.backward(terms.total);
      adam.step();
      adam.zero_grad();
      sum_total += terms.total.item();
      sum_bce += terms.bce_sum;
      sum_rmse += terms.rmse;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    trace.push_back(EpochLoss{epoch, sum_total / nb, sum_bce / nb, sum_rmse / nb});
    if (!std::isfinite(trace.back().mean_total))
      throw NumericError("non-finite epoch loss at epoch " + std::to_string(epoch));
  }
  return trace;
}

}  // namespace edue::dgm
