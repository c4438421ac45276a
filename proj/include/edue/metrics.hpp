#pragma once

// Evaluation mathematics: rank and distance correlation between image-level
// uncertainty scores, pixel-level NCC between heatmaps, NLL calibration and
// soft Dice overlap. All accumulation happens in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "edue/error.hpp"

namespace edue::metrics {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceSmoothing = 1e-6;

// Average (fractional) ranks, 1-based; tied values share their mean rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw ValidationError("undefined correlation: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw ShapeError("spearman: lengths " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  if (x.size() < 3) throw ValidationError("spearman: need at least 3 observations");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

// Classical (biased) distance correlation. Uses the expansion
// dCov^2 = mean(a_ij b_ij) + mean(a) mean(b) - 2 mean_i(rowmean(a)_i rowmean(b)_i),
// which equals the mean of the double-centred product without forming it.
inline double distance_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw ShapeError("distance_correlation: lengths " + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()));
  if (x.size() < 4) throw ValidationError("distance_correlation: need at least 4 observations");
  const std::size_t n = x.size();
  const double nn = static_cast<double>(n);
  std::vector<double> row_a(n, 0.0), row_b(n, 0.0);
  double s_ab = 0.0, s_aa = 0.0, s_bb = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double a = std::abs(x[i] - x[j]);
      const double b = std::abs(y[i] - y[j]);
      row_a[i] += a;
      row_b[i] += b;
      s_ab += a * b;
      s_aa += a * a;
      s_bb += b * b;
    }
  double grand_a = 0.0, grand_b = 0.0, r_ab = 0.0, r_aa = 0.0, r_bb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    row_a[i] /= nn;
    row_b[i] /= nn;
    grand_a += row_a[i];
    grand_b += row_b[i];
    r_ab += row_a[i] * row_b[i];
    r_aa += row_a[i] * row_a[i];
    r_bb += row_b[i] * row_b[i];
  }
  grand_a /= nn;
  grand_b /= nn;
  const double nsq = nn * nn;
  const double dcov_xy = s_ab / nsq + grand_a * grand_b - 2.0 * r_ab / nn;
  const double dvar_x = s_aa / nsq + grand_a * grand_a - 2.0 * r_aa / nn;
  const double dvar_y = s_bb / nsq + grand_b * grand_b - 2.0 * r_bb / nn;
  if (dvar_x <= 0.0 || dvar_y <= 0.0) return 0.0;
  const double r2 = std::max(dcov_xy, 0.0) / std::sqrt(dvar_x * dvar_y);
  return std::clamp(std::sqrt(r2), 0.0, 1.0);
}

struct NccResult {
  double value = 0.0;
  bool degenerate = false;  // one side had zero variance; value forced to 0
};

template <class A, class B>
NccResult ncc(const A& a, const B& b) {
  if (a.size() != b.size())
    throw ShapeError("ncc: sizes " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (a.size() == 0) throw ValidationError("ncc: empty input");
  const std::size_t n = a.size();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += static_cast<double>(a[i]);
    mb += static_cast<double>(b[i]);
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = static_cast<double>(a[i]) - ma;
    const double db = static_cast<double>(b[i]) - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa == 0.0 || sbb == 0.0) return {0.0, true};
  // mean(z_a * z_b) with population standard deviations.
  return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), false};
}

// Mean per-pixel negative log-likelihood of a hard target.
template <class A, class B>
double nll(const A& pred, const B& target) {
  if (pred.size() != target.size())
    throw ShapeError("nll: sizes " + std::to_string(pred.size()) + " vs " + std::to_string(target.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pred[i]), kProbClamp, 1.0 - kProbClamp);
    const double t = static_cast<double>(target[i]);
    acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(pred.size());
}

template <class A, class B>
double soft_dice(const A& pred, const B& target) {
  if (pred.size() != target.size())
    throw ShapeError("soft_dice: sizes " + std::to_string(pred.size()) + " vs " +
                     std::to_string(target.size()));
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = static_cast<double>(pred[i]);
    const double g = static_cast<double>(target[i]);
    inter += p * g;
    sp += p;
    sg += g;
  }
  return (2.0 * inter + kDiceSmoothing) / (sp + sg + kDiceSmoothing);
}

// Dice of two maps binarized at `threshold` (>= counts as foreground).
// Two empty masks agree perfectly.
template <class A, class B>
double binary_dice(const A& a, const B& b, double threshold = 0.5) {
  if (a.size() != b.size())
    throw ShapeError("binary_dice: sizes " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool fa = static_cast<double>(a[i]) >= threshold;
    const bool fb = static_cast<double>(b[i]) >= threshold;
    inter += fa && fb;
    na += fa;
    nb += fb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

template <class A>
double sum_of_variance(const A& heatmap) {
  double acc = 0.0;
  for (std::size_t i = 0; i < heatmap.size(); ++i) acc += static_cast<double>(heatmap[i]);
  return acc;
}

struct ImageCorrelation {
  double sr = std::numeric_limits<double>::quiet_NaN();
  double dc = std::numeric_limits<double>::quiet_NaN();
};

inline ImageCorrelation image_level_correlation(std::span<const double> sv_model,
                                                std::span<const double> sv_gt) {
  if (sv_model.size() < 4) throw ValidationError("image_level_correlation: need at least 4 images");
  return {spearman(sv_model, sv_gt), distance_correlation(sv_model, sv_gt)};
}

struct ImageRecord {
  std::string id;
  double soft_dice = 0.0;
  double nll = 0.0;
  double sv_model = 0.0;
  double sv_gt = 0.0;
  double ncc = 0.0;
  bool ncc_degenerate = false;
};

struct DatasetSummary {
  double sr = std::numeric_limits<double>::quiet_NaN();
  double dc = std::numeric_limits<double>::quiet_NaN();
  double mean_ncc = 0.0;
  double mean_dice = 0.0;
  double mean_nll = 0.0;
  std::size_t n_images = 0;
  std::size_t degenerate_ncc = 0;
  std::string sr_note;  // set when SR could not be computed
};

struct MetricReport {
  std::vector<ImageRecord> per_image;
  DatasetSummary dataset;
};

// Unweighted means over images; SR/DC over the per-image SV pairs. A constant
// SV series leaves SR as NaN with a note rather than aborting the report.
inline DatasetSummary summarize(const std::vector<ImageRecord>& records) {
  DatasetSummary s;
  s.n_images = records.size();
  if (records.empty()) return s;
  std::vector<double> svm, svg;
  for (const auto& r : records) {
    s.mean_ncc += r.ncc;
    s.mean_dice += r.soft_dice;
    s.mean_nll += r.nll;
    s.degenerate_ncc += r.ncc_degenerate;
    svm.push_back(r.sv_model);
    svg.push_back(r.sv_gt);
  }
  const double n = static_cast<double>(records.size());
  s.mean_ncc /= n;
  s.mean_dice /= n;
  s.mean_nll /= n;
  if (records.size() >= 4) {
    try {
      s.sr = spearman(svm, svg);
    } catch (const ValidationError& e) {
      s.sr_note = e.what();
    }
    s.dc = distance_correlation(svm, svg);
  }
  return s;
}

}  // namespace edue::metrics
