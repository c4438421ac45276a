#pragma once

// Experiment drivers: the EDUE arm and its baselines (layer-ensemble style
// multi-head model without disagreement guidance, deep ensemble, single-rater
// model), dataset evaluation, segmentation quality control and the
// out-of-distribution agreement study.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "edue/dgm.hpp"
#include "edue/error.hpp"
#include "edue/metrics.hpp"
#include "edue/model.hpp"
#include "edue/rng.hpp"
#include "edue/synth.hpp"

namespace edue::harness {

using Pred = Prediction<float>;

template <class P>
concept Predictor = requires(P& p, const Tensor<float>& x) {
  { p.predict(x) } -> std::same_as<Pred>;
  { p.forward_passes() } -> std::convertible_to<std::size_t>;
  { p.parameter_count() } -> std::convertible_to<std::size_t>;
};

// A single multi-head (or single-head) network; one trunk pass per call.
class SinglePassPredictor {
 public:
  explicit SinglePassPredictor(Model model, PredictOptions opts = {})
      : model_(std::move(model)), opts_(opts) {}

  Pred predict(const Tensor<float>& x) { return edue::predict(model_, x, opts_); }
  [[nodiscard]] std::size_t forward_passes() const { return model_.trunk_passes(); }
  [[nodiscard]] std::size_t parameter_count() const { return model_.parameter_count(); }
  [[nodiscard]] Model& model() { return model_; }
  [[nodiscard]] const PredictOptions& options() const { return opts_; }

 private:
  Model model_;
  PredictOptions opts_;
};

// Mean member probability as the mask, population variance across members as the heatmap.
inline Pred ensemble_predict(std::span<Model> models, const Tensor<float>& x) {
  if (models.empty()) throw ValidationError("ensemble_predict: empty model list");
  std::vector<Tensor<float>> member_maps;
  for (auto& m : models) member_maps.push_back(edue::predict(m, x).final_mask);
  return aggregate_maps(std::move(member_maps));
}

class EnsemblePredictor {
 public:
  explicit EnsemblePredictor(std::vector<Model> members) : members_(std::move(members)) {
    if (members_.empty()) throw ValidationError("EnsemblePredictor: empty model list");
  }

  Pred predict(const Tensor<float>& x) { return ensemble_predict(members_, x); }
  [[nodiscard]] std::size_t forward_passes() const {
    std::size_t n = 0;
    for (const auto& m : members_) n += m.trunk_passes();
    return n;
  }
  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& m : members_) n += m.parameter_count();
    return n;
  }
  [[nodiscard]] std::vector<Model>& members() { return members_; }

 private:
  std::vector<Model> members_;
};

static_assert(Predictor<SinglePassPredictor>);
static_assert(Predictor<EnsemblePredictor>);

inline std::vector<dgm::TrainingExample<float>> training_examples(const std::vector<synth::RaterSample>& samples,
                                                                   const std::string& structure) {
  std::vector<dgm::TrainingExample<float>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.image, s.structure(structure).masks});
  return out;
}

enum class Method { edue, le, de, single_rater };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::edue: return "edue";
    case Method::le: return "le";
    case Method::de: return "de";
    case Method::single_rater: return "single_rater";
  }
  return "?";
}
inline Method method_from_string(const std::string& s) {
  if (s == "edue") return Method::edue;
  if (s == "le") return Method::le;
  if (s == "de") return Method::de;
  if (s == "single_rater") return Method::single_rater;
  throw ValidationError("unknown method '" + s + "'");
}

struct ArmSettings {
  ModelConfig model{};
  dgm::TrainOptions train{};
  std::size_t de_members = 5;
  std::size_t le_skip_heads = 0;
  std::size_t fixed_rater = 0;
};

struct TrainedArm {
  Method method;
  std::vector<Model> models;  // one entry except for the deep ensemble
  std::vector<std::vector<dgm::EpochLoss>> traces;
  PredictOptions predict_options{};
};

namespace detail {

inline std::uint64_t arm_seed(std::uint64_t seed, Method m, std::size_t member) {
  return splitmix64(seed ^ splitmix64(0x5EEDULL + 7919ULL * static_cast<std::uint64_t>(m) + member));
}

}  // namespace detail

inline TrainedArm train_edue(const ArmSettings& s, const std::vector<dgm::TrainingExample<float>>& data,
                             std::uint64_t seed) {
  ModelConfig mc = s.model;
  mc.seed = detail::arm_seed(seed, Method::edue, 0);
  Model model(mc);
  dgm::TrainOptions opts = s.train;
  opts.policy = dgm::LabelPolicy::rater_sampling;
  auto trace = dgm::train(model, data, opts, Rng(mc.seed).split(1));
  return TrainedArm{Method::edue, {std::move(model)}, {std::move(trace)}, {}};
}

// Same architecture, no heatmap term, every head on the soft majority.
inline TrainedArm train_le_baseline(const ArmSettings& s, const std::vector<dgm::TrainingExample<float>>& data,
                                    std::uint64_t seed) {
  ModelConfig mc = s.model;
  mc.seed = detail::arm_seed(seed, Method::le, 0);
  Model model(mc);
  if (s.le_skip_heads + 2 > model.head_count())
    throw ValidationError("LE head skip " + std::to_string(s.le_skip_heads) + " leaves fewer than 2 of " +
                          std::to_string(model.head_count()) + " heads");
  dgm::TrainOptions opts = s.train;
  opts.policy = dgm::LabelPolicy::soft_majority_all;
  opts.weights.beta = 0.0;
  if (opts.weights.alpha == 0.0) opts.weights.alpha = 1.0;
  auto trace = dgm::train(model, data, opts, Rng(mc.seed).split(1));
  return TrainedArm{Method::le, {std::move(model)}, {std::move(trace)}, PredictOptions{s.le_skip_heads}};
}

// m single-head networks on the soft majority, each from its own seed.
inline TrainedArm train_deep_ensemble(const ArmSettings& s, const std::vector<dgm::TrainingExample<float>>& data,
                                      std::uint64_t seed) {
  if (s.de_members < 2) throw ValidationError("deep ensemble needs at least 2 members");
  TrainedArm arm{Method::de, {}, {}, {}};
  for (std::size_t k = 0; k < s.de_members; ++k) {
    ModelConfig mc = s.model;
    mc.head_layout = HeadLayout::last_only;
    mc.seed = detail::arm_seed(seed, Method::de, k);
    Model model(mc);
    dgm::TrainOptions opts = s.train;
    opts.policy = dgm::LabelPolicy::soft_majority_all;
    opts.weights.beta = 0.0;
    if (opts.weights.alpha == 0.0) opts.weights.alpha = 1.0;
    arm.traces.push_back(dgm::train(model, data, opts, Rng(mc.seed).split(1)));
    arm.models.push_back(std::move(model));
  }
  return arm;
}

// Single-head network trained on one fixed annotator.
inline TrainedArm train_single_rater(const ArmSettings& s, const std::vector<dgm::TrainingExample<float>>& data,
                                     std::uint64_t seed) {
  ModelConfig mc = s.model;
  mc.head_layout = HeadLayout::last_only;
  mc.seed = detail::arm_seed(seed, Method::single_rater, 0);
  Model model(mc);
  dgm::TrainOptions opts = s.train;
  opts.policy = dgm::LabelPolicy::fixed_rater;
  opts.fixed_rater = s.fixed_rater;
  opts.weights.beta = 0.0;
  if (opts.weights.alpha == 0.0) opts.weights.alpha = 1.0;
  auto trace = dgm::train(model, data, opts, Rng(mc.seed).split(1));
  return TrainedArm{Method::single_rater, {std::move(model)}, {std::move(trace)}, {}};
}

inline TrainedArm train_arm(Method m, const ArmSettings& s, const std::vector<dgm::TrainingExample<float>>& data,
                            std::uint64_t seed) {
  switch (m) {
    case Method::edue: return train_edue(s, data, seed);
    case Method::le: return train_le_baseline(s, data, seed);
    case Method::de: return train_deep_ensemble(s, data, seed);
    case Method::single_rater: return train_single_rater(s, data, seed);
  }
  throw ValidationError("unknown method");
}

// Runs `fn` with the arm's predictor type.
template <class F>
decltype(auto) with_predictor(TrainedArm& arm, F&& fn) {
  if (arm.method == Method::de) {
    EnsemblePredictor p(arm.models);
    return fn(p);
  }
  SinglePassPredictor p(arm.models.front(), arm.predict_options);
  return fn(p);
}

inline constexpr std::size_t kEvalBatch = 16;

// Per-image metrics against the soft-majority label of `structure`, then the
// dataset-level SR/DC over sum-of-variance pairs.
template <Predictor P>
metrics::MetricReport evaluate(P& predictor, const std::vector<synth::RaterSample>& samples,
                               const std::string& structure) {
  metrics::MetricReport report;
  for (std::size_t start = 0; start < samples.size(); start += kEvalBatch) {
    const std::size_t end = std::min(samples.size(), start + kEvalBatch);
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t k = start; k < end; ++k) imgs.push_back(&samples[k].image);
    const Pred pred = predictor.predict(batch_of<float>(imgs));
    for (std::size_t k = start; k < end; ++k) {
      const auto& labels = samples[k].structure(structure);
      const Tensor<float> final_mask = pred.final_mask.slice(k - start);
      const Tensor<float> heat = pred.heatmap.slice(k - start);
      const Tensor<float> soft = dgm::soft_majority(labels.masks);
      const Tensor<float> hard = dgm::binarize(soft);
      const Tensor<float> h_gt =
          labels.masks.shape().c >= 2 ? dgm::gt_heatmap(labels.masks) : Tensor<float>(soft.shape());
      metrics::ImageRecord r;
      r.id = samples[k].id;
      r.soft_dice = metrics::soft_dice(final_mask, soft);
      r.nll = metrics::nll(final_mask, hard);
      r.sv_model = pred.sv[k - start];
      r.sv_gt = metrics::sum_of_variance(h_gt);
      const auto n = metrics::ncc(heat, h_gt);
      r.ncc = n.value;
      r.ncc_degenerate = n.degenerate;
      report.per_image.push_back(std::move(r));
    }
  }
  report.dataset = metrics::summarize(report.per_image);
  return report;
}

struct QcCurve {
  std::vector<double> quantiles;
  std::vector<double> remaining_fraction;
  std::vector<double> ideal_fraction;
  double d_auc = 0.0;
  double dice_threshold = 0.0;
  std::size_t n_images = 0;
  std::size_t n_poor = 0;
};

inline std::vector<double> default_quantile_grid() {
  std::vector<double> q;
  for (int i = 0; i <= 20; ++i) q.push_back(static_cast<double>(i) * 0.05);
  return q;
}

// Images removed at fraction q: floor(q * n), so at most a fraction q.
inline std::size_t removed_count(double q, std::size_t n) {
  return static_cast<std::size_t>(std::floor(q * static_cast<double>(n) + 1e-9));
}

// Fraction of poor images left after removing the first k of `order`.
// An empty retained set has no poor images left.
inline double remaining_poor_fraction(const std::vector<bool>& poor, std::span<const std::size_t> order,
                                      std::size_t k) {
  const std::size_t n = order.size();
  if (k >= n) return 0.0;
  std::size_t left = 0;
  for (std::size_t i = k; i < n; ++i) left += poor[order[i]];
  return static_cast<double>(left) / static_cast<double>(n - k);
}

inline double trapezoid(std::span<const double> x, std::span<const double> y) {
  double a = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) a += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return a;
}

// poor := dice < threshold. At each q the most uncertain (largest sv) images
// are removed first; the ideal curve removes poor images first.
inline QcCurve quality_control(std::span<const double> dice, std::span<const double> sv, double dice_threshold,
                               std::vector<double> grid = default_quantile_grid()) {
  if (dice.size() != sv.size()) throw ShapeError("quality_control: dice and sv lengths differ");
  if (dice.size() < 5) throw ValidationError("quality_control: need at least 5 images");
  if (grid.size() < 2 || !std::is_sorted(grid.begin(), grid.end()) || grid.front() < 0.0 || grid.back() > 1.0)
    throw ValidationError("quality_control: quantile grid must be sorted within [0, 1]");
  const std::size_t n = dice.size();
  std::vector<bool> poor(n);
  std::size_t n_poor = 0;
  for (std::size_t i = 0; i < n; ++i) {
    poor[i] = dice[i] < dice_threshold;
    n_poor += poor[i];
  }
  std::vector<std::size_t> by_sv(n);
  std::iota(by_sv.begin(), by_sv.end(), std::size_t{0});
  std::stable_sort(by_sv.begin(), by_sv.end(), [&](std::size_t a, std::size_t b) { return sv[a] > sv[b]; });
  std::vector<std::size_t> ideal(n);
  std::iota(ideal.begin(), ideal.end(), std::size_t{0});
  std::stable_partition(ideal.begin(), ideal.end(), [&](std::size_t i) { return static_cast<bool>(poor[i]); });

  QcCurve c;
  c.quantiles = std::move(grid);
  c.dice_threshold = dice_threshold;
  c.n_images = n;
  c.n_poor = n_poor;
  for (double q : c.quantiles) {
    const std::size_t k = removed_count(q, n);
    c.remaining_fraction.push_back(remaining_poor_fraction(poor, by_sv, k));
    c.ideal_fraction.push_back(remaining_poor_fraction(poor, ideal, k));
  }
  c.d_auc = trapezoid(c.quantiles, c.remaining_fraction) - trapezoid(c.quantiles, c.ideal_fraction);
  return c;
}

// Mean pairwise Dice of maps binarized at 0.5.
inline double agreement_score(const std::vector<std::span<const float>>& maps) {
  if (maps.size() < 2) throw ValidationError("agreement_score: need at least 2 maps");
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < maps.size(); ++a)
    for (std::size_t b = a + 1; b < maps.size(); ++b) {
      if (maps[a].size() != maps[b].size()) throw ShapeError("agreement_score: map sizes differ");
      acc += metrics::binary_dice(maps[a], maps[b]);
      ++pairs;
    }
  return acc / static_cast<double>(pairs);
}

struct BoxSummary {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

// Linear-interpolation quantile of a sorted sample.
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(sorted.size() - 1, lo + 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline BoxSummary box_summary(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return {sorted_quantile(v, 0.0), sorted_quantile(v, 0.25), sorted_quantile(v, 0.5), sorted_quantile(v, 0.75),
          sorted_quantile(v, 1.0)};
}

struct OodLevel {
  double fraction = 0.0;
  std::size_t n_distorted = 0;
  std::vector<double> scores;
  BoxSummary summary;
};

struct OodReport {
  std::string kind;
  double level = 0.0;
  std::vector<OodLevel> levels;
};

// Per-image agreement among the maps that form the predictor's heatmap.
template <Predictor P>
std::vector<double> agreement_scores(P& predictor, const std::vector<Tensor<float>>& images) {
  std::vector<double> out;
  for (std::size_t start = 0; start < images.size(); start += kEvalBatch) {
    const std::size_t end = std::min(images.size(), start + kEvalBatch);
    std::vector<const Tensor<float>*> batch;
    for (std::size_t k = start; k < end; ++k) batch.push_back(&images[k]);
    const Pred pred = predictor.predict(batch_of<float>(batch));
    const std::size_t hw = images.front().shape().plane();
    for (std::size_t k = 0; k < end - start; ++k) {
      std::vector<std::span<const float>> maps;
      for (const auto& m : pred.head_probs) maps.push_back(m.data().subspan(k * hw, hw));
      out.push_back(agreement_score(maps));
    }
  }
  return out;
}

inline std::vector<double> default_ood_fractions() { return {0.0, 0.5, 1.0}; }

// For each fraction f, ceil(f * n) randomly chosen images are distorted.
template <Predictor P>
OodReport ood_experiment(P& predictor, const std::vector<synth::RaterSample>& samples, synth::Distortion kind,
                         double level, const std::vector<double>& fractions, const Rng& rng) {
  if (samples.empty()) throw ValidationError("ood_experiment: empty dataset");
  OodReport report{synth::to_string(kind), level, {}};
  for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
    const double f = fractions[fi];
    if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("ood fractions must lie in [0, 1]");
    Rng pick = rng.split(fi);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), pick);
    const std::size_t count =
        static_cast<std::size_t>(std::ceil(f * static_cast<double>(samples.size()) - 1e-9));
    std::vector<bool> hit(samples.size(), false);
    for (std::size_t i = 0; i < count; ++i) hit[order[i]] = true;
    std::vector<Tensor<float>> images;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      if (hit[k]) {
        Rng noise = pick.split(k + 1);
        images.push_back(synth::distort(samples[k].image, kind, level, noise));
      } else {
        images.push_back(samples[k].image);
      }
    }
    OodLevel lv;
    lv.fraction = f;
    lv.n_distorted = count;
    lv.scores = agreement_scores(predictor, images);
    lv.summary = box_summary(lv.scores);
    report.levels.push_back(std::move(lv));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Comparison across methods and seeds.

struct ComparisonConfig {
  ArmSettings arms{};
  std::vector<Method> methods{Method::edue, Method::le, Method::de};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> structures{"blob"};
  double qc_dice_threshold = 0.9;
  std::map<std::string, double> qc_structure_thresholds{};  // overrides qc_dice_threshold

  [[nodiscard]] double qc_threshold(const std::string& structure) const {
    const auto it = qc_structure_thresholds.find(structure);
    return it == qc_structure_thresholds.end() ? qc_dice_threshold : it->second;
  }
};

struct StructureScores {
  std::string structure;
  double sr = 0, dc = 0, ncc = 0, dice = 0, nll = 0, d_auc = 0;
};

struct ComparisonRow {
  Method method;
  std::uint64_t seed;
  std::vector<StructureScores> per_structure;
  double nll = 0;  // mean over structures
  double forward_passes_per_image = 0;
  std::size_t parameter_count = 0;
};

struct ColumnStats {
  std::string column;
  double mean = 0, stddev = 0;
};

struct MethodSummary {
  Method method;
  std::vector<ColumnStats> columns;
};

struct ComparisonReport {
  std::vector<ComparisonRow> rows;
  std::vector<MethodSummary> summary;
};

// Column order: SR, DC, NCC, Dice per structure, then NLL, then d-AUC.
inline std::vector<std::pair<std::string, double>> row_columns(const ComparisonRow& r) {
  std::vector<std::pair<std::string, double>> cols;
  for (const char* metric : {"sr", "dc", "ncc", "dice"})
    for (const auto& s : r.per_structure) {
      const std::string m = metric;
      const double v = m == "sr" ? s.sr : m == "dc" ? s.dc : m == "ncc" ? s.ncc : s.dice;
      cols.emplace_back(m + "_" + s.structure, v);
    }
  cols.emplace_back("nll", r.nll);
  for (const auto& s : r.per_structure) cols.emplace_back("d_auc_" + s.structure, s.d_auc);
  return cols;
}

// Sample standard deviation (n - 1); zero for a single run.
inline ColumnStats column_stats(const std::string& name, const std::vector<double>& v) {
  ColumnStats c{name, 0.0, 0.0};
  if (v.empty()) return c;
  c.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - c.mean) * (x - c.mean);
    c.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return c;
}

inline std::vector<MethodSummary> summarize_rows(const std::vector<ComparisonRow>& rows,
                                                 const std::vector<Method>& methods) {
  std::vector<MethodSummary> out;
  for (Method m : methods) {
    MethodSummary s{m, {}};
    std::vector<std::vector<double>> values;
    std::vector<std::string> names;
    for (const auto& r : rows) {
      if (r.method != m) continue;
      const auto cols = row_columns(r);
      if (names.empty()) {
        for (const auto& c : cols) names.push_back(c.first);
        values.resize(cols.size());
      }
      for (std::size_t i = 0; i < cols.size(); ++i) values[i].push_back(cols[i].second);
    }
    for (std::size_t i = 0; i < names.size(); ++i) s.columns.push_back(column_stats(names[i], values[i]));
    out.push_back(std::move(s));
  }
  return out;
}

struct ArmResult {
  TrainedArm arm;
  metrics::MetricReport report;
  QcCurve qc;
  std::size_t forward_passes = 0;
  std::size_t parameter_count = 0;
};

inline ArmResult train_and_evaluate(Method m, const ArmSettings& settings,
                                    const std::vector<synth::RaterSample>& train_set,
                                    const std::vector<synth::RaterSample>& test_set, const std::string& structure,
                                    std::uint64_t seed, double qc_threshold) {
  ArmResult res{train_arm(m, settings, training_examples(train_set, structure), seed), {}, {}, 0, 0};
  with_predictor(res.arm, [&](auto& p) {
    const std::size_t before = p.forward_passes();
    res.report = evaluate(p, test_set, structure);
    res.forward_passes = p.forward_passes() - before;
    res.parameter_count = p.parameter_count();
    return 0;
  });
  std::vector<double> dice, sv;
  for (const auto& r : res.report.per_image) {
    dice.push_back(r.soft_dice);
    sv.push_back(r.sv_model);
  }
  if (dice.size() >= 5) res.qc = quality_control(dice, sv, qc_threshold);
  return res;
}

inline ComparisonReport run_comparison(const std::vector<synth::RaterSample>& train_set,
                                       const std::vector<synth::RaterSample>& test_set,
                                       const ComparisonConfig& cfg) {
  if (train_set.empty() || test_set.empty()) throw ValidationError("run_comparison: empty split");
  if (cfg.seeds.empty()) throw ValidationError("run_comparison: no seeds");
  ComparisonReport report;
  for (std::uint64_t seed : cfg.seeds) {
    for (Method m : cfg.methods) {
      ComparisonRow row{m, seed, {}, 0.0, 0.0, 0};
      for (const auto& structure : cfg.structures) {
        ArmResult res = train_and_evaluate(m, cfg.arms, train_set, test_set, structure, seed,
                                           cfg.qc_threshold(structure));
        const auto& d = res.report.dataset;
        row.per_structure.push_back({structure, d.sr, d.dc, d.mean_ncc, d.mean_dice, d.mean_nll, res.qc.d_auc});
        row.nll += d.mean_nll / static_cast<double>(cfg.structures.size());
        row.forward_passes_per_image = static_cast<double>(res.forward_passes) / static_cast<double>(test_set.size());
        row.parameter_count = res.parameter_count;
      }
      report.rows.push_back(std::move(row));
    }
  }
  report.summary = summarize_rows(report.rows, cfg.methods);
  return report;
}

}  // namespace edue::harness
