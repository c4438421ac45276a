#pragma once

// JSON and CSV renderings of training traces and evaluation reports. Every
// JSON report opens with a header echoing the configuration and seeds.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edue/dgm.hpp"
#include "edue/harness.hpp"
#include "edue/io/config.hpp"
#include "edue/metrics.hpp"

namespace edue::io {

inline constexpr const char* kReportFormat = "edue-report/1";

// Shortest text that round-trips the double; "nan" for NaN.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline json report_header(const std::string& kind, const RunConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  return json{{"format", kReportFormat}, {"kind", kind}, {"seeds", seeds}, {"config", to_json(cfg)}};
}

inline std::string loss_trace_csv(const std::vector<std::vector<dgm::EpochLoss>>& traces) {
  std::string out = "member,epoch,mean_total,mean_bce,mean_rmse\n";
  for (std::size_t m = 0; m < traces.size(); ++m)
    for (const auto& e : traces[m])
      out += std::to_string(m) + "," + std::to_string(e.epoch) + "," + fmt(e.mean_total) + "," + fmt(e.mean_bce) +
             "," + fmt(e.mean_rmse) + "\n";
  return out;
}

inline json to_json(const metrics::DatasetSummary& s) {
  json j{{"n_images", s.n_images}, {"sr", s.sr},           {"dc", s.dc},
         {"mean_ncc", s.mean_ncc}, {"mean_dice", s.mean_dice}, {"mean_nll", s.mean_nll},
         {"nll_scale", "raw nats per pixel"}, {"degenerate_ncc", s.degenerate_ncc}};
  if (!s.sr_note.empty()) j["sr_note"] = s.sr_note;
  return j;
}

inline json metric_report_json(const metrics::MetricReport& r, json header) {
  json images = json::array();
  for (const auto& i : r.per_image)
    images.push_back({{"id", i.id},
                      {"soft_dice", i.soft_dice},
                      {"nll", i.nll},
                      {"sv_model", i.sv_model},
                      {"sv_gt", i.sv_gt},
                      {"ncc", i.ncc},
                      {"ncc_degenerate", i.ncc_degenerate}});
  header["dataset"] = to_json(r.dataset);
  header["images"] = std::move(images);
  return header;
}

// One row per image, then a "dataset" row with means and SR/DC in the sv columns.
inline std::string metric_report_csv(const metrics::MetricReport& r) {
  std::string out = "id,soft_dice,nll,sv_model,sv_gt,ncc,ncc_degenerate\n";
  for (const auto& i : r.per_image)
    out += i.id + "," + fmt(i.soft_dice) + "," + fmt(i.nll) + "," + fmt(i.sv_model) + "," + fmt(i.sv_gt) + "," +
           fmt(i.ncc) + "," + (i.ncc_degenerate ? "1" : "0") + "\n";
  const auto& d = r.dataset;
  out += "dataset," + fmt(d.mean_dice) + "," + fmt(d.mean_nll) + "," + fmt(d.sr) + "," + fmt(d.dc) + "," +
         fmt(d.mean_ncc) + "," + std::to_string(d.degenerate_ncc) + "\n";
  return out;
}

inline json qc_json(const harness::QcCurve& c, json header) {
  header["dice_threshold"] = c.dice_threshold;
  header["n_images"] = c.n_images;
  header["n_poor"] = c.n_poor;
  header["d_auc"] = c.d_auc;
  header["quantiles"] = c.quantiles;
  header["remaining_fraction"] = c.remaining_fraction;
  header["ideal_fraction"] = c.ideal_fraction;
  return header;
}

inline std::string qc_csv(const harness::QcCurve& c) {
  std::string out = "quantile,remaining_fraction,ideal_fraction\n";
  for (std::size_t i = 0; i < c.quantiles.size(); ++i)
    out += fmt(c.quantiles[i]) + "," + fmt(c.remaining_fraction[i]) + "," + fmt(c.ideal_fraction[i]) + "\n";
  return out;
}

inline json ood_json(const harness::OodReport& r, json header) {
  header["distortion"] = r.kind;
  header["level"] = r.level;
  json levels = json::array();
  for (const auto& l : r.levels)
    levels.push_back({{"fraction", l.fraction},
                      {"n_distorted", l.n_distorted},
                      {"min", l.summary.min},
                      {"q1", l.summary.q1},
                      {"median", l.summary.median},
                      {"q3", l.summary.q3},
                      {"max", l.summary.max},
                      {"scores", l.scores}});
  header["levels"] = std::move(levels);
  return header;
}

// Long format, one agreement score per row, for box plots.
inline std::string ood_csv(const harness::OodReport& r) {
  std::string out = "fraction,image_index,agreement\n";
  for (const auto& l : r.levels)
    for (std::size_t i = 0; i < l.scores.size(); ++i)
      out += fmt(l.fraction) + "," + std::to_string(i) + "," + fmt(l.scores[i]) + "\n";
  return out;
}

inline json comparison_json(const harness::ComparisonReport& r, json header) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json cols = json::object();
    for (const auto& [k, v] : harness::row_columns(row)) cols[k] = v;
    rows.push_back({{"method", harness::to_string(row.method)},
                    {"seed", row.seed},
                    {"forward_passes_per_image", row.forward_passes_per_image},
                    {"parameter_count", row.parameter_count},
                    {"columns", cols}});
  }
  json summary = json::array();
  for (const auto& s : r.summary) {
    json cols = json::object();
    for (const auto& c : s.columns) cols[c.column] = {{"mean", c.mean}, {"std", c.stddev}};
    summary.push_back({{"method", harness::to_string(s.method)}, {"columns", cols}});
  }
  header["std_convention"] = "sample standard deviation over seeds";
  header["rows"] = std::move(rows);
  header["summary"] = std::move(summary);
  return header;
}

inline std::string comparison_rows_csv(const harness::ComparisonReport& r) {
  std::string out;
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto cols = harness::row_columns(r.rows[i]);
    if (i == 0) {
      out += "method,seed";
      for (const auto& c : cols) out += "," + c.first;
      out += "\n";
    }
    out += std::string(harness::to_string(r.rows[i].method)) + "," + std::to_string(r.rows[i].seed);
    for (const auto& c : cols) out += "," + fmt(c.second);
    out += "\n";
  }
  return out;
}

// Per method: <column>_mean and <column>_std for every table column.
inline std::string comparison_summary_csv(const harness::ComparisonReport& r) {
  std::string out;
  for (std::size_t i = 0; i < r.summary.size(); ++i) {
    const auto& s = r.summary[i];
    if (i == 0) {
      out += "method";
      for (const auto& c : s.columns) out += "," + c.column + "_mean," + c.column + "_std";
      out += "\n";
    }
    out += harness::to_string(s.method);
    for (const auto& c : s.columns) out += "," + fmt(c.mean) + "," + fmt(c.stddev);
    out += "\n";
  }
  return out;
}

}  // namespace edue::io
