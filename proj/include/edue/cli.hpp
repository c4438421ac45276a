#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
// validation error. Diagnostics go to stderr; results go to files, except
// `inspect`, whose table is its output.

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "edue/error.hpp"
#include "edue/harness.hpp"
#include "edue/io/checkpoint.hpp"
#include "edue/io/config.hpp"
#include "edue/io/container.hpp"
#include "edue/io/dataset.hpp"
#include "edue/io/report.hpp"

namespace edue::cli {

namespace fs = std::filesystem;

struct ConfigFlags {
  std::string preset;
  std::string config_path;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* cmd, bool with_seed = true) {
    cmd->add_option("--preset", preset, "desk | riga-like | hecktor-like");
    cmd->add_option("--config", config_path, "RunConfig JSON file (may name a preset)");
    if (with_seed) cmd->add_option("--seed", seed, "overrides EDUE_SEED and the config seed");
  }

  // Explicit flags first, then the fallback (usually the dataset's config).
  [[nodiscard]] io::RunConfig resolve(const io::RunConfig* fallback) const {
    if (!preset.empty() && !config_path.empty()) throw UsageError("--preset and --config are mutually exclusive");
    io::RunConfig cfg;
    if (!config_path.empty()) cfg = io::parse_config(io::read_text(config_path));
    else if (!preset.empty()) cfg = io::preset(preset);
    else if (fallback != nullptr) cfg = *fallback;
    else cfg = io::preset("desk");
    cfg.seed = io::resolve_seed(seed, cfg.seed);
    return cfg;
  }
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

template <class T>
std::vector<T> parse_numbers(const std::string& s, const char* flag) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw UsageError(std::string(flag) + ": '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(std::string(flag) + " needs at least one value");
  return out;
}

inline std::string pick_structure(const io::RunConfig& cfg, const std::string& requested) {
  const auto names = cfg.scene.structure_names();
  if (requested.empty()) return names.front();
  for (const auto& n : names)
    if (n == requested) return n;
  throw ValidationError("structure '" + requested + "' is not part of this dataset");
}

inline void write_pair(const fs::path& dir, const std::string& stem, const io::json& doc, const std::string& csv) {
  io::write_text_atomic(dir / (stem + ".json"), doc.dump(2) + "\n");
  io::write_text_atomic(dir / (stem + ".csv"), csv);
}

// --- subcommands -----------------------------------------------------------

struct GenDataArgs {
  ConfigFlags config;
  std::size_t n = 200;
  std::size_t n_test = 0;
  std::string out;
};

inline int gen_data(const GenDataArgs& a, std::ostream& log) {
  const io::RunConfig cfg = a.config.resolve(nullptr);
  cfg.validate();
  if (a.n == 0) throw UsageError("--n must be positive");
  io::save_dataset(a.out, io::generate(cfg, a.n, a.n_test));
  log << "wrote " << a.n + a.n_test << " images to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  ConfigFlags config;
  std::string data, out, method = "edue", structure;
  std::optional<double> beta;
  std::optional<std::size_t> epochs;
};

inline io::RunConfig training_config(const ConfigFlags& flags, const io::Dataset& ds, std::optional<double> beta,
                                     std::optional<std::size_t> epochs) {
  io::RunConfig cfg = flags.resolve(&ds.config);
  if (cfg.scene.height != ds.config.scene.height || cfg.scene.width != ds.config.scene.width ||
      cfg.scene.channels != ds.config.scene.channels || cfg.scene.n_raters != ds.config.scene.n_raters ||
      cfg.scene.structure != ds.config.scene.structure)
    throw ValidationError("config scene does not match the dataset (image size, channels, raters or structure)");
  cfg.scene = ds.config.scene;
  if (beta) cfg.loss.beta = *beta;
  if (epochs) cfg.epochs = *epochs;
  cfg.validate();
  return cfg;
}

inline int train(const TrainArgs& a, std::ostream& log) {
  const io::Dataset ds = io::load_dataset(a.data);
  const io::RunConfig cfg = training_config(a.config, ds, a.beta, a.epochs);
  const harness::Method method = harness::method_from_string(a.method);
  const std::string structure = pick_structure(cfg, a.structure);
  if (ds.train.empty()) throw ValidationError("dataset has no training split");
  io::Checkpoint ck{cfg, structure, cfg.seed,
                    harness::train_arm(method, cfg.arm_settings(method),
                                       harness::training_examples(ds.train, structure), cfg.seed)};
  io::save_checkpoint(a.out, ck);
  log << "trained " << a.method << " on " << ds.train.size() << " images (" << structure << "), wrote "
            << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string model, data, out;
  std::optional<double> threshold;
  std::string kind;
  std::optional<double> level;
  std::string fractions;
};

inline fs::path out_dir(const EvalArgs& a) { return a.out.empty() ? fs::path(a.model) : fs::path(a.out); }

inline io::json checkpoint_header(const std::string& kind, const io::Checkpoint& ck) {
  io::json h = io::report_header(kind, ck.config, {ck.seed});
  h["method"] = harness::to_string(ck.arm.method);
  h["structure"] = ck.structure;
  return h;
}

inline int eval(const EvalArgs& a) {
  io::Checkpoint ck = io::load_checkpoint(a.model);
  const io::Dataset ds = io::load_dataset(a.data);
  const auto samples = ds.eval_set();
  const auto report = harness::with_predictor(ck.arm, [&](auto& p) { return harness::evaluate(p, samples, ck.structure); });
  write_pair(out_dir(a), "eval", io::metric_report_json(report, checkpoint_header("metrics", ck)),
             io::metric_report_csv(report));
  return 0;
}

inline int qc(const EvalArgs& a) {
  io::Checkpoint ck = io::load_checkpoint(a.model);
  const io::Dataset ds = io::load_dataset(a.data);
  const auto samples = ds.eval_set();
  const auto report = harness::with_predictor(ck.arm, [&](auto& p) { return harness::evaluate(p, samples, ck.structure); });
  std::vector<double> dice, sv;
  for (const auto& r : report.per_image) {
    dice.push_back(r.soft_dice);
    sv.push_back(r.sv_model);
  }
  const double thr = a.threshold ? *a.threshold : ck.config.qc_threshold(ck.structure);
  const auto curve = harness::quality_control(dice, sv, thr);
  write_pair(out_dir(a), "qc", io::qc_json(curve, checkpoint_header("quality_control", ck)), io::qc_csv(curve));
  return 0;
}

inline int ood(const EvalArgs& a) {
  io::Checkpoint ck = io::load_checkpoint(a.model);
  const io::Dataset ds = io::load_dataset(a.data);
  const auto samples = ds.eval_set();
  const auto kind = synth::distortion_from_string(a.kind.empty() ? ck.config.ood_kind : a.kind);
  const double level = a.level ? *a.level : ck.config.ood_level;
  const auto fractions = a.fractions.empty() ? ck.config.ood_fractions : parse_numbers<double>(a.fractions, "--fractions");
  const Rng rng = Rng(ck.seed).split(3);
  const auto report = harness::with_predictor(
      ck.arm, [&](auto& p) { return harness::ood_experiment(p, samples, kind, level, fractions, rng); });
  write_pair(out_dir(a), "ood", io::ood_json(report, checkpoint_header("ood", ck)), io::ood_csv(report));
  return 0;
}

struct CompareArgs {
  ConfigFlags config;
  std::string data, out, seeds = "1,2,3", methods = "edue,le,de", betas;
  std::optional<std::size_t> epochs;
};

inline int compare(const CompareArgs& a, std::ostream& log) {
  const io::Dataset ds = io::load_dataset(a.data);
  const auto seeds = parse_numbers<std::uint64_t>(a.seeds, "--seeds");
  std::vector<harness::Method> methods;
  for (const auto& m : split_list(a.methods)) methods.push_back(harness::method_from_string(m));
  if (methods.empty()) throw UsageError("--methods needs at least one method");
  std::vector<std::optional<double>> betas{std::nullopt};
  if (!a.betas.empty()) {
    betas.clear();
    for (double b : parse_numbers<double>(a.betas, "--betas")) betas.emplace_back(b);
  }
  if (ds.test.empty()) log << "warning: dataset has no test split; evaluating on the training images\n";
  for (const auto& beta : betas) {
    const io::RunConfig cfg = training_config(a.config, ds, beta, a.epochs);
    harness::ComparisonConfig cc;
    cc.methods = methods;
    cc.seeds = seeds;
    cc.structures = cfg.scene.structure_names();
    for (const auto& s : cc.structures) cc.qc_structure_thresholds[s] = cfg.qc_threshold(s);
    harness::ComparisonReport report;
    for (harness::Method m : methods) {
      harness::ComparisonConfig one = cc;
      one.methods = {m};
      one.arms = cfg.arm_settings(m);
      auto part = harness::run_comparison(ds.train, ds.eval_set(), one);
      for (auto& r : part.rows) report.rows.push_back(std::move(r));
      log << "finished " << harness::to_string(m) << "\n";
    }
    // Rows ordered by seed, then method.
    std::stable_sort(report.rows.begin(), report.rows.end(),
                     [](const auto& x, const auto& y) { return x.seed < y.seed; });
    report.summary = harness::summarize_rows(report.rows, methods);
    const std::string stem = beta ? "compare_beta_" + io::fmt(*beta) : "compare";
    io::json header = io::report_header("comparison", cfg, seeds);
    io::json names = io::json::array();
    for (auto m : methods) names.push_back(harness::to_string(m));
    header["methods"] = names;
    const fs::path dir(a.out);
    io::write_text_atomic(dir / (stem + ".json"), io::comparison_json(report, header).dump(2) + "\n");
    io::write_text_atomic(dir / (stem + "_rows.csv"), io::comparison_rows_csv(report));
    io::write_text_atomic(dir / (stem + "_summary.csv"), io::comparison_summary_csv(report));
  }
  return 0;
}

inline int inspect(const std::string& path, std::ostream& out) {
  const auto entries = io::load_container(path);
  out << std::left << std::setw(28) << "name" << std::setw(18) << "shape" << std::right << std::setw(14) << "min"
      << std::setw(14) << "max" << std::setw(14) << "mean" << "\n";
  for (const auto& e : entries) {
    double lo = 0, hi = 0, mean = 0;
    const auto d = e.tensor.data();
    if (!d.empty()) {
      lo = hi = d[0];
      for (float v : d) {
        lo = std::min(lo, double(v));
        hi = std::max(hi, double(v));
        mean += v;
      }
      mean /= static_cast<double>(d.size());
    }
    out << std::left << std::setw(28) << e.name << std::setw(18) << e.tensor.shape().str() << std::right
        << std::setprecision(6) << std::setw(14) << lo << std::setw(14) << hi << std::setw(14) << mean << "\n";
  }
  out << entries.size() << " entries\n";
  return 0;
}

// --- entry point -------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Ensemble-decoder uncertainty estimation toolkit", "edue"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a synthetic multi-rater dataset");
  gen.config.add_to(c_gen);
  c_gen->add_option("--n", gen.n, "training images");
  c_gen->add_option("--n-test", gen.n_test, "held-out test images");
  c_gen->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train one method and write a checkpoint");
  tr.config.add_to(c_train);
  c_train->add_option("--data", tr.data, "dataset directory")->required();
  c_train->add_option("--out", tr.out, "checkpoint directory")->required();
  c_train->add_option("--method", tr.method, "edue | le | de | single_rater");
  c_train->add_option("--structure", tr.structure, "structure to segment (default: first)");
  c_train->add_option("--beta", tr.beta, "heatmap loss weight");
  c_train->add_option("--epochs", tr.epochs, "training epochs");

  EvalArgs ev, q, od;
  auto add_eval = [&](const char* name, const char* help, EvalArgs& e) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("--model", e.model, "checkpoint directory")->required();
    c->add_option("--data", e.data, "dataset directory")->required();
    c->add_option("--out", e.out, "output directory (default: the checkpoint directory)");
    return c;
  };
  auto* c_eval = add_eval("eval", "per-image and dataset metrics", ev);
  auto* c_qc = add_eval("qc", "quality-control curve and d-AUC", q);
  c_qc->add_option("--threshold", q.threshold, "dice below which a segmentation is poor");
  auto* c_ood = add_eval("ood", "agreement scores under input distortion", od);
  c_ood->add_option("--kind", od.kind, "gauss_noise | blur | intensity_shift | channel_shift");
  c_ood->add_option("--level", od.level, "distortion strength");
  c_ood->add_option("--fractions", od.fractions, "comma list of distorted fractions");

  CompareArgs cmp;
  auto* c_cmp = app.add_subcommand("compare", "train and evaluate several methods over seeds");
  cmp.config.add_to(c_cmp, false);
  c_cmp->add_option("--data", cmp.data, "dataset directory")->required();
  c_cmp->add_option("--out", cmp.out, "report directory")->required();
  c_cmp->add_option("--seeds", cmp.seeds, "comma list of seeds");
  c_cmp->add_option("--methods", cmp.methods, "comma list of methods");
  c_cmp->add_option("--betas", cmp.betas, "comma list of heatmap weights to sweep");
  c_cmp->add_option("--epochs", cmp.epochs, "training epochs");

  std::string inspect_path;
  auto* c_inspect = app.add_subcommand("inspect", "print the entry table of an EDT1 file");
  c_inspect->add_option("file", inspect_path, "EDT1 file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (c_gen->parsed()) return gen_data(gen, err);
    if (c_train->parsed()) return train(tr, err);
    if (c_eval->parsed()) return eval(ev);
    if (c_qc->parsed()) return qc(q);
    if (c_ood->parsed()) return ood(od);
    if (c_cmp->parsed()) return compare(cmp, err);
    if (c_inspect->parsed()) return inspect(inspect_path, out);
  } catch (const UsageError& e) {
    err << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace edue::cli
