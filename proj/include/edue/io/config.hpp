#pragma once

// RunConfig: presets plus JSON overrides. Every key a user supplies must
// exist in the preset document; anything else is rejected before a run.

#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edue/dgm.hpp"
#include "edue/error.hpp"
#include "edue/harness.hpp"
#include "edue/model.hpp"
#include "edue/synth.hpp"

namespace edue::io {

using json = nlohmann::ordered_json;

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 1;
  ModelConfig model{};
  dgm::LossWeights loss{};
  synth::SceneParams scene{};
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::size_t de_members = 3;
  std::size_t le_skip_heads = 0;
  HeadLayout le_head_layout = HeadLayout::decoder;
  std::size_t fixed_rater = 0;
  std::map<std::string, double> qc_thresholds{{"default", 0.65}};
  std::string ood_kind = "gauss_noise";
  double ood_level = 0.3;
  std::vector<double> ood_fractions{0.0, 0.5, 1.0};

  [[nodiscard]] double qc_threshold(const std::string& structure) const {
    if (auto it = qc_thresholds.find(structure); it != qc_thresholds.end()) return it->second;
    if (auto it = qc_thresholds.find("default"); it != qc_thresholds.end()) return it->second;
    throw ValidationError("no quality-control dice threshold for structure '" + structure + "'");
  }

  [[nodiscard]] dgm::TrainOptions train_options() const {
    dgm::TrainOptions t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.lr = lr;
    t.weights = loss;
    t.fixed_rater = fixed_rater;
    return t;
  }

  [[nodiscard]] harness::ArmSettings arm_settings(harness::Method m) const {
    harness::ArmSettings a;
    a.model = model;
    if (m == harness::Method::le) a.model.head_layout = le_head_layout;
    a.train = train_options();
    a.de_members = de_members;
    a.le_skip_heads = le_skip_heads;
    a.fixed_rater = fixed_rater;
    return a;
  }

  void validate() const {
    model.validate();
    loss.validate();
    scene.validate();
    train_options().validate();
    if (model.input_h != scene.height || model.input_w != scene.width)
      throw ValidationError("model input size must match scene image size");
    if (model.in_channels != scene.channels) throw ValidationError("model in_channels must match scene channels");
    if (de_members < 2) throw ValidationError("de_members must be at least 2");
    if (fixed_rater >= scene.n_raters) throw ValidationError("fixed_rater out of range");
    ModelConfig le = model;
    le.head_layout = le_head_layout;
    if (le_skip_heads + 2 > le.head_count())
      throw ValidationError("le_skip_heads leaves fewer than 2 heads for the LE baseline");
    synth::distortion_from_string(ood_kind);
    if (!(ood_level >= 0.0)) throw ValidationError("ood level must be non-negative");
    for (double f : ood_fractions)
      if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("ood fractions must lie in [0, 1]");
    for (const auto& [k, v] : qc_thresholds)
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("qc threshold for '" + k + "' must lie in [0, 1]");
  }
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"desk", "riga-like", "hecktor-like"};
  return names;
}

// Desk scale is the default. The two full-scale presets use 200 epochs /
// batch 16 / beta 5 and 120 epochs / batch 32 / beta 2.5, constant lr 5e-5,
// five ensemble members and the 0.97/0.85 and 0.65/0.55 quality-control
// thresholds.
inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "desk") return c;
  if (name == "riga-like") {
    c.model = full_scale_model_config();
    c.scene.height = c.scene.width = 256;
    c.scene.channels = 3;
    c.scene.n_raters = 6;
    c.scene.delta_low = 1.0;
    c.scene.delta_high = 8.0;
    c.scene.structure = synth::Structure::nested;
    c.loss.beta = dgm::kRigaBeta;
    c.epochs = 200;
    c.batch_size = 16;
    c.lr = 5e-5;
    c.de_members = 5;
    c.le_head_layout = HeadLayout::all_levels;
    c.le_skip_heads = 5;
    c.qc_thresholds = {{"disc", 0.97}, {"cup", 0.85}};
    return c;
  }
  if (name == "hecktor-like") {
    c.model = full_scale_model_config();
    c.model.in_channels = 2;  // CT + PET
    c.scene.height = c.scene.width = 256;
    c.scene.channels = 2;
    c.scene.n_raters = 3;
    c.scene.delta_low = 1.0;
    c.scene.delta_high = 8.0;
    c.scene.structure = synth::Structure::nested;
    c.loss.beta = dgm::kHecktorBeta;
    c.epochs = 120;
    c.batch_size = 32;
    c.lr = 5e-5;
    c.de_members = 5;
    c.le_head_layout = HeadLayout::all_levels;
    c.le_skip_heads = 5;
    // outer ~ primary tumour, inner ~ lymph node
    c.qc_thresholds = {{"disc", 0.65}, {"cup", 0.55}};
    return c;
  }
  throw ValidationError("unknown preset '" + name + "'");
}

inline json to_json(const ModelConfig& m) {
  return json{{"n_e", m.n_e},
              {"n_d", m.n_d},
              {"in_channels", m.in_channels},
              {"base_channels", m.base_channels},
              {"channel_growth", m.channel_growth},
              {"input_size", {m.input_h, m.input_w}},
              {"head_hidden", m.head_hidden},
              {"head_layout", to_string(m.head_layout)},
              {"seed", m.seed}};
}

inline json to_json(const synth::SceneParams& s) {
  return json{{"image_size", {s.height, s.width}},
              {"channels", s.channels},
              {"n_raters", s.n_raters},
              {"delta_low", s.delta_low},
              {"delta_high", s.delta_high},
              {"ambiguity_mix", s.ambiguity_mix},
              {"texture_noise", s.texture_noise},
              {"structure", synth::to_string(s.structure)}};
}

inline json to_json(const RunConfig& c) {
  json qc = json::object();
  for (const auto& [k, v] : c.qc_thresholds) qc[k] = v;
  json model = to_json(c.model);
  model.erase("seed");
  model.erase("head_layout");
  return json{{"preset", c.preset},
              {"seed", c.seed},
              {"model", model},
              {"loss", {{"alpha", c.loss.alpha}, {"beta", c.loss.beta}}},
              {"scene", to_json(c.scene)},
              {"schedule", {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}}},
              {"baselines",
               {{"de_members", c.de_members},
                {"le_skip_heads", c.le_skip_heads},
                {"le_head_layout", to_string(c.le_head_layout)},
                {"fixed_rater", c.fixed_rater}}},
              {"qc", {{"dice_thresholds", qc}}},
              {"ood", {{"kind", c.ood_kind}, {"level", c.ood_level}, {"fractions", c.ood_fractions}}}};
}

namespace detail {

inline void check_keys(const json& user, const json& schema, const std::string& where) {
  if (!user.is_object()) throw ValidationError("config " + where + " must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    // qc.dice_thresholds is an open map from structure name to threshold.
    if (path.rfind("qc.dice_thresholds.", 0) == 0) {
      if (!it.value().is_number()) throw ValidationError("config key '" + path + "' must be a number");
      continue;
    }
    if (!schema.contains(it.key())) throw ValidationError("unknown config key '" + path + "'");
    const json& ref = schema.at(it.key());
    if (ref.is_object()) {
      check_keys(it.value(), ref, path);
    } else if (ref.is_number() != it.value().is_number() || ref.is_string() != it.value().is_string() ||
               ref.is_array() != it.value().is_array()) {
      throw ValidationError("config key '" + path + "' has the wrong type");
    }
  }
}

inline void merge(json& base, const json& over) {
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

template <class T>
T get(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline RunConfig from_json(const json& doc) {
  const std::string name = doc.contains("preset") ? detail::get<std::string>(doc, "preset") : "desk";
  json base = to_json(preset(name));
  detail::check_keys(doc, base, "");
  detail::merge(base, doc);

  RunConfig c = preset(name);
  c.seed = detail::get<std::uint64_t>(base, "seed");
  const json& m = base["model"];
  c.model.n_e = detail::get<std::size_t>(m, "n_e");
  c.model.n_d = detail::get<std::size_t>(m, "n_d");
  c.model.in_channels = detail::get<std::size_t>(m, "in_channels");
  c.model.base_channels = detail::get<std::size_t>(m, "base_channels");
  c.model.channel_growth = detail::get<double>(m, "channel_growth");
  const auto in = detail::get<std::vector<std::size_t>>(m, "input_size");
  if (in.size() != 2) throw ValidationError("model.input_size must be [H, W]");
  c.model.input_h = in[0];
  c.model.input_w = in[1];
  c.model.head_hidden = detail::get<std::size_t>(m, "head_hidden");
  c.loss.alpha = detail::get<double>(base["loss"], "alpha");
  c.loss.beta = detail::get<double>(base["loss"], "beta");
  const json& s = base["scene"];
  const auto sz = detail::get<std::vector<std::size_t>>(s, "image_size");
  if (sz.size() != 2) throw ValidationError("scene.image_size must be [H, W]");
  c.scene.height = sz[0];
  c.scene.width = sz[1];
  c.scene.channels = detail::get<std::size_t>(s, "channels");
  c.scene.n_raters = detail::get<std::size_t>(s, "n_raters");
  c.scene.delta_low = detail::get<double>(s, "delta_low");
  c.scene.delta_high = detail::get<double>(s, "delta_high");
  c.scene.ambiguity_mix = detail::get<double>(s, "ambiguity_mix");
  c.scene.texture_noise = detail::get<double>(s, "texture_noise");
  c.scene.structure = synth::structure_from_string(detail::get<std::string>(s, "structure"));
  const json& sch = base["schedule"];
  c.epochs = detail::get<std::size_t>(sch, "epochs");
  c.batch_size = detail::get<std::size_t>(sch, "batch_size");
  c.lr = detail::get<double>(sch, "lr");
  const json& b = base["baselines"];
  c.de_members = detail::get<std::size_t>(b, "de_members");
  c.le_skip_heads = detail::get<std::size_t>(b, "le_skip_heads");
  c.le_head_layout = head_layout_from_string(detail::get<std::string>(b, "le_head_layout"));
  c.fixed_rater = detail::get<std::size_t>(b, "fixed_rater");
  c.qc_thresholds.clear();
  for (auto it = base["qc"]["dice_thresholds"].begin(); it != base["qc"]["dice_thresholds"].end(); ++it)
    c.qc_thresholds[it.key()] = it.value().get<double>();
  const json& o = base["ood"];
  c.ood_kind = detail::get<std::string>(o, "kind");
  c.ood_level = detail::get<double>(o, "level");
  c.ood_fractions = detail::get<std::vector<double>>(o, "fractions");
  c.validate();
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(doc);
}

// Seed precedence: explicit flag, then EDUE_SEED, then the config value.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_seed) {
  if (flag) return *flag;
  if (const char* env = std::getenv("EDUE_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw ValidationError(std::string("EDUE_SEED is not an integer: ") + env);
    return v;
  }
  return config_seed;
}

}  // namespace edue::io
