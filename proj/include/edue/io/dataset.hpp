#pragma once

// Dataset directory: manifest.json plus one EDT1 file per image holding
// "image", "masks/<s>", "true_mask/<s>" and "gt_heatmap/<s>" per structure.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edue/dgm.hpp"
#include "edue/error.hpp"
#include "edue/io/config.hpp"
#include "edue/io/container.hpp"
#include "edue/synth.hpp"

namespace edue::io {

inline constexpr const char* kDatasetFormat = "edue-dataset/1";

struct Dataset {
  RunConfig config;
  std::uint64_t seed = 0;
  std::vector<synth::RaterSample> train;
  std::vector<synth::RaterSample> test;

  // Evaluation set: the test split, or every image when none was generated.
  [[nodiscard]] std::vector<synth::RaterSample> eval_set() const {
    if (!test.empty()) return test;
    return train;
  }
  [[nodiscard]] std::vector<std::string> structure_names() const { return config.scene.structure_names(); }
};

inline std::vector<NamedTensor> sample_entries(const synth::RaterSample& s) {
  std::vector<NamedTensor> out{{"image", s.image}};
  for (const auto& st : s.structures) {
    out.push_back({"masks/" + st.name, st.masks});
    out.push_back({"true_mask/" + st.name, st.true_mask});
    if (st.masks.shape().c >= 2) out.push_back({"gt_heatmap/" + st.name, dgm::gt_heatmap(st.masks)});
  }
  return out;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  json images = json::array();
  auto emit = [&](const std::vector<synth::RaterSample>& split, const char* tag) {
    for (const auto& s : split) {
      const std::string file = s.id + ".edt";
      save_container(dir / file, sample_entries(s));
      json names = json::array();
      for (const auto& st : s.structures) names.push_back(st.name);
      images.push_back({{"id", s.id},
                        {"file", file},
                        {"split", tag},
                        {"delta_used", s.delta_used},
                        {"n_raters", s.n_raters()},
                        {"structures", names}});
    }
  };
  emit(ds.train, "train");
  emit(ds.test, "test");
  const json manifest{{"format", kDatasetFormat}, {"seed", ds.seed}, {"config", to_json(ds.config)}, {"images", images}};
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw IoError("no manifest.json in dataset directory '" + dir.string() + "'");
  json m;
  try {
    m = json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptFileError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  if (m.value("format", "") != kDatasetFormat)
    throw ValidationError("manifest.json format must be '" + std::string(kDatasetFormat) + "'");
  Dataset ds;
  ds.config = from_json(m.at("config"));
  ds.seed = m.at("seed").get<std::uint64_t>();
  for (const auto& img : m.at("images")) {
    synth::RaterSample s;
    s.id = img.at("id").get<std::string>();
    s.delta_used = img.at("delta_used").get<double>();
    const auto entries = load_container(dir / img.at("file").get<std::string>());
    s.image = find_entry(entries, "image");
    const Shape is = s.image.shape();
    if (is.h != ds.config.scene.height || is.w != ds.config.scene.width || is.c != ds.config.scene.channels)
      throw ValidationError("image " + s.id + " has shape " + is.str() + " inconsistent with the manifest scene");
    for (const auto& name : img.at("structures")) {
      const std::string n = name.get<std::string>();
      s.structures.push_back({n, find_entry(entries, "masks/" + n), find_entry(entries, "true_mask/" + n)});
    }
    const std::string split = img.at("split").get<std::string>();
    if (split == "train") ds.train.push_back(std::move(s));
    else if (split == "test") ds.test.push_back(std::move(s));
    else throw ValidationError("image split must be 'train' or 'test', got '" + split + "'");
  }
  if (ds.train.empty() && ds.test.empty()) throw ValidationError("dataset has no images");
  return ds;
}

// Generates n_train + n_test images from one stream; the first n_train are
// the training split.
inline Dataset generate(const RunConfig& cfg, std::size_t n_train, std::size_t n_test) {
  Dataset ds;
  ds.config = cfg;
  ds.seed = cfg.seed;
  auto all = synth::generate_dataset(cfg.scene, n_train + n_test, Rng(cfg.seed));
  ds.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
  return ds;
}

}  // namespace edue::io
