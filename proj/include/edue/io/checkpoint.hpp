#pragma once

// Checkpoint directory: config.json, member_<k>.edt weights, loss.csv.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edue/error.hpp"
#include "edue/harness.hpp"
#include "edue/io/config.hpp"
#include "edue/io/container.hpp"
#include "edue/io/report.hpp"
#include "edue/model.hpp"

namespace edue::io {

inline constexpr const char* kCheckpointFormat = "edue-checkpoint/1";

struct Checkpoint {
  RunConfig config;
  std::string structure;
  std::uint64_t seed = 0;
  harness::TrainedArm arm;
};

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  try {
    m.n_e = j.at("n_e").get<std::size_t>();
    m.n_d = j.at("n_d").get<std::size_t>();
    m.in_channels = j.at("in_channels").get<std::size_t>();
    m.base_channels = j.at("base_channels").get<std::size_t>();
    m.channel_growth = j.at("channel_growth").get<double>();
    const auto in = j.at("input_size").get<std::vector<std::size_t>>();
    if (in.size() != 2) throw ValidationError("model_config.input_size must be [H, W]");
    m.input_h = in[0];
    m.input_w = in[1];
    m.head_hidden = j.at("head_hidden").get<std::size_t>();
    m.head_layout = head_layout_from_string(j.at("head_layout").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model_config: ") + e.what());
  }
  m.validate();
  return m;
}

inline std::vector<NamedTensor> model_entries(const Model& model) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : model.named_tensors()) out.push_back({name, Tensor<float>(t->shape(), t->vec())});
  return out;
}

inline void load_weights(Model& model, const std::vector<NamedTensor>& entries) {
  const auto names = model.named_tensors();
  if (entries.size() != names.size())
    throw ValidationError("weight file has " + std::to_string(entries.size()) + " tensors, model expects " +
                          std::to_string(names.size()));
  for (const auto& [name, ref] : names) {
    const Tensor<float>& src = find_entry(entries, name);
    if (src.shape() != ref->shape())
      throw ValidationError("weight '" + name + "' has shape " + src.shape().str() + ", expected " +
                            ref->shape().str());
    auto dst = model.parameter(name).data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  json members = json::array();
  for (std::size_t k = 0; k < ck.arm.models.size(); ++k) {
    const std::string file = "member_" + std::to_string(k) + ".edt";
    save_container(dir / file, model_entries(ck.arm.models[k]));
    members.push_back({{"file", file}, {"model_config", to_json(ck.arm.models[k].config())}});
  }
  const json doc{{"format", kCheckpointFormat},
                 {"method", harness::to_string(ck.arm.method)},
                 {"structure", ck.structure},
                 {"seed", ck.seed},
                 {"skip_heads", ck.arm.predict_options.skip_heads},
                 {"members", members},
                 {"run_config", to_json(ck.config)}};
  write_text_atomic(dir / "config.json", doc.dump(2) + "\n");
  write_text_atomic(dir / "loss.csv", loss_trace_csv(ck.arm.traces));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto cfg_path = dir / "config.json";
  if (!std::filesystem::exists(cfg_path)) throw IoError("no config.json in checkpoint directory '" + dir.string() + "'");
  json doc;
  try {
    doc = json::parse(read_text(cfg_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptFileError("checkpoint config.json is not valid JSON: " + std::string(e.what()));
  }
  if (doc.value("format", "") != kCheckpointFormat)
    throw ValidationError("checkpoint format must be '" + std::string(kCheckpointFormat) + "'");
  Checkpoint ck;
  ck.config = from_json(doc.at("run_config"));
  ck.structure = doc.at("structure").get<std::string>();
  ck.seed = doc.at("seed").get<std::uint64_t>();
  ck.arm.method = harness::method_from_string(doc.at("method").get<std::string>());
  ck.arm.predict_options.skip_heads = doc.at("skip_heads").get<std::size_t>();
  for (const auto& m : doc.at("members")) {
    Model model(model_config_from_json(m.at("model_config")));
    load_weights(model, load_container(dir / m.at("file").get<std::string>()));
    ck.arm.models.push_back(std::move(model));
  }
  if (ck.arm.models.empty()) throw ValidationError("checkpoint has no model members");
  if (ck.arm.method != harness::Method::de && ck.arm.models.size() != 1)
    throw ValidationError("only the deep ensemble checkpoint may hold several members");
  return ck;
}

}  // namespace edue::io
