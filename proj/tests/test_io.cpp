#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <limits>

#include "edue/io/checkpoint.hpp"
#include "edue/io/config.hpp"
#include "edue/io/container.hpp"
#include "edue/io/dataset.hpp"
#include "edue/io/report.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
namespace io = edue::io;
using edue::Shape;
using edue::Tensor;

namespace {

fs::path scratch(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path p = fs::temp_directory_path() / ("edue_io_" + std::string(info->name()) + "_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::uint8_t> float_bytes(const Tensor<float>& t) {
  std::vector<std::uint8_t> b(t.numel() * 4);
  std::memcpy(b.data(), t.data().data(), b.size());
  return b;
}

std::vector<io::NamedTensor> random_entries(oracle::Gen& g) {
  std::vector<io::NamedTensor> out;
  const std::size_t k = 1 + g.index(4);
  for (std::size_t i = 0; i < k; ++i) {
    const Shape s{1 + g.index(2), 1 + g.index(3), 1 + g.index(5), 1 + g.index(5)};
    out.push_back({"t" + std::to_string(i) + "/é", g.tensor<float>(s, -1e6, 1e6)});
  }
  return out;
}

io::RunConfig tiny_config() {
  io::RunConfig c;
  c.scene.height = c.scene.width = 16;
  c.model.input_h = c.model.input_w = 16;
  c.model.n_e = 3;
  c.model.n_d = 2;
  c.model.base_channels = 4;
  return c;
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    if (value) ::setenv(name, value, 1);
    else ::unsetenv(name);
  }
  ~ScopedEnv() {
    if (old_) ::setenv(name_, old_->c_str(), 1);
    else ::unsetenv(name_);
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

}  // namespace

TEST(Container, Crc32KnownVector) {
  const std::string s = "123456789";
  EXPECT_EQ(io::crc32_of(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), 0xCBF43926u);
}

TEST(Container, EmptyContainerIsTwelveBytes) {
  const auto b = io::encode_container({});
  ASSERT_EQ(b.size(), 12u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "EDT1");
  EXPECT_EQ(b[4] | b[5] | b[6] | b[7], 0);
  EXPECT_TRUE(io::decode_container(b).empty());
}

TEST(Container, LayoutIsLittleEndian) {
  const auto b = io::encode_container({{"x", Tensor<float>(Shape{1, 1, 1, 1}, 1.0f)}});
  // magic 4 + count 4 + name_len 4 + name 1 + rank 4 + extents 16
  ASSERT_EQ(b.size(), 33u + 4u + 4u);
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 1);
  EXPECT_EQ(b[12], 'x');
  EXPECT_EQ(b[13], 4);
  const std::vector<std::uint8_t> one(b.begin() + 33, b.begin() + 37);
  EXPECT_EQ(one, (std::vector<std::uint8_t>{0x00, 0x00, 0x80, 0x3F}));
}

TEST(Container, RoundTripIsBitwise) {
  oracle::Gen g(1);
  for (int trial = 0; trial < 50; ++trial) {
    auto entries = random_entries(g);
    entries[0].tensor[0] = -0.0f;
    entries[0].tensor[entries[0].tensor.numel() - 1] = std::numeric_limits<float>::denorm_min();
    const auto bytes = io::encode_container(entries);
    const auto back = io::decode_container(bytes);
    ASSERT_EQ(back.size(), entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      EXPECT_EQ(back[i].name, entries[i].name);
      EXPECT_EQ(back[i].tensor.shape(), entries[i].tensor.shape());
      EXPECT_EQ(float_bytes(back[i].tensor), float_bytes(entries[i].tensor));
    }
    EXPECT_EQ(io::encode_container(back), bytes);
  }
}

TEST(Container, EveryTruncationIsDetected) {
  oracle::Gen g(2);
  const auto bytes = io::encode_container(random_entries(g));
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
    EXPECT_THROW(io::decode_container(cut), edue::CorruptFileError) << len;
  }
}

TEST(Container, EverySingleByteCorruptionIsDetected) {
  oracle::Gen g(3);
  const auto bytes = io::encode_container(random_entries(g));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= static_cast<std::uint8_t>(1 + g.index(255));
    EXPECT_THROW(io::decode_container(bad), edue::CorruptFileError) << i;
  }
}

TEST(Container, BadMagicAndDuplicateNames) {
  auto b = io::encode_container({});
  b[0] = 'X';
  try {
    io::decode_container(b);
    FAIL() << "expected CorruptFileError";
  } catch (const edue::CorruptFileError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  const Tensor<float> t(Shape{1, 1, 1, 1});
  EXPECT_THROW(io::encode_container({{"a", t}, {"a", t}}), edue::ValidationError);
}

TEST(Container, FileRoundTripAndMissingFile) {
  const auto dir = scratch("c");
  oracle::Gen g(4);
  const auto entries = random_entries(g);
  io::save_container(dir / "x.edt", entries);
  EXPECT_FALSE(fs::exists(dir / "x.edt.tmp"));
  const auto back = io::load_container(dir / "x.edt");
  EXPECT_EQ(float_bytes(io::find_entry(back, entries[0].name)), float_bytes(entries[0].tensor));
  EXPECT_THROW(io::find_entry(back, "nope"), edue::ValidationError);
  EXPECT_THROW(io::load_container(dir / "missing.edt"), edue::IoError);
  fs::remove_all(dir);
}

TEST(Config, EmptyDocumentIsDeskPreset) {
  const auto c = io::parse_config("{}");
  const auto d = io::preset("desk");
  EXPECT_EQ(io::to_json(c), io::to_json(d));
  EXPECT_EQ(c.epochs, 30u);
  EXPECT_EQ(c.scene.n_raters, 4u);
  EXPECT_EQ(c.model.n_e, 4u);
}

TEST(Config, RoundTripsThroughJson) {
  for (const auto& name : io::preset_names()) {
    const auto c = io::preset(name);
    const auto back = io::from_json(io::to_json(c));
    EXPECT_EQ(io::to_json(back), io::to_json(c)) << name;
  }
}

TEST(Config, FullScalePresets) {
  const auto r = io::preset("riga-like");
  EXPECT_EQ(r.model.n_e, 6u);
  EXPECT_EQ(r.scene.n_raters, 6u);
  EXPECT_EQ(r.scene.channels, 3u);
  EXPECT_EQ(r.epochs, 200u);
  EXPECT_EQ(r.batch_size, 16u);
  EXPECT_DOUBLE_EQ(r.loss.beta, 5.0);
  EXPECT_DOUBLE_EQ(r.qc_threshold("disc"), 0.97);
  EXPECT_DOUBLE_EQ(r.qc_threshold("cup"), 0.85);
  const auto h = io::preset("hecktor-like");
  EXPECT_EQ(h.scene.n_raters, 3u);
  EXPECT_EQ(h.epochs, 120u);
  EXPECT_EQ(h.batch_size, 32u);
  EXPECT_DOUBLE_EQ(h.loss.beta, 2.5);
  EXPECT_THROW(io::preset("imagenet"), edue::ValidationError);
}

TEST(Config, PartialSectionsMergeOverPreset) {
  const auto c = io::parse_config(R"({"schedule": {"epochs": 5}, "loss": {"beta": 2}})");
  EXPECT_EQ(c.epochs, 5u);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_DOUBLE_EQ(c.loss.beta, 2.0);
  EXPECT_DOUBLE_EQ(c.loss.alpha, 1.0);
}

TEST(Config, RejectsUnknownKeysWrongTypesAndBadJson) {
  EXPECT_THROW(io::parse_config(R"({"epochs": 5})"), edue::ValidationError);
  EXPECT_THROW(io::parse_config(R"({"schedule": {"epoch": 5}})"), edue::ValidationError);
  EXPECT_THROW(io::parse_config(R"({"schedule": {"epochs": "five"}})"), edue::ValidationError);
  EXPECT_THROW(io::parse_config(R"({"schedule": )"), edue::ValidationError);
  EXPECT_THROW(io::parse_config(R"({"scene": {"n_raters": 1}})"), edue::ValidationError);
  EXPECT_THROW(io::parse_config(R"({"ood": {"kind": "sepia"}})"), edue::ValidationError);
  EXPECT_NO_THROW(io::parse_config(R"({"qc": {"dice_thresholds": {"blob": 0.8}}})"));
}

TEST(Config, QcThresholdFallsBackToDefault) {
  const auto c = io::parse_config(R"({"qc": {"dice_thresholds": {"blob": 0.8}}})");
  EXPECT_DOUBLE_EQ(c.qc_threshold("blob"), 0.8);
  EXPECT_DOUBLE_EQ(c.qc_threshold("other"), 0.65);
}

TEST(Config, SeedPrecedenceFlagThenEnvThenConfig) {
  {
    ScopedEnv env("EDUE_SEED", nullptr);
    EXPECT_EQ(io::resolve_seed(std::nullopt, 7), 7u);
  }
  {
    ScopedEnv env("EDUE_SEED", "11");
    EXPECT_EQ(io::resolve_seed(std::nullopt, 7), 11u);
    EXPECT_EQ(io::resolve_seed(3, 7), 3u);
  }
  ScopedEnv env("EDUE_SEED", "x1");
  EXPECT_THROW(io::resolve_seed(std::nullopt, 7), edue::ValidationError);
}

TEST(Dataset, SaveLoadIsBitwise) {
  const auto dir = scratch("d");
  const auto ds = io::generate(tiny_config(), 4, 2);
  io::save_dataset(dir, ds);
  const auto back = io::load_dataset(dir);
  ASSERT_EQ(back.train.size(), 4u);
  ASSERT_EQ(back.test.size(), 2u);
  EXPECT_EQ(io::to_json(back.config), io::to_json(ds.config));
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(back.train[k].id, ds.train[k].id);
    EXPECT_EQ(back.train[k].delta_used, ds.train[k].delta_used);
    EXPECT_EQ(float_bytes(back.train[k].image), float_bytes(ds.train[k].image));
    EXPECT_EQ(float_bytes(back.train[k].structures[0].masks), float_bytes(ds.train[k].structures[0].masks));
  }
  const auto entries = io::load_container(dir / "img_00000.edt");
  EXPECT_EQ(float_bytes(io::find_entry(entries, "gt_heatmap/blob")),
            float_bytes(edue::dgm::gt_heatmap(ds.train[0].structures[0].masks)));
  fs::remove_all(dir);
}

TEST(Dataset, EvalSetFallsBackToTrain) {
  auto ds = io::generate(tiny_config(), 3, 0);
  EXPECT_EQ(ds.eval_set().size(), 3u);
  ds = io::generate(tiny_config(), 3, 2);
  EXPECT_EQ(ds.eval_set().front().id, "img_00003");
}

TEST(Dataset, RejectsWrongFormatAndMissingManifest) {
  const auto dir = scratch("d");
  EXPECT_THROW(io::load_dataset(dir), edue::IoError);
  io::save_dataset(dir, io::generate(tiny_config(), 2, 0));
  auto text = io::read_text(dir / "manifest.json");
  text.replace(text.find("edue-dataset/1"), 14, "edue-dataset/9");
  io::write_text_atomic(dir / "manifest.json", text);
  EXPECT_THROW(io::load_dataset(dir), edue::ValidationError);
  fs::remove_all(dir);
}

TEST(Checkpoint, SaveLoadReproducesPredictions) {
  const auto dir = scratch("m");
  const auto cfg = tiny_config();
  io::Checkpoint ck;
  ck.config = cfg;
  ck.structure = "blob";
  ck.seed = 5;
  ck.arm.method = edue::harness::Method::de;
  for (std::uint64_t s = 0; s < 2; ++s) {
    auto mc = cfg.model;
    mc.head_layout = edue::HeadLayout::last_only;
    mc.seed = s + 1;
    ck.arm.models.emplace_back(mc);
  }
  io::save_checkpoint(dir, ck);
  auto back = io::load_checkpoint(dir);
  EXPECT_EQ(back.arm.method, edue::harness::Method::de);
  ASSERT_EQ(back.arm.models.size(), 2u);
  oracle::Gen g(6);
  const auto x = g.tensor<float>(Shape{1, 1, 16, 16}, 0.0, 1.0);
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_EQ(edue::predict(back.arm.models[k], x).final_mask.vec(),
              edue::predict(ck.arm.models[k], x).final_mask.vec());
  fs::remove_all(dir);
}

TEST(Checkpoint, LoadWeightsChecksShapes) {
  auto mc = tiny_config().model;
  edue::Model m(mc);
  auto entries = io::model_entries(m);
  entries[0].tensor = Tensor<float>(Shape{1, 1, 1, 1});
  EXPECT_THROW(io::load_weights(m, entries), edue::ValidationError);
  entries.pop_back();
  EXPECT_THROW(io::load_weights(m, entries), edue::ValidationError);
}

TEST(Report, FmtRoundTripsDoubles) {
  oracle::Gen g(7);
  for (int i = 0; i < 500; ++i) {
    const double v = g.normal() * std::pow(10.0, g.uniform(-30, 30));
    EXPECT_EQ(std::strtod(io::fmt(v).c_str(), nullptr), v);
  }
  EXPECT_EQ(io::fmt(0.1), "0.1");
  EXPECT_EQ(io::fmt(std::nan("")), "nan");
}

TEST(Report, QcCsvHasOneRowPerQuantile) {
  const std::vector<double> dice{0.9, 0.2, 0.8, 0.1, 0.7}, sv{1, 5, 2, 4, 3};
  const auto c = edue::harness::quality_control(dice, sv, 0.5);
  const auto csv = io::qc_csv(c);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 22);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "quantile,remaining_fraction,ideal_fraction");
}
