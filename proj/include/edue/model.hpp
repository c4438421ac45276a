#pragma once

// Multi-head U-shaped encoder/decoder. Every decoder level carries a 1x1
// segmentation head whose logits are nearest-upsampled to input resolution,
// so one trunk pass yields N_D full-resolution probability maps.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "edue/autodiff.hpp"
#include "edue/error.hpp"
#include "edue/optim.hpp"
#include "edue/rng.hpp"
#include "edue/tensor.hpp"

namespace edue {

enum class HeadLayout {
  decoder,     // one head per decoder level (EDUE, LE at desk scale)
  all_levels,  // encoder and decoder levels, encoder first (original LE layout)
  last_only,   // final decoder level only (deep-ensemble members, single-rater arm)
};

inline const char* to_string(HeadLayout h) {
  switch (h) {
    case HeadLayout::decoder: return "decoder";
    case HeadLayout::all_levels: return "all_levels";
    case HeadLayout::last_only: return "last_only";
  }
  return "?";
}

inline HeadLayout head_layout_from_string(const std::string& s) {
  if (s == "decoder") return HeadLayout::decoder;
  if (s == "all_levels") return HeadLayout::all_levels;
  if (s == "last_only") return HeadLayout::last_only;
  throw ValidationError("unknown head layout '" + s + "'");
}

struct ModelConfig {
  std::size_t n_e = 4;
  std::size_t n_d = 3;
  std::size_t in_channels = 1;
  std::size_t base_channels = 8;
  double channel_growth = 2.0;
  std::size_t input_h = 32;
  std::size_t input_w = 32;
  std::size_t head_hidden = 0;
  std::uint64_t seed = 0;
  HeadLayout head_layout = HeadLayout::decoder;

  void validate() const {
    if (n_e < 2) throw ValidationError("n_e must be at least 2");
    if (n_d + 1 != n_e)
      throw ValidationError("n_d must equal n_e - 1 (got n_e=" + std::to_string(n_e) +
                            ", n_d=" + std::to_string(n_d) + ")");
    if (in_channels == 0 || base_channels == 0) throw ValidationError("channel counts must be positive");
    if (!(channel_growth >= 1.0)) throw ValidationError("channel_growth must be >= 1");
    const std::size_t div = std::size_t{1} << n_e;
    if (input_h == 0 || input_w == 0 || input_h % div != 0 || input_w % div != 0)
      throw ValidationError("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                            " is not divisible by 2^n_e = " + std::to_string(div));
  }

  // Width of encoder level k, 1-based.
  [[nodiscard]] std::size_t channels(std::size_t level) const {
    return static_cast<std::size_t>(
        std::lround(static_cast<double>(base_channels) * std::pow(channel_growth, double(level - 1))));
  }

  [[nodiscard]] std::size_t head_count() const {
    switch (head_layout) {
      case HeadLayout::decoder: return n_d;
      case HeadLayout::all_levels: return n_e + n_d;
      case HeadLayout::last_only: return 1;
    }
    return 0;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Desk-scale default and the full-scale geometry (N_E = 6, N_D = 5, 256x256 RGB).
inline ModelConfig desk_model_config() { return ModelConfig{}; }
inline ModelConfig full_scale_model_config() {
  ModelConfig c;
  c.n_e = 6;
  c.n_d = 5;
  c.in_channels = 3;
  c.input_h = c.input_w = 256;
  return c;
}

template <class T>
struct HeadOutputs {
  std::vector<ad::Var<T>> logits;
  std::vector<ad::Var<T>> probs;
};

// Pixel-wise population variance across K stacked (b,1,h,w) maps -> (b,1,h,w).
template <class T>
ad::Var<T> stacked_variance(std::span<const ad::Var<T>> maps) {
  const Shape s = maps.front().shape();
  return ad::reshape(ad::variance_along_first_axis(ad::stack(maps)), s);
}

// trunk_passes counts images pushed through the trunk; decoder_runs counts
// executions of each decoder block (one per forward call). Copies carry the
// current counts.
struct ForwardCounters {
  std::atomic<std::size_t> trunk_passes{0};
  std::vector<std::atomic<std::size_t>> decoder_runs;

  explicit ForwardCounters(std::size_t n_decoder = 0) : decoder_runs(n_decoder) {}
  ForwardCounters(const ForwardCounters& o) : ForwardCounters(o.decoder_runs.size()) { *this = o; }
  ForwardCounters& operator=(const ForwardCounters& o) {
    if (this == &o) return *this;
    trunk_passes = o.trunk_passes.load();
    if (decoder_runs.size() != o.decoder_runs.size())
      decoder_runs = std::vector<std::atomic<std::size_t>>(o.decoder_runs.size());
    for (std::size_t i = 0; i < decoder_runs.size(); ++i) decoder_runs[i] = o.decoder_runs[i].load();
    return *this;
  }
  void reset() {
    trunk_passes = 0;
    for (auto& r : decoder_runs) r = 0;
  }
};

template <class T>
class UNet {
 public:
  static constexpr T kNormEpsilon = T(1e-5);

  explicit UNet(ModelConfig config) : config_(config) {
    config_.validate();
    build();
    Rng rng(config_.seed);
    for (auto& p : params_) {
      if (p.kind == ParamKind::weight) {
        const Shape s = p.tensor.shape();
        const double stddev = std::sqrt(2.0 / static_cast<double>(s.c * s.h * s.w));
        for (T& v : p.tensor.data()) v = static_cast<T>(rng.normal(0.0, stddev));
      } else if (p.kind == ParamKind::gain) {
        p.tensor.fill(T(1));
      }
    }
    counters_ = ForwardCounters(config_.n_d);
  }

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] std::size_t head_count() const { return heads_.size(); }

  [[nodiscard]] std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> out;
    for (auto& p : params_) out.push_back({p.name, &p.tensor});
    return out;
  }
  [[nodiscard]] std::vector<std::pair<std::string, const Tensor<T>*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (const auto& p : params_) out.emplace_back(p.name, &p.tensor);
    return out;
  }
  Tensor<T>& parameter(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.tensor;
    throw ValidationError("no parameter named '" + name + "'");
  }
  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  [[nodiscard]] std::size_t trunk_passes() const { return counters_.trunk_passes.load(); }
  [[nodiscard]] std::vector<std::size_t> decoder_runs() const {
    std::vector<std::size_t> out;
    for (const auto& r : counters_.decoder_runs) out.push_back(r.load());
    return out;
  }
  void reset_counters() { counters_.reset(); }

  HeadOutputs<T> forward(ad::Tape<T>& tape, ad::Var<T> x) {
    const Shape s = x.shape();
    if (s.c != config_.in_channels || s.h != config_.input_h || s.w != config_.input_w)
      throw ShapeError("forward: input " + s.str() + " does not match model input (n," +
                       std::to_string(config_.in_channels) + "," + std::to_string(config_.input_h) +
                       "," + std::to_string(config_.input_w) + ")");
    counters_.trunk_passes += s.n;

    std::vector<ad::Var<T>> enc;
    ad::Var<T> h = x;
    for (const auto& blk : encoder_) {
      h = ad::relu(norm(tape, blk.norm, conv(tape, blk.conv, h)));
      h = conv(tape, blk.down, h);
      enc.push_back(h);
    }
    std::vector<ad::Var<T>> dec;
    for (std::size_t j = 0; j < decoder_.size(); ++j) {
      const auto& blk = decoder_[j];
      h = ad::upsample_nearest(h, 2);
      h = ad::concat_channels(h, enc[config_.n_e - 2 - j]);
      h = ad::relu(norm(tape, blk.norm, conv(tape, blk.conv, h)));
      dec.push_back(h);
      ++counters_.decoder_runs[j];
    }

    HeadOutputs<T> out;
    for (const auto& head : heads_) {
      ad::Var<T> f = head.from_encoder ? enc[head.level] : dec[head.level];
      ad::Var<T> logit;
      if (head.hidden) {
        logit = conv(tape, head.out, ad::relu(conv(tape, head.hidden_conv, f)));
      } else {
        logit = conv(tape, head.out, f);
      }
      logit = ad::upsample_nearest(logit, head.factor);
      out.logits.push_back(logit);
      out.probs.push_back(ad::sigmoid(logit));
    }
    return out;
  }

 private:
  enum class ParamKind { weight, bias, gain, shift };
  struct Param {
    std::string name;
    ParamKind kind;
    Tensor<T> tensor;
  };
  struct ConvRef {
    std::size_t weight, bias, stride, pad;
  };
  struct NormRef {
    std::size_t gain, shift;
  };
  struct EncoderBlock {
    ConvRef conv;
    NormRef norm;
    ConvRef down;
  };
  struct DecoderBlock {
    ConvRef conv;
    NormRef norm;
  };
  struct Head {
    bool from_encoder;
    std::size_t level;  // 0-based index into encoder or decoder outputs
    std::size_t factor;
    bool hidden;
    ConvRef hidden_conv;
    ConvRef out;
  };

  std::size_t add_param(std::string name, ParamKind kind, Shape s) {
    params_.push_back(Param{std::move(name), kind, Tensor<T>(s, T(0), true)});
    return params_.size() - 1;
  }
  ConvRef add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                   std::size_t stride) {
    const std::size_t w = add_param(name + ".weight", ParamKind::weight, Shape{cout, cin, k, k});
    const std::size_t b = add_param(name + ".bias", ParamKind::bias, Shape{1, cout, 1, 1});
    return ConvRef{w, b, stride, k / 2};
  }
  NormRef add_norm(const std::string& name, std::size_t c) {
    return NormRef{add_param(name + ".gain", ParamKind::gain, Shape{1, c, 1, 1}),
                   add_param(name + ".shift", ParamKind::shift, Shape{1, c, 1, 1})};
  }
  Head add_head(const std::string& name, bool from_encoder, std::size_t level, std::size_t channels,
                std::size_t factor) {
    Head h{from_encoder, level, factor, config_.head_hidden > 0, {}, {}};
    if (h.hidden) {
      h.hidden_conv = add_conv(name + ".hidden", channels, config_.head_hidden, 1, 1);
      h.out = add_conv(name + ".out", config_.head_hidden, 1, 1, 1);
    } else {
      h.out = add_conv(name + ".out", channels, 1, 1, 1);
    }
    return h;
  }

  void build() {
    const std::size_t ne = config_.n_e;
    std::size_t cin = config_.in_channels;
    for (std::size_t k = 1; k <= ne; ++k) {
      const std::size_t c = config_.channels(k);
      const std::string name = "enc" + std::to_string(k);
      EncoderBlock blk;
      blk.conv = add_conv(name + ".conv", cin, c, 3, 1);
      blk.norm = add_norm(name + ".norm", c);
      blk.down = add_conv(name + ".down", c, c, 3, 2);
      encoder_.push_back(blk);
      cin = c;
    }
    std::size_t prev = config_.channels(ne);
    for (std::size_t j = 1; j <= config_.n_d; ++j) {
      const std::size_t skip = config_.channels(ne - j);
      const std::string name = "dec" + std::to_string(j);
      DecoderBlock blk;
      blk.conv = add_conv(name + ".conv", prev + skip, skip, 3, 1);
      blk.norm = add_norm(name + ".norm", skip);
      decoder_.push_back(blk);
      prev = skip;
    }
    auto dec_head = [&](std::size_t j) {
      heads_.push_back(add_head("head.dec" + std::to_string(j), false, j - 1,
                                config_.channels(ne - j), std::size_t{1} << (ne - j)));
    };
    switch (config_.head_layout) {
      case HeadLayout::all_levels:
        for (std::size_t k = 1; k <= ne; ++k)
          heads_.push_back(add_head("head.enc" + std::to_string(k), true, k - 1, config_.channels(k),
                                    std::size_t{1} << k));
        [[fallthrough]];
      case HeadLayout::decoder:
        for (std::size_t j = 1; j <= config_.n_d; ++j) dec_head(j);
        break;
      case HeadLayout::last_only:
        dec_head(config_.n_d);
        break;
    }
  }

  ad::Var<T> conv(ad::Tape<T>& tape, const ConvRef& c, ad::Var<T> x) {
    return ad::conv2d(x, tape.parameter(params_[c.weight].tensor),
                      tape.parameter(params_[c.bias].tensor), c.stride, c.pad);
  }
  ad::Var<T> norm(ad::Tape<T>& tape, const NormRef& n, ad::Var<T> x) {
    return ad::channel_norm(x, tape.parameter(params_[n.gain].tensor),
                            tape.parameter(params_[n.shift].tensor), kNormEpsilon);
  }

  ModelConfig config_;
  std::vector<Param> params_;
  std::vector<EncoderBlock> encoder_;
  std::vector<DecoderBlock> decoder_;
  std::vector<Head> heads_;
  ForwardCounters counters_;
};

using Model = UNet<float>;

struct PredictOptions {
  // Leading heads excluded from both the heatmap and the final mask.
  std::size_t skip_heads = 0;
};

template <class T>
struct Prediction {
  std::vector<Tensor<T>> head_probs;  // maps that entered the aggregate, each (b,1,h,w)
  Tensor<T> final_mask;               // mean of head_probs
  Tensor<T> heatmap;                  // population variance of head_probs; zero for one map
  std::vector<double> sv;             // per-image sum of heatmap
};

// Aggregate a set of probability maps into mean mask, variance heatmap and SV.
template <class T>
Prediction<T> aggregate_maps(std::vector<Tensor<T>> maps) {
  if (maps.empty()) throw ValidationError("aggregate_maps: no probability maps");
  const Shape s = maps.front().shape();
  Prediction<T> out;
  out.final_mask = Tensor<T>(s);
  out.heatmap = Tensor<T>(s);
  const T inv_k = T(1) / static_cast<T>(maps.size());
  for (const auto& m : maps) {
    require_same_shape(m.shape(), s, "aggregate_maps");
    for (std::size_t i = 0; i < m.numel(); ++i) out.final_mask[i] += m[i] * inv_k;
  }
  if (maps.size() >= 2) {
    for (const auto& m : maps)
      for (std::size_t i = 0; i < m.numel(); ++i) {
        const T d = m[i] - out.final_mask[i];
        out.heatmap[i] += d * d * inv_k;
      }
  }
  out.sv.assign(s.n, 0.0);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < s.c * s.plane(); ++i)
      out.sv[n] += static_cast<double>(out.heatmap[n * s.c * s.plane() + i]);
  out.head_probs = std::move(maps);
  return out;
}

// One trunk pass; final mask is the mean over heads and the heatmap their
// population variance.
template <class T>
Prediction<T> predict(UNet<T>& model, const Tensor<T>& x, PredictOptions opts = {}) {
  if (opts.skip_heads >= model.head_count())
    throw ValidationError("predict: skip_heads=" + std::to_string(opts.skip_heads) +
                          " leaves no head out of " + std::to_string(model.head_count()));
  ad::Tape<T> tape(false);
  auto heads = model.forward(tape, tape.constant(x));
  std::vector<Tensor<T>> maps;
  for (std::size_t i = opts.skip_heads; i < heads.probs.size(); ++i)
    maps.push_back(tape.tensor(heads.probs[i]));
  return aggregate_maps(std::move(maps));
}

}  // namespace edue
