#pragma once

// Procedural multi-rater segmentation data. Each image holds a smooth blob
// (or a nested disc/cup pair); raters trace the latent boundary with a
// per-rater offset and a smooth angular wobble of scale delta. The image edge
// is blurred in proportion to delta, so ambiguous images look ambiguous.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "edue/error.hpp"
#include "edue/metrics.hpp"
#include "edue/rng.hpp"
#include "edue/tensor.hpp"

namespace edue::synth {

enum class Structure { single_blob, nested };

inline const char* to_string(Structure s) { return s == Structure::nested ? "nested" : "single_blob"; }
inline Structure structure_from_string(const std::string& s) {
  if (s == "single_blob") return Structure::single_blob;
  if (s == "nested") return Structure::nested;
  throw ValidationError("unknown structure '" + s + "'");
}

struct SceneParams {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  std::size_t n_raters = 4;
  double delta_low = 0.5;   // boundary disagreement scale of easy images, pixels
  double delta_high = 3.0;  // of ambiguous images
  double ambiguity_mix = 0.5;  // probability an image uses delta_high
  double texture_noise = 0.05;
  Structure structure = Structure::single_blob;

  void validate() const {
    if (height < 8 || width < 8) throw ValidationError("image size must be at least 8x8");
    if (channels == 0 || channels > 4) throw ValidationError("channels must be in [1, 4]");
    if (n_raters < 2 || n_raters > 16) throw ValidationError("n_raters must be in [2, 16]");
    const double limit = static_cast<double>(std::min(height, width)) / 4.0;
    for (double d : {delta_low, delta_high})
      if (!(d >= 0.0) || !(d < limit))
        throw ValidationError("disagreement must lie in [0, " + std::to_string(limit) + ")");
    if (!(ambiguity_mix >= 0.0 && ambiguity_mix <= 1.0))
      throw ValidationError("ambiguity_mix must lie in [0, 1]");
    if (!(texture_noise >= 0.0)) throw ValidationError("texture_noise must be non-negative");
  }

  [[nodiscard]] std::vector<std::string> structure_names() const {
    if (structure == Structure::nested) return {"disc", "cup"};
    return {"blob"};
  }
};

struct StructureLabels {
  std::string name;
  Tensor<float> masks;      // (1, Y, H, W), binary
  Tensor<float> true_mask;  // (1, 1, H, W), latent boundary; diagnostics only
};

struct RaterSample {
  std::string id;
  Tensor<float> image;  // (1, C, H, W) in [0, 1]
  std::vector<StructureLabels> structures;
  double delta_used = 0.0;

  [[nodiscard]] const StructureLabels& structure(const std::string& name) const {
    for (const auto& s : structures)
      if (s.name == name) return s;
    throw ValidationError("sample " + id + " has no structure '" + name + "'");
  }
  [[nodiscard]] std::size_t n_raters() const {
    return structures.empty() ? 0 : structures.front().masks.shape().c;
  }
};

// Star-shaped latent boundary: r(theta) = r0 * (1 + sum_k a_k cos(k theta + phi_k)).
struct BlobShape {
  double cx = 0.0, cy = 0.0, r0 = 1.0;
  std::vector<double> amp, phase;  // harmonics 2, 3, 4

  [[nodiscard]] double radius(double theta) const {
    double r = 1.0;
    for (std::size_t k = 0; k < amp.size(); ++k) r += amp[k] * std::cos(double(k + 2) * theta + phase[k]);
    return r0 * r;
  }
  // Radial signed distance; negative inside.
  [[nodiscard]] double signed_distance(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    return std::hypot(dx, dy) - radius(std::atan2(dy, dx));
  }
};

// A rater's deviation from the latent boundary: a constant offset plus a
// band-limited angular field whose standard deviation over theta is `delta`.
struct RaterPerturbation {
  double bias = 0.0;
  double amp = 0.0;
  double phase[3] = {0.0, 0.0, 0.0};

  static RaterPerturbation draw(double delta, Rng& rng) {
    RaterPerturbation p;
    p.bias = rng.normal(0.0, delta / 2.0);
    // Three unit harmonics of equal amplitude a: variance over theta is 3a^2/2.
    p.amp = delta * std::sqrt(2.0 / 3.0);
    for (double& ph : p.phase) ph = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return p;
  }
  [[nodiscard]] double at(double theta) const {
    double v = bias;
    for (int k = 0; k < 3; ++k) v += amp * std::cos(double(k + 1) * theta + phase[k]);
    return v;
  }
};

namespace detail {

inline BlobShape draw_blob(double cx, double cy, double r0, Rng& rng) {
  BlobShape b{cx, cy, r0, {}, {}};
  for (int k = 0; k < 3; ++k) {
    b.amp.push_back(rng.uniform(0.0, 0.08));
    b.phase.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
  }
  return b;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Rater masks and latent mask for one structure. Pixel centres sit at +0.5.
inline StructureLabels render_structure(const std::string& name, const BlobShape& blob, double delta,
                                        std::size_t n_raters, std::size_t h, std::size_t w, Rng& rng) {
  StructureLabels out{name, Tensor<float>(Shape{1, n_raters, h, w}), Tensor<float>(Shape{1, 1, h, w})};
  std::vector<RaterPerturbation> raters;
  for (std::size_t j = 0; j < n_raters; ++j)
    raters.push_back(delta > 0.0 ? RaterPerturbation::draw(delta, rng) : RaterPerturbation{});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      const double sd = blob.signed_distance(px, py);
      const double theta = std::atan2(py - blob.cy, px - blob.cx);
      out.true_mask.at(0, 0, y, x) = sd < 0.0 ? 1.0f : 0.0f;
      for (std::size_t j = 0; j < n_raters; ++j)
        out.masks.at(0, j, y, x) = (sd + raters[j].at(theta) < 0.0) ? 1.0f : 0.0f;
    }
  return out;
}

inline std::size_t foreground_area(const Tensor<float>& masks, std::size_t j) {
  const std::size_t hw = masks.shape().plane();
  std::size_t a = 0;
  for (std::size_t i = 0; i < hw; ++i) a += masks[j * hw + i] > 0.5f;
  return a;
}

}  // namespace detail

inline constexpr std::size_t kMinBlobArea = 9;

// Edge softness (pixels) of the rendered intensity boundary.
inline double edge_softness(double delta) { return 0.3 + 0.6 * delta; }

// Render one sample at a fixed disagreement level.
inline RaterSample render_sample(const SceneParams& params, double delta, Rng& rng) {
  params.validate();
  const std::size_t h = params.height, w = params.width, Y = params.n_raters;
  const double side = static_cast<double>(std::min(h, w));
  for (int attempt = 0; attempt < 10; ++attempt) {
    RaterSample s;
    s.delta_used = delta;
    const double cx = rng.uniform(0.38, 0.62) * static_cast<double>(w);
    const double cy = rng.uniform(0.38, 0.62) * static_cast<double>(h);
    const double r0 = rng.uniform(0.18, 0.30) * side;
    std::vector<BlobShape> blobs{detail::draw_blob(cx, cy, r0, rng)};
    if (params.structure == Structure::nested)
      blobs.push_back(detail::draw_blob(cx + rng.uniform(-0.05, 0.05) * r0,
                                        cy + rng.uniform(-0.05, 0.05) * r0,
                                        r0 * rng.uniform(0.45, 0.6), rng));
    const auto names = params.structure_names();
    bool ok = true;
    for (std::size_t k = 0; k < blobs.size(); ++k) {
      s.structures.push_back(detail::render_structure(names[k], blobs[k], delta, Y, h, w, rng));
      for (std::size_t j = 0; j < Y && ok; ++j)
        ok = detail::foreground_area(s.structures.back().masks, j) >= kMinBlobArea;
      ok = ok && detail::foreground_area(s.structures.back().true_mask, 0) >= kMinBlobArea;
    }
    if (!ok) continue;

    // Intensities: background, outer structure, inner structure; per-channel tint.
    const double levels[3] = {0.2, 0.65, 0.9};
    const double soft = edge_softness(delta);
    s.image = Tensor<float>(Shape{1, params.channels, h, w});
    std::vector<double> tint(params.channels);
    for (std::size_t c = 0; c < params.channels; ++c) tint[c] = 1.0 - 0.15 * double(c);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double px = double(x) + 0.5, py = double(y) + 0.5;
        double v = levels[0];
        double prev = levels[0];
        for (std::size_t k = 0; k < blobs.size(); ++k) {
          const double inside = detail::logistic(-blobs[k].signed_distance(px, py) / soft);
          v += (levels[k + 1] - prev) * inside;
          prev = levels[k + 1];
        }
        for (std::size_t c = 0; c < params.channels; ++c) {
          const double noisy = v * tint[c] + rng.normal(0.0, params.texture_noise);
          s.image.at(0, c, y, x) = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
        }
      }
    return s;
  }
  throw ValidationError("generate_sample: degenerate blob after 10 attempts");
}

// Draws the image's disagreement level from the two-level mixture, then renders.
inline RaterSample generate_sample(const SceneParams& params, Rng& rng) {
  const double delta = rng.bernoulli(params.ambiguity_mix) ? params.delta_high : params.delta_low;
  return render_sample(params, delta, rng);
}

inline std::string sample_id(std::size_t k) {
  std::string s = std::to_string(k);
  return "img_" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

// Each sample uses its own split stream, so sample k is independent of n.
inline std::vector<RaterSample> generate_dataset(const SceneParams& params, std::size_t n_images,
                                                 const Rng& rng) {
  if (n_images == 0) throw ValidationError("generate_dataset: n_images must be positive");
  params.validate();
  std::vector<RaterSample> out;
  out.reserve(n_images);
  for (std::size_t k = 0; k < n_images; ++k) {
    Rng sample_rng = rng.split(k);
    out.push_back(generate_sample(params, sample_rng));
    out.back().id = sample_id(k);
  }
  return out;
}

enum class Distortion { gauss_noise, blur, intensity_shift, channel_shift };

inline const char* to_string(Distortion d) {
  switch (d) {
    case Distortion::gauss_noise: return "gauss_noise";
    case Distortion::blur: return "blur";
    case Distortion::intensity_shift: return "intensity_shift";
    case Distortion::channel_shift: return "channel_shift";
  }
  return "?";
}
inline Distortion distortion_from_string(const std::string& s) {
  if (s == "gauss_noise") return Distortion::gauss_noise;
  if (s == "blur") return Distortion::blur;
  if (s == "intensity_shift") return Distortion::intensity_shift;
  if (s == "channel_shift") return Distortion::channel_shift;
  throw ValidationError("unknown distortion kind '" + s + "'");
}

// Additive N(0, sigma^2) noise; `clip` keeps the result in [0, 1].
inline Tensor<float> add_gaussian_noise(const Tensor<float>& image, double sigma, Rng& rng, bool clip = true) {
  Tensor<float> out = image;
  for (float& v : out.data()) {
    const double n = static_cast<double>(v) + rng.normal(0.0, sigma);
    v = static_cast<float>(clip ? std::clamp(n, 0.0, 1.0) : n);
  }
  return out;
}

// Separable box blur with edge replication. Radius 0 is the identity.
inline Tensor<float> box_blur(const Tensor<float>& image, std::size_t radius) {
  if (radius == 0) return image;
  const Shape s = image.shape();
  const double norm = 1.0 / static_cast<double>(2 * radius + 1);
  auto clampi = [](long v, std::size_t hi) { return static_cast<std::size_t>(std::clamp(v, 0L, long(hi) - 1)); };
  Tensor<float> tmp(s), out(s);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const float* src = image.data().data() + p * s.plane();
    float* mid = tmp.data().data() + p * s.plane();
    float* dst = out.data().data() + p * s.plane();
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        double acc = 0.0;
        for (long d = -long(radius); d <= long(radius); ++d) acc += src[y * s.w + clampi(long(x) + d, s.w)];
        mid[y * s.w + x] = static_cast<float>(acc * norm);
      }
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        double acc = 0.0;
        for (long d = -long(radius); d <= long(radius); ++d) acc += mid[clampi(long(y) + d, s.h) * s.w + x];
        dst[y * s.w + x] = static_cast<float>(acc * norm);
      }
  }
  return out;
}

// Out-of-distribution corruptions. intensity_shift stands in for a value
// change; channel_shift mixes each channel with the next (hue analogue) and,
// for single-channel images, pulls contrast toward mid-grey (saturation analogue).
inline Tensor<float> distort(const Tensor<float>& image, Distortion kind, double level, Rng& rng) {
  if (!(level >= 0.0)) throw ValidationError("distortion level must be non-negative");
  if (level == 0.0) return image;
  switch (kind) {
    case Distortion::gauss_noise: return add_gaussian_noise(image, level, rng, true);
    case Distortion::blur: return box_blur(image, static_cast<std::size_t>(std::lround(level)));
    case Distortion::intensity_shift: {
      Tensor<float> out = image;
      for (float& v : out.data()) v = static_cast<float>(std::clamp(double(v) + level, 0.0, 1.0));
      return out;
    }
    case Distortion::channel_shift: {
      const Shape s = image.shape();
      const double mix = std::min(level, 1.0);
      Tensor<float> out(s);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t i = 0; i < s.plane(); ++i) {
            const double v = image[(n * s.c + c) * s.plane() + i];
            double r;
            if (s.c == 1) {
              r = 0.5 + (v - 0.5) * (1.0 - mix);
            } else {
              const double next = image[(n * s.c + (c + 1) % s.c) * s.plane() + i];
              r = (1.0 - mix) * v + mix * next;
            }
            out[(n * s.c + c) * s.plane() + i] = static_cast<float>(std::clamp(r, 0.0, 1.0));
          }
      return out;
    }
  }
  throw ValidationError("unknown distortion kind");
}

struct RaterAgreement {
  double mean_pairwise_dice = 1.0;
  std::vector<std::vector<double>> per_pair;  // Y x Y, unit diagonal
};

// Dice over all unordered rater pairs; two empty masks count as Dice 1.
inline RaterAgreement rater_agreement(const Tensor<float>& masks) {
  const Shape s = masks.shape();
  if (s.n != 1 || s.c < 2) throw ValidationError("rater_agreement: need (1,Y,H,W) with Y >= 2, got " + s.str());
  const std::size_t Y = s.c, hw = s.plane();
  RaterAgreement out;
  out.per_pair.assign(Y, std::vector<double>(Y, 1.0));
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < Y; ++a)
    for (std::size_t b = a + 1; b < Y; ++b) {
      const std::span<const float> ma = masks.data().subspan(a * hw, hw);
      const std::span<const float> mb = masks.data().subspan(b * hw, hw);
      const double d = metrics::binary_dice(ma, mb);
      out.per_pair[a][b] = out.per_pair[b][a] = d;
      acc += d;
      ++pairs;
    }
  out.mean_pairwise_dice = acc / static_cast<double>(pairs);
  return out;
}

}  // namespace edue::synth
