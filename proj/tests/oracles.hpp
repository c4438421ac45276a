#pragma once

// Reference implementations that share no code with the library, plus small
// hand-rolled generators for property tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "edue/autodiff.hpp"
#include "edue/tensor.hpp"

namespace oracle {

// --- generators --------------------------------------------------------------

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(eng_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_); }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }

  std::vector<double> vec(std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }
  // Values drawn from a small pool so ties are common.
  std::vector<double> tied_vec(std::size_t n, std::size_t pool) {
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(index(pool));
    return v;
  }
  template <class T>
  edue::Tensor<T> tensor(edue::Shape s, double lo = -1.0, double hi = 1.0) {
    edue::Tensor<T> t(s);
    for (auto& x : t.vec()) x = static_cast<T>(uniform(lo, hi));
    return t;
  }
  // Uniform draw whose magnitude is at least `gap`, for ops with a kink at 0.
  template <class T>
  edue::Tensor<T> tensor_away_from_zero(edue::Shape s, double gap, double hi = 1.0) {
    edue::Tensor<T> t(s);
    for (auto& x : t.vec()) x = static_cast<T>((coin() ? 1.0 : -1.0) * uniform(gap, hi));
    return t;
  }
  template <class T>
  edue::Tensor<T> binary(edue::Shape s, double p = 0.5) {
    edue::Tensor<T> t(s);
    for (auto& x : t.vec()) x = coin(p) ? T(1) : T(0);
    return t;
  }

 private:
  std::mt19937_64 eng_;
};

// --- convolution: direct six-loop definition ----------------------------------

template <class T>
std::vector<double> conv2d(const edue::Tensor<T>& x, const edue::Tensor<T>& k, const edue::Tensor<T>& b,
                           std::size_t stride, std::size_t pad, edue::Shape& out_shape) {
  const auto xs = x.shape(), ks = k.shape();
  const std::size_t oh = (xs.h + 2 * pad - ks.h) / stride + 1;
  const std::size_t ow = (xs.w + 2 * pad - ks.w) / stride + 1;
  out_shape = {xs.n, ks.n, oh, ow};
  std::vector<double> y(out_shape.numel(), 0.0);
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t co = 0; co < ks.n; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = static_cast<double>(b[co]);
          for (std::size_t ci = 0; ci < xs.c; ++ci)
            for (std::size_t ky = 0; ky < ks.h; ++ky)
              for (std::size_t kx = 0; kx < ks.w; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
                acc += static_cast<double>(x.at(n, ci, iy, ix)) * static_cast<double>(k.at(co, ci, ky, kx));
              }
          y[((n * ks.n + co) * oh + oy) * ow + ox] = acc;
        }
  return y;
}

// --- finite differences ----------------------------------------------------------

// f builds a scalar from the bound leaves on a fresh tape.
template <class T>
using ScalarFn = std::function<edue::ad::Var<T>(edue::ad::Tape<T>&, std::vector<edue::ad::Var<T>>&)>;

template <class T>
double evaluate(std::vector<edue::Tensor<T>>& leaves, const ScalarFn<T>& f) {
  edue::ad::Tape<T> tape(false);
  std::vector<edue::ad::Var<T>> vars;
  for (auto& l : leaves) vars.push_back(tape.constant(l));
  return static_cast<double>(f(tape, vars).item());
}

struct GradCheck {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs_error = 0.0;
  std::size_t n = 0;
};

// Central differences on every element of every leaf.
template <class T>
GradCheck check_gradients(std::vector<edue::Tensor<T>> leaves, const ScalarFn<T>& f, double h) {
  for (auto& l : leaves) l.set_requires_grad(true);
  {
    edue::ad::Tape<T> tape;
    std::vector<edue::ad::Var<T>> vars;
    for (auto& l : leaves) vars.push_back(tape.parameter(l));
    tape.backward(f(tape, vars));
  }
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  GradCheck out;
  for (auto& leaf : leaves) {
    std::vector<T> analytic(leaf.grad().begin(), leaf.grad().end());
    for (std::size_t i = 0; i < leaf.numel(); ++i) {
      const T saved = leaf[i];
      leaf[i] = static_cast<T>(static_cast<double>(saved) + h);
      const double up = evaluate(leaves, f);
      leaf[i] = static_cast<T>(static_cast<double>(saved) - h);
      const double down = evaluate(leaves, f);
      leaf[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[i]);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      out.max_abs_error = std::max(out.max_abs_error, std::abs(a - numeric));
      ++out.n;
    }
  }
  const double scale = std::max(std::sqrt(std::max(a2, n2)), 1e-30);
  out.rel_error = std::sqrt(diff2) / scale;
  return out;
}

// --- statistics ------------------------------------------------------------------

// Rank of v[i] = (#less) + (#equal + 1) / 2, by counting.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0.0, equal = 0.0;
    for (double u : v) {
      if (u < v[i]) less += 1.0;
      if (u == v[i]) equal += 1.0;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x[i] - mx) * (y[i] - my);
    dx += (x[i] - mx) * (x[i] - mx);
    dy += (y[i] - my) * (y[i] - my);
  }
  return num / std::sqrt(dx * dy);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(ranks(x), ranks(y));
}

// Double-centred distance matrices, formed explicitly.
inline std::vector<std::vector<double>> centred_distances(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::vector<double>> a(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i][j] = std::abs(x[i] - x[j]);
  std::vector<double> row(n, 0.0), col(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      row[i] += a[i][j] / static_cast<double>(n);
      col[j] += a[i][j] / static_cast<double>(n);
      grand += a[i][j] / static_cast<double>(n * n);
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i][j] = a[i][j] - row[i] - col[j] + grand;
  return a;
}

inline double dcov2(const std::vector<std::vector<double>>& A, const std::vector<std::vector<double>>& B) {
  const std::size_t n = A.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s += A[i][j] * B[i][j];
  return s / static_cast<double>(n * n);
}

inline double distance_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  const auto A = centred_distances(x), B = centred_distances(y);
  const double vx = dcov2(A, A), vy = dcov2(B, B);
  if (vx <= 0.0 || vy <= 0.0) return 0.0;
  return std::sqrt(std::max(dcov2(A, B), 0.0) / std::sqrt(vx * vy));
}

inline double ncc(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - ma) * (a[i] - ma) / n;
    vb += (b[i] - mb) * (b[i] - mb) / n;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += ((a[i] - ma) / std::sqrt(va)) * ((b[i] - mb) / std::sqrt(vb));
  return s / n;
}

inline double nll(const std::vector<double>& p, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::min(std::max(p[i], 1e-7), 1.0 - 1e-7);
    s += y[i] > 0.5 ? -std::log(q) : -std::log(1.0 - q);
  }
  return s / static_cast<double>(p.size());
}

inline double soft_dice(const std::vector<double>& p, const std::vector<double>& g) {
  double num = 1e-6, den = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    num += 2.0 * p[i] * g[i];
    den += p[i] + g[i];
  }
  return num / den;
}

// Variance of K maps at every pixel with a plain double loop.
template <class T>
std::vector<double> pixel_variance(const std::vector<edue::Tensor<T>>& maps) {
  const std::size_t n = maps.front().numel();
  const double k = static_cast<double>(maps.size());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (const auto& m : maps) mean += static_cast<double>(m[i]);
    mean /= k;
    double var = 0.0;
    for (const auto& m : maps) var += (static_cast<double>(m[i]) - mean) * (static_cast<double>(m[i]) - mean);
    out[i] = var / k;
  }
  return out;
}

}  // namespace oracle
