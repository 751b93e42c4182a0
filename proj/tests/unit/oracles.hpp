#pragma once

// Slow, direct reference implementations used only by the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "ssr3d/autograd.hpp"
#include "ssr3d/hsi.hpp"

namespace oracle {

using ssr3d::Conv3dParams;
using ssr3d::Extent3;
using ssr3d::HsiCube;
using ssr3d::Shape5;
using ssr3d::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, Shape5 s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(s);
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline HsiCube random_cube(std::mt19937_64& rng, std::size_t l, std::size_t h, std::size_t w, float lo = 0.0f,
                           float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  HsiCube c(l, h, w);
  for (float& v : c.values()) v = d(rng);
  return c;
}

inline Conv3dParams random_params(std::mt19937_64& rng, std::size_t in, std::size_t out, Extent3 k, Extent3 s,
                                  Extent3 p, bool transposed = false, Extent3 op = {0, 0, 0}) {
  auto params = Conv3dParams::zeros(in, out, k, s, p, transposed, op);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : params.weight.data()) v = d(rng);
  for (double& v : params.bias.data()) v = d(rng);
  return params;
}

// +inf on a shape mismatch so callers comparing against a tolerance fail.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

struct RandomGeometry {
  std::size_t in, out;
  Shape5 input;
  Extent3 k, s, p, op;
};

inline RandomGeometry random_geometry(std::mt19937_64& rng) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  RandomGeometry g;
  g.in = pick(1, 3);
  g.out = pick(1, 3);
  g.input = {pick(1, 2), g.in, pick(1, 5), pick(1, 6), pick(1, 6)};
  const std::size_t dims[3] = {g.input.l, g.input.h, g.input.w};
  for (int d = 0; d < 3; ++d) {
    g.s[d] = pick(1, 3);
    g.k[d] = pick(1, 4);
    g.p[d] = pick(0, g.k[d] - 1);
    // keep the forward output non-empty
    while (dims[d] + 2 * g.p[d] < g.k[d]) g.k[d] -= 1;
    if (g.p[d] >= g.k[d]) g.p[d] = g.k[d] - 1;
    g.op[d] = pick(0, g.s[d] - 1);
  }
  return g;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

// out[n,o,i,j,k] = bias[o] + sum_{c,a,b,e} W[o,c,a,b,e] * x[n,c,i*s+a-p, j*s+b-p, k*s+e-p]
inline Tensor conv3d(const Tensor& x, const Conv3dParams& p) {
  const Shape5 xs = x.shape();
  const Shape5 ws = p.weight.shape();
  const auto [sl, sh, sw] = p.stride;
  const auto [pl, ph, pw] = p.padding;
  const std::size_t ol = (xs.l + 2 * pl - ws.l) / sl + 1;
  const std::size_t oh = (xs.h + 2 * ph - ws.h) / sh + 1;
  const std::size_t ow = (xs.w + 2 * pw - ws.w) / sw + 1;
  Tensor out(Shape5{xs.n, ws.n, ol, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o)
      for (std::size_t i = 0; i < ol; ++i)
        for (std::size_t j = 0; j < oh; ++j)
          for (std::size_t k = 0; k < ow; ++k) {
            double acc = p.bias.data()[o];
            for (std::size_t c = 0; c < xs.c; ++c)
              for (std::size_t a = 0; a < ws.l; ++a)
                for (std::size_t b = 0; b < ws.h; ++b)
                  for (std::size_t e = 0; e < ws.w; ++e) {
                    const auto li = static_cast<long>(i * sl + a) - static_cast<long>(pl);
                    const auto hi = static_cast<long>(j * sh + b) - static_cast<long>(ph);
                    const auto wi = static_cast<long>(k * sw + e) - static_cast<long>(pw);
                    if (li < 0 || hi < 0 || wi < 0 || li >= static_cast<long>(xs.l) ||
                        hi >= static_cast<long>(xs.h) || wi >= static_cast<long>(xs.w))
                      continue;
                    acc += p.weight.at(o, c, a, b, e) * x.at(n, c, static_cast<std::size_t>(li),
                                                             static_cast<std::size_t>(hi),
                                                             static_cast<std::size_t>(wi));
                  }
            out.at(n, o, i, j, k) = acc;
          }
  return out;
}

// Each input voxel spreads W[c,o,.] * x into the output at i*s+a-p; weight
// layout (in, out, k...).
inline Tensor conv3d_transposed(const Tensor& x, const Conv3dParams& p) {
  const Shape5 xs = x.shape();
  const Shape5 ws = p.weight.shape();
  const auto [sl, sh, sw] = p.stride;
  const auto [pl, ph, pw] = p.padding;
  const auto [ql, qh, qw] = p.output_padding;
  const std::size_t ol = (xs.l - 1) * sl + ws.l + ql - 2 * pl;
  const std::size_t oh = (xs.h - 1) * sh + ws.h + qh - 2 * ph;
  const std::size_t ow = (xs.w - 1) * sw + ws.w + qw - 2 * pw;
  Tensor out(Shape5{xs.n, ws.c, ol, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.c; ++o)
      for (std::size_t i = 0; i < ol; ++i)
        for (std::size_t j = 0; j < oh; ++j)
          for (std::size_t k = 0; k < ow; ++k) out.at(n, o, i, j, k) = p.bias.data()[o];
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t i = 0; i < xs.l; ++i)
        for (std::size_t j = 0; j < xs.h; ++j)
          for (std::size_t k = 0; k < xs.w; ++k)
            for (std::size_t o = 0; o < ws.c; ++o)
              for (std::size_t a = 0; a < ws.l; ++a)
                for (std::size_t b = 0; b < ws.h; ++b)
                  for (std::size_t e = 0; e < ws.w; ++e) {
                    const auto li = static_cast<long>(i * sl + a) - static_cast<long>(pl);
                    const auto hi = static_cast<long>(j * sh + b) - static_cast<long>(ph);
                    const auto wi = static_cast<long>(k * sw + e) - static_cast<long>(pw);
                    if (li < 0 || hi < 0 || wi < 0 || li >= static_cast<long>(ol) || hi >= static_cast<long>(oh) ||
                        wi >= static_cast<long>(ow))
                      continue;
                    out.at(n, o, static_cast<std::size_t>(li), static_cast<std::size_t>(hi),
                           static_cast<std::size_t>(wi)) += p.weight.at(c, o, a, b, e) * x.at(n, c, i, j, k);
                  }
  return out;
}

inline double psnr(const HsiCube& a, const HsiCube& b, double peak) {
  double total = 0.0;
  int counted = 0;
  for (std::size_t l = 0; l < a.bands(); ++l) {
    double mse = 0.0;
    for (std::size_t r = 0; r < a.height(); ++r)
      for (std::size_t c = 0; c < a.width(); ++c) {
        const double d = double(a.at(l, r, c)) - double(b.at(l, r, c));
        mse += d * d;
      }
    mse /= double(a.height() * a.width());
    if (mse == 0.0) continue;
    total += 10.0 * std::log10(peak * peak / mse);
    ++counted;
  }
  return total / counted;
}

// Direct 11x11 Gaussian-window SSIM, every fully contained window.
inline double ssim(const HsiCube& a, const HsiCube& b, double peak) {
  const int win = 11;
  const double sigma = 1.5;
  double w2[11][11];
  double norm = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      w2[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
      norm += w2[i][j];
    }
  const double c1 = std::pow(0.01 * peak, 2), c2 = std::pow(0.03 * peak, 2);
  double total = 0.0;
  for (std::size_t l = 0; l < a.bands(); ++l) {
    double band = 0.0;
    int windows = 0;
    for (std::size_t r = 0; r + win <= a.height(); ++r)
      for (std::size_t c = 0; c + win <= a.width(); ++c) {
        double mx = 0, my = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double w = w2[i][j] / norm;
            mx += w * a.at(l, r + i, c + j);
            my += w * b.at(l, r + i, c + j);
          }
        double vx = 0, vy = 0, cov = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double w = w2[i][j] / norm;
            const double dx = a.at(l, r + i, c + j) - mx;
            const double dy = b.at(l, r + i, c + j) - my;
            vx += w * dx * dx;
            vy += w * dy * dy;
            cov += w * dx * dy;
          }
        band += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++windows;
      }
    total += band / windows;
  }
  return total / double(a.bands());
}

inline double sam_degrees(const HsiCube& a, const HsiCube& b) {
  double total = 0.0;
  int counted = 0;
  for (std::size_t r = 0; r < a.height(); ++r)
    for (std::size_t c = 0; c < a.width(); ++c) {
      double d = 0, na = 0, nb = 0;
      for (std::size_t l = 0; l < a.bands(); ++l) {
        d += double(a.at(l, r, c)) * b.at(l, r, c);
        na += double(a.at(l, r, c)) * a.at(l, r, c);
        nb += double(b.at(l, r, c)) * b.at(l, r, c);
      }
      if (na == 0 || nb == 0) continue;
      total += std::acos(std::clamp(d / std::sqrt(na * nb), -1.0, 1.0));
      ++counted;
    }
  return total / counted * 180.0 / std::numbers::pi;
}

}  // namespace oracle
