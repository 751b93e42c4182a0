#include "ssr3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "ssr3d/errors.hpp"

namespace ssr3d {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::L1: return "l1";
    case LossKind::MSE: return "mse";
    case LossKind::Combo: return "combo";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "l1") return LossKind::L1;
  if (name == "mse") return LossKind::MSE;
  if (name == "combo") return LossKind::Combo;
  throw ConfigError("unknown loss '" + name + "' (expected l1, mse or combo)");
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

// Elementwise loss mean(f(sr - hr)) with derivative df.
template <class F, class DF>
Tensor elementwise_mean_loss(Tape& tape, const Tensor& sr, const Tensor& hr, const char* name, F f, DF df) {
  require_same_shape(sr, hr, name);
  const double inv_n = 1.0 / static_cast<double>(sr.numel());
  auto a = sr.data();
  auto b = hr.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += f(a[i] - b[i]);
  const bool needs_grad = sr.requires_grad() || hr.requires_grad();
  Tensor out(Shape5{}, std::vector<double>{acc * inv_n}, needs_grad);
  if (needs_grad && tape.recording()) {
    tape.record(name, {sr, hr}, out, [sr = Tensor(sr), hr = Tensor(hr), out, inv_n, df]() mutable {
      const double g = out.grad()[0] * inv_n;
      auto a = sr.data();
      auto b = hr.data();
      if (sr.requires_grad()) {
        auto gs = sr.grad();
        for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += g * df(a[i] - b[i]);
      }
      if (hr.requires_grad()) {
        auto gh = hr.grad();
        for (std::size_t i = 0; i < gh.size(); ++i) gh[i] -= g * df(a[i] - b[i]);
      }
    });
  }
  return out;
}

// Angle between two spectra, 2*atan2(|u - v|, |u + v|) on the unit vectors.
// Unlike acos of the cosine this is exact for identical spectra.
template <class Get>
double spectral_angle(std::size_t bands, double norm_a, double norm_b, Get get) {
  double diff = 0.0, sum = 0.0;
  for (std::size_t l = 0; l < bands; ++l) {
    const auto [a, b] = get(l);
    const double u = a / norm_a;
    const double v = b / norm_b;
    diff += (u - v) * (u - v);
    sum += (u + v) * (u + v);
  }
  return 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
}

}  // namespace

Tensor l1_loss(Tape& tape, const Tensor& sr, const Tensor& hr) {
  return elementwise_mean_loss(
      tape, sr, hr, "l1_loss", [](double d) { return std::abs(d); },
      [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); });
}

Tensor mse_loss(Tape& tape, const Tensor& sr, const Tensor& hr) {
  return elementwise_mean_loss(
      tape, sr, hr, "mse_loss", [](double d) { return d * d; }, [](double d) { return 2.0 * d; });
}

Tensor sam_loss(Tape& tape, const Tensor& sr, const Tensor& hr, std::size_t* skipped) {
  require_same_shape(sr, hr, "sam_loss");
  const auto& s = sr.shape();
  if (s.c != 1) throw DimensionError("sam_loss expects one channel, got " + s.str());
  if (s.l < 2) throw DimensionError("sam_loss needs at least 2 bands");
  const std::size_t plane = s.h * s.w;
  const std::size_t pixels = s.n * plane;

  // Per-pixel dot product and squared norms, kept for the backward pass.
  struct PixelStats {
    double dot = 0.0, ss = 0.0, hh = 0.0;
    bool valid = false;
  };
  std::vector<PixelStats> stats(pixels);
  auto a = sr.data();
  auto b = hr.data();
  std::size_t valid = 0;
  double total = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::size_t n = p / plane;
    const std::size_t xy = p % plane;
    auto& st = stats[p];
    for (std::size_t l = 0; l < s.l; ++l) {
      const std::size_t i = (n * s.l + l) * plane + xy;
      st.dot += a[i] * b[i];
      st.ss += a[i] * a[i];
      st.hh += b[i] * b[i];
    }
    st.valid = st.ss > 0.0 && st.hh > 0.0;
    if (!st.valid) continue;
    ++valid;
    total += spectral_angle(s.l, std::sqrt(st.ss), std::sqrt(st.hh), [&](std::size_t l) {
      const std::size_t i = (n * s.l + l) * plane + xy;
      return std::pair{a[i], b[i]};
    });
  }
  if (skipped) *skipped = pixels - valid;
  const double inv_valid = valid == 0 ? 0.0 : 1.0 / static_cast<double>(valid);
  const bool needs_grad = sr.requires_grad() || hr.requires_grad();
  Tensor out(Shape5{}, std::vector<double>{total * inv_valid}, needs_grad);

  if (needs_grad && tape.recording() && valid > 0) {
    tape.record("sam_loss", {sr, hr}, out, [sr = Tensor(sr), hr = Tensor(hr), out, stats = std::move(stats), inv_valid, plane]() mutable {
      const auto& s = sr.shape();
      const double g = out.grad()[0] * inv_valid;
      auto a = sr.data();
      auto b = hr.data();
      std::span<double> ga = sr.requires_grad() ? sr.grad() : std::span<double>{};
      std::span<double> gb = hr.requires_grad() ? hr.grad() : std::span<double>{};
      for (std::size_t p = 0; p < stats.size(); ++p) {
        const auto& st = stats[p];
        if (!st.valid) continue;
        const double ns = std::sqrt(st.ss);
        const double nh = std::sqrt(st.hh);
        const double cosv = st.dot / (ns * nh);
        const double sin2 = 1.0 - cosv * cosv;
        // d acos / d cos is unbounded at parallel spectra; use the zero subgradient there.
        if (sin2 <= 1e-24) continue;
        const double dtheta = -g / std::sqrt(sin2);
        const std::size_t n = p / plane;
        const std::size_t xy = p % plane;
        for (std::size_t l = 0; l < s.l; ++l) {
          const std::size_t i = (n * s.l + l) * plane + xy;
          if (!ga.empty()) ga[i] += dtheta * (b[i] / (ns * nh) - cosv * a[i] / st.ss);
          if (!gb.empty()) gb[i] += dtheta * (a[i] / (ns * nh) - cosv * b[i] / st.hh);
        }
      }
    });
  }
  return out;
}

Tensor combo_loss(Tape& tape, const Tensor& sr, const Tensor& hr, std::size_t* skipped) {
  Tensor mse = mse_loss(tape, sr, hr);
  Tensor angle = sam_loss(tape, sr, hr, skipped);
  return ops::add(tape, ops::scale(tape, mse, 0.5), ops::scale(tape, angle, 0.5));
}

Tensor loss(Tape& tape, LossKind kind, const Tensor& sr, const Tensor& hr) {
  switch (kind) {
    case LossKind::L1: return l1_loss(tape, sr, hr);
    case LossKind::MSE: return mse_loss(tape, sr, hr);
    case LossKind::Combo: return combo_loss(tape, sr, hr);
  }
  throw ContractError("unknown loss kind");
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

// Band-major float64 view of either cube type.
struct Planes {
  std::size_t bands = 0, height = 0, width = 0;
  std::vector<double> owned;
  std::span<const double> values;

  std::size_t plane() const { return height * width; }
  std::span<const double> band(std::size_t b) const { return values.subspan(b * plane(), plane()); }
};

Planes planes(const HsiCube& c) {
  Planes p{c.bands(), c.height(), c.width(), std::vector<double>(c.values().begin(), c.values().end()), {}};
  p.values = p.owned;
  return p;
}

Planes planes(const Tensor& t) {
  const auto& s = t.shape();
  if (s.n != 1 || s.c != 1) throw DimensionError("metrics expect a (1,1,L,H,W) tensor, got " + s.str());
  return Planes{s.l, s.h, s.w, {}, t.data()};
}

void require_same_dims(const Planes& a, const Planes& b, const char* what) {
  if (a.bands != b.bands || a.height != b.height || a.width != b.width) {
    throw DimensionError(std::string(what) + ": cube dimensions differ (" + std::to_string(a.bands) + "x" +
                         std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                         std::to_string(b.bands) + "x" + std::to_string(b.height) + "x" +
                         std::to_string(b.width) + ")");
  }
}

double psnr_impl(const Planes& sr, const Planes& hr, double peak) {
  require_same_dims(sr, hr, "psnr");
  if (!(peak > 0.0)) throw ConfigError("psnr peak must be > 0");
  const std::size_t plane = sr.plane();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t b = 0; b < sr.bands; ++b) {
    auto x = sr.band(b);
    auto y = hr.band(b);
    double se = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double d = x[i] - y[i];
      se += d * d;
    }
    if (se == 0.0) continue;
    total += 10.0 * std::log10(peak * peak / (se / static_cast<double>(plane)));
    ++counted;
  }
  return counted == 0 ? kPsnrIdentical : total / static_cast<double>(counted);
}

double ssim_impl(const Planes& sr, const Planes& hr, double peak) {
  require_same_dims(sr, hr, "ssim");
  if (!(peak > 0.0)) throw ConfigError("ssim peak must be > 0");
  const std::size_t H = sr.height, W = sr.width;
  if (H < kSsimWindow || W < kSsimWindow) {
    throw GeometryError("ssim needs at least 11x11 pixels, got " + std::to_string(H) + "x" + std::to_string(W));
  }
  const auto g = ssim_gaussian();
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const std::size_t OH = H - kSsimWindow + 1, OW = W - kSsimWindow + 1;

  // Valid-mode separable Gaussian filter of one plane.
  std::vector<double> rows(H * OW);
  const auto filter = [&](const std::vector<double>& in, std::vector<double>& out) {
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < OW; ++c) {
        double acc = 0.0;
        for (std::size_t t = 0; t < kSsimWindow; ++t) acc += g[t] * in[r * W + c + t];
        rows[r * OW + c] = acc;
      }
    }
    out.assign(OH * OW, 0.0);
    for (std::size_t r = 0; r < OH; ++r) {
      for (std::size_t c = 0; c < OW; ++c) {
        double acc = 0.0;
        for (std::size_t t = 0; t < kSsimWindow; ++t) acc += g[t] * rows[(r + t) * OW + c];
        out[r * OW + c] = acc;
      }
    }
  };

  std::vector<double> x(H * W), y(H * W), xx(H * W), yy(H * W), xy(H * W);
  std::vector<double> mx, my, mxx, myy, mxy;
  double total = 0.0;
  for (std::size_t b = 0; b < sr.bands; ++b) {
    auto xs = sr.band(b);
    auto ys = hr.band(b);
    for (std::size_t i = 0; i < H * W; ++i) {
      x[i] = xs[i];
      y[i] = ys[i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    filter(x, mx);
    filter(y, my);
    filter(xx, mxx);
    filter(yy, myy);
    filter(xy, mxy);
    double band_sum = 0.0;
    for (std::size_t i = 0; i < OH * OW; ++i) {
      const double vx = mxx[i] - mx[i] * mx[i];
      const double vy = myy[i] - my[i] * my[i];
      const double cov = mxy[i] - mx[i] * my[i];
      band_sum += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
                  ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += band_sum / static_cast<double>(OH * OW);
  }
  return total / static_cast<double>(sr.bands);
}

double sam_impl(const Planes& sr, const Planes& hr, std::size_t* skipped) {
  require_same_dims(sr, hr, "sam");
  if (sr.bands < 2) throw DimensionError("sam needs at least 2 bands");
  const std::size_t plane = sr.plane();
  auto a = sr.values;
  auto b = hr.values;
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    double ss = 0.0, hh = 0.0;
    for (std::size_t l = 0; l < sr.bands; ++l) {
      const double u = a[l * plane + p];
      const double v = b[l * plane + p];
      ss += u * u;
      hh += v * v;
    }
    if (ss == 0.0 || hh == 0.0) continue;
    total += spectral_angle(sr.bands, std::sqrt(ss), std::sqrt(hh), [&](std::size_t l) {
      return std::pair{a[l * plane + p], b[l * plane + p]};
    });
    ++valid;
  }
  if (skipped) *skipped = plane - valid;
  if (valid == 0) throw MetricError("sam: every pixel has a zero spectrum");
  return total / static_cast<double>(valid) * 180.0 / std::numbers::pi;
}

}  // namespace

std::array<double, kSsimWindow> ssim_gaussian() {
  std::array<double, kSsimWindow> w{};
  const double centre = static_cast<double>(kSsimWindow / 2);
  double sum = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - centre;
    w[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

double psnr(const HsiCube& sr, const HsiCube& hr, double peak) { return psnr_impl(planes(sr), planes(hr), peak); }
double psnr(const Tensor& sr, const Tensor& hr, double peak) { return psnr_impl(planes(sr), planes(hr), peak); }
double ssim(const HsiCube& sr, const HsiCube& hr, double peak) { return ssim_impl(planes(sr), planes(hr), peak); }
double ssim(const Tensor& sr, const Tensor& hr, double peak) { return ssim_impl(planes(sr), planes(hr), peak); }
double sam(const HsiCube& sr, const HsiCube& hr, std::size_t* skipped) {
  return sam_impl(planes(sr), planes(hr), skipped);
}
double sam(const Tensor& sr, const Tensor& hr, std::size_t* skipped) {
  return sam_impl(planes(sr), planes(hr), skipped);
}

MetricsReport evaluate_metrics(const HsiCube& sr, const HsiCube& hr, double peak) {
  const Planes a = planes(sr), b = planes(hr);
  return MetricsReport{psnr_impl(a, b, peak), ssim_impl(a, b, peak), sam_impl(a, b, nullptr)};
}

}  // namespace ssr3d
