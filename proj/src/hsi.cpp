#include "ssr3d/hsi.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include "bytes.hpp"
#include "ssr3d/errors.hpp"

namespace ssr3d {

// ---------------------------------------------------------------------------
// HsiCube

HsiCube::HsiCube(std::size_t bands, std::size_t height, std::size_t width, float fill)
    : HsiCube(bands, height, width, std::vector<float>(bands * height * width, fill)) {}

HsiCube::HsiCube(std::size_t bands, std::size_t height, std::size_t width, std::vector<float> values)
    : bands_(bands), height_(height), width_(width), values_(std::move(values)) {
  if (bands == 0 || height == 0 || width == 0) throw DimensionError("cube dimensions must all be >= 1");
  if (values_.size() != bands * height * width) {
    throw DimensionError("cube value count " + std::to_string(values_.size()) + " does not match " +
                         std::to_string(bands) + "x" + std::to_string(height) + "x" + std::to_string(width));
  }
}

std::span<float> HsiCube::band(std::size_t b) {
  return std::span<float>(values_).subspan(b * height_ * width_, height_ * width_);
}

std::span<const float> HsiCube::band(std::size_t b) const {
  return std::span<const float>(values_).subspan(b * height_ * width_, height_ * width_);
}

void HsiCube::check_finite() const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) throw NonFiniteError("cube value " + std::to_string(i) + " is not finite");
  }
}

HsiCube HsiCube::crop(std::size_t row, std::size_t col, std::size_t h, std::size_t w) const {
  if (h == 0 || w == 0 || row + h > height_ || col + w > width_) {
    throw GeometryError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(row) + "," +
                        std::to_string(col) + ") exceeds cube " + std::to_string(height_) + "x" +
                        std::to_string(width_));
  }
  HsiCube out(bands_, h, w);
  for (std::size_t b = 0; b < bands_; ++b) {
    for (std::size_t r = 0; r < h; ++r) {
      const float* src = &values_[(b * height_ + row + r) * width_ + col];
      std::copy(src, src + w, &out.at(b, r, 0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// HSC container

std::vector<std::uint8_t> encode_hsc(const HsiCube& cube) {
  detail::ByteWriter w;
  w.raw("HSC1", 4);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cube.bands()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cube.height()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cube.width()));
  w.put_f32(cube.values());
  w.append_crc();
  return std::move(w.bytes());
}

HsiCube decode_hsc(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "HSC");
  if (r.get_string(4, "magic") != "HSC1") r.fail("bad magic", 0);
  const std::size_t dims_at = r.offset();
  const auto bands = r.get<std::uint32_t>("bands");
  const auto height = r.get<std::uint32_t>("height");
  const auto width = r.get<std::uint32_t>("width");
  if (bands == 0 || height == 0 || width == 0) r.fail("zero dimension in header", dims_at);
  const std::uint64_t limit = kMaxCubeElements;
  if (bands >= limit || height >= limit || width >= limit ||
      std::uint64_t{bands} * height > limit || std::uint64_t{bands} * height * width > limit) {
    r.fail("dimension overflow (" + std::to_string(bands) + "x" + std::to_string(height) + "x" +
               std::to_string(width) + ")",
           dims_at);
  }
  const std::size_t count = std::size_t{bands} * height * width;
  r.need(count * sizeof(float), "payload");
  std::vector<float> values(count);
  r.get_f32(values, "payload");
  r.check_crc();
  HsiCube cube(bands, height, width, std::move(values));
  try {
    cube.check_finite();
  } catch (const NonFiniteError& e) {
    throw FormatError(std::string("HSC: ") + e.what());
  }
  return cube;
}

HsiCube read_hsc(const std::filesystem::path& path) {
  try {
    return decode_hsc(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_hsc(const HsiCube& cube, const std::filesystem::path& path) {
  detail::write_file(path, encode_hsc(cube));
}

// ---------------------------------------------------------------------------
// Synthetic scenes

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "gaussian-blobs" || name == "blobs") return SynthKind::GaussianBlobs;
  if (name == "spectral-ramps" || name == "ramps") return SynthKind::SpectralRamps;
  if (name == "checker") return SynthKind::Checker;
  throw ConfigError("unknown synthetic kind '" + name + "' (expected blobs, ramps or checker)");
}

std::string to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::GaussianBlobs: return "gaussian-blobs";
    case SynthKind::SpectralRamps: return "spectral-ramps";
    case SynthKind::Checker: return "checker";
  }
  return "?";
}

namespace {

// Smooth positive reflectance-like curve over t in [0,1].
struct Spectrum {
  double base = 0.5;
  double amplitude = 0.3;
  double frequency = 0.5;
  double phase = 0.0;

  double operator()(double t) const {
    return base + amplitude * std::sin(2.0 * std::numbers::pi * frequency * t + phase);
  }

  static Spectrum random(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Spectrum s;
    s.base = 0.45 + 0.2 * u(rng);
    s.amplitude = 0.1 + 0.25 * u(rng);
    s.frequency = 0.2 + 0.4 * u(rng);
    s.phase = 2.0 * std::numbers::pi * u(rng);
    return s;
  }
};

float quantize16(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::round(v * 65535.0) / 65535.0);
}

}  // namespace

HsiCube synth_cube(SynthKind kind, std::size_t bands, std::size_t height, std::size_t width, std::uint64_t seed) {
  if (bands < 4 || height < 8 || width < 8) {
    throw GeometryError("synthetic cubes need >= 4 bands and >= 8x8 pixels");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  HsiCube cube(bands, height, width);
  const auto band_t = [&](std::size_t b) { return static_cast<double>(b) / static_cast<double>(bands - 1); };

  switch (kind) {
    case SynthKind::GaussianBlobs: {
      struct Blob {
        double cy, cx, sigma, amp;
        Spectrum spec;
      };
      std::vector<Blob> blobs(6);
      const double side = static_cast<double>(std::min(height, width));
      for (auto& b : blobs) {
        b.cy = u(rng) * static_cast<double>(height);
        b.cx = u(rng) * static_cast<double>(width);
        b.sigma = (0.08 + 0.17 * u(rng)) * side;
        b.amp = 0.3 + 0.4 * u(rng);
        b.spec = Spectrum::random(rng);
      }
      const Spectrum background = Spectrum::random(rng);
      for (std::size_t band = 0; band < bands; ++band) {
        const double t = band_t(band);
        for (std::size_t r = 0; r < height; ++r) {
          for (std::size_t c = 0; c < width; ++c) {
            double v = 0.1 * background(t);
            for (const auto& b : blobs) {
              const double dy = static_cast<double>(r) - b.cy;
              const double dx = static_cast<double>(c) - b.cx;
              v += b.amp * b.spec(t) * std::exp(-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma));
            }
            cube.at(band, r, c) = quantize16(v);
          }
        }
      }
      break;
    }
    case SynthKind::SpectralRamps: {
      const double angle = 2.0 * std::numbers::pi * u(rng);
      const Spectrum lo = Spectrum::random(rng);
      const Spectrum hi = Spectrum::random(rng);
      for (std::size_t band = 0; band < bands; ++band) {
        const double t = band_t(band);
        for (std::size_t r = 0; r < height; ++r) {
          for (std::size_t c = 0; c < width; ++c) {
            const double y = static_cast<double>(r) / static_cast<double>(height - 1) - 0.5;
            const double x = static_cast<double>(c) / static_cast<double>(width - 1) - 0.5;
            const double s = std::clamp(0.5 + (x * std::cos(angle) + y * std::sin(angle)) / std::numbers::sqrt2, 0.0, 1.0);
            cube.at(band, r, c) = quantize16((1.0 - s) * lo(t) + s * hi(t));
          }
        }
      }
      break;
    }
    case SynthKind::Checker: {
      const std::size_t cell = std::max<std::size_t>(2, std::min(height, width) / 8);
      std::vector<Spectrum> palette(4);
      for (auto& s : palette) s = Spectrum::random(rng);
      const std::size_t rows = (height + cell - 1) / cell;
      const std::size_t cols = (width + cell - 1) / cell;
      std::vector<std::size_t> assignment(rows * cols);
      std::uniform_int_distribution<std::size_t> pick(0, palette.size() - 1);
      for (auto& a : assignment) a = pick(rng);
      for (std::size_t band = 0; band < bands; ++band) {
        const double t = band_t(band);
        for (std::size_t r = 0; r < height; ++r) {
          for (std::size_t c = 0; c < width; ++c) {
            cube.at(band, r, c) = quantize16(palette[assignment[(r / cell) * cols + c / cell]](t));
          }
        }
      }
      break;
    }
  }
  return cube;
}

// ---------------------------------------------------------------------------
// Bicubic

double cubic_weight(double x, double a) {
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace {

struct Taps4 {
  std::array<std::size_t, 4> index{};
  std::array<double, 4> weight{};
};

std::vector<Taps4> resample_taps(std::size_t in, std::size_t out) {
  std::vector<Taps4> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  const auto last = static_cast<long long>(in) - 1;
  for (std::size_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    const double base = std::floor(src);
    for (int t = 0; t < 4; ++t) {
      const long long i = static_cast<long long>(base) - 1 + t;
      taps[o].index[t] = static_cast<std::size_t>(std::clamp<long long>(i, 0, last));
      taps[o].weight[t] = cubic_weight(src - static_cast<double>(i));
    }
  }
  return taps;
}

}  // namespace

HsiCube bicubic_resize(const HsiCube& cube, std::size_t out_height, std::size_t out_width) {
  if (out_height == 0 || out_width == 0) throw GeometryError("bicubic_resize to an empty size");
  const auto rows = resample_taps(cube.height(), out_height);
  const auto cols = resample_taps(cube.width(), out_width);
  HsiCube out(cube.bands(), out_height, out_width);
  std::vector<double> tmp(cube.height() * out_width);
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    const auto src = cube.band(b);
    for (std::size_t r = 0; r < cube.height(); ++r) {
      for (std::size_t c = 0; c < out_width; ++c) {
        double acc = 0.0;
        for (int t = 0; t < 4; ++t) acc += cols[c].weight[t] * src[r * cube.width() + cols[c].index[t]];
        tmp[r * out_width + c] = acc;
      }
    }
    auto dst = out.band(b);
    for (std::size_t r = 0; r < out_height; ++r) {
      for (std::size_t c = 0; c < out_width; ++c) {
        double acc = 0.0;
        for (int t = 0; t < 4; ++t) acc += rows[r].weight[t] * tmp[rows[r].index[t] * out_width + c];
        dst[r * out_width + c] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patches and augmentation

std::string TransformTag::str() const {
  std::ostringstream os;
  os << (flipped ? "flip" : "id") << "-rot" << rotation_deg << "-x" << scale;
  return os.str();
}

PatchSet extract_patches(const HsiCube& cube, std::size_t count, std::size_t patch_hw, std::uint64_t seed,
                         std::size_t source_id, std::size_t scale) {
  if (patch_hw == 0 || patch_hw > cube.height() || patch_hw > cube.width()) {
    throw GeometryError("patch size " + std::to_string(patch_hw) + " does not fit cube " +
                        std::to_string(cube.height()) + "x" + std::to_string(cube.width()));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> row_dist(0, cube.height() - patch_hw);
  std::uniform_int_distribution<std::size_t> col_dist(0, cube.width() - patch_hw);
  PatchSet set;
  set.patch_hw = patch_hw;
  set.scale = scale;
  set.patches.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t r = row_dist(rng);
    const std::size_t c = col_dist(rng);
    set.patches.push_back(Patch{cube.crop(r, c, patch_hw, patch_hw), source_id, r, c, {}});
  }
  return set;
}

HsiCube flip_horizontal(const HsiCube& cube) {
  HsiCube out = cube;
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    for (std::size_t r = 0; r < cube.height(); ++r) {
      auto row = out.band(b).subspan(r * cube.width(), cube.width());
      std::reverse(row.begin(), row.end());
    }
  }
  return out;
}

HsiCube rotate90(const HsiCube& cube, int quarter_turns) {
  const int turns = ((quarter_turns % 4) + 4) % 4;
  if (turns == 0) return cube;
  const std::size_t H = cube.height(), W = cube.width();
  const bool swap = turns % 2 == 1;
  HsiCube out(cube.bands(), swap ? W : H, swap ? H : W);
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    for (std::size_t r = 0; r < out.height(); ++r) {
      for (std::size_t c = 0; c < out.width(); ++c) {
        std::size_t sr = 0, sc = 0;
        switch (turns) {
          case 1: sr = c; sc = W - 1 - r; break;
          case 2: sr = H - 1 - r; sc = W - 1 - c; break;
          case 3: sr = H - 1 - c; sc = r; break;
        }
        out.at(b, r, c) = cube.at(b, sr, sc);
      }
    }
  }
  return out;
}

PatchSet augment(const PatchSet& patches, const AugmentOptions& options, std::size_t min_lr_hw,
                 std::size_t* skipped) {
  const std::size_t r = patches.scale;
  if (r == 0) throw ConfigError("augment: scale factor must be >= 1");
  const std::vector<bool> flips = options.flips ? std::vector<bool>{false, true} : std::vector<bool>{false};
  const std::vector<int> turns = options.rotations ? std::vector<int>{0, 1, 2, 3} : std::vector<int>{0};
  const std::vector<double> scales = options.scales.empty() ? std::vector<double>{1.0} : options.scales;

  PatchSet out;
  out.patch_hw = patches.patch_hw;
  out.scale = r;
  std::size_t dropped = 0;
  for (const auto& p : patches.patches) {
    for (bool flip : flips) {
      const HsiCube flipped = flip ? flip_horizontal(p.cube) : p.cube;
      for (int t : turns) {
        const HsiCube turned = rotate90(flipped, t);
        for (double s : scales) {
          const auto target = [&](std::size_t n) {
            auto v = static_cast<std::size_t>(std::lround(static_cast<double>(n) * s));
            return v - v % r;
          };
          const std::size_t th = target(turned.height());
          const std::size_t tw = target(turned.width());
          if (s <= 0.0 || th < 8 || tw < 8 || th / r < min_lr_hw || tw / r < min_lr_hw) {
            ++dropped;
            continue;
          }
          const std::size_t rh = static_cast<std::size_t>(std::lround(static_cast<double>(turned.height()) * s));
          const std::size_t rw = static_cast<std::size_t>(std::lround(static_cast<double>(turned.width()) * s));
          HsiCube scaled = (rh == turned.height() && rw == turned.width()) ? turned : bicubic_resize(turned, rh, rw);
          if (th != rh || tw != rw) scaled = scaled.crop(0, 0, th, tw);
          out.patches.push_back(Patch{std::move(scaled), p.source_id, p.row, p.col, TransformTag{flip, 90 * t, s}});
        }
      }
    }
  }
  if (dropped > 0) {
    std::cerr << "warning: augment skipped " << dropped << " scaled variant(s) below the minimum size\n";
  }
  if (skipped) *skipped = dropped;
  return out;
}

HsiCube degrade(const HsiCube& hr, std::size_t scale) {
  if (scale == 0 || hr.height() % scale != 0 || hr.width() % scale != 0) {
    throw GeometryError("HR size " + std::to_string(hr.height()) + "x" + std::to_string(hr.width()) +
                        " is not divisible by scale " + std::to_string(scale));
  }
  return bicubic_resize(hr, hr.height() / scale, hr.width() / scale);
}

// ---------------------------------------------------------------------------
// Mean handling

double compute_mean(std::span<const HsiCube> cubes) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& c : cubes) {
    for (float v : c.values()) total += v;
    count += c.size();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

Tensor mean_subtract(const HsiCube& cube, double mean) {
  std::vector<double> values(cube.size());
  auto src = cube.values();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(src[i]) - mean;
  return Tensor(Shape5{1, 1, cube.bands(), cube.height(), cube.width()}, std::move(values));
}

std::vector<Tensor> mean_subtract(const PatchSet& patches, double mean) {
  std::vector<Tensor> out;
  out.reserve(patches.patches.size());
  for (const auto& p : patches.patches) out.push_back(mean_subtract(p.cube, mean));
  return out;
}

HsiCube mean_restore(const Tensor& tensor, double mean) {
  const auto& s = tensor.shape();
  if (s.n != 1 || s.c != 1) throw DimensionError("mean_restore expects a (1,1,L,H,W) tensor, got " + s.str());
  std::vector<float> values(s.numel());
  auto src = tensor.data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(src[i] + mean);
  return HsiCube(s.l, s.h, s.w, std::move(values));
}

}  // namespace ssr3d
