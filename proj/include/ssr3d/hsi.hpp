#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ssr3d/tensor.hpp"

namespace ssr3d {

/// One hyperspectral image, float32, band-major (band, row, col).
class HsiCube {
 public:
  HsiCube() = default;
  HsiCube(std::size_t bands, std::size_t height, std::size_t width, float fill = 0.0f);
  HsiCube(std::size_t bands, std::size_t height, std::size_t width, std::vector<float> values);

  std::size_t bands() const { return bands_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }
  std::span<float> band(std::size_t b);
  std::span<const float> band(std::size_t b) const;

  float& at(std::size_t b, std::size_t r, std::size_t c) { return values_[(b * height_ + r) * width_ + c]; }
  float at(std::size_t b, std::size_t r, std::size_t c) const { return values_[(b * height_ + r) * width_ + c]; }

  /// Throws if any value is NaN or infinite.
  void check_finite() const;

  /// Top-left aligned sub-block over all bands.
  HsiCube crop(std::size_t row, std::size_t col, std::size_t height, std::size_t width) const;

  bool operator==(const HsiCube&) const = default;

 private:
  std::size_t bands_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> values_;
};

// --- HSC container --------------------------------------------------------
//
// Layout, all little-endian:
//   "HSC1" | u32 bands | u32 height | u32 width | f32 values[bands*height*width] | u32 crc32
// The CRC covers every byte before it.

inline constexpr std::uint64_t kMaxCubeElements = std::uint64_t{1} << 31;

HsiCube read_hsc(const std::filesystem::path& path);
void write_hsc(const HsiCube& cube, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_hsc(const HsiCube& cube);
HsiCube decode_hsc(std::span<const std::uint8_t> bytes);

// --- synthetic scenes ------------------------------------------------------

enum class SynthKind { GaussianBlobs, SpectralRamps, Checker };

SynthKind parse_synth_kind(const std::string& name);
std::string to_string(SynthKind kind);

/// Deterministic scene with values in [0,1] quantized to 16-bit levels.
HsiCube synth_cube(SynthKind kind, std::size_t bands, std::size_t height, std::size_t width, std::uint64_t seed);

// --- resampling ------------------------------------------------------------

/// Per-band bicubic resampling (Keys kernel, a = -0.5, clamp-to-edge,
/// pixel-centre alignment). Bands are never mixed.
HsiCube bicubic_resize(const HsiCube& cube, std::size_t out_height, std::size_t out_width);

/// The Keys cubic convolution weight for distance x.
double cubic_weight(double x, double a = -0.5);

// --- patches ---------------------------------------------------------------

struct TransformTag {
  bool flipped = false;
  int rotation_deg = 0;
  double scale = 1.0;

  std::string str() const;
  bool operator==(const TransformTag&) const = default;
};

struct Patch {
  HsiCube cube;
  std::size_t source_id = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  TransformTag transform;
};

struct PatchSet {
  std::vector<Patch> patches;
  std::size_t patch_hw = 0;
  std::size_t scale = 2;
};

/// `count` square patches at seeded uniform positions, full band depth.
PatchSet extract_patches(const HsiCube& cube, std::size_t count, std::size_t patch_hw, std::uint64_t seed,
                         std::size_t source_id = 0, std::size_t scale = 2);

struct AugmentOptions {
  bool flips = true;
  bool rotations = true;
  std::vector<double> scales{1.0, 0.75, 0.5};
};

/// Horizontal mirror (columns reversed).
HsiCube flip_horizontal(const HsiCube& cube);
/// Counter-clockwise rotation by quarter_turns * 90 degrees.
HsiCube rotate90(const HsiCube& cube, int quarter_turns);

/// Orbit of every patch under {identity, flip} x {0,90,180,270} x scales.
/// A rescaled size is trimmed down to a multiple of patches.scale; scales
/// whose result is under 8 pixels, or whose low-res side would be under
/// `min_lr_hw`, are skipped and counted in `skipped` when given.
PatchSet augment(const PatchSet& patches, const AugmentOptions& options, std::size_t min_lr_hw = 3,
                 std::size_t* skipped = nullptr);

/// Bicubic downsampling of an HR patch by r. HR dims must be divisible by r.
HsiCube degrade(const HsiCube& hr, std::size_t scale);

// --- mean handling ---------------------------------------------------------

/// Global mean of every value in every cube, accumulated in double.
double compute_mean(std::span<const HsiCube> cubes);

/// Cube as a (1,1,L,H,W) float64 tensor with `mean` subtracted.
Tensor mean_subtract(const HsiCube& cube, double mean);
/// Every patch as a mean-subtracted tensor, in patch order.
std::vector<Tensor> mean_subtract(const PatchSet& patches, double mean);
/// Inverse of mean_subtract for a (1,1,L,H,W) tensor.
HsiCube mean_restore(const Tensor& tensor, double mean);

}  // namespace ssr3d
