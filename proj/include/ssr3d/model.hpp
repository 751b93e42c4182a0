#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ssr3d/autograd.hpp"
#include "ssr3d/hsi.hpp"

namespace ssr3d {

enum class BlockKind { Separable, Standard };

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& name);

/// Architecture hyperparameters. Defaults are the published configuration.
struct SsrnetConfig {
  std::size_t d_modules = 3;
  std::size_t units_per_module = 3;
  std::size_t filters = 64;
  std::size_t k = 3;
  std::size_t scale = 2;
  bool lff_enabled = true;
  bool grl_enabled = true;
  BlockKind block_kind = BlockKind::Separable;

  /// Throws ConfigError.
  void validate() const;
  bool operator==(const SsrnetConfig&) const = default;
};

enum class LayerKind { Ife, Spectral, Spatial, Standard, PointwiseFuse, Upsample, Final };

std::string to_string(LayerKind kind);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Ife;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Extent3 kernel{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
  Extent3 output_padding{0, 0, 0};
  bool transposed = false;

  std::size_t weight_count() const { return in_channels * out_channels * kernel[0] * kernel[1] * kernel[2]; }
  std::size_t bias_count() const { return out_channels; }
};

/// Every layer of the network, in execution order. Names follow
/// "ife", "m{d}.u{n}.b{j}.{spectral|spatial|conv}", "m{d}.fuse",
/// "m{d}.block.{...}", "upsample", "final".
using LayerPlan = std::vector<LayerSpec>;

LayerPlan plan_layers(const SsrnetConfig& config);

/// Geometry of the image-reconstruction upsampler for scale r: kernel
/// (3, 2r, 2r), stride (1, r, r), padding (1, ceil(r/2), ceil(r/2)) and the
/// output padding that makes the result exactly r times larger.
LayerSpec upsample_layer(std::size_t filters, std::size_t scale);

/// Named trainable parameters, one entry per layer.
class ParamStore {
 public:
  void insert(const std::string& name, Conv3dParams params);
  const Conv3dParams& at(const std::string& name) const;
  Conv3dParams& at(const std::string& name);
  bool contains(const std::string& name) const { return layers_.contains(name); }

  const std::map<std::string, Conv3dParams>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Deep copy with fresh gradient-requiring leaves.
  ParamStore clone() const;
  /// Copy whose values are rounded to float32, i.e. what a checkpoint stores.
  ParamStore quantized() const;

  bool values_equal(const ParamStore& other) const;

 private:
  std::map<std::string, Conv3dParams> layers_;
};

/// Fan-in scaled init: weights ~ N(0, 2 / fan_in), zero bias.
ParamStore build(const SsrnetConfig& config, std::uint64_t seed);

/// Zero weights and biases for every planned layer.
ParamStore build_zero(const SsrnetConfig& config);

// Forward passes over (n, filters, L, H, W) feature maps. `prefix` selects
// the layer names inside the store, e.g. "m0.u1.b0".
Tensor block_forward(Tape& tape, const Tensor& x, const ParamStore& params, const std::string& prefix,
                     BlockKind kind);
Tensor unit_forward(Tape& tape, const Tensor& x, const ParamStore& params, const std::string& prefix,
                    BlockKind kind);
Tensor module_forward(Tape& tape, const Tensor& x, const ParamStore& params, std::size_t module_index,
                      const SsrnetConfig& config);

/// Full network on a (n, 1, L, h, w) batch; returns (n, 1, L, r*h, r*w).
Tensor forward(Tape& tape, const Tensor& lr, const ParamStore& params, const SsrnetConfig& config);

/// Inference on one cube: subtracts `mean`, runs the network, adds it back.
HsiCube super_resolve(const HsiCube& lr, const ParamStore& params, const SsrnetConfig& config, double mean = 0.0);

struct ParamGroupCount {
  std::string group;
  std::size_t weights = 0;
  std::size_t biases = 0;
  std::size_t total() const { return weights + biases; }
};

struct ParamCountReport {
  SsrnetConfig config;
  std::vector<ParamGroupCount> groups;  // ife, units, fuse, blocks, upsample, final
  std::size_t total = 0;
};

ParamCountReport count_params(const SsrnetConfig& config);

struct BlockComparison {
  ParamCountReport separable;
  ParamCountReport standard;
  double ratio = 0.0;  // separable / standard
};

BlockComparison compare_block_kinds(SsrnetConfig config);

// --- checkpoints ------------------------------------------------------------
//
// "SSRC" | u16 version | config | f32 training mean | u32 entry count |
// entries: u16 name length, name bytes, u8 rank, u32 dims[rank], f32 values |
// u32 crc32. Each layer contributes "<layer>.weight" and "<layer>.bias".

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  SsrnetConfig config;
  ParamStore params;
  float training_mean = 0.0f;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ssr3d
