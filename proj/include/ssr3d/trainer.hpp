#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ssr3d/hsi.hpp"
#include "ssr3d/metrics.hpp"
#include "ssr3d/model.hpp"

namespace ssr3d {

/// Optimizer and data-pipeline settings.
struct TrainConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t decay_period_epochs = 35;
  double decay_factor = 0.5;
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  LossKind loss_kind = LossKind::L1;
  std::uint64_t seed = 0;

  // Data pipeline.
  std::size_t patches_per_image = 24;  // per training cube, per epoch
  std::size_t patch_hw = 32;
  AugmentOptions augment;

  /// Max global gradient L2 norm; 0 disables clipping.
  double clip_grad_norm = 0.0;
  /// Epochs between checkpoints; 0 means every decay period.
  std::size_t checkpoint_every = 0;

  void validate() const;
};

/// Adam moments, one buffer pair per parameter tensor.
struct OptState {
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::map<std::string, Moments> moments;  // keyed "<layer>.weight" / "<layer>.bias"
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update from the gradients held in `params`.
/// Throws NonFiniteError naming the layer if any gradient is NaN/inf.
void adam_step(ParamStore& params, OptState& state, double lr, const TrainConfig& config);

/// lr0 * decay_factor ^ floor(epoch / decay_period).
double lr_at(std::size_t epoch, const TrainConfig& config);

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// An LR/HR training pair as network-ready mean-subtracted tensors.
struct TrainingPair {
  Tensor lr;
  Tensor hr;
};

/// One epoch's pairs: sample, augment, degrade, subtract the mean.
std::vector<TrainingPair> prepare_epoch(std::span<const HsiCube> cubes, double mean, std::size_t scale,
                                        const TrainConfig& config, std::size_t epoch);

/// Groups pairs of equal size into minibatches in a seed-determined order.
std::vector<TrainingPair> make_batches(std::vector<TrainingPair> pairs, std::size_t batch_size, std::uint64_t seed);

struct TrainResult {
  ParamStore params;
  float training_mean = 0.0f;
  std::vector<LossRecord> history;
  std::filesystem::path final_checkpoint;
  std::vector<std::filesystem::path> checkpoints;
};

/// Trains from scratch. Writes loss.csv and checkpoints/ into out_dir (when
/// non-empty) and final.ssrc at the end. A non-finite loss aborts with a
/// NonFiniteError after saving last_good.ssrc.
TrainResult train(const SsrnetConfig& model, const TrainConfig& config, std::span<const HsiCube> cubes,
                  const std::filesystem::path& out_dir);
TrainResult train(const SsrnetConfig& model, const TrainConfig& config,
                  const std::vector<std::filesystem::path>& dataset, const std::filesystem::path& out_dir);

// --- evaluation --------------------------------------------------------------

struct NamedCube {
  std::string id;
  HsiCube cube;
};

struct EvalOptions {
  std::size_t crop = 512;  // top-left square, clamped to the cube and trimmed to a multiple of r
  double peak = 1.0;
  std::optional<std::size_t> scale;  // must match the checkpoint when set
  bool error_maps = false;
  std::optional<std::pair<std::size_t, std::size_t>> spectrum_pixel;  // HR (row, col)
};

struct CubeEvaluation {
  std::string id;
  MetricsReport ssrnet;
  MetricsReport bicubic;
};

struct EvaluationReport {
  std::vector<CubeEvaluation> cubes;
  MetricsReport mean_ssrnet;
  MetricsReport mean_bicubic;
};

/// Crops, degrades, super-resolves and scores every cube; bicubic upsampling
/// of the same LR input is scored alongside. With a non-empty out_dir writes
/// metrics.csv, baseline_metrics.csv and the requested error maps / spectra.
EvaluationReport evaluate(const Checkpoint& checkpoint, std::span<const NamedCube> cubes, const EvalOptions& options,
                          const std::filesystem::path& out_dir);

// --- output files ------------------------------------------------------------

void write_loss_csv(std::span<const LossRecord> history, const std::filesystem::path& path);
void write_metrics_csv(const EvaluationReport& report, bool bicubic, const std::filesystem::path& path);

/// One 8-bit PGM per band of |sr - hr|, all scaled by 255 / max error. The
/// scale is written to scale.txt in the same directory.
void write_error_maps(const HsiCube& sr, const HsiCube& hr, const std::filesystem::path& dir);

/// CSV rows "band,hr,sr" for one pixel.
void write_spectrum_csv(const HsiCube& sr, const HsiCube& hr, std::size_t row, std::size_t col,
                        const std::filesystem::path& path);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace ssr3d
