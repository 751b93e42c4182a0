#pragma once

#include <array>
#include <cstddef>
#include <limits>
#include <string>

#include "ssr3d/autograd.hpp"
#include "ssr3d/hsi.hpp"

namespace ssr3d {

// --- training losses (differentiable, recorded on the tape) -----------------

enum class LossKind { L1, MSE, Combo };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

/// Mean absolute error over every element.
Tensor l1_loss(Tape& tape, const Tensor& sr, const Tensor& hr);
/// Mean squared error over every element.
Tensor mse_loss(Tape& tape, const Tensor& sr, const Tensor& hr);
/// Mean spectral angle in radians over the (n, h, w) pixels of (n,1,L,h,w)
/// tensors. Pixels with a zero spectrum on either side are left out; their
/// number is written to `skipped` when given.
Tensor sam_loss(Tape& tape, const Tensor& sr, const Tensor& hr, std::size_t* skipped = nullptr);
/// 0.5 * MSE + 0.5 * SAM(radians).
Tensor combo_loss(Tape& tape, const Tensor& sr, const Tensor& hr, std::size_t* skipped = nullptr);

Tensor loss(Tape& tape, LossKind kind, const Tensor& sr, const Tensor& hr);

// --- evaluation metrics ------------------------------------------------------

struct MetricsReport {
  double psnr = 0.0;  // dB, +inf when the cubes are identical
  double ssim = 0.0;
  double sam = 0.0;   // degrees
};

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// Per-band PSNR averaged over bands. Bands with zero error are left out of
/// the average; when every band is exact the result is +inf.
double psnr(const HsiCube& sr, const HsiCube& hr, double peak = 1.0);
/// Same on float64 (1,1,L,H,W) tensors, e.g. network output before rounding.
double psnr(const Tensor& sr, const Tensor& hr, double peak = 1.0);

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Single-scale SSIM per band over all 11x11 Gaussian windows (sigma 1.5)
/// that fit inside the image, averaged over bands.
double ssim(const HsiCube& sr, const HsiCube& hr, double peak = 1.0);
double ssim(const Tensor& sr, const Tensor& hr, double peak = 1.0);

/// Mean spectral angle in degrees. Throws MetricError if no pixel has two
/// non-zero spectra.
double sam(const HsiCube& sr, const HsiCube& hr, std::size_t* skipped = nullptr);
double sam(const Tensor& sr, const Tensor& hr, std::size_t* skipped = nullptr);

MetricsReport evaluate_metrics(const HsiCube& sr, const HsiCube& hr, double peak = 1.0);

/// Normalized 1-D Gaussian taps used by ssim().
std::array<double, kSsimWindow> ssim_gaussian();

}  // namespace ssr3d
