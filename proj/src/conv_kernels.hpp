#pragma once

#include <cstddef>

#include "ssr3d/autograd.hpp"

namespace ssr3d::detail {

// A convolution relates a "small" grid (conv output / transposed-conv input)
// to a "big" grid (conv input / transposed-conv output) through
//   big = small * stride + tap - padding
// on every axis. Weights are laid out [small_ch][big_ch][k_l][k_h][k_w].
struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t small_channels = 1;
  std::size_t big_channels = 1;
  Extent3 small{1, 1, 1};
  Extent3 big{1, 1, 1};
  Extent3 kernel{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};

  std::size_t small_volume() const { return small[0] * small[1] * small[2]; }
  std::size_t big_volume() const { return big[0] * big[1] * big[2]; }
  std::size_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
};

/// small += W * big. Per small element the terms are summed in the order
/// (big channel, band tap, row tap, col tap).
void conv_gather(const ConvGeometry& g, const double* big, const double* weight, double* small);

/// big += W^T * small.
void conv_scatter(const ConvGeometry& g, const double* small, const double* weight, double* big);

/// dW += small (x) big, summed over batch and positions.
void conv_weight_grad(const ConvGeometry& g, const double* small, const double* big, double* weight_grad);

}  // namespace ssr3d::detail
