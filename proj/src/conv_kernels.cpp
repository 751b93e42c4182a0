#include "conv_kernels.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "parallel.hpp"

namespace ssr3d::detail {
namespace {

// Valid small-index range for one kernel tap on one axis.
struct TapRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

std::vector<TapRange> tap_ranges(std::size_t small, std::size_t big, std::size_t kernel, std::size_t stride,
                                 std::size_t padding) {
  std::vector<TapRange> out(kernel);
  const auto s = static_cast<std::int64_t>(stride);
  for (std::size_t a = 0; a < kernel; ++a) {
    // need 0 <= i*s + a - p <= big - 1
    const std::int64_t low_num = static_cast<std::int64_t>(padding) - static_cast<std::int64_t>(a);
    const std::int64_t high_num = static_cast<std::int64_t>(big) - 1 + low_num;
    std::int64_t lo = low_num <= 0 ? 0 : (low_num + s - 1) / s;
    std::int64_t hi = high_num < 0 ? 0 : high_num / s + 1;
    hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(small));
    if (lo > hi) lo = hi;
    out[a] = {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }
  return out;
}

struct Taps {
  std::array<std::vector<TapRange>, 3> axis;

  explicit Taps(const ConvGeometry& g) {
    for (int d = 0; d < 3; ++d) axis[d] = tap_ranges(g.small[d], g.big[d], g.kernel[d], g.stride[d], g.padding[d]);
  }
};

inline std::size_t big_index(std::size_t i, std::size_t stride, std::size_t tap, std::size_t padding) {
  return i * stride + tap - padding;
}

}  // namespace

void conv_gather(const ConvGeometry& g, const double* big, const double* weight, double* small) {
  const Taps taps(g);
  const std::size_t svol = g.small_volume();
  const std::size_t bvol = g.big_volume();
  const std::size_t kvol = g.kernel_volume();
  const auto [kl, kh, kw] = g.kernel;
  const auto [sl, sh, sw] = g.stride;
  const auto [pl, ph, pw] = g.padding;
  const std::size_t SH = g.small[1], SW = g.small[2];
  const std::size_t BH = g.big[1], BW = g.big[2];

  parallel_for(g.batch * g.small_channels, svol * g.big_channels * kvol, [&](std::size_t job) {
    const std::size_t n = job / g.small_channels;
    const std::size_t cs = job % g.small_channels;
    double* out = small + job * svol;
    for (std::size_t cb = 0; cb < g.big_channels; ++cb) {
      const double* in = big + (n * g.big_channels + cb) * bvol;
      const double* wk = weight + (cs * g.big_channels + cb) * kvol;
      for (std::size_t a = 0; a < kl; ++a) {
        const auto [l0, l1] = taps.axis[0][a];
        for (std::size_t b = 0; b < kh; ++b) {
          const auto [h0, h1] = taps.axis[1][b];
          for (std::size_t c = 0; c < kw; ++c) {
            const auto [w0, w1] = taps.axis[2][c];
            const double wv = wk[(a * kh + b) * kw + c];
            for (std::size_t i = l0; i < l1; ++i) {
              const std::size_t bi = big_index(i, sl, a, pl);
              for (std::size_t j = h0; j < h1; ++j) {
                const std::size_t bj = big_index(j, sh, b, ph);
                double* o = out + (i * SH + j) * SW;
                const double* row = in + (bi * BH + bj) * BW;
                if (sw == 1) {
                  for (std::size_t k = w0; k < w1; ++k) o[k] += wv * row[k + c - pw];
                } else {
                  for (std::size_t k = w0; k < w1; ++k) o[k] += wv * row[big_index(k, sw, c, pw)];
                }
              }
            }
          }
        }
      }
    }
  });
}

void conv_scatter(const ConvGeometry& g, const double* small, const double* weight, double* big) {
  const Taps taps(g);
  const std::size_t svol = g.small_volume();
  const std::size_t bvol = g.big_volume();
  const std::size_t kvol = g.kernel_volume();
  const auto [kl, kh, kw] = g.kernel;
  const auto [sl, sh, sw] = g.stride;
  const auto [pl, ph, pw] = g.padding;
  const std::size_t SH = g.small[1], SW = g.small[2];
  const std::size_t BH = g.big[1], BW = g.big[2];

  parallel_for(g.batch * g.big_channels, bvol * g.small_channels * kvol, [&](std::size_t job) {
    const std::size_t n = job / g.big_channels;
    const std::size_t cb = job % g.big_channels;
    double* out = big + job * bvol;
    for (std::size_t cs = 0; cs < g.small_channels; ++cs) {
      const double* in = small + (n * g.small_channels + cs) * svol;
      const double* wk = weight + (cs * g.big_channels + cb) * kvol;
      for (std::size_t a = 0; a < kl; ++a) {
        const auto [l0, l1] = taps.axis[0][a];
        for (std::size_t b = 0; b < kh; ++b) {
          const auto [h0, h1] = taps.axis[1][b];
          for (std::size_t c = 0; c < kw; ++c) {
            const auto [w0, w1] = taps.axis[2][c];
            const double wv = wk[(a * kh + b) * kw + c];
            for (std::size_t i = l0; i < l1; ++i) {
              const std::size_t bi = big_index(i, sl, a, pl);
              for (std::size_t j = h0; j < h1; ++j) {
                const std::size_t bj = big_index(j, sh, b, ph);
                const double* src = in + (i * SH + j) * SW;
                double* row = out + (bi * BH + bj) * BW;
                if (sw == 1) {
                  for (std::size_t k = w0; k < w1; ++k) row[k + c - pw] += wv * src[k];
                } else {
                  for (std::size_t k = w0; k < w1; ++k) row[big_index(k, sw, c, pw)] += wv * src[k];
                }
              }
            }
          }
        }
      }
    }
  });
}

void conv_weight_grad(const ConvGeometry& g, const double* small, const double* big, double* weight_grad) {
  const Taps taps(g);
  const std::size_t svol = g.small_volume();
  const std::size_t bvol = g.big_volume();
  const std::size_t kvol = g.kernel_volume();
  const auto [kl, kh, kw] = g.kernel;
  const auto [sl, sh, sw] = g.stride;
  const auto [pl, ph, pw] = g.padding;
  const std::size_t SH = g.small[1], SW = g.small[2];
  const std::size_t BH = g.big[1], BW = g.big[2];

  parallel_for(g.small_channels * g.big_channels, g.batch * svol * kvol, [&](std::size_t job) {
    const std::size_t cs = job / g.big_channels;
    const std::size_t cb = job % g.big_channels;
    double* gw = weight_grad + job * kvol;
    for (std::size_t a = 0; a < kl; ++a) {
      const auto [l0, l1] = taps.axis[0][a];
      for (std::size_t b = 0; b < kh; ++b) {
        const auto [h0, h1] = taps.axis[1][b];
        for (std::size_t c = 0; c < kw; ++c) {
          const auto [w0, w1] = taps.axis[2][c];
          double acc = 0.0;
          for (std::size_t n = 0; n < g.batch; ++n) {
            const double* sp = small + (n * g.small_channels + cs) * svol;
            const double* bp = big + (n * g.big_channels + cb) * bvol;
            for (std::size_t i = l0; i < l1; ++i) {
              const std::size_t bi = big_index(i, sl, a, pl);
              for (std::size_t j = h0; j < h1; ++j) {
                const std::size_t bj = big_index(j, sh, b, ph);
                const double* srow = sp + (i * SH + j) * SW;
                const double* brow = bp + (bi * BH + bj) * BW;
                for (std::size_t k = w0; k < w1; ++k) acc += srow[k] * brow[big_index(k, sw, c, pw)];
              }
            }
          }
          gw[(a * kh + b) * kw + c] += acc;
        }
      }
    }
  });
}

}  // namespace ssr3d::detail
