#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ssr3d/tensor.hpp"

namespace ssr3d {

/// Per-axis (band, row, col) triple.
using Extent3 = std::array<std::size_t, 3>;

/// Convolution layer parameters and geometry.
///
/// weight is stored as a Tensor with shape (a, b, k_l, k_h, k_w). For an
/// ordinary convolution a = out channels, b = in channels. A transposed
/// convolution reuses the layout of the convolution it is the adjoint of, so
/// a = its in channels and b = its out channels. bias always has one entry
/// per output channel, stored as (out, 1, 1, 1, 1).
struct Conv3dParams {
  Tensor weight;
  Tensor bias;
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
  /// Extra trailing rows added to a transposed output. Must be < stride.
  Extent3 output_padding{0, 0, 0};
  bool transposed = false;

  /// Zero-initialized parameters that require gradients.
  static Conv3dParams zeros(std::size_t in_channels, std::size_t out_channels, Extent3 kernel,
                            Extent3 stride = {1, 1, 1}, Extent3 padding = {0, 0, 0},
                            bool transposed = false, Extent3 output_padding = {0, 0, 0});

  std::size_t in_channels() const;
  std::size_t out_channels() const;
  Extent3 kernel() const;
  std::size_t scalar_count() const { return weight.numel() + bias.numel(); }

  /// Throws GeometryError / DimensionError on violated invariants.
  void validate() const;

  /// Output shape for an input of the given shape.
  Shape5 output_shape(const Shape5& input) const;
};

/// Records differentiable operations so their gradients can be replayed.
///
/// One tape belongs to one training context and is not thread-safe.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  enum class Mode { Record, Inference };

  explicit Tape(Mode mode = Mode::Record) : mode_(mode) {}

  bool recording() const { return mode_ == Mode::Record; }

  /// Adds an op. Called by op implementations, not by model code.
  void record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward);

  /// Propagates d(loss)/d(.) into every requires_grad leaf. Intermediate
  /// gradients are reset on each call; leaf gradients accumulate.
  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }
  std::vector<std::string> op_names() const;
  void clear() { records_.clear(); }

 private:
  struct Record {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Mode mode_;
  std::vector<Record> records_;
};

namespace ops {

/// Zero-padded cross-correlation.
Tensor conv3d(Tape& tape, const Tensor& input, const Conv3dParams& params);
/// Adjoint of conv3d with respect to its input, plus bias.
Tensor conv3d_transposed(Tape& tape, const Tensor& input, const Conv3dParams& params);
/// Dispatches on params.transposed.
Tensor apply(Tape& tape, const Tensor& input, const Conv3dParams& params);

Tensor relu(Tape& tape, const Tensor& input);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor concat_channels(Tape& tape, std::span<const Tensor> inputs);
/// Sum of all elements, as a (1,1,1,1,1) tensor.
Tensor sum(Tape& tape, const Tensor& x);

}  // namespace ops

}  // namespace ssr3d
