#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ssr3d {

/// Extents of a rank-5 tensor laid out as (batch, channel, band, row, col).
struct Shape5 {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t l = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t numel() const { return n * c * l * h * w; }
  std::size_t volume() const { return l * h * w; }
  bool operator==(const Shape5&) const = default;

  std::string str() const;
};

/// Dense float64 rank-5 array with an optional gradient buffer.
///
/// A Tensor is a handle: copies share storage, which is what lets the tape
/// route gradients back into parameters. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape5 shape, bool requires_grad = false);
  Tensor(Shape5 shape, std::vector<double> values, bool requires_grad = false);

  static Tensor full(Shape5 shape, double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape5& shape() const;
  std::size_t numel() const { return shape().numel(); }

  std::span<double> data();
  std::span<const double> data() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  /// Gradient buffer, allocated as zeros on first access.
  std::span<double> grad();
  /// Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  double& at(std::size_t n, std::size_t c, std::size_t l, std::size_t h, std::size_t w);
  double at(std::size_t n, std::size_t c, std::size_t l, std::size_t h, std::size_t w) const;
  std::size_t offset(std::size_t n, std::size_t c, std::size_t l, std::size_t h, std::size_t w) const;

  /// Value of a one-element tensor.
  double item() const;

  /// Deep copy of the values; the copy has no gradient and does not require one.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape5 shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;

  Impl& impl();
  const Impl& impl() const;
};

/// Stacks equally shaped tensors with n == 1 along the batch axis. No gradient.
Tensor stack_batch(std::span<const Tensor> items);

/// Copies channels [begin, begin + count). No gradient.
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count);

}  // namespace ssr3d
