#include "ssr3d/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "ssr3d/errors.hpp"

namespace ssr3d {

std::string Shape5::str() const {
  std::ostringstream os;
  os << '(' << n << ',' << c << ',' << l << ',' << h << ',' << w << ')';
  return os.str();
}

namespace {

void check_dims(const Shape5& s) {
  if (s.n == 0 || s.c == 0 || s.l == 0 || s.h == 0 || s.w == 0) {
    throw DimensionError("tensor dimensions must all be >= 1, got " + s.str());
  }
}

}  // namespace

Tensor::Tensor(Shape5 shape, bool requires_grad) : Tensor(shape, std::vector<double>(shape.numel(), 0.0), requires_grad) {}

Tensor::Tensor(Shape5 shape, std::vector<double> values, bool requires_grad) {
  check_dims(shape);
  if (values.size() != shape.numel()) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " + shape.str());
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = shape;
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::full(Shape5 shape, double value) {
  return Tensor(shape, std::vector<double>(shape.numel(), value));
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

const Shape5& Tensor::shape() const { return impl().shape; }

std::span<double> Tensor::data() { return impl().data; }
std::span<const double> Tensor::data() const { return impl().data; }

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool on) { impl().requires_grad = on; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<double> Tensor::grad() {
  auto& i = impl();
  if (i.grad.empty()) i.grad.assign(i.data.size(), 0.0);
  return i.grad;
}

std::span<const double> Tensor::grad() const { return impl().grad; }

void Tensor::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

std::size_t Tensor::offset(std::size_t n, std::size_t c, std::size_t l, std::size_t h, std::size_t w) const {
  const auto& s = shape();
  return (((n * s.c + c) * s.l + l) * s.h + h) * s.w + w;
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t l, std::size_t h, std::size_t w) {
  return impl().data[offset(n, c, l, h, w)];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t l, std::size_t h, std::size_t w) const {
  return impl().data[offset(n, c, l, h, w)];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape().str());
  return impl().data[0];
}

Tensor Tensor::clone() const {
  return Tensor(shape(), impl().data, false);
}

Tensor stack_batch(std::span<const Tensor> items) {
  if (items.empty()) throw ContractError("stack_batch of an empty list");
  Shape5 s = items.front().shape();
  for (const auto& t : items) {
    if (t.shape() != s) throw DimensionError("stack_batch shape mismatch: " + t.shape().str() + " vs " + s.str());
    if (t.shape().n != 1) throw DimensionError("stack_batch expects n == 1 items");
  }
  std::vector<double> values;
  values.reserve(s.numel() * items.size());
  for (const auto& t : items) values.insert(values.end(), t.data().begin(), t.data().end());
  s.n = items.size();
  return Tensor(s, std::move(values));
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  const auto& s = x.shape();
  if (count == 0 || begin + count > s.c) {
    throw DimensionError("channel slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + s.str());
  }
  Shape5 out_shape = s;
  out_shape.c = count;
  Tensor out(out_shape);
  const std::size_t vol = s.volume();
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((n * s.c + begin) * vol), count * vol,
                dst.begin() + static_cast<std::ptrdiff_t>(n * count * vol));
  }
  return out;
}

}  // namespace ssr3d
