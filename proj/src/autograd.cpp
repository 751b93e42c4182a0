#include "ssr3d/autograd.hpp"

#include <algorithm>
#include <utility>

#include "conv_kernels.hpp"
#include "ssr3d/errors.hpp"

namespace ssr3d {

namespace {

constexpr const char* kAxisNames[3] = {"band", "row", "col"};

Extent3 spatial(const Shape5& s) { return {s.l, s.h, s.w}; }

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  return std::any_of(ts.begin(), ts.end(), [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

void accumulate(Tensor& dst, std::span<const double> src) {
  auto g = dst.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv3dParams

Conv3dParams Conv3dParams::zeros(std::size_t in_channels, std::size_t out_channels, Extent3 kernel, Extent3 stride,
                                 Extent3 padding, bool transposed, Extent3 output_padding) {
  Conv3dParams p;
  const std::size_t a = transposed ? in_channels : out_channels;
  const std::size_t b = transposed ? out_channels : in_channels;
  p.weight = Tensor(Shape5{a, b, kernel[0], kernel[1], kernel[2]}, true);
  p.bias = Tensor(Shape5{out_channels, 1, 1, 1, 1}, true);
  p.stride = stride;
  p.padding = padding;
  p.output_padding = output_padding;
  p.transposed = transposed;
  p.validate();
  return p;
}

std::size_t Conv3dParams::in_channels() const { return transposed ? weight.shape().n : weight.shape().c; }
std::size_t Conv3dParams::out_channels() const { return transposed ? weight.shape().c : weight.shape().n; }
Extent3 Conv3dParams::kernel() const { return spatial(weight.shape()); }

void Conv3dParams::validate() const {
  if (!weight.defined() || !bias.defined()) throw ContractError("convolution parameters missing weight or bias");
  for (int d = 0; d < 3; ++d) {
    if (stride[d] < 1) throw GeometryError(std::string("stride must be >= 1 on ") + kAxisNames[d] + " axis");
    if (output_padding[d] != 0 && (!transposed || output_padding[d] >= stride[d])) {
      throw GeometryError(std::string("output padding must be < stride and only on transposed convolutions (") +
                          kAxisNames[d] + " axis)");
    }
  }
  const auto& b = bias.shape();
  if (b.n != out_channels() || b.c != 1 || b.l != 1 || b.h != 1 || b.w != 1) {
    throw DimensionError("bias shape " + b.str() + " does not match " + std::to_string(out_channels()) +
                         " output channels");
  }
}

Shape5 Conv3dParams::output_shape(const Shape5& input) const {
  if (input.c != in_channels()) {
    throw DimensionError("channel axis: input has " + std::to_string(input.c) + " channels, layer expects " +
                         std::to_string(in_channels()));
  }
  const Extent3 in = spatial(input);
  const Extent3 k = kernel();
  Extent3 out{};
  for (int d = 0; d < 3; ++d) {
    const auto i = static_cast<long long>(in[d]);
    const auto kk = static_cast<long long>(k[d]);
    const auto s = static_cast<long long>(stride[d]);
    const auto p = static_cast<long long>(padding[d]);
    long long o = 0;
    if (transposed) {
      o = (i - 1) * s - 2 * p + kk + static_cast<long long>(output_padding[d]);
    } else {
      const long long span = i + 2 * p - kk;
      o = span < 0 ? 0 : span / s + 1;
    }
    if (o < 1) {
      throw GeometryError(std::string("zero-sized output on ") + kAxisNames[d] + " axis (input " +
                          std::to_string(i) + ", kernel " + std::to_string(kk) + ", stride " + std::to_string(s) +
                          ", padding " + std::to_string(p) + ")");
    }
    out[d] = static_cast<std::size_t>(o);
  }
  return Shape5{input.n, out_channels(), out[0], out[1], out[2]};
}

// ---------------------------------------------------------------------------
// Tape

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
  if (!recording()) return;
  records_.push_back(Record{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(records_.size());
  for (const auto& r : records_) names.push_back(r.op);
  return names;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got " + (loss.defined() ? loss.shape().str() : "undefined"));
  }
  auto it = std::find_if(records_.rbegin(), records_.rend(),
                         [&](const Record& r) { return r.output.same_storage(loss); });
  if (it == records_.rend()) throw ContractError("backward: loss was not produced on this tape");

  for (auto& r : records_) r.output.zero_grad();
  Tensor seed = loss;
  seed.grad()[0] = 1.0;
  for (; it != records_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {

namespace {

detail::ConvGeometry geometry(const Shape5& small, const Shape5& big, const Conv3dParams& p) {
  detail::ConvGeometry g;
  g.batch = small.n;
  g.small_channels = small.c;
  g.big_channels = big.c;
  g.small = spatial(small);
  g.big = spatial(big);
  g.kernel = p.kernel();
  g.stride = p.stride;
  g.padding = p.padding;
  return g;
}

void add_bias(Tensor& out, const Tensor& bias) {
  const auto& s = out.shape();
  const std::size_t vol = s.volume();
  auto o = out.data();
  auto b = bias.data();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      double* p = o.data() + (n * s.c + c) * vol;
      for (std::size_t i = 0; i < vol; ++i) p[i] += b[c];
    }
  }
}

void bias_grad(const Tensor& out, Tensor& bias) {
  const auto& s = out.shape();
  const std::size_t vol = s.volume();
  auto go = out.grad();
  auto gb = bias.grad();
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const double* p = go.data() + (n * s.c + c) * vol;
      for (std::size_t i = 0; i < vol; ++i) acc += p[i];
    }
    gb[c] += acc;
  }
}

}  // namespace

Tensor conv3d(Tape& tape, const Tensor& input, const Conv3dParams& params) {
  params.validate();
  if (params.transposed) throw ContractError("conv3d called with transposed parameters");
  const Shape5 out_shape = params.output_shape(input.shape());
  const bool needs_grad = any_requires_grad({&input, &params.weight, &params.bias});
  Tensor out(out_shape, needs_grad);
  const auto g = geometry(out_shape, input.shape(), params);
  detail::conv_gather(g, input.data().data(), params.weight.data().data(), out.data().data());
  add_bias(out, params.bias);

  if (needs_grad && tape.recording()) {
    tape.record("conv3d", {input, params.weight, params.bias}, out, [input = Tensor(input), params = Conv3dParams(params), out, g]() mutable {
      const double* go = out.grad().data();
      if (input.requires_grad()) detail::conv_scatter(g, go, params.weight.data().data(), input.grad().data());
      if (params.weight.requires_grad()) detail::conv_weight_grad(g, go, input.data().data(), params.weight.grad().data());
      if (params.bias.requires_grad()) bias_grad(out, params.bias);
    });
  }
  return out;
}

Tensor conv3d_transposed(Tape& tape, const Tensor& input, const Conv3dParams& params) {
  params.validate();
  if (!params.transposed) throw ContractError("conv3d_transposed called with non-transposed parameters");
  const Shape5 out_shape = params.output_shape(input.shape());
  const bool needs_grad = any_requires_grad({&input, &params.weight, &params.bias});
  Tensor out(out_shape, needs_grad);
  const auto g = geometry(input.shape(), out_shape, params);
  detail::conv_scatter(g, input.data().data(), params.weight.data().data(), out.data().data());
  add_bias(out, params.bias);

  if (needs_grad && tape.recording()) {
    tape.record("conv3d_transposed", {input, params.weight, params.bias}, out, [input = Tensor(input), params = Conv3dParams(params), out, g]() mutable {
      const double* go = out.grad().data();
      if (input.requires_grad()) detail::conv_gather(g, go, params.weight.data().data(), input.grad().data());
      if (params.weight.requires_grad()) detail::conv_weight_grad(g, input.data().data(), go, params.weight.grad().data());
      if (params.bias.requires_grad()) bias_grad(out, params.bias);
    });
  }
  return out;
}

Tensor apply(Tape& tape, const Tensor& input, const Conv3dParams& params) {
  return params.transposed ? conv3d_transposed(tape, input, params) : conv3d(tape, input, params);
}

Tensor relu(Tape& tape, const Tensor& input) {
  Tensor out(input.shape(), input.requires_grad());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (out.requires_grad() && tape.recording()) {
    tape.record("relu", {input}, out, [input = Tensor(input), out]() mutable {
      auto go = out.grad();
      auto gx = input.grad();
      auto x = input.data();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (x[i] > 0.0) gx[i] += go[i];
      }
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  const bool needs_grad = a.requires_grad() || b.requires_grad();
  Tensor out(a.shape(), needs_grad);
  auto x = a.data();
  auto y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  if (needs_grad && tape.recording()) {
    tape.record("add", {a, b}, out, [a = Tensor(a), b = Tensor(b), out]() mutable {
      if (a.requires_grad()) accumulate(a, out.grad());
      if (b.requires_grad()) accumulate(b, out.grad());
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Tensor out(x.shape(), x.requires_grad());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = factor * src[i];
  if (out.requires_grad() && tape.recording()) {
    tape.record("scale", {x}, out, [x = Tensor(x), out, factor]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * go[i];
    });
  }
  return out;
}

Tensor concat_channels(Tape& tape, std::span<const Tensor> inputs) {
  if (inputs.empty()) throw ContractError("concat_channels of an empty list");
  Shape5 out_shape = inputs.front().shape();
  out_shape.c = 0;
  bool needs_grad = false;
  for (const auto& t : inputs) {
    const auto& s = t.shape();
    const auto& f = inputs.front().shape();
    if (s.n != f.n || s.l != f.l || s.h != f.h || s.w != f.w) {
      const char* axis = s.n != f.n ? "batch" : s.l != f.l ? "band" : s.h != f.h ? "row" : "col";
      throw DimensionError(std::string("concat_channels: ") + axis + " axis mismatch, " + s.str() + " vs " + f.str());
    }
    out_shape.c += s.c;
    needs_grad = needs_grad || t.requires_grad();
  }
  Tensor out(out_shape, needs_grad);
  const std::size_t vol = out_shape.volume();
  auto dst = out.data();
  std::size_t channel_offset = 0;
  for (const auto& t : inputs) {
    const std::size_t c = t.shape().c;
    auto src = t.data();
    for (std::size_t n = 0; n < out_shape.n; ++n) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(n * c * vol), c * vol,
                  dst.begin() + static_cast<std::ptrdiff_t>((n * out_shape.c + channel_offset) * vol));
    }
    channel_offset += c;
  }

  if (needs_grad && tape.recording()) {
    std::vector<Tensor> held(inputs.begin(), inputs.end());
    tape.record("concat_channels", held, out, [held, out]() mutable {
      const auto& os = out.shape();
      const std::size_t vol = os.volume();
      auto go = out.grad();
      std::size_t offset = 0;
      for (auto& t : held) {
        const std::size_t c = t.shape().c;
        if (t.requires_grad()) {
          auto gt = t.grad();
          for (std::size_t n = 0; n < os.n; ++n) {
            const double* src = go.data() + (n * os.c + offset) * vol;
            double* dst = gt.data() + n * c * vol;
            for (std::size_t i = 0; i < c * vol; ++i) dst[i] += src[i];
          }
        }
        offset += c;
      }
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out(Shape5{}, x.requires_grad());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad() && tape.recording()) {
    tape.record("sum", {x}, out, [x = Tensor(x), out]() mutable {
      const double g = out.grad()[0];
      for (double& v : x.grad()) v += g;
    });
  }
  return out;
}

}  // namespace ops

}  // namespace ssr3d
