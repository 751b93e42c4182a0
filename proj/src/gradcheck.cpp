#include "ssr3d/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "ssr3d/autograd.hpp"
#include "ssr3d/errors.hpp"
#include "ssr3d/metrics.hpp"
#include "ssr3d/model.hpp"

namespace ssr3d {

namespace {

using Builder = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

struct Case {
  std::vector<Tensor> inputs;  // every tensor here is differentiated
  Builder build;
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  // Magnitude in [lo, hi] with a random sign; keeps values off kinks at 0.
  double signed_away(double lo, double hi) { return (gen_() & 1u ? 1.0 : -1.0) * uniform(lo, hi); }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(gen_);
  }

  Tensor tensor(Shape5 shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape, true);
    for (double& v : t.data()) v = uniform(lo, hi);
    return t;
  }

 private:
  std::mt19937_64 gen_;
};

// <x, w> recorded on the tape; reduces any op output to a scalar with a
// non-uniform upstream gradient.
Tensor project(Tape& tape, const Tensor& x, const std::vector<double>& w) {
  Tensor out(Shape5{}, x.requires_grad());
  auto v = x.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * w[i];
  out.data()[0] = acc;
  if (out.requires_grad() && tape.recording()) {
    tape.record("project", {x}, out, [x = Tensor(x), out, w]() mutable {
      const double g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
    });
  }
  return out;
}

std::vector<double> weights_for(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return w;
}

// Wraps a tensor-valued op into a scalar builder with a fixed projection.
Builder projected(Rng& rng, std::size_t out_numel, std::function<Tensor(Tape&, std::vector<Tensor>&)> op) {
  auto w = weights_for(rng, out_numel);
  return [op = std::move(op), w = std::move(w)](Tape& tape, std::vector<Tensor>& in) {
    return project(tape, op(tape, in), w);
  };
}

struct CaseResult {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_abs_diff = 0.0;
  double max_abs_numeric = 0.0;
};

// A coordinate whose central differences at h and h/2 disagree by more than
// this fraction of the tolerance scale has a ReLU switching inside the
// window; its numeric derivative is meaningless and it is skipped.
constexpr double kKinkFraction = 0.1;

CaseResult check_case(Case& c, double h, double tolerance, bool corrupt) {
  for (auto& t : c.inputs) t.zero_grad();
  {
    Tape tape;
    const Tensor loss = c.build(tape, c.inputs);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : c.inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  const auto eval = [&] {
    Tape tape(Tape::Mode::Inference);
    return c.build(tape, c.inputs).item();
  };
  const auto central = [&](double& x, double step) {
    const double saved = x;
    x = saved + step;
    const double fp = eval();
    x = saved - step;
    const double fm = eval();
    x = saved;
    return (fp - fm) / (2.0 * step);
  };
  std::vector<std::vector<double>> numeric, half;
  double scale = 0.0;
  for (auto& t : c.inputs) {
    auto x = t.data();
    numeric.emplace_back(x.size());
    half.emplace_back(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      numeric.back()[i] = central(x[i], h);
      half.back()[i] = central(x[i], h / 2);
      scale = std::max(scale, std::abs(numeric.back()[i]));
    }
  }
  const auto kink = [&](std::size_t k, std::size_t i) {
    return std::abs(numeric[k][i] - half[k][i]) > kKinkFraction * tolerance * scale;
  };

  if (corrupt) {
    // Harness self-test: a wrong backward must be caught. Corrupt a smooth
    // coordinate so the fault cannot hide behind a skipped one.
    auto& g = analytic.front();
    std::size_t i = g.size() / 2;
    while (i + 1 < g.size() && kink(0, i)) ++i;
    g[i] = g[i] * 1.05 + 1e-3;
  }

  CaseResult r;
  r.max_abs_numeric = scale;
  for (std::size_t k = 0; k < c.inputs.size(); ++k) {
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      if (kink(k, i)) {
        ++r.skipped;
        continue;
      }
      r.max_abs_diff = std::max(r.max_abs_diff, std::abs(analytic[k][i] - numeric[k][i]));
      ++r.checked;
    }
  }
  return r;
}

Conv3dParams random_conv(Rng& rng, std::size_t in, std::size_t out, Extent3 kernel, Extent3 stride, Extent3 padding,
                         bool transposed = false, Extent3 output_padding = {0, 0, 0}) {
  auto p = Conv3dParams::zeros(in, out, kernel, stride, padding, transposed, output_padding);
  for (double& v : p.weight.data()) v = rng.uniform(-1.0, 1.0);
  for (double& v : p.bias.data()) v = rng.uniform(-0.5, 0.5);
  return p;
}

struct ConvGeom {
  std::size_t in, out;
  Shape5 input;
  Extent3 kernel, stride, padding, output_padding;
};

std::vector<Case> conv_cases(Rng& rng, bool transposed) {
  const std::vector<ConvGeom> geoms = {
      {2, 3, {1, 2, 4, 5, 5}, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}},
      {1, 2, {2, 1, 5, 4, 6}, {3, 1, 1}, {1, 1, 1}, {1, 0, 0}, {0, 0, 0}},
      {2, 2, {1, 2, 3, 6, 5}, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}, {0, 1, 0}},
      {3, 2, {1, 3, 3, 3, 4}, {3, 4, 4}, {1, 2, 2}, {1, 1, 1}, {0, 0, 0}},
      {2, 1, {1, 2, 3, 3, 3}, {3, 6, 6}, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}},
  };
  std::vector<Case> cases;
  for (const auto& g : geoms) {
    if (!transposed && g.output_padding != Extent3{0, 0, 0}) continue;
    auto p = random_conv(rng, g.in, g.out, g.kernel, g.stride, g.padding, transposed,
                         transposed ? g.output_padding : Extent3{0, 0, 0});
    Shape5 in_shape = g.input;
    in_shape.c = g.in;
    Tensor x = rng.tensor(in_shape);
    const std::size_t out_numel = p.output_shape(in_shape).numel();
    Builder b = projected(rng, out_numel, [stride = p.stride, padding = p.padding, op = p.output_padding,
                                           transposed](Tape& tape, std::vector<Tensor>& in) {
      Conv3dParams q;
      q.weight = in[1];
      q.bias = in[2];
      q.stride = stride;
      q.padding = padding;
      q.output_padding = op;
      q.transposed = transposed;
      return ops::apply(tape, in[0], q);
    });
    cases.push_back({{x, p.weight, p.bias}, std::move(b)});
  }
  return cases;
}

std::vector<Case> relu_cases(Rng& rng) {
  Tensor x({2, 3, 3, 4, 4}, true);
  for (double& v : x.data()) v = rng.signed_away(0.05, 1.0);
  return {{{x}, projected(rng, x.numel(), [](Tape& t, std::vector<Tensor>& in) { return ops::relu(t, in[0]); })}};
}

std::vector<Case> add_cases(Rng& rng) {
  const Shape5 s{2, 2, 3, 3, 4};
  return {{{rng.tensor(s), rng.tensor(s)},
           projected(rng, s.numel(), [](Tape& t, std::vector<Tensor>& in) { return ops::add(t, in[0], in[1]); })}};
}

std::vector<Case> scale_cases(Rng& rng) {
  const Shape5 s{1, 2, 3, 4, 4};
  return {{{rng.tensor(s)},
           projected(rng, s.numel(), [](Tape& t, std::vector<Tensor>& in) { return ops::scale(t, in[0], -1.75); })}};
}

std::vector<Case> concat_cases(Rng& rng) {
  std::vector<Tensor> xs = {rng.tensor({2, 1, 3, 3, 3}), rng.tensor({2, 3, 3, 3, 3}), rng.tensor({2, 2, 3, 3, 3})};
  return {{xs, projected(rng, 2 * 6 * 27, [](Tape& t, std::vector<Tensor>& in) {
             return ops::concat_channels(t, in);
           })}};
}

std::vector<Case> sum_cases(Rng& rng) {
  return {{{rng.tensor({2, 2, 3, 3, 3})}, [](Tape& t, std::vector<Tensor>& in) { return ops::sum(t, in[0]); }}};
}

// sr/hr pairs for the pixel losses: differences kept away from zero so |.| is smooth.
std::pair<Tensor, Tensor> loss_pair(Rng& rng, Shape5 s, bool positive) {
  Tensor sr(s, true);
  Tensor hr(s, true);
  auto a = sr.data();
  auto b = hr.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    b[i] = positive ? rng.uniform(0.2, 1.0) : rng.uniform(-1.0, 1.0);
    a[i] = positive ? rng.uniform(0.2, 1.0) : b[i] + rng.signed_away(0.05, 0.5);
  }
  return {sr, hr};
}

std::vector<Case> loss_cases(Rng& rng, LossKind kind) {
  std::vector<Case> cases;
  for (Shape5 s : {Shape5{1, 1, 4, 3, 3}, Shape5{2, 1, 5, 2, 3}}) {
    auto [sr, hr] = loss_pair(rng, s, kind == LossKind::Combo);
    cases.push_back({{sr, hr}, [kind](Tape& t, std::vector<Tensor>& in) { return loss(t, kind, in[0], in[1]); }});
  }
  return cases;
}

std::vector<Case> sam_cases(Rng& rng) {
  std::vector<Case> cases;
  for (Shape5 s : {Shape5{1, 1, 4, 3, 3}, Shape5{2, 1, 6, 2, 2}}) {
    auto [sr, hr] = loss_pair(rng, s, true);
    cases.push_back({{sr, hr}, [](Tape& t, std::vector<Tensor>& in) { return sam_loss(t, in[0], in[1]); }});
  }
  return cases;
}

std::vector<Case> model_cases(Rng& rng, std::uint64_t seed) {
  SsrnetConfig cfg;
  cfg.filters = 4;
  cfg.d_modules = 1;
  cfg.units_per_module = 1;
  cfg.scale = 2;
  ParamStore params = build(cfg, seed);
  std::vector<Tensor> inputs;
  Tensor lr({1, 1, 5, 6, 6}, true);
  for (double& v : lr.data()) v = rng.uniform(-0.5, 0.5);
  inputs.push_back(lr);
  for (const auto& [name, p] : params.layers()) {
    for (double& v : params.at(name).bias.data()) v = rng.uniform(-0.1, 0.1);
    inputs.push_back(p.weight);
    inputs.push_back(p.bias);
  }
  const std::size_t out_numel = 5 * 12 * 12;
  Builder b = projected(rng, out_numel, [params, cfg](Tape& t, std::vector<Tensor>& in) {
    return forward(t, in[0], params, cfg);
  });
  return {{inputs, std::move(b)}};
}

}  // namespace

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> names = {
      "conv3d",  "conv3d_transposed", "relu",     "add",      "scale",      "concat_channels",
      "sum",     "l1_loss",           "mse_loss", "sam_loss", "combo_loss", "ssrnet"};
  return names;
}

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& options) {
  const auto& names = gradcheck_ops();
  if (!options.inject_fault.empty() &&
      std::find(names.begin(), names.end(), options.inject_fault) == names.end()) {
    throw ConfigError("unknown op for fault injection: '" + options.inject_fault + "'");
  }
  if (!(options.step > 0.0)) throw ConfigError("finite-difference step must be > 0");

  std::vector<GradcheckRow> rows;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const std::string& name = names[k];
    Rng rng(options.seed * 1000003ull + k);
    std::vector<Case> cases;
    if (name == "conv3d") cases = conv_cases(rng, false);
    else if (name == "conv3d_transposed") cases = conv_cases(rng, true);
    else if (name == "relu") cases = relu_cases(rng);
    else if (name == "add") cases = add_cases(rng);
    else if (name == "scale") cases = scale_cases(rng);
    else if (name == "concat_channels") cases = concat_cases(rng);
    else if (name == "sum") cases = sum_cases(rng);
    else if (name == "l1_loss") cases = loss_cases(rng, LossKind::L1);
    else if (name == "mse_loss") cases = loss_cases(rng, LossKind::MSE);
    else if (name == "sam_loss") cases = sam_cases(rng);
    else if (name == "combo_loss") cases = loss_cases(rng, LossKind::Combo);
    else cases = model_cases(rng, options.seed);

    GradcheckRow row;
    row.op = name;
    const bool corrupt = options.inject_fault == name;
    for (auto& c : cases) {
      const CaseResult r = check_case(c, options.step, options.tolerance, corrupt);
      const double rel = r.max_abs_diff / std::max(r.max_abs_numeric, 1e-300);
      row.max_rel_error = std::max(row.max_rel_error, rel);
      row.checked += r.checked;
      row.skipped += r.skipped;
      ++row.cases;
    }
    // Too many non-smooth coordinates means the case itself is broken.
    row.passed = row.max_rel_error <= options.tolerance && row.checked > 0 &&
                 static_cast<double>(row.skipped) <= kMaxSkippedFraction * static_cast<double>(row.checked + row.skipped);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ssr3d
