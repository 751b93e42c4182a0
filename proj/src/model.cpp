#include "ssr3d/model.hpp"

#include <cmath>
#include <random>
#include <set>

#include "bytes.hpp"
#include "ssr3d/errors.hpp"

namespace ssr3d {

std::string to_string(BlockKind kind) { return kind == BlockKind::Separable ? "separable" : "standard"; }

BlockKind parse_block_kind(const std::string& name) {
  if (name == "separable") return BlockKind::Separable;
  if (name == "standard") return BlockKind::Standard;
  throw ConfigError("unknown block kind '" + name + "' (expected separable or standard)");
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Ife: return "ife";
    case LayerKind::Spectral: return "spectral";
    case LayerKind::Spatial: return "spatial";
    case LayerKind::Standard: return "standard";
    case LayerKind::PointwiseFuse: return "pointwise-fuse";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::Final: return "final";
  }
  return "?";
}

void SsrnetConfig::validate() const {
  if (d_modules < 1) throw ConfigError("d_modules must be >= 1");
  if (units_per_module < 1) throw ConfigError("units_per_module must be >= 1");
  if (filters < 1) throw ConfigError("filters must be >= 1");
  if (k < 3 || k % 2 == 0) throw ConfigError("kernel size k must be odd and >= 3, got " + std::to_string(k));
  if (scale < 2) throw ConfigError("scale must be >= 2, got " + std::to_string(scale));
}

// ---------------------------------------------------------------------------
// Layer plan

namespace {

LayerSpec cube_layer(std::string name, LayerKind kind, std::size_t in, std::size_t out, std::size_t k) {
  const std::size_t p = k / 2;
  return LayerSpec{std::move(name), kind, in, out, {k, k, k}, {1, 1, 1}, {p, p, p}, {0, 0, 0}, false};
}

void append_block(LayerPlan& plan, const std::string& prefix, const SsrnetConfig& cfg) {
  const std::size_t f = cfg.filters;
  const std::size_t k = cfg.k;
  const std::size_t p = k / 2;
  if (cfg.block_kind == BlockKind::Separable) {
    plan.push_back({prefix + ".spectral", LayerKind::Spectral, f, f, {k, 1, 1}, {1, 1, 1}, {p, 0, 0}, {0, 0, 0}, false});
    plan.push_back({prefix + ".spatial", LayerKind::Spatial, f, f, {1, k, k}, {1, 1, 1}, {0, p, p}, {0, 0, 0}, false});
  } else {
    plan.push_back(cube_layer(prefix + ".conv", LayerKind::Standard, f, f, k));
  }
}

std::string module_prefix(std::size_t d) { return "m" + std::to_string(d); }
std::string block_prefix(std::size_t d, std::size_t n, std::size_t j) {
  return module_prefix(d) + ".u" + std::to_string(n) + ".b" + std::to_string(j);
}
std::string unit_prefix(std::size_t d, std::size_t n) { return module_prefix(d) + ".u" + std::to_string(n); }

}  // namespace

LayerSpec upsample_layer(std::size_t filters, std::size_t scale) {
  const std::size_t pad = (scale + 1) / 2;
  const std::size_t extra = 2 * pad - scale;
  return LayerSpec{"upsample",         LayerKind::Upsample, filters, filters, {3, 2 * scale, 2 * scale},
                   {1, scale, scale},  {1, pad, pad},       {0, extra, extra}, true};
}

LayerPlan plan_layers(const SsrnetConfig& cfg) {
  cfg.validate();
  LayerPlan plan;
  plan.push_back(cube_layer("ife", LayerKind::Ife, 1, cfg.filters, cfg.k));
  for (std::size_t d = 0; d < cfg.d_modules; ++d) {
    for (std::size_t n = 0; n < cfg.units_per_module; ++n) {
      append_block(plan, block_prefix(d, n, 0), cfg);
      append_block(plan, block_prefix(d, n, 1), cfg);
    }
    if (cfg.lff_enabled) {
      plan.push_back(LayerSpec{module_prefix(d) + ".fuse", LayerKind::PointwiseFuse, cfg.units_per_module * cfg.filters,
                               cfg.filters, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {0, 0, 0}, false});
    }
    append_block(plan, module_prefix(d) + ".block", cfg);
  }
  plan.push_back(upsample_layer(cfg.filters, cfg.scale));
  plan.push_back(cube_layer("final", LayerKind::Final, cfg.filters, 1, cfg.k));
  return plan;
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::insert(const std::string& name, Conv3dParams params) {
  if (!layers_.emplace(name, std::move(params)).second) throw ContractError("duplicate parameter name '" + name + "'");
}

const Conv3dParams& ParamStore::at(const std::string& name) const {
  auto it = layers_.find(name);
  if (it == layers_.end()) throw ContractError("no parameters named '" + name + "'");
  return it->second;
}

Conv3dParams& ParamStore::at(const std::string& name) {
  auto it = layers_.find(name);
  if (it == layers_.end()) throw ContractError("no parameters named '" + name + "'");
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t total = 0;
  for (const auto& [_, p] : layers_) total += p.scalar_count();
  return total;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : layers_) {
    p.weight.zero_grad();
    p.bias.zero_grad();
  }
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, p] : layers_) {
    Conv3dParams c = p;
    c.weight = p.weight.clone();
    c.bias = p.bias.clone();
    c.weight.set_requires_grad(true);
    c.bias.set_requires_grad(true);
    out.layers_.emplace(name, std::move(c));
  }
  return out;
}

ParamStore ParamStore::quantized() const {
  ParamStore out = clone();
  for (auto& [_, p] : out.layers_) {
    for (double& v : p.weight.data()) v = static_cast<float>(v);
    for (double& v : p.bias.data()) v = static_cast<float>(v);
  }
  return out;
}

bool ParamStore::values_equal(const ParamStore& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  auto it = other.layers_.begin();
  for (const auto& [name, p] : layers_) {
    const auto& [oname, op] = *it++;
    if (name != oname || p.weight.shape() != op.weight.shape() || p.bias.shape() != op.bias.shape()) return false;
    if (!std::equal(p.weight.data().begin(), p.weight.data().end(), op.weight.data().begin())) return false;
    if (!std::equal(p.bias.data().begin(), p.bias.data().end(), op.bias.data().begin())) return false;
  }
  return true;
}

ParamStore build_zero(const SsrnetConfig& config) {
  ParamStore store;
  for (const auto& spec : plan_layers(config)) {
    store.insert(spec.name, Conv3dParams::zeros(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                                                spec.padding, spec.transposed, spec.output_padding));
  }
  return store;
}

ParamStore build(const SsrnetConfig& config, std::uint64_t seed) {
  ParamStore store = build_zero(config);
  std::mt19937_64 rng(seed);
  for (const auto& spec : plan_layers(config)) {
    const double fan_in = static_cast<double>(spec.in_channels * spec.kernel[0] * spec.kernel[1] * spec.kernel[2]);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (double& v : store.at(spec.name).weight.data()) v = dist(rng);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Forward

Tensor block_forward(Tape& tape, const Tensor& x, const ParamStore& params, const std::string& prefix,
                     BlockKind kind) {
  if (kind == BlockKind::Standard) return ops::conv3d(tape, x, params.at(prefix + ".conv"));
  Tensor h = ops::relu(tape, ops::conv3d(tape, x, params.at(prefix + ".spectral")));
  return ops::relu(tape, ops::conv3d(tape, h, params.at(prefix + ".spatial")));
}

Tensor unit_forward(Tape& tape, const Tensor& x, const ParamStore& params, const std::string& prefix,
                    BlockKind kind) {
  Tensor h = block_forward(tape, x, params, prefix + ".b0", kind);
  h = block_forward(tape, h, params, prefix + ".b1", kind);
  return ops::add(tape, h, x);
}

Tensor module_forward(Tape& tape, const Tensor& x, const ParamStore& params, std::size_t module_index,
                      const SsrnetConfig& config) {
  if (x.shape().c != config.filters) {
    throw DimensionError("module input has " + std::to_string(x.shape().c) + " channels, expected " +
                         std::to_string(config.filters));
  }
  std::vector<Tensor> unit_outputs;
  unit_outputs.reserve(config.units_per_module);
  Tensor u = x;
  for (std::size_t n = 0; n < config.units_per_module; ++n) {
    u = unit_forward(tape, u, params, unit_prefix(module_index, n), config.block_kind);
    unit_outputs.push_back(u);
  }
  Tensor fused = unit_outputs.back();
  if (config.lff_enabled) {
    const auto prefix = module_prefix(module_index);
    fused = ops::relu(tape, ops::conv3d(tape, ops::concat_channels(tape, unit_outputs), params.at(prefix + ".fuse")));
  }
  return block_forward(tape, ops::add(tape, fused, x), params, module_prefix(module_index) + ".block",
                       config.block_kind);
}

Tensor forward(Tape& tape, const Tensor& lr, const ParamStore& params, const SsrnetConfig& config) {
  config.validate();
  const auto& s = lr.shape();
  if (s.c != 1) throw DimensionError("network input must have one channel, got " + s.str());
  if (s.l < config.k || s.h < config.k || s.w < config.k) {
    throw GeometryError("input " + s.str() + " is smaller than the " + std::to_string(config.k) + "^3 kernel");
  }
  const Tensor f0 = ops::conv3d(tape, lr, params.at("ife"));
  Tensor features = f0;
  for (std::size_t d = 0; d < config.d_modules; ++d) {
    features = module_forward(tape, features, params, d, config);
    if (config.grl_enabled) features = ops::add(tape, features, f0);
  }
  Tensor up = ops::conv3d_transposed(tape, features, params.at("upsample"));
  return ops::conv3d(tape, up, params.at("final"));
}

HsiCube super_resolve(const HsiCube& lr, const ParamStore& params, const SsrnetConfig& config, double mean) {
  Tape tape(Tape::Mode::Inference);
  return mean_restore(forward(tape, mean_subtract(lr, mean), params, config), mean);
}

// ---------------------------------------------------------------------------
// Parameter counting

ParamCountReport count_params(const SsrnetConfig& config) {
  ParamCountReport report;
  report.config = config;
  report.groups = {{"ife"}, {"units"}, {"fuse"}, {"blocks"}, {"upsample"}, {"final"}};
  const auto group_of = [](const std::string& name) -> std::size_t {
    if (name == "ife") return 0;
    if (name == "upsample") return 4;
    if (name == "final") return 5;
    if (name.find(".fuse") != std::string::npos) return 2;
    if (name.find(".block") != std::string::npos) return 3;
    return 1;
  };
  for (const auto& spec : plan_layers(config)) {
    auto& g = report.groups[group_of(spec.name)];
    g.weights += spec.weight_count();
    g.biases += spec.bias_count();
  }
  for (const auto& g : report.groups) report.total += g.total();
  return report;
}

BlockComparison compare_block_kinds(SsrnetConfig config) {
  BlockComparison out;
  config.block_kind = BlockKind::Separable;
  out.separable = count_params(config);
  config.block_kind = BlockKind::Standard;
  out.standard = count_params(config);
  out.ratio = static_cast<double>(out.separable.total) / static_cast<double>(out.standard.total);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ck.config.validate();
  detail::ByteWriter w;
  w.raw("SSRC", 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  const auto& c = ck.config;
  for (std::size_t v : {c.d_modules, c.units_per_module, c.filters, c.k, c.scale}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<std::uint8_t>(c.lff_enabled ? 1 : 0);
  w.put<std::uint8_t>(c.grl_enabled ? 1 : 0);
  w.put<std::uint8_t>(c.block_kind == BlockKind::Separable ? 0 : 1);
  w.put<float>(ck.training_mean);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(2 * ck.params.size()));

  const auto put_tensor = [&](const std::string& name, const Tensor& t) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    const auto& s = t.shape();
    w.put<std::uint8_t>(5);
    for (std::size_t d : {s.n, s.c, s.l, s.h, s.w}) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.put<float>(static_cast<float>(v));
  };
  for (const auto& [name, p] : ck.params.layers()) {
    put_tensor(name + ".weight", p.weight);
    put_tensor(name + ".bias", p.bias);
  }
  w.append_crc();
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (r.get_string(4, "magic") != "SSRC") r.fail("bad magic", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.get<std::uint16_t>("version"); v != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(v), version_at);
  }
  Checkpoint ck;
  auto& c = ck.config;
  const std::size_t config_at = r.offset();
  c.d_modules = r.get<std::uint32_t>("d_modules");
  c.units_per_module = r.get<std::uint32_t>("units_per_module");
  c.filters = r.get<std::uint32_t>("filters");
  c.k = r.get<std::uint32_t>("k");
  c.scale = r.get<std::uint32_t>("scale");
  c.lff_enabled = r.get<std::uint8_t>("lff") != 0;
  c.grl_enabled = r.get<std::uint8_t>("grl") != 0;
  const auto kind = r.get<std::uint8_t>("block_kind");
  if (kind > 1) r.fail("bad block kind " + std::to_string(kind), r.offset() - 1);
  c.block_kind = kind == 0 ? BlockKind::Separable : BlockKind::Standard;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid config (") + e.what() + ")", config_at);
  }
  ck.training_mean = r.get<float>("training_mean");

  ck.params = build_zero(c);
  const std::size_t count_at = r.offset();
  const auto entries = r.get<std::uint32_t>("entry count");
  if (entries != 2 * ck.params.size()) {
    r.fail("expected " + std::to_string(2 * ck.params.size()) + " entries, found " + std::to_string(entries), count_at);
  }
  std::set<std::string> seen;
  for (std::uint32_t e = 0; e < entries; ++e) {
    const std::size_t entry_at = r.offset();
    const auto len = r.get<std::uint16_t>("name length");
    const std::string name = r.get_string(len, "name");
    const auto dot = name.rfind('.');
    const std::string layer = dot == std::string::npos ? name : name.substr(0, dot);
    const std::string field = dot == std::string::npos ? "" : name.substr(dot + 1);
    if (!ck.params.contains(layer) || (field != "weight" && field != "bias")) {
      r.fail("unexpected entry '" + name + "'", entry_at);
    }
    if (!seen.insert(name).second) r.fail("duplicate entry '" + name + "'", entry_at);
    Tensor& t = field == "weight" ? ck.params.at(layer).weight : ck.params.at(layer).bias;
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank != 5) r.fail("entry '" + name + "' has rank " + std::to_string(rank), entry_at);
    Shape5 s;
    s.n = r.get<std::uint32_t>("dim");
    s.c = r.get<std::uint32_t>("dim");
    s.l = r.get<std::uint32_t>("dim");
    s.h = r.get<std::uint32_t>("dim");
    s.w = r.get<std::uint32_t>("dim");
    if (s != t.shape()) r.fail("entry '" + name + "' has shape " + s.str() + ", expected " + t.shape().str(), entry_at);
    std::vector<float> values(s.numel());
    r.get_f32(values, "values");
    auto dst = t.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) r.fail("non-finite value in '" + name + "'", entry_at);
      dst[i] = values[i];
    }
  }
  r.check_crc();
  return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace ssr3d
