#include "ssr3d/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>

#include "ssr3d/errors.hpp"

namespace ssr3d {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in (0,1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0,1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  if (!(decay_factor > 0.0 && decay_factor < 1.0)) throw ConfigError("decay_factor must lie in (0,1)");
  if (decay_period_epochs < 1) throw ConfigError("decay_period_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (patches_per_image < 1) throw ConfigError("patches_per_image must be >= 1");
  if (patch_hw < 8) throw ConfigError("patch size must be >= 8");
  if (clip_grad_norm < 0.0) throw ConfigError("clip_grad_norm must be >= 0");
}

// ---------------------------------------------------------------------------
// Optimizer

double lr_at(std::size_t epoch, const TrainConfig& config) {
  const auto halvings = static_cast<double>(epoch / config.decay_period_epochs);
  return config.lr0 * std::pow(config.decay_factor, halvings);
}

void adam_step(ParamStore& params, OptState& state, double lr, const TrainConfig& config) {
  for (auto& [name, p] : params.layers()) {
    for (const Tensor* t : {&p.weight, &p.bias}) {
      for (double g : t->grad()) {
        if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in layer '" + name + "'");
      }
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  const auto update = [&](const std::string& key, Tensor& param) {
    auto& mom = state.moments[key];
    auto value = param.data();
    if (mom.m.empty()) {
      mom.m.assign(value.size(), 0.0);
      mom.v.assign(value.size(), 0.0);
    }
    if (mom.m.size() != value.size()) throw ContractError("optimizer state shape mismatch for '" + key + "'");
    auto grad = param.grad();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      mom.m[i] = config.beta1 * mom.m[i] + (1.0 - config.beta1) * g;
      mom.v[i] = config.beta2 * mom.v[i] + (1.0 - config.beta2) * g * g;
      const double m_hat = mom.m[i] / correction1;
      const double v_hat = mom.v[i] / correction2;
      value[i] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  };
  for (const auto& [name, _] : params.layers()) {
    auto& p = params.at(name);
    update(name + ".weight", p.weight);
    update(name + ".bias", p.bias);
  }
}

// ---------------------------------------------------------------------------
// Data pipeline

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the combined words
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ull) ^ (b * 0xC2B2AE3D27D4EB4Full);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double grad_norm(ParamStore& params) {
  double sq = 0.0;
  for (auto& [_, p] : params.layers()) {
    for (const Tensor* t : {&p.weight, &p.bias}) {
      for (double g : t->grad()) sq += g * g;
    }
  }
  return std::sqrt(sq);
}

void scale_grads(ParamStore& params, double factor) {
  for (const auto& [name, _] : params.layers()) {
    auto& p = params.at(name);
    for (double& g : p.weight.grad()) g *= factor;
    for (double& g : p.bias.grad()) g *= factor;
  }
}

}  // namespace

std::vector<TrainingPair> prepare_epoch(std::span<const HsiCube> cubes, double mean, std::size_t scale,
                                        const TrainConfig& config, std::size_t epoch) {
  std::vector<TrainingPair> pairs;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    const auto seed = mix_seed(config.seed, epoch, i);
    const PatchSet patches = extract_patches(cubes[i], config.patches_per_image, config.patch_hw, seed, i, scale);
    const PatchSet augmented = augment(patches, config.augment);
    for (const auto& p : augmented.patches) {
      pairs.push_back({mean_subtract(degrade(p.cube, scale), mean), mean_subtract(p.cube, mean)});
    }
  }
  return pairs;
}

std::vector<TrainingPair> make_batches(std::vector<TrainingPair> pairs, std::size_t batch_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  // Batches only hold pairs of one size; group in first-appearance order.
  std::vector<std::vector<TrainingPair>> groups;
  for (auto& p : pairs) {
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const auto& g) { return g.front().hr.shape() == p.hr.shape(); });
    if (it == groups.end()) {
      groups.push_back({std::move(p)});
    } else {
      it->push_back(std::move(p));
    }
  }
  std::vector<TrainingPair> batches;
  for (const auto& g : groups) {
    for (std::size_t start = 0; start < g.size(); start += batch_size) {
      const std::size_t end = std::min(g.size(), start + batch_size);
      std::vector<Tensor> lr, hr;
      for (std::size_t i = start; i < end; ++i) {
        lr.push_back(g[i].lr);
        hr.push_back(g[i].hr);
      }
      batches.push_back({stack_batch(lr), stack_batch(hr)});
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(const SsrnetConfig& model, const TrainConfig& config, std::span<const HsiCube> cubes,
                  const fs::path& out_dir) {
  model.validate();
  config.validate();
  if (cubes.empty()) throw ConfigError("training set is empty");
  const bool write = !out_dir.empty();
  if (write) fs::create_directories(out_dir / "checkpoints");

  TrainResult result;
  result.training_mean = static_cast<float>(compute_mean(cubes));
  result.params = build(model, config.seed);
  const double mean = result.training_mean;
  const std::size_t checkpoint_every =
      config.checkpoint_every == 0 ? config.decay_period_epochs : config.checkpoint_every;

  OptState opt;
  ParamStore last_good = result.params.clone();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config);
    auto batches = make_batches(prepare_epoch(cubes, mean, model.scale, config, epoch), config.batch_size,
                                mix_seed(config.seed, epoch, 0xBA7Cull));
    std::size_t skipped_pixels = 0;
    for (const auto& batch : batches) {
      result.params.zero_grad();
      Tape tape;
      const Tensor sr = forward(tape, batch.lr, result.params, model);
      std::size_t skipped = 0;
      Tensor value;
      switch (config.loss_kind) {
        case LossKind::L1: value = l1_loss(tape, sr, batch.hr); break;
        case LossKind::MSE: value = mse_loss(tape, sr, batch.hr); break;
        case LossKind::Combo: value = combo_loss(tape, sr, batch.hr, &skipped); break;
      }
      skipped_pixels += skipped;
      const double loss_value = value.item();
      if (!std::isfinite(loss_value)) {
        if (write) save_checkpoint({model, last_good, result.training_mean}, out_dir / "last_good.ssrc");
        throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      tape.backward(value);
      if (config.clip_grad_norm > 0.0) {
        const double norm = grad_norm(result.params);
        if (norm > config.clip_grad_norm) scale_grads(result.params, config.clip_grad_norm / norm);
      }
      adam_step(result.params, opt, lr, config);
      result.history.push_back({epoch, step, lr, loss_value});
      ++step;
    }
    if (skipped_pixels > 0) {
      std::cerr << "warning: epoch " << epoch << ": " << skipped_pixels
                << " pixel(s) with zero spectra left out of the SAM term\n";
    }
    last_good = result.params.clone();
    if (write && (epoch + 1) % checkpoint_every == 0 && epoch + 1 < config.epochs) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04zu.ssrc", epoch + 1);
      const fs::path path = out_dir / "checkpoints" / name;
      save_checkpoint({model, result.params, result.training_mean}, path);
      result.checkpoints.push_back(path);
    }
  }
  if (write) {
    result.final_checkpoint = out_dir / "final.ssrc";
    save_checkpoint({model, result.params, result.training_mean}, result.final_checkpoint);
    result.checkpoints.push_back(result.final_checkpoint);
    write_loss_csv(result.history, out_dir / "loss.csv");
  }
  return result;
}

TrainResult train(const SsrnetConfig& model, const TrainConfig& config, const std::vector<fs::path>& dataset,
                  const fs::path& out_dir) {
  std::vector<HsiCube> cubes;
  cubes.reserve(dataset.size());
  for (const auto& p : dataset) cubes.push_back(read_hsc(p));
  return train(model, config, cubes, out_dir);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

MetricsReport mean_report(const std::vector<CubeEvaluation>& cubes, bool bicubic) {
  MetricsReport m;
  if (cubes.empty()) return m;
  for (const auto& c : cubes) {
    const auto& r = bicubic ? c.bicubic : c.ssrnet;
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    m.sam += r.sam;
  }
  const auto n = static_cast<double>(cubes.size());
  return {m.psnr / n, m.ssim / n, m.sam / n};
}

}  // namespace

EvaluationReport evaluate(const Checkpoint& checkpoint, std::span<const NamedCube> cubes, const EvalOptions& options,
                          const fs::path& out_dir) {
  const auto& cfg = checkpoint.config;
  const std::size_t r = cfg.scale;
  if (options.scale && *options.scale != r) {
    throw ConfigError("requested scale x" + std::to_string(*options.scale) + " but the checkpoint was trained for x" +
                      std::to_string(r));
  }
  EvaluationReport report;
  for (const auto& named : cubes) {
    const HsiCube& cube = named.cube;
    std::size_t side = std::min({options.crop, cube.height(), cube.width()});
    side -= side % r;
    if (side / r < cfg.k) {
      throw GeometryError("cube '" + named.id + "' is too small to evaluate at x" + std::to_string(r));
    }
    const HsiCube hr = cube.crop(0, 0, side, side);
    const HsiCube lr = degrade(hr, r);
    const HsiCube sr = super_resolve(lr, checkpoint.params, cfg, checkpoint.training_mean);
    const HsiCube bic = bicubic_resize(lr, side, side);
    report.cubes.push_back({named.id, evaluate_metrics(sr, hr, options.peak), evaluate_metrics(bic, hr, options.peak)});

    if (!out_dir.empty()) {
      if (options.error_maps) write_error_maps(sr, hr, out_dir / "error_maps" / named.id);
      if (options.spectrum_pixel) {
        const auto [row, col] = *options.spectrum_pixel;
        write_spectrum_csv(sr, hr, row, col, out_dir / ("spectrum_" + named.id + ".csv"));
      }
    }
  }
  report.mean_ssrnet = mean_report(report.cubes, false);
  report.mean_bicubic = mean_report(report.cubes, true);
  if (!out_dir.empty()) {
    write_metrics_csv(report, false, out_dir / "metrics.csv");
    write_metrics_csv(report, true, out_dir / "baseline_metrics.csv");
  }
  return report;
}

// ---------------------------------------------------------------------------
// Output files

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_loss_csv(std::span<const LossRecord> history, const fs::path& path) {
  auto out = open_out(path);
  out << "epoch,step,lr,loss\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.step << ',' << format_double(r.lr) << ',' << format_double(r.loss) << '\n';
  }
}

void write_metrics_csv(const EvaluationReport& report, bool bicubic, const fs::path& path) {
  auto out = open_out(path);
  out << "cube_id,psnr,ssim,sam\n";
  for (const auto& c : report.cubes) {
    const auto& m = bicubic ? c.bicubic : c.ssrnet;
    out << c.id << ',' << format_double(m.psnr) << ',' << format_double(m.ssim) << ',' << format_double(m.sam) << '\n';
  }
}

void write_error_maps(const HsiCube& sr, const HsiCube& hr, const fs::path& dir) {
  if (sr.bands() != hr.bands() || sr.height() != hr.height() || sr.width() != hr.width()) {
    throw DimensionError("error maps need equally sized cubes");
  }
  fs::create_directories(dir);
  double max_err = 0.0;
  for (std::size_t i = 0; i < sr.size(); ++i) {
    max_err = std::max(max_err, std::abs(static_cast<double>(sr.values()[i]) - hr.values()[i]));
  }
  const double scale = max_err > 0.0 ? 255.0 / max_err : 0.0;
  for (std::size_t b = 0; b < sr.bands(); ++b) {
    char name[32];
    std::snprintf(name, sizeof(name), "band_%03zu.pgm", b);
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + (dir / name).string());
    out << "P5\n" << sr.width() << ' ' << sr.height() << "\n255\n";
    auto s = sr.band(b);
    auto h = hr.band(b);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double e = std::abs(static_cast<double>(s[i]) - h[i]) * scale;
      out.put(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(e), 0L, 255L))));
    }
  }
  auto side = open_out(dir / "scale.txt");
  side << "# pixel = round(|sr - hr| * scale)\n";
  side << "max_abs_error " << format_double(max_err) << '\n';
  side << "scale " << format_double(scale) << '\n';
}

void write_spectrum_csv(const HsiCube& sr, const HsiCube& hr, std::size_t row, std::size_t col, const fs::path& path) {
  if (row >= hr.height() || col >= hr.width()) {
    throw GeometryError("spectrum pixel (" + std::to_string(row) + "," + std::to_string(col) + ") is outside the " +
                        std::to_string(hr.height()) + "x" + std::to_string(hr.width()) + " crop");
  }
  auto out = open_out(path);
  out << "band,hr,sr\n";
  for (std::size_t b = 0; b < hr.bands(); ++b) {
    out << b << ',' << format_double(hr.at(b, row, col)) << ',' << format_double(sr.at(b, row, col)) << '\n';
  }
}

}  // namespace ssr3d
