#include "ssr3d/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ssr3d/errors.hpp"
#include "ssr3d/gradcheck.hpp"
#include "ssr3d/hsi.hpp"
#include "ssr3d/metrics.hpp"
#include "ssr3d/model.hpp"
#include "ssr3d/trainer.hpp"

namespace ssr3d::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Settings {
  // shared
  std::uint64_t seed = 0;
  std::size_t scale = 2;
  std::optional<std::size_t> eval_scale;
  std::size_t filters = 64;
  std::size_t modules = 3;
  std::size_t units = 3;
  std::string block = "separable";
  std::string lff = "on";
  std::string grl = "on";
  std::string loss = "l1";
  std::string config;
  std::string out;

  // data
  std::string data;
  std::string synth;

  // training
  std::size_t epochs = 100;
  std::size_t batch = 16;
  double lr = 1e-4;
  std::size_t decay_period = 35;
  std::size_t patches = 24;
  std::size_t patch = 32;
  std::string augment = "on";
  double clip = 0.0;
  std::size_t checkpoint_every = 0;

  // eval
  std::string checkpoint;
  std::size_t crop = 512;
  double peak = 1.0;
  bool error_maps = false;
  std::string spectrum;

  // params
  std::string csv;

  // gradcheck
  std::string inject_fault;
  double step = 1e-5;
  double tolerance = 1e-5;
};

std::string to_text(const std::string& v) { return v; }
std::string to_text(std::size_t v) { return std::to_string(v); }
std::string to_text(double v) { return format_double(v); }
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : std::string(); }

// Option keys a subcommand accepts, with a way to read back their resolved value.
struct Registry {
  std::vector<std::pair<std::string, std::function<std::string()>>> keys;

  bool contains(const std::string& key) const {
    return std::any_of(keys.begin(), keys.end(), [&](const auto& k) { return k.first == key; });
  }

  // Resolved key/value pairs for manifests; skips the config file, the
  // output directory and unset optional values.
  std::vector<std::pair<std::string, std::string>> resolved() const {
    std::vector<std::pair<std::string, std::string>> r;
    for (const auto& [key, get] : keys) {
      if (key == "config" || key == "out") continue;
      const std::string v = get();
      if (!v.empty()) r.emplace_back(key, v);
    }
    return r;
  }
};

template <class T>
CLI::Option* add(CLI::App* sub, Registry& reg, const std::string& key, T& var, const std::string& desc) {
  reg.keys.emplace_back(key, [&var] { return to_text(var); });
  return sub->add_option("--" + key, var, desc)->capture_default_str();
}

CLI::Option* add_flag(CLI::App* sub, Registry& reg, const std::string& key, bool& var, const std::string& desc) {
  reg.keys.emplace_back(key, [&var] { return to_text(var); });
  return sub->add_flag("--" + key, var, desc);
}

const std::vector<std::string> kOnOff = {"on", "off"};

void add_common(CLI::App* sub, Registry& reg, Settings& s) {
  add(sub, reg, "seed", s.seed, "Random seed");
  add(sub, reg, "config", s.config, "key = value file (or a manifest.json) with defaults for any flag");
  add(sub, reg, "out", s.out, "Output directory");
}

void add_model(CLI::App* sub, Registry& reg, Settings& s) {
  add(sub, reg, "scale", s.scale, "Upscaling factor")->check(CLI::IsMember({2, 3, 4}));
  add(sub, reg, "filters", s.filters, "Feature channels")->check(CLI::PositiveNumber);
  add(sub, reg, "modules", s.modules, "Number of residual modules (D)")->check(CLI::PositiveNumber);
  add(sub, reg, "units", s.units, "Residual units per module")->check(CLI::PositiveNumber);
  add(sub, reg, "block", s.block, "Block type")->check(CLI::IsMember({"separable", "standard"}));
  add(sub, reg, "lff", s.lff, "Local feature fusion")->check(CLI::IsMember(kOnOff));
  add(sub, reg, "grl", s.grl, "Global residual learning")->check(CLI::IsMember(kOnOff));
}

void add_data(CLI::App* sub, Registry& reg, Settings& s) {
  auto* d = add(sub, reg, "data", s.data, "Directory of .hsc cubes");
  auto* y = add(sub, reg, "synth", s.synth, "Synthetic data, KIND:LxHxW:n=N (KIND: blobs, ramps, checker)");
  d->excludes(y);
  y->excludes(d);
}

void add_training(CLI::App* sub, Registry& reg, Settings& s) {
  add(sub, reg, "loss", s.loss, "Training loss")->check(CLI::IsMember({"l1", "mse", "combo"}));
  add(sub, reg, "epochs", s.epochs, "Training epochs");
  add(sub, reg, "batch", s.batch, "Minibatch size")->check(CLI::PositiveNumber);
  add(sub, reg, "lr", s.lr, "Initial learning rate")->check(CLI::PositiveNumber);
  add(sub, reg, "decay-period", s.decay_period, "Epochs between learning-rate halvings")->check(CLI::PositiveNumber);
  add(sub, reg, "patches", s.patches, "Patches sampled per training cube per epoch")->check(CLI::PositiveNumber);
  add(sub, reg, "patch", s.patch, "HR patch side in pixels")->check(CLI::Range(8, 4096));
  add(sub, reg, "augment", s.augment, "Flip / rotate / rescale augmentation")->check(CLI::IsMember(kOnOff));
  add(sub, reg, "clip", s.clip, "Max gradient L2 norm, 0 disables")->check(CLI::NonNegativeNumber);
  add(sub, reg, "checkpoint-every", s.checkpoint_every, "Epochs between checkpoints, 0 = decay period");
}

// --- helpers -----------------------------------------------------------------

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path, const std::string& command) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::vector<std::pair<std::string, std::string>> pairs;
  if (path.extension() == ".json") {
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("bad manifest " + path.string() + ": " + e.what());
    }
    if (!j.contains("command") || !j.contains("config")) {
      throw ConfigError(path.string() + " is not a run manifest");
    }
    if (j["command"] != command) {
      throw ConfigError("manifest is for '" + j["command"].get<std::string>() + "', not '" + command + "'");
    }
    for (const auto& [k, v] : j["config"].items()) pairs.emplace_back(k, v.get<std::string>());
    return pairs;
  }
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    pairs.emplace_back(key, value);
  }
  return pairs;
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (i + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct SynthSpec {
  SynthKind kind = SynthKind::GaussianBlobs;
  std::string kind_name;
  std::size_t bands = 0, height = 0, width = 0, count = 1;
};

std::size_t parse_count(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-') throw ConfigError("bad " + what + ": '" + s + "'");
  return v;
}

SynthSpec parse_synth_spec(const std::string& text) {
  const std::string usage = "expected KIND:LxHxW[:n=N], got '" + text + "'";
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
  if (parts.size() < 2 || parts.size() > 3) throw ConfigError("--synth: " + usage);
  SynthSpec spec;
  spec.kind = parse_synth_kind(parts[0]);
  spec.kind_name = parts[0];
  std::vector<std::size_t> dims;
  std::stringstream ds(parts[1]);
  for (std::string d; std::getline(ds, d, 'x');) dims.push_back(parse_count(d, "--synth dimension"));
  if (dims.size() != 3) throw ConfigError("--synth: " + usage);
  spec.bands = dims[0];
  spec.height = dims[1];
  spec.width = dims[2];
  if (parts.size() == 3) {
    if (parts[2].rfind("n=", 0) != 0) throw ConfigError("--synth: " + usage);
    spec.count = parse_count(parts[2].substr(2), "--synth count");
    if (spec.count == 0) throw ConfigError("--synth: count must be >= 1");
  }
  return spec;
}

std::vector<NamedCube> synth_cubes(const SynthSpec& spec, std::uint64_t seed) {
  std::vector<NamedCube> cubes;
  for (std::size_t i = 0; i < spec.count; ++i) {
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%03zu", spec.kind_name.c_str(), i);
    cubes.push_back({id, synth_cube(spec.kind, spec.bands, spec.height, spec.width, mix(seed, i))});
  }
  return cubes;
}

std::vector<NamedCube> load_cubes(const Settings& s) {
  if (s.data.empty() && s.synth.empty()) throw ConfigError("one of --data or --synth is required");
  if (!s.synth.empty()) return synth_cubes(parse_synth_spec(s.synth), s.seed);
  if (!fs::is_directory(s.data)) throw Error("--data: not a directory: " + s.data);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(s.data)) {
    if (e.is_regular_file() && e.path().extension() == ".hsc") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("--data: no .hsc files in " + s.data);
  std::vector<NamedCube> cubes;
  for (const auto& f : files) cubes.push_back({f.stem().string(), read_hsc(f)});
  return cubes;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Seeded 80/20 split. A single cube is used for both sides.
Split split_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(seed, 0x5B117ull));
  std::shuffle(order.begin(), order.end(), rng);
  Split split;
  if (n == 1) {
    split.train = split.test = {0};
    return split;
  }
  const auto n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(n))),
                                               1, n - 1);
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

SsrnetConfig model_config(const Settings& s) {
  SsrnetConfig c;
  c.d_modules = s.modules;
  c.units_per_module = s.units;
  c.filters = s.filters;
  c.scale = s.scale;
  c.lff_enabled = s.lff == "on";
  c.grl_enabled = s.grl == "on";
  c.block_kind = parse_block_kind(s.block);
  c.validate();
  return c;
}

TrainConfig train_config(const Settings& s) {
  TrainConfig t;
  t.lr0 = s.lr;
  t.decay_period_epochs = s.decay_period;
  t.epochs = s.epochs;
  t.batch_size = s.batch;
  t.loss_kind = parse_loss_kind(s.loss);
  t.seed = s.seed;
  t.patches_per_image = s.patches;
  t.patch_hw = s.patch;
  if (s.augment == "off") t.augment = AugmentOptions{false, false, {1.0}};
  t.clip_grad_norm = s.clip;
  t.checkpoint_every = s.checkpoint_every;
  t.validate();
  return t;
}

std::string rel(const fs::path& p, const fs::path& base) { return fs::relative(p, base).generic_string(); }

void write_manifest(const std::string& command, const Registry& reg, const Settings& s, const fs::path& out_dir,
                    const std::vector<std::string>& artifacts, json extra = json::object()) {
  fs::create_directories(out_dir);
  json m;
  m["command"] = command;
  m["tool_version"] = kToolVersion;
  m["seed"] = s.seed;
  json cfg = json::object();
  for (const auto& [k, v] : reg.resolved()) cfg[k] = v;
  m["config"] = cfg;
  m["artifacts"] = artifacts;
  m["rerun"] = "ssr3d " + command + " --config <dir>/manifest.json --out <new dir>";
  if (!extra.empty()) m["results"] = extra;
  {
    std::ofstream f(out_dir / "manifest.json", std::ios::trunc);
    f << m.dump(2) << '\n';
  }
  std::ofstream f(out_dir / "run.cfg", std::ios::trunc);
  f << "# ssr3d " << command << '\n';
  for (const auto& [k, v] : reg.resolved()) f << k << " = " << v << '\n';
}

std::string fixed(double v, int digits) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// --- commands ------------------------------------------------------------------

int cmd_train(const Settings& s, const Registry& reg, std::ostream& out) {
  const SsrnetConfig model = model_config(s);
  const TrainConfig tc = train_config(s);
  const auto cubes = load_cubes(s);
  const Split split = split_indices(cubes.size(), s.seed);
  std::vector<HsiCube> train_set;
  json train_ids = json::array();
  json test_ids = json::array();
  for (auto i : split.train) {
    train_set.push_back(cubes[i].cube);
    train_ids.push_back(cubes[i].id);
  }
  for (auto i : split.test) test_ids.push_back(cubes[i].id);

  const fs::path out_dir = s.out;
  out << "training on " << train_set.size() << " cube(s), " << count_params(model).total << " parameters\n";
  const TrainResult result = train(model, tc, train_set, out_dir);

  std::map<std::size_t, std::pair<double, std::size_t>> per_epoch;
  for (const auto& r : result.history) {
    auto& e = per_epoch[r.epoch];
    e.first += r.loss;
    e.second += 1;
  }
  for (const auto& [epoch, e] : per_epoch) {
    out << "epoch " << epoch << "  mean loss " << format_double(e.first / static_cast<double>(e.second)) << '\n';
  }

  std::vector<std::string> artifacts = {"loss.csv"};
  for (const auto& c : result.checkpoints) artifacts.push_back(rel(c, out_dir));
  json extra;
  extra["train_ids"] = train_ids;
  extra["test_ids"] = test_ids;
  extra["steps"] = result.history.size();
  extra["training_mean"] = result.training_mean;
  if (!result.history.empty()) extra["final_loss"] = result.history.back().loss;
  write_manifest("train", reg, s, out_dir, artifacts, extra);
  out << "checkpoint " << result.final_checkpoint.string() << '\n';
  return kExitOk;
}

std::optional<std::pair<std::size_t, std::size_t>> parse_pixel(const std::string& text) {
  if (text.empty()) return std::nullopt;
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ConfigError("--spectrum expects ROW,COL, got '" + text + "'");
  return std::pair{parse_count(trim(text.substr(0, comma)), "--spectrum row"),
                   parse_count(trim(text.substr(comma + 1)), "--spectrum column")};
}

int cmd_eval(const Settings& s, const Registry& reg, std::ostream& out) {
  if (s.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint ckpt = load_checkpoint(s.checkpoint);
  const auto cubes = load_cubes(s);
  EvalOptions opts;
  opts.crop = s.crop;
  opts.peak = s.peak;
  opts.scale = s.eval_scale;
  opts.error_maps = s.error_maps;
  opts.spectrum_pixel = parse_pixel(s.spectrum);
  const fs::path out_dir = s.out;
  const EvaluationReport report = evaluate(ckpt, cubes, opts, out_dir);

  out << std::left << std::setw(16) << "cube" << std::right << std::setw(10) << "PSNR" << std::setw(9) << "SSIM"
      << std::setw(9) << "SAM" << std::setw(14) << "bicubic PSNR" << '\n';
  for (const auto& c : report.cubes) {
    out << std::left << std::setw(16) << c.id << std::right << std::setw(10) << fixed(c.ssrnet.psnr, 3)
        << std::setw(9) << fixed(c.ssrnet.ssim, 4) << std::setw(9) << fixed(c.ssrnet.sam, 3) << std::setw(14)
        << fixed(c.bicubic.psnr, 3) << '\n';
  }
  std::vector<std::string> artifacts = {"metrics.csv", "baseline_metrics.csv"};
  for (const auto& c : report.cubes) {
    if (opts.error_maps) artifacts.push_back("error_maps/" + c.id);
    if (opts.spectrum_pixel) artifacts.push_back("spectrum_" + c.id + ".csv");
  }
  json extra;
  extra["mean_psnr"] = format_double(report.mean_ssrnet.psnr);
  extra["mean_ssim"] = format_double(report.mean_ssrnet.ssim);
  extra["mean_sam"] = format_double(report.mean_ssrnet.sam);
  extra["bicubic_mean_psnr"] = format_double(report.mean_bicubic.psnr);
  write_manifest("eval", reg, s, out_dir, artifacts, extra);
  return kExitOk;
}

int cmd_ablate(const Settings& s, const Registry& reg, std::ostream& out) {
  const SsrnetConfig base = model_config(s);
  const TrainConfig tc = train_config(s);
  const auto cubes = load_cubes(s);
  const Split split = split_indices(cubes.size(), s.seed);
  std::vector<HsiCube> train_set;
  std::vector<NamedCube> test_set;
  for (auto i : split.train) train_set.push_back(cubes[i].cube);
  for (auto i : split.test) test_set.push_back(cubes[i]);
  const fs::path out_dir = s.out;
  fs::create_directories(out_dir);

  struct Row {
    std::string name;
    bool lff, grl;
    std::size_t params;
    MetricsReport metrics;
  };
  std::vector<Row> rows;
  std::vector<std::string> artifacts = {"ablation.csv"};
  for (const auto& [lff, grl] : {std::pair{false, false}, {true, false}, {false, true}, {true, true}}) {
    SsrnetConfig cfg = base;
    cfg.lff_enabled = lff;
    cfg.grl_enabled = grl;
    const std::string name = std::string("LFF") + (lff ? "1" : "0") + "GRL" + (grl ? "1" : "0");
    out << "== " << name << '\n';
    const TrainResult result = train(cfg, tc, train_set, out_dir / name);
    const Checkpoint ckpt{cfg, result.params.quantized(), result.training_mean};
    EvalOptions opts;
    opts.crop = s.crop;
    const EvaluationReport report = evaluate(ckpt, test_set, opts, out_dir / name);
    rows.push_back({name, lff, grl, count_params(cfg).total, report.mean_ssrnet});
    artifacts.push_back(name + "/loss.csv");
    artifacts.push_back(name + "/metrics.csv");
    artifacts.push_back(name + "/final.ssrc");
  }

  {
    std::ofstream csv(out_dir / "ablation.csv", std::ios::trunc);
    csv << "config,lff,grl,params,psnr,ssim,sam\n";
    for (const auto& r : rows) {
      csv << r.name << ',' << r.lff << ',' << r.grl << ',' << r.params << ',' << format_double(r.metrics.psnr) << ','
          << format_double(r.metrics.ssim) << ',' << format_double(r.metrics.sam) << '\n';
    }
  }
  out << std::left << std::setw(10) << "" << std::setw(5) << "LFF" << std::setw(5) << "GRL" << std::right
      << std::setw(10) << "params" << std::setw(10) << "PSNR" << std::setw(9) << "SSIM" << std::setw(9) << "SAM"
      << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(10) << r.name << std::setw(5) << (r.lff ? "x" : "") << std::setw(5)
        << (r.grl ? "x" : "") << std::right << std::setw(10) << r.params << std::setw(10) << fixed(r.metrics.psnr, 3)
        << std::setw(9) << fixed(r.metrics.ssim, 4) << std::setw(9) << fixed(r.metrics.sam, 3) << '\n';
  }
  write_manifest("ablate", reg, s, out_dir, artifacts);
  return kExitOk;
}

int cmd_params(const Settings& s, const Registry& reg, std::ostream& out) {
  const BlockComparison cmp = compare_block_kinds(model_config(s));
  const auto print = [&](const char* title, const ParamCountReport& r) {
    out << title << '\n';
    for (const auto& g : r.groups) {
      out << "  " << std::left << std::setw(10) << g.group << std::right << std::setw(12) << g.total() << '\n';
    }
    out << "  " << std::left << std::setw(10) << "total" << std::right << std::setw(12) << r.total << '\n';
  };
  print("separable", cmp.separable);
  print("standard", cmp.standard);
  out << "ratio " << fixed(cmp.ratio, 5) << '\n';

  const fs::path out_dir = s.out;
  std::vector<std::string> artifacts;
  if (!s.csv.empty()) {
    const fs::path csv_path = s.csv;
    if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw Error("cannot write " + s.csv);
    csv << "block,group,weights,biases,total\n";
    for (const auto* r : {&cmp.separable, &cmp.standard}) {
      const std::string kind = to_string(r->config.block_kind);
      for (const auto& g : r->groups) {
        csv << kind << ',' << g.group << ',' << g.weights << ',' << g.biases << ',' << g.total() << '\n';
      }
      csv << kind << ",total,,," << r->total << '\n';
    }
    artifacts.push_back(fs::absolute(csv_path).generic_string());
  }
  json extra;
  extra["separable_total"] = cmp.separable.total;
  extra["standard_total"] = cmp.standard.total;
  extra["ratio"] = format_double(cmp.ratio);
  write_manifest("params", reg, s, out_dir, artifacts, extra);
  return kExitOk;
}

int cmd_gradcheck(const Settings& s, const Registry& reg, std::ostream& out, std::ostream& err) {
  GradcheckOptions opts;
  opts.seed = s.seed;
  opts.step = s.step;
  opts.tolerance = s.tolerance;
  opts.inject_fault = s.inject_fault;
  const auto rows = run_gradcheck(opts);
  const fs::path out_dir = s.out;
  fs::create_directories(out_dir);
  std::ofstream csv(out_dir / "gradcheck.csv", std::ios::trunc);
  csv << "op,cases,checked,skipped,max_rel_error,passed\n";
  out << std::left << std::setw(20) << "op" << std::right << std::setw(8) << "checked" << std::setw(8)
      << "skipped" << std::setw(16) << "max rel error" << "  result\n";
  std::vector<std::string> failed;
  for (const auto& r : rows) {
    char e[32];
    std::snprintf(e, sizeof(e), "%.3e", r.max_rel_error);
    out << std::left << std::setw(20) << r.op << std::right << std::setw(8) << r.checked << std::setw(8) << r.skipped << std::setw(16) << e << "  "
        << (r.passed ? "ok" : "FAIL") << '\n';
    csv << r.op << ',' << r.cases << ',' << r.checked << ',' << r.skipped << ',' << format_double(r.max_rel_error) << ','
        << (r.passed ? 1 : 0) << '\n';
    if (!r.passed) failed.push_back(r.op);
  }
  csv.close();
  json extra;
  extra["failed"] = failed;
  write_manifest("gradcheck", reg, s, out_dir, {"gradcheck.csv"}, extra);
  if (!failed.empty()) {
    err << "gradient check failed for:";
    for (const auto& f : failed) err << ' ' << f;
    err << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_synth(const Settings& s, const Registry& reg, std::ostream& out) {
  if (s.synth.empty()) throw ConfigError("--synth is required");
  const auto cubes = synth_cubes(parse_synth_spec(s.synth), s.seed);
  const fs::path out_dir = s.out;
  std::vector<std::string> artifacts;
  for (const auto& c : cubes) {
    const fs::path p = out_dir / (c.id + ".hsc");
    write_hsc(c.cube, p);
    artifacts.push_back(rel(p, out_dir));
    out << p.string() << '\n';
  }
  write_manifest("synth", reg, s, out_dir, artifacts);
  return kExitOk;
}

// Training allocates and frees many same-sized multi-megabyte buffers per
// step; keep them on the heap instead of round-tripping through mmap.
void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
    mallopt(M_TOP_PAD, 64 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

// Returns the --config value that follows the subcommand, if any.
std::optional<std::string> find_config(const std::vector<std::string>& args) {
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return std::nullopt;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  tune_allocator();
  Settings s;
  CLI::App app{"Hyperspectral super-resolution with separable 3D convolutions", "ssr3d"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::map<std::string, Registry> regs;
  auto* train_cmd = app.add_subcommand("train", "Train a network");
  add_common(train_cmd, regs["train"], s);
  add_model(train_cmd, regs["train"], s);
  add_data(train_cmd, regs["train"], s);
  add_training(train_cmd, regs["train"], s);

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint against bicubic upsampling");
  {
    auto& r = regs["eval"];
    add_common(eval_cmd, r, s);
    add(eval_cmd, r, "scale", s.eval_scale, "Expected upscaling factor (must match the checkpoint)")
        ->check(CLI::IsMember({2, 3, 4}));
    add_data(eval_cmd, r, s);
    add(eval_cmd, r, "checkpoint", s.checkpoint, "Checkpoint file");
    add(eval_cmd, r, "crop", s.crop, "Side of the top-left evaluation square")->check(CLI::PositiveNumber);
    add(eval_cmd, r, "peak", s.peak, "Peak signal value for PSNR/SSIM")->check(CLI::PositiveNumber);
    add_flag(eval_cmd, r, "error-maps", s.error_maps, "Write per-band absolute-error maps");
    add(eval_cmd, r, "spectrum", s.spectrum, "Write the spectrum of HR pixel ROW,COL");
  }

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and score the four LFF/GRL combinations");
  add_common(ablate_cmd, regs["ablate"], s);
  add_model(ablate_cmd, regs["ablate"], s);
  add_data(ablate_cmd, regs["ablate"], s);
  add_training(ablate_cmd, regs["ablate"], s);
  add(ablate_cmd, regs["ablate"], "crop", s.crop, "Side of the top-left evaluation square")
      ->check(CLI::PositiveNumber);

  auto* params_cmd = app.add_subcommand("params", "Count parameters for separable and standard blocks");
  add_common(params_cmd, regs["params"], s);
  add_model(params_cmd, regs["params"], s);
  add(params_cmd, regs["params"], "csv", s.csv, "Also write the counts as CSV");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  add_common(grad_cmd, regs["gradcheck"], s);
  add(grad_cmd, regs["gradcheck"], "inject-fault", s.inject_fault, "Corrupt this op's analytic gradient (self-test)")
      ->check(CLI::IsMember(gradcheck_ops()));
  add(grad_cmd, regs["gradcheck"], "step", s.step, "Finite-difference step")->check(CLI::PositiveNumber);
  add(grad_cmd, regs["gradcheck"], "tolerance", s.tolerance, "Max relative error")->check(CLI::PositiveNumber);

  auto* synth_cmd = app.add_subcommand("synth", "Write synthetic cubes as .hsc files");
  add_common(synth_cmd, regs["synth"], s);
  add(synth_cmd, regs["synth"], "synth", s.synth, "KIND:LxHxW[:n=N] (KIND: blobs, ramps, checker)");

  try {
    // Config-file values go first so explicit flags override them.
    std::vector<std::string> full = args;
    if (!args.empty() && regs.contains(args[0])) {
      if (const auto path = find_config(args)) {
        const auto& reg = regs.at(args[0]);
        std::vector<std::string> injected;
        for (const auto& [k, v] : read_config(*path, args[0])) {
          if (k == "config" || !reg.contains(k)) {
            throw ConfigError("unknown key '" + k + "' in " + *path + " for command " + args[0]);
          }
          injected.push_back("--" + k + "=" + v);
        }
        full.insert(full.begin() + 1, injected.begin(), injected.end());
      }
    }
    std::vector<std::string> reversed(full.rbegin(), full.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  if (s.out.empty()) s.out = "ssr3d-" + command;
  try {
    const Registry& reg = regs.at(command);
    if (command == "train") return cmd_train(s, reg, out);
    if (command == "eval") return cmd_eval(s, reg, out);
    if (command == "ablate") return cmd_ablate(s, reg, out);
    if (command == "params") return cmd_params(s, reg, out);
    if (command == "gradcheck") return cmd_gradcheck(s, reg, out, err);
    return cmd_synth(s, reg, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace ssr3d::cli
