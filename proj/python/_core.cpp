#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "ssr3d/cli.hpp"
#include "ssr3d/errors.hpp"
#include "ssr3d/gradcheck.hpp"
#include "ssr3d/hsi.hpp"
#include "ssr3d/metrics.hpp"
#include "ssr3d/model.hpp"
#include "ssr3d/trainer.hpp"

namespace py = pybind11;
using namespace ssr3d;

namespace {

using CubeArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

HsiCube to_cube(const CubeArray& a) {
  if (a.ndim() != 3) throw DimensionError("expected a (bands, height, width) array");
  const auto l = static_cast<std::size_t>(a.shape(0));
  const auto h = static_cast<std::size_t>(a.shape(1));
  const auto w = static_cast<std::size_t>(a.shape(2));
  return HsiCube(l, h, w, std::vector<float>(a.data(), a.data() + l * h * w));
}

CubeArray to_array(const HsiCube& c) {
  CubeArray a({c.bands(), c.height(), c.width()});
  std::copy(c.values().begin(), c.values().end(), a.mutable_data());
  return a;
}

py::dict count_dict(const ParamCountReport& r) {
  py::list groups;
  for (const auto& g : r.groups) {
    py::dict d;
    d["group"] = g.group;
    d["weights"] = g.weights;
    d["biases"] = g.biases;
    d["total"] = g.total();
    groups.append(d);
  }
  py::dict out;
  out["block"] = to_string(r.config.block_kind);
  out["groups"] = groups;
  out["total"] = r.total;
  return out;
}

// A network: configuration plus float64 parameters and the training mean.
struct Model {
  SsrnetConfig config;
  ParamStore params;
  double mean = 0.0;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hyperspectral super-resolution with separable 3D convolutions";
  m.attr("__version__") = cli::kToolVersion;

  // Translators run newest first, so the base class is registered first.
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<GeometryError>(m, "GeometryError", base);
  py::register_exception<ContractError>(m, "ContractError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<MetricError>(m, "MetricError", base);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", base);

  py::class_<SsrnetConfig>(m, "Config")
      .def(py::init([](std::size_t filters, std::size_t modules, std::size_t units, std::size_t scale,
                       const std::string& block, bool lff, bool grl) {
             SsrnetConfig c;
             c.filters = filters;
             c.d_modules = modules;
             c.units_per_module = units;
             c.scale = scale;
             c.block_kind = parse_block_kind(block);
             c.lff_enabled = lff;
             c.grl_enabled = grl;
             c.validate();
             return c;
           }),
           py::arg("filters") = 64, py::arg("modules") = 3, py::arg("units") = 3, py::arg("scale") = 2,
           py::arg("block") = "separable", py::arg("lff") = true, py::arg("grl") = true)
      .def_readonly("filters", &SsrnetConfig::filters)
      .def_readonly("modules", &SsrnetConfig::d_modules)
      .def_readonly("units", &SsrnetConfig::units_per_module)
      .def_readonly("scale", &SsrnetConfig::scale)
      .def_readonly("k", &SsrnetConfig::k)
      .def_readonly("lff", &SsrnetConfig::lff_enabled)
      .def_readonly("grl", &SsrnetConfig::grl_enabled)
      .def_property_readonly("block", [](const SsrnetConfig& c) { return to_string(c.block_kind); })
      .def("__eq__", [](const SsrnetConfig& a, const SsrnetConfig& b) { return a == b; })
      .def("__repr__", [](const SsrnetConfig& c) {
        std::ostringstream os;
        os << "Config(filters=" << c.filters << ", modules=" << c.d_modules << ", units=" << c.units_per_module
           << ", scale=" << c.scale << ", block='" << to_string(c.block_kind) << "', lff=" << c.lff_enabled
           << ", grl=" << c.grl_enabled << ")";
        return os.str();
      });

  m.def("count_params", [](const SsrnetConfig& c) { return count_dict(count_params(c)); }, py::arg("config"),
        "Parameter counts per group and in total.");
  m.def(
      "compare_block_kinds",
      [](const SsrnetConfig& c) {
        const auto cmp = compare_block_kinds(c);
        py::dict d;
        d["separable"] = count_dict(cmp.separable);
        d["standard"] = count_dict(cmp.standard);
        d["ratio"] = cmp.ratio;
        return d;
      },
      py::arg("config"));

  py::class_<Model>(m, "Model")
      .def_readonly("config", &Model::config)
      .def_readonly("mean", &Model::mean)
      .def_property_readonly("parameter_count", [](const Model& s) { return s.params.scalar_count(); })
      .def(
          "super_resolve",
          [](const Model& s, const CubeArray& lr) {
            const HsiCube cube = to_cube(lr);
            HsiCube out;
            {
              py::gil_scoped_release release;
              out = super_resolve(cube, s.params, s.config, s.mean);
            }
            return to_array(out);
          },
          py::arg("lr"), "(L, h, w) -> (L, r*h, r*w)")
      .def(
          "save",
          [](const Model& s, const std::filesystem::path& path) {
            save_checkpoint({s.config, s.params, static_cast<float>(s.mean)}, path);
          },
          py::arg("path"));

  m.def(
      "build",
      [](const SsrnetConfig& c, std::uint64_t seed, double mean) { return Model{c, build(c, seed), mean}; },
      py::arg("config"), py::arg("seed") = 0, py::arg("mean") = 0.0, "Freshly initialised network.");
  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& path) {
        Checkpoint ck = load_checkpoint(path);
        return Model{ck.config, std::move(ck.params), ck.training_mean};
      },
      py::arg("path"));

  m.def(
      "synth",
      [](const std::string& kind, std::size_t bands, std::size_t height, std::size_t width, std::uint64_t seed) {
        return to_array(synth_cube(parse_synth_kind(kind), bands, height, width, seed));
      },
      py::arg("kind"), py::arg("bands"), py::arg("height"), py::arg("width"), py::arg("seed") = 0);
  m.def(
      "bicubic_resize",
      [](const CubeArray& a, std::size_t h, std::size_t w) { return to_array(bicubic_resize(to_cube(a), h, w)); },
      py::arg("cube"), py::arg("height"), py::arg("width"));
  m.def(
      "degrade", [](const CubeArray& a, std::size_t r) { return to_array(degrade(to_cube(a), r)); },
      py::arg("cube"), py::arg("scale"));
  m.def(
      "read_hsc", [](const std::filesystem::path& p) { return to_array(read_hsc(p)); }, py::arg("path"));
  m.def(
      "write_hsc", [](const CubeArray& a, const std::filesystem::path& p) { write_hsc(to_cube(a), p); },
      py::arg("cube"), py::arg("path"));

  m.def(
      "psnr", [](const CubeArray& sr, const CubeArray& hr, double peak) { return psnr(to_cube(sr), to_cube(hr), peak); },
      py::arg("sr"), py::arg("hr"), py::arg("peak") = 1.0);
  m.def(
      "ssim", [](const CubeArray& sr, const CubeArray& hr, double peak) { return ssim(to_cube(sr), to_cube(hr), peak); },
      py::arg("sr"), py::arg("hr"), py::arg("peak") = 1.0);
  m.def(
      "sam", [](const CubeArray& sr, const CubeArray& hr) { return sam(to_cube(sr), to_cube(hr)); }, py::arg("sr"),
      py::arg("hr"), "Mean spectral angle in degrees.");

  m.def(
      "lr_at",
      [](std::size_t epoch, double lr0, std::size_t period, double factor) {
        TrainConfig t;
        t.lr0 = lr0;
        t.decay_period_epochs = period;
        t.decay_factor = factor;
        t.validate();
        return lr_at(epoch, t);
      },
      py::arg("epoch"), py::arg("lr0") = 1e-4, py::arg("decay_period") = 35, py::arg("decay_factor") = 0.5);

  m.def(
      "gradcheck",
      [](std::uint64_t seed, const std::string& inject_fault) {
        GradcheckOptions o;
        o.seed = seed;
        o.inject_fault = inject_fault;
        std::vector<GradcheckRow> rows;
        {
          py::gil_scoped_release release;
          rows = run_gradcheck(o);
        }
        py::list out;
        for (const auto& r : rows) {
          py::dict d;
          d["op"] = r.op;
          d["checked"] = r.checked;
          d["skipped"] = r.skipped;
          d["max_rel_error"] = r.max_rel_error;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 0, py::arg("inject_fault") = "");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one command in-process; returns (exit code, stdout, stderr).");
}
