// Python bindings. Images cross the boundary as float32 arrays of shape (H, W, 3).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <optional>
#include <vector>

#include "iclb/cli.hpp"
#include "iclb/harness.hpp"
#include "iclb/metrics.hpp"
#include "iclb/model.hpp"
#include "iclb/poison.hpp"
#include "iclb/store.hpp"
#include "iclb/tasks.hpp"

namespace py = pybind11;
using namespace iclb;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Image to_image(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("expected an (H, W, 3) array");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), 3);
  std::memcpy(img.pixels.data(), a.data(), img.pixels.size() * sizeof(float));
  return img;
}

Array to_array(const Image& img) {
  Array a({img.height, img.width, img.channels});
  std::memcpy(a.mutable_data(), img.pixels.data(), img.pixels.size() * sizeof(float));
  return a;
}

std::vector<Rgb> palette_or_default(const std::optional<std::vector<Rgb>>& p) {
  return p ? *p : segmentation_palette();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "In-context backdoor laboratory for a toy four-panel MIM transformer";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  py::enum_<Direction>(m, "Direction")
      .value("HIGHER_BETTER", Direction::HigherBetter)
      .value("LOWER_BETTER", Direction::LowerBetter);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("panel", &ModelConfig::panel)
      .def_readwrite("patch", &ModelConfig::patch)
      .def_readwrite("dim", &ModelConfig::dim)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("depth", &ModelConfig::depth)
      .def_readwrite("head_depth", &ModelConfig::head_depth)
      .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
      .def_readwrite("mask_ratio", &ModelConfig::mask_ratio)
      .def_readwrite("source_skip", &ModelConfig::source_skip)
      .def_readwrite("seed", &ModelConfig::seed)
      .def("validate", &ModelConfig::validate)
      .def("canonical", &ModelConfig::canonical)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; });

  py::class_<Model<float>>(m, "Model")
      .def(py::init<const ModelConfig&>(), py::arg("config"))
      .def_property_readonly("config", &Model<float>::config)
      .def("parameter_count", &Model<float>::parameter_count)
      .def(
          "predict",
          [](const Model<float>& model, const Array& phi1, const Array& t1, const Array& phi2) {
            return to_array(predict_task(model, to_image(phi1), to_image(t1), to_image(phi2)));
          },
          py::arg("phi1"), py::arg("t1"), py::arg("phi2"),
          "Predicts the query target from one context pair and a query source.");

  m.def("task_names", [] {
    std::vector<std::string> out;
    for (const auto& t : task_registry()) out.push_back(t.name);
    return out;
  });
  m.def("in_domain_task_names", [] {
    std::vector<std::string> out;
    for (const auto& t : in_domain_tasks()) out.push_back(t.name);
    return out;
  });
  m.def("gen_base_image", [](std::uint64_t seed, int size) { return to_array(gen_base_image(seed, size)); },
        py::arg("seed"), py::arg("size") = kDefaultPanel);
  m.def(
      "make_sample",
      [](const std::string& task, std::uint64_t seed, int size) {
        const auto s = make_sample(find_task(task), seed, size);
        return py::make_tuple(to_array(s.phi), to_array(s.t));
      },
      py::arg("task"), py::arg("seed"), py::arg("size") = kDefaultPanel, "Returns (phi, t) for one task sample.");
  m.def(
      "apply_task",
      [](const std::string& task, const Array& phi, std::uint64_t seed) {
        const auto r = apply_task(find_task(task), to_image(phi), seed);
        return py::make_tuple(to_array(r.input), to_array(r.target));
      },
      py::arg("task"), py::arg("phi"), py::arg("seed"));
  m.def("segmentation_palette", [] { return segmentation_palette(); });

  m.def("psnr", [](const Array& a, const Array& b) { return psnr(to_image(a), to_image(b)); });
  m.def("ssim", [](const Array& a, const Array& b) { return ssim(to_image(a), to_image(b)); });
  m.def(
      "miou",
      [](const Array& a, const Array& b, const std::optional<std::vector<Rgb>>& palette) {
        const auto p = palette_or_default(palette);
        return miou(to_image(a), to_image(b), p);
      },
      py::arg("pred"), py::arg("gt"), py::arg("palette") = py::none());
  m.def("degradation", &degradation, py::arg("clean"), py::arg("attacked"), py::arg("direction"),
        "Signed percentage change; negative means worse.");
  m.def("blend", [](const Array& x, const Array& a, double alpha) {
    return to_array(blend(to_image(x), to_image(a), alpha));
  });

  m.def("poison_count", &poison_count, py::arg("n"), py::arg("epsilon"));
  m.def("select_poison_indices", &select_poison_indices, py::arg("n"), py::arg("epsilon"), py::arg("seed"));
  m.def(
      "apply_trigger",
      [](const Array& img, double size_fraction) {
        TriggerSpec t;
        t.size_fraction = size_fraction;
        return to_array(apply_trigger(to_image(img), t));
      },
      py::arg("image"), py::arg("size_fraction") = TriggerSpec{}.size_fraction);
  m.def("make_green_target", [](int h, int w) { return to_array(make_green_target(h, w)); });

  m.def("save_checkpoint", [](const Model<float>& model, const std::string& path) { save_checkpoint(model, path); });
  m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(path); });
  m.def("default_run_config", [] { return run_config_to_json(RunConfig::defaults()).dump(); },
        "Default run configuration as a JSON string.");

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"iclb"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        py::gil_scoped_release release;
        return cli_dispatch(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "Runs the command-line front end in-process and returns its exit code.");
}
