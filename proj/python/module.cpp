// Python bindings for the benchmark engine's main operations.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

#include <nlohmann/json.hpp>

#include "ttabench/config.hpp"
#include "ttabench/eval.hpp"
#include "ttabench/profiler.hpp"
#include "ttabench/rng.hpp"

namespace py = pybind11;
using namespace ttb;
using nlohmann::json;

namespace {

Tensor tensor_from_array(const py::array_t<float, py::array::c_style |
                                                      py::array::forcecast>& a,
                         int expect_ndim) {
  if (a.ndim() != expect_ndim) {
    throw shape_error("expected a " + std::to_string(expect_ndim) +
                      "-d float32 array");
  }
  Shape shape;
  for (int i = 0; i < a.ndim(); ++i) {
    shape.push_back(static_cast<int>(a.shape(i)));
  }
  Tensor t = Tensor::zeros(shape);
  std::memcpy(t.data(), a.data(), static_cast<std::size_t>(t.numel()) * 4);
  return t;
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::memcpy(out.mutable_data(), t.data(),
              static_cast<std::size_t>(t.numel()) * 4);
  return out;
}

std::vector<CorruptionSpec> specs_from(
    const std::vector<std::pair<std::string, int>>& specs) {
  std::vector<CorruptionSpec> out;
  for (const auto& [tau, mu] : specs) out.push_back({tau, mu});
  return out;
}

AdaptConfig adapt_config_from_dict(const py::dict& d) {
  json config;
  config["adapt"] = json::parse(
      py::str(py::module_::import("json").attr("dumps")(d)).cast<std::string>());
  AdaptConfig cfg = adapt_config_from(config);
  if (d.contains("seed")) cfg.seed = d["seed"].cast<std::uint64_t>();
  if (d.contains("storage_dir")) {
    cfg.storage_dir = d["storage_dir"].cast<std::string>();
  }
  return cfg;
}

json json_from_pyobj(const py::object& obj) {
  return json::parse(
      py::str(py::module_::import("json").attr("dumps")(obj)).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "test-time adaptation benchmark engine";
  m.attr("__version__") = "0.1.0";

  py::register_exception<config_error>(m, "ConfigError");
  py::register_exception<shape_error>(m, "ShapeError");
  py::register_exception<gain_error>(m, "GainError");

  // ---- model ------------------------------------------------------------
  py::class_<Model>(m, "Model")
      .def_readonly("arch_id", &Model::arch_id)
      .def_readonly("class_count", &Model::class_count)
      .def_readonly("feature_dim", &Model::feature_dim)
      .def("digest", &Model::digest)
      .def("clone", &Model::clone)
      .def("param_names", &Model::param_order)
      .def("group_params", &Model::group_params)
      .def("param",
           [](const Model& m_, const std::string& name) {
             return array_from_tensor(m_.param(name));
           })
      .def("save", [](const Model& m_, const std::filesystem::path& path) {
        save_model(m_, path);
      });

  m.def("build_model", &build_model, py::arg("arch_id") = "smallcnn-32",
        py::arg("class_count") = 10, py::arg("seed") = 0);
  m.def("load_model", &load_model, py::arg("path"));

  m.def(
      "forward_eval",
      [](const Model& model, const py::array_t<float, py::array::c_style |
                                                          py::array::forcecast>& batch) {
        ForwardOutput out = forward_eval(model, tensor_from_array(batch, 4));
        return py::make_tuple(array_from_tensor(out.logits),
                              array_from_tensor(out.embeddings));
      },
      py::arg("model"), py::arg("batch"),
      "frozen inference: returns (logits, embeddings)");

  m.def(
      "pretrain_source",
      [](const Model& model, const LabeledDataset& train, int epochs, float lr,
         std::uint64_t seed, float label_smoothing) {
        PretrainOpts opts;
        opts.epochs = epochs;
        opts.lr = lr;
        opts.seed = seed;
        opts.label_smoothing = label_smoothing;
        PretrainLog log;
        Model trained = pretrain_source(model, train, opts, &log);
        return py::make_tuple(trained, log.epoch_losses);
      },
      py::arg("model"), py::arg("train"), py::arg("epochs") = 15,
      py::arg("lr") = 0.05f, py::arg("seed") = 0,
      py::arg("label_smoothing") = 0.0f);

  // ---- datasets ----------------------------------------------------------
  py::class_<LabeledDataset, std::shared_ptr<LabeledDataset>>(m, "Dataset")
      .def_property_readonly("size", &LabeledDataset::size)
      .def_readonly("class_count", &LabeledDataset::class_count)
      .def_readonly("labels", &LabeledDataset::labels)
      .def("digest", &LabeledDataset::digest)
      .def("category_set", &LabeledDataset::category_set)
      .def("domain_set", &LabeledDataset::domain_set)
      .def("images",
           [](const LabeledDataset& ds) { return array_from_tensor(ds.images); })
      .def("image", [](const LabeledDataset& ds, int i) {
        return array_from_tensor(ds.image(i));
      });

  m.def(
      "generate_synthshapes",
      [](int classes, int per_class, std::uint64_t seed) {
        return std::make_shared<LabeledDataset>(
            generate_synthshapes(classes, per_class, seed));
      },
      py::arg("classes") = 10, py::arg("per_class") = 100, py::arg("seed") = 0);
  m.def(
      "load_cifar10_binary",
      [](const std::filesystem::path& path, int subset_per_class,
         std::uint64_t seed) {
        return std::make_shared<LabeledDataset>(
            load_cifar10_binary(path, subset_per_class, seed));
      },
      py::arg("path"), py::arg("subset_per_class") = 0, py::arg("seed") = 0);
  m.def(
      "make_target_domain",
      [](const LabeledDataset& source,
         const std::vector<std::pair<std::string, int>>& specs,
         std::uint64_t seed) {
        return std::make_shared<LabeledDataset>(
            make_target_domain(source, specs_from(specs), seed));
      },
      py::arg("source"), py::arg("specs"), py::arg("seed") = 0);

  // ---- corruptions --------------------------------------------------------
  m.def("corruption_registry", &corruption_registry);
  m.def(
      "apply_corruption",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>&
             image,
         const std::string& tau, int mu, std::uint64_t seed) {
        return array_from_tensor(
            apply_corruption(tensor_from_array(image, 3), {tau, mu}, seed));
      },
      py::arg("image"), py::arg("tau"), py::arg("mu"), py::arg("seed") = 0);
  m.def(
      "compose",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>&
             image,
         const std::vector<std::pair<std::string, int>>& specs,
         std::uint64_t seed) {
        return array_from_tensor(
            compose(tensor_from_array(image, 3), specs_from(specs), seed));
      },
      py::arg("image"), py::arg("specs"), py::arg("seed") = 0);
  m.def("default_pairs", [] {
    std::vector<std::vector<std::pair<std::string, int>>> out;
    for (const auto& stack : default_pairs()) {
      std::vector<std::pair<std::string, int>> s;
      for (const auto& spec : stack) s.emplace_back(spec.tau, spec.mu);
      out.push_back(std::move(s));
    }
    return out;
  });
  m.def("default_triplets", [] {
    std::vector<std::vector<std::pair<std::string, int>>> out;
    for (const auto& stack : default_triplets()) {
      std::vector<std::pair<std::string, int>> s;
      for (const auto& spec : stack) s.emplace_back(spec.tau, spec.mu);
      out.push_back(std::move(s));
    }
    return out;
  });
  m.def("psnr",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>&
               clean,
           const py::array_t<float, py::array::c_style |
                                       py::array::forcecast>& corrupted) {
          return psnr(tensor_from_array(clean, 3),
                      tensor_from_array(corrupted, 3));
        });

  // ---- scenarios -----------------------------------------------------------
  py::class_<ScenarioSplit>(m, "ScenarioSplit")
      .def_property_readonly(
          "delta_size",
          [](const ScenarioSplit& s) { return s.delta_t.size(); })
      .def_property_readonly(
          "ood_size",
          [](const ScenarioSplit& s) {
            return s.delta_ood ? s.delta_ood->size() : 0;
          })
      .def_property_readonly(
          "d_t", [](const ScenarioSplit& s) { return s.d_t; })
      .def_property_readonly("descriptor", [](const ScenarioSplit& s) {
        json j = {{"id", s.descriptor.scenario_id},
                  {"params", json::parse(s.descriptor.params_json)},
                  {"seed", s.descriptor.seed}};
        return py::module_::import("json").attr("loads")(j.dump());
      });

  m.def(
      "scenario1",
      [](std::shared_ptr<LabeledDataset> d_t, int size, std::uint64_t seed) {
        return scenario1(std::move(d_t), size, seed);
      },
      py::arg("d_t"), py::arg("size"), py::arg("seed") = 0);
  m.def(
      "scenario2",
      [](std::shared_ptr<LabeledDataset> d_t, int k, int per_class,
         std::uint64_t seed) {
        return scenario2(std::move(d_t), k, per_class, seed);
      },
      py::arg("d_t"), py::arg("k"), py::arg("per_class"), py::arg("seed") = 0);
  m.def(
      "scenario3",
      [](const std::vector<std::shared_ptr<LabeledDataset>>& domains, int k,
         int per_domain, std::uint64_t seed) {
        std::vector<LabeledDataset> ds;
        for (const auto& d : domains) ds.push_back(*d);
        return scenario3(ds, k, per_domain, seed);
      },
      py::arg("domains"), py::arg("k"), py::arg("per_domain"),
      py::arg("seed") = 0);
  m.def(
      "scenario4",
      [](const LabeledDataset& source,
         const std::vector<std::pair<std::string, int>>& stack, int n,
         std::uint64_t seed) {
        return scenario4(source, specs_from(stack), n, seed);
      },
      py::arg("source"), py::arg("stack"), py::arg("n"), py::arg("seed") = 0);
  m.def("default_s1_sweep", &default_s1_sweep);

  // ---- adaptation and evaluation -------------------------------------------
  m.def("method_registry", &method_registry);
  m.def(
      "adapt",
      [](const std::string& method, const Model& model,
         const ScenarioSplit& split, const py::dict& cfg) {
        AdaptOutcome outcome = run_periodic_adaptation(
            method, model, split, adapt_config_from_dict(cfg));
        py::dict info;
        info["failed"] = outcome.failed;
        info["failure_message"] = outcome.failure_message;
        info["batches"] = outcome.batches;
        info["model_path"] = outcome.model_path.string();
        return py::make_tuple(outcome.model, info);
      },
      py::arg("method"), py::arg("model"), py::arg("split"),
      py::arg("cfg") = py::dict(),
      "periodic adaptation: adapt, save, reload; returns (model, info)");

  m.def(
      "accuracy",
      [](const Model& model, const LabeledDataset& test) {
        return accuracy(model, test).xi;
      },
      py::arg("model"), py::arg("test"));
  m.def(
      "split_accuracy",
      [](const Model& model, const ScenarioSplit& split,
         const std::string& which) {
        if (which == "delta_t") {
          return accuracy(model, split.delta_t, "delta_t").xi;
        }
        if (which == "delta_ood") {
          if (!split.delta_ood) throw config_error("split has no delta_ood");
          return accuracy(model, *split.delta_ood, "delta_ood").xi;
        }
        if (which == "d_t") return accuracy(model, *split.d_t).xi;
        throw config_error("unknown test set id: " + which);
      },
      py::arg("model"), py::arg("split"), py::arg("which"));
  m.def("relative_gain", &relative_gain, py::arg("xi_adapted"),
        py::arg("xi_source"));
  m.def(
      "mean_eval_entropy",
      [](const Model& model, const ScenarioSplit& split) {
        return mean_eval_entropy(model, split.delta_t);
      },
      py::arg("model"), py::arg("split"));
  m.def(
      "batch_trace",
      [](const std::string& method, const Model& model,
         const ScenarioSplit& split, const py::dict& cfg) {
        BatchTrace t =
            batch_trace(method, model, split, adapt_config_from_dict(cfg));
        return py::make_tuple(t.accuracies,
                              t.slope ? py::cast(*t.slope) : py::none());
      },
      py::arg("method"), py::arg("model"), py::arg("split"),
      py::arg("cfg") = py::dict());

  m.def(
      "profile_methods",
      [](const std::vector<std::string>& methods, const Model& model,
         const ScenarioSplit& split, const py::dict& cfg) {
        py::list out;
        for (const auto& r :
             profile_methods(methods, model, split, adapt_config_from_dict(cfg))) {
          py::dict d;
          d["method"] = r.method;
          d["peak_bytes"] = r.peak_bytes;
          d["relative_peak"] = r.relative_peak;
          d["cpu_ms"] = r.cpu_time_ms;
          d["wall_ms"] = r.wall_ms;
          out.append(d);
        }
        return out;
      },
      py::arg("methods"), py::arg("model"), py::arg("split"),
      py::arg("cfg") = py::dict());

  m.def("alloc_stats", [] {
    AllocSnapshot s = alloc_stats();
    py::dict d;
    d["live_bytes"] = s.live_bytes;
    d["peak_bytes"] = s.peak_bytes;
    d["alloc_events"] = s.alloc_events;
    return d;
  });

  // ---- config-driven commands ----------------------------------------------
  m.def("default_run_config", [] {
    return py::module_::import("json").attr("loads")(default_run_config().dump());
  });
  m.def(
      "run_pretrain",
      [](const py::object& config) { cmd_pretrain(json_from_pyobj(config)); },
      py::arg("config"));
  m.def(
      "run_experiment",
      [](const py::object& config) { cmd_run(json_from_pyobj(config)); },
      py::arg("config"));
  m.def(
      "run_profile",
      [](const py::object& config) { cmd_profile(json_from_pyobj(config)); },
      py::arg("config"));
  m.def(
      "run_report",
      [](const std::filesystem::path& records,
         const std::filesystem::path& out) { cmd_report(records, out); },
      py::arg("records"), py::arg("out"));
}
