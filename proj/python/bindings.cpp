#include "maple/autoencoder.hpp"
#include "maple/backbone.hpp"
#include "maple/checkpoint.hpp"
#include "maple/dataset_io.hpp"
#include "maple/geometry.hpp"
#include "maple/harness.hpp"
#include "maple/semisup.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

namespace py = pybind11;
using namespace maple;

namespace {

nlohmann::json to_nlohmann(const py::object& obj) {
  if (obj.is_none()) return nlohmann::json::object();
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

std::vector<backbone::ClassDistribution> rows_to_distributions(const Matrix& probs) {
  std::vector<backbone::ClassDistribution> out;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    backbone::ClassDistribution d;
    d.probs = probs.row(i).transpose();
    d.logits = d.probs.array().max(1e-300).log();
    out.push_back(std::move(d));
  }
  return out;
}

geometry::PointCloudVideo video_from_array(const Matrix& points, int frames) {
  if (frames < 1 || points.rows() % frames != 0) throw std::invalid_argument("points rows must be a multiple of frames");
  geometry::PointCloudVideo v;
  v.video_id = "python";
  v.frames = frames;
  v.num_points = static_cast<int>(points.rows() / frames);
  v.channels = static_cast<int>(points.cols()) - 3;
  v.points = points;
  geometry::validate(v);
  return v;
}

// Backbone weights plus config, for inference from Python.
class Model {
 public:
  Model(const py::object& config, std::uint64_t seed)
      : cfg_(backbone::backbone_config_from_json(to_nlohmann(config))), params_(backbone::init_backbone_params(cfg_, seed)) {}

  static Model from_checkpoint(const std::string& path) {
    const auto ck = checkpoint::load_checkpoint(path);
    Model m(ck.config.at("backbone"));
    checkpoint::restore(ck.store("backbone"), m.params_);
    return m;
  }

  py::dict forward(const Matrix& points, int frames) const {
    const auto out = backbone::destformer_forward(video_from_array(points, frames), params_, cfg_);
    py::dict d;
    d["probs"] = Eigen::VectorXd(out.distribution.probs);
    d["logits"] = Eigen::VectorXd(out.distribution.logits);
    d["global_feature"] = Eigen::VectorXd(out.global.values);
    d["tokens"] = out.g.tokens;
    return d;
  }

  int predict(const Matrix& points, int frames) const {
    return backbone::destformer_forward(video_from_array(points, frames), params_, cfg_).distribution.argmax();
  }

  py::object config() const { return to_python(backbone::to_json(cfg_)); }
  std::size_t num_parameters() const { return params_.num_scalars(); }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& [name, p] : params_) names.push_back(name);
    return names;
  }

 private:
  explicit Model(const nlohmann::json& config)
      : cfg_(backbone::backbone_config_from_json(config)), params_(backbone::init_backbone_params(cfg_, 0)) {}

  backbone::BackboneConfig cfg_;
  backbone::ModelParams params_;
};

}  // namespace

PYBIND11_MODULE(_maple, m) {
  m.doc() = "Point cloud video action recognition with masked pseudo-labeling";

  py::register_exception<std::invalid_argument>(m, "InvalidArgument", PyExc_ValueError);

  m.def("farthest_point_sampling", &geometry::farthest_point_sampling, py::arg("points"), py::arg("k"),
        py::arg("seed_index") = 0);

  m.def(
      "generate_synthetic_action",
      [](int class_id, int frames, int num_points, double noise, std::uint64_t seed) {
        return geometry::generate_synthetic_action(class_id, frames, num_points, noise, seed).points;
      },
      py::arg("class_id"), py::arg("frames") = 16, py::arg("num_points") = 64, py::arg("noise") = 0.02,
      py::arg("seed") = 0, "Returns a (frames * num_points) x 3 array.");

  m.def(
      "split_counts",
      [](const std::vector<int>& class_ids, double ratio, std::uint64_t seed) {
        geometry::DatasetManifest man;
        int classes = 0;
        for (std::size_t i = 0; i < class_ids.size(); ++i) {
          classes = std::max(classes, class_ids[i] + 1);
          man.videos.push_back({"v" + std::to_string(i), "", class_ids[i], 1, 1});
        }
        for (int k = 0; k < classes; ++k) man.class_names.push_back("c" + std::to_string(k));
        const auto s = geometry::split_dataset(man, ratio, seed);
        return std::make_pair(s.labeled_ids.size(), s.unlabeled_ids.size());
      },
      py::arg("class_ids"), py::arg("ratio"), py::arg("seed") = 0, "(labeled, unlabeled) sizes of a split.");

  m.def(
      "generate_dataset",
      [](const std::string& out_dir, const std::string& prefix, int videos_per_class, int num_classes, int frames,
         int num_points, double noise, std::uint64_t seed) {
        io::GenerateOptions g;
        g.videos_per_class = videos_per_class;
        g.num_classes = num_classes;
        g.frames = frames;
        g.num_points = num_points;
        g.noise_scale = noise;
        g.seed = seed;
        g.prefix = prefix;
        std::vector<std::string> names;
        for (int k = 0; k < num_classes; ++k) names.push_back("class" + std::to_string(k));
        io::write_dataset(out_dir, prefix, io::generate_dataset(g), names);
        return (std::filesystem::path(out_dir) / (prefix + ".json")).string();
      },
      py::arg("out_dir"), py::arg("prefix") = "train", py::arg("videos_per_class") = 10, py::arg("num_classes") = 4,
      py::arg("frames") = 16, py::arg("num_points") = 64, py::arg("noise") = 0.02, py::arg("seed") = 0,
      "Writes a synthetic dataset and returns the manifest path.");

  m.def(
      "split_dataset",
      [](const std::string& manifest, double ratio, std::uint64_t seed, const std::string& out) {
        const auto s = geometry::split_dataset(io::read_manifest(manifest), ratio, seed);
        io::write_split(out, s);
        return std::make_pair(s.labeled_ids.size(), s.unlabeled_ids.size());
      },
      py::arg("manifest"), py::arg("ratio"), py::arg("seed"), py::arg("out"),
      "Writes a labeled/unlabeled split and returns its sizes.");

  m.def(
      "sample_mask",
      [](int length, double ratio, std::uint64_t seed) {
        const auto s = autoencoder::sample_mask(length, ratio, seed);
        return std::make_pair(s.visible, s.masked);
      },
      py::arg("length"), py::arg("ratio"), py::arg("seed") = 0, "(visible, masked) token indices.");

  m.def("kl_divergence", &autoencoder::kl_divergence, py::arg("p"), py::arg("q"),
        py::arg("eps") = autoencoder::kProbabilityClamp);
  m.def(
      "maple_loss",
      [](const Matrix& p, const Matrix& q) { return autoencoder::maple_loss(rows_to_distributions(p), rows_to_distributions(q)); },
      py::arg("targets"), py::arg("reconstructed"));
  m.def(
      "vat_loss",
      [](const Matrix& p, const Matrix& q) { return semisup::vat_loss(rows_to_distributions(p), rows_to_distributions(q)); },
      py::arg("clean"), py::arg("perturbed"));
  m.def(
      "entmin_loss", [](const Matrix& p) { return semisup::entmin_loss(rows_to_distributions(p)); },
      py::arg("distributions"));

  m.def(
      "estimate_flops",
      [](const py::object& config, const std::string& mode, int frames, int num_points) {
        const auto cfg = backbone::backbone_config_from_json(to_nlohmann(config));
        if (mode != "decoupled" && mode != "joint") throw std::invalid_argument("mode must be decoupled or joint");
        const auto f = backbone::estimate_flops(
            cfg, mode == "joint" ? backbone::AttentionMode::Joint : backbone::AttentionMode::Decoupled, frames, num_points);
        py::dict d;
        d["p4conv"] = f.p4conv;
        d["attention"] = f.attention();
        d["head"] = f.head;
        d["total"] = f.total();
        return d;
      },
      py::arg("config"), py::arg("mode"), py::arg("frames"), py::arg("num_points"));

  m.def(
      "lr_at",
      [](int epoch, const py::object& config, std::optional<int> total) {
        const auto cfg = harness::train_config_from_json(to_nlohmann(config));
        return harness::lr_at(epoch, cfg, total.value_or(cfg.epochs));
      },
      py::arg("epoch"), py::arg("config") = py::none(), py::arg("total_epochs") = py::none());

  m.def(
      "run_experiment",
      [](const std::string& manifest_path) {
        const auto manifest = harness::read_run_manifest(manifest_path);
        nlohmann::json summary;
        {
          py::gil_scoped_release release;
          summary = harness::run_experiment(manifest);
        }
        return to_python(summary);
      },
      py::arg("manifest"), "Runs a training manifest and returns its summary.");

  m.def(
      "report",
      [](const std::string& run_dir) { return to_python(harness::report(run_dir).summary); },
      py::arg("run_dir"));

  py::class_<Model>(m, "Model")
      .def(py::init<const py::object&, std::uint64_t>(), py::arg("config") = py::none(), py::arg("seed") = 0)
      .def_static("from_checkpoint", &Model::from_checkpoint, py::arg("path"))
      .def("forward", &Model::forward, py::arg("points"), py::arg("frames"))
      .def("predict", &Model::predict, py::arg("points"), py::arg("frames"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("num_parameters", &Model::num_parameters)
      .def("parameter_names", &Model::parameter_names);
}
