// Python bindings: point clouds, spatial queries, geometric features,
// boundary mining and loss, metrics, training, evaluation and gradient checks.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "geoseg/boundary.hpp"
#include "geoseg/config.hpp"
#include "geoseg/errors.hpp"
#include "geoseg/geomfeat.hpp"
#include "geoseg/gradcheck.hpp"
#include "geoseg/pointcloud.hpp"
#include "geoseg/spatial.hpp"
#include "geoseg/sweep.hpp"
#include "geoseg/training.hpp"

namespace py = pybind11;
using namespace geoseg;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

std::vector<Point3> to_points(const DoubleArray& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw py::value_error("expected an (N, 3) array");
  std::vector<Point3> out(static_cast<std::size_t>(a.shape(0)));
  std::memcpy(out.data(), a.data(), out.size() * sizeof(Point3));
  return out;
}

std::vector<int> to_ints(const IntArray& a) {
  if (a.ndim() != 1) throw py::value_error("expected a 1-D array");
  return {a.data(), a.data() + a.size()};
}

DoubleArray from_points(const std::vector<Point3>& p) {
  DoubleArray out({static_cast<py::ssize_t>(p.size()), py::ssize_t{3}});
  std::memcpy(out.mutable_data(), p.data(), p.size() * sizeof(Point3));
  return out;
}

template <class T>
py::array_t<T> from_vector(const std::vector<T>& v, std::vector<py::ssize_t> shape) {
  py::array_t<T> out(shape);
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(T));
  return out;
}

py::array_t<std::uint32_t> table_indices(const NeighborTable& t) {
  return from_vector(t.indices, {static_cast<py::ssize_t>(t.rows), static_cast<py::ssize_t>(t.k)});
}

NeighborTable knn_table(const std::vector<Point3>& points, std::size_t k) { return KdTree(points).knn(points, k); }

py::dict scores_dict(const Scores& s) {
  py::dict d;
  d["oa"] = s.oa;
  d["miou"] = s.miou;
  d["macc"] = s.macc;
  d["iou"] = s.iou;
  d["acc"] = s.acc;
  d["points"] = s.points;
  return d;
}

py::dict log_dict(const EpochLog& e) {
  py::dict d;
  d["epoch"] = e.epoch;
  d["final_loss"] = e.loss.final_loss;
  d["pred"] = std::vector<double>(e.loss.pred.begin(), e.loss.pred.end());
  d["cbl"] = e.loss.cbl;
  d["total"] = e.loss.total;
  d["eval"] = scores_dict(e.eval);
  d["boundary_miou"] = e.boundary_miou;
  return d;
}

AbsentClassPolicy policy_from(const std::string& s) {
  if (s == "exclude") return AbsentClassPolicy::Exclude;
  if (s == "zero") return AbsentClassPolicy::CountAsZero;
  throw py::value_error("absent must be 'exclude' or 'zero'");
}

}  // namespace

PYBIND11_MODULE(_geoseg, m) {
  m.doc() = "Point-cloud semantic segmentation core";

  auto base = py::register_exception<Error>(m, "GeosegError");
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<ClassMismatchError>(m, "ClassMismatchError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());

  // --- point clouds ------------------------------------------------------------

  py::class_<LabeledCloud>(m, "LabeledCloud")
      .def(py::init([](const DoubleArray& positions, const DoubleArray& colors, const IntArray& labels,
                       int num_classes) {
             LabeledCloud c{to_points(positions), to_points(colors), to_ints(labels), num_classes};
             c.validate();
             return c;
           }),
           py::arg("positions"), py::arg("colors"), py::arg("labels"), py::arg("num_classes"))
      .def_property_readonly("positions", [](const LabeledCloud& c) { return from_points(c.positions); })
      .def_property_readonly("colors", [](const LabeledCloud& c) { return from_points(c.colors); })
      .def_property_readonly("labels",
                             [](const LabeledCloud& c) {
                               return from_vector(c.labels, {static_cast<py::ssize_t>(c.labels.size())});
                             })
      .def_readwrite("num_classes", &LabeledCloud::num_classes)
      .def("__len__", &LabeledCloud::size);

  m.def("load_cloud", [](const std::filesystem::path& p) { return load_cloud(p); }, py::arg("path"));
  m.def("save_cloud",
        [](const LabeledCloud& c, const std::filesystem::path& p, const IntArray& extra) {
          save_cloud(c, p, to_ints(extra));
        },
        py::arg("cloud"), py::arg("path"), py::arg("extra") = IntArray(py::ssize_t{0}));
  m.def("generate_scene", [](const std::string& spec_text) { return generate_scene(parse_scene_spec(spec_text)); },
        py::arg("spec_text"), "Scene from the text of a scene spec.");
  m.def("two_class_scene",
        [](std::uint64_t seed, double extent, double density) {
          return generate_scene(two_class_scene(seed, extent, density));
        },
        py::arg("seed"), py::arg("extent") = 3.0, py::arg("density") = 120.0);
  m.def("sample_column",
        [](const LabeledCloud& c, std::size_t n, double section, std::uint64_t seed) {
          ColumnSample s = sample_column(c, n, section, seed);
          return py::make_tuple(s.cloud, from_vector(s.source_rows, {static_cast<py::ssize_t>(s.source_rows.size())}));
        },
        py::arg("cloud"), py::arg("n"), py::arg("section"), py::arg("seed"));

  // --- spatial -----------------------------------------------------------------

  m.def("knn",
        [](const DoubleArray& points, std::size_t k) {
          const NeighborTable t = knn_table(to_points(points), k);
          return py::make_tuple(table_indices(t), from_vector(t.distances, {static_cast<py::ssize_t>(t.rows),
                                                                             static_cast<py::ssize_t>(t.k)}));
        },
        py::arg("points"), py::arg("k"), "Exact k nearest neighbors of every point (self included).");
  m.def("radius_search",
        [](const DoubleArray& points, const DoubleArray& queries, double radius) {
          const auto pts = to_points(points);
          return KdTree(pts).radius_search(to_points(queries), radius);
        },
        py::arg("points"), py::arg("queries"), py::arg("radius"));
  m.def("farthest_point_sample",
        [](const DoubleArray& points, std::size_t m_, std::uint64_t seed) {
          const auto idx = farthest_point_sample(to_points(points), m_, seed);
          return from_vector(idx, {static_cast<py::ssize_t>(idx.size())});
        },
        py::arg("points"), py::arg("m"), py::arg("seed") = 0);

  // --- geometric features ------------------------------------------------------

  m.def("eigenvalues",
        [](const DoubleArray& points, std::size_t k) {
          const auto pts = to_points(points);
          return from_points(local_covariance_eigenvalues(pts, knn_table(pts, k)));
        },
        py::arg("points"), py::arg("k"), "Descending covariance eigenvalues of each point's k neighborhood.");
  m.def("gcfr_features",
        [](const DoubleArray& points, std::size_t k) {
          const auto pts = to_points(points);
          const GcfrFeatures g = gcfr_features(pts, knn_table(pts, k));
          const std::vector<py::ssize_t> rk{static_cast<py::ssize_t>(g.rows), static_cast<py::ssize_t>(g.k)};
          const std::vector<py::ssize_t> r{static_cast<py::ssize_t>(g.rows)};
          py::dict d;
          d["distance"] = from_vector(g.distance, rk);
          d["azimuth"] = from_vector(g.azimuth, rk);
          d["elevation"] = from_vector(g.elevation, rk);
          d["rel_azimuth"] = from_vector(g.rel_azimuth, rk);
          d["rel_elevation"] = from_vector(g.rel_elevation, rk);
          d["centroid_azimuth"] = from_vector(g.centroid_azimuth, r);
          d["centroid_elevation"] = from_vector(g.centroid_elevation, r);
          return d;
        },
        py::arg("points"), py::arg("k"));
  m.def("local_density",
        [](const DoubleArray& points, std::size_t k) {
          const auto pts = to_points(points);
          const BoundingSphere s = centroid_bounding_sphere(pts);
          const LocalDensity d = local_density(pts, knn_table(pts, k), s.center, s.radius);
          return from_vector(d.ratio, {static_cast<py::ssize_t>(d.ratio.size())});
        },
        py::arg("points"), py::arg("k"));
  m.def("color_features",
        [](const DoubleArray& points, const DoubleArray& colors, std::size_t k) {
          const ColorFeatures c = color_features(to_points(colors), knn_table(to_points(points), k));
          return from_vector(c.concatenated(), {static_cast<py::ssize_t>(c.rows), static_cast<py::ssize_t>(c.k),
                                                static_cast<py::ssize_t>(ColorFeatures::kChannels)});
        },
        py::arg("points"), py::arg("colors"), py::arg("k"));

  // --- boundaries --------------------------------------------------------------

  m.def("mine_boundaries",
        [](const DoubleArray& points, const IntArray& labels, double radius) {
          const BoundaryMask b = mine_boundaries(to_points(points), to_ints(labels), radius);
          py::array_t<bool> out(static_cast<py::ssize_t>(b.size()));
          for (std::size_t i = 0; i < b.size(); ++i) out.mutable_at(i) = b[i] != 0;
          return out;
        },
        py::arg("points"), py::arg("labels"), py::arg("radius") = 0.1);
  m.def("cbl_loss",
        [](const DoubleArray& features, const DoubleArray& points, const IntArray& labels,
           const py::array_t<bool, py::array::c_style | py::array::forcecast>& boundary, std::size_t k, double tau) {
          if (features.ndim() != 2) throw py::value_error("features must be (N, D)");
          const std::vector<double> f(features.data(), features.data() + features.size());
          const ad::Value fv = ad::Value::constant(
              {static_cast<std::size_t>(features.shape(0)), static_cast<std::size_t>(features.shape(1))}, f);
          BoundaryMask mask(boundary.data(), boundary.data() + boundary.size());
          return cbl_loss(fv, to_points(points), to_ints(labels), mask, k, tau).loss.item();
        },
        py::arg("features"), py::arg("points"), py::arg("labels"), py::arg("boundary"), py::arg("k"),
        py::arg("tau") = 1.0);

  // --- metrics -----------------------------------------------------------------

  m.def("score_confusion",
        [](const py::array_t<std::uint64_t, py::array::c_style | py::array::forcecast>& cm, const std::string& absent) {
          if (cm.ndim() != 2 || cm.shape(0) != cm.shape(1)) throw py::value_error("expected a square matrix");
          ConfusionMatrix c(static_cast<int>(cm.shape(0)));
          for (py::ssize_t t = 0; t < cm.shape(0); ++t)
            for (py::ssize_t p = 0; p < cm.shape(1); ++p) c.add(int(t), int(p), cm.at(t, p));
          return scores_dict(score(c, policy_from(absent)));
        },
        py::arg("confusion"), py::arg("absent") = "exclude",
        "Scores of a confusion matrix indexed [truth, prediction].");

  // --- experiments -------------------------------------------------------------

  m.def("parse_config", [](const std::string& text) { return parse_experiment(text).to_text(); }, py::arg("text"),
        "Validates a config and returns its canonical text.");
  m.def("train",
        [](const std::string& config_text, std::optional<std::filesystem::path> checkpoint) {
          const ExperimentConfig cfg = parse_experiment(config_text);
          const Datasets data = load_datasets(cfg);
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = train(data.train, data.eval, cfg.train);
          }
          if (checkpoint) save_checkpoint(*checkpoint, cfg.train.net, r.store);
          py::list log;
          for (const auto& e : r.log) log.append(log_dict(e));
          py::dict out;
          out["log"] = log;
          out["diverged"] = r.diverged;
          out["divergence"] = r.divergence;
          return out;
        },
        py::arg("config_text"), py::arg("checkpoint") = py::none());
  m.def("evaluate",
        [](const std::filesystem::path& checkpoint, const std::vector<LabeledCloud>& scenes, std::size_t column_points,
           double column_section, std::uint64_t seed) {
          LoadedModel model = load_checkpoint(checkpoint);
          std::vector<LabeledCloud> fixed = scenes;
          for (auto& s : fixed) s.num_classes = model.cfg.num_classes;
          const EvalOptions opts{column_points, column_section, AbsentClassPolicy::Exclude, seed};
          const Metrics mt = evaluate(model.net, model.store, fixed, opts);
          py::dict d;
          d["all"] = scores_dict(mt.all);
          d["boundary"] = scores_dict(mt.boundary);
          return d;
        },
        py::arg("checkpoint"), py::arg("scenes"), py::arg("column_points") = 1024, py::arg("column_section") = 2.0,
        py::arg("seed") = 0);
  m.def("sweep",
        [](const std::string& config_text, std::vector<double> lambda1s, std::vector<double> lambda2s,
           bool ablations) {
          const ExperimentConfig cfg = parse_experiment(config_text);
          std::vector<SweepVariant> variants = loss_weight_grid(cfg, lambda1s, lambda2s);
          if (ablations)
            for (auto& v : ablation_variants(cfg)) variants.push_back(std::move(v));
          const Datasets data = load_datasets(cfg);
          std::vector<std::string> rows{sweep_header()};
          py::gil_scoped_release release;
          for (const auto& v : variants) rows.push_back(sweep_row(run_variant(v, data)));
          return rows;
        },
        py::arg("config_text"), py::arg("lambda1s") = std::vector<double>{0.1},
        py::arg("lambda2s") = std::vector<double>{0.1, 0.2, 0.3}, py::arg("ablations") = false);
  m.def("gradcheck",
        [](std::uint64_t seed) {
          py::list out;
          for (const auto& r : run_gradcheck_suite(seed)) {
            py::dict d;
            d["name"] = r.name;
            d["max_rel_error"] = r.max_rel_error;
            d["max_abs_error"] = r.max_abs_error;
            d["entries"] = r.entries;
            d["skipped"] = r.skipped;
            d["passed"] = r.passed();
            out.append(d);
          }
          return out;
        },
        py::arg("seed") = 0);
}
