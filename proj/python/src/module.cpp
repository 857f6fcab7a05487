#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hbias/lmm.hpp"
#include "hbias/pipeline.hpp"
#include "hbias/report.hpp"
#include "hbias/simengine.hpp"

namespace py = pybind11;
using namespace hbias;

namespace {

py::dict fit_dict(const LmmFit& f) {
  py::dict d;
  d["terms"] = f.terms;
  d["beta"] = f.beta;
  d["se"] = f.se;
  d["z"] = f.z;
  d["p"] = f.p_values;
  d["sigma2_pair"] = f.sigma2_b;
  d["sigma2_residual"] = f.sigma2_e;
  d["theta"] = f.theta;
  d["reml_loglik"] = f.reml_loglik;
  d["n_obs"] = f.n_obs;
  d["n_clusters"] = f.n_clusters;
  d["converged"] = f.converged;
  return d;
}

LmmFit fit_rows(const std::vector<double>& y, const std::vector<std::vector<double>>& x, const std::vector<int>& cluster,
                std::vector<std::string> terms) {
  if (y.size() != x.size() || y.size() != cluster.size())
    throw std::invalid_argument("y, x and cluster must have the same length");
  if (y.empty()) throw std::invalid_argument("no rows");
  const std::size_t p = x.front().size();
  if (terms.empty())
    for (std::size_t k = 0; k < p; ++k) terms.push_back("x" + std::to_string(k));
  if (terms.size() != p) throw std::invalid_argument("term names do not match the number of columns");
  std::map<int, ClusterStats> by_cluster;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (x[i].size() != p) throw std::invalid_argument("ragged design matrix");
    by_cluster.try_emplace(cluster[i], p).first->second.add(x[i].data(), y[i]);
  }
  std::vector<ClusterStats> stats;
  for (auto& [id, s] : by_cluster) stats.push_back(std::move(s));
  return fit_reml(stats, terms);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Homogeneity bias audit: pipeline, similarity engine and REML mixed model";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DependencyMissing>(m, "DependencyMissing", PyExc_RuntimeError);

  m.def("pair_count", &pair_count, py::arg("stories_per_condition"), py::arg("conditions"),
        "Within-condition unordered pairs for equal-size conditions.");
  m.def(
      "cosine",
      [](const std::vector<double>& u, const std::vector<double>& v) {
        return cosine(std::span<const double>(u), std::span<const double>(v));
      },
      py::arg("u"), py::arg("v"));
  m.def("wald_p", &wald_p, py::arg("beta"), py::arg("se"));
  m.def("sha256_hex", [](const std::string& s) { return sha256_hex(s); });

  m.def(
      "fit_lmm",
      [](const std::vector<double>& y, const std::vector<std::vector<double>>& x, const std::vector<int>& cluster,
         const std::vector<std::string>& terms) { return fit_dict(fit_rows(y, x, cluster, terms)); },
      py::arg("y"), py::arg("x"), py::arg("cluster"), py::arg("terms") = std::vector<std::string>{},
      "REML fit of y ~ x + (1 | cluster). x is a list of rows.");

  m.def(
      "run_pipeline",
      [](const std::filesystem::path& config, const std::filesystem::path& out, const std::string& stages,
         std::optional<std::uint64_t> seed, std::optional<std::string> backend) {
        PipelineOptions o;
        o.config_path = config;
        o.out_dir = out;
        o.stages = parse_stages(stages);
        o.seed = seed;
        if (backend) o.backend = parse_backend(*backend);
        std::vector<StageOutcome> outcomes;
        {
          py::gil_scoped_release release;
          outcomes = run_pipeline(o);
        }
        py::list result;
        for (const auto& s : outcomes) {
          py::dict d;
          d["stage"] = std::string(to_string(s.stage));
          d["skipped"] = s.skipped;
          d["detail"] = s.detail;
          result.append(d);
        }
        return result;
      },
      py::arg("config"), py::arg("out") = std::filesystem::path("out"), py::arg("stages") = "all",
      py::arg("seed") = py::none(), py::arg("backend") = py::none());
}
