#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "saessd/designsim.hpp"
#include "saessd/model.hpp"
#include "saessd/planning.hpp"
#include "saessd/population.hpp"
#include "saessd/reliability.hpp"
#include "saessd/sampling.hpp"
#include "saessd/ssd.hpp"

namespace py = pybind11;
using namespace saessd;

namespace {

ScenarioId scenario_from(const std::string& name) {
    auto id = parse_scenario(name);
    if (!id) throw py::value_error("unknown scenario " + name);
    return *id;
}

CovariateMatrix no_covariates(const Population& pop) {
    CovariateMatrix x;
    x.values.resize(static_cast<Eigen::Index>(pop.num_areas()), 0);
    x.scaled = true;
    return x;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Binary sample size search for small-area prevalence surveys";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
    py::register_exception<FitFailure>(m, "FitFailure", PyExc_RuntimeError);
    py::register_exception<InfeasibleInterval>(m, "InfeasibleInterval", PyExc_RuntimeError);
    py::register_exception<StepAborted>(m, "StepAborted", PyExc_RuntimeError);

    py::class_<Population>(m, "Population")
        .def(py::init<std::vector<std::string>, std::vector<std::string>, std::vector<Count>, std::vector<Count>>(),
             py::arg("area_ids"), py::arg("group_labels"), py::arg("headcounts"), py::arg("outcomes"),
             "Cells are group-major: cell(j, d) = j * D + d.")
        .def_property_readonly("area_ids", &Population::area_ids)
        .def_property_readonly("group_labels", &Population::group_labels)
        .def_property_readonly("headcounts", &Population::headcounts)
        .def_property_readonly("outcomes", &Population::outcomes)
        .def_property_readonly("num_areas", &Population::num_areas)
        .def_property_readonly("num_groups", &Population::num_groups)
        .def_property_readonly("num_cells", &Population::num_cells)
        .def_property_readonly("total", &Population::total)
        .def("cell", &Population::cell, py::arg("group"), py::arg("area"))
        .def("prevalence", &Population::prevalence);

    py::class_<AdjacencyGraph>(m, "AdjacencyGraph")
        .def(py::init<std::size_t>(), py::arg("num_areas"))
        .def(py::init([](std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
                 AdjacencyGraph g(n);
                 for (auto [a, b] : edges) g.add_edge(a, b);
                 return g;
             }),
             py::arg("num_areas"), py::arg("edges"))
        .def("add_edge", &AdjacencyGraph::add_edge)
        .def("neighbors", &AdjacencyGraph::neighbors)
        .def_property_readonly("num_areas", &AdjacencyGraph::num_areas)
        .def_property_readonly("num_edges", &AdjacencyGraph::num_edges)
        .def_property_readonly("num_components", &AdjacencyGraph::num_components);

    py::class_<CovariateMatrix>(m, "CovariateMatrix")
        .def(py::init([](const Eigen::MatrixXd& values, std::vector<std::string> names) {
                 CovariateMatrix x;
                 x.values = values;
                 x.names = std::move(names);
                 return scale_covariates(x);
             }),
             py::arg("values"), py::arg("names") = std::vector<std::string>{}, "Columns are centred and scaled.")
        .def_readonly("values", &CovariateMatrix::values)
        .def_readonly("names", &CovariateMatrix::names);

    py::class_<SampleRealization>(m, "Sample")
        .def(py::init([](std::vector<Count> n, std::vector<Count> y) {
                 SampleRealization s;
                 s.n = std::move(n);
                 s.y = std::move(y);
                 return s;
             }),
             py::arg("n"), py::arg("y"))
        .def_readonly("n", &SampleRealization::n)
        .def_readonly("y", &SampleRealization::y)
        .def_readonly("fraction", &SampleRealization::fraction);

    m.def("load_population", &load_population, py::arg("path"));
    m.def(
        "load_covariates",
        [](const std::filesystem::path& p, const Population& pop) {
            return scale_covariates(load_covariates(p, pop.area_ids()));
        },
        py::arg("path"), py::arg("population"));
    m.def(
        "load_adjacency",
        [](const std::filesystem::path& p, const Population& pop) { return load_adjacency(p, pop.area_ids()).graph; },
        py::arg("path"), py::arg("population"));

    m.def(
        "synth_population",
        [](std::size_t areas, std::size_t groups, std::vector<double> rates, std::uint64_t seed) {
            SynthOptions o;
            o.num_areas = areas;
            o.num_groups = groups;
            if (rates.empty()) {
                rates.resize(groups);
                for (std::size_t j = 0; j < groups; ++j) rates[j] = 0.05 + 0.3 * static_cast<double>(j) / std::max<std::size_t>(1, groups - 1);
            }
            o.prevalence_profile = std::move(rates);
            o.seed = seed;
            auto b = synth_population(o);
            return py::make_tuple(b.population, b.covariates, b.graph);
        },
        py::arg("areas") = 50, py::arg("groups") = 3, py::arg("rates") = std::vector<double>{}, py::arg("seed") = 1,
        "Returns (population, covariates, graph) on a rook lattice.");

    m.def(
        "draw_design_sample",
        [](const Population& pop, double f, std::uint64_t seed) {
            RandomStream rng(seed);
            return draw_design_sample(pop, f, rng);
        },
        py::arg("population"), py::arg("fraction"), py::arg("seed"));

    py::class_<ModelSpec>(m, "ModelSpec")
        .def(py::init<>())
        .def_static("for_scenario", [](const std::string& s) { return ModelSpec::for_scenario(scenario_from(s)); })
        .def_readwrite("include_covariates", &ModelSpec::include_covariates)
        .def_readwrite("include_spatial", &ModelSpec::include_spatial)
        .def_readwrite("include_exchangeable", &ModelSpec::include_exchangeable)
        .def_readwrite("shared_covariate_effects", &ModelSpec::shared_covariate_effects)
        .def_readwrite("fixed_effect_prior_sd", &ModelSpec::fixed_effect_prior_sd);

    py::class_<FittedPosterior>(m, "FittedPosterior")
        .def_readonly("cell_mean", &FittedPosterior::cell_mean)
        .def_readonly("cell_var", &FittedPosterior::cell_var)
        .def_readonly("logit_mean", &FittedPosterior::logit_mean)
        .def_readonly("logit_var", &FittedPosterior::logit_var)
        .def_property_readonly("converged", [](const FittedPosterior& p) { return p.diagnostics.converged; })
        .def_property_readonly("warnings", [](const FittedPosterior& p) { return p.diagnostics.warnings; })
        .def_property_readonly("max_rhat", [](const FittedPosterior& p) { return p.diagnostics.max_rhat; });

    auto covariates_or_none = [](const Population& pop, const std::optional<CovariateMatrix>& x) {
        return x ? *x : no_covariates(pop);
    };
    m.def(
        "fit_laplace",
        [covariates_or_none](const ModelSpec& spec, const SampleRealization& s, const Population& pop,
                             const std::optional<CovariateMatrix>& x, const std::optional<AdjacencyGraph>& g) {
            py::gil_scoped_release release;
            return fit_laplace(spec, s, pop, covariates_or_none(pop, x), g ? *g : AdjacencyGraph(pop.num_areas()));
        },
        py::arg("spec"), py::arg("sample"), py::arg("population"), py::arg("covariates") = py::none(),
        py::arg("graph") = py::none());
    m.def(
        "fit_mcmc",
        [covariates_or_none](const ModelSpec& spec, const SampleRealization& s, const Population& pop,
                             const std::optional<CovariateMatrix>& x, const std::optional<AdjacencyGraph>& g,
                             int chains, int burn_in, int samples, std::uint64_t seed) {
            ChainConfig c;
            c.num_chains = chains;
            c.burn_in = burn_in;
            c.samples = samples;
            c.seed = seed;
            py::gil_scoped_release release;
            return fit_mcmc(spec, s, pop, covariates_or_none(pop, x), g ? *g : AdjacencyGraph(pop.num_areas()), c);
        },
        py::arg("spec"), py::arg("sample"), py::arg("population"), py::arg("covariates") = py::none(),
        py::arg("graph") = py::none(), py::arg("chains") = 4, py::arg("burn_in") = 2000, py::arg("samples") = 5000,
        py::arg("seed") = 1);

    py::enum_<LossKind>(m, "LossKind")
        .value("WEIGHTED", LossKind::Weighted)
        .value("COUNT", LossKind::Count)
        .value("PROPORTION", LossKind::Proportion);

    m.def("rse", &rse, py::arg("mean"), py::arg("var"));
    m.def(
        "loss",
        [](LossKind kind, const std::vector<double>& r, const std::vector<bool>& eligible, const Population& pop) {
            return loss(kind, r, eligible, pop);
        },
        py::arg("kind"), py::arg("rse"), py::arg("eligible"), py::arg("population"));

    py::class_<SsdConfig>(m, "SsdConfig")
        .def(py::init<>())
        .def_readwrite("f_a", &SsdConfig::f_a)
        .def_readwrite("f_b", &SsdConfig::f_b)
        .def_readwrite("h", &SsdConfig::h)
        .def_readwrite("L", &SsdConfig::L)
        .def_readwrite("kappa", &SsdConfig::kappa)
        .def_readwrite("gamma", &SsdConfig::gamma)
        .def_readwrite("loss_kind", &SsdConfig::loss_kind)
        .def_readwrite("use_estimated_eligibility", &SsdConfig::use_estimated_eligibility)
        .def_readwrite("master_seed", &SsdConfig::master_seed)
        .def_readwrite("pilot_fraction", &SsdConfig::pilot_fraction)
        .def_readwrite("jobs", &SsdConfig::jobs)
        .def("validate", &SsdConfig::validate);

    py::class_<SsdTrace>(m, "SsdTrace")
        .def_property_readonly("solution_interval",
                               [](const SsdTrace& t) { return py::make_tuple(t.solution_interval.lo, t.solution_interval.hi); })
        .def_readonly("recommended_fraction", &SsdTrace::recommended_fraction)
        .def_readonly("recommended_ess", &SsdTrace::recommended_ess)
        .def_readonly("warnings", &SsdTrace::warnings)
        .def_property_readonly("midpoint_evaluations", &SsdTrace::midpoint_evaluations)
        .def_property_readonly("steps", [](const SsdTrace& t) {
            py::list rows;
            for (const auto& s : t.steps) {
                py::dict d;
                d["k"] = s.k;
                d["f_k"] = s.f_k;
                d["mean_loss_true"] = s.mean_loss_true;
                d["mean_loss_est"] = s.mean_loss_est;
                d["risk_true"] = s.risk_true;
                d["risk_est"] = s.risk_est;
                d["interval"] = py::make_tuple(s.interval_after.lo, s.interval_after.hi);
                d["failures"] = s.failures;
                rows.append(d);
            }
            return rows;
        });

    m.def("k_max", &k_max, py::arg("f_a"), py::arg("f_b"), py::arg("h"));
    m.def("halving_steps", &halving_steps, py::arg("f_a"), py::arg("f_b"), py::arg("h"));
    m.def(
        "run_ssd_stub",
        [](const SsdConfig& cfg, double threshold, Count population_total) {
            return run_ssd_search(cfg, threshold_stub(threshold, cfg.L), population_total);
        },
        py::arg("config"), py::arg("threshold"), py::arg("population_total") = 0,
        "Search on a deterministic loss that is 1 below `threshold` and 0 above it.");
    m.def(
        "run_ssd",
        [covariates_or_none](const Population& pop, const std::optional<CovariateMatrix>& x,
                             const std::optional<AdjacencyGraph>& g, const ModelSpec& spec, const SsdConfig& cfg) {
            py::gil_scoped_release release;
            return run_ssd(pop, covariates_or_none(pop, x), g ? *g : AdjacencyGraph(pop.num_areas()), spec, cfg);
        },
        py::arg("population"), py::arg("covariates"), py::arg("graph"), py::arg("spec"), py::arg("config"));

    m.def("fraction_to_ess", py::overload_cast<double, Count>(&fraction_to_ess), py::arg("fraction"),
          py::arg("population_total"));
    m.def(
        "ess_to_actual", [](Count ess, double deff) { return ess_to_actual(ess, {deff, ""}); }, py::arg("ess"),
        py::arg("deff"));

    m.def("direct_variance", &direct_variance, py::arg("ybar"), py::arg("fraction"), py::arg("headcount"));
    m.def("direct_rse", &direct_rse, py::arg("ybar"), py::arg("fraction"), py::arg("headcount"));

    py::class_<MetricsTable>(m, "MetricsTable")
        .def_readonly("replications", &MetricsTable::replications)
        .def_readonly("fraction", &MetricsTable::fraction)
        .def_readonly("failed_fits", &MetricsTable::failed_fits)
        .def_readonly("missing_estimates", &MetricsTable::missing_estimates)
        .def_property_readonly("per_cell",
                               [](const MetricsTable& t) {
                                   py::list rows;
                                   for (const auto& c : t.per_cell) {
                                       py::dict d;
                                       d["rmse"] = c.rmse;
                                       d["bias"] = c.bias;
                                       d["arb"] = c.arb;
                                       d["rse"] = c.rse;
                                       d["rseb"] = c.rseb;
                                       d["rse_theory"] = c.rse_theory;
                                       rows.append(d);
                                   }
                                   return rows;
                               })
        .def_property_readonly("per_group", [](const MetricsTable& t) {
            py::list rows;
            for (const auto& g : t.per_group) {
                py::dict d;
                d["group"] = g.label;
                d["rmse"] = g.rmse;
                d["bias"] = g.bias;
                d["arb"] = g.arb;
                d["rse"] = g.rse;
                d["rseb"] = g.rseb;
                d["loss_true"] = g.loss_true;
                d["loss_est"] = g.loss_est;
                rows.append(d);
            }
            return rows;
        });

    m.def(
        "run_scenario",
        [covariates_or_none](const Population& pop, const std::optional<CovariateMatrix>& x,
                             const std::optional<AdjacencyGraph>& g, const std::string& scenario, double fraction,
                             int replications, std::uint64_t seed, std::size_t jobs) {
            SimOptions o;
            o.jobs = jobs;
            auto sc = Scenario::standard(scenario_from(scenario));
            py::gil_scoped_release release;
            return run_scenario(pop, covariates_or_none(pop, x), g ? *g : AdjacencyGraph(pop.num_areas()), sc,
                                fraction, replications, seed, o);
        },
        py::arg("population"), py::arg("covariates"), py::arg("graph"), py::arg("scenario"), py::arg("fraction"),
        py::arg("replications"), py::arg("seed") = 1, py::arg("jobs") = 0);
}
