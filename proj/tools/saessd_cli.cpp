#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "saessd/config.hpp"
#include "saessd/designsim.hpp"
#include "saessd/model.hpp"
#include "saessd/planning.hpp"
#include "saessd/reliability.hpp"
#include "saessd/sampling.hpp"
#include "saessd/ssd.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace saessd;

namespace {

enum Exit { kOk = 0, kDataError = 1, kUsageError = 2, kNumericalFailure = 3 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> jobs;
    bool dry_run = false;
};

struct Bundle {
    Population pop;
    CovariateMatrix x;
    AdjacencyGraph graph;
    std::vector<std::string> warnings;
};

RunConfig resolve_config(const Flags& flags) {
    RunConfig cfg;
    if (!flags.config.empty()) {
        if (!fs::exists(flags.config)) throw UsageError("config file not found: " + flags.config);
        cfg = load_config(flags.config);
    }
    if (flags.seed) cfg.master_seed = *flags.seed;
    if (flags.out) cfg.output_dir = *flags.out;
    if (flags.jobs) cfg.jobs = *flags.jobs;
    cfg.ssd.master_seed = cfg.master_seed;
    cfg.ssd.jobs = cfg.jobs;
    cfg.sim.jobs = cfg.jobs;
    cfg.chains.seed = derive_seed(cfg.master_seed, {0xc4a1});
    cfg.model.validate();
    return cfg;
}

void require_file(const fs::path& p, const std::string& what) {
    if (p.empty()) throw UsageError("no " + what + " path configured ([paths] " + what + ")");
    if (!fs::exists(p)) throw UsageError(what + " file not found: " + p.string());
}

Bundle load_bundle(RunConfig& cfg) {
    require_file(cfg.population, "population");
    if (!cfg.covariates.empty()) require_file(cfg.covariates, "covariates");
    if (!cfg.adjacency.empty()) require_file(cfg.adjacency, "adjacency");
    Bundle b;
    b.pop = load_population(cfg.population);
    const auto D = b.pop.num_areas();
    if (!cfg.covariates.empty()) {
        b.x = scale_covariates(load_covariates(cfg.covariates, b.pop.area_ids()));
    } else {
        b.x.values.resize(static_cast<Eigen::Index>(D), 0);
        b.x.scaled = true;
        if (cfg.model.include_covariates) {
            cfg.model.include_covariates = false;
            b.warnings.push_back("no covariates file; fitting without covariates");
        }
    }
    if (!cfg.adjacency.empty()) {
        auto adj = load_adjacency(cfg.adjacency, b.pop.area_ids());
        b.graph = std::move(adj.graph);
        b.warnings.insert(b.warnings.end(), adj.warnings.begin(), adj.warnings.end());
    } else {
        b.graph = AdjacencyGraph(D);
        if (cfg.model.include_spatial) b.warnings.push_back("no adjacency file; every area is isolated");
    }
    return b;
}

class Outputs {
public:
    Outputs(const RunConfig& cfg, std::string command) : cfg_(cfg), command_(std::move(command)) {
        fs::create_directories(cfg.output_dir);
    }

    std::string header() const {
        return "# saessd " + command_ + " config_hash=" + cfg_.hash() + " seed=" + std::to_string(cfg_.master_seed) + "\n";
    }

    fs::path csv(const std::string& name, const std::function<void(std::ostream&)>& body) const {
        auto p = cfg_.output_dir / name;
        std::ofstream out(p, std::ios::binary);
        if (!out) throw UsageError("cannot write " + p.string());
        out << header();
        body(out);
        return p;
    }

    fs::path json(const std::string& name, ordered_json doc) const {
        doc["config_hash"] = cfg_.hash();
        doc["master_seed"] = cfg_.master_seed;
        auto p = cfg_.output_dir / name;
        std::ofstream out(p, std::ios::binary);
        if (!out) throw UsageError("cannot write " + p.string());
        out << doc.dump(2) << '\n';
        return p;
    }

private:
    const RunConfig& cfg_;
    std::string command_;
};

void print_warnings(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

int cmd_validate(const Flags& flags) {
    auto cfg = resolve_config(flags);
    require_file(cfg.population, "population");
    {
        std::ifstream in(cfg.population);
        auto issues = check_population(in, 20);
        if (!issues.empty()) {
            std::cerr << "population has problems:\n";
            for (const auto& i : issues) std::cerr << "  " << i << '\n';
            return kDataError;
        }
    }
    auto b = load_bundle(cfg);
    cfg.ssd.validate();
    const auto& pop = b.pop;
    auto elig = eligibility(pop, {}, false);
    std::size_t n_elig = 0;
    for (bool e : elig) n_elig += e ? 1 : 0;
    std::printf("areas %zu, groups %zu, cells %zu, population %lld\n", pop.num_areas(), pop.num_groups(),
                pop.num_cells(), static_cast<long long>(pop.total()));
    std::printf("eligible cells %zu (%.1f%%)\n", n_elig, 100.0 * static_cast<double>(n_elig) / static_cast<double>(pop.num_cells()));
    std::printf("covariates %zu, adjacency edges %zu, components %zu, isolated areas %zu\n", b.x.num_covariates(),
                b.graph.num_edges(), b.graph.num_components(), b.graph.isolated_areas().size());
    print_warnings(b.warnings);
    std::printf("ok\n");
    return kOk;
}

ordered_json posterior_summary(const FittedPosterior& post) {
    ordered_json j;
    j["converged"] = post.diagnostics.converged;
    j["newton_iterations"] = post.diagnostics.newton_iterations;
    j["hyper_evaluations"] = post.diagnostics.hyper_evaluations;
    if (post.diagnostics.max_rhat > 0) j["max_rhat"] = post.diagnostics.max_rhat;
    double tu = 0, tv = 0, wsum = 0;
    for (const auto& h : post.hyper_grid) {
        double w = std::exp(h.log_weight);
        tu += w * h.tau_upsilon;
        tv += w * h.tau_nu;
        wsum += w;
    }
    j["tau_upsilon_mean"] = wsum > 0 ? tu / wsum : 0.0;
    j["tau_nu_mean"] = wsum > 0 ? tv / wsum : 0.0;
    j["warnings"] = post.diagnostics.warnings;
    return j;
}

int cmd_fit(const Flags& flags) {
    auto cfg = resolve_config(flags);
    auto b = load_bundle(cfg);
    SampleRealization sample;
    if (!cfg.sample.empty()) {
        require_file(cfg.sample, "sample");
        std::ifstream in(cfg.sample);
        sample = read_sample(in, b.pop);
    } else {
        RandomStream rng(derive_seed(cfg.master_seed, {0x9170}));
        sample = draw_design_sample(b.pop, cfg.ssd.pilot_fraction, rng);
        b.warnings.push_back("no sample file; fitting a pilot sample drawn at f=" +
                             std::to_string(cfg.ssd.pilot_fraction));
    }
    if (flags.dry_run) {
        std::printf("dry run: 1 model fit (%s) on %zu cells\n",
                    cfg.fit_engine == FitEngine::Laplace ? "laplace" : "mcmc", b.pop.num_cells());
        print_warnings(b.warnings);
        return kOk;
    }
    auto post = cfg.fit_engine == FitEngine::Laplace ? fit_laplace(cfg.model, sample, b.pop, b.x, b.graph)
                                                     : fit_mcmc(cfg.model, sample, b.pop, b.x, b.graph, cfg.chains);
    auto report = make_loss_report(b.pop, post.cell_mean, post.cell_var, cfg.ssd.loss_kind);
    Outputs out(cfg, "fit");
    if (cfg.sample.empty()) out.csv("sample.csv", [&](std::ostream& o) { write_sample(sample, b.pop, o); });
    out.csv("posterior.csv", [&](std::ostream& o) { write_posterior_csv(post, b.pop, o); });
    out.csv("suppression.csv", [&](std::ostream& o) { write_suppression_report(report, b.pop, o); });
    auto doc = posterior_summary(post);
    doc["loss_true"] = report.loss_true;
    doc["loss_est"] = report.loss_est;
    doc["suppressed_cells"] = report.suppressed_cells.size();
    out.json("fit_summary.json", doc);
    std::printf("fitted %zu cells; loss (true) %.6f, loss (estimated) %.6f, %zu cells suppressed\n", b.pop.num_cells(),
                report.loss_true, report.loss_est, report.suppressed_cells.size());
    print_warnings(b.warnings);
    print_warnings(post.diagnostics.warnings);
    return kOk;
}

int cmd_ssd(const Flags& flags) {
    auto cfg = resolve_config(flags);
    const bool stub = cfg.ssd_engine == SsdEngine::ThresholdStub;
    std::optional<Bundle> b;
    if (!stub || !cfg.population.empty()) b = load_bundle(cfg);
    auto warnings = cfg.ssd.validate();
    const int kmax = k_max(cfg.ssd.f_a, cfg.ssd.f_b, cfg.ssd.h);
    if (flags.dry_run) {
        const int steps = halving_steps(cfg.ssd.f_a, cfg.ssd.f_b, cfg.ssd.h);
        std::printf("dry run: %d midpoint steps (k_max %d), %d model fits\n", steps, kmax,
                    stub ? 0 : 1 + cfg.ssd.L * (2 + steps));
        print_warnings(warnings);
        if (b) print_warnings(b->warnings);
        return kOk;
    }
    const Count total = b ? b->pop.total() : 0;
    auto trace = stub ? run_ssd_search(cfg.ssd, threshold_stub(cfg.stub_threshold, cfg.ssd.L), total)
                      : run_ssd(b->pop, b->x, b->graph, cfg.model, cfg.ssd);

    Outputs out(cfg, "ssd");
    out.csv("ssd_trace.csv", [&](std::ostream& o) { write_trace_csv(trace, o); });
    ordered_json doc;
    doc["recommended_fraction"] = trace.recommended_fraction;
    doc["ess"] = trace.recommended_ess;
    doc["actual_sizes"] = ordered_json::array();
    for (const auto& d : cfg.deffs)
        doc["actual_sizes"].push_back(
            {{"deff", d.deff}, {"n", trace.recommended_ess > 0 ? ess_to_actual(trace.recommended_ess, d) : 0}});
    doc["solution_interval"] = {trace.solution_interval.lo, trace.solution_interval.hi};
    doc["midpoint_steps"] = trace.midpoint_evaluations();
    doc["k_max"] = kmax;
    doc["warnings"] = trace.warnings;
    out.json("ssd_summary.json", doc);

    std::printf("%4s %10s %12s %12s %10s %10s  %s\n", "step", "f_k", "loss_true", "loss_est", "risk_true", "risk_est",
                "interval");
    for (const auto& s : trace.steps)
        std::printf("%4d %10.6f %12.6f %12.6f %10.6f %10.6f  [%.6f, %.6f]\n", s.k, s.f_k, s.mean_loss_true,
                    s.mean_loss_est, s.risk_true, s.risk_est, s.interval_after.lo, s.interval_after.hi);
    std::printf("recommended fraction %.6f", trace.recommended_fraction);
    if (trace.recommended_ess > 0) {
        std::printf(", ESS %lld\n", static_cast<long long>(trace.recommended_ess));
        for (const auto& d : cfg.deffs)
            std::printf("  DEFF %.2f: n = %lld\n", d.deff, static_cast<long long>(ess_to_actual(trace.recommended_ess, d)));
    } else {
        std::printf("\n");
    }
    print_warnings(trace.warnings);
    if (b) print_warnings(b->warnings);
    return kOk;
}

int cmd_simulate(const Flags& flags) {
    auto cfg = resolve_config(flags);
    auto b = load_bundle(cfg);
    if (flags.dry_run) {
        int fits = 0;
        for (auto s : cfg.scenarios) fits += s == ScenarioId::S1 ? 0 : 1;
        fits *= cfg.replications * static_cast<int>(cfg.fractions.size());
        std::printf("dry run: %zu tables, %d model fits\n", cfg.scenarios.size() * cfg.fractions.size(), fits);
        print_warnings(b.warnings);
        return kOk;
    }
    Outputs out(cfg, "simulate");
    for (double f : cfg.fractions)
        for (auto id : cfg.scenarios) {
            auto scenario = Scenario::standard(id);
            if (scenario.model && !cfg.model.include_covariates) scenario.model->include_covariates = false;
            if (scenario.model && b.graph.num_edges() == 0) scenario.model->include_spatial = false;
            auto table = run_scenario(b.pop, b.x, b.graph, scenario, f, cfg.replications, cfg.master_seed, cfg.sim);
            char frac[32];
            std::snprintf(frac, sizeof frac, "%g", f);
            const std::string tag = scenario.name() + "_f" + frac;
            out.csv("metrics_cells_" + tag + ".csv", [&](std::ostream& o) { write_cell_metrics_csv(table, b.pop, o); });
            out.csv("metrics_groups_" + tag + ".csv", [&](std::ostream& o) { write_group_metrics_csv(table, o); });
            std::printf("%s, f = %.4f, B = %d%s\n", scenario.name().c_str(), f, cfg.replications,
                        table.failed_fits ? (" (" + std::to_string(table.failed_fits) + " failed fits)").c_str() : "");
            std::printf("  %-8s %8s %8s %8s %8s %8s %8s %8s\n", "group", "RMSE", "Bias", "ARB", "RSE", "RSEB", "loss",
                        "loss_est");
            auto cell = [](double v) {
                char buf[32];
                if (std::isnan(v)) return std::string("---");
                std::snprintf(buf, sizeof buf, "%.4f", v);
                return std::string(buf);
            };
            for (const auto& g : table.per_group)
                std::printf("  %-8s %8s %8s %8s %8s %8s %8s %8s\n", g.label.c_str(), cell(g.rmse).c_str(),
                            cell(g.bias).c_str(), cell(g.arb).c_str(), cell(g.rse).c_str(), cell(g.rseb).c_str(),
                            cell(g.loss_true).c_str(), cell(g.loss_est).c_str());
            if (table.missing_estimates > 0)
                std::printf("  %d cell-replications without a direct estimate (n = 0)\n", table.missing_estimates);
        }
    print_warnings(b.warnings);
    return kOk;
}

int cmd_synth(const Flags& flags) {
    auto cfg = resolve_config(flags);
    auto opts = cfg.synth;
    opts.seed = cfg.master_seed;
    if (flags.dry_run) {
        std::printf("dry run: %zu areas x %zu groups\n", opts.num_areas, opts.num_groups);
        return kOk;
    }
    auto bundle = synth_population(opts);
    Outputs out(cfg, "synth");
    out.csv("population.csv", [&](std::ostream& o) { write_population(bundle.population, o); });
    out.csv("covariates.csv",
            [&](std::ostream& o) { write_covariates(bundle.covariates, bundle.population.area_ids(), o); });
    out.csv("adjacency.csv",
            [&](std::ostream& o) { write_adjacency(bundle.graph, bundle.population.area_ids(), o); });
    std::printf("wrote %zu areas x %zu groups to %s\n", opts.num_areas, opts.num_groups, cfg.output_dir.string().c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sample size determination for small-area survey estimates"};
    app.require_subcommand(1);
    app.fallthrough();
    Flags flags;
    app.add_option("--config", flags.config, "Run configuration file");
    app.add_option("--seed", flags.seed, "Master seed (overrides [run] seed)");
    app.add_option("--out", flags.out, "Output directory (overrides [paths] output_dir)");
    app.add_option("--jobs", flags.jobs, "Concurrent replications (default: cores - 1)")->check(CLI::PositiveNumber);
    app.add_flag("--dry-run", flags.dry_run, "Validate and report the planned work without computing");

    std::function<int(const Flags&)> command;
    auto add = [&](const char* name, const char* help, int (*fn)(const Flags&)) {
        app.add_subcommand(name, help)->callback([&command, fn] { command = fn; });
    };
    add("validate", "Load and check every input", cmd_validate);
    add("fit", "Fit the model to a sample and report reliability", cmd_fit);
    add("ssd", "Run the binary sample size search", cmd_ssd);
    add("simulate", "Run the design-based simulation", cmd_simulate);
    add("synth", "Write a synthetic population bundle", cmd_synth);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsageError;
    }

    try {
        return command(flags);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsageError;
    } catch (const ParseError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const ValidationError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const InfeasibleInterval& e) {
        std::cerr << "error: " << e.what() << "\n  raise f_b in [ssd] or relax gamma, then rerun\n";
        return kNumericalFailure;
    } catch (const StepAborted& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kNumericalFailure;
    } catch (const FitFailure& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kNumericalFailure;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumericalFailure;
    }
}
