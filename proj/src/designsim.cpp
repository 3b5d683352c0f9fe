#include "saessd/designsim.hpp"

#include <bit>
#include <cmath>
#include <limits>

#include "csv.hpp"
#include "saessd/parallel.hpp"

namespace saessd {

namespace {

constexpr std::uint64_t kDesignStream = 0xd5e1;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) { return std::isnan(v) ? "NA" : csv::format_double(v); }

struct Replication {
    std::vector<double> mean;
    std::vector<double> rse;
    std::vector<double> group_loss_true, group_loss_est;  // per group
    double loss_true = 0.0, loss_est = 0.0;
    bool ok = true;
    std::string error;
};

// Mean of the non-NaN entries, optionally weighted.
double masked_mean(const std::vector<double>& v, const std::vector<double>& w) {
    double s = 0.0, t = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::isnan(v[i])) continue;
        s += w[i] * v[i];
        t += w[i];
    }
    return t > 0.0 ? s / t : kNaN;
}

}  // namespace

Scenario Scenario::standard(ScenarioId id) {
    Scenario s;
    s.id = id;
    if (id != ScenarioId::S1) s.model = ModelSpec::for_scenario(id);
    return s;
}

std::string scenario_name(ScenarioId id) {
    switch (id) {
        case ScenarioId::S1: return "S1";
        case ScenarioId::S2: return "S2";
        case ScenarioId::S3: return "S3";
        case ScenarioId::S4: return "S4";
    }
    return "?";
}

std::string Scenario::name() const { return scenario_name(id); }

std::optional<ScenarioId> parse_scenario(std::string_view name) {
    for (auto id : {ScenarioId::S1, ScenarioId::S2, ScenarioId::S3, ScenarioId::S4})
        if (name == scenario_name(id)) return id;
    return std::nullopt;
}

double direct_variance(double ybar, double fraction, Count headcount) {
    const double fn = fraction * static_cast<double>(headcount);
    if (!(fn > 0.0)) throw std::invalid_argument("direct variance needs f * N > 0");
    return ybar * (1.0 - ybar) / fn;
}

double direct_rse(double ybar, double fraction, Count headcount) {
    if (!(ybar > 0.0)) return std::numeric_limits<double>::infinity();
    return std::sqrt(direct_variance(ybar, fraction, headcount)) / ybar;
}

double rseb(std::span<const double> estimated_rse, double true_rse) {
    if (!(true_rse > 0.0) || estimated_rse.empty()) return kNaN;
    double s = 0.0;
    for (double r : estimated_rse) s += (r - true_rse) / true_rse;
    return s / static_cast<double>(estimated_rse.size());
}

CellMetrics cell_metrics(std::span<const double> estimates, std::span<const double> estimated_rse,
                         double truth) {
    CellMetrics m;
    double se = 0.0, se2 = 0.0, sae = 0.0, se4 = 0.0;
    std::vector<double> rses;
    for (std::size_t b = 0; b < estimates.size(); ++b) {
        if (std::isnan(estimates[b])) {
            ++m.missing;
            continue;
        }
        const double e = estimates[b] - truth;
        se += e;
        se2 += e * e;
        se4 += e * e * e * e;
        sae += std::abs(e);
        if (!estimated_rse.empty()) rses.push_back(estimated_rse[b]);
        ++m.used;
    }
    if (m.used == 0) {
        m.rmse = m.bias = m.arb = m.rse = m.rseb = m.rse_mcse = kNaN;
        return m;
    }
    const double n = m.used;
    const double mse = se2 / n;
    m.rmse = std::sqrt(mse);
    m.bias = se / n;
    // Delta method: Var(MSE_hat) = (E e^4 - MSE^2) / B, SE(RMSE) = SE(MSE) / (2 RMSE).
    const double mse_se = std::sqrt(std::max(se4 / n - mse * mse, 0.0) / n);
    if (truth > 0.0) {
        m.arb = sae / n / truth;
        m.rse = m.rmse / truth;
        m.rse_mcse = m.rmse > 0.0 ? mse_se / (2.0 * m.rmse) / truth : 0.0;
        m.rseb = rses.empty() ? kNaN : rseb(rses, m.rse);
    } else {
        m.arb = m.rse = m.rseb = m.rse_mcse = kNaN;
    }
    return m;
}

EfficiencyRatio efficiency_ratio(const MetricsTable& a, const MetricsTable& b) {
    if (a.per_cell.size() != b.per_cell.size() || a.per_group.size() != b.per_group.size())
        throw std::invalid_argument("metric tables are not aligned");
    auto ratio = [](double x, double y) { return y > 0.0 && !std::isnan(x) ? x / y : kNaN; };
    EfficiencyRatio r;
    for (std::size_t c = 0; c < a.per_cell.size(); ++c) r.per_cell.push_back(ratio(a.per_cell[c].rmse, b.per_cell[c].rmse));
    for (std::size_t g = 0; g < a.per_group.size(); ++g)
        r.per_group.push_back(ratio(a.per_group[g].rmse, b.per_group[g].rmse));
    return r;
}

MetricsTable run_simulation(const Population& pop, ScenarioId id, bool direct, double fraction,
                            int replications, std::uint64_t master_seed, const Estimator& estimate,
                            const SimOptions& options) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
    if (replications < 1) throw std::invalid_argument("replications must be at least 1");
    const std::size_t C = pop.num_cells(), J = pop.num_groups();
    const auto truth = pop.prevalence();
    const auto elig_true = eligibility(pop, {}, false);

    std::vector<Replication> reps(static_cast<std::size_t>(replications));
    const std::size_t jobs = options.jobs == 0 ? default_jobs() : options.jobs;
    parallel_for(reps.size(), jobs, [&](std::size_t b) {
        RandomStream rng(derive_seed(master_seed, {kDesignStream, std::bit_cast<std::uint64_t>(fraction), b}));
        auto sample = draw_design_sample(pop, fraction, rng);
        auto est = estimate(sample);
        auto& rep = reps[b];
        if (!est.ok) {
            rep.ok = false;
            rep.error = est.error;
            return;
        }
        rep.mean = std::move(est.mean);
        rep.rse.assign(C, std::numeric_limits<double>::infinity());
        std::vector<double> share(C, 0.0);
        for (std::size_t c = 0; c < C; ++c) {
            const double m = rep.mean[c];
            if (std::isnan(m)) continue;
            share[c] = m;
            if (m > 0.0) rep.rse[c] = rse(m, std::max(est.var[c], 0.0));
        }
        const auto elig_est = eligibility(pop, share, true);
        rep.loss_true = loss(options.loss_kind, rep.rse, elig_true, pop);
        rep.loss_est = loss(options.loss_kind, rep.rse, elig_est, pop);
        rep.group_loss_true.resize(J);
        rep.group_loss_est.resize(J);
        for (std::size_t j = 0; j < J; ++j) {
            std::vector<bool> et(C, false), ee(C, false);
            for (std::size_t d = 0; d < pop.num_areas(); ++d) {
                const auto c = pop.cell(j, d);
                et[c] = elig_true[c];
                ee[c] = elig_est[c];
            }
            rep.group_loss_true[j] = loss(options.loss_kind, rep.rse, et, pop);
            rep.group_loss_est[j] = loss(options.loss_kind, rep.rse, ee, pop);
        }
    });

    MetricsTable t;
    t.scenario = id;
    t.fraction = fraction;
    t.replications = replications;
    std::string first_error;
    for (const auto& r : reps)
        if (!r.ok) {
            if (first_error.empty()) first_error = r.error;
            ++t.failed_fits;
        }
    if (static_cast<double>(t.failed_fits) >= options.max_failure_rate * replications)
        throw FitFailure(scenario_name(id) + " at f=" + csv::format_double(fraction) + ": " +
                             std::to_string(t.failed_fits) + " of " + std::to_string(replications) +
                             " fits failed (first: " + first_error + ")",
                         0);

    t.per_cell.resize(C);
    std::vector<double> est(reps.size()), est_rse(reps.size());
    for (std::size_t c = 0; c < C; ++c) {
        std::size_t k = 0;
        for (const auto& r : reps) {
            if (!r.ok) continue;
            est[k] = r.mean[c];
            est_rse[k] = r.rse[c];
            ++k;
        }
        auto m = cell_metrics(std::span(est).first(k), direct ? std::span<const double>() : std::span(est_rse).first(k),
                              truth[c]);
        t.missing_estimates += m.missing;
        if (!(truth[c] > 0.0)) ++t.zero_truth_cells;
        m.rse_theory = pop.headcount(c) > 0 && truth[c] > 0.0 ? direct_rse(truth[c], fraction, pop.headcount(c)) : kNaN;
        if (direct) m.bias = m.arb = m.rseb = kNaN;
        t.per_cell[c] = m;
    }

    int ok = 0;
    std::vector<double> lt(J, 0.0), le(J, 0.0), rt(J, 0.0), re(J, 0.0);
    for (const auto& r : reps) {
        if (!r.ok) continue;
        ++ok;
        t.loss_summary.loss_true += r.loss_true;
        t.loss_summary.loss_est += r.loss_est;
        t.loss_summary.risk_true += r.loss_true > options.kappa ? 1.0 : 0.0;
        t.loss_summary.risk_est += r.loss_est > options.kappa ? 1.0 : 0.0;
        for (std::size_t j = 0; j < J; ++j) {
            lt[j] += r.group_loss_true[j];
            le[j] += r.group_loss_est[j];
            rt[j] += r.group_loss_true[j] > options.kappa ? 1.0 : 0.0;
            re[j] += r.group_loss_est[j] > options.kappa ? 1.0 : 0.0;
        }
    }
    t.loss_summary.loss_true /= ok;
    t.loss_summary.loss_est /= ok;
    t.loss_summary.risk_true /= ok;
    t.loss_summary.risk_est /= ok;

    auto summarize = [&](const std::vector<std::size_t>& cells, GroupMetrics& g) {
        std::vector<double> w, rmse, bias, arb, rs, rb;
        for (auto c : cells) {
            w.push_back(options.population_weighted_groups ? static_cast<double>(pop.headcount(c)) : 1.0);
            const auto& m = t.per_cell[c];
            rmse.push_back(m.rmse);
            bias.push_back(m.bias);
            arb.push_back(m.arb);
            rs.push_back(m.rse);
            rb.push_back(m.rseb);
        }
        g.rmse = masked_mean(rmse, w);
        g.bias = masked_mean(bias, w);
        g.arb = masked_mean(arb, w);
        g.rse = masked_mean(rs, w);
        g.rseb = masked_mean(rb, w);
    };
    std::vector<std::size_t> all;
    for (std::size_t j = 0; j < J; ++j) {
        std::vector<std::size_t> cells;
        for (std::size_t d = 0; d < pop.num_areas(); ++d) cells.push_back(pop.cell(j, d));
        all.insert(all.end(), cells.begin(), cells.end());
        GroupMetrics g;
        g.label = pop.group_labels()[j];
        summarize(cells, g);
        g.loss_true = lt[j] / ok;
        g.loss_est = le[j] / ok;
        g.risk_true = rt[j] / ok;
        g.risk_est = re[j] / ok;
        t.per_group.push_back(g);
    }
    GroupMetrics g;
    g.label = "all";
    summarize(all, g);
    g.loss_true = t.loss_summary.loss_true;
    g.loss_est = t.loss_summary.loss_est;
    g.risk_true = t.loss_summary.risk_true;
    g.risk_est = t.loss_summary.risk_est;
    t.per_group.push_back(g);
    return t;
}

MetricsTable run_scenario(const Population& pop, const CovariateMatrix& x, const AdjacencyGraph& graph,
                          const Scenario& scenario, double fraction, int replications,
                          std::uint64_t master_seed, const SimOptions& options) {
    Estimator estimate;
    if (scenario.direct()) {
        estimate = [&](const SampleRealization& s) {
            CellEstimates e;
            e.mean.assign(s.num_cells(), kNaN);
            e.var.assign(s.num_cells(), kNaN);
            for (std::size_t c = 0; c < s.num_cells(); ++c) {
                if (s.n[c] == 0) continue;
                const double ybar = static_cast<double>(s.y[c]) / static_cast<double>(s.n[c]);
                e.mean[c] = ybar;
                e.var[c] = direct_variance(ybar, fraction, pop.headcount(c));
            }
            return e;
        };
    } else {
        const ModelSpec spec = *scenario.model;
        estimate = [&pop, &x, &graph, spec, &options](const SampleRealization& s) {
            CellEstimates e;
            try {
                auto post = fit_laplace(spec, s, pop, x, graph, options.laplace);
                e.mean = post.cell_mean;
                e.var = post.cell_var;
            } catch (const FitFailure& f) {
                e.ok = false;
                e.error = f.what();
            }
            return e;
        };
    }
    return run_simulation(pop, scenario.id, scenario.direct(), fraction, replications, master_seed, estimate, options);
}

void write_cell_metrics_csv(const MetricsTable& table, const Population& pop, std::ostream& out) {
    out << "group_id,area_id,rmse,bias,arb,rse,rseb\n";
    for (std::size_t c = 0; c < table.per_cell.size(); ++c) {
        const auto& m = table.per_cell[c];
        out << pop.group_labels()[pop.group_of(c)] << ',' << pop.area_ids()[pop.area_of(c)] << ',' << fmt(m.rmse)
            << ',' << fmt(m.bias) << ',' << fmt(m.arb) << ',' << fmt(m.rse) << ',' << fmt(m.rseb) << '\n';
    }
}

void write_group_metrics_csv(const MetricsTable& table, std::ostream& out) {
    out << "group_id,rmse,bias,arb,rse,rseb,loss_true,risk_true,loss_est,risk_est\n";
    for (const auto& g : table.per_group)
        out << g.label << ',' << fmt(g.rmse) << ',' << fmt(g.bias) << ',' << fmt(g.arb) << ',' << fmt(g.rse) << ','
            << fmt(g.rseb) << ',' << fmt(g.loss_true) << ',' << fmt(g.risk_true) << ',' << fmt(g.loss_est) << ','
            << fmt(g.risk_est) << '\n';
}

}  // namespace saessd
