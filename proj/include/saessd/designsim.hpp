#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "saessd/model.hpp"
#include "saessd/population.hpp"
#include "saessd/reliability.hpp"
#include "saessd/sampling.hpp"

namespace saessd {

// S1 is the direct estimator; S2-S4 are hierarchical fits.
struct Scenario {
    ScenarioId id = ScenarioId::S1;
    std::optional<ModelSpec> model;

    static Scenario standard(ScenarioId id);
    bool direct() const noexcept { return !model.has_value(); }
    std::string name() const;
};

std::optional<ScenarioId> parse_scenario(std::string_view name);
std::string scenario_name(ScenarioId id);

// Missing values are NaN.
struct CellMetrics {
    double rmse = 0.0;
    double bias = 0.0;
    double arb = 0.0;
    double rse = 0.0;
    double rseb = 0.0;
    double rse_theory = 0.0;  // direct-estimator RSE from the sampling variance
    double rse_mcse = 0.0;    // Monte Carlo SE of rse
    int used = 0;             // replications with an estimate
    int missing = 0;          // replications without one (n = 0 under S1)
};

struct GroupMetrics {
    std::string label;
    double rmse = 0.0;
    double bias = 0.0;
    double arb = 0.0;
    double rse = 0.0;
    double rseb = 0.0;
    double loss_true = 0.0;
    double loss_est = 0.0;
    double risk_true = 0.0;
    double risk_est = 0.0;
};

struct LossSummary {
    double loss_true = 0.0;
    double loss_est = 0.0;
    double risk_true = 0.0;
    double risk_est = 0.0;
};

struct MetricsTable {
    ScenarioId scenario = ScenarioId::S1;
    double fraction = 0.0;
    int replications = 0;
    std::vector<CellMetrics> per_cell;
    std::vector<GroupMetrics> per_group;  // one per group, then "all"
    LossSummary loss_summary;
    int failed_fits = 0;
    int missing_estimates = 0;  // cell-replications without an estimate
    int zero_truth_cells = 0;   // excluded from ARB, RSE and RSEB
};

// One replication's estimates. A cell without an estimate has NaN mean.
struct CellEstimates {
    std::vector<double> mean;
    std::vector<double> var;
    bool ok = true;
    std::string error;
};

using Estimator = std::function<CellEstimates(const SampleRealization&)>;

struct SimOptions {
    std::size_t jobs = 0;  // 0 = default_jobs()
    LossKind loss_kind = LossKind::Proportion;
    double kappa = 0.0;
    double max_failure_rate = 0.05;
    bool population_weighted_groups = false;
    LaplaceOptions laplace;
};

// Var(ybar) = Ybar (1 - Ybar) / (f N). Requires f N > 0.
double direct_variance(double ybar, double fraction, Count headcount);
// RSE of a direct estimate; infinite when the estimate is 0.
double direct_rse(double ybar, double fraction, Count headcount);

// B^-1 sum (rse_hat_b - rse) / rse; NaN when rse is 0.
double rseb(std::span<const double> estimated_rse, double true_rse);

// Metrics of one cell from per-replication estimates (NaN = missing) and
// estimated RSEs (empty when not available).
CellMetrics cell_metrics(std::span<const double> estimates, std::span<const double> estimated_rse,
                         double truth);

struct EfficiencyRatio {
    std::vector<double> per_cell;
    std::vector<double> per_group;  // aligned with MetricsTable::per_group
};
EfficiencyRatio efficiency_ratio(const MetricsTable& a, const MetricsTable& b);

// B replications of a sample from the true population at fraction f, each
// estimated by `estimate`. The sample stream depends only on (seed, f, b),
// so scenarios compared at the same f see the same samples.
MetricsTable run_simulation(const Population& pop, ScenarioId id, bool direct, double fraction,
                            int replications, std::uint64_t master_seed, const Estimator& estimate,
                            const SimOptions& options = {});

MetricsTable run_scenario(const Population& pop, const CovariateMatrix& x, const AdjacencyGraph& graph,
                          const Scenario& scenario, double fraction, int replications,
                          std::uint64_t master_seed, const SimOptions& options = {});

// `group_id,area_id,rmse,bias,arb,rse,rseb`; missing values are NA.
void write_cell_metrics_csv(const MetricsTable& table, const Population& pop, std::ostream& out);
// One row per group plus "all".
void write_group_metrics_csv(const MetricsTable& table, std::ostream& out);

}  // namespace saessd
