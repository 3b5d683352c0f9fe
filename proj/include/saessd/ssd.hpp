#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "saessd/model.hpp"
#include "saessd/population.hpp"
#include "saessd/reliability.hpp"

namespace saessd {

struct SsdConfig {
    double f_a = 0.01;
    double f_b = 0.04;
    double h = 0.01;
    int L = 100;
    double kappa = 0.0;
    double gamma = 0.01;
    LossKind loss_kind = LossKind::Weighted;
    bool use_estimated_eligibility = true;  // drive the search with the estimated loss
    std::uint64_t master_seed = 1;
    double pilot_fraction = 0.01;
    double max_failure_rate = 0.05;
    std::size_t jobs = 0;  // 0 = default_jobs()
    LaplaceOptions laplace;

    // Throws std::invalid_argument on a violated invariant; returns advisory
    // warnings otherwise.
    std::vector<std::string> validate() const;
};

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    double width() const noexcept { return hi - lo; }
};

struct ReplicationOutcome {
    double loss_true = 0.0;
    double loss_est = 0.0;
    bool ok = true;
    std::string error;
};

struct SsdStep {
    int k = 0;  // 0 for the two endpoint evaluations
    double f_k = 0.0;
    double mean_loss_true = 0.0;
    double mean_loss_est = 0.0;
    double risk_true = 0.0;
    double risk_est = 0.0;
    Interval interval_before;
    Interval interval_after;
    std::vector<ReplicationOutcome> per_replication;
    int failures = 0;
};

struct SsdTrace {
    std::vector<SsdStep> steps;
    Interval solution_interval;
    double recommended_fraction = 0.0;
    Count recommended_ess = 0;
    std::vector<std::string> warnings;

    int midpoint_evaluations() const;
};

// Raised when the initial upper bound does not meet the risk target.
class InfeasibleInterval : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raised when too many replications of one step fail to fit.
class StepAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Smallest integer strictly greater than (b - a) / (2h).
int k_max(double f_a, double f_b, double h);
// Number of halvings after which the width (b - a) 2^-k is below h.
int halving_steps(double f_a, double f_b, double h);

enum class Branch { ShrinkDown, ShrinkUp };
// ShrinkDown (f_b <- f_k) iff risk <= gamma.
Branch risk_decision(double risk, double gamma);

// True when the interval is narrow enough to stop. Widths that equal h up
// to rounding do not count as below it.
bool below_tolerance(double width, double h);

// Produces one step's losses at fraction f. The search fills k and the
// intervals.
using FractionEvaluator = std::function<SsdStep(double f)>;

// Aggregates per-replication outcomes into means and risks; throws
// StepAborted when the failure share reaches max_failure_rate.
void aggregate_step(SsdStep& step, const SsdConfig& config);

// Model-based evaluation: L design-prior draws of theta from the posterior,
// a sample at fraction f from each, a Laplace refit and both loss variants.
SsdStep evaluate_fraction(double f, const FittedPosterior& design_posterior, const Population& pop,
                          const CovariateMatrix& x, const AdjacencyGraph& graph,
                          const ModelSpec& spec, const SsdConfig& config);

// Every replication reports loss 1 below the threshold and 0 at or above it.
FractionEvaluator threshold_stub(double threshold, int replications);

// The bisection itself, on any evaluator. The interval is [f_a, f_b] from
// the config, which may be a previous solution interval for a restart.
SsdTrace run_ssd_search(const SsdConfig& config, const FractionEvaluator& evaluate,
                        Count population_total);

// Fits the pilot sample, then searches with evaluate_fraction.
SsdTrace run_ssd(const Population& pop, const CovariateMatrix& x, const AdjacencyGraph& graph,
                 const ModelSpec& spec, const SsdConfig& config);

// `step,f_k,mean_loss_true,mean_loss_est,risk_true,risk_est,interval_lo,interval_hi`
// with the interval after each step's decision.
void write_trace_csv(const SsdTrace& trace, std::ostream& out);

}  // namespace saessd
