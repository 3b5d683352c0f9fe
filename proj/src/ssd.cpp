#include "saessd/ssd.hpp"

#include <bit>
#include <cmath>

#include "csv.hpp"
#include "saessd/parallel.hpp"
#include "saessd/planning.hpp"
#include "saessd/sampling.hpp"

namespace saessd {

namespace {

constexpr std::uint64_t kPilotStream = 0x9170;
constexpr std::uint64_t kThetaStream = 0x7e7a;
constexpr std::uint64_t kSampleStream = 0x5a3b;

int magnitude(double x) { return static_cast<int>(std::floor(std::log10(x) + 1e-12)); }

}  // namespace

std::vector<std::string> SsdConfig::validate() const {
    if (!(f_a > 0.0 && f_a < f_b && f_b <= 1.0))
        throw std::invalid_argument("ssd interval must satisfy 0 < f_a < f_b <= 1");
    if (!(h > 0.0 && h < f_b - f_a)) throw std::invalid_argument("ssd tolerance h must lie in (0, f_b - f_a)");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("ssd gamma must lie in (0, 1)");
    if (L < 1) throw std::invalid_argument("ssd L must be at least 1");
    if (!(kappa >= 0.0)) throw std::invalid_argument("ssd kappa must be non-negative");
    if (!(pilot_fraction > 0.0 && pilot_fraction <= 1.0))
        throw std::invalid_argument("pilot fraction must lie in (0, 1]");
    if (!(max_failure_rate > 0.0 && max_failure_rate <= 1.0))
        throw std::invalid_argument("failure guard must lie in (0, 1]");
    std::vector<std::string> warnings;
    if (magnitude(static_cast<double>(L)) < magnitude(1.0 / gamma))
        warnings.push_back("L below γ⁻¹ order of magnitude (L=" + std::to_string(L) +
                           ", γ=" + csv::format_double(gamma) + ")");
    return warnings;
}

int SsdTrace::midpoint_evaluations() const {
    int n = 0;
    for (const auto& s : steps) n += s.k > 0 ? 1 : 0;
    return n;
}

int k_max(double f_a, double f_b, double h) {
    const double x = (f_b - f_a) / (2.0 * h);
    const double r = std::round(x);
    if (std::abs(x - r) <= 1e-9 * std::max(1.0, x)) return static_cast<int>(r) + 1;
    return static_cast<int>(std::floor(x)) + 1;
}

bool below_tolerance(double width, double h) { return width < h * (1.0 - 1e-9); }

int halving_steps(double f_a, double f_b, double h) {
    int k = 0;
    for (double w = f_b - f_a; !below_tolerance(w, h); w /= 2.0) ++k;
    return k;
}

Branch risk_decision(double risk, double gamma) {
    return risk <= gamma ? Branch::ShrinkDown : Branch::ShrinkUp;
}

void aggregate_step(SsdStep& step, const SsdConfig& config) {
    const auto total = step.per_replication.size();
    int ok = 0, exceed_true = 0, exceed_est = 0;
    double sum_true = 0.0, sum_est = 0.0;
    step.failures = 0;
    for (const auto& r : step.per_replication) {
        if (!r.ok) {
            ++step.failures;
            continue;
        }
        ++ok;
        sum_true += r.loss_true;
        sum_est += r.loss_est;
        exceed_true += r.loss_true > config.kappa ? 1 : 0;
        exceed_est += r.loss_est > config.kappa ? 1 : 0;
    }
    if (total == 0 || static_cast<double>(step.failures) >= config.max_failure_rate * static_cast<double>(total)) {
        std::string first;
        for (const auto& r : step.per_replication)
            if (!r.ok) {
                first = r.error;
                break;
            }
        throw StepAborted("fraction " + csv::format_double(step.f_k) + ": " + std::to_string(step.failures) +
                          " of " + std::to_string(total) + " replication fits failed" +
                          (first.empty() ? "" : " (first: " + first + ")"));
    }
    step.mean_loss_true = sum_true / ok;
    step.mean_loss_est = sum_est / ok;
    step.risk_true = static_cast<double>(exceed_true) / ok;
    step.risk_est = static_cast<double>(exceed_est) / ok;
}

SsdStep evaluate_fraction(double f, const FittedPosterior& design_posterior, const Population& pop,
                          const CovariateMatrix& x, const AdjacencyGraph& graph,
                          const ModelSpec& spec, const SsdConfig& config) {
    SsdStep step;
    step.f_k = f;
    step.per_replication.resize(static_cast<std::size_t>(config.L));
    const std::size_t jobs = config.jobs == 0 ? default_jobs() : config.jobs;
    parallel_for(step.per_replication.size(), jobs, [&](std::size_t l) {
        auto& out = step.per_replication[l];
        // The same design-prior draw serves every candidate fraction.
        RandomStream theta_rng(derive_seed(config.master_seed, {kThetaStream, l}));
        RandomStream sample_rng(
            derive_seed(config.master_seed, {kSampleStream, l, std::bit_cast<std::uint64_t>(f)}));
        auto theta = sample_latent(design_posterior, theta_rng);
        std::vector<double> p(theta.size());
        for (std::size_t c = 0; c < p.size(); ++c) p[c] = inv_logit(theta[c]);
        auto sample = draw_sample(pop, f, p, sample_rng);
        try {
            auto post = fit_laplace(spec, sample, pop, x, graph, config.laplace);
            std::vector<double> r(pop.num_cells());
            for (std::size_t c = 0; c < r.size(); ++c)
                r[c] = post.cell_mean[c] > 0.0 ? rse(post.cell_mean[c], std::max(post.cell_var[c], 0.0))
                                               : std::numeric_limits<double>::infinity();
            out.loss_true = loss(config.loss_kind, r, eligibility(pop, p, true), pop);
            out.loss_est = loss(config.loss_kind, r, eligibility(pop, post.cell_mean, true), pop);
        } catch (const FitFailure& e) {
            out.ok = false;
            out.error = e.what();
        }
    });
    aggregate_step(step, config);
    return step;
}

FractionEvaluator threshold_stub(double threshold, int replications) {
    return [threshold, replications](double f) {
        SsdStep step;
        step.f_k = f;
        const double l = f < threshold ? 1.0 : 0.0;
        step.per_replication.assign(static_cast<std::size_t>(replications), {l, l, true, {}});
        step.mean_loss_true = step.mean_loss_est = l;
        step.risk_true = step.risk_est = l;
        return step;
    };
}

SsdTrace run_ssd_search(const SsdConfig& config, const FractionEvaluator& evaluate,
                        Count population_total) {
    SsdTrace trace;
    trace.warnings = config.validate();
    auto risk = [&](const SsdStep& s) { return config.use_estimated_eligibility ? s.risk_est : s.risk_true; };
    Interval iv{config.f_a, config.f_b};

    for (double f : {config.f_a, config.f_b}) {
        SsdStep s = evaluate(f);
        s.k = 0;
        s.interval_before = s.interval_after = iv;
        trace.steps.push_back(std::move(s));
    }
    const SsdStep& at_a = trace.steps[0];
    const SsdStep& at_b = trace.steps[1];
    if (risk(at_b) > config.gamma)
        throw InfeasibleInterval("interval infeasible: raise f_b (risk " + csv::format_double(risk(at_b)) +
                                 " at f_b=" + csv::format_double(config.f_b) + " exceeds gamma=" +
                                 csv::format_double(config.gamma) + ")");
    if (risk(at_a) <= config.gamma) {
        trace.warnings.push_back("risk at f_a already meets gamma; returning f_a without bisection");
        trace.solution_interval = {config.f_a, config.f_a};
    } else {
        for (int k = 1; !below_tolerance(iv.width(), config.h); ++k) {
            const double mid = iv.lo + 0.5 * (iv.hi - iv.lo);
            SsdStep s = evaluate(mid);
            s.k = k;
            s.interval_before = iv;
            if (risk_decision(risk(s), config.gamma) == Branch::ShrinkDown)
                iv.hi = mid;
            else
                iv.lo = mid;
            s.interval_after = iv;
            trace.steps.push_back(std::move(s));
        }
        trace.solution_interval = iv;
    }
    trace.recommended_fraction = trace.solution_interval.hi;
    if (population_total > 0) trace.recommended_ess = fraction_to_ess(trace.recommended_fraction, population_total);
    return trace;
}

SsdTrace run_ssd(const Population& pop, const CovariateMatrix& x, const AdjacencyGraph& graph,
                 const ModelSpec& spec, const SsdConfig& config) {
    config.validate();
    RandomStream pilot_rng(derive_seed(config.master_seed, {kPilotStream}));
    auto pilot = draw_design_sample(pop, config.pilot_fraction, pilot_rng);
    auto design = fit_laplace(spec, pilot, pop, x, graph, config.laplace);
    auto trace = run_ssd_search(
        config, [&](double f) { return evaluate_fraction(f, design, pop, x, graph, spec, config); }, pop.total());
    for (const auto& w : design.diagnostics.warnings) trace.warnings.push_back("pilot fit: " + w);
    return trace;
}

void write_trace_csv(const SsdTrace& trace, std::ostream& out) {
    out << "step,f_k,mean_loss_true,mean_loss_est,risk_true,risk_est,interval_lo,interval_hi\n";
    for (const auto& s : trace.steps)
        out << s.k << ',' << csv::format_double(s.f_k) << ',' << csv::format_double(s.mean_loss_true) << ','
            << csv::format_double(s.mean_loss_est) << ',' << csv::format_double(s.risk_true) << ','
            << csv::format_double(s.risk_est) << ',' << csv::format_double(s.interval_after.lo) << ','
            << csv::format_double(s.interval_after.hi) << '\n';
}

}  // namespace saessd
