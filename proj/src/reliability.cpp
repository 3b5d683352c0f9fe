#include "saessd/reliability.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "csv.hpp"

namespace saessd {

double rse(double mean, double var) {
    if (!(mean > 0.0)) throw std::domain_error("RSE requires a positive mean");
    if (var < 0.0) throw std::domain_error("RSE requires a non-negative variance");
    return std::sqrt(var) / mean;
}

std::vector<bool> eligibility(const Population& pop, std::span<const double> estimated_prevalence,
                              bool use_estimate) {
    if (use_estimate && estimated_prevalence.size() != pop.num_cells())
        throw std::invalid_argument("estimated prevalence does not align with the population cells");
    std::vector<bool> mask(pop.num_cells());
    for (std::size_t c = 0; c < mask.size(); ++c) {
        const double nd = static_cast<double>(pop.area_headcount(pop.area_of(c)));
        const double count = use_estimate
                                 ? estimated_prevalence[c] * static_cast<double>(pop.headcount(c))
                                 : static_cast<double>(pop.outcome(c));
        mask[c] = count / nd >= kEligibleShare;
    }
    return mask;
}

double loss_weighted(std::span<const double> r, const std::vector<bool>& eligible,
                     const Population& pop) {
    Count s = 0;
    for (std::size_t c = 0; c < r.size(); ++c)
        if (eligible[c] && suppressed(r[c])) s += pop.headcount(c);
    return static_cast<double>(s) / static_cast<double>(pop.total());
}

double loss_count(std::span<const double> r, const std::vector<bool>& eligible) {
    std::size_t s = 0;
    for (std::size_t c = 0; c < r.size(); ++c)
        if (eligible[c] && suppressed(r[c])) ++s;
    return static_cast<double>(s);
}

double loss_proportion(std::span<const double> r, const std::vector<bool>& eligible) {
    std::size_t e = 0;
    for (std::size_t c = 0; c < r.size(); ++c) e += eligible[c] ? 1 : 0;
    return e == 0 ? 0.0 : loss_count(r, eligible) / static_cast<double>(e);
}

double loss(LossKind kind, std::span<const double> r, const std::vector<bool>& eligible,
            const Population& pop) {
    switch (kind) {
        case LossKind::Weighted: return loss_weighted(r, eligible, pop);
        case LossKind::Count: return loss_count(r, eligible);
        case LossKind::Proportion: return loss_proportion(r, eligible);
    }
    return 0.0;
}

LossReport make_loss_report(const Population& pop, std::span<const double> post_mean,
                            std::span<const double> post_var, LossKind kind) {
    if (post_mean.size() != pop.num_cells() || post_var.size() != pop.num_cells())
        throw std::invalid_argument("posterior summaries do not align with the population cells");
    LossReport rep;
    rep.post_mean.assign(post_mean.begin(), post_mean.end());
    rep.rse.resize(pop.num_cells());
    for (std::size_t c = 0; c < rep.rse.size(); ++c)
        rep.rse[c] = post_mean[c] > 0.0 ? rse(post_mean[c], std::max(post_var[c], 0.0))
                                        : std::numeric_limits<double>::infinity();
    rep.eligible_true = eligibility(pop, post_mean, false);
    rep.eligible_est = eligibility(pop, post_mean, true);
    rep.loss_true = loss(kind, rep.rse, rep.eligible_true, pop);
    rep.loss_est = loss(kind, rep.rse, rep.eligible_est, pop);
    for (std::size_t c = 0; c < rep.rse.size(); ++c)
        if (rep.eligible_est[c] && suppressed(rep.rse[c])) rep.suppressed_cells.push_back(c);
    return rep;
}

void write_suppression_report(const LossReport& report, const Population& pop, std::ostream& out) {
    out << "group_id,area_id,post_mean,rse,eligible,suppressed\n";
    for (std::size_t c = 0; c < pop.num_cells(); ++c) {
        const bool elig = report.eligible_est[c];
        out << pop.group_labels()[pop.group_of(c)] << ',' << pop.area_ids()[pop.area_of(c)] << ','
            << csv::format_double(report.post_mean[c]) << ',' << csv::format_double(report.rse[c]) << ','
            << (elig ? 1 : 0) << ',' << (elig && suppressed(report.rse[c]) ? 1 : 0) << '\n';
    }
}

}  // namespace saessd
