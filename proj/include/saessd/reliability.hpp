#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include "saessd/population.hpp"

namespace saessd {

inline constexpr double kRseThreshold = 0.2;
inline constexpr double kEligibleShare = 0.03;

// Relative posterior standard error sqrt(var) / mean. Throws
// std::domain_error when mean <= 0 or var < 0.
double rse(double mean, double var);

// A cell is suppressed when its RSE is strictly above the threshold.
inline bool suppressed(double r) { return r > kRseThreshold; }

// Cells whose share of the area population is at least 3 per cent. With
// use_estimate the share is p_hat * N_jd / N_d, otherwise Y_jd / N_d.
std::vector<bool> eligibility(const Population& pop, std::span<const double> estimated_prevalence,
                              bool use_estimate);

// N^-1 sum over eligible suppressed cells of N_jd. Summed over groups of a
// fully suppressed area this gives N_d / N, so the value lies in [0, 1].
double loss_weighted(std::span<const double> rse, const std::vector<bool>& eligible,
                     const Population& pop);
// Number of eligible suppressed cells.
double loss_count(std::span<const double> rse, const std::vector<bool>& eligible);
// loss_count divided by the number of eligible cells (0 when none).
double loss_proportion(std::span<const double> rse, const std::vector<bool>& eligible);

enum class LossKind { Weighted, Count, Proportion };

double loss(LossKind kind, std::span<const double> rse, const std::vector<bool>& eligible,
            const Population& pop);

struct LossReport {
    std::vector<double> post_mean;
    std::vector<double> rse;
    std::vector<bool> eligible_true;
    std::vector<bool> eligible_est;
    double loss_true = 0.0;
    double loss_est = 0.0;
    std::vector<std::size_t> suppressed_cells;  // eligible (estimated) and over threshold
};

// Cells with a non-positive posterior mean get an infinite RSE.
LossReport make_loss_report(const Population& pop, std::span<const double> post_mean,
                            std::span<const double> post_var, LossKind kind);

// `group_id,area_id,post_mean,rse,eligible,suppressed`, group-major.
void write_suppression_report(const LossReport& report, const Population& pop, std::ostream& out);

}  // namespace saessd
