#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "saessd/population.hpp"
#include "saessd/rng.hpp"

namespace saessd {

// One simulated survey: effective cell sample sizes n and sampled outcome
// counts y, aligned with the population's cell order.
struct SampleRealization {
    double fraction = 0.0;
    std::vector<Count> n;
    std::vector<Count> y;
    std::uint64_t seed = 0;

    std::size_t num_cells() const noexcept { return n.size(); }
};

// n[c] ~ Binomial(N[c], f), independently per cell. Requires 0 < f <= 1.
std::vector<Count> draw_sample_sizes(const Population& pop, double fraction, RandomStream& rng);

// y[c] ~ Binomial(n[c], p[c]); y = 0 where n = 0. Requires p in [0, 1].
std::vector<Count> draw_outcomes(std::span<const Count> n, std::span<const double> p,
                                 RandomStream& rng);

// Sizes then outcomes from the same stream.
SampleRealization draw_sample(const Population& pop, double fraction, std::span<const double> p,
                              RandomStream& rng);

// Sample from the true population (p = Y/N).
SampleRealization draw_design_sample(const Population& pop, double fraction, RandomStream& rng);

// Sample CSV: header `area_id,group_id,n,y`, one row per cell of `pop`.
// Throws ParseError on malformed rows and ValidationError when a cell is
// missing, unknown or has y > n or n > N.
SampleRealization read_sample(std::istream& in, const Population& pop);
void write_sample(const SampleRealization& s, const Population& pop, std::ostream& out);

}  // namespace saessd
