#pragma once

#include <string>

#include "saessd/population.hpp"

namespace saessd {

struct DesignEffect {
    double deff = 1.0;
    std::string source_label;

    // False for values below 1, which are accepted but unusual.
    bool typical() const noexcept { return deff >= 1.0; }
};

// round(f * N). Requires 0 < f <= 1.
Count fraction_to_ess(double fraction, Count population_total);
inline Count fraction_to_ess(double fraction, const Population& pop) {
    return fraction_to_ess(fraction, pop.total());
}

// ceil(ess * deff). Requires ess > 0 and deff > 0.
Count ess_to_actual(Count ess, const DesignEffect& deff);

}  // namespace saessd
