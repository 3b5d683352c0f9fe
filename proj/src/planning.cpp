#include "saessd/planning.hpp"

#include <cmath>
#include <stdexcept>

namespace saessd {

Count fraction_to_ess(double fraction, Count population_total) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
    return static_cast<Count>(std::llround(fraction * static_cast<double>(population_total)));
}

Count ess_to_actual(Count ess, const DesignEffect& deff) {
    if (ess <= 0) throw std::invalid_argument("effective sample size must be positive");
    if (!(deff.deff > 0.0)) throw std::invalid_argument("design effect must be positive");
    const double raw = static_cast<double>(ess) * deff.deff;
    // 100 * 1.1 is 110.00000000000001 in binary; snap products within
    // rounding noise of an integer before taking the ceiling.
    const double nearest = std::round(raw);
    if (std::abs(raw - nearest) <= 1e-9 * std::max(1.0, raw)) return static_cast<Count>(nearest);
    return static_cast<Count>(std::ceil(raw));
}

}  // namespace saessd
