#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "saessd/planning.hpp"

using namespace saessd;

TEST_CASE("fraction to effective sample size rounds to nearest") {
    CHECK(fraction_to_ess(0.5, Count{1000}) == 500);
    CHECK(fraction_to_ess(1.0, Count{14664297}) == 14664297);
    CHECK(fraction_to_ess(0.026875, Count{14664297}) == 394103);
    CHECK(fraction_to_ess(0.0015, Count{1000}) == 2);
    CHECK_THROWS(fraction_to_ess(0.0, Count{1000}));
    CHECK_THROWS(fraction_to_ess(1.5, Count{1000}));
}

TEST_CASE("the published ESS round-trips through its fraction") {
    const Count total = 14664297;
    const Count ess = 394103;
    const double f = static_cast<double>(ess) / static_cast<double>(total);
    CHECK(std::llabs(fraction_to_ess(f, total) - ess) <= 1);
    // The population implied by the published pair.
    CHECK(std::abs(static_cast<double>(ess) / 0.026875 - static_cast<double>(total)) < 1.0);
}

TEST_CASE("actual sample size rounds up after the design effect") {
    CHECK(ess_to_actual(100, {1.16, "survey A"}) == 116);
    CHECK(ess_to_actual(100, {1.44, "survey B"}) == 144);
    CHECK(ess_to_actual(100, {1.1, ""}) == 110);
    CHECK(ess_to_actual(12345, {1.0, ""}) == 12345);
    CHECK(ess_to_actual(394103, {1.16, ""}) == 457160);
    CHECK(ess_to_actual(100, {1.001, ""}) == 101);
    CHECK_THROWS(ess_to_actual(0, {1.16, ""}));
    CHECK_THROWS(ess_to_actual(100, {0.0, ""}));
}

TEST_CASE("design effects below one are accepted but atypical") {
    DesignEffect d{0.9, "stratified"};
    CHECK_FALSE(d.typical());
    CHECK(ess_to_actual(100, d) == 90);
    CHECK(DesignEffect{1.16, ""}.typical());
}

TEST_CASE("planning conversions are monotone") {
    Count prev = 0;
    for (double f = 0.01; f <= 1.0; f += 0.01) {
        const Count e = fraction_to_ess(f, Count{50000});
        CHECK(e >= prev);
        prev = e;
    }
    for (Count e = 1; e < 500; e += 7) CHECK(ess_to_actual(e, {1.3, ""}) <= ess_to_actual(e, {1.31, ""}));
}
