#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "saessd/reliability.hpp"

using namespace saessd;

TEST_CASE("rse is sd over mean with a strict suppression threshold") {
    CHECK(rse(0.1, 0.025 * 0.025) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(suppressed(rse(0.1, 0.025 * 0.025)));
    CHECK(rse(0.3, 0.0) == 0.0);
    CHECK(rse(0.5, 0.01) == doctest::Approx(0.2).epsilon(1e-14));
    CHECK_FALSE(suppressed(0.2));
    CHECK(suppressed(std::nextafter(0.2, 1.0)));
    CHECK_THROWS_AS(rse(0.0, 0.1), std::domain_error);
    CHECK_THROWS_AS(rse(-0.1, 0.1), std::domain_error);
    CHECK_THROWS_AS(rse(0.1, -1e-9), std::domain_error);
}

TEST_CASE("eligibility uses the inclusive 3 per cent share") {
    // One area of 1000 people split into groups of 100 and 900.
    Population pop({"A"}, {"g1", "g2"}, {100, 900}, {30, 0});
    auto e = eligibility(pop, {}, false);
    CHECK(e[0]);
    CHECK_FALSE(e[1]);

    std::vector<double> p{0.3, 0.0};
    auto est = eligibility(pop, p, true);
    CHECK(est[0]);
    CHECK_FALSE(est[1]);
    std::vector<double> low{0.299, 1.0 / 30.0};
    est = eligibility(pop, low, true);
    CHECK_FALSE(est[0]);
    CHECK(est[1]);
}

TEST_CASE("weighted loss on two areas") {
    Population pop({"A", "B"}, {"g"}, {100, 300}, {50, 150});
    std::vector<bool> elig{true, true};
    std::vector<double> none{0.1, 0.2}, second{0.1, 0.5}, both{0.3, 0.9};
    CHECK(loss_weighted(none, elig, pop) == 0.0);
    CHECK(loss_weighted(second, elig, pop) == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(loss_weighted(both, elig, pop) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(loss(LossKind::Weighted, second, elig, pop) == loss_weighted(second, elig, pop));
}

TEST_CASE("count and proportion losses gate on eligibility") {
    std::vector<double> r{0.9, 0.3, 0.25, 0.21, 0.1};
    std::vector<bool> elig{false, true, true, true, true};
    CHECK(loss_count(r, elig) == 3.0);
    CHECK(loss_proportion(r, elig) == doctest::Approx(0.75));
    std::vector<bool> none(5, false);
    CHECK(loss_count(r, none) == 0.0);
    CHECK(loss_proportion(r, none) == 0.0);
    std::vector<double> low(5, 0.05);
    CHECK(loss_count(low, elig) == 0.0);
}

TEST_CASE("lowering any RSE never raises a loss, and kappa = 0 decisions agree") {
    auto b = fixtures::small_synth(12, 3, 4);
    const auto& pop = b.population;
    const auto C = pop.num_cells();
    auto elig = eligibility(pop, {}, false);
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 0.5);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> r(C);
        for (auto& v : r) v = u(rng);
        const double w = loss_weighted(r, elig, pop), c = loss_count(r, elig);
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
        CHECK((w > 0.0) == (c > 0.0));
        auto lower = r;
        lower[rng() % C] *= 0.5;
        CHECK(loss_weighted(lower, elig, pop) <= w);
        CHECK(loss_count(lower, elig) <= c);
        CHECK(loss_proportion(lower, elig) <= loss_proportion(r, elig));
    }
}

TEST_CASE("loss report and suppression csv") {
    Population pop({"A", "B"}, {"g1", "g2"}, {100, 300, 100, 300}, {40, 90, 10, 30});
    std::vector<double> mean{0.4, 0.3, 0.1, 0.0}, var{0.0001, 0.01, 0.0001, 0.01};
    auto rep = make_loss_report(pop, mean, var, LossKind::Count);
    CHECK(rep.rse[0] == doctest::Approx(0.025));
    CHECK(std::isinf(rep.rse[3]));
    CHECK(rep.eligible_true == std::vector<bool>{true, true, true, true});
    CHECK(rep.eligible_est == std::vector<bool>{true, true, true, false});
    CHECK(rep.loss_true == 2.0);
    CHECK(rep.loss_est == 1.0);
    CHECK(rep.suppressed_cells == std::vector<std::size_t>{1});
    std::ostringstream out;
    write_suppression_report(rep, pop, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "group_id,area_id,post_mean,rse,eligible,suppressed");
    std::getline(in, line);
    CHECK(line.rfind("g1,A,0.4,", 0) == 0);
}
