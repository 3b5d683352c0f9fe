#include <doctest.h>

#include "fixtures.hpp"
#include "saessd/parallel.hpp"
#include "saessd/sampling.hpp"

using namespace saessd;

TEST_CASE("sample sizes need a fraction in (0, 1]") {
    auto b = fixtures::small_synth(4, 2, 1);
    RandomStream rng(1);
    CHECK_THROWS_AS(draw_sample_sizes(b.population, 0.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(draw_sample_sizes(b.population, 1.5, rng), std::invalid_argument);
    auto full = draw_sample_sizes(b.population, 1.0, rng);
    CHECK(full == b.population.headcounts());
}

TEST_CASE("outcomes respect n and reject invalid probabilities") {
    RandomStream rng(2);
    std::vector<Count> n{0, 5, 10};
    auto y = draw_outcomes(n, std::vector<double>{0.5, 0.0, 1.0}, rng);
    CHECK(y == std::vector<Count>{0, 0, 10});
    CHECK_THROWS(draw_outcomes(n, std::vector<double>{0.5, 1.2, 0.1}, rng));
    CHECK_THROWS(draw_outcomes(n, std::vector<double>{0.5, 0.1}, rng));
}

TEST_CASE("sample sizes average f N") {
    std::vector<Count> N(200, 1000), Y(200, 100);
    Population pop(fixtures::ids("A", 200), {"g"}, N, Y);
    RandomStream rng(3);
    double total = 0;
    for (int r = 0; r < 20; ++r)
        for (auto v : draw_sample_sizes(pop, 0.05, rng)) total += static_cast<double>(v);
    const double mean = total / (20 * 200);
    CHECK(mean == doctest::Approx(50.0).epsilon(0.01));
}

TEST_CASE("replication streams are reproducible and order independent") {
    auto b = fixtures::small_synth(10, 2, 4);
    std::vector<std::vector<Count>> serial(8), threaded(8);
    for (std::size_t i = 0; i < 8; ++i) {
        auto rng = replicate_seed(99, i);
        serial[i] = draw_design_sample(b.population, 0.1, rng).y;
    }
    parallel_for(8, 4, [&](std::size_t i) {
        auto rng = replicate_seed(99, 7 - i);
        threaded[7 - i] = draw_design_sample(b.population, 0.1, rng).y;
    });
    CHECK(serial == threaded);
    auto other = replicate_seed(100, 0);
    CHECK(draw_design_sample(b.population, 0.1, other).y != serial[0]);
}

TEST_CASE("derived seeds differ by path") {
    CHECK(derive_seed(1, {0}) != derive_seed(1, {1}));
    CHECK(derive_seed(1, {0, 1}) != derive_seed(1, {1, 0}));
    CHECK(derive_seed(2, {0}) == derive_seed(2, {0}));
}

TEST_CASE("sample files round-trip") {
    auto b = fixtures::small_synth(5, 2, 6);
    RandomStream rng(8);
    auto s = draw_design_sample(b.population, 0.2, rng);
    std::stringstream io;
    write_sample(s, b.population, io);
    auto back = read_sample(io, b.population);
    CHECK(back.n == s.n);
    CHECK(back.y == s.y);
    std::istringstream bad("area_id,group_id,n,y\nA01,g1,5,6\n");
    CHECK_THROWS_AS(read_sample(bad, b.population), ValidationError);
}
