#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "saessd/population.hpp"

using namespace saessd;

TEST_CASE("population loads a two-area table") {
    std::istringstream in("area_id,group_id,N,Y\nA,g,10,1\nB,g,20,5\n");
    auto pop = read_population(in);
    CHECK(pop.num_areas() == 2);
    CHECK(pop.num_groups() == 1);
    CHECK(pop.headcount(1) == 20);
    CHECK(pop.outcome(0) == 1);
    CHECK(pop.total() == 30);
    CHECK(pop.prevalence()[1] == doctest::Approx(0.25));
}

TEST_CASE("population rejects Y above N and names the cell") {
    std::istringstream in("area_id,group_id,N,Y\nA,g,10,11\n");
    try {
        read_population(in);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("area A") != std::string::npos);
    }
}

TEST_CASE("malformed rows report their index") {
    std::istringstream in("area_id,group_id,N,Y\nA,g,10,1\nB,g,x,1\n");
    try {
        read_population(in);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.row() == 2);
    }
}

TEST_CASE("population requires the full cross-classification") {
    std::istringstream missing("area_id,group_id,N,Y\nA,g1,10,1\nB,g2,10,1\n");
    CHECK_THROWS_AS(read_population(missing), ValidationError);
    std::istringstream dup("area_id,group_id,N,Y\nA,g,10,1\nA,g,10,1\n");
    CHECK_THROWS_AS(read_population(dup), ValidationError);
    std::istringstream header("area,group,N,Y\nA,g,10,1\n");
    CHECK_THROWS_AS(read_population(header), ParseError);
}

TEST_CASE("empty cells are allowed but empty areas are not") {
    CHECK_NOTHROW(Population({"A"}, {"g1", "g2"}, {0, 5}, {0, 1}));
    CHECK_THROWS_AS(Population({"A", "B"}, {"g"}, {5, 0}, {1, 0}), ValidationError);
}

TEST_CASE("check_population lists several problems") {
    std::istringstream in("area_id,group_id,N,Y\nA,g,10,11\nB,g,x,1\nC,g,5,6\n");
    auto issues = check_population(in, 20);
    CHECK(issues.size() == 3);
}

TEST_CASE("census-scale table has 11,736 cells") {
    const std::size_t D = 1956, J = 6;
    std::vector<Count> N(D * J, 100), Y(D * J, 10);
    Population pop(fixtures::ids("A", D), fixtures::ids("g", J), N, Y);
    CHECK(pop.num_cells() == 11736);
}

TEST_CASE("population round-trips through CSV") {
    auto b = fixtures::small_synth(6, 2, 3);
    std::stringstream s;
    write_population(b.population, s);
    auto back = read_population(s);
    CHECK(back.headcounts() == b.population.headcounts());
    CHECK(back.outcomes() == b.population.outcomes());
    CHECK(back.area_ids() == b.population.area_ids());
}

TEST_CASE("adjacency is symmetric, drops self-loops and flags isolated areas") {
    std::vector<std::string> areas{"A", "B", "C"};
    std::istringstream in("area_id_a,area_id_b\nA,B\nB,A\nA,A\n");
    auto load = read_adjacency(in, areas);
    CHECK(load.graph.adjacent(0, 1));
    CHECK(load.graph.adjacent(1, 0));
    CHECK_FALSE(load.graph.adjacent(0, 0));
    CHECK(load.graph.num_edges() == 1);
    CHECK(load.graph.isolated_areas() == std::vector<std::size_t>{2});
    CHECK(load.graph.num_components() == 2);
    CHECK_FALSE(load.warnings.empty());

    std::istringstream unknown("A,Z\n");
    CHECK_THROWS_AS(read_adjacency(unknown, areas), ValidationError);
}

TEST_CASE("covariate scaling standardizes columns and rejects constants") {
    CovariateMatrix raw;
    raw.values.resize(5, 2);
    raw.values << 1, 10, 2, 20, 3, 35, 4, 40, 10, 50;
    auto x = scale_covariates(raw);
    CHECK(x.scaled);
    for (Eigen::Index k = 0; k < 2; ++k) {
        auto col = x.values.col(k);
        double mean = col.mean();
        double sd = std::sqrt((col.array() - mean).square().sum() / 4.0);
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(sd - 1.0) < 1e-9);
    }
    raw.values.col(1).setConstant(3.0);
    raw.names = {"x1", "flat"};
    try {
        scale_covariates(raw);
        FAIL("expected rejection");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("flat") != std::string::npos);
    }
}

TEST_CASE("covariates are reordered to population order") {
    std::istringstream in("area_id,x1\nB,2\nA,1\n");
    auto x = read_covariates(in, {"A", "B"});
    CHECK(x.values(0, 0) == 1.0);
    CHECK(x.values(1, 0) == 2.0);
    std::istringstream missing("area_id,x1\nA,1\n");
    CHECK_THROWS(read_covariates(missing, {"A", "B"}));
}

TEST_CASE("synthetic populations are deterministic and valid") {
    SynthOptions o;
    o.num_areas = 12;
    o.num_groups = 3;
    auto a = synth_population(o);
    auto b = synth_population(o);
    CHECK(a.population.outcomes() == b.population.outcomes());
    CHECK(a.population.num_cells() == 36);
    CHECK(a.graph.num_components() == 1);
    CHECK(a.covariates.scaled);
    for (std::size_t c = 0; c < a.population.num_cells(); ++c) {
        CHECK(a.population.headcount(c) >= o.headcount_min);
        CHECK(a.population.headcount(c) <= o.headcount_max);
    }
    o.seed = 2;
    auto c = synth_population(o);
    CHECK(c.population.outcomes() != a.population.outcomes());
}
