#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "saessd/config.hpp"

using namespace saessd;
namespace fs = std::filesystem;

namespace {

RunConfig from_text(const std::string& text, const fs::path& base = "/data") {
    std::istringstream in(text);
    return config_from_ini(parse_ini(in), base);
}

}  // namespace

TEST_CASE("ini sections, comments and whitespace") {
    std::istringstream in("# comment\n[a]\nx = 1\n; other\n  y=two words  \n\n[b]\nz=3\n");
    auto doc = parse_ini(in);
    CHECK(doc["a"]["x"] == "1");
    CHECK(doc["a"]["y"] == "two words");
    CHECK(doc["b"]["z"] == "3");
}

TEST_CASE("ini errors") {
    std::istringstream dup("[a]\nx=1\nx=2\n");
    CHECK_THROWS_AS(parse_ini(dup), ConfigError);
    std::istringstream orphan("x=1\n");
    CHECK_THROWS_AS(parse_ini(orphan), ConfigError);
    std::istringstream noeq("[a]\nx\n");
    CHECK_THROWS_AS(parse_ini(noeq), ConfigError);
}

TEST_CASE("config values map onto the module settings") {
    auto cfg = from_text(
        "[paths]\npopulation = pop.csv\nadjacency = /abs/adj.csv\noutput_dir = out\n"
        "[model]\nscenario = S3\n"
        "[ssd]\nf_a = 0.01\nf_b = 0.04\nh = 0.00375\nL = 50\ngamma = 0.05\nloss = count\n"
        "eligibility = true\nengine = threshold_stub\ndeff = 1.16, 1.44, 2\n"
        "[sim]\nscenarios = S1,S4\nfractions = 0.02\nB = 12\n"
        "[run]\nseed = 42\njobs = 2\n");
    CHECK(cfg.population == fs::path("/data/pop.csv"));
    CHECK(cfg.adjacency == fs::path("/abs/adj.csv"));
    CHECK(cfg.output_dir == fs::path("/data/out"));
    CHECK(cfg.model.include_covariates);
    CHECK_FALSE(cfg.model.include_spatial);
    CHECK(cfg.ssd.h == 0.00375);
    CHECK(cfg.ssd.L == 50);
    CHECK(cfg.ssd.loss_kind == LossKind::Count);
    CHECK_FALSE(cfg.ssd.use_estimated_eligibility);
    CHECK(cfg.ssd_engine == SsdEngine::ThresholdStub);
    REQUIRE(cfg.deffs.size() == 3);
    CHECK(cfg.deffs[2].deff == 2.0);
    CHECK(cfg.scenarios == std::vector<ScenarioId>{ScenarioId::S1, ScenarioId::S4});
    CHECK(cfg.replications == 12);
    CHECK(cfg.master_seed == 42);
    CHECK(cfg.jobs == 2);
}

TEST_CASE("unknown keys, sections and values are rejected") {
    CHECK_THROWS_AS(from_text("[ssd]\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(from_text("[nope]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(from_text("[ssd]\nh = abc\n"), ConfigError);
    CHECK_THROWS_AS(from_text("[ssd]\nloss = fancy\n"), ConfigError);
    CHECK_THROWS_AS(from_text("[sim]\nscenarios = S5\n"), ConfigError);
}

TEST_CASE("hash ignores seed, jobs and directories but not settings") {
    auto a = from_text("[paths]\npopulation = pop.csv\n[run]\nseed = 1\n", "/x");
    auto b = from_text("[paths]\npopulation = pop.csv\n[run]\nseed = 2\njobs = 3\n", "/y");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash().size() == 16);
    auto c = from_text("[paths]\npopulation = pop.csv\n[ssd]\nl = 99\n", "/x");
    CHECK(a.hash() != c.hash());
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("load_config resolves paths next to the file") {
    const fs::path dir = fs::temp_directory_path() / "saessd_config_test";
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "run.ini");
        out << "[paths]\npopulation = population.csv\n";
    }
    auto cfg = load_config(dir / "run.ini");
    CHECK(cfg.population == dir / "population.csv");
    CHECK_THROWS_AS(load_config(dir / "missing.ini"), ConfigError);
    fs::remove_all(dir);
}
