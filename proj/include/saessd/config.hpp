#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "saessd/designsim.hpp"
#include "saessd/model.hpp"
#include "saessd/planning.hpp"
#include "saessd/population.hpp"
#include "saessd/ssd.hpp"

namespace saessd {

// Malformed or inconsistent configuration (a usage error, not a data error).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Sectioned key = value text. '#' and ';' start comment lines.
using IniDocument = std::map<std::string, std::map<std::string, std::string>>;
IniDocument parse_ini(std::istream& in);

enum class SsdEngine { Model, ThresholdStub };
enum class FitEngine { Laplace, Mcmc };

struct RunConfig {
    std::filesystem::path population;
    std::filesystem::path covariates;  // optional
    std::filesystem::path adjacency;   // optional; no edges when absent
    std::filesystem::path sample;      // optional sample for `fit`
    std::filesystem::path output_dir = ".";

    ModelSpec model = ModelSpec::for_scenario(ScenarioId::S4);
    FitEngine fit_engine = FitEngine::Laplace;
    ChainConfig chains;

    SsdConfig ssd;
    SsdEngine ssd_engine = SsdEngine::Model;
    double stub_threshold = 0.027;
    std::vector<DesignEffect> deffs{{1.16, "deff 1.16"}, {1.44, "deff 1.44"}};

    std::vector<ScenarioId> scenarios{ScenarioId::S1, ScenarioId::S2, ScenarioId::S3, ScenarioId::S4};
    std::vector<double> fractions{0.02, 0.04};
    int replications = 400;
    SimOptions sim;

    SynthOptions synth;

    std::uint64_t master_seed = 1;
    std::size_t jobs = 0;

    // Canonical text of every setting, hashed for output headers.
    std::string canonical() const;
    std::string hash() const;
};

// Reads a config file; relative paths resolve against its directory.
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_ini(const IniDocument& doc, const std::filesystem::path& base_dir);

// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(std::string_view text);

}  // namespace saessd
