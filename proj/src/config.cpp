#include "saessd/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "csv.hpp"

namespace saessd {

namespace {

std::string lower(std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return s;
}

double to_double(const std::string& key, const std::string& v) {
    auto d = csv::parse_double(v);
    if (!d) throw ConfigError("`" + key + "` expects a number, got `" + v + "`");
    return *d;
}

std::int64_t to_int(const std::string& key, const std::string& v) {
    auto i = csv::parse_int(v);
    if (!i) throw ConfigError("`" + key + "` expects an integer, got `" + v + "`");
    return *i;
}

bool to_bool(const std::string& key, const std::string& v) {
    auto l = lower(v);
    if (l == "true" || l == "yes" || l == "1" || l == "on") return true;
    if (l == "false" || l == "no" || l == "0" || l == "off") return false;
    throw ConfigError("`" + key + "` expects true or false, got `" + v + "`");
}

std::vector<std::string> to_list(const std::string& v) {
    std::vector<std::string> out;
    for (auto& item : csv::split(v))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::string join(const std::vector<std::string>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
    return s;
}

using Handler = std::function<void(const std::string&, const std::string&)>;

}  // namespace

IniDocument parse_ini(std::istream& in) {
    IniDocument doc;
    std::string line, section;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        auto t = csv::trim(line);
        if (t.empty() || t.front() == '#' || t.front() == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError("line " + std::to_string(row) + ": malformed section header");
            section = lower(std::string(csv::trim(t.substr(1, t.size() - 2))));
            doc[section];
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(row) + ": expected key = value");
        if (section.empty()) throw ConfigError("line " + std::to_string(row) + ": key outside any section");
        auto key = lower(std::string(csv::trim(t.substr(0, eq))));
        auto value = std::string(csv::trim(t.substr(eq + 1)));
        if (!doc[section].emplace(key, value).second)
            throw ConfigError("line " + std::to_string(row) + ": duplicate key `" + key + "`");
    }
    return doc;
}

RunConfig config_from_ini(const IniDocument& doc, const std::filesystem::path& base_dir) {
    RunConfig cfg;
    auto path = [&](const std::string& v) {
        std::filesystem::path p(v);
        return p.is_absolute() ? p : base_dir / p;
    };

    // The model scenario sets the structure before individual keys refine it.
    if (auto s = doc.find("model"); s != doc.end())
        if (auto k = s->second.find("scenario"); k != s->second.end()) {
            auto id = parse_scenario(k->second);
            if (!id || *id == ScenarioId::S1) throw ConfigError("[model] scenario must be S2, S3 or S4");
            cfg.model = ModelSpec::for_scenario(*id);
        }

    std::map<std::string, std::map<std::string, Handler>> handlers;
    handlers["paths"] = {
        {"population", [&](auto&, auto& v) { cfg.population = path(v); }},
        {"covariates", [&](auto&, auto& v) { cfg.covariates = path(v); }},
        {"adjacency", [&](auto&, auto& v) { cfg.adjacency = path(v); }},
        {"sample", [&](auto&, auto& v) { cfg.sample = path(v); }},
        {"output_dir", [&](auto&, auto& v) { cfg.output_dir = path(v); }},
    };
    handlers["model"] = {
        {"scenario", [](auto&, auto&) {}},
        {"covariates", [&](auto& k, auto& v) { cfg.model.include_covariates = to_bool(k, v); }},
        {"spatial", [&](auto& k, auto& v) { cfg.model.include_spatial = to_bool(k, v); }},
        {"exchangeable", [&](auto& k, auto& v) { cfg.model.include_exchangeable = to_bool(k, v); }},
        {"shared_covariate_effects", [&](auto& k, auto& v) { cfg.model.shared_covariate_effects = to_bool(k, v); }},
        {"upsilon_shape", [&](auto& k, auto& v) { cfg.model.hyperprior_upsilon.shape = to_double(k, v); }},
        {"upsilon_rate", [&](auto& k, auto& v) { cfg.model.hyperprior_upsilon.rate = to_double(k, v); }},
        {"nu_shape", [&](auto& k, auto& v) { cfg.model.hyperprior_nu.shape = to_double(k, v); }},
        {"nu_rate", [&](auto& k, auto& v) { cfg.model.hyperprior_nu.rate = to_double(k, v); }},
        {"fixed_effect_sd", [&](auto& k, auto& v) { cfg.model.fixed_effect_prior_sd = to_double(k, v); }},
        {"engine",
         [&](auto& k, auto& v) {
             auto l = lower(v);
             if (l == "laplace") cfg.fit_engine = FitEngine::Laplace;
             else if (l == "mcmc") cfg.fit_engine = FitEngine::Mcmc;
             else throw ConfigError("`" + k + "` must be laplace or mcmc");
         }},
        {"chains", [&](auto& k, auto& v) { cfg.chains.num_chains = static_cast<int>(to_int(k, v)); }},
        {"burn_in", [&](auto& k, auto& v) { cfg.chains.burn_in = static_cast<int>(to_int(k, v)); }},
        {"samples", [&](auto& k, auto& v) { cfg.chains.samples = static_cast<int>(to_int(k, v)); }},
        {"thin", [&](auto& k, auto& v) { cfg.chains.thin = static_cast<int>(to_int(k, v)); }},
    };
    auto loss_kind = [](const std::string& k, const std::string& v) {
        auto l = lower(v);
        if (l == "weighted") return LossKind::Weighted;
        if (l == "count") return LossKind::Count;
        if (l == "proportion") return LossKind::Proportion;
        throw ConfigError("`" + k + "` must be weighted, count or proportion");
    };
    handlers["ssd"] = {
        {"f_a", [&](auto& k, auto& v) { cfg.ssd.f_a = to_double(k, v); }},
        {"f_b", [&](auto& k, auto& v) { cfg.ssd.f_b = to_double(k, v); }},
        {"h", [&](auto& k, auto& v) { cfg.ssd.h = to_double(k, v); }},
        {"l", [&](auto& k, auto& v) { cfg.ssd.L = static_cast<int>(to_int(k, v)); }},
        {"kappa", [&](auto& k, auto& v) { cfg.ssd.kappa = to_double(k, v); }},
        {"gamma", [&](auto& k, auto& v) { cfg.ssd.gamma = to_double(k, v); }},
        {"loss", [&](auto& k, auto& v) { cfg.ssd.loss_kind = loss_kind(k, v); }},
        {"eligibility",
         [&](auto& k, auto& v) {
             auto l = lower(v);
             if (l == "estimated") cfg.ssd.use_estimated_eligibility = true;
             else if (l == "true") cfg.ssd.use_estimated_eligibility = false;
             else throw ConfigError("`" + k + "` must be estimated or true");
         }},
        {"pilot_fraction", [&](auto& k, auto& v) { cfg.ssd.pilot_fraction = to_double(k, v); }},
        {"max_failure_rate", [&](auto& k, auto& v) { cfg.ssd.max_failure_rate = to_double(k, v); }},
        {"engine",
         [&](auto& k, auto& v) {
             auto l = lower(v);
             if (l == "model") cfg.ssd_engine = SsdEngine::Model;
             else if (l == "threshold_stub") cfg.ssd_engine = SsdEngine::ThresholdStub;
             else throw ConfigError("`" + k + "` must be model or threshold_stub");
         }},
        {"stub_threshold", [&](auto& k, auto& v) { cfg.stub_threshold = to_double(k, v); }},
        {"deff",
         [&](auto& k, auto& v) {
             cfg.deffs.clear();
             for (auto& item : to_list(v)) cfg.deffs.push_back({to_double(k, item), "deff " + item});
         }},
    };
    handlers["sim"] = {
        {"scenarios",
         [&](auto& k, auto& v) {
             cfg.scenarios.clear();
             for (auto& item : to_list(v)) {
                 auto id = parse_scenario(item);
                 if (!id) throw ConfigError("`" + k + "`: unknown scenario `" + item + "`");
                 cfg.scenarios.push_back(*id);
             }
         }},
        {"fractions",
         [&](auto& k, auto& v) {
             cfg.fractions.clear();
             for (auto& item : to_list(v)) cfg.fractions.push_back(to_double(k, item));
         }},
        {"b", [&](auto& k, auto& v) { cfg.replications = static_cast<int>(to_int(k, v)); }},
        {"loss", [&](auto& k, auto& v) { cfg.sim.loss_kind = loss_kind(k, v); }},
        {"kappa", [&](auto& k, auto& v) { cfg.sim.kappa = to_double(k, v); }},
        {"population_weighted_groups", [&](auto& k, auto& v) { cfg.sim.population_weighted_groups = to_bool(k, v); }},
    };
    handlers["run"] = {
        {"seed", [&](auto& k, auto& v) { cfg.master_seed = static_cast<std::uint64_t>(to_int(k, v)); }},
        {"jobs", [&](auto& k, auto& v) { cfg.jobs = static_cast<std::size_t>(to_int(k, v)); }},
    };
    handlers["synth"] = {
        {"areas", [&](auto& k, auto& v) { cfg.synth.num_areas = static_cast<std::size_t>(to_int(k, v)); }},
        {"groups", [&](auto& k, auto& v) { cfg.synth.num_groups = static_cast<std::size_t>(to_int(k, v)); }},
        {"rates",
         [&](auto& k, auto& v) {
             cfg.synth.prevalence_profile.clear();
             for (auto& item : to_list(v)) cfg.synth.prevalence_profile.push_back(to_double(k, item));
         }},
        {"headcount_min", [&](auto& k, auto& v) { cfg.synth.headcount_min = to_int(k, v); }},
        {"headcount_max", [&](auto& k, auto& v) { cfg.synth.headcount_max = to_int(k, v); }},
        {"covariates", [&](auto& k, auto& v) { cfg.synth.num_covariates = static_cast<std::size_t>(to_int(k, v)); }},
        {"spatial_sd", [&](auto& k, auto& v) { cfg.synth.spatial_sd = to_double(k, v); }},
        {"covariate_effect", [&](auto& k, auto& v) { cfg.synth.covariate_effect = to_double(k, v); }},
        {"cell_noise_sd", [&](auto& k, auto& v) { cfg.synth.cell_noise_sd = to_double(k, v); }},
    };

    for (const auto& [section, entries] : doc) {
        auto hs = handlers.find(section);
        if (hs == handlers.end()) throw ConfigError("unknown section [" + section + "]");
        for (const auto& [key, value] : entries) {
            auto h = hs->second.find(key);
            if (h == hs->second.end()) throw ConfigError("unknown key `" + key + "` in [" + section + "]");
            h->second(section + "." + key, value);
        }
    }
    if (cfg.replications < 1) throw ConfigError("[sim] B must be at least 1");
    for (double f : cfg.fractions)
        if (!(f > 0.0 && f <= 1.0)) throw ConfigError("[sim] fractions must lie in (0, 1]");
    for (const auto& d : cfg.deffs)
        if (!(d.deff > 0.0)) throw ConfigError("[ssd] deff values must be positive");
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    auto base = path.parent_path();
    return config_from_ini(parse_ini(in), base.empty() ? std::filesystem::path(".") : base);
}

std::string RunConfig::canonical() const {
    std::ostringstream o;
    auto d = [](double v) { return csv::format_double(v); };
    auto b = [](bool v) { return v ? "true" : "false"; };
    // Paths are given by file name only, so relocating a bundle keeps its hash.
    o << "population=" << population.filename().string() << '\n'
      << "covariates=" << covariates.filename().string() << '\n'
      << "adjacency=" << adjacency.filename().string() << '\n'
      << "sample=" << sample.filename().string() << '\n'
      << "model=" << b(model.include_covariates) << ',' << b(model.include_spatial) << ','
      << b(model.include_exchangeable) << ',' << b(model.shared_covariate_effects) << ','
      << d(model.hyperprior_upsilon.shape) << ',' << d(model.hyperprior_upsilon.rate) << ','
      << d(model.hyperprior_nu.shape) << ',' << d(model.hyperprior_nu.rate) << ','
      << d(model.fixed_effect_prior_sd) << '\n'
      << "engine=" << (fit_engine == FitEngine::Laplace ? "laplace" : "mcmc") << ',' << chains.num_chains << ','
      << chains.burn_in << ',' << chains.samples << ',' << chains.thin << '\n'
      << "ssd=" << d(ssd.f_a) << ',' << d(ssd.f_b) << ',' << d(ssd.h) << ',' << ssd.L << ',' << d(ssd.kappa)
      << ',' << d(ssd.gamma) << ',' << static_cast<int>(ssd.loss_kind) << ',' << b(ssd.use_estimated_eligibility)
      << ',' << d(ssd.pilot_fraction) << ',' << d(ssd.max_failure_rate) << ','
      << (ssd_engine == SsdEngine::Model ? "model" : "threshold_stub") << ',' << d(stub_threshold) << '\n';
    std::vector<std::string> items;
    for (const auto& x : deffs) items.push_back(d(x.deff));
    o << "deff=" << join(items) << '\n';
    items.clear();
    for (auto s : scenarios) items.push_back(scenario_name(s));
    o << "scenarios=" << join(items) << '\n';
    items.clear();
    for (double f : fractions) items.push_back(d(f));
    o << "fractions=" << join(items) << '\n'
      << "sim=" << replications << ',' << static_cast<int>(sim.loss_kind) << ',' << d(sim.kappa) << ','
      << b(sim.population_weighted_groups) << '\n';
    items.clear();
    for (double r : synth.prevalence_profile) items.push_back(d(r));
    o << "synth=" << synth.num_areas << ',' << synth.num_groups << ',' << join(items) << ','
      << synth.headcount_min << ',' << synth.headcount_max << ',' << synth.num_covariates << ','
      << d(synth.spatial_sd) << ',' << d(synth.covariate_effect) << ',' << d(synth.cell_noise_sd) << '\n';
    return o.str();
}

std::string RunConfig::hash() const { return fnv1a_hex(canonical()); }

std::string fnv1a_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace saessd
