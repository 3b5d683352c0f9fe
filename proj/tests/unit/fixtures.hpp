#pragma once

#include <string>
#include <vector>

#include "saessd/population.hpp"
#include "saessd/sampling.hpp"

namespace fixtures {

inline std::vector<std::string> ids(const std::string& prefix, std::size_t n) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(prefix + std::to_string(i + 1));
    return v;
}

// Cycle graph 0-1-...-(n-1)-0.
inline saessd::AdjacencyGraph cycle(std::size_t n) {
    saessd::AdjacencyGraph g(n);
    for (std::size_t i = 0; i < n; ++i) g.add_edge(i, (i + 1) % n);
    return g;
}

inline saessd::AdjacencyGraph path(std::size_t n) {
    saessd::AdjacencyGraph g(n);
    for (std::size_t i = 0; i + 1 < n; ++i) g.add_edge(i, i + 1);
    return g;
}

inline saessd::SampleRealization sample(std::vector<saessd::Count> n, std::vector<saessd::Count> y) {
    saessd::SampleRealization s;
    s.n = std::move(n);
    s.y = std::move(y);
    return s;
}

inline saessd::SyntheticBundle small_synth(std::size_t D, std::size_t J, std::uint64_t seed) {
    saessd::SynthOptions o;
    o.num_areas = D;
    o.num_groups = J;
    o.prevalence_profile.resize(J);
    for (std::size_t j = 0; j < J; ++j) o.prevalence_profile[j] = 0.08 + 0.1 * static_cast<double>(j);
    o.seed = seed;
    return saessd::synth_population(o);
}

}  // namespace fixtures
