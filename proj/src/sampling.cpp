#include "saessd/sampling.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "csv.hpp"

namespace saessd {

std::vector<Count> draw_sample_sizes(const Population& pop, double fraction, RandomStream& rng) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw std::invalid_argument("sampling fraction must lie in (0, 1], got " +
                                    std::to_string(fraction));
    std::vector<Count> n(pop.num_cells());
    for (std::size_t c = 0; c < n.size(); ++c) n[c] = rng.binomial(pop.headcount(c), fraction);
    return n;
}

std::vector<Count> draw_outcomes(std::span<const Count> n, std::span<const double> p,
                                 RandomStream& rng) {
    if (n.size() != p.size()) throw std::invalid_argument("n and p are not aligned");
    std::vector<Count> y(n.size());
    for (std::size_t c = 0; c < n.size(); ++c) {
        if (!(p[c] >= 0.0 && p[c] <= 1.0))
            throw std::invalid_argument("success probability outside [0, 1] at cell " +
                                        std::to_string(c));
        y[c] = rng.binomial(n[c], p[c]);
    }
    return y;
}

SampleRealization draw_sample(const Population& pop, double fraction, std::span<const double> p,
                              RandomStream& rng) {
    SampleRealization s;
    s.fraction = fraction;
    s.seed = rng.seed();
    s.n = draw_sample_sizes(pop, fraction, rng);
    s.y = draw_outcomes(s.n, p, rng);
    return s;
}

SampleRealization draw_design_sample(const Population& pop, double fraction, RandomStream& rng) {
    auto p = pop.prevalence();
    return draw_sample(pop, fraction, p, rng);
}

SampleRealization read_sample(std::istream& in, const Population& pop) {
    std::unordered_map<std::string, std::size_t> area, group;
    for (std::size_t d = 0; d < pop.num_areas(); ++d) area.emplace(pop.area_ids()[d], d);
    for (std::size_t j = 0; j < pop.num_groups(); ++j) group.emplace(pop.group_labels()[j], j);
    SampleRealization s;
    s.n.assign(pop.num_cells(), -1);
    s.y.assign(pop.num_cells(), 0);
    std::string line;
    std::size_t row = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        std::string_view view = have_header ? std::string_view(line) : csv::strip_bom(line);
        if (csv::skippable(view)) continue;
        auto f = csv::split(view);
        if (!have_header) {
            if (f != std::vector<std::string>{"area_id", "group_id", "n", "y"})
                throw ParseError("sample header must be `area_id,group_id,n,y`");
            have_header = true;
            continue;
        }
        ++row;
        auto n = f.size() == 4 ? csv::parse_int(f[2]) : std::nullopt;
        auto y = f.size() == 4 ? csv::parse_int(f[3]) : std::nullopt;
        if (!n || !y) throw ParseError("sample row " + std::to_string(row) + ": malformed", row);
        auto a = area.find(f[0]);
        auto g = group.find(f[1]);
        if (a == area.end() || g == group.end())
            throw ValidationError("sample row " + std::to_string(row) + ": unknown cell (area " + f[0] +
                                  ", group " + f[1] + ")");
        auto c = pop.cell(g->second, a->second);
        if (s.n[c] != -1) throw ValidationError("sample row " + std::to_string(row) + ": duplicate cell");
        if (*n < 0 || *y < 0 || *y > *n || *n > pop.headcount(c))
            throw ValidationError("sample cell (area " + f[0] + ", group " + f[1] +
                                  ") needs 0 <= y <= n <= N");
        s.n[c] = *n;
        s.y[c] = *y;
    }
    for (std::size_t c = 0; c < s.n.size(); ++c)
        if (s.n[c] == -1)
            throw ValidationError("sample is missing cell (area " + pop.area_ids()[pop.area_of(c)] + ", group " +
                                  pop.group_labels()[pop.group_of(c)] + ")");
    Count n = 0;
    for (auto v : s.n) n += v;
    s.fraction = static_cast<double>(n) / static_cast<double>(pop.total());
    return s;
}

void write_sample(const SampleRealization& s, const Population& pop, std::ostream& out) {
    out << "area_id,group_id,n,y\n";
    for (std::size_t d = 0; d < pop.num_areas(); ++d)
        for (std::size_t j = 0; j < pop.num_groups(); ++j) {
            auto c = pop.cell(j, d);
            out << pop.area_ids()[d] << ',' << pop.group_labels()[j] << ',' << s.n[c] << ',' << s.y[c] << '\n';
        }
}

}  // namespace saessd
