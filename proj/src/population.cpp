#include "saessd/population.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "csv.hpp"
#include "saessd/rng.hpp"

namespace saessd {

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    return in;
}

std::unordered_map<std::string, std::size_t> index_of(const std::vector<std::string>& ids) {
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < ids.size(); ++i) idx.emplace(ids[i], i);
    return idx;
}

}  // namespace

Population::Population(std::vector<std::string> area_ids, std::vector<std::string> group_labels,
                       std::vector<Count> headcounts, std::vector<Count> outcomes)
    : area_ids_(std::move(area_ids)),
      group_labels_(std::move(group_labels)),
      headcounts_(std::move(headcounts)),
      outcomes_(std::move(outcomes)) {
    const std::size_t D = area_ids_.size();
    const std::size_t J = group_labels_.size();
    if (D == 0) throw ValidationError("population has no areas");
    if (J == 0) throw ValidationError("population has no groups");
    if (headcounts_.size() != D * J || outcomes_.size() != D * J)
        throw ValidationError("population table is not complete: expected " +
                              std::to_string(D * J) + " cells");
    area_totals_.assign(D, 0);
    for (std::size_t c = 0; c < headcounts_.size(); ++c) {
        const auto& a = area_ids_[area_of(c)];
        const auto& g = group_labels_[group_of(c)];
        if (headcounts_[c] < 0)
            throw ValidationError("cell (area " + a + ", group " + g + ") has negative N=" +
                                  std::to_string(headcounts_[c]));
        if (outcomes_[c] < 0 || outcomes_[c] > headcounts_[c])
            throw ValidationError("cell (area " + a + ", group " + g + ") has Y=" +
                                  std::to_string(outcomes_[c]) + " outside [0, N=" +
                                  std::to_string(headcounts_[c]) + "]");
        area_totals_[area_of(c)] += headcounts_[c];
    }
    for (std::size_t d = 0; d < D; ++d)
        if (area_totals_[d] <= 0) throw ValidationError("area " + area_ids_[d] + " has no population");
    total_ = std::accumulate(area_totals_.begin(), area_totals_.end(), Count{0});
}

Count Population::group_headcount(std::size_t group) const {
    Count s = 0;
    for (std::size_t d = 0; d < num_areas(); ++d) s += headcounts_[cell(group, d)];
    return s;
}

std::vector<double> Population::prevalence() const {
    std::vector<double> p(num_cells());
    for (std::size_t c = 0; c < p.size(); ++c)
        p[c] = headcounts_[c] > 0
                   ? static_cast<double>(outcomes_[c]) / static_cast<double>(headcounts_[c])
                   : 0.0;
    return p;
}

void AdjacencyGraph::add_edge(std::size_t a, std::size_t b) {
    if (a == b) return;
    auto insert = [](std::vector<std::size_t>& v, std::size_t x) {
        auto it = std::lower_bound(v.begin(), v.end(), x);
        if (it == v.end() || *it != x) v.insert(it, x);
    };
    insert(neighbors_.at(a), b);
    insert(neighbors_.at(b), a);
}

std::size_t AdjacencyGraph::num_edges() const noexcept {
    std::size_t s = 0;
    for (const auto& n : neighbors_) s += n.size();
    return s / 2;
}

bool AdjacencyGraph::adjacent(std::size_t a, std::size_t b) const {
    const auto& n = neighbors_.at(a);
    return std::binary_search(n.begin(), n.end(), b);
}

std::vector<std::size_t> AdjacencyGraph::isolated_areas() const {
    std::vector<std::size_t> out;
    for (std::size_t d = 0; d < neighbors_.size(); ++d)
        if (neighbors_[d].empty()) out.push_back(d);
    return out;
}

std::vector<std::size_t> AdjacencyGraph::component_labels() const {
    constexpr auto unset = static_cast<std::size_t>(-1);
    std::vector<std::size_t> label(neighbors_.size(), unset);
    std::size_t next = 0;
    std::vector<std::size_t> stack;
    for (std::size_t s = 0; s < neighbors_.size(); ++s) {
        if (label[s] != unset) continue;
        label[s] = next;
        stack.push_back(s);
        while (!stack.empty()) {
            auto v = stack.back();
            stack.pop_back();
            for (auto u : neighbors_[v])
                if (label[u] == unset) {
                    label[u] = next;
                    stack.push_back(u);
                }
        }
        ++next;
    }
    return label;
}

std::size_t AdjacencyGraph::num_components() const {
    auto labels = component_labels();
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

namespace {

// Throws on the first problem when `issues` is null; otherwise records up to
// `limit` problems and keeps going.
std::optional<Population> parse_population(std::istream& in, std::vector<std::string>* issues,
                                           std::size_t limit) {
    auto fail = [&](auto&& error) {
        if (!issues) throw error;
        if (issues->size() < limit) issues->push_back(error.what());
    };
    std::string line;
    std::size_t row = 0;
    bool have_header = false;
    std::vector<std::string> areas, groups;
    std::unordered_map<std::string, std::size_t> area_idx, group_idx;
    struct Raw {
        std::size_t area, group;
        Count n, y;
        std::size_t row;
    };
    std::vector<Raw> raws;
    while (std::getline(in, line)) {
        std::string_view view = line;
        if (!have_header) view = csv::strip_bom(view);
        if (csv::skippable(view)) continue;
        auto fields = csv::split(view);
        if (!have_header) {
            if (fields != std::vector<std::string>{"area_id", "group_id", "N", "Y"}) {
                fail(ParseError("population header must be `area_id,group_id,N,Y`"));
                return std::nullopt;
            }
            have_header = true;
            continue;
        }
        ++row;
        if (fields.size() != 4) {
            fail(ParseError("row " + std::to_string(row) + ": expected 4 fields, got " +
                                std::to_string(fields.size()),
                            row));
            continue;
        }
        auto n = csv::parse_int(fields[2]);
        auto y = csv::parse_int(fields[3]);
        if (fields[0].empty() || fields[1].empty() || !n || !y) {
            fail(ParseError("row " + std::to_string(row) + ": malformed value", row));
            continue;
        }
        if (issues && (*n < 0 || *y < 0 || *y > *n))
            fail(ValidationError("cell (area " + fields[0] + ", group " + fields[1] + ") at row " +
                                 std::to_string(row) + " has Y=" + std::to_string(*y) + ", N=" +
                                 std::to_string(*n) + "; need 0 <= Y <= N"));
        auto [ai, anew] = area_idx.try_emplace(fields[0], areas.size());
        if (anew) areas.push_back(fields[0]);
        auto [gi, gnew] = group_idx.try_emplace(fields[1], groups.size());
        if (gnew) groups.push_back(fields[1]);
        raws.push_back({ai->second, gi->second, *n, *y, row});
    }
    if (!have_header) {
        fail(ParseError("population file is empty"));
        return std::nullopt;
    }
    const std::size_t D = areas.size(), J = groups.size();
    std::vector<Count> N(D * J, -1), Y(D * J, 0);
    for (const auto& r : raws) {
        auto c = r.group * D + r.area;
        if (N[c] != -1) {
            fail(ValidationError("duplicate cell (area " + areas[r.area] + ", group " +
                                 groups[r.group] + ") at row " + std::to_string(r.row)));
            continue;
        }
        N[c] = r.n;
        Y[c] = r.y;
    }
    for (std::size_t c = 0; c < N.size(); ++c)
        if (N[c] == -1)
            fail(ValidationError("missing cell (area " + areas[c % D] + ", group " +
                                 groups[c / D] + "); the table must be complete"));
    if (issues && !issues->empty()) return std::nullopt;
    try {
        return Population(std::move(areas), std::move(groups), std::move(N), std::move(Y));
    } catch (const ValidationError& e) {
        fail(e);
        return std::nullopt;
    }
}

}  // namespace

Population read_population(std::istream& in) { return *parse_population(in, nullptr, 0); }

std::vector<std::string> check_population(std::istream& in, std::size_t limit) {
    std::vector<std::string> issues;
    parse_population(in, &issues, limit);
    return issues;
}

Population load_population(const std::filesystem::path& path) {
    auto in = open_input(path);
    return read_population(in);
}

void write_population(const Population& pop, std::ostream& out) {
    out << "area_id,group_id,N,Y\n";
    for (std::size_t d = 0; d < pop.num_areas(); ++d)
        for (std::size_t j = 0; j < pop.num_groups(); ++j) {
            auto c = pop.cell(j, d);
            out << pop.area_ids()[d] << ',' << pop.group_labels()[j] << ',' << pop.headcount(c)
                << ',' << pop.outcome(c) << '\n';
        }
}

void write_population(const Population& pop, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write " + path.string());
    write_population(pop, out);
}

AdjacencyLoad read_adjacency(std::istream& in, const std::vector<std::string>& area_ids) {
    auto idx = index_of(area_ids);
    AdjacencyLoad result{AdjacencyGraph(area_ids.size()), {}};
    std::string line;
    std::size_t row = 0;
    bool first = true;
    while (std::getline(in, line)) {
        std::string_view view = first ? csv::strip_bom(line) : std::string_view(line);
        if (csv::skippable(view)) continue;
        auto fields = csv::split(view);
        if (first && fields == std::vector<std::string>{"area_id_a", "area_id_b"}) {
            first = false;
            continue;
        }
        first = false;
        ++row;
        if (fields.size() != 2)
            throw ParseError("adjacency row " + std::to_string(row) + ": expected 2 fields", row);
        auto a = idx.find(fields[0]);
        auto b = idx.find(fields[1]);
        if (a == idx.end() || b == idx.end())
            throw ValidationError("adjacency row " + std::to_string(row) + ": unknown area_id `" +
                                  (a == idx.end() ? fields[0] : fields[1]) + "`");
        result.graph.add_edge(a->second, b->second);
    }
    if (result.graph.num_edges() == 0) {
        result.warnings.push_back("adjacency has no edges; every area is isolated");
    } else {
        auto iso = result.graph.isolated_areas();
        for (auto d : iso) result.warnings.push_back("area " + area_ids[d] + " is isolated");
    }
    return result;
}

AdjacencyLoad load_adjacency(const std::filesystem::path& path,
                             const std::vector<std::string>& area_ids) {
    auto in = open_input(path);
    return read_adjacency(in, area_ids);
}

void write_adjacency(const AdjacencyGraph& graph, const std::vector<std::string>& area_ids,
                     std::ostream& out) {
    for (std::size_t a = 0; a < graph.num_areas(); ++a)
        for (auto b : graph.neighbors(a))
            if (a < b) out << area_ids[a] << ',' << area_ids[b] << '\n';
}

CovariateMatrix read_covariates(std::istream& in, const std::vector<std::string>& area_ids) {
    auto idx = index_of(area_ids);
    std::string line;
    std::vector<std::string> header;
    std::size_t row = 0;
    CovariateMatrix x;
    std::vector<bool> seen(area_ids.size(), false);
    while (std::getline(in, line)) {
        std::string_view view = header.empty() ? csv::strip_bom(line) : std::string_view(line);
        if (csv::skippable(view)) continue;
        auto fields = csv::split(view);
        if (header.empty()) {
            if (fields.size() < 2 || fields[0] != "area_id")
                throw ParseError("covariates header must be `area_id,x1,...,xK`");
            header = fields;
            x.names.assign(fields.begin() + 1, fields.end());
            x.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(area_ids.size()),
                                             static_cast<Eigen::Index>(x.names.size()));
            continue;
        }
        ++row;
        if (fields.size() != header.size())
            throw ParseError("covariates row " + std::to_string(row) + ": expected " +
                                 std::to_string(header.size()) + " fields",
                             row);
        auto a = idx.find(fields[0]);
        if (a == idx.end())
            throw ValidationError("covariates row " + std::to_string(row) + ": unknown area_id `" +
                                  fields[0] + "`");
        if (seen[a->second])
            throw ValidationError("covariates row " + std::to_string(row) + ": duplicate area `" +
                                  fields[0] + "`");
        seen[a->second] = true;
        for (std::size_t k = 1; k < fields.size(); ++k) {
            auto v = csv::parse_double(fields[k]);
            if (!v || !std::isfinite(*v))
                throw ParseError("covariates row " + std::to_string(row) + ": malformed value `" +
                                     fields[k] + "`",
                                 row);
            x.values(static_cast<Eigen::Index>(a->second), static_cast<Eigen::Index>(k - 1)) = *v;
        }
    }
    if (header.empty()) throw ParseError("covariates file is empty");
    for (std::size_t d = 0; d < seen.size(); ++d)
        if (!seen[d]) throw ValidationError("covariates missing for area " + area_ids[d]);
    return x;
}

CovariateMatrix load_covariates(const std::filesystem::path& path,
                                const std::vector<std::string>& area_ids) {
    auto in = open_input(path);
    return read_covariates(in, area_ids);
}

void write_covariates(const CovariateMatrix& x, const std::vector<std::string>& area_ids,
                      std::ostream& out) {
    out << "area_id";
    for (const auto& n : x.names) out << ',' << n;
    out << '\n';
    for (Eigen::Index d = 0; d < x.values.rows(); ++d) {
        out << area_ids[static_cast<std::size_t>(d)];
        for (Eigen::Index k = 0; k < x.values.cols(); ++k)
            out << ',' << csv::format_double(x.values(d, k));
        out << '\n';
    }
}

CovariateMatrix scale_covariates(const CovariateMatrix& raw) {
    CovariateMatrix out = raw;
    const auto n = raw.values.rows();
    if (n < 2 && raw.values.cols() > 0)
        throw ValidationError("cannot scale covariates with fewer than two areas");
    for (Eigen::Index k = 0; k < raw.values.cols(); ++k) {
        auto col = raw.values.col(k);
        double mean = col.mean();
        double ss = (col.array() - mean).square().sum();
        double sd = std::sqrt(ss / static_cast<double>(n - 1));
        const auto& name = k < static_cast<Eigen::Index>(raw.names.size())
                               ? raw.names[static_cast<std::size_t>(k)]
                               : "x" + std::to_string(k + 1);
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean))))
            throw ValidationError("covariate column `" + name + "` is constant");
        out.values.col(k) = (col.array() - mean) / sd;
    }
    out.scaled = true;
    return out;
}

SyntheticBundle synth_population(const SynthOptions& o) {
    if (o.num_areas < 1 || o.num_groups < 1)
        throw ValidationError("synthetic population needs at least one area and one group");
    if (o.prevalence_profile.size() != o.num_groups)
        throw ValidationError("prevalence profile must have one rate per group");
    for (double r : o.prevalence_profile)
        if (!(r > 0.0 && r < 1.0)) throw ValidationError("base rates must lie in (0, 1)");
    if (o.headcount_min < 1 || o.headcount_max < o.headcount_min)
        throw ValidationError("headcount range must satisfy 1 <= min <= max");

    const std::size_t D = o.num_areas, J = o.num_groups, K = o.num_covariates;
    RandomStream rng(derive_seed(o.seed, {0x5e7f}));

    std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(D))));
    AdjacencyGraph graph(D);
    std::vector<double> row(D), col(D);
    for (std::size_t d = 0; d < D; ++d) {
        row[d] = static_cast<double>(d / cols);
        col[d] = static_cast<double>(d % cols);
        if (d % cols != 0) graph.add_edge(d, d - 1);
        if (d >= cols) graph.add_edge(d, d - cols);
    }

    // Smooth surface over the lattice with random phase.
    const double scale = static_cast<double>(cols);
    const double ph1 = 2 * std::numbers::pi * rng.uniform();
    const double ph2 = 2 * std::numbers::pi * rng.uniform();
    std::vector<double> surface(D);
    for (std::size_t d = 0; d < D; ++d)
        surface[d] = std::sin(2.2 * col[d] / scale * std::numbers::pi + ph1) +
                     std::cos(1.7 * row[d] / scale * std::numbers::pi + ph2);
    {
        double m = std::accumulate(surface.begin(), surface.end(), 0.0) / static_cast<double>(D);
        double ss = 0;
        for (double& s : surface) {
            s -= m;
            ss += s * s;
        }
        double sd = D > 1 ? std::sqrt(ss / static_cast<double>(D - 1)) : 1.0;
        for (double& s : surface) s = sd > 0 ? s / sd : 0.0;
    }

    // The first covariate is a noisy proxy for the surface; the rest are noise.
    CovariateMatrix raw;
    raw.values.resize(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(K));
    for (std::size_t k = 0; k < K; ++k) {
        raw.names.push_back("x" + std::to_string(k + 1));
        for (std::size_t d = 0; d < D; ++d)
            raw.values(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)) =
                (k == 0 ? 0.8 * surface[d] : 0.0) + rng.normal();
    }
    CovariateMatrix x = D > 1 && K > 0 ? scale_covariates(raw) : raw;
    x.scaled = true;

    std::vector<double> beta2(J * K);
    for (std::size_t j = 0; j < J; ++j)
        for (std::size_t k = 0; k < K; ++k)
            beta2[j * K + k] = o.covariate_effect * (k == 0 ? 1.0 : -0.5) *
                               (1.0 + 0.2 * static_cast<double>(j));

    std::vector<Count> N(D * J), Y(D * J);
    std::vector<double> truth(D * J);
    const auto span = o.headcount_max - o.headcount_min;
    for (std::size_t j = 0; j < J; ++j) {
        double base = std::log(o.prevalence_profile[j] / (1.0 - o.prevalence_profile[j]));
        for (std::size_t d = 0; d < D; ++d) {
            auto c = j * D + d;
            double eta = base + o.spatial_sd * surface[d] + o.cell_noise_sd * rng.normal();
            for (std::size_t k = 0; k < K; ++k)
                eta += beta2[j * K + k] *
                       x.values(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
            truth[c] = eta;
            N[c] = o.headcount_min +
                   static_cast<Count>(std::floor(rng.uniform() * static_cast<double>(span + 1)));
            N[c] = std::min(N[c], o.headcount_max);
            Y[c] = rng.binomial(N[c], 1.0 / (1.0 + std::exp(-eta)));
        }
    }

    std::vector<std::string> areas(D), groups(J);
    int width = static_cast<int>(std::to_string(D).size());
    for (std::size_t d = 0; d < D; ++d) {
        std::ostringstream s;
        s << 'A';
        s.width(width);
        s.fill('0');
        s << d + 1;
        areas[d] = s.str();
    }
    for (std::size_t j = 0; j < J; ++j) groups[j] = "g" + std::to_string(j + 1);

    return {Population(std::move(areas), std::move(groups), std::move(N), std::move(Y)),
            std::move(x), std::move(graph), std::move(truth)};
}

}  // namespace saessd
