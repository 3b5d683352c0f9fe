#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace saessd {

// Input file could not be parsed. `row` is the 1-based data row (0 when the
// error is not tied to a row).
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t row = 0)
        : std::runtime_error(what), row_(row) {}
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

// Parsed input violates a data invariant (Y > N, missing cell, ...).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Count = std::int64_t;

// Finite population cross-classified by group (j) and area (d).
//
// Cells are stored group-major: cell(j, d) = j * num_areas() + d. Headcounts
// N and outcome counts Y are known for every cell; the table is complete.
class Population {
public:
    Population() = default;

    // Validates invariants and throws ValidationError naming the first bad cell.
    Population(std::vector<std::string> area_ids, std::vector<std::string> group_labels,
               std::vector<Count> headcounts, std::vector<Count> outcomes);

    std::size_t num_areas() const noexcept { return area_ids_.size(); }
    std::size_t num_groups() const noexcept { return group_labels_.size(); }
    std::size_t num_cells() const noexcept { return headcounts_.size(); }

    std::size_t cell(std::size_t group, std::size_t area) const noexcept {
        return group * num_areas() + area;
    }
    std::size_t group_of(std::size_t cell) const noexcept { return cell / num_areas(); }
    std::size_t area_of(std::size_t cell) const noexcept { return cell % num_areas(); }

    const std::vector<std::string>& area_ids() const noexcept { return area_ids_; }
    const std::vector<std::string>& group_labels() const noexcept { return group_labels_; }
    const std::vector<Count>& headcounts() const noexcept { return headcounts_; }
    const std::vector<Count>& outcomes() const noexcept { return outcomes_; }

    Count headcount(std::size_t cell) const { return headcounts_[cell]; }
    Count outcome(std::size_t cell) const { return outcomes_[cell]; }
    Count area_headcount(std::size_t area) const { return area_totals_[area]; }
    Count group_headcount(std::size_t group) const;
    Count total() const noexcept { return total_; }

    // True prevalence Y/N of each cell (0 for empty cells).
    std::vector<double> prevalence() const;

private:
    std::vector<std::string> area_ids_;
    std::vector<std::string> group_labels_;
    std::vector<Count> headcounts_;
    std::vector<Count> outcomes_;
    std::vector<Count> area_totals_;
    Count total_ = 0;
};

// Area-level covariates, one row per area in population order.
struct CovariateMatrix {
    Eigen::MatrixXd values;          // D x K
    std::vector<std::string> names;  // K
    bool scaled = false;

    std::size_t num_covariates() const noexcept { return static_cast<std::size_t>(values.cols()); }
};

// Undirected contiguity graph. Neighbor lists are sorted and exclude the
// area itself.
class AdjacencyGraph {
public:
    AdjacencyGraph() = default;
    explicit AdjacencyGraph(std::size_t num_areas) : neighbors_(num_areas) {}

    // Adds the undirected edge a-b. Self-loops are ignored, duplicates merged.
    void add_edge(std::size_t a, std::size_t b);

    std::size_t num_areas() const noexcept { return neighbors_.size(); }
    std::size_t num_edges() const noexcept;
    const std::vector<std::size_t>& neighbors(std::size_t area) const { return neighbors_[area]; }
    std::size_t neighbor_count(std::size_t area) const { return neighbors_[area].size(); }
    bool adjacent(std::size_t a, std::size_t b) const;

    std::vector<std::size_t> isolated_areas() const;

    // Component label per area; labels are 0..num_components-1 in order of
    // first appearance.
    std::vector<std::size_t> component_labels() const;
    std::size_t num_components() const;

private:
    std::vector<std::vector<std::size_t>> neighbors_;
};

struct AdjacencyLoad {
    AdjacencyGraph graph;
    std::vector<std::string> warnings;
};

// Population CSV: header `area_id,group_id,N,Y`, one row per cell. Area and
// group order follow first appearance in the file.
Population load_population(const std::filesystem::path& path);
Population read_population(std::istream& in);
// Every problem in a population file, up to `limit`; empty when it loads.
std::vector<std::string> check_population(std::istream& in, std::size_t limit = 20);
void write_population(const Population& pop, std::ostream& out);
void write_population(const Population& pop, const std::filesystem::path& path);

// Edge list, one `area_id_a,area_id_b` pair per line; blank lines and lines
// starting with '#' are skipped, an optional `area_id_a,area_id_b` header is
// accepted. Asymmetric input is symmetrized silently.
AdjacencyLoad load_adjacency(const std::filesystem::path& path,
                             const std::vector<std::string>& area_ids);
AdjacencyLoad read_adjacency(std::istream& in, const std::vector<std::string>& area_ids);
void write_adjacency(const AdjacencyGraph& graph, const std::vector<std::string>& area_ids,
                     std::ostream& out);

// Covariates CSV: header `area_id,x1,...,xK`; rows are reordered to match
// `area_ids` and every area must be present. Values are returned unscaled.
CovariateMatrix load_covariates(const std::filesystem::path& path,
                                const std::vector<std::string>& area_ids);
CovariateMatrix read_covariates(std::istream& in, const std::vector<std::string>& area_ids);
void write_covariates(const CovariateMatrix& x, const std::vector<std::string>& area_ids,
                      std::ostream& out);

// Column standardization with the sample (n-1) standard deviation. Throws
// ValidationError naming any constant column.
CovariateMatrix scale_covariates(const CovariateMatrix& raw);

struct SynthOptions {
    std::size_t num_areas = 50;
    std::size_t num_groups = 3;
    std::vector<double> prevalence_profile{0.05, 0.15, 0.35};  // one base rate per group
    Count headcount_min = 1000;
    Count headcount_max = 4000;
    std::uint64_t seed = 1;
    // Strength of the smooth spatial surface, covariate effects and cell
    // noise on the log-odds scale.
    double spatial_sd = 0.35;
    double covariate_effect = 0.35;
    double cell_noise_sd = 0.15;
    std::size_t num_covariates = 2;
};

struct SyntheticBundle {
    Population population;
    CovariateMatrix covariates;  // scaled
    AdjacencyGraph graph;
    std::vector<double> true_logit;  // per cell, the log-odds Y was drawn from
};

// Areas sit on a near-square rook lattice; Y is drawn binomially from a
// logit-linear truth with group base rates, covariate effects, a smooth
// spatial surface and small cell-level noise. Deterministic in `seed`.
SyntheticBundle synth_population(const SynthOptions& options);

}  // namespace saessd
