#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "saessd/population.hpp"
#include "saessd/rng.hpp"
#include "saessd/sampling.hpp"

namespace saessd {

// Gamma(shape, rate) prior on a precision.
struct GammaPrior {
    double shape = 0.5;
    double rate = 0.1;

    double log_density(double tau) const;
    // Mode of the density of log(tau): shape / rate.
    double log_scale_mode() const { return shape / rate; }
};

enum class ScenarioId { S1, S2, S3, S4 };

// Structure and priors of the binomial-logit model
//   y_jd ~ Binomial(n_jd, logit^-1(theta_jd))
//   theta_jd = beta0 + beta1_j + X_d beta2_j + upsilon_d + nu_jd
// with beta1_1 = 0, ICAR upsilon under sum-to-zero and iid nu.
struct ModelSpec {
    bool include_covariates = true;
    bool include_spatial = true;
    bool include_exchangeable = true;
    bool shared_covariate_effects = false;
    GammaPrior hyperprior_upsilon{0.5, 0.1};
    GammaPrior hyperprior_nu{0.5, 0.1};
    double fixed_effect_prior_sd = 10.0;

    // S2 = exchangeable only, S3 = S2 + covariates, S4 = S3 + ICAR. Without
    // the spatial term the exchangeable precision gets Gamma(1, 0.1).
    static ModelSpec for_scenario(ScenarioId id);

    void validate() const;
};

struct Hyperparameters {
    double tau_upsilon = 1.0;
    double tau_nu = 1.0;
};

// Latent field in named form. beta1 has J entries with beta1[0] == 0;
// beta2 is J x K (1 x K when covariate effects are shared); nu is in cell
// order (j * D + d).
struct LatentField {
    double beta0 = 0.0;
    Eigen::VectorXd beta1;
    Eigen::MatrixXd beta2;
    Eigen::VectorXd upsilon;
    Eigen::VectorXd nu;
};

// Thrown when a fit cannot produce a trustworthy answer.
class FitFailure : public std::runtime_error {
public:
    FitFailure(const std::string& what, int iterations)
        : std::runtime_error(what), iterations_(iterations) {}
    int iterations() const noexcept { return iterations_; }

private:
    int iterations_;
};

// ICAR structure matrix scaled by tau: diagonal = neighbor counts,
// off-diagonal -1 for neighbors.
Eigen::SparseMatrix<double> build_icar_precision(const AdjacencyGraph& graph, double tau);

// Precomputed structure of one model instance. The latent vector is
// x = [z, nu] where z = [beta0, beta1_2..J, beta2, upsilon] holds the
// effects shared across cells and nu the per-cell exchangeable effects.
class LatentModel {
public:
    struct Term {
        Eigen::Index index;
        double value;
    };

    LatentModel(const ModelSpec& spec, const Population& pop, const CovariateMatrix& x,
                const AdjacencyGraph& graph);

    const ModelSpec& spec() const noexcept { return spec_; }
    std::size_t num_cells() const noexcept { return num_cells_; }
    std::size_t num_areas() const noexcept { return num_areas_; }
    std::size_t num_groups() const noexcept { return num_groups_; }
    std::size_t num_covariates() const noexcept { return num_covariates_; }

    Eigen::Index shared_size() const noexcept { return shared_size_; }
    Eigen::Index size() const noexcept {
        return shared_size_ + (spec_.include_exchangeable ? static_cast<Eigen::Index>(num_cells_) : 0);
    }
    Eigen::Index beta1_offset() const noexcept { return 1; }
    Eigen::Index beta2_offset() const noexcept { return beta2_offset_; }
    Eigen::Index upsilon_offset() const noexcept { return upsilon_offset_; }
    Eigen::Index nu_offset() const noexcept { return shared_size_; }

    // Nonzero coefficients of theta_c in terms of z.
    std::span<const Term> design_row(std::size_t cell) const {
        return {design_.data() + row_start_[cell], row_start_[cell + 1] - row_start_[cell]};
    }

    Eigen::VectorXd linear_predictor(const Eigen::VectorXd& x) const;

    // Prior precision of z without any constraint regularization.
    Eigen::MatrixXd shared_prior_precision(const Hyperparameters& tau) const;

    // Sum-to-zero constraints on upsilon, one row per connected component
    // (zero rows when the spatial term is absent).
    const Eigen::MatrixXd& constraints() const noexcept { return constraints_; }
    std::size_t icar_rank() const noexcept { return icar_rank_; }
    const Eigen::SparseMatrix<double>& icar_structure() const noexcept { return icar_; }

    // Log posterior up to a constant independent of the field and tau:
    //   sum_c [y theta - n log(1 + e^theta)] + log N(beta; 0, sd^2)
    //   + (rank/2) log tau_u - tau_u/2 u'Ru + (JD/2) log tau_v - tau_v/2 v'v
    //   + log Gamma(tau_u) + log Gamma(tau_v)
    double log_posterior(const Eigen::VectorXd& x, const Hyperparameters& tau,
                         const SampleRealization& data) const;
    // Same, without the Gamma hyperprior terms.
    double log_joint_latent(const Eigen::VectorXd& x, const Hyperparameters& tau,
                            const SampleRealization& data) const;
    Eigen::VectorXd gradient(const Eigen::VectorXd& x, const Hyperparameters& tau,
                             const SampleRealization& data) const;

    Eigen::VectorXd pack(const LatentField& field) const;
    LatentField unpack(const Eigen::VectorXd& x) const;

private:
    ModelSpec spec_;
    std::size_t num_cells_ = 0, num_areas_ = 0, num_groups_ = 0, num_covariates_ = 0;
    Eigen::Index shared_size_ = 0, beta2_offset_ = 0, upsilon_offset_ = 0;
    std::vector<Term> design_;
    std::vector<std::size_t> row_start_;
    Eigen::SparseMatrix<double> icar_;
    Eigen::MatrixXd constraints_;
    std::size_t icar_rank_ = 0;
};

double log_unnormalized_posterior(const ModelSpec& spec, const LatentField& field,
                                  const Hyperparameters& tau, const SampleRealization& data,
                                  const Population& pop, const CovariateMatrix& x,
                                  const AdjacencyGraph& graph);

// Gaussian approximation of the latent field at fixed hyperparameters,
// stored in reduced form: z ~ N(mode_z, S^-1) conditioned on the
// constraints, and nu_c | z ~ N(mode_nu_c - w_c/q_c a_c'(z - mode_z), 1/q_c).
struct ConditionalGaussian {
    Hyperparameters tau;
    double log_marginal = 0.0;  // Laplace approximation of log pi(log tau | y)
    Eigen::VectorXd mode;       // full x at the constrained mode
    Eigen::VectorXd weight;     // n p (1 - p) per cell at the mode
    Eigen::VectorXd cell_precision;  // q_c = tau_nu + w_c (empty without nu)
    Eigen::MatrixXd reduced_cholesky;  // lower factor of S (+ constraint penalty)
    Eigen::MatrixXd kriging_basis;     // S^-1 A'
    Eigen::MatrixXd kriging_inverse;   // (A S^-1 A')^-1
    Eigen::VectorXd logit_mean;        // per cell
    Eigen::VectorXd logit_var;         // per cell, constrained
    int iterations = 0;
};

struct NewtonOptions {
    int max_iterations = 100;
    double step_tolerance = 1e-8;
};

// Newton mode search at fixed tau, starting from `start` (projected onto
// the constraints). Each accepted step does not decrease log_posterior.
// Throws FitFailure if the step norm does not fall below the tolerance.
ConditionalGaussian fit_conditional(const LatentModel& model, const Hyperparameters& tau,
                                    const SampleRealization& data, const Eigen::VectorXd& start,
                                    const NewtonOptions& options = {},
                                    std::vector<double>* objective_trace = nullptr);

struct LaplaceOptions {
    NewtonOptions newton;
    int grid_points = 7;       // per hyperparameter dimension (odd)
    double grid_step = 1.0;    // in posterior standard deviations of log tau
    int quadrature_nodes = 15;
    int max_hyper_iterations = 60;
    double hyper_tolerance = 1e-4;
    double log_tau_bound = 20.0;
};

struct HyperPoint {
    double tau_upsilon = 0.0;  // 0 when the spatial term is absent
    double tau_nu = 0.0;       // 0 when the exchangeable term is absent
    double log_weight = 0.0;
};

struct FitDiagnostics {
    bool converged = false;
    int newton_iterations = 0;
    int hyper_evaluations = 0;
    int hyper_iterations = 0;
    double max_rhat = 0.0;  // MCMC only
    std::vector<std::string> warnings;
};

// Probability-scale moments of p = logit^-1(theta) for theta drawn from a
// mixture of Gaussians, by Gauss-Hermite quadrature.
struct ProbabilityMoments {
    double mean = 0.0;
    double var = 0.0;
};
ProbabilityMoments probability_moments(std::span<const double> weights,
                                       std::span<const double> means,
                                       std::span<const double> vars, int nodes = 15);

// Nodes and weights for integral of exp(-x^2) f(x).
void gauss_hermite(int n, std::vector<double>& nodes, std::vector<double>& weights);

class FittedPosterior {
public:
    std::vector<double> cell_mean;  // E[p_jd | y]
    std::vector<double> cell_var;   // Var[p_jd | y]
    std::vector<double> logit_mean;
    std::vector<double> logit_var;
    LatentField latent_mode;
    std::vector<HyperPoint> hyper_grid;
    FitDiagnostics diagnostics;
    std::vector<double> cell_mcse;  // MCMC only: Monte Carlo SE of cell_mean

    std::size_t num_cells() const noexcept { return cell_mean.size(); }

    // Joint precision of x = [z, nu] at the hyperparameter mode (Laplace
    // fits only; includes the constraint penalty so that it is positive
    // definite).
    Eigen::SparseMatrix<double> latent_precision() const;

    // Internals used for design-prior draws.
    std::shared_ptr<const LatentModel> model;
    std::vector<ConditionalGaussian> components;  // aligned with hyper_grid
    Eigen::MatrixXd theta_draws;                  // MCMC: draws x cells
};

FittedPosterior fit_laplace(const ModelSpec& spec, const SampleRealization& data,
                            const Population& pop, const CovariateMatrix& x,
                            const AdjacencyGraph& graph, const LaplaceOptions& options = {});

struct CellPrediction {
    double mean = 0.0;
    double var = 0.0;
};
std::vector<CellPrediction> predict_cells(const FittedPosterior& post);

// Design-prior draw of theta for every cell: a hyper grid point by weight,
// then a joint constrained Gaussian draw of the latent field.
std::vector<double> sample_latent(const FittedPosterior& post, RandomStream& rng);

struct ChainConfig {
    int num_chains = 4;
    int burn_in = 2000;
    int samples = 5000;  // kept per chain after burn-in
    int thin = 1;
    int stored_draws = 1000;  // theta draws kept for sample_latent
    std::uint64_t seed = 1;
};

// Metropolis-within-Gibbs oracle: random-walk updates with adapted scales
// for fixed effects, ICAR coordinates (in the eigenbasis of R restricted to
// the constrained subspace) and cell effects; conjugate Gibbs updates for
// both precisions.
FittedPosterior fit_mcmc(const ModelSpec& spec, const SampleRealization& data,
                         const Population& pop, const CovariateMatrix& x,
                         const AdjacencyGraph& graph, const ChainConfig& chains = {});

// FittedPosterior summaries: `group_id,area_id,post_mean,post_sd,rse`.
void write_posterior_csv(const FittedPosterior& post, const Population& pop, std::ostream& out);

double inv_logit(double x);
double log1p_exp(double x);

}  // namespace saessd
