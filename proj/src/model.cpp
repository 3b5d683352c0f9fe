#include "saessd/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <ostream>

#include "csv.hpp"

namespace saessd {

double inv_logit(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double log1p_exp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double GammaPrior::log_density(double tau) const {
    return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(tau) - rate * tau;
}

ModelSpec ModelSpec::for_scenario(ScenarioId id) {
    ModelSpec s;
    switch (id) {
        case ScenarioId::S1:
            throw std::invalid_argument("scenario S1 is the direct estimator and has no model");
        case ScenarioId::S2:
            s.include_covariates = false;
            s.include_spatial = false;
            break;
        case ScenarioId::S3:
            s.include_spatial = false;
            break;
        case ScenarioId::S4:
            break;
    }
    if (!s.include_spatial) s.hyperprior_nu = {1.0, 0.1};
    return s;
}

void ModelSpec::validate() const {
    for (const auto* g : {&hyperprior_upsilon, &hyperprior_nu})
        if (!(g->shape > 0 && g->rate > 0))
            throw std::invalid_argument("Gamma hyperprior needs shape > 0 and rate > 0");
    if (!(fixed_effect_prior_sd > 0))
        throw std::invalid_argument("fixed_effect_prior_sd must be positive");
}

Eigen::SparseMatrix<double> build_icar_precision(const AdjacencyGraph& graph, double tau) {
    const auto D = static_cast<Eigen::Index>(graph.num_areas());
    std::vector<Eigen::Triplet<double>> t;
    for (Eigen::Index d = 0; d < D; ++d) {
        const auto& nb = graph.neighbors(static_cast<std::size_t>(d));
        if (!nb.empty()) t.emplace_back(d, d, tau * static_cast<double>(nb.size()));
        for (auto e : nb) t.emplace_back(d, static_cast<Eigen::Index>(e), -tau);
    }
    Eigen::SparseMatrix<double> r(D, D);
    r.setFromTriplets(t.begin(), t.end());
    return r;
}

// ---------------------------------------------------------------------------
// LatentModel

LatentModel::LatentModel(const ModelSpec& spec, const Population& pop, const CovariateMatrix& x,
                         const AdjacencyGraph& graph)
    : spec_(spec),
      num_cells_(pop.num_cells()),
      num_areas_(pop.num_areas()),
      num_groups_(pop.num_groups()) {
    spec_.validate();
    if (spec_.include_covariates) {
        num_covariates_ = x.num_covariates();
        if (num_covariates_ == 0)
            spec_.include_covariates = false;
        else if (static_cast<std::size_t>(x.values.rows()) != num_areas_)
            throw std::invalid_argument("covariate rows do not match the number of areas");
    }
    if (spec_.include_spatial && graph.num_areas() != num_areas_)
        throw std::invalid_argument("adjacency graph does not match the number of areas");

    const auto J = static_cast<Eigen::Index>(num_groups_);
    const auto D = static_cast<Eigen::Index>(num_areas_);
    const auto K = static_cast<Eigen::Index>(num_covariates_);
    beta2_offset_ = J;  // beta0 + (J - 1) contrasts
    Eigen::Index nb2 = spec_.include_covariates ? (spec_.shared_covariate_effects ? K : J * K) : 0;
    upsilon_offset_ = beta2_offset_ + nb2;
    shared_size_ = upsilon_offset_ + (spec_.include_spatial ? D : 0);

    row_start_.reserve(num_cells_ + 1);
    row_start_.push_back(0);
    for (std::size_t c = 0; c < num_cells_; ++c) {
        const auto j = static_cast<Eigen::Index>(pop.group_of(c));
        const auto d = static_cast<Eigen::Index>(pop.area_of(c));
        design_.push_back({0, 1.0});
        if (j > 0) design_.push_back({beta1_offset() + j - 1, 1.0});
        if (spec_.include_covariates)
            for (Eigen::Index k = 0; k < K; ++k)
                design_.push_back(
                    {beta2_offset_ + (spec_.shared_covariate_effects ? k : j * K + k), x.values(d, k)});
        if (spec_.include_spatial) design_.push_back({upsilon_offset_ + d, 1.0});
        row_start_.push_back(design_.size());
    }

    if (spec_.include_spatial) {
        icar_ = build_icar_precision(graph, 1.0);
        auto labels = graph.component_labels();
        std::size_t nc = graph.num_components();
        constraints_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nc), shared_size_);
        for (std::size_t d = 0; d < num_areas_; ++d)
            constraints_(static_cast<Eigen::Index>(labels[d]),
                         upsilon_offset_ + static_cast<Eigen::Index>(d)) = 1.0;
        icar_rank_ = num_areas_ - nc;
    } else {
        constraints_.resize(0, shared_size_);
    }
}

Eigen::VectorXd LatentModel::linear_predictor(const Eigen::VectorXd& x) const {
    Eigen::VectorXd theta(static_cast<Eigen::Index>(num_cells_));
    for (std::size_t c = 0; c < num_cells_; ++c) {
        double s = 0.0;
        for (const auto& t : design_row(c)) s += t.value * x[t.index];
        if (spec_.include_exchangeable) s += x[nu_offset() + static_cast<Eigen::Index>(c)];
        theta[static_cast<Eigen::Index>(c)] = s;
    }
    return theta;
}

Eigen::MatrixXd LatentModel::shared_prior_precision(const Hyperparameters& tau) const {
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(shared_size_, shared_size_);
    const double prec = 1.0 / (spec_.fixed_effect_prior_sd * spec_.fixed_effect_prior_sd);
    for (Eigen::Index i = 0; i < upsilon_offset_; ++i) q(i, i) = prec;
    if (spec_.include_spatial)
        for (int k = 0; k < icar_.outerSize(); ++k)
            for (Eigen::SparseMatrix<double>::InnerIterator it(icar_, k); it; ++it)
                q(upsilon_offset_ + it.row(), upsilon_offset_ + it.col()) += tau.tau_upsilon * it.value();
    return q;
}

double LatentModel::log_joint_latent(const Eigen::VectorXd& x, const Hyperparameters& tau,
                                     const SampleRealization& data) const {
    Eigen::VectorXd theta = linear_predictor(x);
    double lik = 0.0;
    for (std::size_t c = 0; c < num_cells_; ++c) {
        if (data.n[c] == 0) continue;
        double th = theta[static_cast<Eigen::Index>(c)];
        lik += static_cast<double>(data.y[c]) * th - static_cast<double>(data.n[c]) * log1p_exp(th);
    }
    const double sd = spec_.fixed_effect_prior_sd;
    auto fixed = x.head(upsilon_offset_);
    double lp = -0.5 * fixed.squaredNorm() / (sd * sd) - static_cast<double>(upsilon_offset_) * std::log(sd);
    if (spec_.include_spatial) {
        auto u = x.segment(upsilon_offset_, static_cast<Eigen::Index>(num_areas_));
        lp += 0.5 * static_cast<double>(icar_rank_) * std::log(tau.tau_upsilon) -
              0.5 * tau.tau_upsilon * u.dot(icar_ * u);
    }
    if (spec_.include_exchangeable) {
        auto v = x.segment(nu_offset(), static_cast<Eigen::Index>(num_cells_));
        lp += 0.5 * static_cast<double>(num_cells_) * std::log(tau.tau_nu) - 0.5 * tau.tau_nu * v.squaredNorm();
    }
    return lik + lp;
}

double LatentModel::log_posterior(const Eigen::VectorXd& x, const Hyperparameters& tau,
                                  const SampleRealization& data) const {
    double v = log_joint_latent(x, tau, data);
    if (spec_.include_spatial) v += spec_.hyperprior_upsilon.log_density(tau.tau_upsilon);
    if (spec_.include_exchangeable) v += spec_.hyperprior_nu.log_density(tau.tau_nu);
    return v;
}

Eigen::VectorXd LatentModel::gradient(const Eigen::VectorXd& x, const Hyperparameters& tau,
                                      const SampleRealization& data) const {
    Eigen::VectorXd theta = linear_predictor(x);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(size());
    for (std::size_t c = 0; c < num_cells_; ++c) {
        double r = static_cast<double>(data.y[c]) -
                   static_cast<double>(data.n[c]) * inv_logit(theta[static_cast<Eigen::Index>(c)]);
        for (const auto& t : design_row(c)) g[t.index] += r * t.value;
        if (spec_.include_exchangeable) g[nu_offset() + static_cast<Eigen::Index>(c)] += r;
    }
    const double sd = spec_.fixed_effect_prior_sd;
    g.head(upsilon_offset_) -= x.head(upsilon_offset_) / (sd * sd);
    if (spec_.include_spatial) {
        auto D = static_cast<Eigen::Index>(num_areas_);
        g.segment(upsilon_offset_, D) -= tau.tau_upsilon * (icar_ * x.segment(upsilon_offset_, D));
    }
    if (spec_.include_exchangeable) {
        auto n = static_cast<Eigen::Index>(num_cells_);
        g.segment(nu_offset(), n) -= tau.tau_nu * x.segment(nu_offset(), n);
    }
    return g;
}

Eigen::VectorXd LatentModel::pack(const LatentField& f) const {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(size());
    x[0] = f.beta0;
    for (std::size_t j = 1; j < num_groups_; ++j)
        x[beta1_offset() + static_cast<Eigen::Index>(j) - 1] = f.beta1[static_cast<Eigen::Index>(j)];
    if (spec_.include_covariates) {
        const auto K = static_cast<Eigen::Index>(num_covariates_);
        for (Eigen::Index r = 0; r < f.beta2.rows(); ++r)
            for (Eigen::Index k = 0; k < K; ++k) x[beta2_offset_ + r * K + k] = f.beta2(r, k);
    }
    if (spec_.include_spatial) x.segment(upsilon_offset_, static_cast<Eigen::Index>(num_areas_)) = f.upsilon;
    if (spec_.include_exchangeable) x.segment(nu_offset(), static_cast<Eigen::Index>(num_cells_)) = f.nu;
    return x;
}

LatentField LatentModel::unpack(const Eigen::VectorXd& x) const {
    LatentField f;
    const auto J = static_cast<Eigen::Index>(num_groups_);
    const auto K = static_cast<Eigen::Index>(num_covariates_);
    f.beta0 = x[0];
    f.beta1 = Eigen::VectorXd::Zero(J);
    for (Eigen::Index j = 1; j < J; ++j) f.beta1[j] = x[beta1_offset() + j - 1];
    Eigen::Index rows = spec_.shared_covariate_effects ? 1 : J;
    f.beta2 = Eigen::MatrixXd::Zero(rows, spec_.include_covariates ? K : 0);
    if (spec_.include_covariates)
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index k = 0; k < K; ++k) f.beta2(r, k) = x[beta2_offset_ + r * K + k];
    f.upsilon = spec_.include_spatial ? Eigen::VectorXd(x.segment(upsilon_offset_, static_cast<Eigen::Index>(num_areas_)))
                                      : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_areas_));
    f.nu = spec_.include_exchangeable ? Eigen::VectorXd(x.segment(nu_offset(), static_cast<Eigen::Index>(num_cells_)))
                                      : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_cells_));
    return f;
}

double log_unnormalized_posterior(const ModelSpec& spec, const LatentField& field,
                                  const Hyperparameters& tau, const SampleRealization& data,
                                  const Population& pop, const CovariateMatrix& x,
                                  const AdjacencyGraph& graph) {
    LatentModel model(spec, pop, x, graph);
    if (data.n.size() != model.num_cells()) throw std::invalid_argument("sample does not match population");
    return model.log_posterior(model.pack(field), tau, data);
}

// ---------------------------------------------------------------------------
// Conditional Gaussian approximation

namespace {

void check_data(const LatentModel& model, const SampleRealization& data) {
    if (data.n.size() != model.num_cells() || data.y.size() != model.num_cells())
        throw std::invalid_argument("sample realization does not align with the population cells");
    for (std::size_t c = 0; c < data.n.size(); ++c)
        if (data.n[c] < 0 || data.y[c] < 0 || data.y[c] > data.n[c])
            throw std::invalid_argument("sample realization violates 0 <= y <= n at cell " + std::to_string(c));
}

struct Linearization {
    Eigen::VectorXd weight;    // n p (1 - p)
    Eigen::VectorXd residual;  // y - n p
};

Linearization linearize(const LatentModel& model, const Eigen::VectorXd& theta, const SampleRealization& data) {
    const auto n = static_cast<Eigen::Index>(model.num_cells());
    Linearization l{Eigen::VectorXd(n), Eigen::VectorXd(n)};
    for (Eigen::Index c = 0; c < n; ++c) {
        double p = inv_logit(theta[c]);
        double nc = static_cast<double>(data.n[static_cast<std::size_t>(c)]);
        l.weight[c] = nc * p * (1.0 - p);
        l.residual[c] = static_cast<double>(data.y[static_cast<std::size_t>(c)]) - nc * p;
    }
    return l;
}

// Reduced precision S over z after eliminating nu, plus rho A'A.
Eigen::MatrixXd reduced_precision(const LatentModel& model, const Hyperparameters& tau,
                                  const Eigen::VectorXd& weight, const Eigen::VectorXd& cell_precision) {
    Eigen::MatrixXd s = model.shared_prior_precision(tau);
    const auto& a = model.constraints();
    if (a.rows() > 0) s.noalias() += tau.tau_upsilon * a.transpose() * a;
    const bool exch = model.spec().include_exchangeable;
    for (std::size_t c = 0; c < model.num_cells(); ++c) {
        auto ci = static_cast<Eigen::Index>(c);
        double w = exch ? weight[ci] * tau.tau_nu / cell_precision[ci] : weight[ci];
        if (w == 0.0) continue;
        auto row = model.design_row(c);
        for (const auto& ti : row)
            for (const auto& tj : row) s(ti.index, tj.index) += w * ti.value * tj.value;
    }
    return s;
}

double row_dot(std::span<const LatentModel::Term> row, const Eigen::VectorXd& z) {
    double s = 0.0;
    for (const auto& t : row) s += t.value * z[t.index];
    return s;
}

ConditionalGaussian fit_conditional_impl(const LatentModel& model, const Hyperparameters& tau,
                                         const SampleRealization& data, const Eigen::VectorXd& start,
                                         const NewtonOptions& options, bool with_marginals,
                                         std::vector<double>* trace) {
    const Eigen::Index m = model.shared_size();
    const auto ncell = static_cast<Eigen::Index>(model.num_cells());
    const bool exch = model.spec().include_exchangeable;
    const auto& a = model.constraints();
    const bool constrained = a.rows() > 0;

    Eigen::VectorXd x = start.size() == model.size() ? start : Eigen::VectorXd::Zero(model.size());
    if (constrained) {
        Eigen::VectorXd az = a * x.head(m);
        x.head(m) -= a.transpose() * (a * a.transpose()).ldlt().solve(az);
    }

    auto nu_of = [&](const Eigen::VectorXd& v) { return v.segment(model.nu_offset(), ncell); };

    double f = model.log_posterior(x, tau, data);
    if (trace) trace->push_back(f);
    ConditionalGaussian out;
    out.tau = tau;
    bool converged = false;
    int it = 0;
    for (; it < options.max_iterations; ++it) {
        Eigen::VectorXd theta = model.linear_predictor(x);
        auto lin = linearize(model, theta, data);
        Eigen::VectorXd q, gnu;
        if (exch) {
            q = lin.weight.array() + tau.tau_nu;
            gnu = lin.residual - tau.tau_nu * nu_of(x);
        }
        Eigen::MatrixXd s = reduced_precision(model, tau, lin.weight, q);

        // Gradient in z with nu eliminated; the constraint penalty term is zero
        // on the feasible set.
        Eigen::VectorXd rhs = -(model.shared_prior_precision(tau) * x.head(m));
        if (constrained) rhs -= tau.tau_upsilon * (a.transpose() * (a * x.head(m)));
        for (std::size_t c = 0; c < model.num_cells(); ++c) {
            auto ci = static_cast<Eigen::Index>(c);
            double r = lin.residual[ci];
            if (exch) r -= lin.weight[ci] / q[ci] * gnu[ci];
            for (const auto& t : model.design_row(c)) rhs[t.index] += r * t.value;
        }

        Eigen::LLT<Eigen::MatrixXd> llt(s);
        if (llt.info() != Eigen::Success)
            throw FitFailure("reduced precision is not positive definite", it);
        Eigen::VectorXd dz = llt.solve(rhs);
        if (constrained) {
            Eigen::MatrixXd v = llt.solve(a.transpose());
            Eigen::VectorXd viol = a * (x.head(m) + dz);
            dz -= v * (a * v).llt().solve(viol);
        }
        Eigen::VectorXd dx(model.size());
        dx.head(m) = dz;
        if (exch)
            for (std::size_t c = 0; c < model.num_cells(); ++c) {
                auto ci = static_cast<Eigen::Index>(c);
                dx[model.nu_offset() + ci] = (gnu[ci] - lin.weight[ci] * row_dot(model.design_row(c), dz)) / q[ci];
            }

        double alpha = 1.0;
        double f_new = -std::numeric_limits<double>::infinity();
        Eigen::VectorXd x_new;
        const double slack = 1e-12 * (1.0 + std::abs(f));
        for (int h = 0; h < 40; ++h, alpha *= 0.5) {
            x_new = x + alpha * dx;
            f_new = model.log_posterior(x_new, tau, data);
            if (std::isfinite(f_new) && f_new >= f - slack) break;
        }
        const double step = alpha * dx.lpNorm<Eigen::Infinity>();
        if (!(std::isfinite(f_new) && f_new >= f - slack)) {
            if (dx.lpNorm<Eigen::Infinity>() < 1e3 * options.step_tolerance) {
                converged = true;
                break;
            }
            throw FitFailure("Newton line search failed", it + 1);
        }
        x = std::move(x_new);
        f = f_new;
        if (trace) trace->push_back(f);
        if (!std::isfinite(step)) throw FitFailure("Newton step is not finite", it + 1);
        if (step < options.step_tolerance) {
            converged = true;
            ++it;
            break;
        }
    }
    if (!converged)
        throw FitFailure("Newton mode search did not converge in " + std::to_string(options.max_iterations) +
                             " iterations",
                         it);

    Eigen::VectorXd theta = model.linear_predictor(x);
    auto lin = linearize(model, theta, data);
    if (exch) out.cell_precision = lin.weight.array() + tau.tau_nu;
    Eigen::MatrixXd s = reduced_precision(model, tau, lin.weight, out.cell_precision);
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw FitFailure("reduced precision is not positive definite", it);

    double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    if (exch) logdet += out.cell_precision.array().log().sum();
    if (constrained) {
        out.kriging_basis = llt.solve(a.transpose());
        Eigen::MatrixXd w = a * out.kriging_basis;
        Eigen::LLT<Eigen::MatrixXd> wl(w);
        logdet += 2.0 * wl.matrixLLT().diagonal().array().log().sum();
        out.kriging_inverse = wl.solve(Eigen::MatrixXd::Identity(w.rows(), w.cols()));
    }
    double jacobian = 0.0;
    if (model.spec().include_spatial) jacobian += std::log(tau.tau_upsilon);
    if (exch) jacobian += std::log(tau.tau_nu);
    out.log_marginal = f + jacobian - 0.5 * logdet;
    out.mode = std::move(x);
    out.weight = std::move(lin.weight);
    out.iterations = it;

    if (with_marginals) {
        out.reduced_cholesky = llt.matrixL();
        Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(m, m));
        out.logit_mean = theta;
        out.logit_var.resize(ncell);
        for (std::size_t c = 0; c < model.num_cells(); ++c) {
            auto ci = static_cast<Eigen::Index>(c);
            auto row = model.design_row(c);
            double scale = exch ? tau.tau_nu / out.cell_precision[ci] : 1.0;
            double v = 0.0;
            for (const auto& ti : row)
                for (const auto& tj : row) v += ti.value * tj.value * cov(ti.index, tj.index);
            if (constrained) {
                Eigen::VectorXd vc = Eigen::VectorXd::Zero(a.rows());
                for (const auto& t : row) vc += t.value * out.kriging_basis.row(t.index).transpose();
                v -= vc.dot(out.kriging_inverse * vc);
            }
            v *= scale * scale;
            if (exch) v += 1.0 / out.cell_precision[ci];
            out.logit_var[ci] = std::max(v, 0.0);
        }
    }
    return out;
}

}  // namespace

ConditionalGaussian fit_conditional(const LatentModel& model, const Hyperparameters& tau,
                                    const SampleRealization& data, const Eigen::VectorXd& start,
                                    const NewtonOptions& options, std::vector<double>* objective_trace) {
    check_data(model, data);
    return fit_conditional_impl(model, tau, data, start, options, true, objective_trace);
}

// ---------------------------------------------------------------------------
// Quadrature

void gauss_hermite(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    if (n < 1) throw std::invalid_argument("Gauss-Hermite needs at least one node");
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) jac(k, k - 1) = jac(k - 1, k) = std::sqrt(k / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
    nodes.resize(static_cast<std::size_t>(n));
    weights.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        nodes[static_cast<std::size_t>(i)] = es.eigenvalues()[i];
        double v0 = es.eigenvectors()(0, i);
        weights[static_cast<std::size_t>(i)] = std::sqrt(std::numbers::pi) * v0 * v0;
    }
}

namespace {

struct HermiteRule {
    std::vector<double> nodes, weights;
};

const HermiteRule& hermite_rule(int n) {
    static std::mutex mu;
    static std::vector<std::pair<int, std::unique_ptr<HermiteRule>>> cache;
    std::lock_guard lock(mu);
    for (const auto& [k, r] : cache)
        if (k == n) return *r;
    auto r = std::make_unique<HermiteRule>();
    gauss_hermite(n, r->nodes, r->weights);
    cache.emplace_back(n, std::move(r));
    return *cache.back().second;
}

}  // namespace

ProbabilityMoments probability_moments(std::span<const double> weights, std::span<const double> means,
                                       std::span<const double> vars, int nodes) {
    const auto& rule = hermite_rule(nodes);
    const double norm = 1.0 / std::sqrt(std::numbers::pi);
    double m1 = 0.0, m2 = 0.0, wsum = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        if (weights[k] <= 0.0) continue;
        double sd = std::sqrt(2.0 * std::max(vars[k], 0.0));
        double e1 = 0.0, e2 = 0.0;
        for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
            double p = inv_logit(means[k] + sd * rule.nodes[i]);
            e1 += rule.weights[i] * p;
            e2 += rule.weights[i] * p * p;
        }
        m1 += weights[k] * e1 * norm;
        m2 += weights[k] * e2 * norm;
        wsum += weights[k];
    }
    m1 /= wsum;
    m2 /= wsum;
    return {m1, std::max(m2 - m1 * m1, 0.0)};
}

// ---------------------------------------------------------------------------
// Hyperparameter integration

namespace {

class HyperSearch {
public:
    HyperSearch(const LatentModel& model, const SampleRealization& data, const LaplaceOptions& options)
        : model_(model), data_(data), options_(options) {
        if (model.spec().include_spatial) dims_.push_back(Dim::upsilon);
        if (model.spec().include_exchangeable) dims_.push_back(Dim::nu);
        warm_ = Eigen::VectorXd::Zero(model.size());
        // Start the intercept at the pooled log-odds.
        double ys = 0, ns = 0;
        for (std::size_t c = 0; c < data.n.size(); ++c) {
            ys += static_cast<double>(data.y[c]);
            ns += static_cast<double>(data.n[c]);
        }
        if (ns > 0) warm_[0] = std::log((ys + 0.5) / (ns - ys + 0.5));
    }

    std::size_t dims() const { return dims_.size(); }
    int evaluations() const { return evaluations_; }
    int newton_iterations() const { return newton_; }

    Eigen::VectorXd prior_mode() const {
        Eigen::VectorXd h(static_cast<Eigen::Index>(dims_.size()));
        for (std::size_t i = 0; i < dims_.size(); ++i)
            h[static_cast<Eigen::Index>(i)] = std::log(prior(i).log_scale_mode());
        return h;
    }

    Hyperparameters tau_of(const Eigen::VectorXd& h) const {
        Hyperparameters t;
        for (std::size_t i = 0; i < dims_.size(); ++i) {
            double v = std::exp(std::clamp(h[static_cast<Eigen::Index>(i)], -options_.log_tau_bound,
                                           options_.log_tau_bound));
            (dims_[i] == Dim::upsilon ? t.tau_upsilon : t.tau_nu) = v;
        }
        return t;
    }

    ConditionalGaussian fit(const Eigen::VectorXd& h, bool with_marginals) {
        auto g = fit_conditional_impl(model_, tau_of(h), data_, warm_, options_.newton, with_marginals, nullptr);
        ++evaluations_;
        newton_ += g.iterations;
        warm_ = g.mode;
        return g;
    }

    double value(const Eigen::VectorXd& h) { return fit(h, false).log_marginal; }

    // Central finite-difference gradient and Hessian.
    void derivatives(const Eigen::VectorXd& h, double f0, Eigen::VectorXd& grad, Eigen::MatrixXd& hess) {
        const double d = 0.05;
        const auto k = h.size();
        grad.resize(k);
        hess.resize(k, k);
        Eigen::VectorXd fp(k), fm(k);
        for (Eigen::Index i = 0; i < k; ++i) {
            Eigen::VectorXd e = Eigen::VectorXd::Zero(k);
            e[i] = d;
            fp[i] = value(h + e);
            fm[i] = value(h - e);
            grad[i] = (fp[i] - fm[i]) / (2 * d);
            hess(i, i) = (fp[i] - 2 * f0 + fm[i]) / (d * d);
        }
        for (Eigen::Index i = 0; i < k; ++i)
            for (Eigen::Index j = i + 1; j < k; ++j) {
                Eigen::VectorXd ei = Eigen::VectorXd::Zero(k), ej = Eigen::VectorXd::Zero(k);
                ei[i] = d;
                ej[j] = d;
                double fpp = value(h + ei + ej), fpm = value(h + ei - ej);
                double fmp = value(h - ei + ej), fmm = value(h - ei - ej);
                hess(i, j) = hess(j, i) = (fpp - fpm - fmp + fmm) / (4 * d * d);
            }
    }

private:
    enum class Dim { upsilon, nu };
    const GammaPrior& prior(std::size_t i) const {
        return dims_[i] == Dim::upsilon ? model_.spec().hyperprior_upsilon : model_.spec().hyperprior_nu;
    }

    const LatentModel& model_;
    const SampleRealization& data_;
    const LaplaceOptions& options_;
    std::vector<Dim> dims_;
    Eigen::VectorXd warm_;
    int evaluations_ = 0;
    int newton_ = 0;
};

bool negative_definite(const Eigen::MatrixXd& h) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    return es.eigenvalues().maxCoeff() < 0;
}

}  // namespace

FittedPosterior fit_laplace(const ModelSpec& spec, const SampleRealization& data, const Population& pop,
                            const CovariateMatrix& x, const AdjacencyGraph& graph,
                            const LaplaceOptions& options) {
    if (options.grid_points < 1 || options.grid_points % 2 == 0)
        throw std::invalid_argument("grid_points must be a positive odd number");
    auto model = std::make_shared<const LatentModel>(spec, pop, x, graph);
    check_data(*model, data);

    FittedPosterior post;
    post.model = model;
    HyperSearch search(*model, data, options);
    const auto k = static_cast<Eigen::Index>(search.dims());

    std::vector<Eigen::VectorXd> points;
    std::size_t mode_index = 0;
    int hyper_iterations = 0;
    if (k == 0) {
        points.emplace_back(0);
    } else {
        Eigen::VectorXd h = search.prior_mode();
        double f = search.value(h);
        Eigen::VectorXd grad;
        Eigen::MatrixXd hess;
        const double bound = options.log_tau_bound;
        for (; hyper_iterations < options.max_hyper_iterations; ++hyper_iterations) {
            search.derivatives(h, f, grad, hess);
            Eigen::VectorXd step = negative_definite(hess) ? Eigen::VectorXd(-hess.ldlt().solve(grad))
                                                           : Eigen::VectorXd(grad);
            double len = step.norm();
            if (len > 1.5) step *= 1.5 / len;
            bool moved = false;
            for (int b = 0; b < 30; ++b, step *= 0.5) {
                Eigen::VectorXd trial = (h + step).cwiseMax(-bound).cwiseMin(bound);
                double ft = search.value(trial);
                if (ft >= f) {
                    step = trial - h;
                    h = trial;
                    f = ft;
                    moved = true;
                    break;
                }
            }
            if (!moved || step.norm() < options.hyper_tolerance) break;
        }
        search.derivatives(h, f, grad, hess);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(hess);
        Eigen::VectorXd sd(k);
        for (Eigen::Index i = 0; i < k; ++i) {
            double lam = std::min(es.eigenvalues()[i], -1.0 / 9.0);
            sd[i] = 1.0 / std::sqrt(-lam);
        }
        const int half = options.grid_points / 2;
        std::vector<int> idx(static_cast<std::size_t>(k), -half);
        while (true) {
            Eigen::VectorXd p = h;
            bool centre = true;
            for (Eigen::Index i = 0; i < k; ++i) {
                int z = idx[static_cast<std::size_t>(i)];
                centre = centre && z == 0;
                p += static_cast<double>(z) * options.grid_step * sd[i] * es.eigenvectors().col(i);
            }
            if (centre) mode_index = points.size();
            points.push_back(p.cwiseMax(-bound).cwiseMin(bound));
            std::size_t i = 0;
            while (i < idx.size() && ++idx[i] > half) idx[i++] = -half;
            if (i == idx.size()) break;
        }
    }

    // Conditional fits at every grid point; the mode must succeed, outlying
    // points that fail are dropped with a warning.
    std::vector<ConditionalGaussian> comps;
    std::vector<double> logw;
    for (std::size_t i = 0; i < points.size(); ++i) {
        try {
            comps.push_back(search.fit(points[i], true));
            if (i == mode_index) mode_index = comps.size() - 1;
        } catch (const FitFailure& e) {
            if (i == mode_index) throw;
            post.diagnostics.warnings.push_back(std::string("grid point dropped: ") + e.what());
            if (i < mode_index) --mode_index;
        }
    }
    double lmax = -std::numeric_limits<double>::infinity();
    for (const auto& c : comps) lmax = std::max(lmax, c.log_marginal);
    double lse = 0.0;
    for (const auto& c : comps) lse += std::exp(c.log_marginal - lmax);
    lse = lmax + std::log(lse);

    const auto ncell = model->num_cells();
    std::vector<double> w(comps.size()), mu(comps.size()), var(comps.size());
    for (std::size_t i = 0; i < comps.size(); ++i) {
        double lw = comps[i].log_marginal - lse;
        w[i] = std::exp(lw);
        post.hyper_grid.push_back({spec.include_spatial ? comps[i].tau.tau_upsilon : 0.0,
                                   spec.include_exchangeable ? comps[i].tau.tau_nu : 0.0, lw});
    }
    post.cell_mean.resize(ncell);
    post.cell_var.resize(ncell);
    post.logit_mean.resize(ncell);
    post.logit_var.resize(ncell);
    for (std::size_t c = 0; c < ncell; ++c) {
        auto ci = static_cast<Eigen::Index>(c);
        double m1 = 0, m2 = 0;
        for (std::size_t i = 0; i < comps.size(); ++i) {
            mu[i] = comps[i].logit_mean[ci];
            var[i] = comps[i].logit_var[ci];
            m1 += w[i] * mu[i];
            m2 += w[i] * (var[i] + mu[i] * mu[i]);
        }
        auto pm = probability_moments(w, mu, var, options.quadrature_nodes);
        post.cell_mean[c] = pm.mean;
        post.cell_var[c] = pm.var;
        post.logit_mean[c] = m1;
        post.logit_var[c] = std::max(m2 - m1 * m1, 0.0);
    }
    post.latent_mode = model->unpack(comps[mode_index].mode);
    if (mode_index != 0) {
        std::swap(comps[0], comps[mode_index]);
        std::swap(post.hyper_grid[0], post.hyper_grid[mode_index]);
    }
    post.components = std::move(comps);
    post.diagnostics.converged = true;
    post.diagnostics.newton_iterations = search.newton_iterations();
    post.diagnostics.hyper_evaluations = search.evaluations();
    post.diagnostics.hyper_iterations = hyper_iterations;
    return post;
}

Eigen::SparseMatrix<double> FittedPosterior::latent_precision() const {
    if (!model || components.empty())
        throw std::logic_error("latent precision is only available for Laplace fits");
    const auto& g = components.front();
    const auto& md = *model;
    const Eigen::Index m = md.shared_size();
    const bool exch = md.spec().include_exchangeable;
    Eigen::MatrixXd zz = md.shared_prior_precision(g.tau);
    if (md.constraints().rows() > 0) zz += g.tau.tau_upsilon * md.constraints().transpose() * md.constraints();
    std::vector<Eigen::Triplet<double>> t;
    for (std::size_t c = 0; c < md.num_cells(); ++c) {
        auto ci = static_cast<Eigen::Index>(c);
        double w = g.weight[ci];
        auto row = md.design_row(c);
        for (const auto& ti : row)
            for (const auto& tj : row) zz(ti.index, tj.index) += w * ti.value * tj.value;
        if (exch) {
            auto nu = md.nu_offset() + ci;
            t.emplace_back(nu, nu, g.cell_precision[ci]);
            if (w != 0.0)
                for (const auto& ti : row) {
                    t.emplace_back(nu, ti.index, w * ti.value);
                    t.emplace_back(ti.index, nu, w * ti.value);
                }
        }
    }
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            if (zz(i, j) != 0.0) t.emplace_back(i, j, zz(i, j));
    Eigen::SparseMatrix<double> q(md.size(), md.size());
    q.setFromTriplets(t.begin(), t.end());
    return q;
}

std::vector<CellPrediction> predict_cells(const FittedPosterior& post) {
    std::vector<CellPrediction> out(post.num_cells());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = {post.cell_mean[c], post.cell_var[c]};
    return out;
}

std::vector<double> sample_latent(const FittedPosterior& post, RandomStream& rng) {
    if (post.theta_draws.rows() > 0) {
        auto r = static_cast<Eigen::Index>(std::floor(rng.uniform() * static_cast<double>(post.theta_draws.rows())));
        r = std::min(r, post.theta_draws.rows() - 1);
        std::vector<double> out(static_cast<std::size_t>(post.theta_draws.cols()));
        for (Eigen::Index c = 0; c < post.theta_draws.cols(); ++c) out[static_cast<std::size_t>(c)] = post.theta_draws(r, c);
        return out;
    }
    if (!post.model || post.components.empty()) throw std::logic_error("posterior has nothing to sample from");
    const auto& md = *post.model;

    double u = rng.uniform(), acc = 0.0;
    std::size_t pick = post.components.size() - 1;
    for (std::size_t i = 0; i < post.hyper_grid.size(); ++i) {
        acc += std::exp(post.hyper_grid[i].log_weight);
        if (u < acc) {
            pick = i;
            break;
        }
    }
    const auto& g = post.components[pick];
    const Eigen::Index m = md.shared_size();
    Eigen::VectorXd eps(m);
    for (Eigen::Index i = 0; i < m; ++i) eps[i] = rng.normal();
    Eigen::VectorXd dz = g.reduced_cholesky.transpose().triangularView<Eigen::Upper>().solve(eps);
    if (md.constraints().rows() > 0) dz -= g.kriging_basis * (g.kriging_inverse * (md.constraints() * dz));
    Eigen::VectorXd z = g.mode.head(m) + dz;

    const bool exch = md.spec().include_exchangeable;
    std::vector<double> theta(md.num_cells());
    for (std::size_t c = 0; c < md.num_cells(); ++c) {
        auto ci = static_cast<Eigen::Index>(c);
        auto row = md.design_row(c);
        double t = row_dot(row, z);
        if (exch) {
            double q = g.cell_precision[ci];
            t += g.mode[md.nu_offset() + ci] - g.weight[ci] / q * row_dot(row, dz) + rng.normal() / std::sqrt(q);
        }
        theta[c] = t;
    }
    return theta;
}

void write_posterior_csv(const FittedPosterior& post, const Population& pop, std::ostream& out) {
    out << "group_id,area_id,post_mean,post_sd,rse\n";
    for (std::size_t j = 0; j < pop.num_groups(); ++j)
        for (std::size_t d = 0; d < pop.num_areas(); ++d) {
            auto c = pop.cell(j, d);
            double sd = std::sqrt(post.cell_var[c]);
            out << pop.group_labels()[j] << ',' << pop.area_ids()[d] << ',' << csv::format_double(post.cell_mean[c])
                << ',' << csv::format_double(sd) << ',' << csv::format_double(sd / post.cell_mean[c]) << '\n';
        }
}

}  // namespace saessd
