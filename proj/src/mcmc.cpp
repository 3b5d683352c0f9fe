#include <algorithm>
#include <cmath>

#include "saessd/model.hpp"
#include "saessd/parallel.hpp"

namespace saessd {

namespace {

constexpr int kBatches = 20;
constexpr double kTargetAcceptance = 0.44;
constexpr int kAdaptEvery = 50;

struct ChainOutput {
    // Per quantity (cells then tau_u, tau_v): sums over each half of the chain.
    std::vector<double> half_sum[2], half_sumsq[2];
    std::vector<double> logit_sum, logit_sumsq;
    std::vector<std::vector<double>> batch_sum;  // [batch][cell]
    std::vector<Hyperparameters> taus;
    std::vector<std::vector<double>> thetas;
    Eigen::VectorXd field_sum;
    long kept = 0;
};

class Chain {
public:
    Chain(const LatentModel& model, const SampleRealization& data, const Eigen::MatrixXd& basis,
          const Eigen::VectorXd& eigenvalues, std::uint64_t seed)
        : m_(model), data_(data), basis_(basis), lambda_(eigenvalues), rng_(seed) {
        const auto nfix = static_cast<std::size_t>(model.upsilon_offset());
        columns_.resize(nfix);
        for (std::size_t c = 0; c < model.num_cells(); ++c)
            for (const auto& t : model.design_row(c))
                if (t.index < model.upsilon_offset())
                    columns_[static_cast<std::size_t>(t.index)].push_back({c, t.value});

        const auto ncell = model.num_cells();
        fixed_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nfix));
        u_ = Eigen::VectorXd::Zero(basis.cols());
        nu_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ncell));
        double ys = 0, ns = 0;
        for (std::size_t c = 0; c < ncell; ++c) {
            ys += static_cast<double>(data.y[c]);
            ns += static_cast<double>(data.n[c]);
        }
        fixed_[0] = (ns > 0 ? std::log((ys + 0.5) / (ns - ys + 0.5)) : 0.0) + 0.3 * rng_.normal();
        const auto& spec = model.spec();
        tau_.tau_upsilon = spec.hyperprior_upsilon.log_scale_mode() * std::exp(0.5 * rng_.normal());
        tau_.tau_nu = spec.hyperprior_nu.log_scale_mode() * std::exp(0.5 * rng_.normal());
        log_scale_fixed_ = Eigen::VectorXd::Constant(fixed_.size(), std::log(0.1));
        log_scale_u_ = Eigen::VectorXd::Constant(u_.size(), std::log(0.1));
        log_scale_nu_ = Eigen::VectorXd::Constant(nu_.size(), std::log(0.3));
        acc_fixed_ = Eigen::VectorXd::Zero(fixed_.size());
        acc_u_ = Eigen::VectorXd::Zero(u_.size());
        acc_nu_ = Eigen::VectorXd::Zero(nu_.size());
        refresh();
    }

    ChainOutput run(const ChainConfig& cfg) {
        ChainOutput out;
        const auto ncell = m_.num_cells();
        const std::size_t nq = ncell + 2;
        for (auto h : {0, 1}) {
            out.half_sum[h].assign(nq, 0.0);
            out.half_sumsq[h].assign(nq, 0.0);
        }
        out.logit_sum.assign(ncell, 0.0);
        out.logit_sumsq.assign(ncell, 0.0);
        out.batch_sum.assign(kBatches, std::vector<double>(ncell, 0.0));
        out.field_sum = Eigen::VectorXd::Zero(m_.size());

        for (int it = 0; it < cfg.burn_in; ++it) {
            sweep();
            if ((it + 1) % kAdaptEvery == 0) adapt((it + 1) / kAdaptEvery);
        }
        const int per_chain_store = std::max(1, cfg.stored_draws / std::max(1, cfg.num_chains));
        const int store_every = std::max(1, cfg.samples / per_chain_store);
        for (int s = 0; s < cfg.samples; ++s) {
            for (int t = 0; t < cfg.thin; ++t) sweep();
            const int half = s < cfg.samples / 2 ? 0 : 1;
            const int batch = std::min(kBatches - 1, s * kBatches / cfg.samples);
            for (std::size_t c = 0; c < ncell; ++c) {
                double th = theta_[static_cast<Eigen::Index>(c)];
                double p = inv_logit(th);
                out.half_sum[half][c] += p;
                out.half_sumsq[half][c] += p * p;
                out.logit_sum[c] += th;
                out.logit_sumsq[c] += th * th;
                out.batch_sum[static_cast<std::size_t>(batch)][c] += p;
            }
            out.half_sum[half][ncell] += tau_.tau_upsilon;
            out.half_sumsq[half][ncell] += tau_.tau_upsilon * tau_.tau_upsilon;
            out.half_sum[half][ncell + 1] += tau_.tau_nu;
            out.half_sumsq[half][ncell + 1] += tau_.tau_nu * tau_.tau_nu;
            out.field_sum += packed();
            ++out.kept;
            if ((s + 1) % store_every == 0 && static_cast<int>(out.thetas.size()) < per_chain_store) {
                out.thetas.emplace_back(theta_.data(), theta_.data() + theta_.size());
                out.taus.push_back(tau_);
            }
        }
        return out;
    }

private:
    double cell_loglik(std::size_t c, double th) const {
        auto n = data_.n[c];
        if (n == 0) return 0.0;
        return static_cast<double>(data_.y[c]) * th - static_cast<double>(n) * log1p_exp(th);
    }

    void refresh() {
        Eigen::VectorXd upsilon = basis_.cols() > 0 ? Eigen::VectorXd(basis_ * u_) : Eigen::VectorXd();
        theta_.resize(static_cast<Eigen::Index>(m_.num_cells()));
        for (std::size_t c = 0; c < m_.num_cells(); ++c) {
            auto ci = static_cast<Eigen::Index>(c);
            double s = 0.0;
            for (const auto& t : m_.design_row(c))
                s += t.value * (t.index < m_.upsilon_offset() ? fixed_[t.index] : upsilon[t.index - m_.upsilon_offset()]);
            if (m_.spec().include_exchangeable) s += nu_[ci];
            theta_[ci] = s;
        }
    }

    Eigen::VectorXd packed() const {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(m_.size());
        x.head(m_.upsilon_offset()) = fixed_;
        if (basis_.cols() > 0)
            x.segment(m_.upsilon_offset(), static_cast<Eigen::Index>(m_.num_areas())) = basis_ * u_;
        if (m_.spec().include_exchangeable) x.tail(nu_.size()) = nu_;
        return x;
    }

    bool accept(double log_ratio) { return std::log(rng_.uniform()) < log_ratio; }

    void sweep() {
        refresh();
        const double prior_prec = 1.0 / (m_.spec().fixed_effect_prior_sd * m_.spec().fixed_effect_prior_sd);
        for (Eigen::Index i = 0; i < fixed_.size(); ++i) {
            double delta = std::exp(log_scale_fixed_[i]) * rng_.normal();
            double b = fixed_[i];
            double lr = -0.5 * prior_prec * ((b + delta) * (b + delta) - b * b);
            for (const auto& [c, v] : columns_[static_cast<std::size_t>(i)]) {
                double th = theta_[static_cast<Eigen::Index>(c)];
                lr += cell_loglik(c, th + v * delta) - cell_loglik(c, th);
            }
            if (accept(lr)) {
                fixed_[i] = b + delta;
                for (const auto& [c, v] : columns_[static_cast<std::size_t>(i)]) theta_[static_cast<Eigen::Index>(c)] += v * delta;
                acc_fixed_[i] += 1;
            }
        }
        const auto D = m_.num_areas();
        for (Eigen::Index k = 0; k < u_.size(); ++k) {
            double delta = std::exp(log_scale_u_[k]) * rng_.normal();
            double uk = u_[k];
            double lr = -0.5 * tau_.tau_upsilon * lambda_[k] * ((uk + delta) * (uk + delta) - uk * uk);
            for (std::size_t c = 0; c < m_.num_cells(); ++c) {
                double th = theta_[static_cast<Eigen::Index>(c)];
                lr += cell_loglik(c, th + delta * basis_(static_cast<Eigen::Index>(c % D), k)) - cell_loglik(c, th);
            }
            if (accept(lr)) {
                u_[k] = uk + delta;
                for (std::size_t c = 0; c < m_.num_cells(); ++c)
                    theta_[static_cast<Eigen::Index>(c)] += delta * basis_(static_cast<Eigen::Index>(c % D), k);
                acc_u_[k] += 1;
            }
        }
        if (m_.spec().include_exchangeable) {
            const double sd_prior = 1.0 / std::sqrt(tau_.tau_nu);
            for (std::size_t c = 0; c < m_.num_cells(); ++c) {
                auto ci = static_cast<Eigen::Index>(c);
                double v = nu_[ci];
                if (data_.n[c] == 0) {
                    double nv = sd_prior * rng_.normal();
                    theta_[ci] += nv - v;
                    nu_[ci] = nv;
                    acc_nu_[ci] += 1;
                    continue;
                }
                double delta = std::exp(log_scale_nu_[ci]) * rng_.normal();
                double th = theta_[ci];
                double lr = cell_loglik(c, th + delta) - cell_loglik(c, th) -
                            0.5 * tau_.tau_nu * ((v + delta) * (v + delta) - v * v);
                if (accept(lr)) {
                    nu_[ci] = v + delta;
                    theta_[ci] = th + delta;
                    acc_nu_[ci] += 1;
                }
            }
            const auto& g = m_.spec().hyperprior_nu;
            tau_.tau_nu = rng_.gamma(g.shape + 0.5 * static_cast<double>(nu_.size()), g.rate + 0.5 * nu_.squaredNorm());
        }
        if (u_.size() > 0) {
            const auto& g = m_.spec().hyperprior_upsilon;
            double quad = (lambda_.array() * u_.array().square()).sum();
            tau_.tau_upsilon = rng_.gamma(g.shape + 0.5 * static_cast<double>(u_.size()), g.rate + 0.5 * quad);
        }
    }

    void adapt(int round) {
        const double gain = std::min(1.0, 3.0 / std::sqrt(static_cast<double>(round)));
        auto update = [&](Eigen::VectorXd& log_scale, Eigen::VectorXd& acc) {
            for (Eigen::Index i = 0; i < log_scale.size(); ++i) {
                log_scale[i] += gain * (acc[i] / kAdaptEvery - kTargetAcceptance);
                acc[i] = 0.0;
            }
        };
        update(log_scale_fixed_, acc_fixed_);
        update(log_scale_u_, acc_u_);
        update(log_scale_nu_, acc_nu_);
    }

    const LatentModel& m_;
    const SampleRealization& data_;
    const Eigen::MatrixXd& basis_;
    const Eigen::VectorXd& lambda_;
    RandomStream rng_;
    std::vector<std::vector<std::pair<std::size_t, double>>> columns_;
    Eigen::VectorXd fixed_, u_, nu_, theta_;
    Hyperparameters tau_;
    Eigen::VectorXd log_scale_fixed_, log_scale_u_, log_scale_nu_;
    Eigen::VectorXd acc_fixed_, acc_u_, acc_nu_;
};

// Split-chain potential scale reduction for one quantity.
double split_rhat(const std::vector<ChainOutput>& chains, std::size_t q, long half_len) {
    if (half_len < 2) return 1.0;
    std::vector<double> means, vars;
    for (const auto& ch : chains)
        for (int h : {0, 1}) {
            double m = ch.half_sum[h][q] / static_cast<double>(half_len);
            double v = (ch.half_sumsq[h][q] - static_cast<double>(half_len) * m * m) / static_cast<double>(half_len - 1);
            means.push_back(m);
            vars.push_back(std::max(v, 0.0));
        }
    const double n = static_cast<double>(half_len);
    const double k = static_cast<double>(means.size());
    double mbar = 0, w = 0;
    for (std::size_t i = 0; i < means.size(); ++i) {
        mbar += means[i] / k;
        w += vars[i] / k;
    }
    double b = 0;
    for (double m : means) b += (m - mbar) * (m - mbar);
    b *= n / (k - 1);
    if (w <= 1e-300) return b <= 1e-300 ? 1.0 : std::numeric_limits<double>::infinity();
    double var_plus = (n - 1) / n * w + b / n;
    return std::sqrt(var_plus / w);
}

}  // namespace

FittedPosterior fit_mcmc(const ModelSpec& spec, const SampleRealization& data, const Population& pop,
                         const CovariateMatrix& x, const AdjacencyGraph& graph, const ChainConfig& cfg) {
    if (cfg.num_chains < 1 || cfg.samples < 2 || cfg.burn_in < 0 || cfg.thin < 1)
        throw std::invalid_argument("invalid chain configuration");
    auto model = std::make_shared<const LatentModel>(spec, pop, x, graph);
    if (data.n.size() != model->num_cells() || data.y.size() != model->num_cells())
        throw std::invalid_argument("sample realization does not align with the population cells");

    Eigen::MatrixXd basis(static_cast<Eigen::Index>(model->num_areas()), 0);
    Eigen::VectorXd lambda(0);
    if (model->spec().include_spatial && model->icar_rank() > 0) {
        Eigen::MatrixXd r(model->icar_structure());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r);
        const double cut = 1e-9 * std::max(1.0, es.eigenvalues().maxCoeff());
        std::vector<Eigen::Index> keep;
        for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
            if (es.eigenvalues()[i] > cut) keep.push_back(i);
        basis.resize(r.rows(), static_cast<Eigen::Index>(keep.size()));
        lambda.resize(static_cast<Eigen::Index>(keep.size()));
        for (std::size_t i = 0; i < keep.size(); ++i) {
            basis.col(static_cast<Eigen::Index>(i)) = es.eigenvectors().col(keep[i]);
            lambda[static_cast<Eigen::Index>(i)] = es.eigenvalues()[keep[i]];
        }
    }

    std::vector<ChainOutput> outs(static_cast<std::size_t>(cfg.num_chains));
    parallel_for(outs.size(), default_jobs(), [&](std::size_t c) {
        Chain chain(*model, data, basis, lambda, derive_seed(cfg.seed, {0x3c3c, c}));
        outs[c] = chain.run(cfg);
    });

    const auto ncell = model->num_cells();
    const double total = static_cast<double>(outs.front().kept) * static_cast<double>(outs.size());
    FittedPosterior post;
    post.model = model;
    post.cell_mean.assign(ncell, 0.0);
    post.cell_var.assign(ncell, 0.0);
    post.logit_mean.assign(ncell, 0.0);
    post.logit_var.assign(ncell, 0.0);
    post.cell_mcse.assign(ncell, 0.0);
    Eigen::VectorXd field = Eigen::VectorXd::Zero(model->size());
    for (const auto& o : outs) field += o.field_sum / total;
    for (std::size_t c = 0; c < ncell; ++c) {
        double s = 0, ss = 0, ls = 0, lss = 0;
        for (const auto& o : outs) {
            s += o.half_sum[0][c] + o.half_sum[1][c];
            ss += o.half_sumsq[0][c] + o.half_sumsq[1][c];
            ls += o.logit_sum[c];
            lss += o.logit_sumsq[c];
        }
        double m = s / total;
        post.cell_mean[c] = m;
        post.cell_var[c] = std::max(ss / total - m * m, 0.0) * total / (total - 1);
        post.logit_mean[c] = ls / total;
        post.logit_var[c] = std::max(lss / total - post.logit_mean[c] * post.logit_mean[c], 0.0);

        double bm = 0, bss = 0;
        int nb = 0;
        for (const auto& o : outs) {
            const double per = static_cast<double>(o.kept) / kBatches;
            for (const auto& b : o.batch_sum) {
                double v = b[c] / per;
                bm += v;
                bss += v * v;
                ++nb;
            }
        }
        bm /= nb;
        double bvar = std::max(bss / nb - bm * bm, 0.0) * nb / (nb - 1);
        post.cell_mcse[c] = std::sqrt(bvar / nb);
    }

    const long half_len = outs.front().kept / 2;
    // Halves are unequal when kept is odd; the second half gets the extra draw.
    double max_rhat = 0.0;
    if (outs.front().kept % 2 == 0) {
        for (std::size_t q = 0; q < ncell + 2; ++q) {
            if (q == ncell && lambda.size() == 0) continue;
            if (q == ncell + 1 && !model->spec().include_exchangeable) continue;
            max_rhat = std::max(max_rhat, split_rhat(outs, q, half_len));
        }
    }
    post.diagnostics.max_rhat = max_rhat;
    post.diagnostics.converged = max_rhat <= 1.1;
    if (max_rhat > 1.1)
        post.diagnostics.warnings.push_back("potential scale reduction " + std::to_string(max_rhat) + " exceeds 1.1");

    std::size_t ndraws = 0;
    for (const auto& o : outs) ndraws += o.thetas.size();
    post.theta_draws.resize(static_cast<Eigen::Index>(ndraws), static_cast<Eigen::Index>(ncell));
    Eigen::Index r = 0;
    const double lw = -std::log(static_cast<double>(std::max<std::size_t>(ndraws, 1)));
    for (const auto& o : outs)
        for (std::size_t i = 0; i < o.thetas.size(); ++i, ++r) {
            for (std::size_t c = 0; c < ncell; ++c) post.theta_draws(r, static_cast<Eigen::Index>(c)) = o.thetas[i][c];
            post.hyper_grid.push_back({lambda.size() > 0 ? o.taus[i].tau_upsilon : 0.0,
                                       model->spec().include_exchangeable ? o.taus[i].tau_nu : 0.0, lw});
        }
    post.latent_mode = model->unpack(field);
    return post;
}

}  // namespace saessd
