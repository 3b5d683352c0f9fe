#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "fixtures.hpp"
#include "saessd/model.hpp"

using namespace saessd;

namespace {

struct Instance {
    Population pop;
    CovariateMatrix x;
    AdjacencyGraph graph;
    SampleRealization data;
};

// D=5, J=2 with two covariates on a path graph plus one extra edge.
Instance small_instance(std::uint64_t seed, bool with_data = true) {
    Instance in;
    const std::size_t D = 5, J = 2;
    std::vector<Count> N(D * J), Y(D * J);
    std::mt19937_64 rng(seed);
    for (std::size_t c = 0; c < D * J; ++c) {
        N[c] = 200 + static_cast<Count>(rng() % 300);
        Y[c] = N[c] / (c % 3 + 4);
    }
    in.pop = Population(fixtures::ids("A", D), fixtures::ids("g", J), N, Y);
    CovariateMatrix raw;
    raw.values.resize(D, 2);
    raw.values << 0.1, 2.0, 0.7, 1.0, -0.4, 3.5, 1.3, 0.2, 0.9, -1.0;
    raw.names = {"x1", "x2"};
    in.x = scale_covariates(raw);
    in.graph = fixtures::path(D);
    in.graph.add_edge(0, 3);
    std::vector<Count> n(D * J), y(D * J);
    for (std::size_t c = 0; c < D * J; ++c) {
        n[c] = with_data ? 10 + static_cast<Count>(rng() % 40) : 0;
        y[c] = with_data ? n[c] * static_cast<Count>(c % 4 + 1) / 8 : 0;
    }
    n[3] = 0;
    y[3] = 0;
    in.data = fixtures::sample(n, y);
    return in;
}

Eigen::MatrixXd dense_icar(const AdjacencyGraph& g) {
    const auto D = static_cast<Eigen::Index>(g.num_areas());
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(D, D);
    for (Eigen::Index a = 0; a < D; ++a)
        for (Eigen::Index b = 0; b < D; ++b)
            if (a != b && g.adjacent(static_cast<std::size_t>(a), static_cast<std::size_t>(b))) {
                r(a, b) = -1.0;
                r(a, a) += 1.0;
            }
    return r;
}

// Written from the model definition without touching LatentModel.
double naive_log_posterior(const ModelSpec& spec, const LatentField& f, const Hyperparameters& tau,
                           const Instance& in) {
    const std::size_t D = in.pop.num_areas(), J = in.pop.num_groups();
    const auto K = in.x.values.cols();
    double lp = 0.0;
    for (std::size_t j = 0; j < J; ++j)
        for (std::size_t d = 0; d < D; ++d) {
            const auto c = j * D + d;
            double th = f.beta0 + f.beta1[static_cast<Eigen::Index>(j)];
            if (spec.include_covariates)
                for (Eigen::Index k = 0; k < K; ++k)
                    th += in.x.values(static_cast<Eigen::Index>(d), k) *
                          f.beta2(spec.shared_covariate_effects ? 0 : static_cast<Eigen::Index>(j), k);
            if (spec.include_spatial) th += f.upsilon[static_cast<Eigen::Index>(d)];
            if (spec.include_exchangeable) th += f.nu[static_cast<Eigen::Index>(c)];
            const double n = static_cast<double>(in.data.n[c]), y = static_cast<double>(in.data.y[c]);
            lp += y * th - n * std::log(1.0 + std::exp(th));
        }
    const double s2 = spec.fixed_effect_prior_sd * spec.fixed_effect_prior_sd;
    int nfixed = 1;
    lp += -0.5 * f.beta0 * f.beta0 / s2;
    for (std::size_t j = 1; j < J; ++j) {
        lp += -0.5 * f.beta1[static_cast<Eigen::Index>(j)] * f.beta1[static_cast<Eigen::Index>(j)] / s2;
        ++nfixed;
    }
    if (spec.include_covariates) {
        lp += -0.5 * f.beta2.squaredNorm() / s2;
        nfixed += static_cast<int>(f.beta2.size());
    }
    lp -= nfixed * std::log(spec.fixed_effect_prior_sd);
    auto gamma = [](const GammaPrior& g, double t) {
        return g.shape * std::log(g.rate) - std::lgamma(g.shape) + (g.shape - 1) * std::log(t) - g.rate * t;
    };
    if (spec.include_spatial) {
        Eigen::MatrixXd r = dense_icar(in.graph);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r);
        int rank = 0;
        for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) rank += es.eigenvalues()[i] > 1e-9 ? 1 : 0;
        lp += 0.5 * rank * std::log(tau.tau_upsilon) - 0.5 * tau.tau_upsilon * f.upsilon.dot(r * f.upsilon);
        lp += gamma(spec.hyperprior_upsilon, tau.tau_upsilon);
    }
    if (spec.include_exchangeable) {
        lp += 0.5 * static_cast<double>(D * J) * std::log(tau.tau_nu) - 0.5 * tau.tau_nu * f.nu.squaredNorm();
        lp += gamma(spec.hyperprior_nu, tau.tau_nu);
    }
    return lp;
}

LatentField random_field(const LatentModel& m, std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 0.5);
    Eigen::VectorXd x(m.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = z(rng);
    auto f = m.unpack(x);
    f.upsilon.array() -= f.upsilon.mean();
    return f;
}

}  // namespace

TEST_CASE("ICAR precision on a path and a 4-cycle") {
    auto q = build_icar_precision(fixtures::path(2), 1.0);
    Eigen::MatrixXd d(q);
    CHECK(d(0, 0) == 1.0);
    CHECK(d(0, 1) == -1.0);
    CHECK(d(1, 1) == 1.0);

    Eigen::MatrixXd c(build_icar_precision(fixtures::cycle(4), 1.0));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    const double want[] = {0.0, 2.0, 2.0, 4.0};
    for (int i = 0; i < 4; ++i) CHECK(std::abs(es.eigenvalues()[i] - want[i]) < 1e-10);

    Eigen::MatrixXd scaled(build_icar_precision(fixtures::cycle(4), 2.5));
    CHECK((scaled - 2.5 * c).norm() < 1e-14);
}

TEST_CASE("ICAR rows sum to zero and rank is D minus components") {
    auto g = fixtures::path(6);
    g.add_edge(0, 4);
    AdjacencyGraph two(7);
    for (std::size_t i = 0; i < 3; ++i) two.add_edge(i, i + 1);
    two.add_edge(4, 5);
    for (const auto* graph : {&g, &two}) {
        Eigen::MatrixXd r(build_icar_precision(*graph, 1.0));
        CHECK((r * Eigen::VectorXd::Ones(r.rows())).norm() < 1e-14);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r);
        int rank = 0;
        for (Eigen::Index i = 0; i < r.rows(); ++i) rank += es.eigenvalues()[i] > 1e-9 ? 1 : 0;
        CHECK(rank == static_cast<int>(graph->num_areas() - graph->num_components()));
        CHECK(es.eigenvalues().minCoeff() > -1e-12);
    }
}

TEST_CASE("log posterior matches a dense re-implementation") {
    auto in = small_instance(1);
    std::mt19937_64 rng(5);
    for (bool shared : {false, true}) {
        auto spec = ModelSpec::for_scenario(ScenarioId::S4);
        spec.shared_covariate_effects = shared;
        LatentModel m(spec, in.pop, in.x, in.graph);
        for (int rep = 0; rep < 3; ++rep) {
            auto f = random_field(m, rng);
            Hyperparameters tau{0.7 + rep, 3.0 - rep};
            double a = log_unnormalized_posterior(spec, f, tau, in.data, in.pop, in.x, in.graph);
            double b = naive_log_posterior(spec, f, tau, in);
            CHECK(std::abs(a - b) < 1e-10 * std::max(1.0, std::abs(b)));
        }
    }
}

TEST_CASE("with no observations the log posterior is the prior") {
    auto in = small_instance(2, false);
    auto spec = ModelSpec::for_scenario(ScenarioId::S4);
    LatentModel m(spec, in.pop, in.x, in.graph);
    std::mt19937_64 rng(6);
    auto f = random_field(m, rng);
    Hyperparameters tau{1.5, 2.0};
    const double lp = m.log_posterior(m.pack(f), tau, in.data);
    CHECK(std::isfinite(lp));
    CHECK(lp == doctest::Approx(naive_log_posterior(spec, f, tau, in)).epsilon(1e-12));
}

TEST_CASE("doubling tau_nu at nu = 0 changes only the normalizer and hyperprior") {
    auto in = small_instance(3);
    auto spec = ModelSpec::for_scenario(ScenarioId::S2);
    LatentModel m(spec, in.pop, in.x, in.graph);
    std::mt19937_64 rng(7);
    auto f = random_field(m, rng);
    f.nu.setZero();
    const double t = 1.7;
    const double a = m.log_posterior(m.pack(f), {1.0, t}, in.data);
    const double b = m.log_posterior(m.pack(f), {1.0, 2 * t}, in.data);
    const double cells = static_cast<double>(in.pop.num_cells());
    const double expected = 0.5 * cells * std::log(2.0) + spec.hyperprior_nu.log_density(2 * t) -
                            spec.hyperprior_nu.log_density(t);
    CHECK(std::abs((b - a) - expected) < 1e-12);
}

TEST_CASE("analytic gradient matches central differences at random points") {
    auto in = small_instance(4);
    auto spec = ModelSpec::for_scenario(ScenarioId::S4);
    LatentModel m(spec, in.pop, in.x, in.graph);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> t(0.3, 5.0);
    for (int rep = 0; rep < 10; ++rep) {
        Eigen::VectorXd x = m.pack(random_field(m, rng));
        Hyperparameters tau{t(rng), t(rng)};
        Eigen::VectorXd g = m.gradient(x, tau, in.data);
        Eigen::VectorXd fd(x.size());
        const double h = 1e-5;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            Eigen::VectorXd a = x, b = x;
            a[i] += h;
            b[i] -= h;
            fd[i] = (m.log_posterior(a, tau, in.data) - m.log_posterior(b, tau, in.data)) / (2 * h);
        }
        CHECK((g - fd).norm() / std::max(1.0, g.norm()) < 1e-5);
    }
}

TEST_CASE("Newton never decreases the objective and the mode is constrained") {
    auto in = small_instance(5);
    auto spec = ModelSpec::for_scenario(ScenarioId::S4);
    LatentModel m(spec, in.pop, in.x, in.graph);
    std::vector<double> trace;
    Eigen::VectorXd start = Eigen::VectorXd::Constant(m.size(), 0.3);
    auto g = fit_conditional(m, {2.0, 5.0}, in.data, start, {}, &trace);
    REQUIRE(trace.size() >= 2);
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] >= trace[i - 1]);
    auto f = m.unpack(g.mode);
    CHECK(std::abs(f.upsilon.sum()) < 1e-8);
    Eigen::VectorXd grad = m.gradient(g.mode, {2.0, 5.0}, in.data);
    // Projected gradient vanishes at the constrained mode.
    auto u = grad.segment(m.upsilon_offset(), 5);
    CHECK((u.array() - u.mean()).matrix().norm() < 1e-6);
    CHECK(grad.head(m.upsilon_offset()).norm() < 1e-6);
}

TEST_CASE("shifting upsilon by a constant leaves the constrained mode unchanged") {
    auto in = small_instance(6);
    auto spec = ModelSpec::for_scenario(ScenarioId::S4);
    LatentModel m(spec, in.pop, in.x, in.graph);
    Eigen::VectorXd start = Eigen::VectorXd::Zero(m.size());
    auto a = fit_conditional(m, {1.0, 4.0}, in.data, start);
    start.segment(m.upsilon_offset(), 5).array() += 5.0;
    auto b = fit_conditional(m, {1.0, 4.0}, in.data, start);
    CHECK((a.mode - b.mode).norm() < 1e-8);
}

TEST_CASE("conditional Gaussian matches a dense constrained oracle") {
    auto in = small_instance(7);
    auto spec = ModelSpec::for_scenario(ScenarioId::S4);
    LatentModel m(spec, in.pop, in.x, in.graph);
    const Hyperparameters tau{1.3, 6.0};
    auto g = fit_conditional(m, tau, in.data, Eigen::VectorXd::Zero(m.size()));

    // Dense Newton on the full vector with the constraint handled through
    // the KKT system.
    const auto n = m.size();
    const auto C = static_cast<Eigen::Index>(m.num_cells());
    Eigen::MatrixXd dmat = Eigen::MatrixXd::Zero(C, n);
    for (Eigen::Index c = 0; c < C; ++c) {
        for (const auto& t : m.design_row(static_cast<std::size_t>(c))) dmat(c, t.index) += t.value;
        dmat(c, m.nu_offset() + c) = 1.0;
    }
    Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(n);
    a.segment(m.upsilon_offset(), 5).setOnes();
    Eigen::MatrixXd prior = Eigen::MatrixXd::Zero(n, n);
    prior.topLeftCorner(m.shared_size(), m.shared_size()) = m.shared_prior_precision(tau);
    for (Eigen::Index c = 0; c < C; ++c) prior(m.nu_offset() + c, m.nu_offset() + c) = tau.tau_nu;

    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd h;
    for (int it = 0; it < 100; ++it) {
        Eigen::VectorXd theta = dmat * x;
        Eigen::VectorXd w(C), r(C);
        for (Eigen::Index c = 0; c < C; ++c) {
            double p = 1.0 / (1.0 + std::exp(-theta[c]));
            w[c] = static_cast<double>(in.data.n[static_cast<std::size_t>(c)]) * p * (1 - p);
            r[c] = static_cast<double>(in.data.y[static_cast<std::size_t>(c)]) -
                   static_cast<double>(in.data.n[static_cast<std::size_t>(c)]) * p;
        }
        h = prior + dmat.transpose() * w.asDiagonal() * dmat;
        Eigen::VectorXd grad = dmat.transpose() * r - prior * x;
        Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + 1, n + 1);
        kkt.topLeftCorner(n, n) = h;
        kkt.block(0, n, n, 1) = a.transpose();
        kkt.block(n, 0, 1, n) = a;
        Eigen::VectorXd rhs(n + 1);
        rhs << grad, -a.dot(x);
        Eigen::VectorXd step = kkt.fullPivLu().solve(rhs).head(n);
        x += step;
        if (step.norm() < 1e-12) break;
    }
    CHECK((x - g.mode).norm() < 1e-7);

    // Constrained covariance: restrict to the null space of a.
    Eigen::MatrixXd hi = h.inverse();
    Eigen::VectorXd hia = hi * a.transpose();
    Eigen::MatrixXd cov = hi - hia * hia.transpose() / a.dot(hia);
    for (Eigen::Index c = 0; c < C; ++c) {
        double v = dmat.row(c) * cov * dmat.row(c).transpose();
        CHECK(std::abs(v - g.logit_var[c]) < 1e-8 * std::max(1.0, v));
        CHECK(std::abs(dmat.row(c).dot(x) - g.logit_mean[c]) < 1e-7);
    }
}

TEST_CASE("posterior mean shrinks the raw proportion toward the fixed part") {
    auto in = small_instance(8);
    auto spec = ModelSpec::for_scenario(ScenarioId::S2);
    LatentModel m(spec, in.pop, in.x, in.graph);
    auto g = fit_conditional(m, {1.0, 3.0}, in.data, Eigen::VectorXd::Zero(m.size()));
    auto f = m.unpack(g.mode);
    for (std::size_t c = 0; c < m.num_cells(); ++c) {
        if (in.data.n[c] == 0) continue;
        const double raw = static_cast<double>(in.data.y[c]) / static_cast<double>(in.data.n[c]);
        const double prior = inv_logit(f.beta0 + f.beta1[static_cast<Eigen::Index>(in.pop.group_of(c))]);
        const double post = inv_logit(g.logit_mean[static_cast<Eigen::Index>(c)]);
        CHECK(post >= std::min(raw, prior) - 1e-12);
        CHECK(post <= std::max(raw, prior) + 1e-12);
    }
}

TEST_CASE("single-cell intercept model agrees with numerical integration") {
    Population pop({"A"}, {"g"}, {1000}, {300});
    CovariateMatrix x;
    x.values.resize(1, 0);
    AdjacencyGraph graph(1);
    ModelSpec spec;
    spec.include_covariates = spec.include_spatial = spec.include_exchangeable = false;
    auto post = fit_laplace(spec, fixtures::sample({100}, {30}), pop, x, graph);

    // Exact posterior of p under the same Normal(0, 10^2) prior on the logit.
    double z = 0, m1 = 0, m2 = 0;
    for (double b = -8.0; b <= 6.0; b += 1e-4) {
        const double w = std::exp(30 * b - 100 * std::log1p(std::exp(b)) - b * b / 200.0 + 61.0);
        const double p = 1 / (1 + std::exp(-b));
        z += w;
        m1 += w * p;
        m2 += w * p * p;
    }
    const double mean = m1 / z, sd = std::sqrt(m2 / z - mean * mean);
    CHECK(std::abs(post.cell_mean[0] - mean) < 0.01);
    CHECK(std::abs(std::sqrt(post.cell_var[0]) / sd - 1) < 0.10);
    CHECK(std::abs(mean - 0.302) < 0.01);
    CHECK(std::abs(sd - 0.0458) < 0.0458 * 0.1);
}

TEST_CASE("fit_laplace without data returns the prior predictive") {
    auto in = small_instance(9, false);
    auto spec = ModelSpec::for_scenario(ScenarioId::S2);
    auto post = fit_laplace(spec, in.data, in.pop, in.x, in.graph);
    for (std::size_t c = 0; c < in.pop.num_cells(); ++c) {
        CHECK(post.cell_mean[c] > 0.0);
        CHECK(post.cell_mean[c] < 1.0);
        CHECK(post.cell_var[c] > 0.1);
    }
}

TEST_CASE("fitted posterior invariants") {
    auto in = small_instance(10);
    auto post = fit_laplace(ModelSpec::for_scenario(ScenarioId::S4), in.data, in.pop, in.x, in.graph);
    CHECK(post.diagnostics.converged);
    double total = 0;
    for (const auto& h : post.hyper_grid) total += std::exp(h.log_weight);
    CHECK(std::abs(total - 1.0) < 1e-12);
    CHECK(post.hyper_grid.size() == 49);
    for (std::size_t c = 0; c < post.num_cells(); ++c) {
        CHECK(post.cell_var[c] > 0);
        CHECK(post.cell_mean[c] > 0);
        CHECK(post.cell_mean[c] < 1);
    }
    CHECK(std::abs(post.latent_mode.upsilon.sum()) < 1e-8);
    Eigen::MatrixXd q(post.latent_precision());
    CHECK((q - q.transpose()).norm() < 1e-12);
    Eigen::LLT<Eigen::MatrixXd> llt(q);
    CHECK(llt.info() == Eigen::Success);
    auto pred = predict_cells(post);
    CHECK(pred[2].mean == post.cell_mean[2]);
    CHECK(pred[2].var == post.cell_var[2]);
}

TEST_CASE("probability moments: point mass, symmetry and Monte Carlo") {
    std::vector<double> one{1.0}, zero{0.0};
    auto pm = probability_moments(one, zero, zero);
    CHECK(pm.mean == doctest::Approx(0.5));
    CHECK(std::abs(pm.var) < 1e-15);
    std::vector<double> var{2.0};
    CHECK(probability_moments(one, zero, var).mean == doctest::Approx(0.5).epsilon(1e-12));

    std::vector<double> w{0.3, 0.7}, mu{-1.2, 0.4}, v{0.5, 0.2};
    auto q = probability_moments(w, mu, v);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    double s = 0, ss = 0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
        int k = u(rng) < 0.3 ? 0 : 1;
        double p = inv_logit(mu[k] + std::sqrt(v[k]) * z(rng));
        s += p;
        ss += p * p;
    }
    double mean = s / n, vv = ss / n - mean * mean;
    CHECK(std::abs(q.mean - mean) < 1e-3);
    CHECK(std::abs(q.var - vv) < 1e-3);
}

TEST_CASE("Gauss-Hermite rule integrates polynomials exactly") {
    std::vector<double> x, w;
    gauss_hermite(15, x, w);
    double m0 = 0, m2 = 0, m4 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        m0 += w[i];
        m2 += w[i] * x[i] * x[i];
        m4 += w[i] * std::pow(x[i], 4);
    }
    const double rpi = std::sqrt(std::acos(-1.0));
    CHECK(m0 == doctest::Approx(rpi).epsilon(1e-12));
    CHECK(m2 == doctest::Approx(rpi / 2).epsilon(1e-12));
    CHECK(m4 == doctest::Approx(3 * rpi / 4).epsilon(1e-12));
}

TEST_CASE("latent draws reproduce the posterior and are seeded") {
    auto in = small_instance(12);
    auto post = fit_laplace(ModelSpec::for_scenario(ScenarioId::S4), in.data, in.pop, in.x, in.graph);
    const std::size_t C = in.pop.num_cells();
    const int draws = 10000;
    std::vector<double> s(C, 0.0), ss(C, 0.0);
    RandomStream rng(77);
    for (int i = 0; i < draws; ++i) {
        auto t = sample_latent(post, rng);
        for (std::size_t c = 0; c < C; ++c) {
            s[c] += t[c];
            ss[c] += t[c] * t[c];
        }
    }
    for (std::size_t c = 0; c < C; ++c) {
        const double mean = s[c] / draws;
        const double var = ss[c] / draws - mean * mean;
        const double se = std::sqrt(var / draws);
        CHECK(std::abs(mean - post.logit_mean[c]) < 3 * se);
        CHECK(var == doctest::Approx(post.logit_var[c]).epsilon(0.05));
    }
    RandomStream a(5), b(5);
    CHECK(sample_latent(post, a) == sample_latent(post, b));
}

TEST_CASE("latent draws collapse with overwhelming data") {
    std::vector<Count> N(6, 100000000), Y(6, 30000000);
    Population pop(fixtures::ids("A", 3), fixtures::ids("g", 2), N, Y);
    CovariateMatrix x;
    x.values.resize(3, 0);
    auto spec = ModelSpec::for_scenario(ScenarioId::S2);
    auto post = fit_laplace(spec, fixtures::sample({10000000, 10000000, 10000000, 10000000, 10000000, 10000000},
                                                   {3000000, 3100000, 2900000, 3000000, 3050000, 2950000}),
                            pop, x, fixtures::path(3));
    RandomStream rng(3);
    for (int i = 0; i < 20; ++i) {
        auto t = sample_latent(post, rng);
        for (std::size_t c = 0; c < 6; ++c) CHECK(std::abs(t[c] - post.logit_mean[c]) < 0.01);
    }
}

TEST_CASE("scenario specs follow the structure table") {
    CHECK_THROWS(ModelSpec::for_scenario(ScenarioId::S1));
    auto s2 = ModelSpec::for_scenario(ScenarioId::S2);
    CHECK_FALSE(s2.include_covariates);
    CHECK_FALSE(s2.include_spatial);
    CHECK(s2.include_exchangeable);
    CHECK(s2.hyperprior_nu.shape == 1.0);
    CHECK(s2.hyperprior_nu.rate == 0.1);
    auto s3 = ModelSpec::for_scenario(ScenarioId::S3);
    CHECK(s3.include_covariates);
    CHECK_FALSE(s3.include_spatial);
    auto s4 = ModelSpec::for_scenario(ScenarioId::S4);
    CHECK(s4.include_spatial);
    CHECK(s4.hyperprior_upsilon.shape == 0.5);
    CHECK(s4.hyperprior_nu.shape == 0.5);
    ModelSpec bad;
    bad.hyperprior_nu.rate = 0;
    CHECK_THROWS(bad.validate());
}
