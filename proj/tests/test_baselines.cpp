#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "netrecon/baselines.hpp"
#include "test_util.hpp"

using namespace netrecon;
using testutil::margins_from_sums;
using testutil::problem_from_sums;
using testutil::random_problem;

TEST(Gravity, ClosedFormValues) {
    ReducedProblem p = problem_from_sums({10, 5, 3}, {6, 8, 4});
    FitResult fit = gravity(p);
    FlowMatrix flows = predict(fit, p);
    EXPECT_NEAR(flows.value_at(0, 1), 10.0 * 8.0 / 18.0, 1e-12);
    EXPECT_NEAR(flows.value_at(0, 2), 10.0 * 4.0 / 18.0, 1e-12);
    EXPECT_GT(fit.diagnostics.residual, 0.0);  // diagonal excluded: margins not met exactly
}

TEST(Gravity, UniformMargins) {
    ReducedProblem p = problem_from_sums({4, 4, 4, 4}, {4, 4, 4, 4});
    FitResult fit = gravity(p);
    for (int q = 0; q < p.size(); ++q) EXPECT_NEAR(fit.mu[q], 1.0, 1e-12);  // r/n = 4/4
}

TEST(Gravity, DiagonalActiveMakesMarginsExact) {
    // with the diagonal unrestricted the gravity row sums reproduce the
    // margins exactly: sum_j x_i. x_.j / x.. = x_i.
    const std::vector<double> rows = {10, 5, 3}, cols = {6, 8, 4};
    const double total = 18.0;
    for (int i = 0; i < 3; ++i) {
        double rowsum = 0.0, colsum = 0.0;
        for (int j = 0; j < 3; ++j) {
            rowsum += rows[i] * cols[j] / total;
            colsum += rows[j] * cols[i] / total;
        }
        EXPECT_DOUBLE_EQ(rowsum, rows[i]);
        EXPECT_DOUBLE_EQ(colsum, cols[i]);
    }
}

TEST(Tomogravity, ResidualShrinksWithPenalty) {
    ReducedProblem p = problem_from_sums({10, 5, 3}, {6, 8, 4});
    double prev = std::numeric_limits<double>::infinity();
    for (double psi : {1.0, 0.1, 0.01}) {
        TomogravityConfig cfg;
        cfg.psi = psi;
        FitResult fit = tomogravity(p, cfg);
        EXPECT_LE(fit.diagnostics.residual, prev + 1e-10) << "psi " << psi;
        prev = fit.diagnostics.residual;
    }
}

TEST(Tomogravity, BeatsCandidatePointsAndDescends) {
    ReducedProblem p = problem_from_sums({10, 5, 3}, {6, 8, 4});
    TomogravityConfig cfg;
    FitResult fit = tomogravity(p, cfg);
    const double at_fit = tomogravity_objective(p, cfg.psi, fit.mu);
    EXPECT_LE(at_fit, tomogravity_objective(p, cfg.psi, gravity(p).mu) + 1e-9);
    EXPECT_LE(at_fit, tomogravity_objective(p, cfg.psi, fit_ipfp(p).mu) + 1e-9);
    const auto& tr = fit.diagnostics.objective_trace;
    for (size_t k = 1; k < tr.size(); ++k) EXPECT_LE(tr[k], tr[k - 1] + 1e-12);
}

TEST(Tomogravity, NonNegativeAndFiniteOnRandomInstances) {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        ReducedProblem p = random_problem(4 + static_cast<int>(seed % 3), seed, 2.0);
        FitResult fit = tomogravity(p);
        EXPECT_TRUE((fit.mu.array() >= 0).all());
        EXPECT_TRUE(fit.mu.allFinite());
    }
}

TEST(NnLasso, ScalarCoordinateToy) {
    // minimize (mu-3)^2 + tau mu over mu >= 0 with tau = 2: solution 2
    const double mu0 = 0.7;
    const double grad_ls = 2.0 * (mu0 - 3.0);
    EXPECT_DOUBLE_EQ(lasso_coordinate_min(mu0, grad_ls, 2.0, 2.0), 2.0);
    // tau large enough drives it to zero
    EXPECT_DOUBLE_EQ(lasso_coordinate_min(mu0, grad_ls, 2.0, 10.0), 0.0);
}

TEST(NnLasso, LargeTauGivesZeroSolution) {
    ReducedProblem p = problem_from_sums({10, 5, 3}, {6, 8, 4});
    double atyinf = 0.0;
    for (int q = 0; q < p.size(); ++q)
        atyinf = std::max(atyinf, p.y()[p.sender_of(q)] + p.y()[p.receiver_of(q)]);
    LassoConfig cfg;
    cfg.tau = 2.0 * atyinf;
    FitResult fit = nn_lasso(p, cfg);
    EXPECT_DOUBLE_EQ(fit.mu.lpNorm<Eigen::Infinity>(), 0.0);
    EXPECT_LE(fit.diagnostics.extras.at("kkt_residual"), 1e-9);
}

TEST(NnLasso, TauZeroMatchesProjectedGradientOracle) {
    // margins that cannot be met exactly, so the nonnegativity constraint
    // binds and the least-squares solution is unique
    ReducedProblem p = problem_from_sums({10, 1, 1}, {4, 4, 4});
    LassoConfig cfg;
    FitResult fit = nn_lasso(p, cfg);

    // oracle: projected gradient on ||A mu - y||^2 with a fixed small step
    VectorXd mu = VectorXd::Zero(p.size());
    for (int it = 0; it < 200000; ++it) {
        VectorXd r = p.margins_of(mu) - p.y();
        VectorXd grad(p.size());
        for (int q = 0; q < p.size(); ++q) grad[q] = 2.0 * (r[p.sender_of(q)] + r[p.receiver_of(q)]);
        mu = (mu - 0.05 * grad).cwiseMax(0.0);
    }
    EXPECT_LT((fit.mu - mu).lpNorm<Eigen::Infinity>(), 1e-5 * p.scale());
}

TEST(NnLasso, KktCertificateOnRandomInstances) {
    for (uint64_t seed = 0; seed < 15; ++seed) {
        ReducedProblem p = random_problem(5, seed, 1.0);
        LassoConfig cfg;
        cfg.tau = seed % 3 == 0 ? 0.0 : 0.5 * (seed % 5);
        FitResult fit = nn_lasso(p, cfg);
        ASSERT_TRUE(fit.diagnostics.converged);
        EXPECT_LE(nn_lasso_kkt_residual(p, cfg.tau, fit.mu), 1e-6);
        const auto& tr = fit.diagnostics.objective_trace;
        for (size_t k = 1; k < tr.size(); ++k) EXPECT_LE(tr[k], tr[k - 1] + 1e-9);
    }
}

TEST(Ecological, PostprocessClipAndRenormalize) {
    VectorXd raw(3);
    raw << 0.6, 0.5, -0.1;
    VectorXd post = postprocess_shares(raw);
    EXPECT_NEAR(post[0], 0.6 / 1.1, 1e-12);
    EXPECT_NEAR(post[1], 0.5 / 1.1, 1e-12);
    EXPECT_DOUBLE_EQ(post[2], 0.0);
    EXPECT_NEAR(post.sum(), 1.0, 1e-12);
}

TEST(Ecological, ExactRecoveryOnNoiselessConstantShares) {
    const int n = 4, T = 12;
    StreamRng rng(88);
    MatrixXd truth = MatrixXd::Zero(n, n);  // column-stochastic, zero diagonal
    for (int j = 0; j < n; ++j) {
        double sum = 0.0;
        for (int i = 0; i < n; ++i)
            if (i != j) {
                truth(i, j) = 0.2 + rng.stream(i * n + j).next_open01();
                sum += truth(i, j);
            }
        for (int i = 0; i < n; ++i) truth(i, j) /= sum;
    }
    std::vector<MarginSystem> series;
    for (int t = 0; t < T; ++t) {
        std::vector<double> cols(n), rows(n, 0.0);
        for (int j = 0; j < n; ++j) cols[j] = 1.0 + 10.0 * rng.stream(1000 + t * n + j).next_open01();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) rows[i] += truth(i, j) * cols[j];
        series.push_back(margins_from_sums(rows, cols));
    }
    EcologicalResult res = ecological_regression(series, ShareDirection::columns);
    EXPECT_FALSE(res.underidentified);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) EXPECT_NEAR(res.shares.raw_shares(i, j), truth(i, j), 1e-8);
    // post-processed shares keep exact unit column sums
    for (int j = 0; j < n; ++j) {
        EXPECT_NEAR(res.shares.shares.col(j).sum(), 1.0, 1e-12);
        EXPECT_TRUE((res.shares.shares.col(j).array() >= 0).all());
    }
    // predictions follow the accounting identity
    for (int t = 0; t < T; ++t) {
        const FlowMatrix& pred = res.predictions[t];
        for (int q = 0; q < pred.size(); ++q) {
            const Cell& c = pred.cells()[q];
            EXPECT_NEAR(pred.values()[q], res.shares.shares(c.i, c.j) * series[t].y()[n + c.j], 1e-10);
        }
    }
}

TEST(Ecological, DirectionsDisagreeOnAsymmetricData) {
    const int n = 3, T = 9;
    StreamRng rng(7);
    std::vector<MarginSystem> series;
    for (int t = 0; t < T; ++t) {
        std::vector<double> rows(n), cols(n);
        double sr = 0.0;
        for (int i = 0; i < n; ++i) {
            rows[i] = 1.0 + 5.0 * rng.stream(t * 10 + i).next_open01();
            sr += rows[i];
        }
        double sc = 0.0;
        for (int j = 0; j < n - 1; ++j) {
            cols[j] = 1.0 + 5.0 * rng.stream(t * 10 + 5 + j).next_open01();
            sc += cols[j];
        }
        cols[n - 1] = sr - sc;
        if (cols[n - 1] <= 0.1) cols[n - 1] = 0.1, cols[0] += sr - sc - 0.1;
        series.push_back(margins_from_sums(rows, cols));
    }
    EcologicalResult bycol = ecological_regression(series, ShareDirection::columns);
    EcologicalResult byrow = ecological_regression(series, ShareDirection::rows);
    double diff = 0.0;
    for (int q = 0; q < bycol.predictions[0].size(); ++q)
        diff = std::max(diff, std::abs(bycol.predictions[0].values()[q] - byrow.predictions[0].values()[q]));
    EXPECT_GT(diff, 1e-3);
}

TEST(Ecological, UnderidentifiedFlagAndMinimumPeriods) {
    std::vector<MarginSystem> series = {margins_from_sums({2, 2, 2}, {2, 2, 2}),
                                        margins_from_sums({3, 2, 1}, {2, 2, 2})};
    EcologicalResult res = ecological_regression(series, ShareDirection::columns);
    EXPECT_TRUE(res.underidentified);  // T=2 < n=3
    EXPECT_THROW(ecological_regression({margins_from_sums({2, 2}, {2, 2})}, ShareDirection::columns), Error);
}

TEST(CalibrateDensity, ErdosAndFitness) {
    ReducedProblem p = problem_from_sums({4, 4, 4, 4}, {4, 4, 4, 4});
    HierarchicalConfig cfg;
    cfg.model = HierarchicalConfig::Model::erdos;
    cfg.target_density = 0.3;
    EXPECT_DOUBLE_EQ(calibrate_density(cfg, p).p, 0.3);

    cfg.model = HierarchicalConfig::Model::fitness;
    HierarchicalConfig fit = calibrate_density(cfg, p);
    // all z equal log(8): alpha = logit(0.3) - 2 log 8
    EXPECT_NEAR(fit.alpha, std::log(0.3 / 0.7) - 2.0 * std::log(8.0), 1e-9);
}

TEST(CalibrateDensity, BisectionMatchesGridOracle) {
    ReducedProblem p = problem_from_sums({10, 2, 5, 1, 7}, {3, 9, 4, 6, 3});
    HierarchicalConfig cfg;
    cfg.model = HierarchicalConfig::Model::fitness;
    cfg.target_density = 0.4;
    HierarchicalConfig cal = calibrate_density(cfg, p);

    const VectorXd z = fitness_scores(p);
    auto mean_density = [&](double alpha) {
        double s = 0.0;
        for (int q = 0; q < p.size(); ++q)
            s += 1.0 / (1.0 + std::exp(-alpha - z[p.cells()[q].i] - z[p.cells()[q].j]));
        return s / p.size();
    };
    // iteratively refined grid search
    double lo = -50, hi = 50;
    for (int pass = 0; pass < 8; ++pass) {
        double best = lo, bestgap = std::numeric_limits<double>::infinity();
        for (int k = 0; k <= 1000; ++k) {
            const double a = lo + (hi - lo) * k / 1000.0;
            const double gap = std::abs(mean_density(a) - 0.4);
            if (gap < bestgap) {
                bestgap = gap;
                best = a;
            }
        }
        const double width = (hi - lo) / 1000.0;
        lo = best - 2 * width;
        hi = best + 2 * width;
    }
    EXPECT_NEAR(cal.alpha, 0.5 * (lo + hi), 1e-8);
    EXPECT_NEAR(mean_density(cal.alpha), 0.4, 1e-10);
}

TEST(CalibrateDensity, UnreachableDensityFails) {
    ReducedProblem p = problem_from_sums({4, 4, 4}, {4, 4, 4});
    HierarchicalConfig cfg;
    cfg.model = HierarchicalConfig::Model::fitness;
    cfg.target_density = 1.0;  // logistic never reaches 1
    EXPECT_THROW(calibrate_density(cfg, p), Error);
}

TEST(Hierarchical, FullSupportEqualsIpfp) {
    ReducedProblem p = problem_from_sums({10, 5, 3}, {6, 8, 4});
    HierarchicalConfig cfg;
    cfg.model = HierarchicalConfig::Model::erdos;
    cfg.target_density = 1.0;
    cfg.S = 10;
    cfg.seed = 5;
    cfg = calibrate_density(cfg, p);
    FitResult fit = hierarchical_sample(p, cfg);
    FitResult me = fit_ipfp(p, cfg.repair);
    EXPECT_LT((fit.mu - me.mu).lpNorm<Eigen::Infinity>(), 1e-8 * p.scale());
    EXPECT_DOUBLE_EQ(fit.diagnostics.extras.at("realized_density"), 1.0);
}

TEST(Hierarchical, RealizedDensityNearTarget) {
    std::vector<double> rows(10, 10.0), cols(10, 10.0);
    rows[0] = 12.0; rows[9] = 8.0; cols[3] = 11.0; cols[4] = 9.0;
    ReducedProblem p = problem_from_sums(rows, cols);
    HierarchicalConfig cfg;
    cfg.model = HierarchicalConfig::Model::erdos;
    cfg.target_density = 0.7;
    cfg.S = 500;
    cfg.seed = 12;
    cfg = calibrate_density(cfg, p);
    FitResult fit = hierarchical_sample(p, cfg);
    EXPECT_NEAR(fit.diagnostics.extras.at("realized_density"), 0.7, 0.02);
    EXPECT_LE(fit.diagnostics.residual, 10 * cfg.repair.tol * p.scale());
    EXPECT_TRUE((fit.mu.array() >= 0).all());
}

TEST(Hierarchical, DeterministicUnderSeed) {
    ReducedProblem p = problem_from_sums({10, 9, 11, 10, 10}, {10, 10, 10, 10, 10});
    HierarchicalConfig cfg;
    cfg.model = HierarchicalConfig::Model::fitness;
    cfg.target_density = 0.9;
    cfg.S = 50;
    cfg.seed = 3;
    cfg = calibrate_density(cfg, p);
    FitResult a = hierarchical_sample(p, cfg);
    FitResult b = hierarchical_sample(p, cfg);
    EXPECT_EQ(a.mu, b.mu);
}

TEST(Hierarchical, TooSparseSupportIsInvalid) {
    ReducedProblem p = problem_from_sums({10, 5, 3}, {6, 8, 4});
    HierarchicalConfig cfg;
    cfg.model = HierarchicalConfig::Model::erdos;
    cfg.target_density = 0.05;
    cfg.S = 40;
    cfg.seed = 1;
    cfg = calibrate_density(cfg, p);
    try {
        hierarchical_sample(p, cfg);
        FAIL() << "expected invalid-sample error";
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), ErrorCategory::solver);
    }
}
