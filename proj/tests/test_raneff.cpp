#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "netrecon/raneff.hpp"
#include "netrecon/rng.hpp"
#include "test_util.hpp"

using namespace netrecon;
using testutil::problem_from_sums;
using testutil::random_problem;

namespace {

DesignMatrices plain_design(const ReducedProblem& p) { return build_design(p, ModelSpec{}, CovariateTable{}); }

VectorXd random_theta(const DesignMatrices& d, uint64_t seed, double sd = 0.5) {
    StreamRng rng(seed);
    VectorXd t(d.cols());
    for (int k = 0; k < d.cols(); ++k) t[k] = sd * rng.stream(k).normal();
    return t;
}

}  // namespace

TEST(PenalizedQ, HugeVarianceRecoversQ) {
    ReducedProblem p = random_problem(4, 1);
    DesignMatrices d = plain_design(p);
    VectorXd theta = random_theta(d, 2), theta0 = random_theta(d, 3);
    VarianceComponents vt{1e12, 1e12, 0.0, false};
    PenEval pe = penalized_q(theta, theta0, vt, d);
    QEval q = q_function(theta, theta0, d.Z);
    EXPECT_NEAR(pe.value, q.value, 1e-9);
}

TEST(PenalizedQ, ZeroEffectsHaveZeroPenalty) {
    ReducedProblem p = random_problem(4, 5);
    ModelSpec spec;
    spec.covariates.push_back({"z", CovariateKind::dyadic, Transform::identity, ""});
    CovariateTable tab;
    StreamRng rng(9);
    for (int q = 0; q < p.size(); ++q) tab.set_dyadic("z", p.cells()[q].i, p.cells()[q].j, rng.stream(q).normal());
    DesignMatrices d = build_design(p, spec, tab);
    VectorXd theta = VectorXd::Zero(d.cols());
    theta[d.cols() - 1] = 1.3;  // beta only
    VectorXd theta0 = random_theta(d, 4);
    VarianceComponents vt{0.7, 2.0, 0.4, false};
    PenEval pe = penalized_q(theta, theta0, vt, d);
    EXPECT_DOUBLE_EQ(pe.value, q_function(theta, theta0, d.Z).value);
}

TEST(PenalizedQ, GradientMatchesFiniteDifferences) {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        ReducedProblem p = random_problem(4, seed);
        DesignMatrices d = plain_design(p);
        VectorXd theta = random_theta(d, seed + 10), theta0 = random_theta(d, seed + 20);
        VarianceComponents vt{0.8, 1.5, -0.3, false};
        PenEval pe = penalized_q(theta, theta0, vt, d);
        VectorXd fd(d.cols());
        for (int k = 0; k < d.cols(); ++k) {
            const double h = 1e-6;
            VectorXd up = theta, dn = theta;
            up[k] += h;
            dn[k] -= h;
            fd[k] = (penalized_q(up, theta0, vt, d).value - penalized_q(dn, theta0, vt, d).value) / (2 * h);
        }
        const double scale = std::max(1.0, fd.lpNorm<Eigen::Infinity>());
        EXPECT_LT((pe.grad - fd).lpNorm<Eigen::Infinity>() / scale, 1e-6);
    }
}

TEST(PenalizedQ, SingularSigmaIsRidgedAndFlagged) {
    ReducedProblem p = random_problem(3, 2);
    DesignMatrices d = plain_design(p);
    VarianceComponents vt{0.0, 0.0, 0.0, false};
    PenEval pe = penalized_q(random_theta(d, 1), random_theta(d, 2), vt, d);
    EXPECT_TRUE(pe.ridged);
    EXPECT_TRUE(std::isfinite(pe.value));
}

TEST(RemlLoglik, IdentityCovarianceFixture) {
    // vartheta = 0: V = I, log|V| = 0, so l_R = -0.5 ||ytilde||^2 with no covariates
    ReducedProblem p = problem_from_sums({2, 2, 2}, {2, 2, 2});
    DesignMatrices d = plain_design(p);
    StreamRng rng(3);
    VectorXd ytilde(p.size());
    for (int q = 0; q < p.size(); ++q) ytilde[q] = rng.stream(q).normal();
    VarianceComponents zero{0.0, 0.0, 0.0, false};
    EXPECT_NEAR(reml_loglik(zero, ytilde, d), -0.5 * ytilde.squaredNorm(), 1e-10);
}

TEST(RemlLoglik, DiagonalDeterminantFixture) {
    // N=2, U=I2 (one node with both roles), unit variances, rho=0: log|V| = 2 log 2
    DesignMatrices d;
    d.n = 2;
    d.n_indicator = 2;
    d.kept_rows = {0, 2};  // node 0 as sender, node 0 as receiver
    d.col_kept_row = {0, 1};
    d.Z = MatrixXd::Identity(2, 2);
    d.ztilde_mean = VectorXd::Zero(0);
    d.ztilde_scale = VectorXd::Zero(0);
    VarianceComponents vt{1.0, 1.0, 0.0, false};
    const VectorXd zero = VectorXd::Zero(2);
    EXPECT_NEAR(reml_loglik(vt, zero, d), -0.5 * 2.0 * std::log(2.0), 1e-12);
}

TEST(RemlLoglik, WoodburyMatchesDenseEvaluation) {
    ReducedProblem p = random_problem(4, 8);
    ModelSpec spec;
    spec.covariates.push_back({"z", CovariateKind::dyadic, Transform::identity, ""});
    CovariateTable tab;
    StreamRng rng(13);
    for (int q = 0; q < p.size(); ++q) tab.set_dyadic("z", p.cells()[q].i, p.cells()[q].j, rng.stream(q).normal());
    DesignMatrices d = build_design(p, spec, tab);
    VectorXd ytilde(p.size());
    for (int q = 0; q < p.size(); ++q) ytilde[q] = rng.stream(500 + q).normal();
    VarianceComponents vt{0.9, 1.7, 0.5, false};

    // dense oracle
    const MatrixXd U = d.indicator_block();
    const MatrixXd V = MatrixXd::Identity(p.size(), p.size()) + U * detail::sigma_matrix(vt, d) * U.transpose();
    Eigen::LLT<MatrixXd> llt(V);
    const MatrixXd ztilde = d.ztilde();
    const MatrixXd vz = llt.solve(ztilde);
    const MatrixXd gls = ztilde.transpose() * vz;
    const VectorXd beta = gls.ldlt().solve(vz.transpose() * ytilde);
    const VectorXd r = ytilde - ztilde * beta;
    double logdet_v = 0.0;
    for (int i = 0; i < V.rows(); ++i) logdet_v += 2.0 * std::log(llt.matrixL()(i, i));
    const double dense = -0.5 * logdet_v - 0.5 * std::log(gls.determinant()) - 0.5 * r.dot(llt.solve(r));

    EXPECT_NEAR(reml_loglik(vt, ytilde, d), dense, 1e-8 * (1.0 + std::abs(dense)));
}

TEST(RemlVariance, MonteCarloRecovery) {
    // simulate ytilde = U b + eps with known components; medians over 50
    // replications land within 50% of the truth
    const int n = 15;
    std::vector<double> rows(n, 2.0), cols(n, 2.0);
    ReducedProblem p = problem_from_sums(rows, cols);
    DesignMatrices d = plain_design(p);
    const double true_s2d = 1.0, true_s2g = 2.0, true_sdg = 0.6;
    std::vector<double> est_d, est_g, est_dg;
    for (uint64_t rep = 0; rep < 50; ++rep) {
        StreamRng rng(9000 + rep);
        VectorXd b(d.n_indicator);
        const double a11 = std::sqrt(true_s2d);
        const double a21 = true_sdg / a11;
        const double a22 = std::sqrt(true_s2g - a21 * a21);
        for (int node = 0; node < n; ++node) {
            const double z1 = rng.stream(2 * node).normal();
            const double z2 = rng.stream(2 * node + 1).normal();
            b[node] = a11 * z1;               // sender columns come first
            b[n + node] = a21 * z1 + a22 * z2;
        }
        VectorXd ytilde = d.indicator_block() * b;
        for (int q = 0; q < p.size(); ++q) ytilde[q] += rng.stream(1000 + q).normal();
        VarianceComponents vt = reml_maximize(ytilde, d);
        est_d.push_back(vt.sigma2_delta);
        est_g.push_back(vt.sigma2_gamma);
        est_dg.push_back(vt.sigma_dg);
    }
    auto median = [](std::vector<double> v) {
        std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
        return v[v.size() / 2];
    };
    EXPECT_NEAR(median(est_d), true_s2d, 0.5 * true_s2d);
    EXPECT_NEAR(median(est_g), true_s2g, 0.5 * true_s2g);
    EXPECT_NEAR(median(est_dg), true_sdg, 0.5 * true_sdg);
}

TEST(FitRandomEffects, VanishingPenaltyMatchesConstrainedMl) {
    for (uint64_t seed = 0; seed < 4; ++seed) {
        ReducedProblem p = random_problem(5, seed, 2.0);
        DesignMatrices d = plain_design(p);
        FitResult ml = fit_constrained_ml(p, d);
        FitResult pen = fit_penalized(p, d, VarianceComponents{1e6, 1e6, 0.0, false});
        ASSERT_TRUE(pen.diagnostics.converged);
        const double rel = (pen.mu - ml.mu).lpNorm<Eigen::Infinity>() / ml.mu.lpNorm<Eigen::Infinity>();
        EXPECT_LT(rel, 1e-3) << "seed " << seed;
    }
}

TEST(FitRandomEffects, SymmetricMarginsGiveUnitMeans) {
    ReducedProblem p = problem_from_sums({2, 2, 2}, {2, 2, 2});
    DesignMatrices d = plain_design(p);
    AugLagState cfg;
    cfg.outer_tol = 1e-11;
    FitResult fit = fit_random_effects(p, d, cfg);
    ASSERT_TRUE(fit.diagnostics.converged);
    for (int q = 0; q < 6; ++q) EXPECT_NEAR(fit.mu[q], 1.0, 1e-8);
}

TEST(FitRandomEffects, NoCovariatePredictionsMatchFixedEffects) {
    for (uint64_t seed = 0; seed < 4; ++seed) {
        ReducedProblem p = random_problem(5, 100 + seed, 3.0);
        DesignMatrices d = plain_design(p);
        FitResult ml = fit_constrained_ml(p, d);
        FitResult re = fit_random_effects(p, d);
        ASSERT_TRUE(re.diagnostics.converged) << "seed " << seed;
        const double rel = (re.mu - ml.mu).lpNorm<Eigen::Infinity>() / ml.mu.lpNorm<Eigen::Infinity>();
        EXPECT_LT(rel, 1e-3) << "seed " << seed;
        EXPECT_LE(p.residual_inf(re.mu), 1e-6 * p.scale());
        ASSERT_TRUE(re.vartheta.has_value());
        EXPECT_TRUE(re.vartheta->psd());
    }
}

TEST(FitRandomEffects, RemlStepNeverDeterioratesItsObjective) {
    ReducedProblem p = random_problem(6, 77, 2.0);
    DesignMatrices d = plain_design(p);
    FitResult re = fit_random_effects(p, d);
    ASSERT_TRUE(re.diagnostics.converged);
    EXPECT_GE(re.diagnostics.extras.at("reml_monotone_slack"), -1e-10);
}

TEST(FitRandomEffects, ShrinkagePathOnCovariateOnlyMargins) {
    // margins generated by a pure dyadic-covariate model, so the feasible set
    // contains a point with delta = gamma = 0; shrinking the variances drives
    // the node effects toward it monotonically
    const int n = 5;
    NodeSet nodes = NodeSet::numbered(n);
    std::vector<Cell> cells = all_offdiagonal_cells(n);
    StreamRng rng(4242);
    CovariateTable tab;
    VectorXd z(cells.size());
    for (int q = 0; q < static_cast<int>(cells.size()); ++q) z[q] = rng.stream(q).normal();
    z.array() -= z.mean();
    z /= std::sqrt(z.squaredNorm() / z.size());  // standardized, so the design column equals z itself
    VectorXd mu(cells.size());
    for (int q = 0; q < static_cast<int>(cells.size()); ++q) {
        tab.set_dyadic("z", cells[q].i, cells[q].j, z[q]);
        mu[q] = std::exp(0.8 * z[q]);
    }
    RoutingMatrix routing = build_routing_matrix(nodes, cells);
    ReducedProblem p = reduce_problem(apply_margins(routing, FlowMatrix(nodes, cells, mu)));
    ModelSpec spec;
    spec.covariates.push_back({"z", CovariateKind::dyadic, Transform::identity, ""});
    DesignMatrices d = build_design(p, spec, tab);

    double prev = std::numeric_limits<double>::infinity();
    for (double s2 : {100.0, 1.0, 1e-2, 1e-4}) {
        FitResult fit = fit_penalized(p, d, VarianceComponents{s2, s2, 0.0, false});
        ASSERT_TRUE(fit.diagnostics.converged);
        VectorXd effects(d.n_indicator);
        effects = fit.packed_theta->head(d.n_indicator);
        const double norm = effects.lpNorm<Eigen::Infinity>();
        EXPECT_LT(norm, prev + 1e-7);
        prev = norm;
    }
    EXPECT_LT(prev, 1e-2);
}

TEST(FitRandomEffects, VarianceComponentsSwapUnderTransposition) {
    ReducedProblem p = random_problem(8, 321, 2.0);
    // transpose: swap row/column margins
    const int m = p.rows();
    ASSERT_EQ(m, 16);
    VectorXd y = p.y();
    std::vector<double> rows(8), cols(8);
    for (int i = 0; i < 8; ++i) {
        rows[i] = y[i];
        cols[i] = y[8 + i];
    }
    ReducedProblem pt = problem_from_sums(cols, rows);

    DesignMatrices d = build_design(p, ModelSpec{}, CovariateTable{});
    DesignMatrices dt = build_design(pt, ModelSpec{}, CovariateTable{});
    FitResult a = fit_random_effects(p, d);
    FitResult b = fit_random_effects(pt, dt);
    ASSERT_TRUE(a.vartheta && b.vartheta);
    const double scale = std::max({a.vartheta->sigma2_delta, a.vartheta->sigma2_gamma, 1e-8});
    EXPECT_NEAR(a.vartheta->sigma2_delta, b.vartheta->sigma2_gamma, 1e-3 * scale);
    EXPECT_NEAR(a.vartheta->sigma2_gamma, b.vartheta->sigma2_delta, 1e-3 * scale);
    EXPECT_NEAR(a.vartheta->sigma_dg, b.vartheta->sigma_dg, 1e-3 * scale);
}
