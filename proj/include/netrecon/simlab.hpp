#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "netrecon/parallel.hpp"
#include "netrecon/uncertainty.hpp"

namespace netrecon {

// One draw of the simulation data-generating process:
//   delta_i, gamma_j, z_ij ~ N(0,1),  mu_ij = exp(delta_i + gamma_j + z_ij b),
//   X_ij ~ Exp(mean mu_ij).
struct SimInstance {
    int n = 0;
    double beta = 0.0;
    uint64_t seed = 0;
    VectorXd delta, gamma;  // node effects
    VectorXd ztilde;        // dyadic covariate per cell
    VectorXd mu_true, x;    // per cell
    NodeSet nodes;
    std::vector<Cell> cells;
};

inline SimInstance run_dgp(int n, double beta, uint64_t seed) {
    require(n >= 3, ErrorCategory::validation, "run_dgp: n must be at least 3");
    SimInstance inst;
    inst.n = n;
    inst.beta = beta;
    inst.seed = seed;
    inst.nodes = NodeSet::numbered(n);
    inst.cells = all_offdiagonal_cells(n);
    StreamRng root(seed);
    inst.delta.resize(n);
    inst.gamma.resize(n);
    for (int i = 0; i < n; ++i) {
        inst.delta[i] = root.stream(1, i).normal();
        inst.gamma[i] = root.stream(2, i).normal();
    }
    const int N = static_cast<int>(inst.cells.size());
    inst.ztilde.resize(N);
    inst.mu_true.resize(N);
    inst.x.resize(N);
    for (int q = 0; q < N; ++q) {
        inst.ztilde[q] = root.stream(3, q).normal();
        inst.mu_true[q] = std::exp(inst.delta[inst.cells[q].i] + inst.gamma[inst.cells[q].j] +
                                   beta * inst.ztilde[q]);
        inst.x[q] = root.stream(4, q).exponential(inst.mu_true[q]);
    }
    return inst;
}

inline ReducedProblem instance_problem(const SimInstance& inst) {
    RoutingMatrix routing = build_routing_matrix(inst.nodes, inst.cells);
    return reduce_problem(apply_margins(routing, FlowMatrix(inst.nodes, inst.cells, inst.x)));
}

inline DesignMatrices instance_design(const SimInstance& inst, const ReducedProblem& problem) {
    ModelSpec spec;
    spec.covariates.push_back({"z", CovariateKind::dyadic, Transform::identity, ""});
    CovariateTable tab;
    for (size_t q = 0; q < inst.cells.size(); ++q)
        tab.set_dyadic("z", inst.cells[q].i, inst.cells[q].j, inst.ztilde[q]);
    return build_design(problem, spec, tab);
}

struct SimConfigs {
    IpfpConfig ipfp;
    AugLagState auglag;
    int threads = 1;
};

// replicate-wise squared-error ratio; > 1 means the covariate fit wins
inline double rss_ratio(const VectorXd& x, const VectorXd& mu_me, const VectorXd& mu_reg) {
    const double num = (x - mu_me).squaredNorm();
    const double den = (x - mu_reg).squaredNorm();
    require(den > 0.0, ErrorCategory::validation, "rss_ratio: zero denominator");
    return num / den;
}

inline std::optional<double> rss_for_instance(const SimInstance& inst, const SimConfigs& cfg) {
    try {
        ReducedProblem problem = instance_problem(inst);
        FitResult me = fit_ipfp(problem, cfg.ipfp);
        DesignMatrices design = instance_design(inst, problem);
        FitResult reg = fit_constrained_ml(problem, design, cfg.auglag);
        if (!me.diagnostics.converged || !reg.diagnostics.converged) return std::nullopt;
        // reduction is the identity here (exponential draws are positive)
        return rss_ratio(inst.x, me.mu, reg.mu);
    } catch (const Error&) {
        return std::nullopt;
    }
}

struct RssTable {
    struct Row {
        double beta;
        int replicate;
        double rss;
    };
    struct Summary {
        double beta;
        double median = 0.0;
        double mean = 0.0;
        int replicates = 0;
        int failures = 0;
    };
    std::vector<Row> rows;
    std::vector<Summary> summaries;
};

inline double median_of(std::vector<double> v) {
    require(!v.empty(), ErrorCategory::validation, "median of empty set");
    std::sort(v.begin(), v.end());
    const size_t h = v.size() / 2;
    return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline RssTable rss_study(int n, const std::vector<double>& beta_grid, int S, uint64_t seed,
                          const SimConfigs& cfg = {}) {
    require(S >= 2, ErrorCategory::validation, "rss_study: S must be at least 2");
    RssTable table;
    StreamRng root(seed);
    for (size_t b = 0; b < beta_grid.size(); ++b) {
        std::vector<std::optional<double>> results(S);
        parallel_for(S, cfg.threads, [&](int s) {
            const uint64_t rep_seed = root.stream(b, static_cast<uint64_t>(s)).key();
            results[s] = rss_for_instance(run_dgp(n, beta_grid[b], rep_seed), cfg);
        });
        RssTable::Summary summary;
        summary.beta = beta_grid[b];
        std::vector<double> ok;
        for (int s = 0; s < S; ++s) {
            if (results[s]) {
                table.rows.push_back({beta_grid[b], s, *results[s]});
                ok.push_back(*results[s]);
            } else {
                ++summary.failures;
            }
        }
        require(!ok.empty(), ErrorCategory::solver, "rss_study: every replicate failed");
        summary.replicates = static_cast<int>(ok.size());
        summary.median = median_of(ok);
        summary.mean = 0.0;
        for (double v : ok) summary.mean += v;
        summary.mean /= static_cast<double>(ok.size());
        table.summaries.push_back(summary);
    }
    return table;
}

struct BiasTable {
    int n = 0;
    double beta = 0.0;
    Eigen::MatrixXd delta_reg, delta_me;      // S_ok x N normalized differences
    VectorXd median_delta_reg, median_delta_me;
    std::vector<char> degenerate_reg, degenerate_me;  // zero replicate variance
    int failures = 0;
};

// Normalized differences Delta_{s,q} = (estimate - truth) / replicate
// variance of the estimates, one matrix per estimator; zero-variance cells
// are flagged and their rows zeroed.
inline void normalize_bias(const VectorXd& mu_true, Eigen::MatrixXd& est, std::vector<char>& degenerate) {
    const int S = static_cast<int>(est.rows());
    const int N = static_cast<int>(est.cols());
    degenerate.assign(N, 0);
    for (int q = 0; q < N; ++q) {
        const double mean = est.col(q).mean();
        const double var = (est.col(q).array() - mean).square().sum() / S;
        if (!(var > 1e-300 * std::max(1.0, mean * mean))) {
            degenerate[q] = 1;
            est.col(q).setZero();
            continue;
        }
        est.col(q) = (est.col(q).array() - mu_true[q]) / var;
    }
}

inline BiasTable bias_from_fits(const VectorXd& mu_true, Eigen::MatrixXd mu_reg, Eigen::MatrixXd mu_me) {
    require(mu_reg.rows() == mu_me.rows() && mu_reg.cols() == mu_me.cols(), ErrorCategory::validation,
            "bias_from_fits: estimator matrices differ in shape");
    require(mu_reg.rows() >= 2, ErrorCategory::validation, "bias_from_fits: need at least two replicates");
    BiasTable out;
    normalize_bias(mu_true, mu_reg, out.degenerate_reg);
    normalize_bias(mu_true, mu_me, out.degenerate_me);
    out.delta_reg = std::move(mu_reg);
    out.delta_me = std::move(mu_me);
    const int N = static_cast<int>(out.delta_reg.cols());
    out.median_delta_reg.resize(N);
    out.median_delta_me.resize(N);
    for (int q = 0; q < N; ++q) {
        std::vector<double> a(out.delta_reg.col(q).data(), out.delta_reg.col(q).data() + out.delta_reg.rows());
        std::vector<double> b(out.delta_me.col(q).data(), out.delta_me.col(q).data() + out.delta_me.rows());
        out.median_delta_reg[q] = median_of(a);
        out.median_delta_me[q] = median_of(b);
    }
    return out;
}

// Effects and covariates drawn once and held fixed, flows redrawn S times,
// both estimators refit per draw.
inline BiasTable bias_study(int n, double beta, int S, uint64_t seed, const SimConfigs& cfg = {}) {
    require(S >= 10, ErrorCategory::validation, "bias_study: S must be at least 10");
    SimInstance base = run_dgp(n, beta, seed);
    const int N = static_cast<int>(base.cells.size());
    StreamRng root(seed);

    Eigen::MatrixXd mu_reg(S, N), mu_me(S, N);
    std::vector<char> ok(S, 0);
    parallel_for(S, cfg.threads, [&](int s) {
        SimInstance inst = base;
        inst.x = simulate_exponential_values(base.mu_true, root.stream(777, static_cast<uint64_t>(s)).key());
        try {
            ReducedProblem problem = instance_problem(inst);
            FitResult me = fit_ipfp(problem, cfg.ipfp);
            DesignMatrices design = instance_design(inst, problem);
            FitResult reg = fit_constrained_ml(problem, design, cfg.auglag);
            if (!me.diagnostics.converged || !reg.diagnostics.converged) return;
            mu_me.row(s) = me.mu.transpose();
            mu_reg.row(s) = reg.mu.transpose();
            ok[s] = 1;
        } catch (const Error&) {
        }
    });

    int good = 0;
    for (int s = 0; s < S; ++s) good += ok[s];
    require(good >= 2, ErrorCategory::solver, "bias_study: too many replicate failures");
    Eigen::MatrixXd reg_ok(good, N), me_ok(good, N);
    int row = 0;
    for (int s = 0; s < S; ++s) {
        if (!ok[s]) continue;
        reg_ok.row(row) = mu_reg.row(s);
        me_ok.row(row) = mu_me.row(s);
        ++row;
    }
    BiasTable out = bias_from_fits(base.mu_true, std::move(reg_ok), std::move(me_ok));
    out.n = n;
    out.beta = beta;
    out.failures = S - good;
    return out;
}

// ------------------------------------------------------------- sign tests --

// exact upper tail P(Bin(n, 1/2) >= k)
inline double binomial_tail_geq(int n, int k) {
    if (k <= 0) return 1.0;
    if (k > n) return 0.0;
    double tail = 0.0;
    for (int j = k; j <= n; ++j)
        tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(j + 1.0) - std::lgamma(n - j + 1.0) -
                         n * std::log(2.0));
    return std::min(1.0, tail);
}

// Reject "median <= threshold" in favor of "median > threshold" when
// significantly more than half the observations exceed the threshold.
inline bool sign_test_median_above(const std::vector<double>& xs, double threshold, double alpha) {
    int above = 0, informative = 0;
    for (double v : xs) {
        if (v == threshold) continue;
        ++informative;
        if (v > threshold) ++above;
    }
    if (informative == 0) return false;
    return binomial_tail_geq(informative, above) < alpha;
}

inline bool sign_test_median_below(const std::vector<double>& xs, double threshold, double alpha) {
    std::vector<double> neg(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) neg[i] = -xs[i];
    return sign_test_median_above(neg, -threshold, alpha);
}

// Paired one-sided sign test that indicator a exceeds indicator b more often
// than the reverse.
inline bool paired_sign_test(int a_wins, int b_wins, double alpha) {
    const int informative = a_wins + b_wins;
    if (informative == 0) return false;
    return binomial_tail_geq(informative, a_wins) < alpha;
}

}  // namespace netrecon
