#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "netrecon/parallel.hpp"
#include "netrecon/raneff.hpp"
#include "netrecon/rng.hpp"

namespace netrecon {

// Independent exponential draws with the given cell means, keyed by
// (seed, cell index) so replay and concurrent generation agree bit for bit.
inline VectorXd simulate_exponential_values(const VectorXd& mu, uint64_t seed) {
    VectorXd x(mu.size());
    StreamRng root(seed);
    for (Eigen::Index q = 0; q < mu.size(); ++q) {
        require(mu[q] > 0.0, ErrorCategory::validation, "simulate_exponential: nonpositive mean");
        x[q] = root.stream(q).exponential(mu[q]);
    }
    return x;
}

inline FlowMatrix simulate_exponential(const FlowMatrix& mu, uint64_t seed) {
    return mu.with_values(simulate_exponential_values(mu.values(), seed));
}

enum class EstimatorTag { ipfp, regression, raneff };

inline const char* estimator_name(EstimatorTag tag) {
    switch (tag) {
        case EstimatorTag::ipfp: return "ipfp";
        case EstimatorTag::regression: return "regression";
        case EstimatorTag::raneff: return "raneff";
    }
    return "?";
}

struct BootstrapConfig {
    int B = 100;
    uint64_t seed = 0;
    EstimatorTag estimator = EstimatorTag::ipfp;
    IpfpConfig ipfp;
    AugLagState auglag;
    int threads = 1;
    double max_failure_share = 0.2;
};

struct BootstrapResult {
    int B = 0;                           // successful replicates (rows below)
    int requested_B = 0;
    Eigen::MatrixXd mu_star;             // B x N refit means
    Eigen::MatrixXd x_star;              // B x N simulated flows
    Eigen::MatrixXd e_star;              // B x N prediction errors x* - mu*
    Eigen::MatrixXd y_star;              // B x m replicate margins
    uint64_t seed = 0;
    std::vector<int> failed_replicates;  // replicate indices whose refit failed
};

inline FitResult refit_for_tag(EstimatorTag tag, const ReducedProblem& problem, const DesignMatrices& design,
                               const BootstrapConfig& cfg) {
    switch (tag) {
        case EstimatorTag::ipfp: return fit_ipfp(problem, cfg.ipfp);
        case EstimatorTag::regression: return fit_constrained_ml(problem, design, cfg.auglag);
        case EstimatorTag::raneff: return fit_random_effects(problem, design, cfg.auglag);
    }
    fail(ErrorCategory::validation, "unknown estimator tag");
}

// Parametric bootstrap: draw X* from the fitted exponential model, rebuild
// the margins, re-run the same estimator, and keep the replicate means and
// prediction errors.  Failed refits are excluded and counted; more than
// max_failure_share of them invalidates the bootstrap.
inline BootstrapResult bootstrap(const FitResult& fit, const ReducedProblem& problem,
                                 const DesignMatrices& design, const BootstrapConfig& cfg) {
    require(cfg.B >= 2, ErrorCategory::validation, "bootstrap: B must be at least 2");
    require(fit.mu.size() == problem.size(), ErrorCategory::validation, "bootstrap: fit/problem mismatch");
    require((fit.mu.array() > 0.0).all(), ErrorCategory::validation, "bootstrap: nonpositive fitted means");

    const int N = problem.size();
    const int m = problem.rows();
    StreamRng root(cfg.seed);

    Eigen::MatrixXd mu_star(cfg.B, N), x_star(cfg.B, N), y_star(cfg.B, m);
    std::vector<char> ok(cfg.B, 0);

    parallel_for(cfg.B, cfg.threads, [&](int b) {
        const uint64_t rep_seed = root.stream(static_cast<uint64_t>(b)).key();
        const VectorXd x = simulate_exponential_values(fit.mu, rep_seed);
        const VectorXd y = problem.margins_of(x);
        try {
            ReducedProblem replica = problem.with_margins(y);
            FitResult refit = refit_for_tag(cfg.estimator, replica, design, cfg);
            if (!refit.diagnostics.converged) return;
            mu_star.row(b) = refit.mu.transpose();
            x_star.row(b) = x.transpose();
            y_star.row(b) = y.transpose();
            ok[b] = 1;
        } catch (const Error&) {
            // recorded below as a failed replicate
        }
    });

    BootstrapResult out;
    out.requested_B = cfg.B;
    out.seed = cfg.seed;
    for (int b = 0; b < cfg.B; ++b)
        if (!ok[b]) out.failed_replicates.push_back(b);
    const int good = cfg.B - static_cast<int>(out.failed_replicates.size());
    require(static_cast<double>(out.failed_replicates.size()) <= cfg.max_failure_share * cfg.B,
            ErrorCategory::solver,
            "bootstrap invalid: " + std::to_string(out.failed_replicates.size()) + " of " +
                std::to_string(cfg.B) + " replicates failed to refit");
    out.B = good;
    out.mu_star.resize(good, N);
    out.x_star.resize(good, N);
    out.y_star.resize(good, m);
    int row = 0;
    for (int b = 0; b < cfg.B; ++b) {
        if (!ok[b]) continue;
        out.mu_star.row(row) = mu_star.row(b);
        out.x_star.row(row) = x_star.row(b);
        out.y_star.row(row) = y_star.row(b);
        ++row;
    }
    out.e_star = out.x_star - out.mu_star;
    return out;
}

struct IntervalSet {
    VectorXd mu_hat, ci_lo, ci_hi, pi_lo, pi_hi;
    double level = 0.95;
    std::pair<double, double> quantile_rule{0.025, 0.975};
};

namespace detail {

// type-7 empirical quantile (linear interpolation between order statistics)
inline double empirical_quantile(std::vector<double>& sorted_buf, double p) {
    const size_t nb = sorted_buf.size();
    const double h = (static_cast<double>(nb) - 1.0) * p;
    const size_t lo = static_cast<size_t>(std::floor(h));
    const size_t hi = std::min(nb - 1, lo + 1);
    const double frac = h - static_cast<double>(lo);
    return (1.0 - frac) * sorted_buf[lo] + frac * sorted_buf[hi];
}

}  // namespace detail

// Confidence intervals for the means (quantiles of mu*) and prediction
// intervals for the unknown flows (quantiles of mu_hat + e*, floored at 0).
inline IntervalSet intervals(const BootstrapResult& boot, const VectorXd& mu_hat, double level = 0.95,
                             std::pair<double, double> quantile_rule = {-1.0, -1.0}) {
    require(level > 0.0 && level < 1.0, ErrorCategory::validation, "intervals: level must be in (0,1)");
    if (quantile_rule.first < 0.0) quantile_rule = {(1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0};
    require(quantile_rule.first < quantile_rule.second, ErrorCategory::validation,
            "intervals: quantile rule must be increasing");
    const double fineness = std::min(quantile_rule.first, 1.0 - quantile_rule.second);
    require(fineness >= 1.0 / boot.B - 1e-12, ErrorCategory::validation,
            "intervals: requested quantiles are finer than 1/B; increase the bootstrap size");
    require(mu_hat.size() == boot.mu_star.cols(), ErrorCategory::validation, "intervals: dimension mismatch");

    IntervalSet out;
    out.mu_hat = mu_hat;
    out.level = level;
    out.quantile_rule = quantile_rule;
    const int N = static_cast<int>(mu_hat.size());
    out.ci_lo.resize(N);
    out.ci_hi.resize(N);
    out.pi_lo.resize(N);
    out.pi_hi.resize(N);
    std::vector<double> buf(boot.B);
    for (int q = 0; q < N; ++q) {
        for (int b = 0; b < boot.B; ++b) buf[b] = boot.mu_star(b, q);
        std::sort(buf.begin(), buf.end());
        out.ci_lo[q] = detail::empirical_quantile(buf, quantile_rule.first);
        out.ci_hi[q] = detail::empirical_quantile(buf, quantile_rule.second);
        for (int b = 0; b < boot.B; ++b) buf[b] = mu_hat[q] + boot.e_star(b, q);
        std::sort(buf.begin(), buf.end());
        out.pi_lo[q] = std::max(0.0, detail::empirical_quantile(buf, quantile_rule.first));
        out.pi_hi[q] = std::max(0.0, detail::empirical_quantile(buf, quantile_rule.second));
    }
    return out;
}

}  // namespace netrecon
