#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "netrecon/core.hpp"
#include "netrecon/fit_result.hpp"
#include "netrecon/ipfp.hpp"
#include "netrecon/rng.hpp"

namespace netrecon {

// ---------------------------------------------------------------- gravity --

// Multiplicative independence estimate mu_ij = x_i. x_.j / x.. on the active
// cells.  Closed form; the margin residual is reported because it is nonzero
// whenever the diagonal is excluded.
inline FitResult gravity(const ReducedProblem& problem) {
    const double total = problem.total_flow();
    require(total > 0.0, ErrorCategory::validation, "gravity: zero total flow");
    FitResult out;
    out.method = "gravity";
    out.mu.resize(problem.size());
    for (int q = 0; q < problem.size(); ++q)
        out.mu[q] = problem.y()[problem.sender_of(q)] * problem.y()[problem.receiver_of(q)] / total;
    out.diagnostics.residual = problem.residual_inf(out.mu);
    out.diagnostics.converged = true;
    out.diagnostics.iterations = 0;
    return out;
}

// ------------------------------------------------------------ tomogravity --

struct TomogravityConfig {
    double psi = 0.01;
    double tol = 1e-8;
    int max_iter = 20000;

    void validate() const {
        require(psi > 0.0, ErrorCategory::validation, "TomogravityConfig: psi must be positive");
        require(tol > 0.0 && max_iter >= 1, ErrorCategory::validation, "TomogravityConfig: bad solver settings");
    }
};

// Least-squares margin fit penalized toward the gravity null model:
//   min ||A mu - y||^2 + (psi^2/N) sum mu_q log(mu_q / (x_i. x_.j)),  mu >= 0.
// Projected gradient with backtracking on the smooth objective; cells are
// kept at an interior floor because the entropy gradient is unbounded at 0.
inline FitResult tomogravity(const ReducedProblem& problem, const TomogravityConfig& config = {}) {
    config.validate();
    const int N = problem.size();
    const double total = problem.total_flow();
    require(total > 0.0, ErrorCategory::validation, "tomogravity: zero total flow");
    const double floor = 1e-12 * total;
    const double w = config.psi * config.psi / N;

    VectorXd g(N);  // gravity reference products x_i. x_.j
    for (int q = 0; q < N; ++q)
        g[q] = problem.y()[problem.sender_of(q)] * problem.y()[problem.receiver_of(q)];

    auto objective = [&](const VectorXd& mu, VectorXd* grad) {
        const VectorXd r = problem.margins_of(mu) - problem.y();
        double f = r.squaredNorm();
        for (int q = 0; q < N; ++q) f += w * mu[q] * std::log(mu[q] / g[q]);
        if (grad) {
            grad->resize(N);
            for (int q = 0; q < N; ++q)
                (*grad)[q] = 2.0 * (r[problem.sender_of(q)] + r[problem.receiver_of(q)]) +
                             w * (std::log(mu[q] / g[q]) + 1.0);
        }
        return f;
    };

    FitResult out;
    out.method = "tomogravity";
    VectorXd mu = (g / total).cwiseMax(floor);  // gravity start
    VectorXd grad;
    double f = objective(mu, &grad);
    out.diagnostics.objective_trace.push_back(f);
    double step = 1.0 / std::max(1.0, grad.lpNorm<Eigen::Infinity>());
    const double grad_scale = std::max(1.0, 2.0 * problem.scale());

    int it = 0;
    for (; it < config.max_iter; ++it) {
        // projected-gradient residual as the stationarity certificate
        double pg = 0.0;
        for (int q = 0; q < N; ++q)
            pg = std::max(pg, mu[q] > floor * (1.0 + 1e-12) ? std::abs(grad[q]) : std::max(0.0, -grad[q]));
        if (pg <= config.tol * grad_scale) break;

        bool accepted = false;
        for (int ls = 0; ls < 70; ++ls) {
            VectorXd cand = (mu - step * grad).cwiseMax(floor);
            const double fc = objective(cand, nullptr);
            const double decrease = grad.dot(mu - cand);
            if (fc <= f - 1e-4 * decrease) {
                mu = cand;
                f = fc;
                step *= 1.6;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        objective(mu, &grad);
        out.diagnostics.objective_trace.push_back(f);
    }

    out.mu = mu;
    out.diagnostics.iterations = it;
    out.diagnostics.residual = problem.residual_inf(mu);
    double pg = 0.0;
    for (int q = 0; q < N; ++q)
        pg = std::max(pg, mu[q] > floor * (1.0 + 1e-12) ? std::abs(grad[q]) : std::max(0.0, -grad[q]));
    out.diagnostics.converged = pg <= config.tol * grad_scale;
    out.diagnostics.extras["stationarity"] = pg;
    out.diagnostics.extras["objective"] = f;
    return out;
}

inline double tomogravity_objective(const ReducedProblem& problem, double psi, const VectorXd& mu) {
    const int N = problem.size();
    const double w = psi * psi / N;
    const VectorXd r = problem.margins_of(mu) - problem.y();
    double f = r.squaredNorm();
    for (int q = 0; q < N; ++q) {
        const double g = problem.y()[problem.sender_of(q)] * problem.y()[problem.receiver_of(q)];
        f += w * mu[q] * std::log(std::max(mu[q], 1e-300) / g);
    }
    return f;
}

// --------------------------------------------------------------- nn lasso --

struct LassoConfig {
    double tau = 0.0;
    double tol = 1e-10;
    int max_iter = 100000;

    void validate() const {
        require(tau >= 0.0, ErrorCategory::validation, "LassoConfig: tau must be nonnegative");
        require(tol > 0.0 && max_iter >= 1, ErrorCategory::validation, "LassoConfig: bad solver settings");
    }
};

// Exact minimizer of the one-cell problem  (quad/2) d^2 + grad d + tau (mu+d)
// over mu + d >= 0, returned as the new coordinate value.
inline double lasso_coordinate_min(double mu, double grad_ls, double quad, double tau) {
    return std::max(0.0, mu - (grad_ls + tau) / quad);
}

inline double nn_lasso_kkt_residual(const ReducedProblem& problem, double tau, const VectorXd& mu) {
    const VectorXd r = problem.margins_of(mu) - problem.y();
    double worst = 0.0;
    for (int q = 0; q < problem.size(); ++q) {
        const double grad = 2.0 * (r[problem.sender_of(q)] + r[problem.receiver_of(q)]) + tau;
        worst = std::max(worst, mu[q] > 0.0 ? std::abs(grad) : std::max(0.0, -grad));
    }
    return worst;
}

// Non-negative LASSO  min ||A mu - y||^2 + tau sum mu_q, mu >= 0, by cyclic
// coordinate descent with exact coordinate minimizers (every design column
// has squared norm 2).
inline FitResult nn_lasso(const ReducedProblem& problem, const LassoConfig& config = {}) {
    config.validate();
    const int N = problem.size();
    FitResult out;
    out.method = "nnlasso";
    VectorXd mu = VectorXd::Zero(N);
    VectorXd r = -problem.y();  // A mu - y

    auto objective = [&]() { return r.squaredNorm() + config.tau * mu.sum(); };
    out.diagnostics.objective_trace.push_back(objective());
    const double kkt_tol = config.tol * problem.scale();

    int it = 0;
    for (; it < config.max_iter; ++it) {
        for (int q = 0; q < N; ++q) {
            const int s = problem.sender_of(q), t = problem.receiver_of(q);
            const double grad_ls = 2.0 * (r[s] + r[t]);
            const double next = lasso_coordinate_min(mu[q], grad_ls, 4.0, config.tau);
            const double d = next - mu[q];
            if (d != 0.0) {
                mu[q] = next;
                r[s] += d;
                r[t] += d;
            }
        }
        out.diagnostics.objective_trace.push_back(objective());
        if (nn_lasso_kkt_residual(problem, config.tau, mu) <= kkt_tol) {
            ++it;
            break;
        }
    }

    out.mu = mu;
    out.diagnostics.iterations = it;
    out.diagnostics.residual = problem.residual_inf(mu);
    out.diagnostics.extras["kkt_residual"] = nn_lasso_kkt_residual(problem, config.tau, mu);
    out.diagnostics.converged = out.diagnostics.extras["kkt_residual"] <= kkt_tol;
    return out;
}

// ---------------------------------------------------- ecological regression --

enum class ShareDirection { columns, rows };

struct SharesMatrix {
    ShareDirection direction = ShareDirection::columns;
    MatrixXd shares;      // n x n, zero diagonal, unit column (or row) sums
    MatrixXd raw_shares;  // least-squares estimates before post-processing
};

struct EcologicalResult {
    SharesMatrix shares;
    std::vector<FlowMatrix> predictions;  // one per period, all off-diagonal cells
    bool underidentified = false;         // T < n warning
};

// clip negatives to zero, renormalize to unit sum; an all-clipped vector
// falls back to equal shares
inline VectorXd postprocess_shares(VectorXd raw) {
    VectorXd s = raw.cwiseMax(0.0);
    const double sum = s.sum();
    if (sum > 0.0) return s / sum;
    return VectorXd::Constant(raw.size(), 1.0 / static_cast<double>(raw.size()));
}

// Time-constant transition shares fitted across periods by least squares:
// direction=columns regresses the row sums on the column sums (predictions
// mu_ij^t = share_ij * y_col_j^t), direction=rows the other way around.  The
// diagonal is structurally zero.
inline EcologicalResult ecological_regression(const std::vector<MarginSystem>& margin_series,
                                              ShareDirection direction) {
    require(margin_series.size() >= 2, ErrorCategory::validation,
            "ecological_regression: at least two periods required");
    const int n = margin_series.front().n_nodes();
    const int T = static_cast<int>(margin_series.size());
    for (const auto& ms : margin_series)
        require(ms.nodes() == margin_series.front().nodes(), ErrorCategory::validation,
                "ecological_regression: node sets differ across periods");

    MatrixXd rows_t(T, n), cols_t(T, n);
    for (int t = 0; t < T; ++t) {
        rows_t.row(t) = margin_series[t].y().head(n).transpose();
        cols_t.row(t) = margin_series[t].y().tail(n).transpose();
    }
    const MatrixXd& cond = direction == ShareDirection::columns ? cols_t : rows_t;
    const MatrixXd& resp = direction == ShareDirection::columns ? rows_t : cols_t;

    EcologicalResult out;
    out.underidentified = T < n;
    out.shares.direction = direction;
    out.shares.raw_shares = MatrixXd::Zero(n, n);

    // direction=columns: y_row_i = sum_{j != i} beta_ij y_col_j, one LS fit
    // per target index with the self column excluded
    for (int target = 0; target < n; ++target) {
        MatrixXd X(T, n - 1);
        int c = 0;
        std::vector<int> colmap;
        for (int other = 0; other < n; ++other) {
            if (other == target) continue;
            X.col(c) = cond.col(other);
            colmap.push_back(other);
            ++c;
        }
        Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
        qr.setThreshold(1e-10);
        const VectorXd beta = qr.solve(resp.col(target));
        for (int k = 0; k < n - 1; ++k) {
            if (direction == ShareDirection::columns)
                out.shares.raw_shares(target, colmap[k]) = beta[k];  // beta_ij, j = conditioning index
            else
                out.shares.raw_shares(colmap[k], target) = beta[k];  // beta_ij, i = conditioning index
        }
    }

    // post-process: unit sums over the conditioning direction
    out.shares.shares = MatrixXd::Zero(n, n);
    for (int j = 0; j < n; ++j) {
        VectorXd raw(n - 1);
        std::vector<int> idx;
        for (int i = 0; i < n; ++i) {
            if (i == j) continue;
            raw[static_cast<int>(idx.size())] = direction == ShareDirection::columns
                                                    ? out.shares.raw_shares(i, j)
                                                    : out.shares.raw_shares(j, i);
            idx.push_back(i);
        }
        const VectorXd post = postprocess_shares(raw);
        for (size_t k = 0; k < idx.size(); ++k) {
            if (direction == ShareDirection::columns)
                out.shares.shares(idx[k], j) = post[k];
            else
                out.shares.shares(j, idx[k]) = post[k];
        }
    }

    for (int t = 0; t < T; ++t) {
        std::vector<Cell> cells = all_offdiagonal_cells(n);
        VectorXd values(cells.size());
        for (size_t q = 0; q < cells.size(); ++q) {
            const auto [i, j] = cells[q];
            values[q] = direction == ShareDirection::columns ? out.shares.shares(i, j) * cols_t(t, j)
                                                             : out.shares.shares(i, j) * rows_t(t, i);
        }
        out.predictions.emplace_back(margin_series[t].nodes(), cells, values, margin_series[t].time());
    }
    return out;
}

// ------------------------------------------------------------ hierarchical --

struct HierarchicalConfig {
    enum class Model { erdos, fitness };
    Model model = Model::erdos;
    double target_density = 1.0;
    int S = 100;
    uint64_t seed = 0;
    double alpha = std::numeric_limits<double>::quiet_NaN();  // fitness intercept, calibrated
    double p = std::numeric_limits<double>::quiet_NaN();      // Erdos-Renyi link probability, calibrated
    double mu_weight = 0.0;                                   // 0: (total flow)/(expected edge count)
    IpfpConfig repair;

    void validate() const {
        require(target_density > 0.0 && target_density <= 1.0, ErrorCategory::validation,
                "HierarchicalConfig: target_density must be in (0,1]");
        require(S >= 1, ErrorCategory::validation, "HierarchicalConfig: S must be >= 1");
    }
};

// per-node fitness z_i = log(x_.i + x_i.) from the margins
inline VectorXd fitness_scores(const ReducedProblem& problem) {
    VectorXd inout = VectorXd::Zero(problem.n_nodes());
    for (int k = 0; k < problem.rows(); ++k) {
        const int row = problem.kept_rows()[k];
        inout[row < problem.n_nodes() ? row : row - problem.n_nodes()] += problem.y()[k];
    }
    return inout.array().max(1e-300).log();
}

inline VectorXd hierarchical_link_probabilities(const ReducedProblem& problem, const HierarchicalConfig& cfg) {
    VectorXd p(problem.size());
    if (cfg.model == HierarchicalConfig::Model::erdos) {
        p.setConstant(cfg.p);
    } else {
        const VectorXd z = fitness_scores(problem);
        for (int q = 0; q < problem.size(); ++q) {
            const auto& c = problem.cells()[q];
            p[q] = 1.0 / (1.0 + std::exp(-cfg.alpha - z[c.i] - z[c.j]));
        }
    }
    return p;
}

// Solve for the link-probability parameters so the expected density over the
// active cells matches the target: p itself for the Erdos-Renyi model, the
// intercept alpha (by bisection) for the fitness model.
inline HierarchicalConfig calibrate_density(HierarchicalConfig config, const ReducedProblem& problem) {
    config.validate();
    if (config.model == HierarchicalConfig::Model::erdos) {
        config.p = config.target_density;
        return config;
    }
    require(config.target_density < 1.0 - 1e-9, ErrorCategory::validation,
            "calibrate_density: target density unreachable for the fitness model");
    const VectorXd z = fitness_scores(problem);
    auto mean_density = [&](double alpha) {
        double s = 0.0;
        for (int q = 0; q < problem.size(); ++q) {
            const auto& c = problem.cells()[q];
            s += 1.0 / (1.0 + std::exp(-alpha - z[c.i] - z[c.j]));
        }
        return s / problem.size();
    };
    double lo = -1.0, hi = 1.0;
    for (int it = 0; it < 200 && mean_density(lo) > config.target_density; ++it) lo *= 2.0;
    for (int it = 0; it < 200 && mean_density(hi) < config.target_density; ++it) hi *= 2.0;
    require(mean_density(lo) <= config.target_density && mean_density(hi) >= config.target_density,
            ErrorCategory::validation, "calibrate_density: target density unreachable for the fitness model");
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mean_density(mid) < config.target_density ? lo : hi) = mid;
    }
    config.alpha = 0.5 * (lo + hi);
    return config;
}

// Sample adjacency from the link probabilities, draw exponential weights on
// the present edges, then repair each sample to the observed margins by the
// maximum-entropy fit restricted to the sampled support; average the
// repaired estimates over the successful samples.
inline FitResult hierarchical_sample(const ReducedProblem& problem, const HierarchicalConfig& config) {
    config.validate();
    require(std::isfinite(config.model == HierarchicalConfig::Model::erdos ? config.p : config.alpha),
            ErrorCategory::validation, "hierarchical_sample: config not calibrated");
    const int N = problem.size();
    const VectorXd link_p = hierarchical_link_probabilities(problem, config);
    const double expected_edges = link_p.sum();
    const double mu_weight =
        config.mu_weight > 0.0 ? config.mu_weight : problem.total_flow() / std::max(1.0, expected_edges);

    StreamRng root(config.seed);
    VectorXd mu_sum = VectorXd::Zero(N);
    long edges_drawn = 0;
    double weight_sum = 0.0;
    long weight_count = 0;
    int failures = 0, successes = 0;

    for (int s = 0; s < config.S; ++s) {
        StreamRng sample = root.stream(static_cast<uint64_t>(s));
        std::vector<char> present(N, 0);
        for (int q = 0; q < N; ++q) {
            StreamRng cell = sample.stream(static_cast<uint64_t>(q));
            present[q] = cell.next_open01() < link_p[q] ? 1 : 0;
            if (present[q]) {
                edges_drawn += 1;
                weight_sum += cell.exponential(mu_weight);
                ++weight_count;
            }
        }
        auto sub = problem.restrict_support(present);
        if (!sub) {
            ++failures;
            continue;
        }
        try {
            FitResult repaired = fit_ipfp(*sub, config.repair);
            if (!repaired.diagnostics.converged) {
                ++failures;
                continue;
            }
            for (int q = 0, k = 0; q < N; ++q)
                if (present[q]) mu_sum[q] += repaired.mu[k++];
            ++successes;
        } catch (const Error&) {
            ++failures;
        }
    }

    require(failures * 2 <= config.S, ErrorCategory::solver,
            "hierarchical_sample invalid: " + std::to_string(failures) + " of " + std::to_string(config.S) +
                " samples could not be repaired to the margins");

    FitResult out;
    out.method = config.model == HierarchicalConfig::Model::erdos ? "hierarchical-erdos" : "hierarchical-fitness";
    out.mu = mu_sum / std::max(1, successes);
    out.diagnostics.iterations = config.S;
    out.diagnostics.residual = problem.residual_inf(out.mu);
    out.diagnostics.converged = true;
    out.diagnostics.extras["realized_density"] = static_cast<double>(edges_drawn) / (static_cast<double>(config.S) * N);
    out.diagnostics.extras["repair_failures"] = failures;
    out.diagnostics.extras["mean_sampled_weight"] = weight_count > 0 ? weight_sum / weight_count : 0.0;
    return out;
}

}  // namespace netrecon
