#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "netrecon/core.hpp"
#include "netrecon/fit_result.hpp"

namespace netrecon {

struct IpfpConfig {
    double tol = 1e-10;   // on ||A mu - y||_inf relative to max(1, ||y||_inf)
    int max_iter = 10000; // full sweeps over the margin rows

    void validate() const {
        require(tol > 0.0, ErrorCategory::validation, "IpfpConfig: tol must be positive");
        require(max_iter >= 1, ErrorCategory::validation, "IpfpConfig: max_iter must be >= 1");
    }
};

// Lagrange multipliers of the maximum-entropy density.  Individual entries
// may be negative; integrability only needs every cell's pair sum positive.
struct MultiplierVector {
    Eigen::VectorXd lambda;

    bool pair_sums_positive(const ReducedProblem& p) const {
        for (int q = 0; q < p.size(); ++q)
            if (lambda[p.sender_of(q)] + lambda[p.receiver_of(q)] <= 0.0) return false;
        return true;
    }
};

inline VectorXd ipfp_means(const VectorXd& lambda, const ReducedProblem& p) {
    VectorXd mu(p.size());
    for (int q = 0; q < p.size(); ++q) mu[q] = 1.0 / (lambda[p.sender_of(q)] + lambda[p.receiver_of(q)]);
    return mu;
}

// log-likelihood  l(lambda) = -log c(lambda) - sum_r lambda_r y_r,
// with log c = sum_q log mu_q and mu_q = 1/(lambda_s + lambda_r).
inline double ipfp_loglik(const VectorXd& lambda, const ReducedProblem& p) {
    require(lambda.size() == p.rows(), ErrorCategory::validation, "ipfp_loglik: dimension mismatch");
    double value = -lambda.dot(p.y());
    for (int q = 0; q < p.size(); ++q) {
        const double s = lambda[p.sender_of(q)] + lambda[p.receiver_of(q)];
        require(s > 0.0, ErrorCategory::validation, "ipfp_loglik: nonpositive multiplier pair sum");
        value += std::log(s);
    }
    return value;
}

inline double ipfp_loglik(const MultiplierVector& lambda, const ReducedProblem& p) {
    return ipfp_loglik(lambda.lambda, p);
}

namespace detail {

// Exact 1-D solve of the score equation for one margin row:
//   f(l) = sum_{q in row} 1/(l + c_q) - y_r = 0
// on the open interval (-min c, inf).  f is convex and strictly decreasing,
// so safeguarded Newton converges; steps that would leave the interval are
// halved back inside.
inline double solve_row_multiplier(double lam0, const std::vector<double>& partners, double y_r) {
    double lbound = partners[0];
    for (double c : partners) lbound = std::min(lbound, c);
    lbound = -lbound;

    auto f = [&](double l, double* deriv) {
        double v = -y_r, d = 0.0;
        for (double c : partners) {
            const double inv = 1.0 / (l + c);
            v += inv;
            d -= inv * inv;
        }
        if (deriv) *deriv = d;
        return v;
    };

    double l = lam0;
    if (l <= lbound) l = lbound + 1.0;  // re-enter the domain
    double fl, dl;
    for (int it = 0; it < 200; ++it) {
        fl = f(l, &dl);
        if (std::abs(fl) <= 1e-14 * std::max(1.0, y_r)) return l;
        double step = -fl / dl;
        double cand = l + step;
        // keep all pair sums positive: damp the step by halving until inside
        while (cand <= lbound) {
            step *= 0.5;
            cand = l + step;
            if (std::abs(step) < 1e-300) return l;
        }
        if (std::abs(cand - l) <= 1e-16 * std::max(1.0, std::abs(l))) return cand;
        l = cand;
    }
    return l;
}

}  // namespace detail

// Maximum-entropy reconstruction from margins alone: cyclic proportional
// fitting of the multipliers, each pass fitting every margin row exactly in
// turn.  Fixed points are the score equations; the log-likelihood is
// non-decreasing at every step.
inline FitResult fit_ipfp(const ReducedProblem& problem, const IpfpConfig& config = {}) {
    config.validate();
    FitResult out;
    out.method = "ipfp";

    const int m = problem.rows();
    const int nq = problem.size();
    if (nq == 0) {
        out.mu = VectorXd::Zero(0);
        out.multipliers = VectorXd::Zero(m);
        out.diagnostics.converged = true;
        out.diagnostics.residual = 0.0;
        return out;
    }

    // incidence: for each row, its cells and the partner row of each cell
    std::vector<std::vector<int>> row_cells(m);
    std::vector<std::vector<int>> row_partner(m);
    for (int q = 0; q < nq; ++q) {
        row_cells[problem.sender_of(q)].push_back(q);
        row_partner[problem.sender_of(q)].push_back(problem.receiver_of(q));
        row_cells[problem.receiver_of(q)].push_back(q);
        row_partner[problem.receiver_of(q)].push_back(problem.sender_of(q));
    }

    VectorXd lambda = VectorXd::Constant(m, static_cast<double>(m) / problem.y().sum());
    const double tol_abs = config.tol * problem.scale();

    out.diagnostics.objective_trace.push_back(ipfp_loglik(lambda, problem));
    double best_residual = std::numeric_limits<double>::infinity();
    double window_best = best_residual;
    int window_start = 0;
    std::vector<double> partners;

    int sweep = 0;
    for (; sweep < config.max_iter; ++sweep) {
        for (int r = 0; r < m; ++r) {
            partners.clear();
            for (int p : row_partner[r]) partners.push_back(lambda[p]);
            lambda[r] = detail::solve_row_multiplier(lambda[r], partners, problem.y()[r]);
        }
        const double res = problem.residual_inf(ipfp_means(lambda, problem));
        out.diagnostics.objective_trace.push_back(ipfp_loglik(lambda, problem));
        best_residual = std::min(best_residual, res);
        if (res <= tol_abs) {
            ++sweep;
            break;
        }
        // stalled residual with margins still unmet: the margins are not
        // reachable by any integrable member of the family
        if (sweep + 1 - window_start >= 200) {
            if (best_residual > window_best * (1.0 - 1e-3) && best_residual > 1e3 * tol_abs)
                fail(ErrorCategory::infeasible,
                     "fit_ipfp: margin residual stalled at " + std::to_string(best_residual) +
                         "; margins appear infeasible for the active cell set");
            window_best = best_residual;
            window_start = sweep + 1;
        }
    }

    out.mu = ipfp_means(lambda, problem);
    out.multipliers = lambda;
    out.diagnostics.iterations = sweep;
    out.diagnostics.residual = problem.residual_inf(out.mu);
    out.diagnostics.converged = out.diagnostics.residual <= tol_abs;
    return out;
}

}  // namespace netrecon
