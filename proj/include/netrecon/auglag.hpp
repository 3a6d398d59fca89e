#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>

#include "netrecon/error.hpp"

namespace netrecon {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Maximized objective with analytic gradient.
using Objective = std::function<double(const VectorXd&, VectorXd* grad)>;
// Equality-constraint residual c(theta) with dense Jacobian.
using ConstraintFn = std::function<VectorXd(const VectorXd&, MatrixXd* jac)>;

struct AugLagState {
    VectorXd xi;                    // multiplier estimates, sized on first use
    double zeta = 1.0;              // quadratic penalty weight
    double inner_tol = 1e-9;        // stationarity of the smoothed problem
    double outer_tol = 1e-9;        // feasibility, relative to constraint_scale
    int max_outer = 60;
    int max_inner = 400;
    double zeta_growth = 10.0;      // applied when the residual fails to shrink 4x
    double constraint_scale = 1.0;  // typically max(1, ||y||_inf)
    int max_ecm = 40;               // outer conditional-maximization sweeps
    double theta_tol = 1e-7;        // coefficient movement declaring the outer sweeps settled

    void validate() const {
        require(zeta > 0.0, ErrorCategory::validation, "AugLagState: zeta must be positive");
        require(zeta_growth >= 1.0, ErrorCategory::validation, "AugLagState: zeta_growth must be >= 1");
        require(inner_tol > 0.0 && outer_tol > 0.0, ErrorCategory::validation, "AugLagState: tolerances must be positive");
        require(max_outer >= 1 && max_inner >= 1 && max_ecm >= 1, ErrorCategory::validation,
                "AugLagState: iteration caps must be >= 1");
        require(theta_tol > 0.0, ErrorCategory::validation, "AugLagState: theta_tol must be positive");
    }
};

struct AugLagReport {
    int outer = 0;
    long inner_total = 0;
    double residual = std::numeric_limits<double>::infinity();
    double stationarity = std::numeric_limits<double>::infinity();
    bool converged = false;
    VectorXd xi;
};

namespace detail {

// BFGS with Armijo backtracking on a smooth function to be minimized.
// Returns the final gradient inf-norm.
inline double bfgs_minimize(const std::function<double(const VectorXd&, VectorXd&)>& fn, VectorXd& x,
                            double grad_tol, int max_iter, long* evals) {
    const int p = static_cast<int>(x.size());
    MatrixXd H = MatrixXd::Identity(p, p);
    VectorXd g(p), g_new(p);
    double f = fn(x, g);
    ++*evals;
    for (int it = 0; it < max_iter; ++it) {
        const double gnorm = g.lpNorm<Eigen::Infinity>();
        if (gnorm <= grad_tol) return gnorm;
        VectorXd dir = -(H * g);
        double slope = g.dot(dir);
        if (!(slope < 0.0)) {  // curvature lost; restart from steepest descent
            H.setIdentity();
            dir = -g;
            slope = -g.squaredNorm();
        }
        double t = 1.0;
        double f_new = std::numeric_limits<double>::infinity();
        VectorXd x_new;
        bool ok = false;
        for (int ls = 0; ls < 60; ++ls) {
            x_new = x + t * dir;
            f_new = fn(x_new, g_new);
            ++*evals;
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * t * slope) {
                ok = true;
                break;
            }
            t *= 0.5;
        }
        if (!ok) return g.lpNorm<Eigen::Infinity>();
        require(x_new.lpNorm<Eigen::Infinity>() < 1e10, ErrorCategory::solver,
                "augmented Lagrangian: unbounded inner step");
        VectorXd s = x_new - x;
        VectorXd yv = g_new - g;
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            const double rho = 1.0 / sy;
            MatrixXd left = MatrixXd::Identity(p, p) - rho * s * yv.transpose();
            H = left * H * left.transpose() + rho * s * s.transpose();
        } else {
            H.setIdentity();
        }
        if (std::abs(f - f_new) <= 1e-16 * (1.0 + std::abs(f)) && s.lpNorm<Eigen::Infinity>() < 1e-14) {
            x = x_new;
            return g_new.lpNorm<Eigen::Infinity>();
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }
    return g.lpNorm<Eigen::Infinity>();
}

}  // namespace detail

// Maximize `objective` subject to constraint(theta) = 0 by the method of
// multipliers: minimize  L = -f - xi'c + (zeta/2)||c||^2,  then update
// xi <- xi + zeta c and escalate zeta while the residual stalls.
inline std::pair<VectorXd, AugLagReport> auglag_solve(const Objective& objective, const ConstraintFn& constraint,
                                                      AugLagState state, VectorXd theta) {
    state.validate();
    VectorXd c0 = constraint(theta, nullptr);
    const int m = static_cast<int>(c0.size());
    if (state.xi.size() == 0) state.xi = VectorXd::Zero(m);
    require(state.xi.size() == m, ErrorCategory::validation, "auglag_solve: multiplier size mismatch");

    AugLagReport rep;
    double zeta = state.zeta;
    VectorXd xi = state.xi;
    double prev_res = std::numeric_limits<double>::infinity();
    const double feas_tol = state.outer_tol * state.constraint_scale;

    for (int outer = 0; outer < state.max_outer; ++outer) {
        auto smoothed = [&](const VectorXd& th, VectorXd& grad) {
            VectorXd fgrad(th.size());
            MatrixXd jac;
            const double f = objective(th, &fgrad);
            VectorXd c = constraint(th, &jac);
            grad = -fgrad - jac.transpose() * (xi - zeta * c);
            return -f - xi.dot(c) + 0.5 * zeta * c.squaredNorm();
        };
        const double stat = detail::bfgs_minimize(smoothed, theta, state.inner_tol * state.constraint_scale,
                                                  state.max_inner, &rep.inner_total);
        VectorXd c = constraint(theta, nullptr);
        const double res = c.lpNorm<Eigen::Infinity>();
        // first-order multiplier step consistent with the -xi'c term in L:
        // at the inner solution grad f = J'(xi - zeta c), so xi - zeta c is
        // the improved multiplier estimate
        xi -= zeta * c;
        rep.outer = outer + 1;
        rep.residual = res;
        rep.stationarity = stat;
        if (res <= feas_tol) {
            rep.converged = true;
            break;
        }
        if (res > 0.25 * prev_res) zeta = std::min(zeta * state.zeta_growth, 1e12);
        prev_res = res;
    }
    rep.xi = xi;
    return {theta, rep};
}

}  // namespace netrecon
