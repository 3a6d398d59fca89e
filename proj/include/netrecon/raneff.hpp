#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "netrecon/regression.hpp"

namespace netrecon {

namespace detail {

// Sigma(vartheta) over the indicator columns: per-node 2x2 blocks
// [[s2d, sdg],[sdg, s2g]] for nodes carrying both effects, scalars otherwise.
// Returned as the dense k x k matrix.
inline MatrixXd sigma_matrix(const VarianceComponents& vt, const DesignMatrices& design) {
    const int k = design.n_indicator;
    MatrixXd sigma = MatrixXd::Zero(k, k);
    std::vector<int> sender_col(design.n, -1), receiver_col(design.n, -1);
    for (int c = 0; c < k; ++c) {
        auto [node, is_sender] = design.column_node(c);
        (is_sender ? sender_col : receiver_col)[node] = c;
    }
    for (int c = 0; c < k; ++c) {
        auto [node, is_sender] = design.column_node(c);
        sigma(c, c) = is_sender ? vt.sigma2_delta : vt.sigma2_gamma;
        if (is_sender && receiver_col[node] >= 0) {
            sigma(c, receiver_col[node]) = vt.sigma_dg;
            sigma(receiver_col[node], c) = vt.sigma_dg;
        }
    }
    return sigma;
}

// Sigma^{-1} with the same block structure; near-singular blocks get a 1e-8
// ridge and raise the flag.
inline MatrixXd sigma_inverse(const VarianceComponents& vt, const DesignMatrices& design, bool* ridged) {
    const int k = design.n_indicator;
    MatrixXd inv = MatrixXd::Zero(k, k);
    std::vector<int> sender_col(design.n, -1), receiver_col(design.n, -1);
    for (int c = 0; c < k; ++c) {
        auto [node, is_sender] = design.column_node(c);
        (is_sender ? sender_col : receiver_col)[node] = c;
    }
    for (int node = 0; node < design.n; ++node) {
        const int cs = sender_col[node], cr = receiver_col[node];
        if (cs >= 0 && cr >= 0) {
            double a = vt.sigma2_delta, b = vt.sigma_dg, d = vt.sigma2_gamma;
            // keep the correlation strictly inside the PSD cone; at the
            // boundary the raw determinant can cancel below zero and the
            // penalty would turn indefinite
            const double bmax = std::sqrt(std::max(a * d, 0.0)) * (1.0 - 1e-6);
            if (std::abs(b) > bmax) {
                b = b > 0 ? bmax : -bmax;
                if (ridged) *ridged = true;
            }
            double det = a * d - b * b;
            if (!(det > 1e-12 * std::max(1.0, a * d))) {
                a += 1e-8;
                d += 1e-8;
                det = a * d - b * b;
                if (ridged) *ridged = true;
            }
            inv(cs, cs) = d / det;
            inv(cr, cr) = a / det;
            inv(cs, cr) = inv(cr, cs) = -b / det;
        } else if (cs >= 0 || cr >= 0) {
            const int c = cs >= 0 ? cs : cr;
            double v = cs >= 0 ? vt.sigma2_delta : vt.sigma2_gamma;
            if (!(v > 1e-12)) {
                v += 1e-8;
                if (ridged) *ridged = true;
            }
            inv(c, c) = 1.0 / v;
        }
    }
    return inv;
}

}  // namespace detail

struct PenEval {
    double value = 0.0;
    VectorXd grad;
    int clamped = 0;
    bool ridged = false;
};

// Penalized expected log-likelihood: Q(theta;theta0) minus the Gaussian
// random-effects penalty (delta,gamma)' Sigma^{-1}(vartheta) (delta,gamma)/2
// on the indicator coefficients.  Beta stays unpenalized.
inline PenEval penalized_q(const VectorXd& theta, const VectorXd& theta0, const VarianceComponents& vartheta,
                           const DesignMatrices& design) {
    PenEval out;
    QEval q = q_function(theta, theta0, design.Z);
    out.clamped = q.clamped;
    MatrixXd sinv = detail::sigma_inverse(vartheta, design, &out.ridged);
    VectorXd b = theta.head(design.n_indicator);
    VectorXd sb = sinv * b;
    out.value = q.value - 0.5 * b.dot(sb);
    out.grad = q.grad;
    out.grad.head(design.n_indicator) -= sb;
    return out;
}

namespace detail {

struct RemlContext {
    MatrixXd U;       // indicator block
    MatrixXd G;       // U'U
    MatrixXd ztilde;  // exogenous block

    explicit RemlContext(const DesignMatrices& design)
        : U(design.indicator_block()), G(U.transpose() * U), ztilde(design.ztilde()) {}
};

}  // namespace detail

// Restricted marginal log-likelihood of the variance components given
// pseudo-observations ytilde, with V = I_N + U Sigma U'.  All solves use the
// push-through identity so the PSD boundary (singular Sigma) stays valid:
//   V^{-1} x = x - U Sigma (I + G Sigma)^{-1} U' x,   G = U'U,
//   log|V| = log|I + Sigma G|.
// Non-finite evaluations (extreme variance proposals) come back as -inf.
inline double reml_loglik(const VarianceComponents& vartheta, const VectorXd& ytilde,
                          const DesignMatrices& design, const detail::RemlContext* ctx = nullptr) {
    require(ytilde.size() == design.Z.rows(), ErrorCategory::validation, "reml_loglik: dimension mismatch");
    const int k = design.n_indicator;
    const int l = design.n_beta();
    std::optional<detail::RemlContext> local;
    if (!ctx) local.emplace(design);
    const detail::RemlContext& cref = ctx ? *ctx : *local;
    const MatrixXd& U = cref.U;
    const MatrixXd& G = cref.G;
    const MatrixXd sigma = detail::sigma_matrix(vartheta, design);

    Eigen::PartialPivLU<MatrixXd> core(MatrixXd::Identity(k, k) + G * sigma);
    const double logdet_v =
        Eigen::ColPivHouseholderQR<MatrixXd>(MatrixXd::Identity(k, k) + sigma * G).logAbsDeterminant();

    auto vinv_apply = [&](const MatrixXd& x) -> MatrixXd {
        return x - U * (sigma * core.solve(U.transpose() * x));
    };

    double value = -0.5 * logdet_v;
    VectorXd resid = ytilde;
    if (l > 0) {
        const MatrixXd& ztilde = cref.ztilde;
        const MatrixXd w = vinv_apply(ztilde);           // V^{-1} Ztilde
        const MatrixXd gls = ztilde.transpose() * w;     // Ztilde' V^{-1} Ztilde
        const VectorXd rhs = w.transpose() * ytilde;
        const VectorXd beta = gls.ldlt().solve(rhs);
        value -= 0.5 * Eigen::ColPivHouseholderQR<MatrixXd>(gls).logAbsDeterminant();
        resid -= ztilde * beta;
    }
    const VectorXd vresid = vinv_apply(resid);
    value -= 0.5 * resid.dot(vresid);
    return std::isfinite(value) ? value : -std::numeric_limits<double>::infinity();
}

namespace detail {

// deterministic Nelder-Mead minimization on a box-clamped domain
struct NelderMeadResult {
    VectorXd x;
    double f = 0.0;
    int evals = 0;
};

inline NelderMeadResult nelder_mead(const std::function<double(const VectorXd&)>& fn, VectorXd x0,
                                    double spread, int max_evals, double box) {
    const int d = static_cast<int>(x0.size());
    auto clamp = [&](VectorXd v) {
        for (int i = 0; i < d; ++i) v[i] = std::min(box, std::max(-box, v[i]));
        return v;
    };
    std::vector<VectorXd> xs(d + 1);
    std::vector<double> fs(d + 1);
    int evals = 0;
    xs[0] = clamp(std::move(x0));
    fs[0] = fn(xs[0]);
    ++evals;
    for (int i = 0; i < d; ++i) {
        VectorXd v = xs[0];
        v[i] += spread;
        xs[i + 1] = clamp(v);
        fs[i + 1] = fn(xs[i + 1]);
        ++evals;
    }
    std::vector<int> ord(d + 1);
    while (evals < max_evals) {
        for (int i = 0; i <= d; ++i) ord[i] = i;
        std::sort(ord.begin(), ord.end(), [&](int a, int b) { return fs[a] < fs[b]; });
        const int best = ord[0], worst = ord[d], second = ord[d - 1];
        double diam = 0.0;
        for (int i = 1; i <= d; ++i) diam = std::max(diam, (xs[ord[i]] - xs[best]).lpNorm<Eigen::Infinity>());
        if (diam < 1e-10 && std::abs(fs[worst] - fs[best]) < 1e-12 * (1.0 + std::abs(fs[best]))) break;

        VectorXd centroid = VectorXd::Zero(d);
        for (int i = 0; i <= d; ++i)
            if (i != worst) centroid += xs[i];
        centroid /= d;

        VectorXd xr = clamp(centroid + (centroid - xs[worst]));
        const double fr = fn(xr);
        ++evals;
        if (fr < fs[best]) {
            VectorXd xe = clamp(centroid + 2.0 * (centroid - xs[worst]));
            const double fe = fn(xe);
            ++evals;
            if (fe < fr) { xs[worst] = xe; fs[worst] = fe; }
            else { xs[worst] = xr; fs[worst] = fr; }
        } else if (fr < fs[second]) {
            xs[worst] = xr;
            fs[worst] = fr;
        } else {
            VectorXd xc = clamp(centroid + 0.5 * (xs[worst] - centroid));
            const double fc = fn(xc);
            ++evals;
            if (fc < fs[worst]) { xs[worst] = xc; fs[worst] = fc; }
            else {
                for (int i = 0; i <= d; ++i) {
                    if (i == best) continue;
                    xs[i] = clamp(xs[best] + 0.5 * (xs[i] - xs[best]));
                    fs[i] = fn(xs[i]);
                    ++evals;
                }
            }
        }
    }
    int best = 0;
    for (int i = 1; i <= d; ++i)
        if (fs[i] < fs[best]) best = i;
    return {xs[best], fs[best], evals};
}

inline VectorXd vartheta_to_phi(const VarianceComponents& vt) {
    VectorXd phi(3);
    phi[0] = 0.5 * std::log(std::max(vt.sigma2_delta, 1e-20));
    phi[1] = 0.5 * std::log(std::max(vt.sigma2_gamma, 1e-20));
    const double denom = std::sqrt(std::max(vt.sigma2_delta * vt.sigma2_gamma, 1e-300));
    const double rho = std::min(0.999999, std::max(-0.999999, vt.sigma_dg / denom));
    phi[2] = std::atanh(rho);
    return phi;
}

inline VarianceComponents phi_to_vartheta(const VectorXd& phi) {
    VarianceComponents vt;
    vt.sigma2_delta = std::exp(2.0 * phi[0]);
    vt.sigma2_gamma = std::exp(2.0 * phi[1]);
    vt.sigma_dg = std::tanh(phi[2]) * std::sqrt(vt.sigma2_delta * vt.sigma2_gamma);
    return vt;
}

}  // namespace detail

// Maximize the restricted likelihood over the PSD cone through the
// unconstrained parameterization (log sd_delta, log sd_gamma, atanh rho).
inline VarianceComponents reml_maximize(const VectorXd& ytilde, const DesignMatrices& design,
                                        const VarianceComponents& start = {1.0, 1.0, 0.0, false},
                                        double* best_loglik = nullptr) {
    constexpr double kBox = 12.0;
    const detail::RemlContext ctx(design);
    auto objective = [&](const VectorXd& phi) {
        return -reml_loglik(detail::phi_to_vartheta(phi), ytilde, design, &ctx);
    };
    auto res = detail::nelder_mead(objective, detail::vartheta_to_phi(start), 0.5, 600, kBox);
    VarianceComponents vt = detail::phi_to_vartheta(res.x);
    vt.boundary = res.x.cwiseAbs().maxCoeff() >= kBox - 1e-6;
    if (best_loglik) *best_loglik = -res.f;
    return vt;
}

// Pseudo-observations of the working linear mixed model at (theta1, theta0):
//   ytilde = log mu(theta1) + D^{-1} (mu(theta0) - mu(theta1)),  D = diag(mu(theta1)).
inline VectorXd reml_pseudo_observations(const VectorXd& theta1, const VectorXd& theta0,
                                         const DesignMatrices& design) {
    VectorXd eta1 = design.Z * theta1;
    VectorXd d = design.Z * (theta0 - theta1);
    for (Eigen::Index q = 0; q < d.size(); ++q) d[q] = std::min(kLinPredClamp, std::max(-kLinPredClamp, d[q]));
    return eta1 + (d.array().exp() - 1.0).matrix();
}

inline VarianceComponents reml_variance(const VectorXd& theta1, const VectorXd& theta0,
                                        const DesignMatrices& design,
                                        const VarianceComponents& start = {1.0, 1.0, 0.0, false},
                                        double* best_loglik = nullptr) {
    return reml_maximize(reml_pseudo_observations(theta1, theta0, design), design, start, best_loglik);
}

// One penalized constrained maximization at fixed variance components:
// the theta-step of the alternating procedure, also useful on its own for
// penalty-path diagnostics.
inline FitResult fit_penalized(const ReducedProblem& problem, const DesignMatrices& design,
                               const VarianceComponents& vartheta, AugLagState config = {},
                               const VectorXd* theta_start = nullptr) {
    config.validate();
    config.constraint_scale = problem.scale();
    int clamps = 0;
    bool ridged = false;
    ConstraintFn constraint = detail::margin_constraint(problem, design, &clamps);

    VectorXd theta;
    if (theta_start) theta = *theta_start;
    else theta = initialize_theta(problem, design).theta;

    AugLagReport last;
    int sweeps = 0;
    bool moved_small = false;
    VectorXd prev_move;
    for (; sweeps < config.max_ecm; ++sweeps) {
        const VectorXd theta_prev = theta;
        Objective obj = [&](const VectorXd& th, VectorXd* grad) {
            PenEval p = penalized_q(th, theta_prev, vartheta, design);
            clamps += p.clamped;
            ridged = ridged || p.ridged;
            if (grad) *grad = p.grad;
            return p.value;
        };
        AugLagState step = config;
        step.xi = last.xi;
        auto [theta_next, rep] = auglag_solve(obj, constraint, step, theta);
        theta = theta_next;
        last = rep;
        VectorXd move = theta - theta_prev;
        if (move.lpNorm<Eigen::Infinity>() <= config.theta_tol && rep.converged) {
            ++sweeps;
            moved_small = true;
            break;
        }
        // Aitken extrapolation: the recentered sweep map contracts linearly,
        // so a steady geometric drift can be jumped to its limit (the next
        // sweep re-anchors and restores feasibility)
        if (prev_move.size() > 0) {
            const double r = move.norm() / prev_move.norm();
            const double cosine = move.dot(prev_move) / std::max(1e-300, move.norm() * prev_move.norm());
            if (r > 0.3 && r < 0.9999 && cosine > 0.9) {
                theta += move * std::min(2000.0, r / (1.0 - r));
                move.resize(0);  // restart the drift estimate
            }
        }
        prev_move = move;
    }

    FitResult out;
    out.method = "raneff";
    out.mu = model_means(theta, design.Z);
    out.theta = unpack_theta(theta, design);
    out.vartheta = vartheta;
    out.packed_theta = theta;
    out.diagnostics.iterations = sweeps;
    out.diagnostics.residual = problem.residual_inf(out.mu);
    out.diagnostics.converged = moved_small && last.converged;
    out.diagnostics.overflow_clamps = clamps;
    out.diagnostics.extras["sigma_ridged"] = ridged ? 1.0 : 0.0;
    return out;
}

// Full random-effects estimation: alternate the penalized constrained
// maximization with the restricted-likelihood update of the variance
// components until both blocks stop moving.
inline FitResult fit_random_effects(const ReducedProblem& problem, const DesignMatrices& design,
                                    AugLagState config = {}) {
    config.validate();
    FitResult out;
    out.method = "raneff";
    if (problem.size() == 0) {
        out.mu = VectorXd::Zero(0);
        out.diagnostics.converged = true;
        out.diagnostics.residual = 0.0;
        return out;
    }

    FitResult fe = fit_constrained_ml(problem, design, config);
    VectorXd theta = *fe.packed_theta;
    VectorXd theta_prev = theta;  // first alternation centers the pseudo-observations at the fixed-effects fit
    VarianceComponents vt{1.0, 1.0, 0.0, false};

    constexpr int kMaxAlternations = 50;
    int alt = 0;
    bool settled = false;
    double monotone_slack = 0.0;
    FitResult step = fe;
    for (; alt < kMaxAlternations; ++alt) {
        double before = 0.0, after = 0.0;
        const VectorXd ytilde = reml_pseudo_observations(theta, theta_prev, design);
        before = reml_loglik(vt, ytilde, design);
        VarianceComponents vt_new = reml_maximize(ytilde, design, vt, &after);
        monotone_slack = std::min(monotone_slack, after - before);
        out.diagnostics.objective_trace.push_back(after);

        const VectorXd theta_before = theta;
        step = fit_penalized(problem, design, vt_new, config, &theta);
        theta_prev = theta_before;
        theta = *step.packed_theta;

        const double theta_move = (theta - theta_before).lpNorm<Eigen::Infinity>();
        const double vt_move = std::max({std::abs(vt_new.sigma2_delta - vt.sigma2_delta),
                                         std::abs(vt_new.sigma2_gamma - vt.sigma2_gamma),
                                         std::abs(vt_new.sigma_dg - vt.sigma_dg)});
        vt = vt_new;
        if (theta_move <= config.theta_tol &&
            vt_move <= 1e-6 * (1.0 + std::abs(vt.sigma2_delta) + std::abs(vt.sigma2_gamma)) &&
            step.diagnostics.converged) {
            ++alt;
            settled = true;
            break;
        }
    }

    out.mu = step.mu;
    out.theta = step.theta;
    out.vartheta = vt;
    out.packed_theta = theta;
    out.diagnostics.iterations = alt;
    out.diagnostics.residual = problem.residual_inf(out.mu);
    out.diagnostics.converged = settled;
    out.diagnostics.overflow_clamps = step.diagnostics.overflow_clamps;
    out.diagnostics.extras["alternations"] = static_cast<double>(alt);
    out.diagnostics.extras["reml_boundary"] = vt.boundary ? 1.0 : 0.0;
    out.diagnostics.extras["reml_monotone_slack"] = monotone_slack;
    return out;
}

}  // namespace netrecon
