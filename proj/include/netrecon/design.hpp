#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "netrecon/core.hpp"
#include "netrecon/model.hpp"

namespace netrecon {

// Raw covariate values for one period.
struct CovariateTable {
    std::map<std::string, std::unordered_map<int, double>> nodal;      // name -> node index -> value
    std::map<std::string, std::unordered_map<int64_t, double>> dyadic; // name -> cell key -> value

    void set_nodal(const std::string& name, int node, double value) { nodal[name][node] = value; }
    void set_dyadic(const std::string& name, int i, int j, double value) { dyadic[name][cell_key(i, j)] = value; }
};

// Assembled design for the log-linear mean: Z = [indicators | standardized
// exogenous].  Indicator columns exist only for margin rows that survived the
// zero-margin reduction; the same block doubles as the random-effects design.
struct DesignMatrices {
    MatrixXd Z;                     // N x (k + l)
    int n_indicator = 0;            // k
    std::vector<int> col_kept_row;  // indicator column -> position in kept_rows
    std::vector<int> kept_rows;     // original margin row per kept position
    int n = 0;                      // node count
    std::vector<std::string> beta_names;
    VectorXd ztilde_mean, ztilde_scale;  // standardization of the exogenous block

    int n_beta() const { return static_cast<int>(beta_names.size()); }
    int cols() const { return static_cast<int>(Z.cols()); }
    MatrixXd indicator_block() const { return Z.leftCols(n_indicator); }
    MatrixXd ztilde() const { return Z.rightCols(cols() - n_indicator); }

    // node and role of an indicator column: true = sender effect
    std::pair<int, bool> column_node(int col) const {
        const int row = kept_rows[col_kept_row[col]];
        return row < n ? std::make_pair(row, true) : std::make_pair(row - n, false);
    }
};

namespace detail {

inline double apply_transform(Transform t, double raw, const std::string& name, const std::string& where) {
    switch (t) {
        case Transform::identity:
            return raw;
        case Transform::log:
            require(raw > 0.0, ErrorCategory::validation,
                    "covariate '" + name + "' must be strictly positive under log transform (" + where + ")");
            return std::log(raw);
        case Transform::log1p:
            require(raw > -1.0, ErrorCategory::validation,
                    "covariate '" + name + "' must exceed -1 under log1p transform (" + where + ")");
            return std::log1p(raw);
    }
    return raw;
}

}  // namespace detail

inline DesignMatrices build_design(const ReducedProblem& problem, const ModelSpec& spec,
                                   const CovariateTable& data) {
    spec.validate();
    const int N = problem.size();
    const int m = problem.rows();

    DesignMatrices d;
    d.n = problem.n_nodes();
    d.kept_rows = problem.kept_rows();

    std::vector<int> ind_col_of_row(m, -1);
    for (int k = 0; k < m; ++k) {
        const bool sender_row = problem.kept_rows()[k] < d.n;
        if ((sender_row && spec.include_sender_effects) || (!sender_row && spec.include_receiver_effects)) {
            ind_col_of_row[k] = d.n_indicator++;
            d.col_kept_row.push_back(k);
        }
    }

    const int l = static_cast<int>(spec.covariates.size());
    d.Z = MatrixXd::Zero(N, d.n_indicator + l);
    for (int q = 0; q < N; ++q) {
        if (int c = ind_col_of_row[problem.sender_of(q)]; c >= 0) d.Z(q, c) = 1.0;
        if (int c = ind_col_of_row[problem.receiver_of(q)]; c >= 0) d.Z(q, c) = 1.0;
    }

    d.ztilde_mean = VectorXd::Zero(l);
    d.ztilde_scale = VectorXd::Ones(l);
    for (int k = 0; k < l; ++k) {
        const CovariateSpec& cov = spec.covariates[k];
        d.beta_names.push_back(cov.name);
        std::vector<std::string> missing;
        VectorXd col(N);
        for (int q = 0; q < N; ++q) {
            const Cell& c = problem.cells()[q];
            const std::string where =
                "(" + problem.nodes().label(c.i) + "," + problem.nodes().label(c.j) + ")";
            double raw = 0.0;
            bool found = false;
            if (cov.kind == CovariateKind::dyadic) {
                auto tab = data.dyadic.find(cov.name);
                if (tab != data.dyadic.end()) {
                    auto it = tab->second.find(cell_key(c));
                    if (it != tab->second.end()) { raw = it->second; found = true; }
                }
            } else {
                const int node = cov.kind == CovariateKind::nodal_sender ? c.i : c.j;
                auto tab = data.nodal.find(cov.name);
                if (tab != data.nodal.end()) {
                    auto it = tab->second.find(node);
                    if (it != tab->second.end()) { raw = it->second; found = true; }
                }
            }
            if (!found) {
                if (missing.size() < 8) missing.push_back(where);
                continue;
            }
            col[q] = detail::apply_transform(cov.transform, raw, cov.name, where);
        }
        if (!missing.empty()) {
            std::ostringstream msg;
            msg << "covariate '" << cov.name << "' missing for active cells:";
            for (const auto& w : missing) msg << ' ' << w;
            fail(ErrorCategory::validation, msg.str());
        }
        const double mean = col.mean();
        double sd = std::sqrt((col.array() - mean).square().sum() / N);
        if (!(sd > 1e-12 * (1.0 + std::abs(mean)))) sd = 1.0;  // degenerate column: centered zeros
        d.ztilde_mean[k] = mean;
        d.ztilde_scale[k] = sd;
        d.Z.col(d.n_indicator + k) = (col.array() - mean) / sd;
    }
    return d;
}

}  // namespace netrecon
