#pragma once

#include <Eigen/Dense>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "netrecon/core.hpp"
#include "netrecon/model.hpp"

namespace netrecon {

struct FitDiagnostics {
    int iterations = 0;
    double residual = std::numeric_limits<double>::infinity();  // final ||A mu - y||_inf
    std::vector<double> objective_trace;
    bool converged = false;
    int overflow_clamps = 0;
    std::map<std::string, double> extras;  // method-specific scalars, deterministic order
};

// One fitted reconstruction: estimated means over the reduced active cells,
// optional coefficient/variance records, and solver diagnostics.
struct FitResult {
    Eigen::VectorXd mu;
    std::optional<Theta> theta;
    std::optional<VarianceComponents> vartheta;
    std::optional<Eigen::VectorXd> multipliers;    // lambda for the margin-only fit
    std::optional<Eigen::VectorXd> packed_theta;   // raw design-column coefficients
    FitDiagnostics diagnostics;
    std::string method;
};

// Map reduced-problem means back to the original active cells; cells dropped
// by the zero-margin reduction come back as exact zeros.
inline FlowMatrix predict(const FitResult& fit, const ReducedProblem& problem) {
    require(fit.mu.size() == problem.size(), ErrorCategory::validation, "predict: fit/problem mismatch");
    std::unordered_map<int64_t, double> lookup;
    lookup.reserve(problem.size());
    for (int q = 0; q < problem.size(); ++q) lookup.emplace(cell_key(problem.cells()[q]), fit.mu[q]);
    const auto& cells = problem.original_cells();
    VectorXd values = VectorXd::Zero(cells.size());
    for (size_t q = 0; q < cells.size(); ++q) {
        auto it = lookup.find(cell_key(cells[q]));
        if (it != lookup.end()) values[q] = it->second;
    }
    return FlowMatrix(problem.nodes(), cells, values, problem.time());
}

}  // namespace netrecon
