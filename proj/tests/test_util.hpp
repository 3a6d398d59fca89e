#pragma once

#include <vector>

#include "netrecon/core.hpp"
#include "netrecon/rng.hpp"

namespace netrecon::testutil {

inline MarginSystem margins_from_sums(const std::vector<double>& rows, const std::vector<double>& cols) {
    const int n = static_cast<int>(rows.size());
    NodeSet nodes = NodeSet::numbered(n);
    RoutingMatrix routing = build_routing_matrix(nodes, all_offdiagonal_cells(n));
    VectorXd y(2 * n);
    for (int i = 0; i < n; ++i) y[i] = rows[i];
    for (int j = 0; j < n; ++j) y[n + j] = cols[j];
    return MarginSystem(routing, y);
}

inline ReducedProblem problem_from_sums(const std::vector<double>& rows, const std::vector<double>& cols) {
    return reduce_problem(margins_from_sums(rows, cols));
}

// margins of a random strictly positive flow matrix: always feasible
inline FlowMatrix random_flows(int n, uint64_t seed, double mean = 1.0) {
    NodeSet nodes = NodeSet::numbered(n);
    std::vector<Cell> cells = all_offdiagonal_cells(n);
    StreamRng rng(seed);
    VectorXd x(cells.size());
    for (int q = 0; q < static_cast<int>(cells.size()); ++q) x[q] = rng.stream(q).exponential(mean);
    return FlowMatrix(nodes, cells, x);
}

inline ReducedProblem random_problem(int n, uint64_t seed, double mean = 1.0) {
    FlowMatrix x = random_flows(n, seed, mean);
    RoutingMatrix routing = build_routing_matrix(x.nodes(), x.cells());
    return reduce_problem(apply_margins(routing, x));
}

}  // namespace netrecon::testutil
