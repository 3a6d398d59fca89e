#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "netrecon/error.hpp"

namespace netrecon {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Relative tolerance for accepting row/column totals as balanced.
inline constexpr double kBalanceTol = 1e-8;

// Ordered pair (i,j), i != j, addressing one directed flow.
struct Cell {
    int i = 0;
    int j = 0;
    friend bool operator==(const Cell& a, const Cell& b) { return a.i == b.i && a.j == b.j; }
    friend bool operator!=(const Cell& a, const Cell& b) { return !(a == b); }
};

inline int64_t cell_key(int i, int j) { return (static_cast<int64_t>(i) << 32) | static_cast<uint32_t>(j); }
inline int64_t cell_key(const Cell& c) { return cell_key(c.i, c.j); }

// The observational units.  Cells are addressed by label pairs externally;
// all internal vectors follow an explicit active-cell order.
class NodeSet {
public:
    NodeSet() = default;

    explicit NodeSet(std::vector<std::string> labels) : labels_(std::move(labels)) {
        require(labels_.size() >= 2, ErrorCategory::validation, "NodeSet needs at least two nodes");
        for (int k = 0; k < static_cast<int>(labels_.size()); ++k) {
            auto [it, fresh] = index_.emplace(labels_[k], k);
            (void)it;
            require(fresh, ErrorCategory::validation, "duplicate node label '" + labels_[k] + "'");
        }
    }

    static NodeSet numbered(int n) {
        std::vector<std::string> labels;
        labels.reserve(n);
        for (int k = 1; k <= n; ++k) labels.push_back(std::to_string(k));
        return NodeSet(std::move(labels));
    }

    int size() const { return static_cast<int>(labels_.size()); }
    const std::string& label(int k) const { return labels_.at(k); }
    const std::vector<std::string>& labels() const { return labels_; }

    int index_of(const std::string& label) const {
        auto it = index_.find(label);
        require(it != index_.end(), ErrorCategory::validation, "unknown node label '" + label + "'");
        return it->second;
    }

    bool contains(const std::string& label) const { return index_.count(label) > 0; }

    friend bool operator==(const NodeSet& a, const NodeSet& b) { return a.labels_ == b.labels_; }

private:
    std::vector<std::string> labels_;
    std::unordered_map<std::string, int> index_;
};

inline std::vector<Cell> all_offdiagonal_cells(int n) {
    std::vector<Cell> cells;
    cells.reserve(static_cast<size_t>(n) * (n - 1));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) cells.push_back({i, j});
    return cells;
}

// Non-negative directed flows on an ordered set of off-diagonal cells.
class FlowMatrix {
public:
    FlowMatrix() = default;

    FlowMatrix(NodeSet nodes, std::vector<Cell> cells, VectorXd values, std::optional<std::string> time = {})
        : nodes_(std::move(nodes)), cells_(std::move(cells)), values_(std::move(values)), time_(std::move(time)) {
        require(values_.size() == static_cast<Eigen::Index>(cells_.size()), ErrorCategory::validation,
                "FlowMatrix: cells/values size mismatch");
        const int n = nodes_.size();
        index_.reserve(cells_.size());
        for (int q = 0; q < static_cast<int>(cells_.size()); ++q) {
            const Cell& c = cells_[q];
            require(c.i >= 0 && c.i < n && c.j >= 0 && c.j < n, ErrorCategory::validation,
                    "FlowMatrix: cell index out of range");
            require(c.i != c.j, ErrorCategory::validation, "self-loops undefined");
            require(values_[q] >= 0.0, ErrorCategory::validation, "FlowMatrix: negative value at cell (" +
                        nodes_.label(c.i) + "," + nodes_.label(c.j) + ")");
            auto [it, fresh] = index_.emplace(cell_key(c), q);
            (void)it;
            require(fresh, ErrorCategory::validation, "FlowMatrix: duplicate cell");
        }
    }

    const NodeSet& nodes() const { return nodes_; }
    const std::vector<Cell>& cells() const { return cells_; }
    const VectorXd& values() const { return values_; }
    const std::optional<std::string>& time() const { return time_; }
    int size() const { return static_cast<int>(cells_.size()); }

    bool contains(int i, int j) const { return index_.count(cell_key(i, j)) > 0; }

    double value_at(int i, int j) const {
        auto it = index_.find(cell_key(i, j));
        require(it != index_.end(), ErrorCategory::validation, "FlowMatrix: cell not present");
        return values_[it->second];
    }

    int position_of(int i, int j) const {
        auto it = index_.find(cell_key(i, j));
        return it == index_.end() ? -1 : it->second;
    }

    FlowMatrix with_values(VectorXd values) const { return FlowMatrix(nodes_, cells_, std::move(values), time_); }

private:
    NodeSet nodes_;
    std::vector<Cell> cells_;
    VectorXd values_;
    std::optional<std::string> time_;
    std::unordered_map<int64_t, int> index_;
};

// Binary 2n x N incidence: column q has ones at the sender row i(q) and the
// receiver row n + j(q).  Stored implicitly through the active-cell list.
class RoutingMatrix {
public:
    RoutingMatrix() = default;
    RoutingMatrix(NodeSet nodes, std::vector<Cell> active_cells)
        : nodes_(std::move(nodes)), n_(nodes_.size()), cells_(std::move(active_cells)) {}

    const NodeSet& nodes() const { return nodes_; }
    int n_nodes() const { return n_; }
    int rows() const { return 2 * n_; }
    int cols() const { return static_cast<int>(cells_.size()); }
    const std::vector<Cell>& cells() const { return cells_; }
    int sender_row(int q) const { return cells_[q].i; }
    int receiver_row(int q) const { return n_ + cells_[q].j; }

    VectorXd apply(const VectorXd& x) const {
        require(x.size() == cols(), ErrorCategory::validation, "RoutingMatrix: dimension mismatch");
        VectorXd y = VectorXd::Zero(rows());
        for (int q = 0; q < cols(); ++q) {
            y[sender_row(q)] += x[q];
            y[receiver_row(q)] += x[q];
        }
        return y;
    }

    MatrixXd dense() const {
        MatrixXd a = MatrixXd::Zero(rows(), cols());
        for (int q = 0; q < cols(); ++q) {
            a(sender_row(q), q) = 1.0;
            a(receiver_row(q), q) = 1.0;
        }
        return a;
    }

private:
    NodeSet nodes_;
    int n_ = 0;
    std::vector<Cell> cells_;
};

inline RoutingMatrix build_routing_matrix(const NodeSet& nodes, const std::vector<Cell>& active_cells) {
    require(!active_cells.empty(), ErrorCategory::validation, "routing matrix needs at least one active cell");
    const int n = nodes.size();
    std::unordered_set<int64_t> seen;
    seen.reserve(active_cells.size());
    for (const Cell& c : active_cells) {
        require(c.i >= 0 && c.i < n && c.j >= 0 && c.j < n, ErrorCategory::validation,
                "routing matrix: cell index out of range");
        require(c.i != c.j, ErrorCategory::validation, "self-loops undefined");
        require(seen.insert(cell_key(c)).second, ErrorCategory::validation,
                "routing matrix: duplicate cell (" + nodes.label(c.i) + "," + nodes.label(c.j) + ")");
    }
    return RoutingMatrix(nodes, active_cells);
}

// Observed margins y = A x with the balance invariant checked on entry.
class MarginSystem {
public:
    MarginSystem() = default;

    MarginSystem(RoutingMatrix routing, VectorXd y, std::optional<std::string> time = {})
        : routing_(std::move(routing)), y_(std::move(y)), time_(std::move(time)) {
        require(y_.size() == routing_.rows(), ErrorCategory::validation, "MarginSystem: margin vector has wrong length");
        require((y_.array() >= 0.0).all(), ErrorCategory::validation, "MarginSystem: negative margin");
        const int n = routing_.n_nodes();
        const double out = y_.head(n).sum();
        const double in = y_.tail(n).sum();
        require(std::abs(out - in) <= kBalanceTol * std::max(1.0, out), ErrorCategory::validation,
                "MarginSystem: unbalanced margins (outflow " + std::to_string(out) + " vs inflow " +
                    std::to_string(in) + ")");
    }

    const RoutingMatrix& routing() const { return routing_; }
    const NodeSet& nodes() const { return routing_.nodes(); }
    const VectorXd& y() const { return y_; }
    const std::optional<std::string>& time() const { return time_; }
    int n_nodes() const { return routing_.n_nodes(); }

private:
    RoutingMatrix routing_;
    VectorXd y_;
    std::optional<std::string> time_;
};

inline MarginSystem apply_margins(const RoutingMatrix& routing, const FlowMatrix& x) {
    require(routing.cols() == x.size(), ErrorCategory::validation, "apply_margins: cell mismatch");
    for (int q = 0; q < routing.cols(); ++q)
        require(routing.cells()[q] == x.cells()[q], ErrorCategory::validation, "apply_margins: cell mismatch");
    return MarginSystem(routing, routing.apply(x.values()), x.time());
}

// The estimation problem after zero-margin rows and their incident cells are
// removed.  Every retained cell keeps pointers to its two margin rows inside
// the compacted row set, which is the only structure the solvers need.
class ReducedProblem {
public:
    ReducedProblem() = default;

    explicit ReducedProblem(const MarginSystem& margins)
        : nodes_(margins.nodes()), nodes_count_(margins.n_nodes()) {
        const RoutingMatrix& routing = margins.routing();
        const VectorXd& y_full = margins.y();
        original_cells_ = routing.cells();
        time_ = margins.time();

        std::vector<int> row_pos(routing.rows(), -1);
        for (int r = 0; r < routing.rows(); ++r) {
            if (y_full[r] > 0.0) {
                row_pos[r] = static_cast<int>(kept_rows_.size());
                kept_rows_.push_back(r);
            }
        }
        y_.resize(kept_rows_.size());
        for (size_t k = 0; k < kept_rows_.size(); ++k) y_[k] = y_full[kept_rows_[k]];

        for (int q = 0; q < routing.cols(); ++q) {
            const int s = row_pos[routing.sender_row(q)];
            const int r = row_pos[routing.receiver_row(q)];
            if (s < 0 || r < 0) {
                dropped_.push_back(routing.cells()[q]);
            } else {
                cells_.push_back(routing.cells()[q]);
                sender_.push_back(s);
                receiver_.push_back(r);
            }
        }

        // a positive margin with no incident active cell cannot be met
        std::vector<char> touched(kept_rows_.size(), 0);
        for (int s : sender_) touched[s] = 1;
        for (int r : receiver_) touched[r] = 1;
        for (size_t k = 0; k < kept_rows_.size(); ++k)
            require(touched[k], ErrorCategory::infeasible,
                    "reduce_problem: margin row " + std::to_string(kept_rows_[k]) +
                        " is positive but all of its cells are forced to zero");
    }

    const NodeSet& nodes() const { return nodes_; }
    int n_nodes() const { return nodes_count_; }
    int rows() const { return static_cast<int>(kept_rows_.size()); }
    int size() const { return static_cast<int>(cells_.size()); }
    const std::vector<int>& kept_rows() const { return kept_rows_; }
    const VectorXd& y() const { return y_; }
    const std::vector<Cell>& cells() const { return cells_; }
    int sender_of(int q) const { return sender_[q]; }
    int receiver_of(int q) const { return receiver_[q]; }
    const std::vector<Cell>& dropped_cells() const { return dropped_; }
    const std::vector<Cell>& original_cells() const { return original_cells_; }
    const std::optional<std::string>& time() const { return time_; }

    VectorXd margins_of(const VectorXd& mu) const {
        require(mu.size() == size(), ErrorCategory::validation, "margins_of: dimension mismatch");
        VectorXd out = VectorXd::Zero(rows());
        for (int q = 0; q < size(); ++q) {
            out[sender_[q]] += mu[q];
            out[receiver_[q]] += mu[q];
        }
        return out;
    }

    double residual_inf(const VectorXd& mu) const {
        return size() == 0 ? 0.0 : (margins_of(mu) - y_).lpNorm<Eigen::Infinity>();
    }

    // scale used by every relative feasibility tolerance
    double scale() const { return rows() == 0 ? 1.0 : std::max(1.0, y_.lpNorm<Eigen::Infinity>()); }

    double total_flow() const { double t = 0.0; for (size_t k = 0; k < kept_rows_.size(); ++k) if (kept_rows_[k] < nodes_count_) t += y_[k]; return t; }

    ReducedProblem with_margins(const VectorXd& y_new) const {
        require(y_new.size() == y_.size(), ErrorCategory::validation, "with_margins: dimension mismatch");
        require((y_new.array() > 0.0).all(), ErrorCategory::validation, "with_margins: margins must stay positive");
        ReducedProblem out(*this);
        out.y_ = y_new;
        return out;
    }

    // restrict the active set to a support mask; empty if some margin row loses all its cells
    std::optional<ReducedProblem> restrict_support(const std::vector<char>& keep) const {
        require(keep.size() == cells_.size(), ErrorCategory::validation, "restrict_support: mask size mismatch");
        ReducedProblem out(*this);
        out.cells_.clear();
        out.sender_.clear();
        out.receiver_.clear();
        for (int q = 0; q < size(); ++q) {
            if (keep[q]) {
                out.cells_.push_back(cells_[q]);
                out.sender_.push_back(sender_[q]);
                out.receiver_.push_back(receiver_[q]);
            } else {
                out.dropped_.push_back(cells_[q]);
            }
        }
        std::vector<char> touched(kept_rows_.size(), 0);
        for (int s : out.sender_) touched[s] = 1;
        for (int r : out.receiver_) touched[r] = 1;
        for (size_t k = 0; k < kept_rows_.size(); ++k)
            if (!touched[k]) return std::nullopt;
        return out;
    }

private:
    NodeSet nodes_;
    int nodes_count_ = 0;
    std::vector<int> kept_rows_;
    VectorXd y_;
    std::vector<Cell> cells_;
    std::vector<int> sender_, receiver_;
    std::vector<Cell> dropped_;
    std::vector<Cell> original_cells_;
    std::optional<std::string> time_;
};

inline ReducedProblem reduce_problem(const MarginSystem& margins) { return ReducedProblem(margins); }

// L1/L2 errors of an estimate against a known truth, with the multi-period
// aggregation used throughout the reports: overall = sum over periods,
// average = mean, SE = sample standard deviation / sqrt(T).
struct PeriodError {
    std::string t;
    double l1 = 0.0;
    double l2 = 0.0;
};

struct ErrorReport {
    double l1 = 0.0;  // single-period (or first period) values
    double l2 = 0.0;
    std::vector<PeriodError> per_period;
    double overall_l1 = 0.0, overall_l2 = 0.0;
    double average_l1 = 0.0, average_l2 = 0.0;
    double se_l1 = 0.0, se_l2 = 0.0;
};

inline PeriodError period_error(const FlowMatrix& estimate, const FlowMatrix& truth) {
    require(estimate.size() == truth.size(), ErrorCategory::validation, "error_metrics: cell sets differ");
    double l1 = 0.0, l2 = 0.0;
    for (int q = 0; q < estimate.size(); ++q) {
        const Cell& c = estimate.cells()[q];
        const int p = truth.position_of(c.i, c.j);
        require(p >= 0, ErrorCategory::validation, "error_metrics: cell sets differ");
        const double d = truth.values()[p] - estimate.values()[q];
        l1 += std::abs(d);
        l2 += d * d;
    }
    return {estimate.time().value_or(""), l1, std::sqrt(l2)};
}

inline ErrorReport aggregate_errors(std::vector<PeriodError> rows) {
    require(!rows.empty(), ErrorCategory::validation, "error_metrics: no periods");
    ErrorReport rep;
    rep.per_period = std::move(rows);
    const int T = static_cast<int>(rep.per_period.size());
    for (const PeriodError& pe : rep.per_period) {
        rep.overall_l1 += pe.l1;
        rep.overall_l2 += pe.l2;
    }
    rep.average_l1 = rep.overall_l1 / T;
    rep.average_l2 = rep.overall_l2 / T;
    if (T > 1) {
        double v1 = 0.0, v2 = 0.0;
        for (const PeriodError& pe : rep.per_period) {
            v1 += (pe.l1 - rep.average_l1) * (pe.l1 - rep.average_l1);
            v2 += (pe.l2 - rep.average_l2) * (pe.l2 - rep.average_l2);
        }
        rep.se_l1 = std::sqrt(v1 / (T - 1)) / std::sqrt(static_cast<double>(T));
        rep.se_l2 = std::sqrt(v2 / (T - 1)) / std::sqrt(static_cast<double>(T));
    }
    rep.l1 = rep.per_period.front().l1;
    rep.l2 = rep.per_period.front().l2;
    return rep;
}

inline ErrorReport error_metrics(const FlowMatrix& estimate, const FlowMatrix& truth) {
    return aggregate_errors({period_error(estimate, truth)});
}

inline ErrorReport error_metrics(const std::vector<FlowMatrix>& estimates, const std::vector<FlowMatrix>& truths) {
    require(estimates.size() == truths.size(), ErrorCategory::validation, "error_metrics: period count mismatch");
    std::vector<PeriodError> rows;
    rows.reserve(estimates.size());
    for (size_t t = 0; t < estimates.size(); ++t) rows.push_back(period_error(estimates[t], truths[t]));
    return aggregate_errors(std::move(rows));
}

}  // namespace netrecon
