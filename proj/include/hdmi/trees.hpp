#pragma once

#include "core.hpp"
#include "random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace hdmi {

struct TreeNode {
    Index split_column = -1;  // -1 marks a leaf
    double threshold = 0.0;   // rows with x < threshold go left
    int left = -1;
    int right = -1;
    double sse = 0.0;            // sum of squares of the node's training responses
    std::vector<Index> donors;   // leaf only: training row indices, with multiplicity

    bool is_leaf() const { return split_column < 0; }
};

/// Regression tree whose leaves keep their training rows as donor pools.
struct Tree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root
    Index q = 0;

    template <class Row>
    int leaf_for(const Row& x) const {
        int at = 0;
        while (!nodes[at].is_leaf()) {
            const auto& node = nodes[at];
            at = x(node.split_column) < node.threshold ? node.left : node.right;
        }
        return at;
    }

    Index leaf_count() const {
        return std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); });
    }

    double leaf_sse() const {
        double total = 0.0;
        for (const auto& n : nodes)
            if (n.is_leaf()) total += n.sse;
        return total;
    }

    /// Mean donor response of the leaf reached by x.
    template <class Row>
    double predict(const Row& x, const Vector& y_obs) const {
        const auto& d = nodes[leaf_for(x)].donors;
        double s = 0.0;
        for (Index i : d) s += y_obs(i);
        return s / static_cast<double>(d.size());
    }
};

struct TreeOptions {
    Index min_leaf = 5;
    double cp = 1e-4;  // minimum SSE reduction as a share of the root SSE
    Index mtry = 0;    // predictors sampled per split; 0 means all
};

namespace detail {

class TreeBuilder {
public:
    TreeBuilder(const Matrix& x, const Vector& y, const TreeOptions& opts, Rng* rng)
        : x_(x), y_(y), opts_(opts), rng_(rng) {}

    Tree build(std::vector<Index> rows) {
        tree_.q = x_.cols();
        root_sse_ = sse_of(rows);
        grow(std::move(rows));
        return std::move(tree_);
    }

private:
    struct Split {
        Index column = -1;
        double threshold = 0.0;
        double child_sse = 0.0;
    };

    double sse_of(const std::vector<Index>& rows) const {
        double sum = 0.0;
        for (Index i : rows) sum += y_(i);
        const double mean = sum / static_cast<double>(rows.size());
        double sse = 0.0;
        for (Index i : rows) sse += (y_(i) - mean) * (y_(i) - mean);
        return sse;
    }

    std::vector<Index> candidate_columns() {
        const Index q = x_.cols();
        std::vector<Index> cols;
        if (opts_.mtry <= 0 || opts_.mtry >= q || rng_ == nullptr) {
            cols.resize(static_cast<std::size_t>(q));
            std::iota(cols.begin(), cols.end(), Index{0});
            return cols;
        }
        for (auto c : rng_->sample_without_replacement(static_cast<std::size_t>(q), static_cast<std::size_t>(opts_.mtry)))
            cols.push_back(static_cast<Index>(c));
        std::sort(cols.begin(), cols.end());
        return cols;
    }

    Split best_split(const std::vector<Index>& rows, double node_sse) {
        Split best;
        best.child_sse = node_sse;
        const std::size_t n = rows.size();
        const auto min_leaf = static_cast<std::size_t>(opts_.min_leaf);
        if (n < 2 * min_leaf) return best;

        std::vector<Index> order(rows);
        for (Index col : candidate_columns()) {
            std::sort(order.begin(), order.end(), [&](Index a, Index b) { return x_(a, col) < x_(b, col); });
            double total = 0.0, total2 = 0.0;
            for (Index i : order) {
                total += y_(i);
                total2 += y_(i) * y_(i);
            }
            double left = 0.0, left2 = 0.0;
            for (std::size_t k = 0; k + 1 < n; ++k) {
                const double yi = y_(order[k]);
                left += yi;
                left2 += yi * yi;
                const std::size_t nl = k + 1, nr = n - nl;
                if (nl < min_leaf) continue;
                if (nr < min_leaf) break;
                const double lo = x_(order[k], col), hi = x_(order[k + 1], col);
                if (!(lo < hi)) continue;
                const double right = total - left, right2 = total2 - left2;
                const double sse = std::max(0.0, left2 - left * left / static_cast<double>(nl)) +
                                   std::max(0.0, right2 - right * right / static_cast<double>(nr));
                const double thr = lo + 0.5 * (hi - lo);
                // Columns and thresholds are visited in ascending order, so a
                // strict comparison keeps the lowest column and threshold on ties.
                if (sse < best.child_sse) best = {col, thr, sse};
            }
        }
        return best;
    }

    int grow(std::vector<Index> rows) {
        const int id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.emplace_back();
        const double node_sse = sse_of(rows);
        tree_.nodes[id].sse = node_sse;

        const Split s = best_split(rows, node_sse);
        const double reduction = node_sse - s.child_sse;
        if (s.column < 0 || !(reduction > 0.0) || reduction < opts_.cp * root_sse_) {
            tree_.nodes[id].donors = std::move(rows);
            return id;
        }
        std::vector<Index> left, right;
        for (Index i : rows) (x_(i, s.column) < s.threshold ? left : right).push_back(i);
        rows.clear();
        rows.shrink_to_fit();
        tree_.nodes[id].split_column = s.column;
        tree_.nodes[id].threshold = s.threshold;
        const int l = grow(std::move(left));
        const int r = grow(std::move(right));
        tree_.nodes[id].left = l;
        tree_.nodes[id].right = r;
        return id;
    }

    const Matrix& x_;
    const Vector& y_;
    TreeOptions opts_;
    Rng* rng_;
    Tree tree_;
    double root_sse_ = 0.0;
};

inline void check_tree_inputs(const Matrix& x, const Vector& y, Index min_leaf) {
    if (x.rows() != y.size()) throw std::invalid_argument("tree: X and y row counts differ");
    if (min_leaf < 1) throw std::invalid_argument("tree: min_leaf must be >= 1");
    if (x.rows() < 2 * min_leaf) throw InputError("tree: need at least 2 * min_leaf observed rows");
}

} // namespace detail

/// Greedy least-squares regression tree. A split must leave min_leaf rows on
/// each side and cut the node SSE by at least cp times the root SSE.
inline Tree cart_fit(const Matrix& X_obs, const Vector& y_obs, Index min_leaf = 5, double cp = 1e-4) {
    detail::check_tree_inputs(X_obs, y_obs, min_leaf);
    std::vector<Index> rows(static_cast<std::size_t>(X_obs.rows()));
    std::iota(rows.begin(), rows.end(), Index{0});
    detail::TreeBuilder builder(X_obs, y_obs, TreeOptions{min_leaf, cp, 0}, nullptr);
    return builder.build(std::move(rows));
}

/// One uniformly drawn donor response from the leaf each missing row reaches.
inline Vector cart_impute(const Tree& tree, const Vector& y_obs, const Matrix& X_mis, Rng& rng) {
    if (X_mis.cols() != tree.q) throw std::invalid_argument("cart_impute: column mismatch");
    Vector out(X_mis.rows());
    for (Index i = 0; i < X_mis.rows(); ++i) {
        const auto& donors = tree.nodes[tree.leaf_for(X_mis.row(i))].donors;
        out(i) = y_obs(donors[rng.index(donors.size())]);
    }
    return out;
}

struct Forest {
    std::vector<Tree> trees;
    Index mtry = 1;
    std::vector<std::vector<Index>> bootstrap_indices;
};

struct ForestOptions {
    Index trees = 10;
    Index mtry = 0;  // 0 means floor(sqrt(q))
    Index min_leaf = 5;
    double cp = 0.0;
    bool bootstrap = true;
};

inline Index default_mtry(Index q) { return std::max<Index>(1, static_cast<Index>(std::floor(std::sqrt(static_cast<double>(q))))); }

/// k trees, each grown on a bootstrap resample with mtry predictors drawn
/// afresh at every split. Leaf donors are original row indices.
inline Forest forest_fit(const Matrix& X_obs, const Vector& y_obs, Rng& rng, ForestOptions opts = {}) {
    detail::check_tree_inputs(X_obs, y_obs, opts.min_leaf);
    if (opts.trees < 1) throw std::invalid_argument("forest_fit: need at least one tree");
    const Index q = X_obs.cols();
    Forest forest;
    forest.mtry = opts.mtry > 0 ? opts.mtry : default_mtry(q);
    if (forest.mtry > q) throw std::invalid_argument("forest_fit: mtry exceeds predictor count");
    const auto n = static_cast<std::size_t>(X_obs.rows());
    for (Index t = 0; t < opts.trees; ++t) {
        std::vector<Index> rows(n);
        if (opts.bootstrap) {
            for (auto& r : rows) r = static_cast<Index>(rng.index(n));
        } else {
            std::iota(rows.begin(), rows.end(), Index{0});
        }
        forest.bootstrap_indices.push_back(rows);
        detail::TreeBuilder builder(X_obs, y_obs, TreeOptions{opts.min_leaf, opts.cp, forest.mtry}, &rng);
        forest.trees.push_back(builder.build(std::move(rows)));
    }
    return forest;
}

/// Pools the donors of every tree's leaf (keeping repeats) and draws one per row.
inline Vector forest_impute(const Forest& forest, const Vector& y_obs, const Matrix& X_mis, Rng& rng) {
    if (forest.trees.empty()) throw std::invalid_argument("forest_impute: empty forest");
    if (X_mis.cols() != forest.trees.front().q) throw std::invalid_argument("forest_impute: column mismatch");
    Vector out(X_mis.rows());
    std::vector<Index> pool;
    for (Index i = 0; i < X_mis.rows(); ++i) {
        pool.clear();
        for (const auto& tree : forest.trees) {
            const auto& d = tree.nodes[tree.leaf_for(X_mis.row(i))].donors;
            pool.insert(pool.end(), d.begin(), d.end());
        }
        out(i) = y_obs(pool[rng.index(pool.size())]);
    }
    return out;
}

} // namespace hdmi
