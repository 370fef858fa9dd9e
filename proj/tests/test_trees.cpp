#include "hdmi/trees.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <array>
#include <map>
#include <set>

using namespace hdmi;

namespace {

Matrix column(std::initializer_list<double> v) {
    Matrix m(static_cast<Index>(v.size()), 1);
    Index i = 0;
    for (double x : v) m(i++, 0) = x;
    return m;
}

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

void check_structure(const Tree& tree, Index n, Index min_leaf) {
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (const auto& node : tree.nodes) {
        if (node.is_leaf()) {
            EXPECT_GE(static_cast<Index>(node.donors.size()), min_leaf);
            for (Index i : node.donors) seen[static_cast<std::size_t>(i)]++;
        } else {
            EXPECT_TRUE(std::isfinite(node.threshold));
        }
    }
    for (int s : seen) EXPECT_EQ(s, 1);
}

} // namespace

TEST(CartFit, SeparableResponse) {
    const Matrix x = column({1, 2, 3, 7, 8, 9});
    const Vector y = vec({0, 0, 0, 10, 10, 10});
    const Tree tree = cart_fit(x, y, 3, 1e-4);
    ASSERT_EQ(tree.leaf_count(), 2);
    EXPECT_EQ(tree.nodes[0].split_column, 0);
    EXPECT_DOUBLE_EQ(tree.nodes[0].threshold, 5.0);
    const auto& left = tree.nodes[static_cast<std::size_t>(tree.nodes[0].left)].donors;
    const auto& right = tree.nodes[static_cast<std::size_t>(tree.nodes[0].right)].donors;
    for (Index i : left) EXPECT_EQ(y(i), 0.0);
    for (Index i : right) EXPECT_EQ(y(i), 10.0);
    EXPECT_EQ(tree.leaf_sse(), 0.0);

    Rng rng(1);
    Matrix xm(1, 1);
    xm(0, 0) = 2.0;
    for (int t = 0; t < 200; ++t) EXPECT_EQ(cart_impute(tree, y, xm, rng)(0), 0.0);
}

TEST(CartFit, ConstantResponseIsRootOnly) {
    Rng rng(2);
    const Matrix x = test::random_matrix(rng, 40, 3);
    const Vector y = Vector::Constant(40, 7.5);
    const Tree tree = cart_fit(x, y);
    EXPECT_EQ(tree.nodes.size(), 1u);
    check_structure(tree, 40, 5);
}

TEST(CartFit, RejectsTooFewRows) {
    const Matrix x = column({1, 2, 3});
    EXPECT_THROW(cart_fit(x, vec({1, 2, 3}), 5), InputError);
}

TEST(CartFit, SseDecreasesAlongEverySplit) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        const Matrix x = test::random_matrix(rng, 100, 5);
        Vector y = x.col(0).array().square() + x.col(1).array() + 0.5 * test::random_vector(rng, 100).array();
        const Tree tree = cart_fit(x, y);
        check_structure(tree, 100, 5);
        EXPECT_LE(tree.leaf_sse(), tree.nodes[0].sse + 1e-9);
        EXPECT_GT(tree.leaf_count(), 1);

        // Recompute SSE of each node directly from the rows reaching it.
        std::vector<std::vector<Index>> reach(tree.nodes.size());
        for (Index i = 0; i < 100; ++i) {
            int at = 0;
            for (;;) {
                reach[static_cast<std::size_t>(at)].push_back(i);
                const auto& node = tree.nodes[static_cast<std::size_t>(at)];
                if (node.is_leaf()) break;
                at = x(i, node.split_column) < node.threshold ? node.left : node.right;
            }
        }
        auto sse = [&](const std::vector<Index>& rows) {
            double m = 0.0;
            for (Index i : rows) m += y(i);
            m /= static_cast<double>(rows.size());
            double s = 0.0;
            for (Index i : rows) s += (y(i) - m) * (y(i) - m);
            return s;
        };
        for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
            const auto& node = tree.nodes[k];
            EXPECT_NEAR(node.sse, sse(reach[k]), 1e-9);
            if (!node.is_leaf()) {
                const double children = sse(reach[static_cast<std::size_t>(node.left)]) +
                                        sse(reach[static_cast<std::size_t>(node.right)]);
                EXPECT_LT(children, node.sse);
                EXPECT_GE(node.sse - children, 1e-4 * tree.nodes[0].sse);
            }
        }
    }
}

TEST(CartFit, TiesPreferLowestColumn) {
    // Columns 0 and 1 are identical, so both give the same best split.
    Matrix x(10, 2);
    Vector y(10);
    for (Index i = 0; i < 10; ++i) {
        x(i, 0) = x(i, 1) = static_cast<double>(i);
        y(i) = i < 5 ? 0.0 : 1.0;
    }
    const Tree tree = cart_fit(x, y);
    EXPECT_EQ(tree.nodes[0].split_column, 0);
}

TEST(CartFit, InvariantToMonotoneTransform) {
    Rng rng(3);
    const Matrix x = test::random_matrix(rng, 80, 3);
    const Vector y = x.col(1).array().sin() * 3.0 + test::random_vector(rng, 80).array();
    Matrix z = x;
    z.col(1) = x.col(1).array().exp();
    z.col(2) = -1.0 / (1.0 + x.col(2).array().exp());

    const Tree a = cart_fit(x, y);
    const Tree b = cart_fit(z, y);
    ASSERT_EQ(a.nodes.size(), b.nodes.size());
    for (std::size_t k = 0; k < a.nodes.size(); ++k) {
        EXPECT_EQ(a.nodes[k].split_column, b.nodes[k].split_column);
        EXPECT_EQ(a.nodes[k].left, b.nodes[k].left);
        if (a.nodes[k].is_leaf()) {
            auto da = a.nodes[k].donors, db = b.nodes[k].donors;
            std::sort(da.begin(), da.end());
            std::sort(db.begin(), db.end());
            EXPECT_EQ(da, db);
        }
    }
}

TEST(CartImpute, RootOnlyDrawsFromAllDonors) {
    Rng rng(4);
    const Matrix x = test::random_matrix(rng, 12, 2);
    const Vector y = Vector::Constant(12, 1.0);
    Vector y_donor = y;
    for (Index i = 0; i < 12; ++i) y_donor(i) = static_cast<double>(i % 3);
    const Tree tree = cart_fit(x, y);
    ASSERT_EQ(tree.nodes.size(), 1u);
    std::map<double, int> counts;
    const Matrix xm = test::random_matrix(rng, 30000, 2);
    const Vector draws = cart_impute(tree, y_donor, xm, rng);
    for (Index i = 0; i < draws.size(); ++i) counts[draws(i)]++;
    ASSERT_EQ(counts.size(), 3u);
    for (auto& [v, c] : counts) EXPECT_NEAR(c / 30000.0, 1.0 / 3.0, 0.01) << v;
}

TEST(CartImpute, LeafDonorFrequencies) {
    // One leaf holding responses {1, 2, 3}.
    Tree tree;
    tree.q = 1;
    tree.nodes.emplace_back();
    tree.nodes[0].donors = {0, 1, 2};
    const Vector y = vec({1, 2, 3});
    Rng rng(5);
    const Vector draws = cart_impute(tree, y, Matrix::Zero(100000, 1), rng);
    std::array<int, 3> counts{};
    for (Index i = 0; i < draws.size(); ++i) counts[static_cast<std::size_t>(draws(i)) - 1]++;
    for (int c : counts) EXPECT_NEAR(c / 1e5, 1.0 / 3.0, 0.01);
}

TEST(CartImpute, DonorClosure) {
    Rng rng(6);
    const Matrix x = test::random_matrix(rng, 60, 4);
    const Vector y = x.col(0) + test::random_vector(rng, 60);
    const std::set<double> observed(y.data(), y.data() + y.size());
    const Tree tree = cart_fit(x, y);
    const Vector imp = cart_impute(tree, y, test::random_matrix(rng, 500, 4, 3.0), rng);
    for (Index i = 0; i < imp.size(); ++i) EXPECT_TRUE(observed.count(imp(i)));
    Rng frng(7);
    const Forest forest = forest_fit(x, y, frng);
    const Vector fimp = forest_impute(forest, y, test::random_matrix(rng, 500, 4, 3.0), frng);
    for (Index i = 0; i < fimp.size(); ++i) EXPECT_TRUE(observed.count(fimp(i)));
}

TEST(ForestFit, DegenerateForestEqualsCart) {
    Rng rng(8);
    const Matrix x = test::random_matrix(rng, 70, 4);
    const Vector y = x.col(2) * 2.0 + test::random_vector(rng, 70);
    const Tree cart = cart_fit(x, y, 5, 1e-4);
    ForestOptions opts;
    opts.trees = 1;
    opts.mtry = 4;
    opts.cp = 1e-4;
    opts.bootstrap = false;
    const Forest forest = forest_fit(x, y, rng, opts);
    const Tree& t = forest.trees[0];
    ASSERT_EQ(t.nodes.size(), cart.nodes.size());
    for (std::size_t k = 0; k < t.nodes.size(); ++k) {
        EXPECT_EQ(t.nodes[k].split_column, cart.nodes[k].split_column);
        EXPECT_EQ(t.nodes[k].threshold, cart.nodes[k].threshold);
        EXPECT_EQ(t.nodes[k].donors, cart.nodes[k].donors);
    }
}

TEST(ForestFit, BootstrapRecordAndDefaults) {
    Rng rng(9);
    const Matrix x = test::random_matrix(rng, 50, 9);
    const Vector y = test::random_vector(rng, 50);
    const Forest forest = forest_fit(x, y, rng);
    EXPECT_EQ(forest.trees.size(), 10u);
    EXPECT_EQ(forest.mtry, 3);
    for (const auto& rec : forest.bootstrap_indices) {
        EXPECT_EQ(rec.size(), 50u);
        for (Index i : rec) EXPECT_LT(i, 50);
    }
    for (std::size_t t = 0; t < forest.trees.size(); ++t) {
        Index donors = 0;
        for (const auto& node : forest.trees[t].nodes)
            if (node.is_leaf()) {
                EXPECT_GE(static_cast<Index>(node.donors.size()), 5);
                donors += static_cast<Index>(node.donors.size());
            }
        EXPECT_EQ(donors, 50);
    }
}

TEST(ForestFit, WeakMtryStillFindsSignal) {
    // Only x2 predicts y; with mtry = 1 roughly half the root splits see it.
    Rng rng(10);
    Matrix x = test::random_matrix(rng, 100, 2);
    Vector y = 3.0 * x.col(1) + 0.3 * test::random_vector(rng, 100);
    ForestOptions opts;
    opts.mtry = 1;
    const Forest forest = forest_fit(x, y, rng, opts);
    int uses = 0;
    for (const auto& t : forest.trees) {
        bool any = false;
        for (const auto& node : t.nodes) any = any || node.split_column == 1;
        uses += any;
    }
    EXPECT_GE(uses, 1);
}

TEST(ForestImpute, PoolKeepsMultiplicity) {
    const Vector y = vec({1, 2});
    Forest forest;
    for (Index donor : {0, 0, 1}) {
        Tree t;
        t.q = 1;
        t.nodes.emplace_back();
        t.nodes[0].donors = {donor};
        forest.trees.push_back(t);
    }
    Rng rng(11);
    const Vector draws = forest_impute(forest, y, Matrix::Zero(100000, 1), rng);
    const double ones = (draws.array() == 1.0).cast<double>().mean();
    EXPECT_NEAR(ones, 2.0 / 3.0, 0.01);
}

TEST(ForestImpute, RootOnlyTreesDrawUniformly) {
    Rng rng(12);
    const Matrix x = test::random_matrix(rng, 20, 2);
    const Vector flat = Vector::Constant(20, 3.0);
    const Forest forest = forest_fit(x, flat, rng);
    for (const auto& t : forest.trees) ASSERT_EQ(t.nodes.size(), 1u);
    Vector donors(20);
    for (Index i = 0; i < 20; ++i) donors(i) = i < 10 ? 0.0 : 1.0;
    // Bootstrap pools are uneven per tree but the union over ten trees is close to uniform.
    const Vector draws = forest_impute(forest, donors, Matrix::Zero(50000, 2), rng);
    std::size_t total = 0, ones_in_pool = 0;
    for (const auto& rec : forest.bootstrap_indices)
        for (Index i : rec) {
            ++total;
            ones_in_pool += i >= 10;
        }
    EXPECT_NEAR(draws.mean(), static_cast<double>(ones_in_pool) / static_cast<double>(total), 0.01);
}

TEST(ForestImpute, DeterministicGivenSeed) {
    Rng data(13);
    const Matrix x = test::random_matrix(data, 60, 5);
    const Vector y = x.col(0) + test::random_vector(data, 60);
    const Matrix xm = test::random_matrix(data, 10, 5);
    Rng a(5), b(5);
    const Vector ia = forest_impute(forest_fit(x, y, a), y, xm, a);
    const Vector ib = forest_impute(forest_fit(x, y, b), y, xm, b);
    EXPECT_EQ(ia, ib);
}

TEST(ForestImpute, AveragingReducesPredictionVariance) {
    Rng data(14);
    const Matrix x = test::random_matrix(data, 120, 3);
    const Vector y = x.col(0).array().sin() * 2.0 + x.col(1).array() + test::random_vector(data, 120).array();
    const Matrix grid = test::random_matrix(data, 25, 3);

    auto spread = [&](Index trees) {
        std::vector<Vector> preds;
        for (std::uint64_t s = 0; s < 30; ++s) {
            Rng rng(1000 + s);
            ForestOptions opts;
            opts.trees = trees;
            const Forest f = forest_fit(x, y, rng, opts);
            Vector p = Vector::Zero(grid.rows());
            for (const auto& t : f.trees)
                for (Index i = 0; i < grid.rows(); ++i) p(i) += t.predict(grid.row(i), y);
            preds.push_back(p / static_cast<double>(trees));
        }
        double total = 0.0;
        for (Index i = 0; i < grid.rows(); ++i) {
            Vector col(static_cast<Index>(preds.size()));
            for (std::size_t s = 0; s < preds.size(); ++s) col(static_cast<Index>(s)) = preds[s](i);
            total += sample_variance(col);
        }
        return total;
    };
    EXPECT_LT(spread(10), spread(1));
}
