#include <gtest/gtest.h>

#include "test_util.hpp"

#include <sstream>

using namespace hdmi;

TEST(ResponseIndicator, AllObservedGivesZeros) {
    MissingMask m{BoolMatrix::Constant(4, 2, false), {0}};
    EXPECT_TRUE(response_indicator(m, 0).isZero());
}

TEST(ResponseIndicator, ReadsMaskColumn) {
    MissingMask m{BoolMatrix::Constant(4, 2, false), {1}};
    m.mask(1, 1) = true;
    m.mask(3, 1) = true;
    Vector expected(4);
    expected << 0, 1, 0, 1;
    EXPECT_EQ(response_indicator(m, 1), expected);
}

TEST(ResponseIndicator, OutOfRange) {
    MissingMask m{BoolMatrix::Constant(4, 2, false), {0}};
    EXPECT_THROW(response_indicator(m, 2), std::out_of_range);
}

TEST(Standardize, SimpleColumn) {
    Matrix x(3, 1);
    x << 1, 2, 3;
    auto [z, s] = standardize(x);
    EXPECT_NEAR(z(0, 0), -1.0, 1e-15);
    EXPECT_NEAR(z(1, 0), 0.0, 1e-15);
    EXPECT_NEAR(z(2, 0), 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(s.centers(0), 2.0);
    EXPECT_DOUBLE_EQ(s.scales(0), 1.0);
    EXPECT_FALSE(s.degenerate[0]);
}

TEST(Standardize, ConstantColumnFlagged) {
    Matrix x(3, 1);
    x << 4, 4, 4;
    auto [z, s] = standardize(x);
    EXPECT_TRUE(z.isZero());
    EXPECT_TRUE(s.degenerate[0]);
    EXPECT_DOUBLE_EQ(s.scales(0), 1.0);
}

TEST(Standardize, RandomMomentsAndRoundTrip) {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        Matrix x = test::random_matrix(rng, 100, 5, 3.0);
        x.array() += 7.0;
        auto [z, s] = standardize(x);
        for (Index j = 0; j < 5; ++j) {
            EXPECT_LT(std::abs(z.col(j).mean()), 1e-12);
            EXPECT_NEAR(sample_variance(z.col(j)), 1.0, 1e-10);
        }
        Matrix back = s.invert(z);
        EXPECT_LT(((back - x).array().abs() / x.array().abs()).maxCoeff(), 1e-10);
    }
}

TEST(PairwiseCorrelation, SelfAndSignFlip) {
    Rng rng(3);
    Vector x = test::random_vector(rng, 50);
    EXPECT_NEAR(*pairwise_correlation(x, x), 1.0, 1e-14);
    EXPECT_NEAR(*pairwise_correlation(x, Vector(-x)), -1.0, 1e-14);
}

TEST(PairwiseCorrelation, UndefinedCases) {
    Vector x(4), y(4);
    x << 1, 2, 3, 4;
    y << 2, 2, 2, 2;
    EXPECT_FALSE(pairwise_correlation(x, y).has_value());
    BoolVector miss = BoolVector::Constant(4, false);
    miss(0) = miss(1) = true;
    EXPECT_FALSE(pairwise_correlation(x, x, miss).has_value());
}

TEST(PairwiseCorrelation, UsesOnlyCompletePairs) {
    Vector x(5), y(5);
    x << 1, 2, 3, 4, 100;
    y << 2, 4, 6, 8, -50;
    BoolVector ym = BoolVector::Constant(5, false);
    ym(4) = true;
    EXPECT_NEAR(*pairwise_correlation(x, y, {}, ym), 1.0, 1e-14);
}

TEST(PairwiseCorrelation, IndependentDrawsNearZero) {
    Rng rng(5);
    Vector x = test::random_vector(rng, 10000), y = test::random_vector(rng, 10000);
    EXPECT_LT(std::abs(*pairwise_correlation(x, y)), 0.05);
}

TEST(PairwiseCorrelation, SymmetricAndAffineInvariant) {
    Rng rng(9);
    for (int rep = 0; rep < 200; ++rep) {
        Vector x = test::random_vector(rng, 30), y = test::random_vector(rng, 30);
        y += 0.5 * x;
        const double r = *pairwise_correlation(x, y);
        EXPECT_NEAR(*pairwise_correlation(y, x), r, 1e-12);
        const double a = 0.1 + 5.0 * rng.uniform(), b = rng.gaussian() * 10.0;
        Vector xs = (a * x.array() + b).matrix();
        Vector xn = (-a * x.array() + b).matrix();
        EXPECT_NEAR(*pairwise_correlation(xs, y), r, 1e-12);
        EXPECT_NEAR(*pairwise_correlation(xn, y), -r, 1e-12);
    }
}

TEST(Dataset, Invariants) {
    Matrix v = Matrix::Zero(2, 2);
    EXPECT_THROW(Dataset(v, {"a", "a"}), InputError);
    EXPECT_THROW(Dataset(v, {"a"}), InputError);
    v(0, 0) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(Dataset(v, {"a", "b"}), InputError);
    BoolMatrix m = BoolMatrix::Constant(2, 2, false);
    m(0, 0) = true;
    EXPECT_NO_THROW(Dataset(v, {"a", "b"}, m));
}

TEST(Csv, ParsesMissingTokensAndKeepsRawText) {
    std::istringstream in("a,b,c\n1.50,NA,3\n,2,-1e-3\n");
    auto t = read_csv(in);
    EXPECT_EQ(t.data.n(), 2);
    EXPECT_EQ(t.data.p(), 3);
    EXPECT_TRUE(t.data.is_missing(0, 1));
    EXPECT_TRUE(t.data.is_missing(1, 0));
    EXPECT_DOUBLE_EQ(t.data.values()(1, 2), -1e-3);
    std::ostringstream out;
    write_csv(out, t.data, &t.raw, &t.data.missing());
    EXPECT_EQ(out.str(), "a,b,c\n1.50,NA,3\nNA,2,-1e-3\n");
}

TEST(Csv, RejectsMalformedRows) {
    std::istringstream ragged("a,b\n1,2\n3\n");
    EXPECT_THROW(read_csv(ragged), InputError);
    std::istringstream text("a,b\n1,x\n");
    EXPECT_THROW(read_csv(text), InputError);
}

TEST(MissingMask, OutsideTargetsRejected) {
    MissingMask m{BoolMatrix::Constant(3, 2, false), {0}};
    m.mask(1, 1) = true;
    EXPECT_THROW(m.validate(), InputError);
}
