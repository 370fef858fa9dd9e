#include "hdmi/pooling.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace hdmi;

namespace {

std::vector<EstimandValue> values_of(std::initializer_list<double> est, std::initializer_list<double> var, double df) {
    std::vector<EstimandValue> out;
    auto v = var.begin();
    for (double e : est) out.push_back({e, *v++, df});
    return out;
}

} // namespace

TEST(TQuantile, KnownValues) {
    EXPECT_NEAR(t_quantile(1.0, 0.975), 12.7062047361747, 1e-9);
    EXPECT_NEAR(t_quantile(10.0, 0.975), 2.22813885198627, 1e-9);
    EXPECT_NEAR(t_quantile(std::numeric_limits<double>::infinity(), 0.975), 1.95996398454005, 1e-9);
}

TEST(RubinPool, TwoImputationArithmetic) {
    const auto p = rubin_pool(values_of({1, 3}, {1, 1}, 100));
    EXPECT_DOUBLE_EQ(p.qbar, 2.0);
    EXPECT_DOUBLE_EQ(p.W, 1.0);
    EXPECT_DOUBLE_EQ(p.B, 2.0);
    EXPECT_DOUBLE_EQ(p.T, 4.0);
    EXPECT_NEAR(p.df, 16.0 / 9.0, 1e-12);
    EXPECT_NEAR(p.fmi, (3.0 + 2.0 / (16.0 / 9.0 + 3.0)) / 4.0, 1e-12);
    EXPECT_NEAR(p.fmi, 0.8547, 1e-4);
    const double half = t_quantile(16.0 / 9.0, 0.975) * 2.0;
    EXPECT_NEAR(p.ci_low, 2.0 - half, 1e-12);
    EXPECT_NEAR(p.ci_high, 2.0 + half, 1e-12);
}

TEST(RubinPool, NoBetweenVarianceFallsBackToCompleteData) {
    const auto p = rubin_pool(values_of({4, 4, 4}, {0.5, 1.0, 1.5}, 20));
    EXPECT_EQ(p.B, 0.0);
    EXPECT_DOUBLE_EQ(p.T, p.W);
    EXPECT_TRUE(std::isinf(p.df));
    EXPECT_NEAR(p.fmi, 2.0 / 23.0, 1e-15);
    const double half = t_quantile(20.0, 0.975) * 1.0;
    EXPECT_NEAR(p.ci_low, 4.0 - half, 1e-12);
    EXPECT_NEAR(p.ci_high, 4.0 + half, 1e-12);
}

TEST(RubinPool, ZeroWithinVarianceWarns) {
    const auto p = rubin_pool(values_of({1, 2, 4}, {0, 0, 0}, 10));
    EXPECT_EQ(p.fmi, 1.0);
    EXPECT_FALSE(p.warning.empty());
    EXPECT_LT(p.ci_low, p.qbar);
}

TEST(RubinPool, SingleImputationPassthrough) {
    const auto p = rubin_pool(values_of({2.5}, {0.25}, 9));
    EXPECT_TRUE(p.unpooled);
    EXPECT_EQ(p.qbar, 2.5);
    EXPECT_EQ(p.T, 0.25);
    EXPECT_NEAR(p.ci_high - p.qbar, t_quantile(9.0, 0.975) * 0.5, 1e-12);
}

TEST(RubinPool, RejectsBadInput) {
    EXPECT_THROW(rubin_pool({}), InputError);
    EXPECT_THROW(rubin_pool(values_of({1, 2}, {-1, 1}, 10)), InputError);
    EXPECT_THROW(rubin_pool(values_of({1, 2}, {1, 1}, 0.5)), InputError);
}

TEST(RubinPool, BarnardRubinShrinksDf) {
    const auto classic = rubin_pool(values_of({1.0, 1.3, 0.8, 1.1, 1.2}, {0.1, 0.1, 0.1, 0.1, 0.1}, 30));
    const auto br = rubin_pool(values_of({1.0, 1.3, 0.8, 1.1, 1.2}, {0.1, 0.1, 0.1, 0.1, 0.1}, 30), {.barnard_rubin = true});
    EXPECT_LT(br.df, classic.df);
    EXPECT_LT(br.df, 30.0);
    EXPECT_DOUBLE_EQ(br.T, classic.T);
}

TEST(RubinPool, PropertiesOnRandomInstances) {
    Rng rng(1);
    for (int t = 0; t < 1000; ++t) {
        const int d = 2 + static_cast<int>(rng.index(30));
        const double df = 5.0 + 200.0 * rng.uniform();
        std::vector<EstimandValue> v;
        for (int k = 0; k < d; ++k) v.push_back({rng.gaussian(3.0, 2.0), 0.01 + rng.uniform(), df});
        const auto p = rubin_pool(v);
        const double dd = static_cast<double>(d);
        EXPECT_NEAR(p.T, p.W + (1.0 + 1.0 / dd) * p.B, 1e-12 * std::max(1.0, p.T));
        EXPECT_LE(p.ci_low, p.qbar);
        EXPECT_GE(p.ci_high, p.qbar);
        EXPECT_GE(p.fmi, 0.0);
        EXPECT_LE(p.fmi, 1.0);

        auto shuffled = v;
        std::reverse(shuffled.begin(), shuffled.end());
        std::swap(shuffled.front(), shuffled[shuffled.size() / 2]);
        const auto ps = rubin_pool(shuffled);
        EXPECT_NEAR(ps.qbar, p.qbar, 1e-12);
        EXPECT_NEAR(ps.T, p.T, 1e-12);
        EXPECT_NEAR(ps.fmi, p.fmi, 1e-12);

        const double a = rng.gaussian(0.0, 3.0), b = rng.gaussian(0.0, 5.0);
        auto affine = v;
        for (auto& e : affine) {
            e.estimate = a * e.estimate + b;
            e.variance *= a * a;
        }
        const auto pa = rubin_pool(affine);
        EXPECT_NEAR(pa.qbar, a * p.qbar + b, 1e-9);
        EXPECT_NEAR(pa.T, a * a * p.T, 1e-9 * std::max(1.0, a * a * p.T));
        EXPECT_NEAR(pa.fmi, p.fmi, 1e-9);

        // Spreading the estimates apart (larger B, same W) widens the interval.
        auto wider = v;
        for (auto& e : wider) e.estimate = p.qbar + 1.5 * (e.estimate - p.qbar);
        const auto pw = rubin_pool(wider);
        EXPECT_GE(pw.ci_high - pw.ci_low, p.ci_high - p.ci_low - 1e-12);
    }
}

TEST(RubinPool, NormalMeanCoverageUnderMcar) {
    // Proper imputation under the normal model with a noninformative prior:
    // sigma2 | y_obs ~ (n_obs - 1) s^2 / chi2(n_obs - 1), mu | sigma2 ~ N(ybar, sigma2 / n_obs).
    const int seeds = 1000, d = 20;
    const Index n = 100;
    int covered = 0;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(derive_seed(2024, {static_cast<std::uint64_t>(s)}));
        Vector y(n);
        std::vector<bool> miss(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            y(i) = rng.gaussian(10.0, 2.0);
            miss[static_cast<std::size_t>(i)] = rng.uniform() < 0.3;
        }
        IndexList obs;
        for (Index i = 0; i < n; ++i)
            if (!miss[static_cast<std::size_t>(i)]) obs.push_back(i);
        const Vector yo = gather(y, obs);
        const double ybar = yo.mean(), s2 = sample_variance(yo);
        const double no = static_cast<double>(yo.size());
        std::vector<EstimandValue> ests;
        for (int k = 0; k < d; ++k) {
            const double sigma2 = (no - 1.0) * s2 / rng.chi_squared(no - 1.0);
            const double mu = rng.gaussian(ybar, std::sqrt(sigma2 / no));
            Vector completed = y;
            for (Index i = 0; i < n; ++i)
                if (miss[static_cast<std::size_t>(i)]) completed(i) = rng.gaussian(mu, std::sqrt(sigma2));
            ests.push_back(mean_estimand(completed));
        }
        const auto p = rubin_pool(ests);
        covered += p.ci_low <= 10.0 && 10.0 <= p.ci_high;
    }
    const double rate = covered / static_cast<double>(seeds);
    EXPECT_GE(rate, 0.93);
    EXPECT_LE(rate, 0.97);
}

TEST(Estimands, MeanOfOneTwoThree) {
    Vector x(3);
    x << 1, 2, 3;
    const auto e = mean_estimand(x);
    EXPECT_DOUBLE_EQ(e.estimate, 2.0);
    EXPECT_NEAR(e.variance, 1.0 / 3.0, 1e-15);
    EXPECT_EQ(e.df_complete, 2.0);
    EXPECT_THROW(mean_estimand(Vector::Ones(2)), InputError);
}

TEST(Estimands, VarianceOfStandardNormal) {
    Rng rng(3);
    const Index n = 100000;
    const Vector x = test::random_vector(rng, n);
    const auto e = variance_estimand(x);
    EXPECT_GE(e.estimate, 0.98);
    EXPECT_LE(e.estimate, 1.02);
    EXPECT_NEAR(e.variance, 2.0 / (n - 1.0), 0.1 * 2.0 / (n - 1.0));
}

TEST(Estimands, CovarianceWithItselfIsVariance) {
    Rng rng(4);
    const Vector x = test::random_vector(rng, 57, 2.0);
    const auto c = covariance_estimand(x, x);
    const auto v = variance_estimand(x);
    EXPECT_NEAR(c.estimate, v.estimate, 1e-12);
    EXPECT_NEAR(c.variance, v.variance, 1e-12);
}

TEST(Estimands, CoefficientsMatchNormalEquations) {
    Rng rng(5);
    const Index n = 60;
    const Matrix x = test::random_matrix(rng, n, 3);
    const Vector y = (x * Vector::LinSpaced(3, 1.0, 3.0)).array() + 2.0 + test::random_vector(rng, n).array();
    Matrix d(n, 4);
    d.col(0).setOnes();
    d.rightCols(3) = x;
    const Matrix inv = (d.transpose() * d).inverse();
    const Vector b = inv * d.transpose() * y;
    const double s2 = (y - d * b).squaredNorm() / (n - 4.0);
    const auto est = coefficient_estimands(x, y);
    ASSERT_EQ(est.size(), 4u);
    for (Index k = 0; k < 4; ++k) {
        EXPECT_NEAR(est[static_cast<std::size_t>(k)].estimate, b(k), 1e-9);
        EXPECT_NEAR(est[static_cast<std::size_t>(k)].variance, s2 * inv(k, k), 1e-9);
        EXPECT_EQ(est[static_cast<std::size_t>(k)].df_complete, n - 4.0);
    }
}

TEST(Estimands, NamedSpecsEvaluateConsistently) {
    Rng rng(6);
    const Matrix data = test::random_matrix(rng, 40, 4);
    const std::vector<std::string> names{"z1", "z2", "z3", "z4"};
    auto specs = moment_estimands({0, 2, 3}, names);
    EXPECT_EQ(specs.size(), 9u);
    EXPECT_EQ(specs[0].name, "mean:z1");
    EXPECT_EQ(specs[3].name, "var:z1");
    EXPECT_EQ(specs[6].name, "cov:z1:z3");
    const auto coef = coefficient_specs("m1", 1, {0, 3}, names);
    EXPECT_EQ(coef[2].name, "coef:m1:z4");
    specs.insert(specs.end(), coef.begin(), coef.end());
    const auto all = evaluate_estimands(specs, data);
    ASSERT_EQ(all.size(), specs.size());
    for (std::size_t k = 0; k < specs.size(); ++k) {
        const auto one = estimand_from_sample(specs[k], data);
        EXPECT_DOUBLE_EQ(all[k].estimate, one.estimate) << specs[k].name;
        EXPECT_DOUBLE_EQ(all[k].variance, one.variance) << specs[k].name;
    }
}
