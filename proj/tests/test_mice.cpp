#include "hdmi/amputation.hpp"
#include "hdmi/mice.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

using namespace hdmi;

namespace {

// n rows: z1, z2 targets; z3..z6 fully observed and correlated with the targets.
struct Toy {
    Dataset data;
    MissingMask mask;
    Matrix truth;
};

Toy make_toy(std::uint64_t seed, Index n = 80, double pm = 0.3) {
    Rng rng(seed);
    Matrix x = test::random_matrix(rng, n, 6);
    x.col(0) = (0.8 * x.col(2) - 0.5 * x.col(3) + 0.6 * x.col(0)).array() + 1.0;
    x.col(1) = (0.4 * x.col(0) + 0.7 * x.col(4) + 0.5 * x.col(1)).array() + 2.0;
    MarSpec spec;
    spec.targets = {0, 1};
    spec.predictors = {2, 5};
    spec.slopes = Vector::Ones(2);
    spec.pm = pm;
    Toy t;
    t.mask = impose_mar(x, spec, rng);
    t.truth = x;
    t.data = Dataset::with_default_names(x).masked(t.mask.mask);
    return t;
}

ImputationSpec quick_spec(Method m, std::uint64_t seed = 7) {
    ImputationSpec s = ImputationSpec::for_method(m, seed);
    s.iterations = 3;
    s.chains = 2;
    s.params.blasso_sweeps = 3;
    s.params.analysis_vars = {0, 1, 2};
    s.params.oracle_vars = {0, 1, 2, 3, 4};
    return s;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

} // namespace

TEST(ParseMethod, NamesRoundTrip) {
    for (Method m : kAllMethods) EXPECT_EQ(parse_method(method_name(m)), m);
    EXPECT_EQ(parse_method("mi-or"), Method::MI_OR);
    EXPECT_EQ(parse_method("bridge"), Method::BRIDGE);
    EXPECT_FALSE(parse_method("GS").has_value());
    EXPECT_EQ(ImputationSpec::for_method(Method::BLASSO).iterations, 200);
    EXPECT_EQ(ImputationSpec::for_method(Method::IURR).iterations, 50);
}

TEST(InitializeFill, NoMissingIsIdentity) {
    Rng rng(1);
    const Dataset ds = Dataset::with_default_names(test::random_matrix(rng, 10, 3));
    const Dataset out = initialize_fill(ds, MissingMask::from_dataset(ds), rng);
    EXPECT_TRUE(bitwise_equal(out.values(), ds.values()));
}

TEST(InitializeFill, ConstantDonorsAndErrors) {
    Matrix v = Matrix::Constant(6, 2, 4.25);
    v.col(1) << 1, 2, 3, 4, 5, 6;
    BoolMatrix miss = BoolMatrix::Constant(6, 2, false);
    miss(1, 0) = miss(4, 0) = true;
    const Dataset ds = Dataset::with_default_names(v, miss);
    Rng rng(2);
    const Dataset out = initialize_fill(ds, MissingMask::from_dataset(ds), rng);
    EXPECT_EQ(out.values()(1, 0), 4.25);
    EXPECT_EQ(out.values()(4, 0), 4.25);
    EXPECT_FALSE(out.has_missing());

    BoolMatrix all = BoolMatrix::Constant(6, 2, false);
    all.col(0).setConstant(true);
    const Dataset empty = Dataset::with_default_names(v, all);
    EXPECT_THROW(initialize_fill(empty, MissingMask::from_dataset(empty), rng), InputError);
}

TEST(InitializeFill, UniformOverDonors) {
    const Index n = 100002;
    Matrix v = Matrix::Zero(n, 1);
    v(1, 0) = 1.0;
    BoolMatrix miss = BoolMatrix::Constant(n, 1, true);
    miss(0, 0) = miss(1, 0) = false;
    const Dataset ds = Dataset::with_default_names(v, miss);
    Rng rng(3);
    const Dataset out = initialize_fill(ds, MissingMask::from_dataset(ds), rng);
    const double mean = out.values().col(0).tail(n - 2).mean();
    EXPECT_GE(mean, 0.49);
    EXPECT_LE(mean, 0.51);
}

TEST(Quickpred, SelectsByTargetOrIndicatorCorrelation) {
    Rng rng(4);
    const Index n = 4000;
    Matrix v(n, 5);
    BoolMatrix miss = BoolMatrix::Constant(n, 5, false);
    for (Index i = 0; i < n; ++i) {
        const double y = rng.gaussian();
        const bool m = rng.uniform() < 0.3;
        v(i, 0) = y;
        v(i, 1) = 0.5 * y + std::sqrt(0.75) * rng.gaussian();  // corr 0.5 with target
        v(i, 2) = rng.gaussian();                              // unrelated
        v(i, 3) = (m ? 0.9 : 0.0) + rng.gaussian();            // tied to the indicator only
        v(i, 4) = 3.0;                                         // constant: correlation undefined
        miss(i, 0) = m;
    }
    const Dataset ds = Dataset::with_default_names(v, miss);
    const MissingMask mask = MissingMask::from_dataset(ds);
    const Vector ind = response_indicator(mask, 0);
    const BoolVector m0 = miss.col(0);
    // Premises of the example, checked on the realized sample.
    EXPECT_GT(std::abs(*pairwise_correlation(v.col(1), v.col(0), {}, m0)), 0.45);
    EXPECT_LT(std::abs(*pairwise_correlation(v.col(2), v.col(0), {}, m0)), 0.1);
    EXPECT_LT(std::abs(*pairwise_correlation(v.col(2), ind)), 0.1);
    EXPECT_LT(std::abs(*pairwise_correlation(v.col(3), v.col(0), {}, m0)), 0.1);
    const double r3 = std::abs(*pairwise_correlation(v.col(3), ind));
    EXPECT_GT(r3, 0.15);
    EXPECT_LT(r3, 0.5);

    EXPECT_EQ(quickpred_select(ds, mask, 0, 0.1), (IndexList{1, 3}));
    EXPECT_EQ(quickpred_select(ds, mask, 0, 0.0), (IndexList{1, 2, 3}));
}

TEST(Quickpred, UnitThresholdKeepsOnlyExactCollinearity) {
    Rng rng(5);
    const Index n = 50;
    Matrix v = test::random_matrix(rng, n, 3);
    v.col(1) = 2.0 * v.col(0).array() + 1.0;
    v.col(2) = v.col(0) + 0.01 * test::random_vector(rng, n);
    BoolMatrix miss = BoolMatrix::Constant(n, 3, false);
    miss(3, 0) = true;
    const Dataset ds = Dataset::with_default_names(v, miss);
    EXPECT_EQ(quickpred_select(ds, MissingMask::from_dataset(ds), 0, 1.0), (IndexList{1}));
    EXPECT_THROW(quickpred_select(ds, MissingMask::from_dataset(ds), 0, 1.5), std::invalid_argument);
}

TEST(MiceRun, ZeroMissingGivesCopies) {
    Rng rng(6);
    const Dataset ds = Dataset::with_default_names(test::random_matrix(rng, 30, 4));
    ImputationSpec spec = quick_spec(Method::BRIDGE);
    spec.chains = 3;
    const auto mi = mice_run(ds, MissingMask::from_dataset(ds), spec);
    ASSERT_EQ(mi.completed.size(), 3u);
    for (const auto& c : mi.completed) EXPECT_TRUE(bitwise_equal(c.values(), ds.values()));
    EXPECT_TRUE(mi.trace.entries.empty());
}

TEST(MiceRun, EveryMethodPreservesObservedCells) {
    const Toy toy = make_toy(11);
    for (Method m : kAllMethods) {
        ImputationSpec spec = quick_spec(m);
        const auto mi = mice_run(toy.data, toy.mask, spec);
        ASSERT_EQ(mi.completed.size(), 2u) << method_name(m);
        EXPECT_EQ(mi.trace.entries.size(), 2u * 3u * 2u) << method_name(m);
        for (const auto& e : mi.trace.entries) {
            EXPECT_TRUE(std::isfinite(e.mean)) << method_name(m);
            EXPECT_TRUE(std::isfinite(e.sd)) << method_name(m);
        }
        for (const auto& c : mi.completed) {
            EXPECT_FALSE(c.has_missing());
            for (Index j = 0; j < c.p(); ++j)
                for (Index i = 0; i < c.n(); ++i) {
                    const double got = c.values()(i, j);
                    EXPECT_TRUE(std::isfinite(got)) << method_name(m);
                    if (!toy.mask.mask(i, j))
                        EXPECT_EQ(std::memcmp(&got, &toy.data.values()(i, j), sizeof(double)), 0)
                            << method_name(m) << " changed observed cell " << i << "," << j;
                }
        }
    }
}

TEST(MiceRun, DonorMethodsImputeObservedValues) {
    const Toy toy = make_toy(12);
    for (Method m : {Method::MI_CART, Method::MI_RF}) {
        const auto mi = mice_run(toy.data, toy.mask, quick_spec(m));
        for (Index j : {0, 1}) {
            std::set<double> donors;
            for (Index i = 0; i < toy.data.n(); ++i)
                if (!toy.mask.mask(i, j)) donors.insert(toy.data.values()(i, j));
            for (const auto& c : mi.completed)
                for (Index i = 0; i < c.n(); ++i)
                    if (toy.mask.mask(i, j)) EXPECT_TRUE(donors.count(c.values()(i, j))) << method_name(m);
        }
    }
}

TEST(MiceRun, DeterministicAndIndependentOfScheduling) {
    const Toy toy = make_toy(13);
    for (Method m : {Method::BRIDGE, Method::IURR, Method::MI_RF}) {
        ImputationSpec spec = quick_spec(m);
        spec.chains = 4;
        const auto a = mice_run(toy.data, toy.mask, spec);
        const auto b = mice_run(toy.data, toy.mask, spec);
        const auto c = mice_run(toy.data, toy.mask, spec, RunOptions{3, {}});
        spec.chains = 2;
        const auto prefix = mice_run(toy.data, toy.mask, spec);
        for (std::size_t k = 0; k < 4; ++k) {
            EXPECT_TRUE(bitwise_equal(a.completed[k].values(), b.completed[k].values())) << method_name(m);
            EXPECT_TRUE(bitwise_equal(a.completed[k].values(), c.completed[k].values())) << method_name(m);
        }
        // Chain k depends only on (seed, k).
        for (std::size_t k = 0; k < 2; ++k)
            EXPECT_TRUE(bitwise_equal(a.completed[k].values(), prefix.completed[k].values())) << method_name(m);
        ASSERT_EQ(a.trace.entries.size(), c.trace.entries.size());
        for (std::size_t k = 0; k < a.trace.entries.size(); ++k) EXPECT_EQ(a.trace.entries[k].mean, c.trace.entries[k].mean);
    }
}

TEST(MiceRun, SymmetricPooledStatisticIgnoresChainOrder) {
    const Toy toy = make_toy(14);
    auto mi = mice_run(toy.data, toy.mask, quick_spec(Method::BRIDGE));
    const auto specs = moment_estimands({0, 1}, toy.data.columns());
    const auto before = pool_estimands(mi, specs);
    std::reverse(mi.completed.begin(), mi.completed.end());
    const auto after = pool_estimands(mi, specs);
    for (std::size_t k = 0; k < specs.size(); ++k) {
        EXPECT_NEAR(before[k].qbar, after[k].qbar, 1e-12);
        EXPECT_NEAR(before[k].T, after[k].T, 1e-12);
    }
}

TEST(MiceRun, AnalysisAndOracleDispatchAgree) {
    const Toy toy = make_toy(15);
    ImputationSpec am = quick_spec(Method::MI_AM);
    ImputationSpec orc = quick_spec(Method::MI_OR);
    am.params.analysis_vars = {0, 1, 3, 4};
    orc.params.oracle_vars = {0, 1, 3, 4};
    const auto a = mice_run(toy.data, toy.mask, am);
    const auto b = mice_run(toy.data, toy.mask, orc);
    for (std::size_t k = 0; k < a.completed.size(); ++k)
        EXPECT_TRUE(bitwise_equal(a.completed[k].values(), b.completed[k].values()));
}

TEST(MiceRun, OracleRecoversCompleteDataMean) {
    // y = 1 + 2 x1 - x2 + noise, y MAR on x1; the oracle model uses (x1, x2).
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng(derive_seed(500, {s}));
        const Index n = 200;
        Matrix v(n, 3);
        for (Index i = 0; i < n; ++i) {
            v(i, 1) = rng.gaussian();
            v(i, 2) = rng.gaussian();
            v(i, 0) = 1.0 + 2.0 * v(i, 1) - v(i, 2) + 0.5 * rng.gaussian();
        }
        MarSpec ms;
        ms.targets = {0};
        ms.predictors = {1};
        ms.slopes = Vector::Ones(1);
        const MissingMask mask = impose_mar(v, ms, rng);
        const Dataset ds = Dataset::with_default_names(v).masked(mask.mask);
        ImputationSpec spec = ImputationSpec::for_method(Method::MI_OR, s);
        spec.iterations = 5;
        spec.params.oracle_vars = {0, 1, 2};
        const auto mi = mice_run(ds, mask, spec);
        const auto pooled = pool_estimands(mi, moment_estimands({0}, ds.columns()));
        EXPECT_LT(std::abs(pooled[0].qbar - v.col(0).mean()), 3.0 * std::sqrt(pooled[0].T)) << "seed " << s;
    }
}

TEST(MiceRun, IurrModelUsesExactlyTheLassoActiveSet) {
    const Toy toy = make_toy(16, 120);
    int steps = 0;
    RunOptions opts;
    opts.observer = [&](const StepObservation& o) {
        ++steps;
        ASSERT_TRUE(o.lasso_active.has_value());
        EXPECT_EQ(o.design_columns, *o.lasso_active);
        ASSERT_NE(o.design, nullptr);
        EXPECT_EQ(o.design->cols(), static_cast<Index>(o.lasso_active->size()));
        for (Index k : o.design_columns) EXPECT_NE(k, o.target);
    };
    mice_run(toy.data, toy.mask, quick_spec(Method::IURR), opts);
    EXPECT_EQ(steps, 2 * 3 * 2);
}

TEST(MiceRun, QuickpredDesignHasNoNearDuplicatePairs) {
    Rng rng(17);
    const Index n = 60;
    Matrix v = test::random_matrix(rng, n, 8);
    v.col(0) = v.col(2) + v.col(3) + 0.5 * v.col(0);
    v.col(4) = v.col(2);                                               // duplicate
    v.col(5) = v.col(3) + 1e-4 * test::random_vector(rng, n);           // |r| just under 1
    v.col(6) = v.col(2) - v.col(3) + 1e-9 * test::random_vector(rng, n);  // near-dependent triple
    MarSpec ms;
    ms.targets = {0};
    ms.predictors = {7};
    ms.slopes = Vector::Ones(1);
    const MissingMask mask = impose_mar(v, ms, rng);
    const Dataset ds = Dataset::with_default_names(v).masked(mask.mask);
    ImputationSpec spec = quick_spec(Method::MI_QP);
    spec.params.qp_threshold = 0.0;
    const IndexList screened = quickpred_select(ds, mask, 0, 0.0);
    int steps = 0;
    RunOptions opts;
    opts.observer = [&](const StepObservation& o) {
        ++steps;
        ASSERT_NE(o.design, nullptr);
        const Matrix& x = *o.design;
        for (Index a = 0; a < x.cols(); ++a)
            for (Index b = a + 1; b < x.cols(); ++b)
                EXPECT_LE(std::abs(*pairwise_correlation(x.col(a), x.col(b))), 0.999);
        for (Index k : o.design_columns) EXPECT_TRUE(std::binary_search(screened.begin(), screened.end(), k));
        // Columns 2 and 4 are identical and 3, 5 nearly so: one of each pair survives.
        const auto has = [&](Index k) { return std::count(o.design_columns.begin(), o.design_columns.end(), k) > 0; };
        EXPECT_FALSE(has(2) && has(4));
        EXPECT_FALSE(has(3) && has(5));
        EXPECT_FALSE(has(2) && has(3) && has(6));
    };
    mice_run(ds, mask, spec, opts);
    EXPECT_EQ(steps, 2 * 3);
}

TEST(MiceRun, FailureNamesTargetAndIteration) {
    Rng rng(18);
    Matrix v = test::random_matrix(rng, 12, 3);
    BoolMatrix miss = BoolMatrix::Constant(12, 3, false);
    for (Index i = 0; i < 5; ++i) miss(i, 1) = true;  // 7 observed rows < 2 * min_leaf
    const Dataset ds = Dataset::with_default_names(v, miss);
    try {
        mice_run(ds, MissingMask::from_dataset(ds), quick_spec(Method::MI_CART));
        FAIL() << "expected an imputation error";
    } catch (const ImputationError& e) {
        EXPECT_EQ(e.target, 1);
        EXPECT_EQ(e.iteration, 1);
        EXPECT_EQ(e.method, Method::MI_CART);
        EXPECT_NE(std::string(e.what()).find("z2"), std::string::npos);
    }
}

TEST(MiceRun, RejectsInvalidSpecs) {
    const Toy toy = make_toy(19);
    ImputationSpec s = quick_spec(Method::BRIDGE);
    s.iterations = 0;
    EXPECT_THROW(mice_run(toy.data, toy.mask, s), InputError);
    s = quick_spec(Method::MI_AM);
    s.params.analysis_vars.clear();
    EXPECT_THROW(mice_run(toy.data, toy.mask, s), InputError);
    s = quick_spec(Method::MI_OR);
    s.params.oracle_vars = {0, 17};
    EXPECT_THROW(mice_run(toy.data, toy.mask, s), InputError);
}

TEST(MiceRun, TraceCsvLayout) {
    const Toy toy = make_toy(20);
    const auto mi = mice_run(toy.data, toy.mask, quick_spec(Method::BRIDGE));
    std::ostringstream out;
    mi.trace.write_csv(out, toy.data.columns());
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "chain,iteration,target,mean,sd");
    std::getline(in, line);
    EXPECT_EQ(line.rfind("0,1,z1,", 0), 0u);
    int rows = 1;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 12);
}

TEST(RidgeKappaCv, SingleValueGrid) {
    const Toy toy = make_toy(21);
    const auto specs = moment_estimands({0, 1}, toy.data.columns());
    const auto sel = ridge_kappa_cv(toy.data, toy.mask, {1e-3}, quick_spec(Method::BRIDGE), specs);
    EXPECT_EQ(sel.kappa, 1e-3);
    EXPECT_EQ(sel.pilot_count, 1u);
}

TEST(RidgeKappaCv, PicksSmallerRecordedFmiAndIsDeterministic) {
    const Toy toy = make_toy(22, 150);
    const auto specs = moment_estimands({0, 1}, toy.data.columns());
    ImputationSpec pilot = quick_spec(Method::BRIDGE);
    pilot.chains = 5;
    const auto sel = ridge_kappa_cv(toy.data, toy.mask, {1e-1, 1e-5}, pilot, specs);
    ASSERT_EQ(sel.average_fmi.size(), 2u);
    const std::size_t smaller = sel.average_fmi[0] <= sel.average_fmi[1] ? 0 : 1;
    EXPECT_EQ(sel.kappa, sel.grid[smaller]);

    // Recompute one recorded value independently.
    ImputationSpec s = pilot;
    s.params.ridge_kappa = 1e-5;
    s.seed = derive_seed(pilot.seed, {0});
    const auto mi = mice_run(toy.data, toy.mask, s);
    double total = 0.0;
    for (const auto& pe : pool_estimands(mi, specs)) total += pe.fmi;
    EXPECT_DOUBLE_EQ(sel.average_fmi[1], total / static_cast<double>(specs.size()));

    const auto again = ridge_kappa_cv(toy.data, toy.mask, {1e-1, 1e-5}, pilot, specs);
    EXPECT_EQ(again.kappa, sel.kappa);
    EXPECT_EQ(again.average_fmi, sel.average_fmi);
}

TEST(RidgeKappaCv, AllFailuresIsAnError) {
    Rng rng(23);
    Matrix v = test::random_matrix(rng, 6, 3);
    BoolMatrix miss = BoolMatrix::Constant(6, 3, false);
    for (Index i = 0; i < 4; ++i) miss(i, 0) = true;  // two observed rows cannot fit a ridge draw
    const Dataset ds = Dataset::with_default_names(v, miss);
    const auto specs = moment_estimands({0}, ds.columns());
    EXPECT_THROW(ridge_kappa_cv(ds, MissingMask::from_dataset(ds), {1e-1, 1e-2}, quick_spec(Method::BRIDGE), specs),
                 Error);
    EXPECT_THROW(ridge_kappa_cv(ds, MissingMask::from_dataset(ds), {}, quick_spec(Method::BRIDGE), specs), InputError);
}

namespace {

ChainTrace synthetic_trace(int chains, int iters, const std::function<double(int, int)>& mean_at) {
    ChainTrace t;
    t.chains = chains;
    t.iterations = iters;
    t.targets = {0};
    for (int c = 0; c < chains; ++c)
        for (int m = 1; m <= iters; ++m) t.entries.push_back({c, m, 0, mean_at(c, m), 1.0});
    return t;
}

} // namespace

TEST(ConvergenceSummary, ConstantTraceHasNoDrift) {
    const auto d = convergence_summary(synthetic_trace(3, 50, [](int, int) { return 4.0; }));
    ASSERT_EQ(d.size(), 1u);
    EXPECT_EQ(d[0].drift, 0.0);
}

TEST(ConvergenceSummary, LinearTrendMatchesSegmentMeans) {
    // mean = 10 + 0.1 m; with M = 50 the segments are m in 31..40 and 41..50.
    const auto d = convergence_summary(synthetic_trace(2, 50, [](int, int m) { return 10.0 + 0.1 * m; }));
    const double prior = 10.0 + 0.1 * 35.5, last = 10.0 + 0.1 * 45.5;
    EXPECT_NEAR(d[0].prior_mean, prior, 1e-12);
    EXPECT_NEAR(d[0].last_mean, last, 1e-12);
    EXPECT_NEAR(d[0].drift, (last - prior) / prior, 1e-12);
    EXPECT_GT(d[0].drift, 0.0);
}

TEST(ConvergenceSummary, StationaryNoiseStaysSmall) {
    int small = 0;
    const int seeds = 1000;
    for (int s = 0; s < seeds; ++s) {
        Rng rng(derive_seed(900, {static_cast<std::uint64_t>(s)}));
        const auto d = convergence_summary(synthetic_trace(5, 100, [&](int, int) { return rng.gaussian(10.0, 1.0); }));
        small += d[0].drift < 0.05;
    }
    EXPECT_GE(small, 950);
}

TEST(ConvergenceSummary, NeedsTenIterations) {
    EXPECT_THROW(convergence_summary(synthetic_trace(1, 9, [](int, int) { return 1.0; })), InputError);
}
