#pragma once

#include "core.hpp"
#include "regress.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace hdmi {

/// Complete-data estimate with its sampling variance and degrees of freedom.
struct EstimandValue {
    double estimate = 0.0;
    double variance = 0.0;
    double df_complete = 1.0;
};

struct PooledEstimate {
    double qbar = 0.0;
    double W = 0.0;
    double B = 0.0;
    double T = 0.0;
    double df = 0.0;  // +inf when B = 0
    double ci_low = 0.0;
    double ci_high = 0.0;
    double fmi = 0.0;
    int d = 0;
    bool unpooled = false;  // d = 1 passthrough
    std::string warning;
};

struct PoolOptions {
    bool barnard_rubin = false;
    double level = 0.95;
};

inline double t_quantile(double df, double p) {
    if (std::isinf(df)) return boost::math::quantile(boost::math::normal_distribution<double>(), p);
    return boost::math::quantile(boost::math::students_t_distribution<double>(df), p);
}

/// Rubin's rules. The between-imputation variance uses the d - 1 denominator;
/// df is (d - 1)(1 + 1/r)^2 with r = (1 + 1/d) B / W, or the Barnard-Rubin
/// small-sample version when requested.
inline PooledEstimate rubin_pool(const std::vector<EstimandValue>& values, PoolOptions opts = {}) {
    if (values.empty()) throw InputError("rubin_pool: no estimates");
    for (const auto& v : values) {
        if (!std::isfinite(v.estimate) || !std::isfinite(v.variance) || v.variance < 0.0)
            throw InputError("rubin_pool: estimates must be finite with nonnegative variance");
        if (!(v.df_complete >= 1.0)) throw InputError("rubin_pool: complete-data df must be >= 1");
    }
    const double alpha_half = 0.5 + 0.5 * opts.level;
    const double df_com = values.front().df_complete;
    PooledEstimate out;
    out.d = static_cast<int>(values.size());

    if (values.size() == 1) {
        out.unpooled = true;
        out.qbar = values[0].estimate;
        out.W = out.T = values[0].variance;
        out.df = df_com;
        const double half = t_quantile(df_com, alpha_half) * std::sqrt(out.T);
        out.ci_low = out.qbar - half;
        out.ci_high = out.qbar + half;
        return out;
    }

    const double d = static_cast<double>(values.size());
    double sum = 0.0, wsum = 0.0;
    for (const auto& v : values) {
        sum += v.estimate;
        wsum += v.variance;
    }
    out.qbar = sum / d;
    out.W = wsum / d;
    double ss = 0.0;
    for (const auto& v : values) ss += (v.estimate - out.qbar) * (v.estimate - out.qbar);
    out.B = ss / (d - 1.0);
    const double between = (1.0 + 1.0 / d) * out.B;
    out.T = out.W + between;

    double ci_df = 0.0;
    if (out.B == 0.0) {
        // No between-imputation spread: intervals fall back to the complete-data
        // reference distribution and the FMI takes its r -> 0 limit.
        out.df = std::numeric_limits<double>::infinity();
        ci_df = df_com;
        out.fmi = 2.0 / (df_com + 3.0);
    } else if (out.W == 0.0) {
        out.df = d - 1.0;
        ci_df = out.df;
        out.fmi = 1.0;
        out.warning = "rubin_pool: within-imputation variance is zero; fmi set to 1";
    } else {
        const double r = between / out.W;
        out.df = (d - 1.0) * (1.0 + 1.0 / r) * (1.0 + 1.0 / r);
        if (opts.barnard_rubin) {
            const double gamma = between / out.T;
            const double df_obs = (df_com + 1.0) / (df_com + 3.0) * df_com * (1.0 - gamma);
            out.df = 1.0 / (1.0 / out.df + 1.0 / df_obs);
        }
        ci_df = out.df;
        out.fmi = (r + 2.0 / (out.df + 3.0)) / (r + 1.0);
    }
    const double half = t_quantile(ci_df, alpha_half) * std::sqrt(out.T);
    out.ci_low = out.qbar - half;
    out.ci_high = out.qbar + half;
    return out;
}

// ---------------------------------------------------------------------------
// Complete-data estimands
// ---------------------------------------------------------------------------

enum class EstimandKind { mean, variance, covariance, coefficient };

inline void require_rows(Index n) {
    if (n < 3) throw InputError("estimand: need at least 3 rows");
}

inline EstimandValue mean_estimand(const Vector& x) {
    require_rows(x.size());
    const double n = static_cast<double>(x.size());
    return {x.mean(), sample_variance(x) / n, n - 1.0};
}

inline EstimandValue variance_estimand(const Vector& x) {
    require_rows(x.size());
    const double n = static_cast<double>(x.size());
    const double s2 = sample_variance(x);
    return {s2, 2.0 * s2 * s2 / (n - 1.0), n - 1.0};
}

inline EstimandValue covariance_estimand(const Vector& x, const Vector& y) {
    if (x.size() != y.size()) throw std::invalid_argument("covariance_estimand: length mismatch");
    require_rows(x.size());
    const double n = static_cast<double>(x.size());
    const double sxy = sample_covariance(x, y);
    const double sxx = sample_variance(x), syy = sample_variance(y);
    return {sxy, (sxx * syy + sxy * sxy) / (n - 1.0), n - 1.0};
}

/// OLS coefficients with classical variances; entry 0 is the intercept.
inline std::vector<EstimandValue> coefficient_estimands(const Matrix& X, const Vector& y) {
    require_rows(y.size());
    const LinearFit fit = ols_mle(X, y);
    const double df = static_cast<double>(X.rows() - X.cols() - 1);
    std::vector<EstimandValue> out;
    out.push_back({fit.intercept, (*fit.coef_covariance)(0, 0), df});
    for (Index k = 0; k < X.cols(); ++k) out.push_back({fit.coefficients(k), (*fit.coef_covariance)(k + 1, k + 1), df});
    return out;
}

/// One named quantity of interest over the columns of a completed data matrix.
struct EstimandSpec {
    EstimandKind kind = EstimandKind::mean;
    std::string name;
    Index x = -1;          // mean, variance, covariance (first), coefficient response
    Index y = -1;          // covariance second column
    IndexList predictors;  // coefficient model
    Index term = 0;        // 0 intercept, k for predictors[k - 1]
};

inline EstimandValue estimand_from_sample(const EstimandSpec& spec, const Matrix& completed) {
    switch (spec.kind) {
    case EstimandKind::mean: return mean_estimand(completed.col(spec.x));
    case EstimandKind::variance: return variance_estimand(completed.col(spec.x));
    case EstimandKind::covariance: return covariance_estimand(completed.col(spec.x), completed.col(spec.y));
    case EstimandKind::coefficient: {
        const auto all = coefficient_estimands(gather_cols(completed, spec.predictors), completed.col(spec.x));
        return all.at(static_cast<std::size_t>(spec.term));
    }
    }
    throw std::logic_error("unknown estimand kind");
}

/// Evaluates a list of estimands, fitting each distinct regression model once.
inline std::vector<EstimandValue> evaluate_estimands(const std::vector<EstimandSpec>& specs, const Matrix& completed) {
    std::map<std::pair<Index, IndexList>, std::vector<EstimandValue>> models;
    std::vector<EstimandValue> out;
    out.reserve(specs.size());
    for (const auto& s : specs) {
        if (s.kind != EstimandKind::coefficient) {
            out.push_back(estimand_from_sample(s, completed));
            continue;
        }
        auto key = std::make_pair(s.x, s.predictors);
        auto it = models.find(key);
        if (it == models.end())
            it = models.emplace(key, coefficient_estimands(gather_cols(completed, s.predictors), completed.col(s.x))).first;
        out.push_back(it->second.at(static_cast<std::size_t>(s.term)));
    }
    return out;
}

/// Means, variances and pairwise covariances of the given columns, named
/// mean:a, var:a, cov:a:b.
inline std::vector<EstimandSpec> moment_estimands(const IndexList& cols, const std::vector<std::string>& names) {
    std::vector<EstimandSpec> out;
    for (Index j : cols) out.push_back({EstimandKind::mean, "mean:" + names[static_cast<std::size_t>(j)], j, -1, {}, 0});
    for (Index j : cols) out.push_back({EstimandKind::variance, "var:" + names[static_cast<std::size_t>(j)], j, -1, {}, 0});
    for (std::size_t a = 0; a < cols.size(); ++a)
        for (std::size_t b = a + 1; b < cols.size(); ++b)
            out.push_back({EstimandKind::covariance,
                           "cov:" + names[static_cast<std::size_t>(cols[a])] + ":" + names[static_cast<std::size_t>(cols[b])],
                           cols[a], cols[b], {}, 0});
    return out;
}

/// Coefficient estimands of one linear model, named coef:<model>:<term>.
inline std::vector<EstimandSpec> coefficient_specs(const std::string& model, Index response, const IndexList& predictors,
                                                   const std::vector<std::string>& names) {
    std::vector<EstimandSpec> out;
    out.push_back({EstimandKind::coefficient, "coef:" + model + ":(Intercept)", response, -1, predictors, 0});
    for (std::size_t k = 0; k < predictors.size(); ++k)
        out.push_back({EstimandKind::coefficient, "coef:" + model + ":" + names[static_cast<std::size_t>(predictors[k])],
                       response, -1, predictors, static_cast<Index>(k + 1)});
    return out;
}

} // namespace hdmi
