#pragma once

#include "core.hpp"
#include "random.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace hdmi {

inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Logistic nonresponse model P(missing) = logistic(gamma0 + z'gamma), applied
/// independently to each target column.
struct MarSpec {
    IndexList targets;
    IndexList predictors;
    Vector slopes;
    double pm = 0.3;
    bool standardize_predictors = true;
    double slope_multiplier = 1.0;

    void validate(Index p) const {
        if (!(pm > 0.0 && pm < 1.0)) throw InputError("MarSpec: pm must lie in (0, 1)");
        if (slopes.size() != static_cast<Index>(predictors.size()))
            throw InputError("MarSpec: need one slope per predictor");
        if (!slopes.allFinite() || !std::isfinite(slope_multiplier)) throw InputError("MarSpec: slopes must be finite");
        for (Index j : targets)
            if (j < 0 || j >= p) throw InputError("MarSpec: target column out of range");
        for (Index j : predictors) {
            if (j < 0 || j >= p) throw InputError("MarSpec: predictor column out of range");
            if (std::find(targets.begin(), targets.end(), j) != targets.end())
                throw InputError("MarSpec: a column cannot be both target and predictor");
        }
    }
};

inline constexpr double kInterceptBound = 50.0;
inline constexpr int kBisectionIterations = 200;
inline constexpr double kCalibrationTolerance = 1e-6;

inline double mean_response_probability(const Vector& eta, double gamma0) {
    double s = 0.0;
    for (Index i = 0; i < eta.size(); ++i) s += logistic(gamma0 + eta(i));
    return s / static_cast<double>(eta.size());
}

/// Intercept placing the mean nonresponse probability at pm, by bisection.
/// eta holds the slope part z_i'gamma of each row.
inline double calibrate_intercept_eta(const Vector& eta, double pm) {
    if (eta.size() == 0) throw InputError("calibrate_intercept: no rows");
    if (!eta.allFinite()) throw InputError("calibrate_intercept: non-finite linear predictor");
    double lo = -kInterceptBound, hi = kInterceptBound;
    if (mean_response_probability(eta, lo) > pm || mean_response_probability(eta, hi) < pm)
        throw Error("calibrate_intercept: pm is not reachable with |gamma0| <= 50");
    double mid = 0.0, gap = 1.0;
    for (int it = 0; it < kBisectionIterations; ++it) {
        mid = 0.5 * (lo + hi);
        gap = mean_response_probability(eta, mid) - pm;
        if (gap == 0.0) break;
        (gap < 0.0 ? lo : hi) = mid;
    }
    if (std::abs(gap) >= kCalibrationTolerance)
        throw Error("calibrate_intercept: bisection did not reach the requested proportion");
    return mid;
}

inline double calibrate_intercept(const Matrix& Ztilde, const Vector& gamma, double pm) {
    if (Ztilde.cols() != gamma.size()) throw std::invalid_argument("calibrate_intercept: slope count mismatch");
    if (!(pm > 0.0 && pm < 1.0)) throw InputError("calibrate_intercept: pm must lie in (0, 1)");
    return calibrate_intercept_eta(Ztilde * gamma, pm);
}

/// Response-model predictor block as the mechanism sees it.
inline Matrix response_predictors(const Matrix& values, const MarSpec& spec) {
    Matrix z = gather_cols(values, spec.predictors);
    if (!z.allFinite()) throw InputError("impose_mar: predictor columns must be fully observed");
    if (spec.standardize_predictors && z.cols() > 0) z = standardize(z).first;
    return z;
}

struct Amputation {
    MissingMask mask;
    std::vector<double> intercepts;  // per target, in spec order
    std::vector<int> redraws;        // extra draws needed to keep two observed rows
};

/// Draws a MAR mask for each target column. Columns are calibrated and drawn
/// independently; a column left with fewer than two observed rows is redrawn
/// from a fresh substream.
inline Amputation impose_mar_detailed(const Matrix& values, const MarSpec& spec, Rng& rng) {
    const Index n = values.rows(), p = values.cols();
    spec.validate(p);
    if (n < 2) throw InputError("impose_mar: need at least two rows");
    const Matrix z = response_predictors(values, spec);
    const Vector eta = z * (spec.slopes * spec.slope_multiplier);
    const double gamma0 = calibrate_intercept_eta(eta, spec.pm);
    Vector prob(n);
    for (Index i = 0; i < n; ++i) prob(i) = logistic(gamma0 + eta(i));

    Amputation out;
    out.mask.mask = BoolMatrix::Constant(n, p, false);
    out.mask.target_columns = spec.targets;
    std::sort(out.mask.target_columns.begin(), out.mask.target_columns.end());
    for (Index j : spec.targets) {
        const std::uint64_t stream = rng.engine()();
        int attempt = 0;
        for (;; ++attempt) {
            if (attempt > 10000) throw Error("impose_mar: could not keep two observed rows in column " + std::to_string(j));
            Rng sub(derive_seed(stream, {static_cast<std::uint64_t>(attempt)}));
            Index observed = 0;
            for (Index i = 0; i < n; ++i) {
                const bool miss = sub.uniform() < prob(i);
                out.mask.mask(i, j) = miss;
                observed += !miss;
            }
            if (observed >= 2) break;
        }
        out.intercepts.push_back(gamma0);
        out.redraws.push_back(attempt);
    }
    return out;
}

inline MissingMask impose_mar(const Matrix& values, const MarSpec& spec, Rng& rng) {
    return impose_mar_detailed(values, spec, rng).mask;
}

inline MissingMask impose_mar(const Dataset& data, const MarSpec& spec, Rng& rng) {
    for (Index j : spec.predictors)
        if (j >= 0 && j < data.p() && data.missing().col(j).any())
            throw InputError("impose_mar: predictor column " + data.columns()[static_cast<std::size_t>(j)] + " has missing cells");
    return impose_mar(data.values(), spec, rng);
}

/// MCAR special case: every row of every target has probability pm.
inline MarSpec mcar_spec(IndexList targets, double pm) {
    MarSpec s;
    s.targets = std::move(targets);
    s.pm = pm;
    return s;
}

/// Area under the ROC curve of score for the 0/1 labels, ties counted half.
inline double rank_auc(const Vector& score, const Vector& label) {
    const Index n = score.size();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) { return score(a) < score(b); });
    double rank_sum = 0.0, positives = 0.0;
    for (Index k = 0; k < n;) {
        Index e = k;
        while (e + 1 < n && score(order[e + 1]) == score(order[k])) ++e;
        const double avg_rank = 0.5 * static_cast<double>(k + e) + 1.0;
        for (Index t = k; t <= e; ++t) {
            if (label(order[t]) > 0.5) {
                rank_sum += avg_rank;
                positives += 1.0;
            }
        }
        k = e + 1;
    }
    const double negatives = static_cast<double>(n) - positives;
    if (positives == 0.0 || negatives == 0.0) throw InputError("rank_auc: both classes must be present");
    return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

/// Expected AUC of the linear predictor when each row is positive with its
/// own probability: sum_{i,j} p_i (1 - p_j) [eta_i > eta_j] normalized, ties half.
inline double expected_auc(const Vector& eta, const Vector& prob) {
    const Index n = eta.size();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) { return eta(a) < eta(b); });
    double below_neg = 0.0, num = 0.0;
    for (Index k = 0; k < n;) {
        Index e = k;
        double grp_pos = 0.0, grp_neg = 0.0;
        while (e < n && eta(order[e]) == eta(order[k])) {
            grp_pos += prob(order[e]);
            grp_neg += 1.0 - prob(order[e]);
            ++e;
        }
        num += grp_pos * below_neg + 0.5 * grp_pos * grp_neg;
        below_neg += grp_neg;
        k = e;
    }
    const double pos = prob.sum(), neg = static_cast<double>(n) - pos;
    return num / (pos * neg);
}

/// Global slope multiplier whose calibrated mechanism has the target expected
/// AUC, found by bisection on a log scale.
inline double calibrate_slope_multiplier(const Matrix& Ztilde, const Vector& gamma, double pm, double target_auc) {
    if (!(target_auc > 0.5 && target_auc < 1.0)) throw InputError("calibrate_slope_multiplier: target AUC must lie in (0.5, 1)");
    const Vector base = Ztilde * gamma;
    auto auc_at = [&](double mult) {
        const Vector eta = base * mult;
        double g0 = 0.0;
        try {
            g0 = calibrate_intercept_eta(eta, pm);
        } catch (const Error&) {
            return 1.0;  // slopes so steep the intercept bounds cannot absorb them
        }
        Vector prob(eta.size());
        for (Index i = 0; i < eta.size(); ++i) prob(i) = logistic(g0 + eta(i));
        return expected_auc(eta, prob);
    };
    double lo = std::log(1e-4), hi = std::log(1e1);
    if (auc_at(std::exp(lo)) > target_auc || auc_at(std::exp(hi)) < target_auc)
        throw Error("calibrate_slope_multiplier: target AUC not reachable");
    for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        (auc_at(std::exp(mid)) < target_auc ? lo : hi) = mid;
    }
    return std::exp(0.5 * (lo + hi));
}

struct MarDiagnostics {
    double pseudo_r2 = 0.0;  // McFadden
    double auc = 0.5;
    Vector coefficients;  // intercept first
    int iterations = 0;
    bool converged = false;
    std::string warning;
};

/// Logistic regression of the missingness indicator on Ztilde by IRLS.
inline MarDiagnostics mar_diagnostics(const Vector& indicator, const Matrix& Ztilde, double tol = 1e-8, int max_iter = 50) {
    const Index n = indicator.size();
    if (Ztilde.rows() != n) throw std::invalid_argument("mar_diagnostics: row mismatch");
    const double ones = indicator.sum();
    if (ones <= 0.0 || ones >= static_cast<double>(n)) throw InputError("mar_diagnostics: both classes must be present");

    Matrix x(n, Ztilde.cols() + 1);
    x.col(0).setOnes();
    x.rightCols(Ztilde.cols()) = Ztilde;
    Vector beta = Vector::Zero(x.cols());
    const double pbar = ones / static_cast<double>(n);
    beta(0) = std::log(pbar / (1.0 - pbar));

    auto loglik = [&](const Vector& eta) {
        double ll = 0.0;
        for (Index i = 0; i < n; ++i) {
            // log(1 + e^eta) computed stably
            const double e = eta(i);
            const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
            ll += indicator(i) * e - softplus;
        }
        return ll;
    };

    MarDiagnostics out;
    Vector eta = x * beta;
    double ll = loglik(eta);
    for (int it = 1; it <= max_iter; ++it) {
        Vector w(n), z(n);
        for (Index i = 0; i < n; ++i) {
            const double p = logistic(eta(i));
            w(i) = std::max(p * (1.0 - p), 1e-12);
            z(i) = eta(i) + (indicator(i) - p) / w(i);
        }
        const Matrix xtw = x.transpose() * w.asDiagonal();
        const Vector next = (xtw * x).ldlt().solve(xtw * z);
        if (!next.allFinite()) break;
        beta = next;
        eta = x * beta;
        const double ll_new = loglik(eta);
        out.iterations = it;
        const double change = std::abs(ll_new - ll) / (std::abs(ll_new) + 0.1);
        ll = ll_new;
        if (change < tol) {
            out.converged = true;
            break;
        }
    }
    if (!out.converged)
        out.warning = "mar_diagnostics: IRLS stopped after " + std::to_string(out.iterations) +
                      " iterations (possible separation); reporting the last iterate";

    const double ll_null = ones * std::log(pbar) + (static_cast<double>(n) - ones) * std::log(1.0 - pbar);
    out.pseudo_r2 = 1.0 - ll / ll_null;
    out.auc = rank_auc(eta, indicator);
    out.coefficients = beta;
    return out;
}

} // namespace hdmi
