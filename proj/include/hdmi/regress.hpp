#pragma once

#include "core.hpp"
#include "random.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <vector>

namespace hdmi {

/// A fitted (or sampled) linear model y = intercept + x'coefficients + e,
/// e ~ N(0, sigma2). When `scaling` is set, predictors are standardized with
/// it before the coefficients apply.
struct LinearFit {
    double intercept = 0.0;
    Vector coefficients;
    double sigma2 = 0.0;
    std::optional<Matrix> coef_covariance;  // intercept first
    IndexList active_set;
    std::optional<Standardization> scaling;

    Index q() const { return coefficients.size(); }

    void refresh_active_set() {
        active_set.clear();
        for (Index j = 0; j < coefficients.size(); ++j)
            if (coefficients(j) != 0.0) active_set.push_back(j);
    }

    Vector linear_predictor(const Matrix& x) const {
        if (x.cols() != coefficients.size())
            throw std::invalid_argument("linear_predictor: expected " + std::to_string(coefficients.size()) +
                                        " columns, got " + std::to_string(x.cols()));
        if (x.rows() == 0) return Vector(0);
        Vector eta = scaling ? Vector(scaling->apply(x) * coefficients) : Vector(x * coefficients);
        return eta.array() + intercept;
    }
};

// ---------------------------------------------------------------------------
// Maximum likelihood
// ---------------------------------------------------------------------------

inline constexpr double kMinReciprocalCondition = 1e-12;

/// Ordinary least squares with an intercept. sigma2 = RSS / (n - q - 1) and
/// coef_covariance = sigma2 (D'D)^-1 on the intercept-augmented design D.
inline LinearFit ols_mle(const Matrix& X, const Vector& y) {
    const Index n = X.rows(), q = X.cols();
    if (y.size() != n) throw std::invalid_argument("ols_mle: X and y row counts differ");
    if (n <= q + 1)
        throw SingularDesignError("ols_mle: need n > q + 1 (n=" + std::to_string(n) + ", q=" + std::to_string(q) + ")",
                                  0.0);
    // Center first for accuracy; the augmented cross-product is rebuilt below.
    const Vector xbar = X.colwise().mean().transpose();
    const double ybar = y.mean();
    const Matrix Xc = X.rowwise() - xbar.transpose();
    const Vector yc = y.array() - ybar;

    Matrix xtx = Matrix::Zero(q, q);
    xtx.selfadjointView<Eigen::Lower>().rankUpdate(Xc.transpose());
    xtx = xtx.selfadjointView<Eigen::Lower>();
    Vector beta = Vector::Zero(q);
    if (q > 0) {
        // Condition of the centered cross-product from its spectrum; the LDLT
        // estimate misses exact collinearity.
        Eigen::SelfAdjointEigenSolver<Matrix> spectrum(xtx, Eigen::EigenvaluesOnly);
        const double top = spectrum.eigenvalues().maxCoeff();
        const double rc = top > 0.0 ? std::max(spectrum.eigenvalues().minCoeff(), 0.0) / top : 0.0;
        Eigen::LDLT<Matrix> ldlt(xtx);
        if (ldlt.info() != Eigen::Success || !(rc > kMinReciprocalCondition)) {
            std::ostringstream msg;
            msg << "ols_mle: singular design (reciprocal condition " << rc << ")";
            throw SingularDesignError(msg.str(), rc);
        }
        beta = ldlt.solve(Xc.transpose() * yc);
    }

    LinearFit fit;
    fit.coefficients = beta;
    fit.intercept = ybar - xbar.dot(beta);
    const double rss = (yc - Xc * beta).squaredNorm();
    fit.sigma2 = rss / static_cast<double>(n - q - 1);

    Matrix design(n, q + 1);
    design.col(0).setOnes();
    design.rightCols(q) = X;
    Matrix dtd = design.transpose() * design;
    Eigen::LDLT<Matrix> full(dtd);
    fit.coef_covariance = fit.sigma2 * full.solve(Matrix::Identity(q + 1, q + 1));
    Matrix& cov = *fit.coef_covariance;
    cov = 0.5 * (cov + cov.transpose()).eval();
    fit.refresh_active_set();
    return fit;
}

// ---------------------------------------------------------------------------
// Bayesian ridge
// ---------------------------------------------------------------------------

enum class RidgeRoute { automatic, primal, dual };

/// One draw from the Bayesian normal linear model with ridge penalty kappa:
///   beta_hat = (X'X + kappa I)^-1 X'y on centered data,
///   sigma2   ~ RSS / chi2(max(n - q - 1, 1)),
///   beta     ~ N(beta_hat, sigma2 (X'X + kappa I)^-1),
///   intercept from N(ybar, sigma2 / n) on the centered scale.
/// The primal route factors the q x q cross-product; the dual route factors
/// the n x n Gram matrix and is used when q > n.
inline LinearFit bayes_ridge_draw(const Matrix& X, const Vector& y, double kappa, Rng& rng,
                                  RidgeRoute route = RidgeRoute::automatic,
                                  Vector* point_estimate = nullptr) {
    const Index n = X.rows(), q = X.cols();
    if (y.size() != n) throw std::invalid_argument("bayes_ridge_draw: X and y row counts differ");
    if (kappa < 0.0) throw std::invalid_argument("bayes_ridge_draw: kappa must be >= 0");
    if (n < 3) throw std::invalid_argument("bayes_ridge_draw: need n >= 3");

    const Vector xbar = X.colwise().mean().transpose();
    const double ybar = y.mean();
    const Matrix Xc = X.rowwise() - xbar.transpose();
    const Vector yc = y.array() - ybar;
    const double df = std::max<double>(static_cast<double>(n - q - 1), 1.0);

    if (route == RidgeRoute::automatic) route = q > n ? RidgeRoute::dual : RidgeRoute::primal;

    Vector beta_hat(q), beta(q);
    double sigma2 = 0.0;
    if (q == 0) {
        sigma2 = yc.squaredNorm() / rng.chi_squared(df);
    } else if (route == RidgeRoute::primal) {
        Matrix a = Matrix::Zero(q, q);
        a.selfadjointView<Eigen::Lower>().rankUpdate(Xc.transpose());
        a = a.selfadjointView<Eigen::Lower>();
        a.diagonal().array() += kappa;
        Eigen::LLT<Matrix> llt(a);
        const double rc = llt.info() == Eigen::Success ? llt.rcond() : 0.0;
        if (!(rc > kMinReciprocalCondition)) {
            std::ostringstream msg;
            msg << "bayes_ridge_draw: singular cross-product at kappa " << kappa << " (reciprocal condition " << rc
                << ")";
            throw SingularDesignError(msg.str(), rc);
        }
        beta_hat = llt.solve(Xc.transpose() * yc);
        const double rss = (yc - Xc * beta_hat).squaredNorm();
        sigma2 = rss / rng.chi_squared(df);
        Vector z(q);
        for (Index k = 0; k < q; ++k) z(k) = rng.gaussian();
        // A = L L'  =>  L'^-1 z ~ N(0, A^-1)
        beta = beta_hat + std::sqrt(sigma2) * llt.matrixU().solve(z);
    } else {
        if (!(kappa > 0.0))
            throw SingularDesignError("bayes_ridge_draw: kappa = 0 with more predictors than rows", 0.0);
        Matrix k = Matrix::Zero(n, n);
        k.selfadjointView<Eigen::Lower>().rankUpdate(Xc);
        k = k.selfadjointView<Eigen::Lower>();
        k.diagonal().array() += kappa;
        Eigen::LDLT<Matrix> ldlt(k);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            throw SingularDesignError("bayes_ridge_draw: Gram factorization failed", 0.0);
        const Vector alpha = ldlt.solve(yc);
        beta_hat = Xc.transpose() * alpha;
        const double rss = kappa * kappa * alpha.squaredNorm();  // residual = kappa K^-1 y
        sigma2 = rss / rng.chi_squared(df);
        Vector e1(n), e2(q);
        for (Index i = 0; i < n; ++i) e1(i) = rng.gaussian();
        for (Index j = 0; j < q; ++j) e2(j) = rng.gaussian();
        // (X'X + kI)^-1 (X'e1 + sqrt(k) e2) = X'K^-1 e1 + (e2 - X'K^-1 X e2)/sqrt(k)
        const Vector row_part = Xc.transpose() * ldlt.solve(e1);
        const Vector null_part = e2 - Xc.transpose() * ldlt.solve(Xc * e2);
        beta = beta_hat + std::sqrt(sigma2) * (row_part + null_part / std::sqrt(kappa));
    }

    if (point_estimate) *point_estimate = beta_hat;
    LinearFit fit;
    fit.coefficients = beta;
    fit.sigma2 = sigma2;
    fit.intercept = ybar + std::sqrt(sigma2 / static_cast<double>(n)) * rng.gaussian() - xbar.dot(beta);
    fit.refresh_active_set();
    return fit;
}

// ---------------------------------------------------------------------------
// Lasso
// ---------------------------------------------------------------------------

struct LassoOptions {
    double tolerance = 1e-7;    // max coordinate update
    int max_sweeps = 10000;     // full sweeps before giving up
};

struct LassoNonConvergence : Error {
    LassoNonConvergence(const std::string& what, double last_delta) : Error(what), last_delta(last_delta) {}
    double last_delta;
};

namespace detail {

inline double soft_threshold(double z, double lambda) {
    if (z > lambda) return z - lambda;
    if (z < -lambda) return z + lambda;
    return 0.0;
}

/// Coordinate descent on (1/2n)||yc - Xc b||^2 + lambda ||b||_1 for centered
/// data. Uses covariance updates through the scaled Gram matrix when q <= n
/// and residual updates otherwise. Holds state so a path can warm start.
class LassoSolver {
public:
    LassoSolver(const Matrix& xc, const Vector& yc, LassoOptions opts = {})
        : xc_(xc), yc_(yc), opts_(opts), n_(static_cast<double>(xc.rows())) {
        const Index q = xc.cols();
        beta_ = Vector::Zero(q);
        use_gram_ = q <= xc.rows();
        diag_ = xc.colwise().squaredNorm().transpose() / n_;
        if (use_gram_) {
            gram_ = Matrix::Zero(q, q);
            gram_.selfadjointView<Eigen::Lower>().rankUpdate(xc.transpose(), 1.0 / n_);
            gram_ = gram_.selfadjointView<Eigen::Lower>();
            grad_ = xc.transpose() * yc / n_;
            xty_ = grad_;
            yty_ = yc.squaredNorm();
        } else {
            resid_ = yc;
        }
    }

    const Vector& beta() const { return beta_; }

    /// Residual sum of squares at the current beta.
    double rss() const {
        if (!use_gram_) return resid_.squaredNorm();
        // r'r = y'y - n beta'(X'y/n + X'r/n), and grad_ holds X'r/n.
        return std::max(0.0, yty_ - n_ * beta_.dot(xty_ + grad_));
    }

    /// max_j |x_j'yc| / n
    double lambda_max() const { return (xc_.transpose() * yc_).cwiseAbs().maxCoeff() / n_; }

    void solve(double lambda) {
        const Index q = beta_.size();
        if (q == 0) return;
        int full_sweeps = 0;
        double delta = 0.0;
        for (;;) {
            delta = sweep(lambda, nullptr);
            ++full_sweeps;
            if (delta < opts_.tolerance) return;
            if (full_sweeps >= opts_.max_sweeps) break;
            IndexList active;
            for (Index j = 0; j < q; ++j)
                if (beta_(j) != 0.0) active.push_back(j);
            if (use_gram_ && active_set_step(lambda, active)) continue;
            int inner = 0;
            while (inner++ < opts_.max_sweeps) {
                if (sweep(lambda, &active) < opts_.tolerance) break;
            }
        }
        std::ostringstream msg;
        msg << "lasso did not converge after " << opts_.max_sweeps << " sweeps (last delta " << delta << ")";
        throw LassoNonConvergence(msg.str(), delta);
    }

private:
    double gradient(Index j) const {
        return use_gram_ ? grad_(j) : xc_.col(j).dot(resid_) / n_;
    }

    // Solves the stationarity equations on the current active set with its
    // current signs. Accepted only if the signs hold; the next full sweep
    // then has to confirm convergence as usual.
    bool active_set_step(double lambda, const IndexList& active) {
        const Index k = static_cast<Index>(active.size());
        if (k == 0) return false;
        Matrix g(k, k);
        Vector rhs(k);
        for (Index a = 0; a < k; ++a) {
            const Index ja = active[static_cast<std::size_t>(a)];
            for (Index b = 0; b < k; ++b) g(a, b) = gram_(ja, active[static_cast<std::size_t>(b)]);
            rhs(a) = xty_(ja) - lambda * (beta_(ja) > 0.0 ? 1.0 : -1.0);
        }
        Eigen::LLT<Matrix> llt(g);
        if (llt.info() != Eigen::Success) return false;
        const Vector b = llt.solve(rhs);
        for (Index a = 0; a < k; ++a)
            if (!std::isfinite(b(a)) || (b(a) > 0.0) != (beta_(active[static_cast<std::size_t>(a)]) > 0.0) || b(a) == 0.0)
                return false;
        grad_ = xty_;
        for (Index a = 0; a < k; ++a) {
            const Index ja = active[static_cast<std::size_t>(a)];
            beta_(ja) = b(a);
            grad_.noalias() -= b(a) * gram_.col(ja);
        }
        return true;
    }

    double sweep(double lambda, const IndexList* subset) {
        double max_delta = 0.0;
        const Index count = subset ? static_cast<Index>(subset->size()) : beta_.size();
        for (Index k = 0; k < count; ++k) {
            const Index j = subset ? (*subset)[static_cast<std::size_t>(k)] : k;
            const double d = diag_(j);
            if (!(d > 0.0)) continue;
            const double old = beta_(j);
            const double z = gradient(j) + d * old;
            const double updated = soft_threshold(z, lambda) / d;
            const double delta = updated - old;
            if (delta == 0.0) continue;
            beta_(j) = updated;
            if (use_gram_) {
                grad_.noalias() -= delta * gram_.col(j);
            } else {
                resid_.noalias() -= delta * xc_.col(j);
            }
            max_delta = std::max(max_delta, std::abs(delta));
        }
        return max_delta;
    }

    const Matrix& xc_;
    const Vector& yc_;
    LassoOptions opts_;
    double n_;
    bool use_gram_ = true;
    Vector beta_, diag_, grad_, resid_, xty_;
    double yty_ = 0.0;
    Matrix gram_;
};

inline LinearFit lasso_fit_from_beta(const Vector& xbar, double ybar, const Matrix& xc, const Vector& yc,
                                     const Vector& beta) {
    LinearFit fit;
    fit.coefficients = beta;
    fit.intercept = ybar - xbar.dot(beta);
    fit.refresh_active_set();
    const double rss = (yc - xc * beta).squaredNorm();
    const double n = static_cast<double>(xc.rows());
    const double df = static_cast<double>(fit.active_set.size()) + 1.0;
    fit.sigma2 = df >= n ? rss / n : rss / (n - df);
    return fit;
}

} // namespace detail

/// Lasso at a single penalty by coordinate descent; the intercept is not
/// penalized. sigma2 is the plug-in RSS / (n - df), df = |active| + 1.
inline LinearFit lasso_path(const Matrix& X, const Vector& y, double lambda, LassoOptions opts = {}) {
    if (X.rows() != y.size()) throw std::invalid_argument("lasso_path: X and y row counts differ");
    if (!(lambda > 0.0)) throw std::invalid_argument("lasso_path: lambda must be > 0");
    const Vector xbar = X.colwise().mean().transpose();
    const double ybar = y.mean();
    const Matrix xc = X.rowwise() - xbar.transpose();
    const Vector yc = y.array() - ybar;
    detail::LassoSolver solver(xc, yc, opts);
    solver.solve(lambda);
    return detail::lasso_fit_from_beta(xbar, ybar, xc, yc, solver.beta());
}

struct CvResult {
    std::vector<double> lambda_grid;
    std::vector<double> cv_error;
    double lambda_star = 0.0;
    std::size_t star_index = 0;
    std::vector<int> fold_assignment;
    LinearFit fit;  // full-data fit at lambda_star
};

inline constexpr int kLassoGridSize = 100;
inline constexpr double kLassoGridRatio = 1e-3;

/// Log-spaced grid of kLassoGridSize values from lambda_max down to ratio * lambda_max.
inline std::vector<double> lasso_grid(double lambda_max) {
    if (!(lambda_max > 0.0)) lambda_max = 1e-8;
    std::vector<double> grid(kLassoGridSize);
    const double lo = std::log(kLassoGridRatio);
    for (int k = 0; k < kLassoGridSize; ++k)
        grid[static_cast<std::size_t>(k)] = lambda_max * std::exp(lo * k / (kLassoGridSize - 1));
    return grid;
}

/// Random partition of n rows into `folds` groups whose sizes differ by at most 1.
inline std::vector<int> make_folds(Index n, int folds, Rng& rng) {
    auto perm = rng.sample_without_replacement(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
    std::vector<int> out(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < perm.size(); ++k) out[perm[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
    return out;
}

/// Path stopping, as in glmnet: a path ends once the training R^2 exceeds
/// kPathMaxRsq or grows by less than kPathMinRsqGain of itself between
/// consecutive penalties, checked from the fifth penalty on. Past that point
/// the fit is near-interpolating.
inline constexpr double kPathMaxRsq = 0.999;
inline constexpr double kPathMinRsqGain = 1e-5;
inline constexpr std::size_t kPathMinLength = 5;

namespace detail {

/// Solves along grid[0..limit) with warm starts, calling visit(g, beta) at
/// each penalty. Returns the number of penalties solved before the stopping rule.
template <class Visit>
std::size_t run_path(LassoSolver& solver, const Vector& yc, const std::vector<double>& grid,
                     std::size_t limit, Visit&& visit) {
    const double tss = yc.squaredNorm();
    double prev_rsq = 0.0;
    for (std::size_t g = 0; g < limit; ++g) {
        solver.solve(grid[g]);
        visit(g, solver.beta());
        if (!(tss > 0.0)) return g + 1;
        const double rsq = 1.0 - solver.rss() / tss;
        if (g + 1 >= kPathMinLength && (rsq > kPathMaxRsq || rsq - prev_rsq < kPathMinRsqGain * rsq)) return g + 1;
        prev_rsq = rsq;
    }
    return limit;
}

} // namespace detail

/// k-fold cross-validated lasso along a shared log-spaced grid with warm
/// starts. The selected penalty is the first minimum of the mean held-out
/// squared error (largest lambda under ties). Penalties past the point where
/// the full-data path or any fold path stops carry an infinite CV error.
inline CvResult lasso_cv(const Matrix& X, const Vector& y, int folds, Rng& rng, LassoOptions opts = {}) {
    const Index n = X.rows();
    if (y.size() != n) throw std::invalid_argument("lasso_cv: X and y row counts differ");
    if (folds < 2 || folds > n) throw std::invalid_argument("lasso_cv: need n >= folds >= 2");

    const Vector xbar = X.colwise().mean().transpose();
    const double ybar = y.mean();
    const Matrix xc = X.rowwise() - xbar.transpose();
    const Vector yc = y.array() - ybar;

    CvResult res;
    detail::LassoSolver full(xc, yc, opts);
    res.lambda_grid = lasso_grid(full.lambda_max());
    std::vector<Vector> full_path;
    std::size_t usable = detail::run_path(full, yc, res.lambda_grid, res.lambda_grid.size(),
                                          [&](std::size_t, const Vector& b) { full_path.push_back(b); });
    res.fold_assignment = make_folds(n, folds, rng);
    std::vector<double> sse(usable, 0.0);

    for (int f = 0; f < folds; ++f) {
        IndexList train, test;
        for (Index i = 0; i < n; ++i) (res.fold_assignment[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
        const Matrix xtr = gather_rows(X, train);
        const Vector ytr = gather(y, train);
        const Vector mtr = xtr.colwise().mean().transpose();
        const double ymtr = ytr.mean();
        const Matrix xtrc = xtr.rowwise() - mtr.transpose();
        const Vector ytrc = ytr.array() - ymtr;
        const Matrix xte = gather_rows(X, test).rowwise() - mtr.transpose();
        const Vector yte = gather(y, test).array() - ymtr;
        detail::LassoSolver solver(xtrc, ytrc, opts);
        usable = detail::run_path(solver, ytrc, res.lambda_grid, usable, [&](std::size_t g, const Vector& b) {
            sse[g] += (yte - xte * b).squaredNorm();
        });
    }
    res.cv_error.assign(res.lambda_grid.size(), std::numeric_limits<double>::infinity());
    res.star_index = 0;
    for (std::size_t g = 0; g < usable; ++g) {
        res.cv_error[g] = sse[g] / static_cast<double>(n);
        if (res.cv_error[g] < res.cv_error[res.star_index]) res.star_index = g;
    }
    res.lambda_star = res.lambda_grid[res.star_index];
    res.fit = detail::lasso_fit_from_beta(xbar, ybar, xc, yc, full_path[res.star_index]);
    return res;
}

// ---------------------------------------------------------------------------
// Posterior predictive
// ---------------------------------------------------------------------------

/// x'beta + intercept + e, e ~ N(0, sigma2) independently per row.
inline Vector predictive_draw(const LinearFit& fit, const Matrix& x_new, Rng& rng) {
    if (!std::isfinite(fit.sigma2) || fit.sigma2 < 0.0) throw std::invalid_argument("predictive_draw: invalid sigma2");
    Vector out = fit.linear_predictor(x_new);
    const double sd = std::sqrt(fit.sigma2);
    for (Index i = 0; i < out.size(); ++i) out(i) += sd * rng.gaussian();
    return out;
}

} // namespace hdmi
