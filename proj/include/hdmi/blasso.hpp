#pragma once

#include "core.hpp"
#include "random.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace hdmi {

/// Hyperparameters of the Bayesian lasso with a point mass at zero:
///   sigma2 ~ InvGamma(a, b), tau ~ Gamma(r, s), rho ~ Beta(g, h).
struct BlassoHyper {
    double a = 0.1, b = 0.1;
    double r = 0.01, s = 0.01;
    double g = 1.0, h = 1.0;

    void validate() const {
        for (double v : {a, b, r, s, g, h})
            if (!(v > 0.0) || !std::isfinite(v)) throw InputError("BlassoHyper: all hyperparameters must be > 0");
    }
};

struct BlassoState {
    Vector beta;  // exact zeros for excluded coefficients
    double sigma2 = 1.0;
    double tau = 1.0;
    double rho = 0.5;

    Index active_count() const { return (beta.array() != 0.0).count(); }

    /// beta = 0, sigma2 = var(y), tau = 1, rho = 0.5.
    static BlassoState initial(Index q, const Vector& y) {
        BlassoState s;
        s.beta = Vector::Zero(q);
        const double v = sample_variance(y);
        s.sigma2 = v > 0.0 ? v : 1.0;
        return s;
    }
};

struct BlassoOptions {
    bool update_rho = true;  // false keeps state.rho fixed
};

/// Instrumentation from the last sweep.
struct BlassoSweepInfo {
    Index rho_successes = 0;  // success count entering the Beta update
    Index active = 0;
    bool sigma_accepted = true;
};

namespace detail {

/// log of exp(mu^2 / 2v) Phi(mu / sqrt v), the unnormalized mass of one
/// half-line after completing the square.
inline double log_half_mass(double mu, double v) {
    return mu * mu / (2.0 * v) + log_normal_cdf(mu / std::sqrt(v));
}

} // namespace detail

/// Log weights (zero, positive, negative) of the full conditional of one
/// coefficient with conditional mean m and variance v of the likelihood
/// kernel, Laplace rate lambda = tau / sigma, and inclusion probability rho.
/// All three share the dropped factor exp(m^2 / 2v) N(0 | m, v).
inline std::array<double, 3> inclusion_log_weights(double m, double v, double lambda, double rho) {
    constexpr double neg_inf = -std::numeric_limits<double>::infinity();
    const double log_zero = rho < 1.0 ? std::log1p(-rho) : neg_inf;
    if (!(rho > 0.0)) return {0.0, neg_inf, neg_inf};
    const double common = std::log(rho) + std::log(lambda / 2.0) + 0.5 * std::log(2.0 * std::numbers::pi * v);
    const double mu_pos = m - lambda * v;
    const double mu_neg = m + lambda * v;
    return {log_zero, common + detail::log_half_mass(mu_pos, v), common + detail::log_half_mass(-mu_neg, v)};
}

/// One Gibbs sweep for the Bayesian lasso with point-mass mixture prior
///   beta_j | tau, sigma, rho ~ (1 - rho) delta_0 + rho (tau / 2 sigma) exp(-tau |beta_j| / sigma).
/// X must be standardized and y centered. Cross-products are formed once at
/// construction and shared by every sweep on the same data.
class BlassoSampler {
public:
    BlassoSampler(const Matrix& X, const Vector& y, BlassoHyper hyper, BlassoOptions opts = {})
        : hyper_(hyper), opts_(opts), n_(static_cast<double>(X.rows())) {
        hyper_.validate();
        if (X.rows() != y.size()) throw std::invalid_argument("BlassoSampler: X and y row counts differ");
        gram_ = Matrix::Zero(X.cols(), X.cols());
        gram_.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
        gram_ = gram_.selfadjointView<Eigen::Lower>();
        xty_ = X.transpose() * y;
        yty_ = y.squaredNorm();
    }

    Index q() const { return xty_.size(); }

    const BlassoSweepInfo& last_sweep() const { return info_; }

    void step(BlassoState& state, Rng& rng) {
        const Index q = this->q();
        if (state.beta.size() != q) throw std::invalid_argument("BlassoSampler: state dimension mismatch");
        Vector c = xty_ - gram_ * state.beta;  // X'(y - X beta)

        const double sigma = std::sqrt(state.sigma2);
        const double lambda = state.tau / sigma;
        for (Index j = 0; j < q; ++j) {
            const double gjj = gram_(j, j);
            const double old = state.beta(j);
            double updated = 0.0;
            if (gjj > 0.0) {
                const double v = state.sigma2 / gjj;
                const double m = (c(j) + gjj * old) / gjj;
                const auto w = inclusion_log_weights(m, v, lambda, state.rho);
                const double total = log_sum_exp(log_sum_exp(w[0], w[1]), w[2]);
                if (!std::isfinite(total)) throw Error("blasso: non-finite inclusion weights");
                const double u = rng.uniform();
                const double p0 = std::exp(w[0] - total);
                const double p_pos = std::exp(w[1] - total);
                const double sd = std::sqrt(v);
                if (u < p0) {
                    updated = 0.0;
                } else if (u < p0 + p_pos) {
                    updated = truncated_normal_positive(rng, m - lambda * v, sd);
                } else {
                    updated = truncated_normal_negative(rng, m + lambda * v, sd);
                }
            }
            if (updated != old) {
                c.noalias() -= (updated - old) * gram_.col(j);
                state.beta(j) = updated;
            }
        }

        const Index k = state.active_count();
        const double l1 = state.beta.cwiseAbs().sum();
        double rss = yty_ - state.beta.dot(xty_) - state.beta.dot(c);
        rss = std::max(rss, 0.0);

        // sigma2: the point-mass Laplace prior adds (sigma2)^(-k/2) exp(-tau l1 / sigma)
        // to the inverse-gamma kernel. Independence Metropolis step with the
        // inverse-gamma part as proposal; the acceptance ratio is the
        // exp(-tau l1 / sigma) factor.
        const double shape = hyper_.a + 0.5 * (n_ + static_cast<double>(k));
        const double rate = hyper_.b + 0.5 * rss;
        const double proposal = rng.inverse_gamma(shape, rate);
        const double log_ratio = -state.tau * l1 * (1.0 / std::sqrt(proposal) - 1.0 / sigma);
        info_.sigma_accepted = log_ratio >= 0.0 || std::log(rng.uniform()) < log_ratio;
        if (info_.sigma_accepted) state.sigma2 = proposal;

        // Small shapes put real mass below the double range; such a tau acts
        // as zero inclusion weight either way, so it is floored.
        const double log_tau = rng.log_gamma(hyper_.r + static_cast<double>(k), hyper_.s + l1 / std::sqrt(state.sigma2));
        state.tau = std::max(std::exp(log_tau), std::numeric_limits<double>::min());

        info_.rho_successes = k;
        info_.active = k;
        if (opts_.update_rho) state.rho = rng.beta(hyper_.g + static_cast<double>(k), hyper_.h + static_cast<double>(q - k));

        if (!std::isfinite(state.sigma2) || !(state.sigma2 > 0.0) || !std::isfinite(state.tau) || !(state.tau > 0.0) ||
            !state.beta.allFinite())
            throw Error("blasso: non-finite sampler state");
    }

private:
    BlassoHyper hyper_;
    BlassoOptions opts_;
    double n_;
    Matrix gram_;
    Vector xty_;
    double yty_ = 0.0;
    BlassoSweepInfo info_;
};

inline BlassoState blasso_gibbs_step(const BlassoState& state, const Matrix& X, const Vector& y,
                                     const BlassoHyper& hyper, Rng& rng, BlassoOptions opts = {}) {
    BlassoSampler sampler(X, y, hyper, opts);
    BlassoState next = state;
    sampler.step(next, rng);
    return next;
}

struct BlassoImputation {
    Vector imputed;
    BlassoState state;
};

/// Standardizes X_obs (constant columns are excluded and their coefficients
/// held at zero), centers y_obs, advances the chain `sweeps` steps from
/// `warm`, then draws ybar + N(0, sigma2/n) + X_mis beta + N(0, sigma2) per missing row.
inline BlassoImputation blasso_impute(const Matrix& X_obs, const Vector& y_obs, const Matrix& X_mis,
                                      const BlassoState& warm, int sweeps, const BlassoHyper& hyper, Rng& rng) {
    if (sweeps < 1) throw std::invalid_argument("blasso_impute: sweeps must be >= 1");
    if (X_obs.cols() != X_mis.cols()) throw std::invalid_argument("blasso_impute: column mismatch");
    const Index q = X_obs.cols();
    if (warm.beta.size() != q) throw std::invalid_argument("blasso_impute: warm state dimension mismatch");

    auto [xs, scaling] = standardize(X_obs);
    const IndexList keep = scaling.non_degenerate();
    const Matrix x_fit = gather_cols(xs, keep);
    const double ybar = y_obs.mean();
    const Vector yc = y_obs.array() - ybar;

    BlassoState reduced = warm;
    reduced.beta = gather(warm.beta, keep);
    BlassoSampler sampler(x_fit, yc, hyper);
    for (int s = 0; s < sweeps; ++s) sampler.step(reduced, rng);

    BlassoImputation out;
    out.state = reduced;
    out.state.beta = Vector::Zero(q);
    for (std::size_t k = 0; k < keep.size(); ++k) out.state.beta(keep[k]) = reduced.beta(static_cast<Index>(k));

    const double sd = std::sqrt(reduced.sigma2);
    const double intercept = ybar + sd / std::sqrt(static_cast<double>(X_obs.rows())) * rng.gaussian();
    out.imputed = Vector(X_mis.rows());
    if (X_mis.rows() > 0) {
        const Matrix xm = gather_cols(scaling.apply(X_mis), keep);
        const Vector eta = xm * reduced.beta;
        for (Index i = 0; i < X_mis.rows(); ++i) out.imputed(i) = intercept + eta(i) + sd * rng.gaussian();
    }
    return out;
}

} // namespace hdmi
