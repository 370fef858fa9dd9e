#pragma once

#include "blasso.hpp"
#include "core.hpp"
#include "pca.hpp"
#include "pooling.hpp"
#include "random.hpp"
#include "regress.hpp"
#include "trees.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cctype>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace hdmi {

enum class Method { BRIDGE, DURR, IURR, BLASSO, MI_PCA, MI_CART, MI_RF, MI_QP, MI_AM, MI_OR };

inline constexpr std::array<Method, 10> kAllMethods{Method::BRIDGE, Method::DURR,    Method::IURR,  Method::BLASSO,
                                                    Method::MI_PCA, Method::MI_CART, Method::MI_RF, Method::MI_QP,
                                                    Method::MI_AM,  Method::MI_OR};

inline std::string method_name(Method m) {
    switch (m) {
    case Method::BRIDGE: return "BRIDGE";
    case Method::DURR: return "DURR";
    case Method::IURR: return "IURR";
    case Method::BLASSO: return "BLASSO";
    case Method::MI_PCA: return "MI_PCA";
    case Method::MI_CART: return "MI_CART";
    case Method::MI_RF: return "MI_RF";
    case Method::MI_QP: return "MI_QP";
    case Method::MI_AM: return "MI_AM";
    case Method::MI_OR: return "MI_OR";
    }
    throw std::logic_error("unknown method");
}

/// Case-insensitive; '-' and '_' are interchangeable.
inline std::optional<Method> parse_method(std::string_view s) {
    std::string key;
    for (char c : s) key.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    for (Method m : kAllMethods)
        if (method_name(m) == key) return m;
    return std::nullopt;
}

inline constexpr int kDefaultIterations = 50;
inline constexpr int kDefaultBlassoIterations = 200;
inline constexpr int kDefaultChains = 5;

inline int default_iterations(Method m) { return m == Method::BLASSO ? kDefaultBlassoIterations : kDefaultIterations; }

struct MethodParams {
    double ridge_kappa = 1e-5;  // BRIDGE, on standardized predictors
    int cv_folds = 10;          // DURR, IURR
    BlassoHyper blasso;
    int blasso_sweeps = 10;  // per MICE iteration
    double pca_var_target = kDefaultPcaVarianceTarget;
    std::optional<IndexList> pca_auxiliary;  // default: every non-target column
    TreeOptions cart;
    ForestOptions forest;
    double qp_threshold = 0.1;
    double qp_ridge = 1e-5;
    double qp_max_correlation = 0.999;
    double qp_lindep_eps = 1e-4;  // 0 disables the eigenvalue screen
    IndexList analysis_vars;      // MI_AM
    IndexList oracle_vars;        // MI_OR
};

struct ImputationSpec {
    Method method = Method::BRIDGE;
    int iterations = kDefaultIterations;
    int chains = kDefaultChains;
    std::uint64_t seed = 0;
    MethodParams params;

    static ImputationSpec for_method(Method m, std::uint64_t seed = 0) {
        ImputationSpec s;
        s.method = m;
        s.iterations = default_iterations(m);
        s.seed = seed;
        return s;
    }

    void validate(Index p) const {
        if (iterations < 1) throw InputError("imputation: iterations must be >= 1");
        if (chains < 1) throw InputError("imputation: chains must be >= 1");
        auto check_vars = [&](const IndexList& vars, const char* what) {
            for (Index v : vars)
                if (v < 0 || v >= p) throw InputError(std::string("imputation: ") + what + " index out of range");
        };
        switch (method) {
        case Method::BRIDGE:
            if (!(params.ridge_kappa >= 0.0)) throw InputError("imputation: ridge kappa must be >= 0");
            break;
        case Method::DURR:
        case Method::IURR:
            if (params.cv_folds < 2) throw InputError("imputation: cv_folds must be >= 2");
            break;
        case Method::BLASSO:
            params.blasso.validate();
            if (params.blasso_sweeps < 1) throw InputError("imputation: blasso sweeps must be >= 1");
            break;
        case Method::MI_PCA:
            if (!(params.pca_var_target > 0.0 && params.pca_var_target <= 1.0))
                throw InputError("imputation: var_target must lie in (0, 1]");
            if (params.pca_auxiliary) check_vars(*params.pca_auxiliary, "auxiliary");
            break;
        case Method::MI_CART:
        case Method::MI_RF:
            if (params.cart.min_leaf < 1 || params.forest.min_leaf < 1)
                throw InputError("imputation: min_leaf must be >= 1");
            if (params.forest.trees < 1) throw InputError("imputation: forest needs at least one tree");
            break;
        case Method::MI_QP:
            if (!(params.qp_threshold >= 0.0 && params.qp_threshold <= 1.0))
                throw InputError("imputation: quickpred threshold must lie in [0, 1]");
            if (!(params.qp_ridge >= 0.0) || !(params.qp_lindep_eps >= 0.0))
                throw InputError("imputation: quickpred safeguards must be >= 0");
            break;
        case Method::MI_AM:
            if (params.analysis_vars.empty()) throw InputError("imputation: MI_AM needs analysis variables");
            check_vars(params.analysis_vars, "analysis variable");
            break;
        case Method::MI_OR:
            if (params.oracle_vars.empty()) throw InputError("imputation: MI_OR needs oracle variables");
            check_vars(params.oracle_vars, "oracle variable");
            break;
        }
    }
};

/// Mean and sd of the currently imputed cells of one target after one step.
struct TraceEntry {
    int chain = 0;
    int iteration = 0;  // 1-based
    Index target = 0;
    double mean = 0.0;
    double sd = 0.0;
};

struct ChainTrace {
    int chains = 0;
    int iterations = 0;
    IndexList targets;               // targets with at least one missing cell
    std::vector<TraceEntry> entries;  // chain-major, then iteration, then target

    void write_csv(std::ostream& out, const std::vector<std::string>& names = {}) const {
        out << "chain,iteration,target,mean,sd\n";
        for (const auto& e : entries) {
            out << e.chain << ',' << e.iteration << ',';
            if (names.empty()) out << e.target;
            else out << names[static_cast<std::size_t>(e.target)];
            out << ',' << format_double(e.mean) << ',' << format_double(e.sd) << '\n';
        }
    }
};

struct MultiplyImputedData {
    std::vector<Dataset> completed;
    MissingMask mask;
    ChainTrace trace;
    ImputationSpec spec;
    std::vector<std::string> warnings;
};

/// Raised when an elementary step fails; identifies where.
struct ImputationError : Error {
    ImputationError(const std::string& what, Method method, int chain, int iteration, Index target)
        : Error(what), method(method), chain(chain), iteration(iteration), target(target) {}
    Method method;
    int chain;
    int iteration;
    Index target;
};

/// What one elementary step used, for instrumentation.
struct StepObservation {
    Method method;
    int chain;
    int iteration;
    Index target;
    IndexList design_columns;               // predictors entering the final model
    const Matrix* design = nullptr;         // that design on the observed rows, when one is formed
    std::optional<IndexList> lasso_active;  // IURR selection
};

struct RunOptions {
    int jobs = 1;  // chain-level threads
    std::function<void(const StepObservation&)> observer;
};

// ---------------------------------------------------------------------------
// Initialization and predictor screening
// ---------------------------------------------------------------------------

namespace detail {

inline void check_mask(const Dataset& data, const MissingMask& mask) {
    if (mask.mask.rows() != data.n() || mask.mask.cols() != data.p())
        throw InputError("mask shape does not match dataset");
    mask.validate();
    for (Index j = 0; j < data.p(); ++j)
        for (Index i = 0; i < data.n(); ++i)
            if (data.is_missing(i, j) && !mask.mask(i, j))
                throw InputError("dataset has missing cells not covered by the mask (column '" +
                                 data.columns()[static_cast<std::size_t>(j)] + "')");
}

inline IndexList targets_with_missing(const MissingMask& mask) {
    IndexList out;
    for (Index j : mask.target_columns)
        if (mask.mask.col(j).any()) out.push_back(j);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

} // namespace detail

/// Fills each masked cell with a uniform draw from its column's observed values.
inline Dataset initialize_fill(const Dataset& data, const MissingMask& mask, Rng& rng) {
    detail::check_mask(data, mask);
    Matrix values = data.values();
    for (Index j : detail::targets_with_missing(mask)) {
        const auto [obs, mis] = split_rows(mask.mask, j);
        if (obs.empty())
            throw InputError("initialize_fill: column '" + data.columns()[static_cast<std::size_t>(j)] +
                             "' has no observed values");
        for (Index i : mis) values(i, j) = data.values()(obs[rng.index(obs.size())], j);
    }
    return Dataset(std::move(values), data.columns());
}

/// Columns k != j whose correlation with column j, or with j's response
/// indicator, reaches r in absolute value (with 1e-12 slack so that r = 1
/// keeps exactly collinear columns). Correlations use pairwise-complete rows.
inline IndexList quickpred_select(const Dataset& data, const MissingMask& mask, Index j, double r) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("quickpred_select: r must lie in [0, 1]");
    detail::check_mask(data, mask);
    const Matrix& v = data.values();
    const BoolMatrix& miss = mask.mask;
    const Vector indicator = response_indicator(mask, j);
    IndexList out;
    for (Index k = 0; k < data.p(); ++k) {
        if (k == j) continue;
        const BoolVector mk = miss.col(k);
        const auto with_target = pairwise_correlation(v.col(k), v.col(j), mk, miss.col(j));
        const auto with_indicator = pairwise_correlation(v.col(k), indicator, mk);
        const double cut = r - 1e-12;
        if ((with_target && std::abs(*with_target) >= cut) || (with_indicator && std::abs(*with_indicator) >= cut))
            out.push_back(k);
    }
    return out;
}

namespace detail {

/// Greedy pass over the columns in order, dropping any whose |correlation|
/// with an already kept column exceeds max_r. Input columns are standardized.
inline IndexList drop_collinear_pairs(const Matrix& xs, double max_r) {
    const Index q = xs.cols();
    IndexList kept;
    if (q == 0) return kept;
    const double denom = static_cast<double>(std::max<Index>(xs.rows() - 1, 1));
    Matrix corr = Matrix::Zero(q, q);
    corr.selfadjointView<Eigen::Lower>().rankUpdate(xs.transpose(), 1.0 / denom);
    for (Index k = 0; k < q; ++k) {
        bool ok = true;
        for (Index a : kept) {
            const double c = k > a ? corr(k, a) : corr(a, k);
            if (std::abs(c) > max_r) {
                ok = false;
                break;
            }
        }
        if (ok) kept.push_back(k);
    }
    return kept;
}

/// Eigenvalue screen on the correlation matrix of standardized columns:
/// while the smallest eigenvalue is below eps times the largest, drop, for
/// each such eigenvalue, the column with the largest absolute loading on its
/// eigenvector. Returns the positions (into xs's columns) that are dropped.
inline IndexList near_dependent_columns(const Matrix& xs, double eps) {
    IndexList dropped;
    if (!(eps > 0.0) || xs.cols() < 2) return dropped;
    IndexList alive(static_cast<std::size_t>(xs.cols()));
    std::iota(alive.begin(), alive.end(), Index{0});
    const double denom = static_cast<double>(std::max<Index>(xs.rows() - 1, 1));
    while (alive.size() >= 2) {
        const Matrix sub = gather_cols(xs, alive);
        const Matrix corr = sub.transpose() * sub / denom;
        Eigen::SelfAdjointEigenSolver<Matrix> eig(corr);
        const Vector& values = eig.eigenvalues();  // ascending
        const double top = values(values.size() - 1);
        std::vector<bool> remove(alive.size(), false);
        bool any = false;
        for (Index e = 0; e < values.size() - 1 && values(e) < eps * top; ++e) {
            Index best = -1;
            double best_abs = -1.0;
            for (Index k = 0; k < values.size(); ++k) {
                if (remove[static_cast<std::size_t>(k)]) continue;
                const double a = std::abs(eig.eigenvectors()(k, e));
                if (a > best_abs) {
                    best_abs = a;
                    best = k;
                }
            }
            if (best < 0) break;
            remove[static_cast<std::size_t>(best)] = true;
            any = true;
        }
        if (!any) break;
        IndexList next;
        for (std::size_t k = 0; k < alive.size(); ++k) (remove[k] ? dropped : next).push_back(alive[k]);
        alive = std::move(next);
    }
    std::sort(dropped.begin(), dropped.end());
    return dropped;
}

inline std::pair<double, double> mean_sd(const Vector& v) {
    if (v.size() == 0) return {0.0, 0.0};
    return {v.mean(), std::sqrt(sample_variance(v))};
}

/// Data fixed for a run and shared read-only by all chains.
struct RunContext {
    const Dataset* data = nullptr;
    const MissingMask* mask = nullptr;
    const ImputationSpec* spec = nullptr;
    const RunOptions* options = nullptr;
    IndexList targets;
    std::vector<std::pair<IndexList, IndexList>> rows;  // (observed, missing) per target
    std::vector<IndexList> predictors;                  // per target, where fixed in advance
    Matrix pca_scores;                                  // MI_PCA
};

/// Per chain and target state that persists across iterations.
struct TargetState {
    std::optional<BlassoState> blasso;
    std::optional<IndexList> qp_dependent;  // columns dropped by the eigenvalue screen
};

class Chain {
public:
    Chain(const RunContext& ctx, int index) : ctx_(ctx), index_(index), rng_(derive_seed(ctx.spec->seed, {static_cast<std::uint64_t>(index)})) {
        state_.resize(ctx.targets.size());
    }

    Dataset run(std::vector<TraceEntry>& trace) {
        Matrix z = initialize_fill(*ctx_.data, *ctx_.mask, rng_).values();
        const ImputationSpec& spec = *ctx_.spec;
        for (int m = 1; m <= spec.iterations; ++m) {
            for (std::size_t t = 0; t < ctx_.targets.size(); ++t) {
                const Index j = ctx_.targets[t];
                Vector imputed;
                try {
                    imputed = step(z, t, m);
                } catch (const ImputationError&) {
                    throw;
                } catch (const std::exception& e) {
                    std::ostringstream msg;
                    msg << method_name(spec.method) << " failed on target '"
                        << ctx_.data->columns()[static_cast<std::size_t>(j)] << "' (chain " << index_ << ", iteration "
                        << m << "): " << e.what();
                    throw ImputationError(msg.str(), spec.method, index_, m, j);
                }
                const IndexList& mis = ctx_.rows[t].second;
                for (std::size_t r = 0; r < mis.size(); ++r) z(mis[r], j) = imputed(static_cast<Index>(r));
                const auto [mean, sd] = mean_sd(imputed);
                trace.push_back({index_, m, j, mean, sd});
            }
        }
        return Dataset(std::move(z), ctx_.data->columns());
    }

    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    Vector step(const Matrix& z, std::size_t t, int m) {
        const Index j = ctx_.targets[t];
        const auto& [obs, mis] = ctx_.rows[t];
        const MethodParams& par = ctx_.spec->params;
        switch (ctx_.spec->method) {
        case Method::BRIDGE: return normal_draw(z, t, m, all_others(z.cols(), j), par.ridge_kappa);
        case Method::DURR: return durr(z, t, m);
        case Method::IURR: return iurr(z, t, m);
        case Method::BLASSO: {
            const IndexList preds = all_others(z.cols(), j);
            const Vector y = gather(Vector(z.col(j)), obs);
            auto& warm = state_[t].blasso;
            if (!warm) warm = BlassoState::initial(static_cast<Index>(preds.size()), y);
            auto res = blasso_impute(gather(z, obs, preds), y, gather(z, mis, preds), *warm, par.blasso_sweeps,
                                     par.blasso, rng_);
            warm = std::move(res.state);
            observe(t, m, preds, nullptr);
            return res.imputed;
        }
        case Method::MI_PCA: return pca_draw(z, t, m);
        case Method::MI_CART: {
            const IndexList preds = all_others(z.cols(), j);
            const Vector y = gather(Vector(z.col(j)), obs);
            const Tree tree = cart_fit(gather(z, obs, preds), y, par.cart.min_leaf, par.cart.cp);
            observe(t, m, preds, nullptr);
            return cart_impute(tree, y, gather(z, mis, preds), rng_);
        }
        case Method::MI_RF: {
            const IndexList preds = all_others(z.cols(), j);
            const Vector y = gather(Vector(z.col(j)), obs);
            const Forest forest = forest_fit(gather(z, obs, preds), y, rng_, par.forest);
            observe(t, m, preds, nullptr);
            return forest_impute(forest, y, gather(z, mis, preds), rng_);
        }
        case Method::MI_QP: return qp_draw(z, t, m);
        case Method::MI_AM:
        case Method::MI_OR: return normal_draw(z, t, m, ctx_.predictors[t], 0.0);
        }
        throw std::logic_error("unknown method");
    }

    static IndexList all_others(Index p, Index j) {
        IndexList out;
        for (Index k = 0; k < p; ++k)
            if (k != j) out.push_back(k);
        return out;
    }

    void observe(std::size_t t, int m, const IndexList& cols, const Matrix* design,
                 std::optional<IndexList> active = std::nullopt) const {
        if (!ctx_.options->observer) return;
        ctx_.options->observer(
            StepObservation{ctx_.spec->method, index_, m, ctx_.targets[t], cols, design, std::move(active)});
    }

    /// Bayesian normal linear draw for the missing rows of target t on the
    /// given predictor columns of z, standardized on the observed rows.
    Vector normal_draw(const Matrix& z, std::size_t t, int m, const IndexList& preds, double kappa) {
        const Index j = ctx_.targets[t];
        const auto& [obs, mis] = ctx_.rows[t];
        const Vector y = gather(Vector(z.col(j)), obs);
        if (preds.empty()) return fit_and_draw(Matrix(static_cast<Index>(obs.size()), 0), y,
                                               Matrix(static_cast<Index>(mis.size()), 0), kappa, t, m, preds);
        auto [xs, scaling] = standardize(gather(z, obs, preds));
        const IndexList keep = scaling.non_degenerate();
        IndexList cols;
        for (Index k : keep) cols.push_back(preds[static_cast<std::size_t>(k)]);
        const Matrix x_mis = gather_cols(scaling.apply(gather(z, mis, preds)), keep);
        return fit_and_draw(gather_cols(xs, keep), y, x_mis, kappa, t, m, cols);
    }

    Vector fit_and_draw(const Matrix& x_obs, const Vector& y, const Matrix& x_mis, double kappa, std::size_t t, int m,
                        const IndexList& cols) {
        observe(t, m, cols, &x_obs);
        const LinearFit fit = bayes_ridge_draw(x_obs, y, kappa, rng_);
        return predictive_draw(fit, x_mis, rng_);
    }

    Vector pca_draw(const Matrix& z, std::size_t t, int m) {
        const Index j = ctx_.targets[t];
        const auto& [obs, mis] = ctx_.rows[t];
        const Index c = ctx_.pca_scores.cols();
        IndexList others;
        for (Index k : ctx_.targets)
            if (k != j) others.push_back(k);
        Matrix full(z.rows(), static_cast<Index>(others.size()) + c);
        full.leftCols(static_cast<Index>(others.size())) = gather_cols(z, others);
        full.rightCols(c) = ctx_.pca_scores;
        // Design column ids: target indices, then p + k for score k.
        IndexList ids = others;
        for (Index k = 0; k < c; ++k) ids.push_back(z.cols() + k);
        IndexList all(static_cast<std::size_t>(full.cols()));
        std::iota(all.begin(), all.end(), Index{0});
        auto [xs, scaling] = standardize(gather(full, obs, all));
        const IndexList keep = scaling.non_degenerate();
        IndexList cols;
        for (Index k : keep) cols.push_back(ids[static_cast<std::size_t>(k)]);
        const Matrix x_mis = gather_cols(scaling.apply(gather(full, mis, all)), keep);
        return fit_and_draw(gather_cols(xs, keep), gather(Vector(z.col(j)), obs), x_mis, 0.0, t, m, cols);
    }

    Vector qp_draw(const Matrix& z, std::size_t t, int m) {
        const Index j = ctx_.targets[t];
        const auto& [obs, mis] = ctx_.rows[t];
        const MethodParams& par = ctx_.spec->params;
        const IndexList& preds = ctx_.predictors[t];
        const Vector y = gather(Vector(z.col(j)), obs);
        if (preds.empty())
            return fit_and_draw(Matrix(static_cast<Index>(obs.size()), 0), y, Matrix(static_cast<Index>(mis.size()), 0),
                                par.qp_ridge, t, m, preds);
        auto [xs, scaling] = standardize(gather(z, obs, preds));
        IndexList keep = scaling.non_degenerate();
        const Matrix xk = gather_cols(xs, keep);
        IndexList pos;
        for (Index k : detail::drop_collinear_pairs(xk, par.qp_max_correlation)) pos.push_back(keep[static_cast<std::size_t>(k)]);

        // The eigenvalue screen runs on the first visit of each chain and
        // target; later iterations reuse the columns it dropped.
        auto& dependent = state_[t].qp_dependent;
        if (!dependent) {
            dependent.emplace();
            for (Index k : detail::near_dependent_columns(gather_cols(xs, pos), par.qp_lindep_eps))
                dependent->push_back(preds[static_cast<std::size_t>(pos[static_cast<std::size_t>(k)])]);
        }
        IndexList final_pos, cols;
        for (Index k : pos) {
            const Index col = preds[static_cast<std::size_t>(k)];
            if (std::binary_search(dependent->begin(), dependent->end(), col)) continue;
            final_pos.push_back(k);
            cols.push_back(col);
        }
        const Matrix x_mis = gather_cols(scaling.apply(gather(z, mis, preds)), final_pos);
        return fit_and_draw(gather_cols(xs, final_pos), y, x_mis, par.qp_ridge, t, m, cols);
    }

    Vector durr(const Matrix& z, std::size_t t, int m) {
        const Index j = ctx_.targets[t];
        const auto& mis = ctx_.rows[t].second;
        const MethodParams& par = ctx_.spec->params;
        const IndexList preds = all_others(z.cols(), j);
        // Bootstrap the completed rows, then keep those observed on j.
        IndexList boot;
        for (std::size_t r : rng_.bootstrap_indices(static_cast<std::size_t>(z.rows())))
            if (!ctx_.mask->mask(static_cast<Index>(r), j)) boot.push_back(static_cast<Index>(r));
        if (boot.size() < 3) throw InputError("DURR: bootstrap sample has fewer than 3 observed rows");
        const Vector y = gather(Vector(z.col(j)), boot);
        auto [xs, scaling] = standardize(gather(z, boot, preds));
        const IndexList keep = scaling.non_degenerate();
        IndexList cols;
        for (Index k : keep) cols.push_back(preds[static_cast<std::size_t>(k)]);
        const Matrix x_fit = gather_cols(xs, keep);
        const int folds = std::min<int>(par.cv_folds, static_cast<int>(boot.size()));
        LinearFit fit = lasso_cv(x_fit, y, folds, rng_).fit;
        IndexList active;
        for (Index k : fit.active_set) active.push_back(cols[static_cast<std::size_t>(k)]);
        observe(t, m, active, nullptr, active);
        const Matrix x_mis = gather_cols(scaling.apply(gather(z, mis, preds)), keep);
        return predictive_draw(fit, x_mis, rng_);
    }

    Vector iurr(const Matrix& z, std::size_t t, int m) {
        const Index j = ctx_.targets[t];
        const auto& [obs, mis] = ctx_.rows[t];
        const MethodParams& par = ctx_.spec->params;
        const IndexList preds = all_others(z.cols(), j);
        const Vector y = gather(Vector(z.col(j)), obs);
        auto [xs, scaling] = standardize(gather(z, obs, preds));
        const IndexList keep = scaling.non_degenerate();
        const int folds = std::min<int>(par.cv_folds, static_cast<int>(obs.size()));
        const CvResult cv = lasso_cv(gather_cols(xs, keep), y, folds, rng_);
        IndexList active;
        for (Index k : cv.fit.active_set) active.push_back(preds[static_cast<std::size_t>(keep[static_cast<std::size_t>(k)])]);

        const Matrix x_obs = gather(z, obs, active);
        const Matrix x_mis = gather(z, mis, active);
        observe(t, m, active, &x_obs, active);
        LinearFit mle;
        try {
            mle = ols_mle(x_obs, y);
        } catch (const SingularDesignError& e) {
            warnings_.push_back(std::string("IURR: ") + e.what() + "; ridge draw with kappa 1e-5 on the active set");
            auto [as, asc] = standardize(x_obs);
            const IndexList ak = asc.non_degenerate();
            const LinearFit fit = bayes_ridge_draw(gather_cols(as, ak), y, 1e-5, rng_);
            return predictive_draw(fit, gather_cols(asc.apply(x_mis), ak), rng_);
        }

        // theta ~ N(theta_hat, Cov), sigma ~ N(sigma_hat, sigma_hat^2 / (2 (n - q - 1))), independently.
        const Index q = x_obs.cols();
        const Matrix& cov = *mle.coef_covariance;
        Vector e(q + 1);
        for (Index k = 0; k <= q; ++k) e(k) = rng_.gaussian();
        Vector shift;
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() == Eigen::Success) {
            shift = llt.matrixL() * e;
        } else {
            Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
            shift = eig.eigenvectors() * (eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * e);
        }
        LinearFit draw;
        draw.intercept = mle.intercept + shift(0);
        draw.coefficients = mle.coefficients + shift.tail(q);
        const double sigma_hat = std::sqrt(mle.sigma2);
        const double sigma_sd = sigma_hat / std::sqrt(2.0 * static_cast<double>(obs.size() - static_cast<std::size_t>(q) - 1));
        double sigma = -1.0;
        for (int attempt = 0; attempt <= 10 && !(sigma > 0.0); ++attempt) sigma = rng_.gaussian(sigma_hat, sigma_sd);
        if (!(sigma > 0.0)) {
            std::ostringstream msg;
            msg << "IURR: sigma draw nonpositive after 10 redraws on target " << j << " (chain " << index_
                << ", iteration " << m << "); using the MLE";
            warnings_.push_back(msg.str());
            sigma = sigma_hat;
        }
        draw.sigma2 = sigma * sigma;
        return predictive_draw(draw, x_mis, rng_);
    }

    const RunContext& ctx_;
    int index_;
    Rng rng_;
    std::vector<TargetState> state_;
    std::vector<std::string> warnings_;
};

inline RunContext make_context(const Dataset& data, const MissingMask& mask, const ImputationSpec& spec,
                               const RunOptions& options) {
    RunContext ctx;
    ctx.data = &data;
    ctx.mask = &mask;
    ctx.spec = &spec;
    ctx.options = &options;
    ctx.targets = targets_with_missing(mask);
    for (Index j : ctx.targets) {
        ctx.rows.push_back(split_rows(mask.mask, j));
        if (ctx.rows.back().first.empty())
            throw InputError("column '" + data.columns()[static_cast<std::size_t>(j)] + "' has no observed values");
    }
    const MethodParams& par = spec.params;
    auto minus = [](const IndexList& vars, Index j) {
        IndexList out;
        for (Index v : vars)
            if (v != j) out.push_back(v);
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    };
    for (Index j : ctx.targets) {
        switch (spec.method) {
        case Method::MI_AM: ctx.predictors.push_back(minus(par.analysis_vars, j)); break;
        case Method::MI_OR: ctx.predictors.push_back(minus(par.oracle_vars, j)); break;
        case Method::MI_QP: ctx.predictors.push_back(quickpred_select(data, mask, j, par.qp_threshold)); break;
        default: ctx.predictors.emplace_back(); break;
        }
    }
    if (spec.method == Method::MI_PCA) {
        IndexList aux;
        if (par.pca_auxiliary) {
            aux = *par.pca_auxiliary;
        } else {
            for (Index k = 0; k < data.p(); ++k)
                if (!mask.is_target(k)) aux.push_back(k);
        }
        if (aux.empty()) throw InputError("MI_PCA: no auxiliary columns");
        for (Index k : aux)
            if (mask.mask.col(k).any() || data.missing().col(k).any())
                throw InputError("MI_PCA: auxiliary column '" + data.columns()[static_cast<std::size_t>(k)] +
                                 "' is not fully observed");
        const Matrix a = gather_cols(data.values(), aux);
        const PcaModel model = pca_fit(a, par.pca_var_target);
        ctx.pca_scores = pca_scores(model, a);
    }
    return ctx;
}

} // namespace detail

/// Runs spec.chains independent chains of spec.iterations sweeps over the
/// targets (ascending column order). Each chain's final state is one
/// completed dataset. Results do not depend on options.jobs.
inline MultiplyImputedData mice_run(const Dataset& data, const MissingMask& mask, const ImputationSpec& spec,
                                    const RunOptions& options = {}) {
    detail::check_mask(data, mask);
    spec.validate(data.p());
    const detail::RunContext ctx = detail::make_context(data, mask, spec, options);

    const auto d = static_cast<std::size_t>(spec.chains);
    std::vector<std::optional<Dataset>> completed(d);
    std::vector<std::vector<TraceEntry>> traces(d);
    std::vector<std::vector<std::string>> warnings(d);
    std::vector<std::exception_ptr> errors(d);

    auto run_chain = [&](std::size_t c) {
        try {
            detail::Chain chain(ctx, static_cast<int>(c));
            completed[c] = chain.run(traces[c]);
            warnings[c] = chain.warnings();
        } catch (...) {
            errors[c] = std::current_exception();
        }
    };
    const std::size_t jobs = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(options.jobs, 1)), 1, d);
    if (jobs == 1) {
        for (std::size_t c = 0; c < d; ++c) run_chain(c);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < jobs; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t c = w; c < d; c += jobs) run_chain(c);
            });
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    MultiplyImputedData out;
    out.mask = mask;
    out.spec = spec;
    out.trace.chains = spec.chains;
    out.trace.iterations = spec.iterations;
    out.trace.targets = ctx.targets;
    for (std::size_t c = 0; c < d; ++c) {
        out.completed.push_back(std::move(*completed[c]));
        out.trace.entries.insert(out.trace.entries.end(), traces[c].begin(), traces[c].end());
        out.warnings.insert(out.warnings.end(), warnings[c].begin(), warnings[c].end());
    }
    return out;
}

/// Rubin-pools each estimand over the completed datasets.
inline std::vector<PooledEstimate> pool_estimands(const MultiplyImputedData& mi, const std::vector<EstimandSpec>& estimands,
                                                  PoolOptions opts = {}) {
    std::vector<std::vector<EstimandValue>> per(estimands.size());
    for (const auto& ds : mi.completed) {
        const auto values = evaluate_estimands(estimands, ds.values());
        for (std::size_t k = 0; k < values.size(); ++k) per[k].push_back(values[k]);
    }
    std::vector<PooledEstimate> out;
    for (const auto& v : per) out.push_back(rubin_pool(v, opts));
    return out;
}

// ---------------------------------------------------------------------------
// Ridge penalty selection
// ---------------------------------------------------------------------------

inline const std::vector<double>& default_kappa_grid() {
    static const std::vector<double> grid{1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8};
    return grid;
}

struct PilotData {
    Dataset data;
    MissingMask mask;
};

struct KappaSelection {
    double kappa = 0.0;
    std::vector<double> grid;
    std::vector<double> average_fmi;  // NaN where the pilot run failed
    std::vector<std::string> failures;
    std::size_t pilot_count = 0;
};

/// Runs BRIDGE on every pilot at each kappa (the pilot spec's seed is reused
/// across kappas) and returns the kappa with the smallest FMI averaged over
/// estimands and pilots. Ties go to the larger kappa.
inline KappaSelection ridge_kappa_cv(const std::vector<PilotData>& pilots, const std::vector<double>& grid,
                                     ImputationSpec pilot_spec, const std::vector<EstimandSpec>& estimands,
                                     const RunOptions& options = {}) {
    if (grid.empty()) throw InputError("ridge_kappa_cv: empty kappa grid");
    if (pilots.empty()) throw InputError("ridge_kappa_cv: no pilot data");
    if (estimands.empty()) throw InputError("ridge_kappa_cv: no estimands");
    pilot_spec.method = Method::BRIDGE;
    KappaSelection sel;
    sel.grid = grid;
    sel.pilot_count = pilots.size();
    std::optional<std::size_t> best;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        double total = 0.0;
        std::size_t count = 0;
        try {
            for (std::size_t p = 0; p < pilots.size(); ++p) {
                ImputationSpec s = pilot_spec;
                s.params.ridge_kappa = grid[g];
                s.seed = derive_seed(pilot_spec.seed, {static_cast<std::uint64_t>(p)});
                const auto mi = mice_run(pilots[p].data, pilots[p].mask, s, options);
                for (const auto& pe : pool_estimands(mi, estimands)) {
                    total += pe.fmi;
                    ++count;
                }
            }
            sel.average_fmi.push_back(total / static_cast<double>(count));
        } catch (const Error& e) {
            sel.average_fmi.push_back(std::numeric_limits<double>::quiet_NaN());
            sel.failures.push_back("kappa " + format_double(grid[g]) + ": " + e.what());
            continue;
        }
        const double f = sel.average_fmi.back();
        if (!best || f < sel.average_fmi[*best] || (f == sel.average_fmi[*best] && grid[g] > grid[*best])) best = g;
    }
    if (!best) throw Error("ridge_kappa_cv: every kappa failed");
    sel.kappa = grid[*best];
    return sel;
}

inline KappaSelection ridge_kappa_cv(const Dataset& data, const MissingMask& mask, const std::vector<double>& grid,
                                     const ImputationSpec& pilot_spec, const std::vector<EstimandSpec>& estimands,
                                     const RunOptions& options = {}) {
    return ridge_kappa_cv(std::vector<PilotData>{{data, mask}}, grid, pilot_spec, estimands, options);
}

// ---------------------------------------------------------------------------
// Convergence
// ---------------------------------------------------------------------------

struct TargetDrift {
    Index target = 0;
    double prior_mean = 0.0;  // iterations (M - 2s, M - s]
    double last_mean = 0.0;   // iterations (M - s, M], s = floor(M / 5)
    double drift = 0.0;       // |last - prior| / |prior|, or |last - prior| when prior = 0
};

/// Relative change in the mean of the imputed-value means between the last
/// fifth of the iterations and the fifth before it, pooled over chains.
inline std::vector<TargetDrift> convergence_summary(const ChainTrace& trace) {
    if (trace.iterations < 10) throw InputError("convergence_summary: need at least 10 iterations");
    const int seg = trace.iterations / 5;
    const int last_start = trace.iterations - seg;      // iterations > last_start are "last"
    const int prior_start = trace.iterations - 2 * seg;  // iterations in (prior_start, last_start] are "prior"
    std::map<Index, std::array<double, 4>> acc;          // prior sum, prior n, last sum, last n
    for (Index j : trace.targets) acc[j] = {0.0, 0.0, 0.0, 0.0};
    for (const auto& e : trace.entries) {
        auto& a = acc[e.target];
        if (e.iteration > last_start) {
            a[2] += e.mean;
            a[3] += 1.0;
        } else if (e.iteration > prior_start) {
            a[0] += e.mean;
            a[1] += 1.0;
        }
    }
    std::vector<TargetDrift> out;
    for (const auto& [j, a] : acc) {
        TargetDrift d;
        d.target = j;
        d.prior_mean = a[1] > 0 ? a[0] / a[1] : 0.0;
        d.last_mean = a[3] > 0 ? a[2] / a[3] : 0.0;
        const double diff = std::abs(d.last_mean - d.prior_mean);
        d.drift = d.prior_mean != 0.0 ? diff / std::abs(d.prior_mean) : diff;
        out.push_back(d);
    }
    return out;
}

} // namespace hdmi
