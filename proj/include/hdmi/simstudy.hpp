#pragma once

#include "amputation.hpp"
#include "core.hpp"
#include "mice.hpp"
#include "pooling.hpp"
#include "random.hpp"

#include <Eigen/Cholesky>

#include <atomic>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

namespace hdmi {

// ---------------------------------------------------------------------------
// Population
// ---------------------------------------------------------------------------

/// Multivariate normal population: columns 0-4 form block 1, columns 5-9
/// block 2, the rest are independent. Every column has the same mean and variance.
struct PopulationModel {
    Index p = 50;
    double mean = 5.0;
    double variance = 5.0;
    double block1_rho = 0.6;
    double block2_rho = 0.3;
    bool block2_within = true;  // block-2 pairs at block2_rho; otherwise only block1 x block2 pairs

    static constexpr Index kBlockSize = 5;

    void validate() const {
        if (p < 2 * kBlockSize) throw InputError("population: p must be >= 10");
        if (!(variance > 0.0)) throw InputError("population: variance must be > 0");
    }
};

inline int population_block(Index k) {
    if (k < PopulationModel::kBlockSize) return 1;
    if (k < 2 * PopulationModel::kBlockSize) return 2;
    return 0;
}

inline Matrix gen_covariance(const PopulationModel& model) {
    model.validate();
    const Index p = model.p;
    Matrix sigma = Matrix::Zero(p, p);
    for (Index a = 0; a < p; ++a) {
        for (Index b = 0; b < p; ++b) {
            if (a == b) {
                sigma(a, b) = model.variance;
                continue;
            }
            const int ba = population_block(a), bb = population_block(b);
            double rho = 0.0;
            if (ba == 1 && bb == 1) rho = model.block1_rho;
            else if ((ba == 1 && bb == 2) || (ba == 2 && bb == 1)) rho = model.block2_rho;
            else if (ba == 2 && bb == 2 && model.block2_within) rho = model.block2_rho;
            sigma(a, b) = rho * model.variance;
        }
    }
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) throw InputError("population covariance is not positive definite");
    return sigma;
}

/// Samples n rows from N(mean, Sigma) through the Cholesky factor of Sigma.
class PopulationSampler {
public:
    explicit PopulationSampler(const PopulationModel& model)
        : model_(model), factor_(Eigen::LLT<Matrix>(gen_covariance(model)).matrixL()) {}

    Matrix sample(Index n, Rng& rng) const {
        const Index p = model_.p;
        Matrix z(n, p);
        for (Index i = 0; i < n; ++i)
            for (Index k = 0; k < p; ++k) z(i, k) = rng.gaussian();
        Matrix x = z * factor_.transpose();
        x.array() += model_.mean;
        return x;
    }

private:
    PopulationModel model_;
    Matrix factor_;
};

inline Dataset gen_sample(const PopulationModel& model, Index n, Rng& rng) {
    return Dataset::with_default_names(PopulationSampler(model).sample(n, rng));
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Absolute percent relative bias. With truth = 0 the absolute bias is
/// returned and `absolute` is set.
inline double prb(const std::vector<double>& estimates, double truth, bool* absolute = nullptr) {
    if (estimates.empty()) throw InputError("prb: no estimates");
    double sum = 0.0;
    for (double e : estimates) sum += e;
    const double bias = std::abs(sum / static_cast<double>(estimates.size()) - truth);
    if (absolute) *absolute = truth == 0.0;
    return truth == 0.0 ? bias : bias / std::abs(truth) * 100.0;
}

/// Fraction of closed intervals containing truth.
inline double cic(const std::vector<std::pair<double, double>>& intervals, double truth) {
    if (intervals.empty()) throw InputError("cic: no intervals");
    std::size_t hit = 0;
    for (const auto& [lo, hi] : intervals) {
        if (lo > hi) throw InputError("cic: interval bounds out of order");
        hit += lo <= truth && truth <= hi;
    }
    return static_cast<double>(hit) / static_cast<double>(intervals.size());
}

/// p0 +/- 2 sqrt(p0 (1 - p0) / S).
inline std::pair<double, double> significance_band(double p0, int S) {
    if (S < 1) throw InputError("significance_band: S must be >= 1");
    const double half = 2.0 * std::sqrt(p0 * (1.0 - p0) / static_cast<double>(S));
    return {p0 - half, p0 + half};
}

inline constexpr double kBiasThreshold = 10.0;
inline constexpr double kUnderCoverage = 0.90;
inline constexpr double kOverCoverage = 0.99;
inline constexpr double kNominalLow = 0.94;
inline constexpr double kNominalHigh = 0.96;
inline constexpr double kFailureCeiling = 0.05;

// ---------------------------------------------------------------------------
// Methods and records
// ---------------------------------------------------------------------------

/// GS (complete data before amputation), CC (complete cases) or an MI method.
struct StudyMethod {
    enum class Kind { GS, CC, MI } kind = Kind::GS;
    Method mi = Method::BRIDGE;

    static StudyMethod gs() { return {Kind::GS, Method::BRIDGE}; }
    static StudyMethod cc() { return {Kind::CC, Method::BRIDGE}; }
    static StudyMethod imputation(Method m) { return {Kind::MI, m}; }

    std::string name() const {
        switch (kind) {
        case Kind::GS: return "GS";
        case Kind::CC: return "CC";
        case Kind::MI: return method_name(mi);
        }
        return "";
    }

    bool operator==(const StudyMethod& o) const { return kind == o.kind && (kind != Kind::MI || mi == o.mi); }
};

inline std::optional<StudyMethod> parse_study_method(std::string_view s) {
    std::string up;
    for (char c : s) up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (up == "GS") return StudyMethod::gs();
    if (up == "CC") return StudyMethod::cc();
    if (auto m = parse_method(s)) return StudyMethod::imputation(*m);
    return std::nullopt;
}

/// One method's result for one estimand in one replication. NaN estimate
/// marks a failed replication.
struct ReplicationRecord {
    std::string condition;
    int replication = 0;
    std::string method;
    std::string estimand;
    double estimate = std::numeric_limits<double>::quiet_NaN();
    double ci_low = std::numeric_limits<double>::quiet_NaN();
    double ci_high = std::numeric_limits<double>::quiet_NaN();
    double fmi = std::numeric_limits<double>::quiet_NaN();
    double wallclock_ms = 0.0;

    bool failed() const { return !std::isfinite(estimate); }
};

inline std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : "NA"; }

inline void write_replication_csv(std::ostream& out, const std::vector<ReplicationRecord>& records) {
    out << "condition,replication,method,estimand,estimate,ci_low,ci_high,fmi,wallclock_ms\n";
    for (const auto& r : records)
        out << r.condition << ',' << r.replication << ',' << r.method << ',' << r.estimand << ','
            << csv_number(r.estimate) << ',' << csv_number(r.ci_low) << ',' << csv_number(r.ci_high) << ','
            << csv_number(r.fmi) << ',' << csv_number(r.wallclock_ms) << '\n';
}

inline std::vector<ReplicationRecord> read_replication_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw InputError("replication CSV is empty");
    const auto header = split_csv_line(line);
    const std::vector<std::string> expected{"condition", "replication", "method", "estimand", "estimate",
                                            "ci_low",    "ci_high",     "fmi",    "wallclock_ms"};
    if (header != expected) throw InputError("replication CSV: unexpected header");
    std::vector<ReplicationRecord> out;
    std::size_t line_no = 1;
    auto number = [&](const std::string& s, bool allow_missing) {
        if (is_missing_token(s)) {
            if (!allow_missing) throw InputError("replication CSV line " + std::to_string(line_no) + ": missing value");
            return std::numeric_limits<double>::quiet_NaN();
        }
        const auto v = parse_double(s);
        if (!v) throw InputError("replication CSV line " + std::to_string(line_no) + ": not a number: '" + s + "'");
        return *v;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() != expected.size())
            throw InputError("replication CSV line " + std::to_string(line_no) + ": wrong field count");
        ReplicationRecord r;
        r.condition = f[0];
        const double rep = number(f[1], false);
        if (rep != std::floor(rep) || rep < 0)
            throw InputError("replication CSV line " + std::to_string(line_no) + ": bad replication index");
        r.replication = static_cast<int>(rep);
        r.method = f[2];
        r.estimand = f[3];
        if (r.method.empty() || r.estimand.empty())
            throw InputError("replication CSV line " + std::to_string(line_no) + ": empty method or estimand");
        r.estimate = number(f[4], true);
        r.ci_low = number(f[5], true);
        r.ci_high = number(f[6], true);
        r.fmi = number(f[7], true);
        r.wallclock_ms = number(f[8], true);
        if (!r.failed() && !(r.ci_low <= r.ci_high))
            throw InputError("replication CSV line " + std::to_string(line_no) + ": interval bounds out of order");
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct EstimandSummary {
    std::string estimand;
    double truth = 0.0;
    double prb = 0.0;
    double cic = 0.0;
    double ci_width = 0.0;
    int n_valid = 0;
    bool absolute_bias = false;  // truth was 0

    bool biased() const { return prb > kBiasThreshold; }
    bool severe_under() const { return cic < kUnderCoverage; }
    bool severe_over() const { return cic > kOverCoverage; }
    bool significant() const { return cic < kNominalLow || cic > kNominalHigh; }
};

struct MethodSummary {
    std::string method;
    int replications = 0;
    int failures = 0;
    bool valid = true;  // failures within the ceiling
    double wallclock_ms = 0.0;
    std::vector<EstimandSummary> estimands;
    std::vector<std::string> failure_messages;
};

struct ConditionResult {
    std::string label;
    std::vector<std::string> estimands;
    std::vector<double> truth;  // mean GS estimate per estimand
    std::vector<MethodSummary> methods;
    std::vector<ReplicationRecord> records;
    std::optional<KappaSelection> bridge_kappa;
    std::vector<std::string> warnings;

    const MethodSummary& method(const std::string& name) const {
        for (const auto& m : methods)
            if (m.method == name) return m;
        throw std::out_of_range("no method '" + name + "' in result");
    }
};

inline std::string summary_flags(const MethodSummary& m, const EstimandSummary& e) {
    std::string out;
    auto add = [&](const char* f) {
        if (!out.empty()) out += ';';
        out += f;
    };
    if (!m.valid) add("invalid");
    if (e.absolute_bias) add("absolute_bias");
    if (e.n_valid == 0) return out.empty() ? "no_data" : out + ";no_data";
    if (e.biased()) add("biased");
    if (e.severe_under()) add("severe_under");
    if (e.severe_over()) add("severe_over");
    if (e.significant()) add("significant");
    return out;
}

/// Summarizes per-replication records. Truth is the mean GS estimate over
/// all replications; methods are reported in the given order (every method
/// present in the records when empty).
inline ConditionResult aggregate_records(const std::string& label, const std::vector<ReplicationRecord>& records,
                                         std::vector<std::string> methods = {}) {
    ConditionResult res;
    res.label = label;
    std::map<std::string, std::size_t> est_index;
    std::vector<std::string> present_methods;
    for (const auto& r : records) {
        if (r.condition != label) continue;
        if (est_index.emplace(r.estimand, res.estimands.size()).second) res.estimands.push_back(r.estimand);
        if (std::find(present_methods.begin(), present_methods.end(), r.method) == present_methods.end())
            present_methods.push_back(r.method);
    }
    if (methods.empty()) methods = present_methods;
    const std::size_t ne = res.estimands.size();

    std::vector<double> gs_sum(ne, 0.0);
    std::vector<int> gs_n(ne, 0);
    for (const auto& r : records) {
        if (r.condition != label || r.method != "GS" || r.failed()) continue;
        const std::size_t k = est_index.at(r.estimand);
        gs_sum[k] += r.estimate;
        ++gs_n[k];
    }
    res.truth.resize(ne);
    for (std::size_t k = 0; k < ne; ++k) {
        if (gs_n[k] == 0) throw InputError("aggregate: no GS estimates for '" + res.estimands[k] + "'");
        res.truth[k] = gs_sum[k] / gs_n[k];
    }

    for (const auto& name : methods) {
        MethodSummary ms;
        ms.method = name;
        std::vector<std::vector<double>> est(ne);
        std::vector<std::vector<std::pair<double, double>>> ci(ne);
        std::map<int, bool> rep_failed;
        std::map<int, double> rep_time;
        for (const auto& r : records) {
            if (r.condition != label || r.method != name) continue;
            bool& f = rep_failed[r.replication];
            f = f || r.failed();
            rep_time[r.replication] = r.wallclock_ms;
        }
        for (const auto& r : records) {
            if (r.condition != label || r.method != name || rep_failed[r.replication]) continue;
            const std::size_t k = est_index.at(r.estimand);
            est[k].push_back(r.estimate);
            ci[k].emplace_back(r.ci_low, r.ci_high);
        }
        ms.replications = static_cast<int>(rep_failed.size());
        for (const auto& [rep, failed] : rep_failed) ms.failures += failed;
        for (const auto& [rep, t] : rep_time) ms.wallclock_ms += t;
        ms.valid = ms.failures <= kFailureCeiling * ms.replications;
        for (std::size_t k = 0; k < ne; ++k) {
            EstimandSummary es;
            es.estimand = res.estimands[k];
            es.truth = res.truth[k];
            es.n_valid = static_cast<int>(est[k].size());
            if (es.n_valid > 0) {
                es.prb = prb(est[k], es.truth, &es.absolute_bias);
                es.cic = cic(ci[k], es.truth);
                double w = 0.0;
                for (const auto& [lo, hi] : ci[k]) w += hi - lo;
                es.ci_width = w / es.n_valid;
            } else {
                es.prb = es.cic = es.ci_width = std::numeric_limits<double>::quiet_NaN();
            }
            ms.estimands.push_back(es);
        }
        res.methods.push_back(std::move(ms));
    }
    res.records = records;
    return res;
}

/// condition, method, estimand, prb, cic, flags, then ci_width and n_valid.
/// Contains no timing, so it is reproducible bit for bit.
inline void write_summary_csv(std::ostream& out, const std::vector<ConditionResult>& results) {
    out << "condition,method,estimand,prb,cic,flags,ci_width,n_valid\n";
    for (const auto& res : results)
        for (const auto& m : res.methods)
            for (const auto& e : m.estimands)
                out << res.label << ',' << m.method << ',' << e.estimand << ',' << csv_number(e.prb) << ','
                    << csv_number(e.cic) << ',' << summary_flags(m, e) << ',' << csv_number(e.ci_width) << ','
                    << e.n_valid << '\n';
}

// ---------------------------------------------------------------------------
// Running replications
// ---------------------------------------------------------------------------

struct StudyOptions {
    std::vector<StudyMethod> methods;
    std::uint64_t master_seed = 0;
    int chains = kDefaultChains;
    std::optional<int> iterations;  // default: per-method
    MethodParams params;
    std::optional<double> bridge_kappa;  // unset: chosen by ridge_kappa_cv on pilot data
    std::vector<double> kappa_grid = default_kappa_grid();
    int pilot_count = 1;
    int jobs = 1;
    double level = 0.95;
};

/// One replication's inputs: the data before amputation and the imposed mask.
struct Replicate {
    Matrix full;
    MissingMask mask;
};

namespace detail {

inline constexpr std::uint64_t kDataStream = 1;
inline constexpr std::uint64_t kMaskStream = 2;
inline constexpr std::uint64_t kMethodStream = 100;
inline constexpr std::uint64_t kPilotStream = 0x70696c6f74ULL;

inline EstimandValue checked(const EstimandValue& v) {
    if (!std::isfinite(v.estimate) || !std::isfinite(v.variance)) throw Error("non-finite estimate");
    return v;
}

inline void complete_data_records(std::vector<ReplicationRecord>& out, const std::string& label, int rep,
                                  const std::string& method, const std::vector<EstimandSpec>& estimands,
                                  const Matrix& data, double level, double ms) {
    const auto values = evaluate_estimands(estimands, data);
    const double p = 0.5 + 0.5 * level;
    for (std::size_t k = 0; k < estimands.size(); ++k) {
        const auto v = checked(values[k]);
        const double half = t_quantile(v.df_complete, p) * std::sqrt(v.variance);
        ReplicationRecord r{label, rep, method, estimands[k].name, v.estimate, v.estimate - half, v.estimate + half,
                            std::numeric_limits<double>::quiet_NaN(), ms};
        out.push_back(std::move(r));
    }
}

inline void failed_records(std::vector<ReplicationRecord>& out, const std::string& label, int rep,
                           const std::string& method, const std::vector<EstimandSpec>& estimands, double ms) {
    for (const auto& e : estimands) {
        ReplicationRecord r;
        r.condition = label;
        r.replication = rep;
        r.method = method;
        r.estimand = e.name;
        r.wallclock_ms = ms;
        out.push_back(std::move(r));
    }
}

inline double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

struct ReplicationOutput {
    std::vector<ReplicationRecord> records;
    std::vector<std::pair<std::string, std::string>> failures;  // method, message
};

/// Runs every method on one replicate. GS is always evaluated because the
/// truth is defined by it.
inline ReplicationOutput run_one(const std::string& label, int rep, const Replicate& data,
                                 const std::vector<EstimandSpec>& estimands, const StudyOptions& opts,
                                 const MethodParams& params) {
    ReplicationOutput out;
    const auto start_gs = std::chrono::steady_clock::now();
    std::vector<ReplicationRecord> gs;
    try {
        complete_data_records(gs, label, rep, "GS", estimands, data.full, opts.level, 0.0);
    } catch (const Error& e) {
        gs.clear();
        failed_records(gs, label, rep, "GS", estimands, 0.0);
        out.failures.emplace_back("GS", e.what());
    }
    const double gs_ms = elapsed_ms(start_gs);
    for (auto& r : gs) r.wallclock_ms = gs_ms;
    out.records.insert(out.records.end(), gs.begin(), gs.end());

    const Dataset observed = Dataset::with_default_names(data.full).masked(data.mask.mask);
    for (std::size_t mi = 0; mi < opts.methods.size(); ++mi) {
        const StudyMethod& m = opts.methods[mi];
        if (m.kind == StudyMethod::Kind::GS) continue;
        const auto start = std::chrono::steady_clock::now();
        std::vector<ReplicationRecord> recs;
        try {
            if (m.kind == StudyMethod::Kind::CC) {
                IndexList rows;
                for (Index i = 0; i < data.full.rows(); ++i)
                    if (!data.mask.mask.row(i).any()) rows.push_back(i);
                complete_data_records(recs, label, rep, "CC", estimands, gather_rows(data.full, rows), opts.level, 0.0);
            } else {
                ImputationSpec spec = ImputationSpec::for_method(
                    m.mi, derive_seed(opts.master_seed, {static_cast<std::uint64_t>(rep),
                                                         kMethodStream + static_cast<std::uint64_t>(m.mi)}));
                spec.chains = opts.chains;
                if (opts.iterations) spec.iterations = *opts.iterations;
                spec.params = params;
                const auto imputed = mice_run(observed, data.mask, spec);
                const auto pooled = pool_estimands(imputed, estimands, PoolOptions{false, opts.level});
                for (std::size_t k = 0; k < estimands.size(); ++k) {
                    const auto& pe = pooled[k];
                    if (!std::isfinite(pe.qbar) || !std::isfinite(pe.ci_low) || !std::isfinite(pe.ci_high))
                        throw Error("non-finite pooled estimate for " + estimands[k].name);
                    recs.push_back({label, rep, m.name(), estimands[k].name, pe.qbar, pe.ci_low, pe.ci_high, pe.fmi, 0.0});
                }
            }
        } catch (const Error& e) {
            recs.clear();
            failed_records(recs, label, rep, m.name(), estimands, 0.0);
            out.failures.emplace_back(m.name(), e.what());
        }
        const double ms = elapsed_ms(start);
        for (auto& r : recs) r.wallclock_ms = ms;
        out.records.insert(out.records.end(), recs.begin(), recs.end());
    }
    return out;
}

/// Evaluates make(s) and run_one for s in [0, S) over `jobs` threads;
/// output order is by replication regardless of scheduling.
template <class Make>
std::vector<ReplicationOutput> run_all(int S, int jobs, Make&& make, const std::string& label,
                                       const std::vector<EstimandSpec>& estimands, const StudyOptions& opts,
                                       const MethodParams& params) {
    std::vector<ReplicationOutput> outputs(static_cast<std::size_t>(S));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(S));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int s = next++; s < S; s = next++) {
            try {
                const Replicate rep = make(s);
                outputs[static_cast<std::size_t>(s)] = run_one(label, s, rep, estimands, opts, params);
            } catch (...) {
                errors[static_cast<std::size_t>(s)] = std::current_exception();
            }
        }
    };
    const int threads = std::clamp(jobs, 1, std::max(S, 1));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return outputs;
}

inline ConditionResult finish(const std::string& label, std::vector<ReplicationOutput>&& outputs,
                              const StudyOptions& opts) {
    std::vector<ReplicationRecord> records;
    std::map<std::string, std::vector<std::string>> messages;
    for (int s = 0; s < static_cast<int>(outputs.size()); ++s) {
        auto& o = outputs[static_cast<std::size_t>(s)];
        records.insert(records.end(), std::make_move_iterator(o.records.begin()), std::make_move_iterator(o.records.end()));
        for (auto& [m, msg] : o.failures) messages[m].push_back("replication " + std::to_string(s) + ": " + msg);
    }
    std::vector<std::string> names;
    for (const auto& m : opts.methods) names.push_back(m.name());
    ConditionResult res = aggregate_records(label, records, names);
    for (auto& m : res.methods) m.failure_messages = messages[m.method];
    return res;
}

} // namespace detail

struct Condition {
    std::string label;
    Index n = 200;
    Index p = 50;
    double pm = 0.3;
    int S = 100;

    void validate() const {
        if (n < 3) throw InputError("condition: n must be >= 3");
        if (!(pm > 0.0 && pm < 1.0)) throw InputError("condition: pm must lie in (0, 1)");
        if (S < 1) throw InputError("condition: S must be >= 1");
    }
};

inline const IndexList& study_targets() {
    static const IndexList t{0, 1, 2, 5, 6, 7};
    return t;
}

inline const IndexList& study_mar_predictors() {
    static const IndexList t{3, 4, 8, 9};
    return t;
}

/// Response model of the study: unit slopes (or `slope` for all) on the
/// standardized MAR predictors.
inline MarSpec study_mar_spec(double pm, double slope = 1.0) {
    MarSpec s;
    s.targets = study_targets();
    s.predictors = study_mar_predictors();
    s.slopes = Vector::Constant(static_cast<Index>(s.predictors.size()), slope);
    s.pm = pm;
    return s;
}

/// Study setup beyond the condition: the population and response model.
struct StudyDesign {
    PopulationModel population;
    double mar_slope = 1.0;  // 0 gives MCAR
};

namespace detail {

inline MethodParams study_params(const StudyOptions& opts, const IndexList& analysis, const IndexList& oracle) {
    MethodParams p = opts.params;
    if (p.analysis_vars.empty()) p.analysis_vars = analysis;
    if (p.oracle_vars.empty()) p.oracle_vars = oracle;
    return p;
}

inline bool uses_bridge(const StudyOptions& opts) {
    for (const auto& m : opts.methods)
        if (m.kind == StudyMethod::Kind::MI && m.mi == Method::BRIDGE) return true;
    return false;
}

/// Resolves the BRIDGE penalty: fixed, or the ridge_kappa_cv choice on pilot replicates.
template <class Make>
std::optional<KappaSelection> resolve_kappa(MethodParams& params, const StudyOptions& opts, Make&& make_pilot,
                                            const std::vector<EstimandSpec>& estimands) {
    if (opts.bridge_kappa) {
        params.ridge_kappa = *opts.bridge_kappa;
        return std::nullopt;
    }
    if (!uses_bridge(opts)) return std::nullopt;
    std::vector<PilotData> pilots;
    for (int k = 0; k < std::max(opts.pilot_count, 1); ++k) {
        Replicate r = make_pilot(k);
        pilots.push_back({Dataset::with_default_names(r.full).masked(r.mask.mask), r.mask});
    }
    ImputationSpec pilot = ImputationSpec::for_method(Method::BRIDGE, derive_seed(opts.master_seed, {kPilotStream}));
    pilot.chains = opts.chains;
    if (opts.iterations) pilot.iterations = *opts.iterations;
    pilot.params = params;
    KappaSelection sel = ridge_kappa_cv(pilots, opts.kappa_grid, pilot, estimands);
    params.ridge_kappa = sel.kappa;
    return sel;
}

} // namespace detail

namespace detail {

inline PopulationModel with_p(PopulationModel m, Index p) {
    m.p = p;
    return m;
}

struct ConditionPlan {
    Condition cond;
    PopulationSampler sampler;
    MarSpec mar;
    std::vector<EstimandSpec> estimands;
    MethodParams params;
    std::optional<KappaSelection> selection;
    std::uint64_t seed;

    ConditionPlan(const Condition& c, const StudyOptions& opts, StudyDesign design)
        : cond(c),
          sampler(with_p(design.population, c.p)),
          mar(study_mar_spec(c.pm, design.mar_slope)),
          estimands(moment_estimands(study_targets(), Dataset::with_default_names(Matrix::Zero(1, c.p)).columns())),
          seed(opts.master_seed) {
        cond.validate();
        if (opts.methods.empty()) throw InputError("run_condition: no methods");
        IndexList oracle = study_targets();
        oracle.insert(oracle.end(), study_mar_predictors().begin(), study_mar_predictors().end());
        std::sort(oracle.begin(), oracle.end());
        params = study_params(opts, study_targets(), oracle);
        selection = resolve_kappa(
            params, opts, [&](int k) { return make(kPilotStream, static_cast<std::uint64_t>(k)); }, estimands);
    }

    Replicate make(std::uint64_t a, std::uint64_t b) const {
        Rng data_rng(derive_seed(seed, {a, b, kDataStream}));
        Rng mask_rng(derive_seed(seed, {a, b, kMaskStream}));
        Replicate r;
        r.full = sampler.sample(cond.n, data_rng);
        r.mask = impose_mar(r.full, mar, mask_rng);
        return r;
    }

    Replicate replicate(int s) const { return make(static_cast<std::uint64_t>(s), 0); }
};

} // namespace detail

/// Simulation condition: S replications of gen_sample -> impose_mar -> methods,
/// scored on the means, variances and covariances of the six targets.
inline ConditionResult run_condition(const Condition& cond, const StudyOptions& opts, const StudyDesign& design = {}) {
    const detail::ConditionPlan plan(cond, opts, design);
    auto outputs = detail::run_all(
        cond.S, opts.jobs, [&](int s) { return plan.replicate(s); }, cond.label, plan.estimands, opts, plan.params);
    ConditionResult res = detail::finish(cond.label, std::move(outputs), opts);
    res.bridge_kappa = plan.selection;
    return res;
}

/// Records of replication s alone, as run_condition would produce them.
inline std::vector<ReplicationRecord> run_replication(const Condition& cond, const StudyOptions& opts, int s,
                                                      const StudyDesign& design = {}) {
    const detail::ConditionPlan plan(cond, opts, design);
    return detail::run_one(cond.label, s, plan.replicate(s), plan.estimands, opts, plan.params).records;
}

/// The replicate (complete data and mask) of replication s.
inline Replicate condition_replicate(const Condition& cond, std::uint64_t master_seed, int s,
                                     const StudyDesign& design = {}) {
    StudyOptions opts;
    opts.master_seed = master_seed;
    opts.methods = {StudyMethod::gs()};
    return detail::ConditionPlan(cond, opts, design).replicate(s);
}

/// A linear analysis model: response ~ predictors.
struct AnalysisModel {
    std::string name;
    Index response = 0;
    IndexList predictors;
};

/// Resampling study: S bootstrap samples of n rows from a complete
/// population, amputed by `mar`, scored on the coefficients of each analysis model.
inline ConditionResult run_resampling(const std::string& label, const Dataset& population, Index n, int S,
                                      const MarSpec& mar, const std::vector<AnalysisModel>& models,
                                      const StudyOptions& opts) {
    if (population.has_missing()) throw InputError("run_resampling: population has missing cells");
    if (opts.methods.empty()) throw InputError("run_resampling: no methods");
    if (models.empty()) throw InputError("run_resampling: no analysis models");
    if (n < 3 || S < 1) throw InputError("run_resampling: need n >= 3 and S >= 1");
    mar.validate(population.p());
    std::vector<EstimandSpec> estimands;
    IndexList analysis;
    for (const auto& m : models) {
        for (Index k : m.predictors)
            if (k < 0 || k >= population.p() || k == m.response)
                throw InputError("run_resampling: bad predictor in model '" + m.name + "'");
        if (m.response < 0 || m.response >= population.p())
            throw InputError("run_resampling: bad response in model '" + m.name + "'");
        const auto specs = coefficient_specs(m.name, m.response, m.predictors, population.columns());
        estimands.insert(estimands.end(), specs.begin(), specs.end());
        analysis.push_back(m.response);
        analysis.insert(analysis.end(), m.predictors.begin(), m.predictors.end());
    }
    std::sort(analysis.begin(), analysis.end());
    analysis.erase(std::unique(analysis.begin(), analysis.end()), analysis.end());
    IndexList oracle = analysis;
    oracle.insert(oracle.end(), mar.predictors.begin(), mar.predictors.end());
    std::sort(oracle.begin(), oracle.end());
    oracle.erase(std::unique(oracle.begin(), oracle.end()), oracle.end());

    auto make = [&](std::uint64_t a, std::uint64_t b) {
        Rng data_rng(derive_seed(opts.master_seed, {a, b, detail::kDataStream}));
        Rng mask_rng(derive_seed(opts.master_seed, {a, b, detail::kMaskStream}));
        Replicate r;
        IndexList rows(static_cast<std::size_t>(n));
        for (auto& i : rows) i = static_cast<Index>(data_rng.index(static_cast<std::size_t>(population.n())));
        r.full = gather_rows(population.values(), rows);
        r.mask = impose_mar(r.full, mar, mask_rng);
        return r;
    };
    MethodParams params = detail::study_params(opts, analysis, oracle);
    auto selection = detail::resolve_kappa(
        params, opts, [&](int k) { return make(detail::kPilotStream, static_cast<std::uint64_t>(k)); }, estimands);

    auto outputs = detail::run_all(
        S, opts.jobs, [&](int s) { return make(static_cast<std::uint64_t>(s), 0); }, label, estimands, opts, params);
    int singular = 0;
    for (const auto& o : outputs)
        for (const auto& f : o.failures) singular += f.first == "GS";
    if (singular > kFailureCeiling * S)
        throw InputError("run_resampling: " + std::to_string(singular) + " of " + std::to_string(S) +
                         " complete-data analyses failed");
    ConditionResult res = detail::finish(label, std::move(outputs), opts);
    res.bridge_kappa = std::move(selection);
    return res;
}

} // namespace hdmi
