#pragma once

#include "schema.hpp"

#include "hdmi/mice.hpp"
#include "hdmi/simstudy.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#ifndef HDMI_VERSION
#define HDMI_VERSION "0.0.0"
#endif

namespace hdmi::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitThreshold = 3;
inline constexpr double kDriftThreshold = 0.1;

/// Configuration or input problem: exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Resolved settings
// ---------------------------------------------------------------------------

struct ModelSpec {
    std::string name;
    std::string response;
    std::vector<std::string> predictors;
};

struct Settings {
    std::string command;
    std::uint64_t seed = 1;
    int jobs = 1;
    fs::path out = ".";
    std::optional<std::string> input;
    std::vector<StudyMethod> methods;
    std::vector<std::string> method_names;  // as given; report takes arbitrary labels

    Condition condition;
    StudyDesign design;

    int chains = kDefaultChains;
    std::optional<int> iterations;
    std::vector<std::string> targets;
    std::optional<double> ridge_kappa;
    std::vector<double> kappa_grid = default_kappa_grid();
    int pilot_count = 1;
    MethodParams params;
    std::vector<std::string> analysis_vars, oracle_vars;

    std::string resample_label = "resample";
    Index resample_n = 200;
    int resample_S = 100;
    double resample_pm = 0.3;
    std::vector<std::string> mar_targets, mar_predictors;
    std::vector<double> mar_slopes;
    std::vector<ModelSpec> models;
};

inline int default_jobs() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

inline std::string default_label(const Condition& c) {
    std::ostringstream s;
    s << "n" << c.n << "_p" << c.p << "_pm" << format_double(c.pm);
    return s.str();
}

inline std::vector<StudyMethod> parse_methods(const Json& list) {
    std::vector<StudyMethod> out;
    for (const auto& v : list) {
        const auto m = parse_study_method(v.get<std::string>());
        if (!m) throw ConfigError("/methods: unknown method '" + v.get<std::string>() + "'");
        if (std::find(out.begin(), out.end(), *m) != out.end())
            throw ConfigError("/methods: duplicate method '" + m->name() + "'");
        out.push_back(*m);
    }
    return out;
}

/// Builds settings from a schema-valid document.
inline Settings resolve(const Json& doc) {
    Settings s;
    s.command = doc.value("command", "");
    s.seed = doc.value("seed", std::uint64_t{1});
    s.jobs = doc.value("jobs", default_jobs());
    s.out = doc.value("out", std::string("."));
    if (doc.contains("input")) s.input = doc["input"].get<std::string>();
    if (doc.contains("methods")) {
        s.method_names = doc["methods"].get<std::vector<std::string>>();
        if (s.command != "report") s.methods = parse_methods(doc["methods"]);
    }

    const Json cond = doc.value("condition", Json::object());
    s.condition.n = cond.value("n", Index{200});
    s.condition.p = cond.value("p", Index{50});
    s.condition.pm = cond.value("pm", 0.3);
    s.condition.S = cond.value("S", 100);
    s.condition.label = cond.value("label", default_label(s.condition));

    const Json pop = doc.value("population", Json::object());
    auto& pm = s.design.population;
    pm.mean = pop.value("mean", pm.mean);
    pm.variance = pop.value("variance", pm.variance);
    pm.block1_rho = pop.value("block1_rho", pm.block1_rho);
    pm.block2_rho = pop.value("block2_rho", pm.block2_rho);
    pm.block2_within = pop.value("block2_within", pm.block2_within);
    s.design.mar_slope = pop.value("mar_slope", s.design.mar_slope);

    const Json imp = doc.value("imputation", Json::object());
    s.chains = imp.value("chains", s.chains);
    if (imp.contains("iterations")) s.iterations = imp["iterations"].get<int>();
    s.targets = imp.value("targets", std::vector<std::string>{});
    if (imp.contains("ridge_kappa")) s.ridge_kappa = imp["ridge_kappa"].get<double>();
    s.kappa_grid = imp.value("kappa_grid", s.kappa_grid);
    s.pilot_count = imp.value("pilot_count", s.pilot_count);
    auto& par = s.params;
    par.cv_folds = imp.value("cv_folds", par.cv_folds);
    par.blasso_sweeps = imp.value("blasso_sweeps", par.blasso_sweeps);
    par.pca_var_target = imp.value("pca_var_target", par.pca_var_target);
    par.cart.min_leaf = imp.value("cart_min_leaf", par.cart.min_leaf);
    par.cart.cp = imp.value("cart_cp", par.cart.cp);
    par.forest.trees = imp.value("forest_trees", par.forest.trees);
    par.forest.min_leaf = imp.value("forest_min_leaf", par.forest.min_leaf);
    par.forest.mtry = imp.value("forest_mtry", par.forest.mtry);
    par.qp_threshold = imp.value("qp_threshold", par.qp_threshold);
    par.qp_ridge = imp.value("qp_ridge", par.qp_ridge);
    s.analysis_vars = imp.value("analysis_vars", std::vector<std::string>{});
    s.oracle_vars = imp.value("oracle_vars", std::vector<std::string>{});

    if (doc.contains("resample")) {
        const Json& r = doc["resample"];
        s.resample_label = r.value("label", s.resample_label);
        s.resample_n = r.value("n", s.resample_n);
        s.resample_S = r.value("S", s.resample_S);
        s.resample_pm = r.value("pm", s.resample_pm);
        s.mar_targets = r["targets"].get<std::vector<std::string>>();
        s.mar_predictors = r["predictors"].get<std::vector<std::string>>();
        s.mar_slopes = r.value("slopes", std::vector<double>(s.mar_predictors.size(), 1.0));
        if (s.mar_slopes.size() != s.mar_predictors.size())
            throw ConfigError("/resample/slopes: needs one slope per predictor");
        for (const auto& m : r["models"])
            s.models.push_back({m["name"].get<std::string>(), m["response"].get<std::string>(),
                                m["predictors"].get<std::vector<std::string>>()});
    }
    return s;
}

/// Settings written back as a complete configuration document.
inline Json to_json(const Settings& s) {
    Json doc;
    doc["command"] = s.command;
    doc["seed"] = s.seed;
    doc["jobs"] = s.jobs;
    doc["out"] = s.out.string();
    if (s.input) doc["input"] = *s.input;
    Json methods = Json::array();
    for (const auto& m : s.methods) methods.push_back(m.name());
    if (s.methods.empty())
        for (const auto& m : s.method_names) methods.push_back(m);
    if (!methods.empty()) doc["methods"] = methods;
    doc["condition"] = {{"label", s.condition.label}, {"n", s.condition.n}, {"p", s.condition.p},
                        {"pm", s.condition.pm}, {"S", s.condition.S}};
    const auto& pm = s.design.population;
    doc["population"] = {{"mean", pm.mean},           {"variance", pm.variance},
                         {"block1_rho", pm.block1_rho}, {"block2_rho", pm.block2_rho},
                         {"block2_within", pm.block2_within}, {"mar_slope", s.design.mar_slope}};
    Json imp = {{"chains", s.chains},
                {"targets", s.targets},
                {"kappa_grid", s.kappa_grid},
                {"pilot_count", s.pilot_count},
                {"cv_folds", s.params.cv_folds},
                {"blasso_sweeps", s.params.blasso_sweeps},
                {"pca_var_target", s.params.pca_var_target},
                {"cart_min_leaf", s.params.cart.min_leaf},
                {"cart_cp", s.params.cart.cp},
                {"forest_trees", s.params.forest.trees},
                {"forest_min_leaf", s.params.forest.min_leaf},
                {"forest_mtry", s.params.forest.mtry},
                {"qp_threshold", s.params.qp_threshold},
                {"qp_ridge", s.params.qp_ridge},
                {"analysis_vars", s.analysis_vars},
                {"oracle_vars", s.oracle_vars}};
    if (s.iterations) imp["iterations"] = *s.iterations;
    if (s.ridge_kappa) imp["ridge_kappa"] = *s.ridge_kappa;
    doc["imputation"] = imp;
    if (!s.models.empty()) {
        Json models = Json::array();
        for (const auto& m : s.models)
            models.push_back({{"name", m.name}, {"response", m.response}, {"predictors", m.predictors}});
        doc["resample"] = {{"label", s.resample_label}, {"n", s.resample_n},          {"S", s.resample_S},
                           {"pm", s.resample_pm},       {"targets", s.mar_targets},   {"predictors", s.mar_predictors},
                           {"slopes", s.mar_slopes},    {"models", models}};
    }
    return doc;
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

inline Index column_of(const std::vector<std::string>& names, const std::string& name, const std::string& where) {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError(where + ": no column named '" + name + "'");
    return static_cast<Index>(it - names.begin());
}

inline IndexList columns_of(const std::vector<std::string>& names, const std::vector<std::string>& wanted,
                            const std::string& where) {
    IndexList out;
    for (const auto& w : wanted) out.push_back(column_of(names, w, where));
    return out;
}

/// Writes files under a temporary name and moves them into place only when
/// the whole command succeeds; otherwise nothing is left behind.
class OutputSet {
public:
    explicit OutputSet(fs::path dir) : dir_(std::move(dir)) {}
    OutputSet(const OutputSet&) = delete;
    OutputSet& operator=(const OutputSet&) = delete;

    ~OutputSet() {
        if (committed_) return;
        std::error_code ec;
        for (const auto& [tmp, final] : files_) fs::remove(tmp, ec);
    }

    std::ofstream open(const std::string& name) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        const fs::path final = dir_ / name;
        const fs::path tmp = dir_ / (name + ".partial");
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw ConfigError("cannot write '" + tmp.string() + "'");
        files_.emplace_back(tmp, final);
        return f;
    }

    void commit() {
        for (const auto& [tmp, final] : files_) fs::rename(tmp, final);
        committed_ = true;
    }

private:
    fs::path dir_;
    std::vector<std::pair<fs::path, fs::path>> files_;
    bool committed_ = false;
};

inline StudyOptions study_options(const Settings& s) {
    StudyOptions o;
    o.methods = s.methods;
    o.master_seed = s.seed;
    o.chains = s.chains;
    o.iterations = s.iterations;
    o.params = s.params;
    o.bridge_kappa = s.ridge_kappa;
    o.kappa_grid = s.kappa_grid;
    o.pilot_count = s.pilot_count;
    o.jobs = s.jobs;
    return o;
}

inline Json result_metadata(const Settings& s, const ConditionResult& res, double total_ms) {
    Json meta;
    meta["version"] = HDMI_VERSION;
    meta["command"] = s.command;
    meta["seed"] = s.seed;
    meta["config"] = to_json(s);
    Json methods = Json::array();
    for (const auto& m : res.methods) {
        Json entry = {{"method", m.method},         {"replications", m.replications}, {"failures", m.failures},
                      {"valid", m.valid},           {"wallclock_ms", m.wallclock_ms}};
        if (!m.failure_messages.empty()) entry["failure_messages"] = m.failure_messages;
        methods.push_back(entry);
    }
    meta["methods"] = methods;
    if (res.bridge_kappa) {
        Json fmi = Json::array();
        for (double v : res.bridge_kappa->average_fmi) fmi.push_back(std::isfinite(v) ? Json(v) : Json(nullptr));
        meta["bridge_kappa"] = {{"kappa", res.bridge_kappa->kappa},
                                {"grid", res.bridge_kappa->grid},
                                {"average_fmi", fmi},
                                {"pilot_count", res.bridge_kappa->pilot_count},
                                {"failures", res.bridge_kappa->failures}};
    }
    meta["total_wallclock_ms"] = total_ms;
    return meta;
}

inline void write_study_outputs(const Settings& s, const ConditionResult& res, double total_ms, std::ostream& out) {
    OutputSet files(s.out);
    {
        auto f = files.open("replications.csv");
        write_replication_csv(f, res.records);
    }
    {
        auto f = files.open("summary.csv");
        write_summary_csv(f, {res});
    }
    {
        auto f = files.open("metadata.json");
        f << result_metadata(s, res, total_ms).dump(2) << '\n';
    }
    files.commit();
    out << "wrote " << (s.out / "replications.csv").string() << ", " << (s.out / "summary.csv").string() << ", "
        << (s.out / "metadata.json").string() << '\n';
}

inline void report_failures(const ConditionResult& res, std::ostream& err) {
    for (const auto& m : res.methods) {
        if (m.failures == 0) continue;
        err << "warning: " << m.method << " failed in " << m.failures << " of " << m.replications << " replications"
            << (m.valid ? "" : " (method cell invalid)") << '\n';
        if (!m.failure_messages.empty()) err << "  first failure: " << m.failure_messages.front() << '\n';
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_simulate(const Settings& s, std::ostream& out, std::ostream& err) {
    if (s.methods.empty()) throw ConfigError("/methods: simulate needs at least one method");
    const auto start = std::chrono::steady_clock::now();
    const ConditionResult res = run_condition(s.condition, study_options(s), s.design);
    report_failures(res, err);
    write_study_outputs(s, res, hdmi::detail::elapsed_ms(start), out);
    return kExitOk;
}

inline int cmd_resample(const Settings& s, std::ostream& out, std::ostream& err) {
    if (s.methods.empty()) throw ConfigError("/methods: resample needs at least one method");
    if (!s.input) throw ConfigError("resample needs a population CSV (positional input or /input)");
    if (s.models.empty()) throw ConfigError("resample needs a /resample block");
    const CsvTable table = read_csv_file(*s.input);
    const auto& names = table.data.columns();
    MarSpec mar;
    mar.targets = columns_of(names, s.mar_targets, "/resample/targets");
    mar.predictors = columns_of(names, s.mar_predictors, "/resample/predictors");
    mar.slopes = Eigen::Map<const Vector>(s.mar_slopes.data(), static_cast<Index>(s.mar_slopes.size()));
    mar.pm = s.resample_pm;
    std::vector<AnalysisModel> models;
    for (const auto& m : s.models)
        models.push_back({m.name, column_of(names, m.response, "/resample/models/" + m.name),
                          columns_of(names, m.predictors, "/resample/models/" + m.name)});
    StudyOptions opts = study_options(s);
    opts.params.analysis_vars = columns_of(names, s.analysis_vars, "/imputation/analysis_vars");
    opts.params.oracle_vars = columns_of(names, s.oracle_vars, "/imputation/oracle_vars");
    const auto start = std::chrono::steady_clock::now();
    const ConditionResult res =
        run_resampling(s.resample_label, table.data, s.resample_n, s.resample_S, mar, models, opts);
    report_failures(res, err);
    write_study_outputs(s, res, hdmi::detail::elapsed_ms(start), out);
    return kExitOk;
}

inline int cmd_impute(const Settings& s, std::ostream& out, std::ostream& err) {
    if (!s.input) throw ConfigError("impute needs an input CSV (positional input or /input)");
    if (s.methods.size() != 1 || s.methods[0].kind != StudyMethod::Kind::MI)
        throw ConfigError("/methods: impute needs exactly one imputation method");
    const CsvTable table = read_csv_file(*s.input);
    const Dataset& data = table.data;
    const auto& names = data.columns();

    MissingMask mask = MissingMask::from_dataset(data);
    if (!s.targets.empty()) {
        mask.target_columns = columns_of(names, s.targets, "/imputation/targets");
        std::sort(mask.target_columns.begin(), mask.target_columns.end());
        mask.target_columns.erase(std::unique(mask.target_columns.begin(), mask.target_columns.end()),
                                  mask.target_columns.end());
        try {
            mask.validate();
        } catch (const InputError& e) {
            throw ConfigError(std::string(e.what()) + "; list every incomplete column in /imputation/targets");
        }
    }

    ImputationSpec spec = ImputationSpec::for_method(s.methods[0].mi, s.seed);
    spec.chains = s.chains;
    if (s.iterations) spec.iterations = *s.iterations;
    spec.params = s.params;
    if (s.ridge_kappa) spec.params.ridge_kappa = *s.ridge_kappa;
    spec.params.analysis_vars = columns_of(names, s.analysis_vars, "/imputation/analysis_vars");
    spec.params.oracle_vars = columns_of(names, s.oracle_vars, "/imputation/oracle_vars");
    if (spec.method == Method::MI_AM && spec.params.analysis_vars.empty())
        throw ConfigError("/imputation/analysis_vars: MI_AM needs the analysis variables");
    if (spec.method == Method::MI_OR && spec.params.oracle_vars.empty())
        throw ConfigError("/imputation/oracle_vars: MI_OR needs the oracle predictors");

    if (!data.has_missing()) err << "warning: input has no missing values; writing " << spec.chains << " identical copies\n";
    RunOptions run;
    run.jobs = s.jobs;
    const MultiplyImputedData mi = mice_run(data, mask, spec, run);
    for (const auto& w : mi.warnings) err << "warning: " << w << '\n';

    const std::string stem = fs::path(*s.input).stem().string();
    OutputSet files(s.out);
    for (std::size_t k = 0; k < mi.completed.size(); ++k) {
        auto f = files.open(stem + "_imp" + std::to_string(k + 1) + ".csv");
        write_csv(f, mi.completed[k], &table.raw, &data.missing());
    }
    {
        auto f = files.open(stem + "_trace.csv");
        mi.trace.write_csv(f, names);
    }
    files.commit();
    out << "wrote " << mi.completed.size() << " completed data sets and " << stem << "_trace.csv to "
        << s.out.string() << '\n';
    return kExitOk;
}

/// Reads a trace CSV (chain, iteration, target, mean, sd). Target names map
/// to indices in order of first appearance.
inline std::pair<ChainTrace, std::vector<std::string>> read_trace_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("trace CSV is empty");
    if (split_csv_line(line) != std::vector<std::string>{"chain", "iteration", "target", "mean", "sd"})
        throw ConfigError("trace CSV: header must be chain,iteration,target,mean,sd");
    ChainTrace trace;
    std::vector<std::string> names;
    std::set<std::tuple<int, int, Index>> seen;
    std::size_t line_no = 1;
    auto integer = [&](const std::string& f, int lo) {
        const auto v = parse_double(f);
        if (!v || *v != std::floor(*v) || *v < lo || *v > 1e9)
            throw ConfigError("trace CSV line " + std::to_string(line_no) + ": bad integer '" + f + "'");
        return static_cast<int>(*v);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() != 5) throw ConfigError("trace CSV line " + std::to_string(line_no) + ": expected 5 fields");
        TraceEntry e;
        e.chain = integer(f[0], 0);
        e.iteration = integer(f[1], 1);
        if (f[2].empty()) throw ConfigError("trace CSV line " + std::to_string(line_no) + ": empty target");
        auto it = std::find(names.begin(), names.end(), f[2]);
        if (it == names.end()) {
            names.push_back(f[2]);
            it = names.end() - 1;
        }
        e.target = static_cast<Index>(it - names.begin());
        const auto mean = parse_double(f[3]), sd = parse_double(f[4]);
        if (!mean || !sd) throw ConfigError("trace CSV line " + std::to_string(line_no) + ": bad number");
        e.mean = *mean;
        e.sd = *sd;
        if (!seen.emplace(e.chain, e.iteration, e.target).second)
            throw ConfigError("trace CSV line " + std::to_string(line_no) + ": duplicate entry");
        trace.chains = std::max(trace.chains, e.chain + 1);
        trace.iterations = std::max(trace.iterations, e.iteration);
        trace.entries.push_back(e);
    }
    if (trace.entries.empty()) throw ConfigError("trace CSV has no rows");
    for (std::size_t k = 0; k < names.size(); ++k) trace.targets.push_back(static_cast<Index>(k));
    if (trace.entries.size() != static_cast<std::size_t>(trace.chains) * static_cast<std::size_t>(trace.iterations) * names.size())
        throw ConfigError("trace CSV is incomplete: every chain x iteration x target needs one row");
    return {std::move(trace), std::move(names)};
}

inline int cmd_diagnose(const Settings& s, std::ostream& out, std::ostream& err) {
    if (!s.input) throw ConfigError("diagnose needs a trace CSV (positional input or /input)");
    std::ifstream in(*s.input);
    if (!in) throw ConfigError("cannot open '" + *s.input + "'");
    const auto [trace, names] = read_trace_csv(in);
    std::vector<TargetDrift> drift;
    try {
        drift = convergence_summary(trace);
    } catch (const InputError& e) {
        throw ConfigError(e.what());
    }
    std::ostringstream csv;
    csv << "target,prior_mean,last_mean,drift,flag\n";
    bool flagged = false;
    for (const auto& d : drift) {
        const bool f = !(d.drift <= kDriftThreshold);
        flagged = flagged || f;
        csv << names[static_cast<std::size_t>(d.target)] << ',' << format_double(d.prior_mean) << ','
            << format_double(d.last_mean) << ',' << format_double(d.drift) << ',' << (f ? "drift" : "") << '\n';
    }
    out << csv.str();
    if (s.out != ".") {
        OutputSet files(s.out);
        auto f = files.open("drift.csv");
        f << csv.str();
        f.close();
        files.commit();
    }
    if (flagged) err << "drift above " << format_double(kDriftThreshold) << " in at least one target\n";
    return flagged ? kExitThreshold : kExitOk;
}

inline std::string estimand_type(const std::string& name) {
    const auto colon = name.find(':');
    const std::string prefix = name.substr(0, colon);
    if (prefix == "mean") return "mean";
    if (prefix == "var") return "variance";
    if (prefix == "cov") return "covariance";
    if (prefix == "coef") return "coefficient";
    return "other";
}

/// Per condition x method x estimand type: min/avg/max of PRB and CIC.
inline void write_report_csv(std::ostream& out, const std::vector<ConditionResult>& results) {
    out << "condition,method,type,estimands,prb_min,prb_avg,prb_max,cic_min,cic_avg,cic_max,flags\n";
    const std::vector<std::string> order{"mean", "variance", "covariance", "coefficient", "other"};
    for (const auto& res : results) {
        for (const auto& m : res.methods) {
            for (const auto& type : order) {
                std::vector<const EstimandSummary*> group;
                for (const auto& e : m.estimands)
                    if (estimand_type(e.estimand) == type && e.n_valid > 0) group.push_back(&e);
                if (group.empty()) continue;
                double pmin = group[0]->prb, pmax = pmin, psum = 0.0, cmin = group[0]->cic, cmax = cmin, csum = 0.0;
                bool absolute = false;
                for (const auto* e : group) {
                    pmin = std::min(pmin, e->prb);
                    pmax = std::max(pmax, e->prb);
                    psum += e->prb;
                    cmin = std::min(cmin, e->cic);
                    cmax = std::max(cmax, e->cic);
                    csum += e->cic;
                    absolute = absolute || e->absolute_bias;
                }
                const double k = static_cast<double>(group.size());
                std::string flags;
                auto add = [&](const char* f) {
                    if (!flags.empty()) flags += ';';
                    flags += f;
                };
                if (!m.valid) add("invalid");
                if (absolute) add("absolute_bias");
                if (pmax > kBiasThreshold) add("biased");
                if (cmin < kUnderCoverage) add("severe_under");
                if (cmax > kOverCoverage) add("severe_over");
                out << res.label << ',' << m.method << ',' << type << ',' << group.size() << ','
                    << format_double(pmin) << ',' << format_double(psum / k) << ',' << format_double(pmax) << ','
                    << format_double(cmin) << ',' << format_double(csum / k) << ',' << format_double(cmax) << ','
                    << flags << '\n';
            }
        }
    }
}

inline int cmd_report(const Settings& s, std::ostream& out, std::ostream&) {
    if (!s.input) throw ConfigError("report needs a per-replication CSV (positional input or /input)");
    std::ifstream in(*s.input);
    if (!in) throw ConfigError("cannot open '" + *s.input + "'");
    std::vector<ReplicationRecord> records;
    try {
        records = read_replication_csv(in);
    } catch (const InputError& e) {
        throw ConfigError(e.what());
    }
    std::vector<std::string> labels;
    for (const auto& r : records)
        if (std::find(labels.begin(), labels.end(), r.condition) == labels.end()) labels.push_back(r.condition);
    const std::vector<std::string>& methods = s.method_names;
    std::vector<ConditionResult> results;
    for (const auto& label : labels) {
        try {
            results.push_back(aggregate_records(label, records, methods));
        } catch (const InputError& e) {
            throw ConfigError(e.what());
        }
    }
    std::ostringstream report;
    write_report_csv(report, results);
    OutputSet files(s.out);
    {
        auto f = files.open("summary.csv");
        write_summary_csv(f, results);
    }
    {
        auto f = files.open("report.csv");
        f << report.str();
    }
    files.commit();
    out << report.str();
    return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"High-dimensional multiple imputation: simulation studies, imputation, diagnostics"};
    app.set_version_flag("--version", HDMI_VERSION);
    std::string command, input, config_path, methods, out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    bool print_schema = false;
    app.add_option("command", command, "simulate | impute | resample | diagnose | report")
        ->check(CLI::IsMember({"simulate", "impute", "resample", "diagnose", "report"}));
    app.add_option("input", input, "Input CSV (impute: data; resample: population; diagnose: trace; report: replications)");
    app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Master seed");
    app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--out", out_dir, "Output directory");
    app.add_option("--methods", methods, "Comma-separated methods, e.g. GS,CC,MI_OR");
    app.add_flag("--print-schema", print_schema, "Print the configuration schema and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
    }
    if (print_schema) {
        out << config_schema().dump(2) << '\n';
        return kExitOk;
    }

    try {
        Json doc = Json::object();
        if (!config_path.empty()) {
            std::ifstream f(config_path);
            try {
                doc = Json::parse(f);
            } catch (const Json::parse_error& e) {
                throw ConfigError(config_path + ": " + e.what());
            }
        }
        if (!command.empty()) {
            if (doc.contains("command") && doc["command"].is_string() && doc["command"] != command)
                throw ConfigError("command '" + command + "' conflicts with /command in the configuration");
            doc["command"] = command;
        }
        if (!input.empty()) doc["input"] = input;
        if (seed) doc["seed"] = *seed;
        if (jobs) doc["jobs"] = *jobs;
        if (!out_dir.empty()) doc["out"] = out_dir;
        if (!methods.empty()) doc["methods"] = split_list(methods);

        if (auto errors = validate_config(doc); !errors.empty()) {
            err << "configuration error:\n";
            for (const auto& e : errors) err << "  " << e << '\n';
            return kExitConfig;
        }
        if (!doc.contains("command")) throw ConfigError("no command given");
        const Settings s = resolve(doc);
        if (s.command == "simulate") return cmd_simulate(s, out, err);
        if (s.command == "impute") return cmd_impute(s, out, err);
        if (s.command == "resample") return cmd_resample(s, out, err);
        if (s.command == "diagnose") return cmd_diagnose(s, out, err);
        return cmd_report(s, out, err);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const InputError& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "runtime failure: " << e.what() << '\n';
        return kExitRuntime;
    }
}

} // namespace hdmi::cli
