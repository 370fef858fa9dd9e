#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hdmi {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using BoolVector = Eigen::Array<bool, Eigen::Dynamic, 1>;
using IndexList = std::vector<Index>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed input data or configuration.
struct InputError : Error {
    using Error::Error;
};

/// A design matrix that cannot be inverted at the requested penalty.
struct SingularDesignError : Error {
    SingularDesignError(const std::string& what, double rcond) : Error(what), rcond(rcond) {}
    double rcond;
};

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Rectangular numeric table with named columns. Missing cells are flagged
/// in a parallel mask; the value stored under a missing cell is 0 and is
/// never read.
class Dataset {
public:
    Dataset() = default;

    Dataset(Matrix values, std::vector<std::string> columns, BoolMatrix missing = {})
        : values_(std::move(values)), columns_(std::move(columns)), missing_(std::move(missing)) {
        if (missing_.size() == 0) missing_ = BoolMatrix::Constant(values_.rows(), values_.cols(), false);
        validate();
        for (Index j = 0; j < p(); ++j)
            for (Index i = 0; i < n(); ++i)
                if (missing_(i, j)) values_(i, j) = 0.0;
    }

    /// Columns named z1..zp.
    static Dataset with_default_names(Matrix values, BoolMatrix missing = {}) {
        std::vector<std::string> names;
        for (Index j = 0; j < values.cols(); ++j) names.push_back("z" + std::to_string(j + 1));
        return Dataset(std::move(values), std::move(names), std::move(missing));
    }

    Index n() const { return values_.rows(); }
    Index p() const { return values_.cols(); }

    const Matrix& values() const { return values_; }
    const std::vector<std::string>& columns() const { return columns_; }
    const BoolMatrix& missing() const { return missing_; }

    bool is_missing(Index i, Index j) const { return missing_(i, j); }
    bool has_missing() const { return missing_.any(); }
    Index missing_count() const { return missing_.count(); }

    std::optional<Index> column_index(std::string_view name) const {
        for (std::size_t j = 0; j < columns_.size(); ++j)
            if (columns_[j] == name) return static_cast<Index>(j);
        return std::nullopt;
    }

    /// Copy with every cell flagged in `mask` removed.
    Dataset masked(const BoolMatrix& mask) const {
        if (mask.rows() != n() || mask.cols() != p()) throw InputError("mask shape does not match dataset");
        return Dataset(values_, columns_, missing_ || mask);
    }

    /// Rows restricted to the given indices (with repetition allowed).
    Dataset rows(const IndexList& idx) const {
        Matrix v(static_cast<Index>(idx.size()), p());
        BoolMatrix m(static_cast<Index>(idx.size()), p());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            v.row(static_cast<Index>(r)) = values_.row(idx[r]);
            m.row(static_cast<Index>(r)) = missing_.row(idx[r]);
        }
        return Dataset(std::move(v), columns_, std::move(m));
    }

    Dataset select_columns(const IndexList& cols) const {
        Matrix v(n(), static_cast<Index>(cols.size()));
        BoolMatrix m(n(), static_cast<Index>(cols.size()));
        std::vector<std::string> names;
        for (std::size_t c = 0; c < cols.size(); ++c) {
            v.col(static_cast<Index>(c)) = values_.col(cols[c]);
            m.col(static_cast<Index>(c)) = missing_.col(cols[c]);
            names.push_back(columns_[static_cast<std::size_t>(cols[c])]);
        }
        return Dataset(std::move(v), std::move(names), std::move(m));
    }

private:
    void validate() const {
        if (values_.rows() < 1 || values_.cols() < 1) throw InputError("dataset must have n >= 1 and p >= 1");
        if (static_cast<Index>(columns_.size()) != values_.cols())
            throw InputError("column name count does not match column count");
        if (missing_.rows() != values_.rows() || missing_.cols() != values_.cols())
            throw InputError("missing mask shape does not match values");
        std::unordered_set<std::string> seen;
        for (const auto& c : columns_)
            if (!seen.insert(c).second) throw InputError("duplicate column name '" + c + "'");
        for (Index j = 0; j < values_.cols(); ++j)
            for (Index i = 0; i < values_.rows(); ++i)
                if (!missing_(i, j) && !std::isfinite(values_(i, j)))
                    throw InputError("non-finite value in column '" + columns_[static_cast<std::size_t>(j)] + "'");
    }

    Matrix values_;
    std::vector<std::string> columns_;
    BoolMatrix missing_;
};

// ---------------------------------------------------------------------------
// MissingMask
// ---------------------------------------------------------------------------

/// Missingness pattern over the imputation targets (true = missing).
struct MissingMask {
    BoolMatrix mask;
    IndexList target_columns;

    /// Targets are the columns holding at least one missing cell.
    static MissingMask from_dataset(const Dataset& data) {
        MissingMask m{data.missing(), {}};
        for (Index j = 0; j < data.p(); ++j)
            if (data.missing().col(j).any()) m.target_columns.push_back(j);
        return m;
    }

    bool is_target(Index j) const {
        return std::find(target_columns.begin(), target_columns.end(), j) != target_columns.end();
    }

    void validate() const {
        for (Index j = 0; j < mask.cols(); ++j)
            if (!is_target(j) && mask.col(j).any())
                throw InputError("mask has missing cells outside the target columns");
        for (auto j : target_columns)
            if (j < 0 || j >= mask.cols()) throw InputError("target column out of range");
    }
};

/// 1 where cell (i, j) is missing, 0 otherwise.
inline Vector response_indicator(const MissingMask& mask, Index j) {
    if (j < 0 || j >= mask.mask.cols()) throw std::out_of_range("response_indicator: column out of range");
    return mask.mask.col(j).cast<double>().matrix();
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

struct Standardization {
    Vector centers;
    Vector scales;
    std::vector<bool> degenerate;

    Index size() const { return centers.size(); }

    Matrix apply(const Matrix& x) const {
        if (x.cols() != centers.size()) throw std::invalid_argument("Standardization::apply: column mismatch");
        return (x.rowwise() - centers.transpose()).array().rowwise() / scales.transpose().array();
    }

    Matrix invert(const Matrix& z) const {
        if (z.cols() != centers.size()) throw std::invalid_argument("Standardization::invert: column mismatch");
        return (z.array().rowwise() * scales.transpose().array()).matrix().rowwise() + centers.transpose();
    }

    IndexList non_degenerate() const {
        IndexList out;
        for (std::size_t j = 0; j < degenerate.size(); ++j)
            if (!degenerate[j]) out.push_back(static_cast<Index>(j));
        return out;
    }
};

/// Relative scale below which a column counts as constant.
inline constexpr double kDegenerateScale = 1e-12;

/// Centers each column and scales it to unit sample variance (n-1 denominator).
/// Constant columns keep scale 1, become all-zero and are flagged degenerate.
inline std::pair<Matrix, Standardization> standardize(const Matrix& columns) {
    if (columns.rows() < 1 || columns.cols() < 1) throw std::invalid_argument("standardize: empty input");
    const Index n = columns.rows();
    Standardization s;
    s.centers = columns.colwise().mean().transpose();
    s.scales = Vector::Ones(columns.cols());
    s.degenerate.assign(static_cast<std::size_t>(columns.cols()), false);
    for (Index j = 0; j < columns.cols(); ++j) {
        const double ss = (columns.col(j).array() - s.centers(j)).square().sum();
        const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
        const double magnitude = std::max(1.0, std::abs(s.centers(j)));
        if (!(sd > kDegenerateScale * magnitude)) {
            s.degenerate[static_cast<std::size_t>(j)] = true;
        } else {
            s.scales(j) = sd;
        }
    }
    Matrix out = s.apply(columns);
    for (Index j = 0; j < columns.cols(); ++j)
        if (s.degenerate[static_cast<std::size_t>(j)]) out.col(j).setZero();
    return {std::move(out), std::move(s)};
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

/// Pearson correlation over rows where both entries are observed. Returns
/// nullopt with fewer than 3 complete pairs or when either side is constant
/// on those pairs. Empty masks mean fully observed.
inline std::optional<double> pairwise_correlation(const Vector& x, const Vector& y,
                                                  const BoolVector& x_missing = {},
                                                  const BoolVector& y_missing = {}) {
    if (x.size() != y.size()) throw std::invalid_argument("pairwise_correlation: length mismatch");
    const Index n = x.size();
    auto observed = [&](Index i) {
        return (x_missing.size() == 0 || !x_missing(i)) && (y_missing.size() == 0 || !y_missing(i));
    };
    Index m = 0;
    double mx = 0.0, my = 0.0;
    for (Index i = 0; i < n; ++i) {
        if (!observed(i)) continue;
        ++m;
        mx += x(i);
        my += y(i);
    }
    if (m < 3) return std::nullopt;
    mx /= static_cast<double>(m);
    my /= static_cast<double>(m);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (Index i = 0; i < n; ++i) {
        if (!observed(i)) continue;
        const double dx = x(i) - mx, dy = y(i) - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    const double sx = std::sqrt(sxx), sy = std::sqrt(syy);
    if (!(sx > kDegenerateScale * std::max(1.0, std::abs(mx)) * std::sqrt(double(m))) ||
        !(sy > kDegenerateScale * std::max(1.0, std::abs(my)) * std::sqrt(double(m))))
        return std::nullopt;
    return std::clamp(sxy / (sx * sy), -1.0, 1.0);
}

/// Sample variance with the n-1 denominator.
inline double sample_variance(const Vector& x) {
    if (x.size() < 2) return 0.0;
    return (x.array() - x.mean()).square().sum() / static_cast<double>(x.size() - 1);
}

inline double sample_covariance(const Vector& x, const Vector& y) {
    if (x.size() < 2) return 0.0;
    return ((x.array() - x.mean()) * (y.array() - y.mean())).sum() / static_cast<double>(x.size() - 1);
}

// ---------------------------------------------------------------------------
// Row / column helpers
// ---------------------------------------------------------------------------

inline Matrix gather_rows(const Matrix& m, const IndexList& rows) {
    Matrix out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = m.row(rows[r]);
    return out;
}

inline Vector gather(const Vector& v, const IndexList& rows) {
    Vector out(static_cast<Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) out(static_cast<Index>(r)) = v(rows[r]);
    return out;
}

inline Matrix gather_cols(const Matrix& m, const IndexList& cols) {
    Matrix out(m.rows(), static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = m.col(cols[c]);
    return out;
}

inline Matrix gather(const Matrix& m, const IndexList& rows, const IndexList& cols) {
    Matrix out(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c)
        for (std::size_t r = 0; r < rows.size(); ++r)
            out(static_cast<Index>(r), static_cast<Index>(c)) = m(rows[r], cols[c]);
    return out;
}

/// Split the row indices of column j into (observed, missing).
inline std::pair<IndexList, IndexList> split_rows(const BoolMatrix& mask, Index j) {
    IndexList obs, mis;
    for (Index i = 0; i < mask.rows(); ++i) (mask(i, j) ? mis : obs).push_back(i);
    return {std::move(obs), std::move(mis)};
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (c != '\r') {
            field += c;
        }
    }
    out.push_back(std::move(field));
    return out;
}

inline bool is_missing_token(std::string_view s) { return s.empty() || s == "NA"; }

inline std::optional<double> parse_double(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

/// Parsed numeric CSV plus the original cell text, so observed cells can be
/// written back byte-for-byte.
struct CsvTable {
    Dataset data;
    std::vector<std::vector<std::string>> raw;
};

inline CsvTable read_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw InputError("CSV input is empty");
    auto header = split_csv_line(line);
    const auto p = header.size();
    std::vector<std::vector<std::string>> raw;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != p)
            throw InputError("CSV line " + std::to_string(line_no) + ": expected " + std::to_string(p) +
                             " fields, found " + std::to_string(fields.size()));
        raw.push_back(std::move(fields));
    }
    if (raw.empty()) throw InputError("CSV input has no data rows");
    Matrix values(static_cast<Index>(raw.size()), static_cast<Index>(p));
    BoolMatrix missing(static_cast<Index>(raw.size()), static_cast<Index>(p));
    for (std::size_t i = 0; i < raw.size(); ++i) {
        for (std::size_t j = 0; j < p; ++j) {
            const auto& tok = raw[i][j];
            const auto r = static_cast<Index>(i), c = static_cast<Index>(j);
            if (is_missing_token(tok)) {
                missing(r, c) = true;
                values(r, c) = 0.0;
                continue;
            }
            auto v = parse_double(tok);
            if (!v)
                throw InputError("CSV line " + std::to_string(i + 2) + ", column '" + header[j] +
                                 "': not a number: '" + tok + "'");
            missing(r, c) = false;
            values(r, c) = *v;
        }
    }
    return {Dataset(std::move(values), std::move(header), std::move(missing)), std::move(raw)};
}

inline CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    return read_csv(in);
}

/// Missing cells are written as NA. When `raw` is given, cells that are
/// observed in `original_missing` are copied from the original text.
inline void write_csv(std::ostream& out, const Dataset& data,
                      const std::vector<std::vector<std::string>>* raw = nullptr,
                      const BoolMatrix* original_missing = nullptr) {
    for (Index j = 0; j < data.p(); ++j) out << (j ? "," : "") << data.columns()[static_cast<std::size_t>(j)];
    out << '\n';
    for (Index i = 0; i < data.n(); ++i) {
        for (Index j = 0; j < data.p(); ++j) {
            if (j) out << ',';
            if (data.is_missing(i, j)) {
                out << "NA";
            } else if (raw && original_missing && !(*original_missing)(i, j)) {
                out << (*raw)[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            } else {
                out << format_double(data.values()(i, j));
            }
        }
        out << '\n';
    }
}

} // namespace hdmi
