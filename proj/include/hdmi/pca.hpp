#pragma once

#include "core.hpp"

#include <Eigen/SVD>

#include <string>
#include <vector>

namespace hdmi {

struct PcaModel {
    Standardization scaling;  // over all q input columns
    IndexList kept;           // non-degenerate columns entering the decomposition
    Matrix loadings;          // q x c; rows of dropped columns are zero
    Vector explained;         // variance shares of the retained components
    Vector spectrum_shares;   // shares of every nonzero component, descending
    Index c = 0;
    std::vector<std::string> warnings;

    Index q() const { return loadings.rows(); }
};

inline constexpr double kDefaultPcaVarianceTarget = 0.5;

/// Principal components of the column-standardized matrix A, keeping the
/// smallest leading set whose cumulative variance share reaches var_target.
inline PcaModel pca_fit(const Matrix& A, double var_target = kDefaultPcaVarianceTarget) {
    if (A.rows() < 2 || A.cols() < 1) throw InputError("pca_fit: need n >= 2 and q >= 1");
    if (!(var_target > 0.0 && var_target <= 1.0)) throw InputError("pca_fit: var_target must lie in (0, 1]");
    const Index n = A.rows(), q = A.cols();

    PcaModel model;
    Matrix z;
    std::tie(z, model.scaling) = standardize(A);
    model.kept = model.scaling.non_degenerate();
    if (model.kept.empty()) throw InputError("pca_fit: every auxiliary column is constant");
    for (Index j = 0; j < q; ++j)
        if (model.scaling.degenerate[static_cast<std::size_t>(j)])
            model.warnings.push_back("pca_fit: dropped constant column " + std::to_string(j));

    const Matrix zk = gather_cols(z, model.kept);
    Eigen::BDCSVD<Matrix> svd(zk, Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    const Index rank_cap = std::min<Index>(n - 1, zk.cols());
    const double total = sv.squaredNorm();

    Index r = 0;
    while (r < rank_cap && r < sv.size() && sv(r) * sv(r) > total * 1e-14) ++r;
    model.spectrum_shares = sv.head(r).array().square() / total;

    Index c = 0;
    double cumulative = 0.0;
    while (c < r) {
        cumulative += model.spectrum_shares(c);
        ++c;
        // Cumulative shares of a rank-deficient spectrum can fall short of 1
        // by rounding, so the full-retention target is compared with slack.
        if (cumulative >= var_target - 1e-12) break;
    }
    model.c = c;
    model.explained = model.spectrum_shares.head(c);

    model.loadings = Matrix::Zero(q, c);
    const Matrix& v = svd.matrixV();
    for (Index k = 0; k < c; ++k) {
        Vector col = v.col(k);
        Index at = 0;
        col.cwiseAbs().maxCoeff(&at);
        if (col(at) < 0.0) col = -col;
        for (std::size_t i = 0; i < model.kept.size(); ++i) model.loadings(model.kept[i], k) = col(static_cast<Index>(i));
    }
    return model;
}

/// Component scores: standardized A times the loadings.
inline Matrix pca_scores(const PcaModel& model, const Matrix& A) {
    if (A.cols() != model.q()) throw std::invalid_argument("pca_scores: column count differs from the fit");
    Matrix z = Matrix::Zero(A.rows(), A.cols());
    for (Index j : model.kept)
        z.col(j) = (A.col(j).array() - model.scaling.centers(j)) / model.scaling.scales(j);
    return z * model.loadings;
}

} // namespace hdmi
