#include "dwm/linalg.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "dwm/errors.hpp"

namespace dwm {

std::vector<std::size_t> dependent_columns(const Matrix& m, double threshold) {
    std::vector<std::size_t> dependent;
    if (m.cols() == 0) return dependent;
    // Greedy left-to-right: a column is dependent if it adds no rank to the
    // columns kept so far. Keeps the reported set stable and readable.
    Eigen::Index kept = 0;
    Matrix basis(m.rows(), m.cols());
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        basis.col(kept) = m.col(j);
        Eigen::ColPivHouseholderQR<Matrix> qr(basis.leftCols(kept + 1));
        qr.setThreshold(threshold);
        const double col_norm = m.col(j).norm();
        if (qr.rank() == kept + 1 && col_norm > threshold * scale) {
            ++kept;
        } else {
            dependent.push_back(static_cast<std::size_t>(j));
        }
    }
    return dependent;
}

double min_eigenvalue(const Matrix& m) {
    if (m.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

double condition_number(const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (lo <= 0.0) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

Matrix spd_solve(const Matrix& a, const Matrix& b, const char* what) {
    Eigen::LDLT<Matrix> ldlt(a);
    const double cond = condition_number(a);
    if (ldlt.info() != Eigen::Success || !std::isfinite(cond) || cond > 1e14) {
        throw RankError(std::string(what) + " is singular or numerically rank deficient");
    }
    return ldlt.solve(b);
}

Matrix robust_inverse(const Matrix& a, double max_condition, bool& used_pinv) {
    const double cond = condition_number(a);
    if (std::isfinite(cond) && cond <= max_condition) {
        used_pinv = false;
        return Eigen::LDLT<Matrix>(a).solve(Matrix::Identity(a.rows(), a.cols()));
    }
    used_pinv = true;
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(a);
    return cod.pseudoInverse();
}

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

Vector take(const Vector& v, const std::vector<std::size_t>& rows) {
    Vector out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(rows[i])];
    return out;
}

}  // namespace dwm
