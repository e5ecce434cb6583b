#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace dwm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

/// Indices of the columns of `m` that are linearly dependent on earlier
/// columns (column-pivoted QR with a relative threshold). Empty when full rank.
std::vector<std::size_t> dependent_columns(const Matrix& m, double threshold = 1e-10);

/// Smallest eigenvalue of the symmetric part of `m`.
double min_eigenvalue(const Matrix& m);

/// Condition number of a symmetric positive semi-definite matrix
/// (ratio of extreme eigenvalues; infinity if the smallest is <= 0).
double condition_number(const Matrix& m);

/// Solves a symmetric positive definite system; throws RankError when the
/// matrix is numerically singular. `what` names the matrix in the message.
Matrix spd_solve(const Matrix& a, const Matrix& b, const char* what);

/// Inverse of a symmetric matrix, or its Moore-Penrose pseudo-inverse when
/// the condition number exceeds `max_condition`. Sets `used_pinv` accordingly.
Matrix robust_inverse(const Matrix& a, double max_condition, bool& used_pinv);

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Rows of `m` selected by `rows`, in order.
Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows);
Vector take(const Vector& v, const std::vector<std::size_t>& rows);

}  // namespace dwm
