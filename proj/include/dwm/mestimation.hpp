#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "dwm/binary_response.hpp"
#include "dwm/dataset.hpp"
#include "dwm/weights.hpp"

namespace dwm {

/// Quasi-likelihood families. The first three use their canonical link;
/// bernoulli_probit is the Bernoulli QMLE with a probit mean.
enum class GlmFamily { gaussian_identity, bernoulli_logit, poisson_log, bernoulli_probit };

std::string to_string(GlmFamily family);
GlmFamily parse_family(const std::string& name);

/// Mean function h and its derivative.
double glm_mean(GlmFamily family, double index);
double glm_mean_derivative(GlmFamily family, double index);

struct ObjectiveKind {
    enum class Kind { least_squares, glm, quantile };
    Kind kind = Kind::least_squares;
    GlmFamily family = GlmFamily::gaussian_identity;
    double tau = 0.5;

    static ObjectiveKind least_squares() { return {}; }
    static ObjectiveKind glm(GlmFamily f) { return {Kind::glm, f, 0.5}; }
    static ObjectiveKind quantile(double t);

    std::string name() const;
    /// Conditional mean or quantile at index x theta.
    double predict(double index) const;
    double predict_derivative(double index) const;
};

/// Outcome transformation applied before the second step (log for the
/// exponential conditional-quantile path).
enum class OutcomeTransform { identity, log };

/// Second-step solution for one arm. `row_scores` has one row per dataset
/// row (zero where the weight is zero); scores are gradients of the
/// minimized objective and `hessian` is the mean Jacobian of the score over
/// all N rows. Quantile fits have an empty hessian.
struct MEstimateFit {
    ArmSelector arm;
    ObjectiveKind objective;
    OutcomeTransform transform = OutcomeTransform::identity;
    std::vector<std::string> columns;
    Vector theta;
    Matrix row_scores;
    Matrix hessian;
    double objective_value = 0.0;
    int iterations = 0;
    bool converged = true;
    std::vector<std::size_t> basis;  // quantile fits: interpolated rows
};

struct SecondStepSpec {
    ObjectiveKind objective;
    std::vector<std::string> columns;  // subset of X, empty = all
    OutcomeTransform transform = OutcomeTransform::identity;
};

// --- Matrix-level solvers. Rows with zero weight are ignored (their
// outcome may be NaN). ---

struct WeightedLsResult {
    Vector theta;
    double objective;
};
WeightedLsResult weighted_least_squares(const Matrix& x, const Vector& y, const Vector& w);

struct GlmResult {
    Vector theta;
    double objective;
    int iterations;
};
GlmResult weighted_glm(const Matrix& x, const Vector& y, const Vector& w, GlmFamily family, double tolerance = 1e-8,
                       int max_iterations = 100);

struct QuantileResult {
    Vector theta;
    double objective;
    std::vector<std::size_t> basis;  // indices into the rows of x
    int iterations;
};
/// Exact weighted check-loss minimizer at a vertex interpolating p rows.
/// Among multiple optima the lexicographically smallest vertex is returned.
QuantileResult weighted_quantile_regression(const Matrix& x, const Vector& y, const Vector& w, double tau);

/// Weighted check loss sum_i w_i c_tau(y_i - x_i theta).
double check_loss(const Matrix& x, const Vector& y, const Vector& w, const Vector& theta, double tau);

// --- Dataset-level wrappers. ---

/// Outcome vector for arm g, transformed, with zeros where the weight is 0.
Vector arm_outcome(const Dataset& ds, const Vector& weights, OutcomeTransform transform);

MEstimateFit solve_weighted_ls(const Dataset& ds, const WeightSet& ws, ArmSelector arm,
                               const std::vector<std::string>& columns = {});
MEstimateFit solve_weighted_glm(const Dataset& ds, const WeightSet& ws, ArmSelector arm, GlmFamily family,
                                const std::vector<std::string>& columns = {});
MEstimateFit solve_weighted_qr(const Dataset& ds, const WeightSet& ws, ArmSelector arm, double tau,
                               const std::vector<std::string>& columns = {},
                               OutcomeTransform transform = OutcomeTransform::identity);
MEstimateFit solve_second_step(const Dataset& ds, const WeightSet& ws, ArmSelector arm, const SecondStepSpec& spec);

/// Scores and Hessian of a smooth objective at a given theta, over all rows
/// (`weights` zero off-arm). Shared by the solvers and the stacked system.
void smooth_scores(const Matrix& x, const Vector& y, const Vector& w, const ObjectiveKind& objective,
                   const Vector& theta, Matrix& scores, Matrix* hessian);

// --- Stacked one-step system. ---

struct StackedSpec {
    std::vector<std::string> propensity_columns;
    LinkKind propensity_link = LinkKind::logit;
    std::vector<std::string> observation_columns;
    LinkKind observation_link = LinkKind::logit;
    SecondStepSpec control;
    SecondStepSpec treated;
    /// Scale each arm's moments by N / N_g (root unchanged).
    bool scale_by_arm_size = false;
    double tolerance = 1e-10;
    int max_iterations = 100;
};

struct StackedFit {
    Vector theta_control;
    Vector theta_treated;
    Vector propensity;
    Vector observation;
    int iterations = 0;
    double moment_norm = 0.0;
};

/// Joint root of the first-step likelihood scores and both arms' doubly
/// weighted moment conditions, solved by damped Newton with a
/// central-difference Jacobian from a naive start.
StackedFit solve_stacked_gmm(const Dataset& ds, const StackedSpec& spec);

nlohmann::json to_json(const MEstimateFit& fit);

}  // namespace dwm
