#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dwm/binary_response.hpp"
#include "dwm/dataset.hpp"
#include "dwm/mestimation.hpp"
#include "dwm/weights.hpp"

namespace dwm {

enum class VarianceMode { adjusted, unadjusted, bootstrap };
std::string to_string(VarianceMode mode);

/// Covariance estimate with its building blocks. For sandwich modes,
/// `sigma` = mean(l l'), `omega` = mean(u u') where u is l minus its
/// projection on the first-step scores (u = l when unadjusted).
struct VarianceEstimate {
    VarianceMode mode = VarianceMode::unadjusted;
    Matrix covariance;
    Matrix sigma;
    Matrix omega;
    Matrix hessian;
    Matrix residual_scores;  // u, N x P
    bool used_pseudo_inverse = false;
    std::size_t replications = 0;
    std::size_t failures = 0;

    double se(Eigen::Index k = 0) const { return std::sqrt(std::max(covariance(k, k), 0.0)); }
    /// Smallest eigenvalue of sigma - omega.
    double projection_gap() const { return min_eigenvalue(sigma - omega); }
};

/// First-step scores entering the adjustment: d for ps_weighted, [b d] for
/// d_weighted, none for unweighted.
Matrix first_step_scores(WeightVariant variant, const BinaryFit& propensity, const BinaryFit& observation);

/// Residual of each column of `l` after least-squares projection on the
/// columns of `c`. Uses a pseudo-inverse when c'c has condition number above
/// 1e12 and reports that through `used_pinv`.
Matrix project_out(const Matrix& l, const Matrix& c, bool& used_pinv);

/// H^-1 Omega H^-1 / N. `first_step` may have zero columns.
VarianceEstimate sandwich_theta(const MEstimateFit& fit, const Matrix& first_step, VarianceMode mode);

enum class MeanMode { correct_mean, misspecified_mean };
std::string to_string(MeanMode mode);
MeanMode parse_mean_mode(const std::string& name);

/// Rows over which predicted means are averaged: every row that survived
/// trimming (all rows when nothing was trimmed).
struct AteVariance {
    double estimate = 0.0;
    double variance = 0.0;
    VarianceEstimate treated;
    VarianceEstimate control;
    double se() const { return std::sqrt(std::max(variance, 0.0)); }
};

/// Delta-method variance of the separate-slopes ATE. correct_mean uses
/// unadjusted parameter variances; misspecified_mean uses adjusted ones plus
/// the covariance between the mean contrast and each arm's score residual.
AteVariance ate_variance(const MEstimateFit& treated, const MEstimateFit& control, const Dataset& ds,
                         const std::vector<std::uint8_t>& keep, const Matrix& first_step, MeanMode mode);

/// Statistic computed on a (resampled) dataset.
using Statistic = std::function<Vector(const Dataset&)>;

struct BootstrapOptions {
    std::size_t replications = 200;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    double max_failure_share = 0.10;
    /// Test hook: explicit resample indices per replicate.
    std::optional<std::vector<std::vector<std::size_t>>> forced_indices;
};

struct BootstrapResult {
    VarianceEstimate variance;
    Matrix replicates;  // successful replicates in replicate order
    std::vector<std::size_t> failed;
};

/// Nonparametric pairs bootstrap. Replicate b draws its rows from stream
/// (seed, b), so results do not depend on the thread count. Failed
/// replicates are dropped; more than `max_failure_share` of them raises
/// ReliabilityError.
BootstrapResult pairs_bootstrap(const Dataset& ds, const Statistic& statistic, const BootstrapOptions& options);

/// Monte Carlo comparison of two paired series drawn on the same samples.
struct PairedSeries {
    std::string registry;  // identifies the run the draws came from
    std::vector<double> values;
};

struct Verdict {
    std::string name;
    double candidate = 0.0;
    double reference = 0.0;
    double mc_se = 0.0;
    bool pass = false;
    nlohmann::json to_json() const;
};

/// candidate variance <= reference variance + slack * MC-SE of the paired
/// difference of variances.
Verdict compare_variance(const std::string& name, const PairedSeries& candidate, const PairedSeries& reference,
                         double slack = 2.0);
/// Same ordering for standard deviations (delta method for the MC-SE).
Verdict compare_sd(const std::string& name, const PairedSeries& candidate, const PairedSeries& reference,
                   double slack = 2.0);

struct EfficiencyInput {
    std::vector<std::pair<PairedSeries, PairedSeries>> weight_comparisons;  // (estimated, known) per component
    std::vector<std::string> weight_comparison_names;
    std::pair<PairedSeries, PairedSeries> weighting_comparison;  // (unweighted, d_weighted)
    std::vector<double> projection_gaps;               // min eig of sigma - omega per replicate
};

/// Verdicts for the efficiency orderings plus the projection psd check.
/// Throws RegistryError when paired series come from different runs.
nlohmann::json efficiency_report(const EfficiencyInput& input);

}  // namespace dwm
