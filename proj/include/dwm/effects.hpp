#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dwm/dataset.hpp"
#include "dwm/mestimation.hpp"
#include "dwm/weights.hpp"

namespace dwm {

/// Scalar or per-grid effect with an optional standard error.
struct EffectEstimate {
    std::string estimand;
    WeightVariant variant = WeightVariant::d_weighted;
    double tau = std::numeric_limits<double>::quiet_NaN();
    Vector point;
    std::optional<double> se;
    bool degenerate = false;    // both marginal quantiles are zero
    bool extrapolated = false;  // grid leaves the covariate support
    nlohmann::json metadata = nlohmann::json::object();

    double value() const { return point[0]; }
    nlohmann::json to_json() const;
};

/// Average of h(x theta_1) - h(x theta_0) over the kept rows, observed or not.
/// An empty `keep` means every row.
EffectEstimate ate_separate(const MEstimateFit& treated, const MEstimateFit& control, const Dataset& ds,
                            const std::vector<std::uint8_t>& keep = {});

/// Single weighted fit on (X, W) with pooled weight w1 + w0; the effect is
/// mean h(x theta + eta) - mean h(x theta). metadata["eta"] holds the dummy
/// coefficient.
EffectEstimate ate_pooled(const Dataset& ds, const WeightSet& ws, GlmFamily family,
                          const std::vector<std::string>& columns = {});

/// Difference of predicted conditional quantiles on a grid whose columns
/// match the fits' covariates. Log-outcome fits are exponentiated.
EffectEstimate cqte(const MEstimateFit& treated, const MEstimateFit& control, const Matrix& grid,
                    const Dataset* support = nullptr);

/// x (theta_1 - theta_0) on the grid for linear quantile fits.
EffectEstimate lp_cqte(const MEstimateFit& treated, const MEstimateFit& control, const Matrix& grid,
                       const Dataset* support = nullptr);

/// Smallest value whose cumulative normalized weight reaches tau. Rows with
/// zero weight are ignored.
double weighted_quantile(const Vector& values, const Vector& weights, double tau);

/// Weighted Gaussian kernel density at a point, normalized by the weight total.
double weighted_kde(const Vector& values, const Vector& weights, double at, double bandwidth);

/// 0.9 min(SD_w, IQR_w / 1.34) (sum w)^(-1/5).
double silverman_bandwidth(const Vector& values, const Vector& weights);

/// Weighted intercept-only quantile per arm, differenced.
EffectEstimate uqte_direct(const Dataset& ds, const WeightSet& ws, double tau);

struct RifConfig {
    double tau = 0.5;
    /// Per-arm bandwidths (control, treated); Silverman when absent.
    std::optional<std::pair<double, double>> bandwidth;
    double bandwidth_scale = 1.0;
    std::vector<std::string> columns;  // regressors for the RIF regression
};

/// Unconditional quantile effect through a weighted RIF regression per arm.
/// Throws InstabilityError when the density at a quantile is below 1e-10.
EffectEstimate uqte_rif(const Dataset& ds, const WeightSet& ws, const RifConfig& cfg);

/// E[Y(g)] - E[Y(h)] from per-level weighted mean fits.
EffectEstimate arm_contrast(const Dataset& ds, const WeightSet& ws, int level, int other, const SecondStepSpec& spec);

}  // namespace dwm
