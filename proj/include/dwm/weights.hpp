#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dwm/binary_response.hpp"
#include "dwm/dataset.hpp"

namespace dwm {

enum class WeightVariant { unweighted, ps_weighted, d_weighted };

std::string to_string(WeightVariant variant);
WeightVariant parse_variant(const std::string& name);
inline constexpr WeightVariant kAllVariants[] = {WeightVariant::unweighted, WeightVariant::ps_weighted,
                                                 WeightVariant::d_weighted};

/// Per-row composite weights for every treatment level, plus the trim mask.
///
/// `propensity` is N x levels (column g = estimated P(W = g | X)) and
/// `observation` the estimated P(S = 1 | X, W); both are kept for every
/// variant so trimming acts on the same rows whichever variant is used.
struct WeightSet {
    WeightVariant variant = WeightVariant::d_weighted;
    std::vector<Vector> by_level;
    std::vector<std::uint8_t> keep;
    Matrix propensity;
    Vector observation;
    std::size_t clipped = 0;
    double trim_lo = 0.0;
    double trim_hi = 1.0;

    int levels() const { return static_cast<int>(by_level.size()); }
    std::size_t rows() const { return keep.size(); }
    std::size_t kept() const;
    /// Weights of one arm with dropped rows set to zero.
    Vector arm(ArmSelector g) const;
    /// Composite probability of each row for its own treatment level.
    Vector composite_probability(const Dataset& ds) const;
};

/// Builds weights from fitted probabilities. d_weighted uses
/// S 1{W=g} / (r p_g), ps_weighted drops r, unweighted keeps the indicators.
WeightSet compute_weights(const BinaryFit& propensity, const BinaryFit& observation, const Dataset& ds,
                          WeightVariant variant);

WeightSet compute_weights(const MultinomialFit& propensity, const BinaryFit& observation, const Dataset& ds,
                          WeightVariant variant);

/// Same formula with externally supplied probabilities (e.g. the true ones
/// of a simulation design). `propensity` is P(W = 1 | X).
WeightSet compute_weights_known(const Vector& propensity, const Vector& observation, const Dataset& ds,
                                WeightVariant variant);

/// Marks rows whose composite probability lies outside [lo, hi] as dropped.
/// Throws InfeasibleError when nothing is left.
WeightSet trim(const WeightSet& ws, const Dataset& ds, double lo, double hi);

nlohmann::json trim_report(const WeightSet& ws);

}  // namespace dwm
