#include "dwm/weights.hpp"

#include <algorithm>
#include <cmath>

#include "dwm/errors.hpp"

namespace dwm {

std::string to_string(WeightVariant variant) {
    switch (variant) {
        case WeightVariant::unweighted: return "unweighted";
        case WeightVariant::ps_weighted: return "ps_weighted";
        case WeightVariant::d_weighted: return "d_weighted";
    }
    return "unknown";
}

WeightVariant parse_variant(const std::string& name) {
    for (auto v : kAllVariants) {
        if (to_string(v) == name) return v;
    }
    throw ConfigError("unknown weight variant '" + name + "' (expected unweighted, ps_weighted or d_weighted)");
}

std::size_t WeightSet::kept() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

Vector WeightSet::arm(ArmSelector g) const {
    if (g.level < 0 || g.level >= levels()) throw ConfigError("arm index outside treatment levels");
    Vector w = by_level[static_cast<std::size_t>(g.level)];
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i]) w[static_cast<Eigen::Index>(i)] = 0.0;
    }
    return w;
}

Vector WeightSet::composite_probability(const Dataset& ds) const {
    Vector c(static_cast<Eigen::Index>(ds.rows()));
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        c[r] = observation[r] * propensity(r, ds.treatment(i));
    }
    return c;
}

namespace {

std::size_t clip_column(Eigen::Ref<Vector> v) {
    std::size_t clipped = 0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (v[i] < kProbabilityFloor || v[i] > 1.0 - kProbabilityFloor) {
            v[i] = std::clamp(v[i], kProbabilityFloor, 1.0 - kProbabilityFloor);
            ++clipped;
        }
    }
    return clipped;
}

WeightSet build(Matrix propensity, Vector observation, std::size_t clipped, const Dataset& ds,
                WeightVariant variant) {
    const auto n = static_cast<Eigen::Index>(ds.rows());
    if (propensity.rows() != n || observation.size() != n) {
        throw ConsistencyError("probability fits are not aligned with the dataset rows");
    }
    WeightSet ws;
    ws.variant = variant;
    ws.clipped = clipped;
    ws.keep.assign(ds.rows(), 1);
    ws.by_level.assign(static_cast<std::size_t>(ds.levels()), Vector::Zero(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = static_cast<std::size_t>(i);
        if (!ds.observed(row)) continue;
        const int g = ds.treatment(row);
        double w = 1.0;
        if (variant != WeightVariant::unweighted) w /= propensity(i, g);
        if (variant == WeightVariant::d_weighted) w /= observation[i];
        ws.by_level[static_cast<std::size_t>(g)][i] = w;
    }
    ws.propensity = std::move(propensity);
    ws.observation = std::move(observation);
    return ws;
}

}  // namespace

WeightSet compute_weights(const BinaryFit& propensity, const BinaryFit& observation, const Dataset& ds,
                          WeightVariant variant) {
    if (ds.levels() != 2) throw ConfigError("binary propensity used with a multivalued treatment");
    Matrix p(propensity.fitted_probs.size(), 2);
    p.col(1) = propensity.fitted_probs;
    p.col(0) = (1.0 - propensity.fitted_probs.array()).matrix();
    return build(std::move(p), observation.fitted_probs, propensity.clipped + observation.clipped, ds, variant);
}

WeightSet compute_weights(const MultinomialFit& propensity, const BinaryFit& observation, const Dataset& ds,
                          WeightVariant variant) {
    if (propensity.levels != ds.levels()) throw ConfigError("propensity levels differ from the dataset's");
    return build(propensity.probabilities, observation.fitted_probs, propensity.clipped + observation.clipped, ds,
                 variant);
}

WeightSet compute_weights_known(const Vector& propensity, const Vector& observation, const Dataset& ds,
                                WeightVariant variant) {
    Matrix p(propensity.size(), 2);
    p.col(1) = propensity;
    Vector r = observation;
    std::size_t clipped = clip_column(p.col(1)) + clip_column(r);
    p.col(0) = (1.0 - p.col(1).array()).matrix();
    return build(std::move(p), std::move(r), clipped, ds, variant);
}

WeightSet trim(const WeightSet& ws, const Dataset& ds, double lo, double hi) {
    if (!(lo >= 0.0 && lo < hi && hi <= 1.0)) throw ConfigError("trim bounds must satisfy 0 <= lo < hi <= 1");
    WeightSet out = ws;
    out.trim_lo = lo;
    out.trim_hi = hi;
    const Vector c = ws.composite_probability(ds);
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        const double v = c[static_cast<Eigen::Index>(i)];
        if (v < lo || v > hi) out.keep[i] = 0;
    }
    if (out.kept() == 0) throw InfeasibleError("trimming dropped every row");
    return out;
}

nlohmann::json trim_report(const WeightSet& ws) {
    nlohmann::json j;
    j["lo"] = ws.trim_lo;
    j["hi"] = ws.trim_hi;
    j["rows"] = ws.rows();
    j["kept"] = ws.kept();
    j["dropped"] = ws.rows() - ws.kept();
    j["clipped_probabilities"] = ws.clipped;
    return j;
}

}  // namespace dwm
