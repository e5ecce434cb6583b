#include "dwm/effects.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dwm/errors.hpp"

namespace dwm {

nlohmann::json EffectEstimate::to_json() const {
    nlohmann::json j;
    j["estimand"] = estimand;
    j["variant"] = to_string(variant);
    if (!std::isnan(tau)) j["tau"] = tau;
    if (point.size() == 1) {
        j["point"] = point[0];
    } else {
        j["point"] = std::vector<double>(point.data(), point.data() + point.size());
    }
    j["se"] = se ? nlohmann::json(*se) : nlohmann::json(nullptr);
    if (degenerate) j["degenerate_quantile"] = true;
    if (extrapolated) j["extrapolated"] = true;
    if (!metadata.empty()) j["metadata"] = metadata;
    return j;
}

namespace {

std::vector<std::uint8_t> all_rows(const Dataset& ds, const std::vector<std::uint8_t>& keep) {
    if (!keep.empty()) {
        if (keep.size() != ds.rows()) throw ConsistencyError("row mask is not aligned with the dataset");
        return keep;
    }
    return std::vector<std::uint8_t>(ds.rows(), 1);
}

double mean_prediction(const MEstimateFit& fit, const Matrix& x, const std::vector<std::uint8_t>& keep) {
    double total = 0.0, count = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        if (!keep[static_cast<std::size_t>(i)]) continue;
        total += fit.objective.predict(x.row(i).dot(fit.theta));
        count += 1.0;
    }
    if (count == 0.0) throw InfeasibleError("no rows to average predictions over");
    return total / count;
}

bool outside_support(const Matrix& grid, const std::vector<std::string>& columns, const Dataset* support) {
    if (!support) return false;
    const Matrix x = support->covariate_design().subset(columns).values;
    const RowVector lo = x.colwise().minCoeff(), hi = x.colwise().maxCoeff();
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
        for (Eigen::Index j = 0; j < grid.cols(); ++j) {
            if (grid(i, j) < lo[j] || grid(i, j) > hi[j]) return true;
        }
    }
    return false;
}

double quantile_prediction(const MEstimateFit& fit, const RowVector& x) {
    const double q = x.dot(fit.theta);
    return fit.transform == OutcomeTransform::log ? std::exp(q) : q;
}

void check_quantile_pair(const MEstimateFit& treated, const MEstimateFit& control, const Matrix& grid) {
    for (const auto* f : {&treated, &control}) {
        if (f->objective.kind != ObjectiveKind::Kind::quantile) throw ConfigError("quantile effects need quantile fits");
        if (grid.cols() != f->theta.size()) throw ConfigError("grid columns do not match the fitted covariates");
    }
    if (treated.objective.tau != control.objective.tau) throw ConfigError("arms were fitted at different quantiles");
}

}  // namespace

EffectEstimate ate_separate(const MEstimateFit& treated, const MEstimateFit& control, const Dataset& ds,
                            const std::vector<std::uint8_t>& keep) {
    if (treated.objective.name() != control.objective.name()) {
        throw ConfigError("ATE arms use different objectives (" + treated.objective.name() + " vs " +
                          control.objective.name() + ")");
    }
    if (treated.objective.kind == ObjectiveKind::Kind::quantile) throw ConfigError("ATE needs mean fits");
    const auto rows = all_rows(ds, keep);
    const Design x = ds.covariate_design();
    EffectEstimate e;
    e.estimand = "ate_separate";
    e.point = Vector::Constant(1, mean_prediction(treated, x.subset(treated.columns).values, rows) -
                                      mean_prediction(control, x.subset(control.columns).values, rows));
    return e;
}

EffectEstimate ate_pooled(const Dataset& ds, const WeightSet& ws, GlmFamily family,
                          const std::vector<std::string>& columns) {
    if (ds.levels() != 2) throw ConfigError("pooled ATE needs a binary treatment");
    Design x = ds.covariate_design();
    if (!columns.empty()) x = x.subset(columns);
    const Eigen::Index n = x.values.rows(), p = x.values.cols();
    Matrix xw(n, p + 1);
    xw << x.values, ds.treatment_indicator(1);
    const Vector w = ws.arm(ArmSelector::treated()) + ws.arm(ArmSelector::control());
    const Vector y = arm_outcome(ds, w, OutcomeTransform::identity);
    const auto fit = weighted_glm(xw, y, w, family);
    const Vector theta = fit.theta.head(p);
    const double eta = fit.theta[p];
    double treated = 0.0, control = 0.0, count = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!ws.keep[static_cast<std::size_t>(i)]) continue;
        const double idx = x.values.row(i).dot(theta);
        treated += glm_mean(family, idx + eta);
        control += glm_mean(family, idx);
        count += 1.0;
    }
    EffectEstimate e;
    e.estimand = "ate_pooled";
    e.variant = ws.variant;
    e.point = Vector::Constant(1, (treated - control) / count);
    e.metadata["eta"] = eta;
    e.metadata["family"] = to_string(family);
    return e;
}

EffectEstimate cqte(const MEstimateFit& treated, const MEstimateFit& control, const Matrix& grid,
                    const Dataset* support) {
    check_quantile_pair(treated, control, grid);
    EffectEstimate e;
    e.estimand = "cqte";
    e.tau = treated.objective.tau;
    e.point.resize(grid.rows());
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
        e.point[i] = quantile_prediction(treated, grid.row(i)) - quantile_prediction(control, grid.row(i));
    }
    e.extrapolated = outside_support(grid, treated.columns, support);
    return e;
}

EffectEstimate lp_cqte(const MEstimateFit& treated, const MEstimateFit& control, const Matrix& grid,
                       const Dataset* support) {
    check_quantile_pair(treated, control, grid);
    if (treated.transform != OutcomeTransform::identity || control.transform != OutcomeTransform::identity) {
        throw ConfigError("the linear projection uses fits on the untransformed outcome");
    }
    EffectEstimate e;
    e.estimand = "lp_cqte";
    e.tau = treated.objective.tau;
    e.point = grid * (treated.theta - control.theta);
    e.extrapolated = outside_support(grid, treated.columns, support);
    return e;
}

// ---------------------------------------------------------------------------

double weighted_quantile(const Vector& values, const Vector& weights, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("quantile level must lie strictly inside (0, 1)");
    std::vector<Eigen::Index> order;
    double total = 0.0;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (weights[i] > 0.0) {
            order.push_back(i);
            total += weights[i];
        }
    }
    if (order.empty()) throw InfeasibleError("weighted quantile of an empty sample");
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return values[a] < values[b]; });
    const double target = tau * total;
    double cum = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        cum += weights[order[k]];
        // Group ties so the cumulative weight of a value includes all copies.
        if (k + 1 < order.size() && values[order[k + 1]] == values[order[k]]) continue;
        if (cum >= target * (1.0 - 1e-12)) return values[order[k]];
    }
    return values[order.back()];
}

double weighted_kde(const Vector& values, const Vector& weights, double at, double bandwidth) {
    if (!(bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    double total = 0.0, wsum = 0.0;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        const double u = (at - values[i]) / bandwidth;
        total += weights[i] * kInvSqrt2Pi * std::exp(-0.5 * u * u);
        wsum += weights[i];
    }
    if (wsum == 0.0) throw InfeasibleError("density of an empty sample");
    return total / (wsum * bandwidth);
}

double silverman_bandwidth(const Vector& values, const Vector& weights) {
    double wsum = 0.0, mean = 0.0;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        wsum += weights[i];
        mean += weights[i] * values[i];
    }
    if (wsum == 0.0) throw InfeasibleError("bandwidth of an empty sample");
    mean /= wsum;
    double var = 0.0;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (weights[i] > 0.0) var += weights[i] * (values[i] - mean) * (values[i] - mean);
    }
    const double sd = std::sqrt(var / wsum);
    const double iqr = weighted_quantile(values, weights, 0.75) - weighted_quantile(values, weights, 0.25);
    double spread = std::min(sd, iqr / 1.34);
    if (!(spread > 0.0)) spread = sd > 0.0 ? sd : 1.0;
    return 0.9 * spread * std::pow(wsum, -0.2);
}

namespace {

struct ArmSample {
    Vector y;
    Vector w;
};

ArmSample arm_sample(const Dataset& ds, const WeightSet& ws, ArmSelector arm) {
    const Vector w = ws.arm(arm);
    ArmSample s{Vector::Zero(w.size()), w};
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        if (w[i] > 0.0) s.y[i] = ds.outcome(static_cast<std::size_t>(i));
    }
    if (w.sum() <= 0.0) throw InfeasibleError("arm " + std::to_string(arm.level) + " has no weighted rows");
    return s;
}

}  // namespace

EffectEstimate uqte_direct(const Dataset& ds, const WeightSet& ws, double tau) {
    const ArmSample s1 = arm_sample(ds, ws, ArmSelector::treated());
    const ArmSample s0 = arm_sample(ds, ws, ArmSelector::control());
    const double q1 = weighted_quantile(s1.y, s1.w, tau);
    const double q0 = weighted_quantile(s0.y, s0.w, tau);
    EffectEstimate e;
    e.estimand = "uqte_direct";
    e.variant = ws.variant;
    e.tau = tau;
    e.point = Vector::Constant(1, q1 - q0);
    e.degenerate = q1 == 0.0 && q0 == 0.0;
    e.metadata["quantile_treated"] = q1;
    e.metadata["quantile_control"] = q0;
    return e;
}

EffectEstimate uqte_rif(const Dataset& ds, const WeightSet& ws, const RifConfig& cfg) {
    EffectEstimate e;
    e.estimand = "uqte_rif";
    e.variant = ws.variant;
    e.tau = cfg.tau;
    Design x = ds.covariate_design();
    if (!cfg.columns.empty()) x = x.subset(cfg.columns);

    double means[2] = {0.0, 0.0};
    double quantiles[2] = {0.0, 0.0};
    nlohmann::json arms;
    for (int g : {0, 1}) {
        const ArmSample s = arm_sample(ds, ws, ArmSelector{g});
        const double q = weighted_quantile(s.y, s.w, cfg.tau);
        quantiles[g] = q;
        double h = cfg.bandwidth ? (g == 0 ? cfg.bandwidth->first : cfg.bandwidth->second)
                                 : silverman_bandwidth(s.y, s.w);
        h *= cfg.bandwidth_scale;
        const double f = weighted_kde(s.y, s.w, q, h);
        arms[g == 1 ? "treated" : "control"] = {{"quantile", q}, {"density", f}, {"bandwidth", h}};
        if (!(f >= 1e-10)) {
            throw InstabilityError("density at the " + std::to_string(cfg.tau) + " quantile of arm " +
                                   std::to_string(g) + " is " + std::to_string(f));
        }
        Vector rif = Vector::Zero(s.y.size());
        for (Eigen::Index i = 0; i < s.y.size(); ++i) {
            if (s.w[i] > 0.0) rif[i] = q + (cfg.tau - (s.y[i] <= q ? 1.0 : 0.0)) / f;
        }
        const Vector theta = weighted_least_squares(x.values, rif, s.w).theta;
        double fitted = 0.0;
        for (Eigen::Index i = 0; i < s.y.size(); ++i) {
            if (s.w[i] > 0.0) fitted += s.w[i] * x.values.row(i).dot(theta);
        }
        means[g] = fitted / s.w.sum();
    }
    if (quantiles[0] == 0.0 && quantiles[1] == 0.0) {
        e.degenerate = true;
        e.point = Vector::Zero(1);
    } else {
        e.point = Vector::Constant(1, means[1] - means[0]);
    }
    e.metadata["arms"] = arms;
    return e;
}

EffectEstimate arm_contrast(const Dataset& ds, const WeightSet& ws, int level, int other, const SecondStepSpec& spec) {
    if (spec.objective.kind == ObjectiveKind::Kind::quantile) throw ConfigError("arm contrasts need mean fits");
    if (level == other) throw ConfigError("contrast needs two distinct levels");
    const auto fit_a = solve_second_step(ds, ws, ArmSelector{level}, spec);
    const auto fit_b = solve_second_step(ds, ws, ArmSelector{other}, spec);
    EffectEstimate e = ate_separate(fit_a, fit_b, ds, ws.keep);
    e.estimand = "contrast_" + std::to_string(level) + "_" + std::to_string(other);
    e.variant = ws.variant;
    return e;
}

}  // namespace dwm
