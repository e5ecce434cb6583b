#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "support.hpp"

#include "dwm/binary_response.hpp"
#include "dwm/effects.hpp"
#include "dwm/errors.hpp"
#include "dwm/mestimation.hpp"
#include "dwm/weights.hpp"

using namespace dwm;

namespace {

// Smallest value whose cumulative share of positive weight reaches tau, by
// direct enumeration of the distinct values.
double enumerated_quantile(const Vector& y, const Vector& w, double tau) {
    std::map<double, double> mass;
    double total = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (w[i] > 0.0) {
            mass[y[i]] += w[i];
            total += w[i];
        }
    }
    double cum = 0.0;
    for (const auto& [v, m] : mass) {
        cum += m;
        if (cum / total >= tau) return v;
    }
    return mass.rbegin()->first;
}

double weighted_cdf(const Vector& y, const Vector& w, double at) {
    double below = 0.0, total = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (w[i] <= 0.0) continue;
        total += w[i];
        if (y[i] <= at) below += w[i];
    }
    return below / total;
}

WeightSet estimated(const Dataset& ds, WeightVariant v) {
    const auto ps = fit_propensity(ds, {}, LinkKind::logit);
    const auto miss = fit_missingness(ds, {}, LinkKind::logit);
    return compute_weights(ps, miss, ds, v);
}

Dataset lognormal_sample(std::size_t n, std::uint64_t seed) {
    const Dataset base = testsupport::synthetic(n, seed);
    Vector y(static_cast<Eigen::Index>(n));
    std::mt19937_64 rng(seed + 1000);
    std::normal_distribution<double> z;
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        y[r] = std::exp(0.2 + 0.3 * base.covariates()(r, 1) - 0.2 * base.covariates()(r, 2) +
                        0.4 * base.treatment(i) + 0.5 * z(rng));
    }
    return Dataset(y, base.observed_mask(), base.treatments(), base.covariates().rightCols(2), {"x1", "x2"});
}

}  // namespace

TEST_CASE("weighted quantile matches enumeration on small samples") {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> size(1, 20), level(0, 5), coin(0, 3);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = size(rng);
        Vector y(n), w(n);
        for (int i = 0; i < n; ++i) {
            y[i] = trial % 2 ? level(rng) : unif(rng);
            w[i] = coin(rng) == 0 ? 0.0 : unif(rng) + 0.01;
        }
        w[0] = 0.5;
        const double tau = 0.02 + 0.96 * unif(rng);
        CHECK(weighted_quantile(y, w, tau) == enumerated_quantile(y, w, tau));
    }
}

TEST_CASE("weighted quantile is equivariant under monotone maps") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> unif(0.1, 2.0);
    Vector y(300), w(300);
    for (int i = 0; i < 300; ++i) {
        y[i] = z(rng);
        w[i] = unif(rng);
    }
    const Vector ey = y.array().exp();
    for (double tau : {0.1, 0.25, 0.5, 0.75, 0.9}) {
        CHECK(weighted_quantile(ey, w, tau) == std::exp(weighted_quantile(y, w, tau)));
        CHECK(weighted_quantile(y, 3.7 * w, tau) == weighted_quantile(y, w, tau));
    }
    CHECK_THROWS_AS(weighted_quantile(y, w, 1.0), ConfigError);
    CHECK_THROWS_AS(weighted_quantile(y, Vector::Zero(300), 0.5), InfeasibleError);
}

TEST_CASE("weighted kernel density integrates to one") {
    const Vector y = (Vector(5) << -1.0, 0.0, 0.5, 2.0, 4.0).finished();
    const Vector w = (Vector(5) << 0.3, 2.0, 0.0, 1.1, 0.6).finished();
    const double h = 0.4;
    double integral = 0.0;
    const double lo = -6.0, hi = 9.0, step = 1e-3;
    for (double t = lo; t <= hi; t += step) integral += weighted_kde(y, w, t, h) * step;
    CHECK(integral == doctest::Approx(1.0).epsilon(1e-6));
    // Value at a point from the Gaussian kernel directly.
    double direct = 0.0;
    for (int i = 0; i < 5; ++i) direct += w[i] * std::exp(-0.5 * std::pow((1.0 - y[i]) / h, 2)) / std::sqrt(2 * M_PI);
    CHECK(weighted_kde(y, w, 1.0, h) == doctest::Approx(direct / (w.sum() * h)).epsilon(1e-14));
    CHECK_THROWS_AS(weighted_kde(y, w, 0.0, 0.0), ConfigError);
}

TEST_CASE("Silverman bandwidth on a pinned fixture") {
    Vector y(10);
    for (int i = 0; i < 10; ++i) y[i] = i + 1;
    // SD (weight-normalized) is sqrt(8.25); IQR is 8 - 3 = 5, so the SD branch wins.
    CHECK(silverman_bandwidth(y, Vector::Ones(10)) ==
          doctest::Approx(0.9 * std::sqrt(8.25) * std::pow(10.0, -0.2)).epsilon(1e-14));
    // Heavy tails: the IQR branch wins.
    Vector t = y;
    t[9] = 1000.0;
    CHECK(silverman_bandwidth(t, Vector::Ones(10)) == doctest::Approx(0.9 * 5.0 / 1.34 * std::pow(10.0, -0.2)).epsilon(1e-14));
}

TEST_CASE("direct UQTE is the difference of weighted arm quantiles") {
    const Dataset ds = lognormal_sample(800, 3);
    const WeightSet ws = estimated(ds, WeightVariant::d_weighted);
    for (double tau : {0.25, 0.5, 0.75}) {
        const auto e = uqte_direct(ds, ws, tau);
        const Vector y1 = arm_outcome(ds, ws.arm(ArmSelector::treated()), OutcomeTransform::identity);
        const Vector y0 = arm_outcome(ds, ws.arm(ArmSelector::control()), OutcomeTransform::identity);
        const double q1 = enumerated_quantile(y1, ws.arm(ArmSelector::treated()), tau);
        const double q0 = enumerated_quantile(y0, ws.arm(ArmSelector::control()), tau);
        CHECK(e.value() == q1 - q0);
        CHECK_FALSE(e.degenerate);
    }
}

TEST_CASE("RIF UQTE equals the arm-wise influence-function correction") {
    const Dataset ds = lognormal_sample(900, 8);
    const WeightSet ws = estimated(ds, WeightVariant::d_weighted);
    RifConfig cfg;
    cfg.tau = 0.3;
    cfg.bandwidth = std::make_pair(0.15, 0.2);
    const auto e = uqte_rif(ds, ws, cfg);
    double oracle = 0.0;
    for (int g : {1, 0}) {
        const Vector w = ws.arm(ArmSelector{g});
        const Vector y = arm_outcome(ds, w, OutcomeTransform::identity);
        const double q = enumerated_quantile(y, w, cfg.tau);
        const double f = weighted_kde(y, w, q, g == 1 ? 0.2 : 0.15);
        const double term = q + (cfg.tau - weighted_cdf(y, w, q)) / f;
        oracle += g == 1 ? term : -term;
    }
    CHECK(e.value() == doctest::Approx(oracle).epsilon(1e-10));
    // With an intercept in the regression the fitted mean does not depend on the other regressors.
    cfg.columns = {"intercept"};
    CHECK(uqte_rif(ds, ws, cfg).value() == doctest::Approx(e.value()).epsilon(1e-10));
    // Close to the direct estimate.
    const auto direct = uqte_direct(ds, ws, cfg.tau);
    CHECK(std::abs(e.value() - direct.value()) <= 0.05 * std::abs(direct.metadata["quantile_treated"].get<double>()));

    cfg.bandwidth = std::make_pair(1e12, 1e12);
    CHECK_THROWS_AS(uqte_rif(ds, ws, cfg), InstabilityError);
}

TEST_CASE("degenerate quantiles are flagged") {
    const Dataset base = testsupport::synthetic(400, 13);
    Vector y = Vector::Zero(400);
    for (Eigen::Index i = 0; i < 400; i += 10) y[i] = 1.0;
    const Dataset ds(y, base.observed_mask(), base.treatments(), base.covariates().rightCols(2), {"x1", "x2"});
    const WeightSet ws = estimated(ds, WeightVariant::d_weighted);
    const auto e = uqte_direct(ds, ws, 0.5);
    CHECK(e.degenerate);
    CHECK(e.value() == 0.0);
    RifConfig cfg;
    cfg.bandwidth = std::make_pair(0.3, 0.3);
    CHECK(uqte_rif(ds, ws, cfg).degenerate);
}

TEST_CASE("pooled gaussian ATE equals the treatment coefficient") {
    const Dataset ds = testsupport::synthetic(600, 31, 1.7);
    const WeightSet ws = estimated(ds, WeightVariant::d_weighted);
    const auto e = ate_pooled(ds, ws, GlmFamily::gaussian_identity);
    CHECK(e.value() == doctest::Approx(e.metadata["eta"].get<double>()).epsilon(1e-12));
    CHECK(std::abs(e.value() - 1.7) < 0.3);
}

TEST_CASE("separate-slope ATE, contrasts and mismatches") {
    const Dataset ds = testsupport::synthetic(700, 2, 1.0);
    const WeightSet ws = estimated(ds, WeightVariant::d_weighted);
    const auto f1 = solve_weighted_ls(ds, ws, ArmSelector::treated());
    const auto f0 = solve_weighted_ls(ds, ws, ArmSelector::control());
    const auto ate = ate_separate(f1, f0, ds);
    const double oracle = ds.covariates().colwise().mean().dot(f1.theta - f0.theta);
    CHECK(ate.value() == doctest::Approx(oracle).epsilon(1e-12));
    const auto c = arm_contrast(ds, ws, 1, 0, SecondStepSpec{});
    CHECK(c.value() == doctest::Approx(ate.value()).epsilon(1e-12));
    const auto reversed = arm_contrast(ds, ws, 0, 1, SecondStepSpec{});
    CHECK(reversed.value() == doctest::Approx(-ate.value()).epsilon(1e-12));

    const auto q = solve_weighted_qr(ds, ws, ArmSelector::control(), 0.5);
    CHECK_THROWS_AS(ate_separate(f1, q, ds), ConfigError);
}

TEST_CASE("conditional quantile effects on a grid") {
    const Dataset ds = lognormal_sample(600, 17);
    const WeightSet ws = estimated(ds, WeightVariant::d_weighted);
    const auto l1 = solve_weighted_qr(ds, ws, ArmSelector::treated(), 0.5, {}, OutcomeTransform::log);
    const auto l0 = solve_weighted_qr(ds, ws, ArmSelector::control(), 0.5, {}, OutcomeTransform::log);
    Matrix grid(3, 3);
    grid << 1, -1, 1, 1, 0, 1, 1, 1, 1;
    const auto c = cqte(l1, l0, grid, &ds);
    for (Eigen::Index k = 0; k < 3; ++k) {
        CHECK(c.point[k] == doctest::Approx(std::exp(grid.row(k).dot(l1.theta)) - std::exp(grid.row(k).dot(l0.theta))));
    }
    CHECK_FALSE(c.extrapolated);
    CHECK_THROWS_AS(lp_cqte(l1, l0, grid), ConfigError);

    const auto q1 = solve_weighted_qr(ds, ws, ArmSelector::treated(), 0.5);
    const auto q0 = solve_weighted_qr(ds, ws, ArmSelector::control(), 0.5);
    Matrix far = grid;
    far(2, 1) = 50.0;
    const auto lp = lp_cqte(q1, q0, far, &ds);
    CHECK(lp.extrapolated);
    CHECK((lp.point - far * (q1.theta - q0.theta)).cwiseAbs().maxCoeff() == 0.0);
    const auto q25 = solve_weighted_qr(ds, ws, ArmSelector::control(), 0.25);
    CHECK_THROWS_AS(cqte(q1, q25, grid), ConfigError);
}
