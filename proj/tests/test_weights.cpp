#include "doctest.h"
#include "dwm/errors.hpp"
#include "dwm/weights.hpp"
#include "support.hpp"

using namespace dwm;

namespace {

Dataset four_rows() {
    Matrix x(4, 1);
    x << 0.1, 0.2, 0.3, 0.4;
    return Dataset(Vector::Constant(4, 1.0), {1, 0, 1, 1}, {1, 1, 0, 1}, x, {"x"});
}

}  // namespace

TEST_CASE("composite weight formula") {
    const Dataset ds = four_rows();
    Vector g(4), r(4);
    g << 0.25, 0.5, 0.4, 0.5;
    r << 0.5, 0.5, 0.8, 0.01;
    const WeightSet ws = compute_weights_known(g, r, ds, WeightVariant::d_weighted);
    CHECK(ws.by_level[1][0] == doctest::Approx(8.0));
    CHECK(ws.by_level[0][0] == 0.0);
    CHECK(ws.by_level[1][1] == 0.0);  // S = 0
    CHECK(ws.by_level[0][1] == 0.0);
    CHECK(ws.by_level[0][2] == doctest::Approx(1.0 / (0.8 * 0.6)));
    CHECK(ws.by_level[1][2] == 0.0);

    const WeightSet ps = compute_weights_known(g, r, ds, WeightVariant::ps_weighted);
    CHECK(ps.by_level[1][0] == doctest::Approx(4.0));
    const WeightSet un = compute_weights_known(g, r, ds, WeightVariant::unweighted);
    CHECK(un.by_level[1][0] == 1.0);
    CHECK(un.by_level[1][3] == 1.0);
    CHECK(un.by_level[0][2] == 1.0);
}

TEST_CASE("clipped probabilities are counted") {
    const Dataset ds = four_rows();
    Vector g(4), r(4);
    g << 0.25, 0.5, 1e-9, 0.5;
    r << 0.5, 0.5, 0.8, 0.5;
    const WeightSet ws = compute_weights_known(g, r, ds, WeightVariant::d_weighted);
    CHECK(ws.clipped == 1);
    CHECK(std::isfinite(ws.by_level[0][2]));
}

TEST_CASE("trimming on the composite probability") {
    const Dataset ds = four_rows();
    Vector g(4), r(4);
    g << 0.25, 0.5, 0.4, 0.5;
    r << 0.5, 0.5, 0.8, 0.02;
    const WeightSet ws = compute_weights_known(g, r, ds, WeightVariant::d_weighted);

    const WeightSet same = trim(ws, ds, 0.0, 1.0);
    CHECK(same.kept() == 4);
    CHECK(same.arm(ArmSelector::treated()) == ws.by_level[1]);

    // Row 3 has composite probability 0.02 * 0.5 = 0.01.
    const WeightSet cut = trim(ws, ds, 0.03, 0.8);
    CHECK(cut.kept() == 3);
    CHECK_FALSE(cut.keep[3]);
    CHECK(cut.arm(ArmSelector::treated())[3] == 0.0);
    CHECK(trim_report(cut)["dropped"] == 1);

    CHECK_THROWS_AS(trim(ws, ds, 0.9, 1.0), InfeasibleError);
    CHECK_THROWS_AS(trim(ws, ds, 0.5, 0.4), ConfigError);
}

TEST_CASE("estimated weights are nonnegative, finite and zero off-arm") {
    const Dataset ds = testsupport::synthetic(1000, 4);
    const auto ps = fit_propensity(ds, {}, LinkKind::logit);
    const auto miss = fit_missingness(ds, {}, LinkKind::logit);
    for (auto v : kAllVariants) {
        const WeightSet ws = compute_weights(ps, miss, ds, v);
        for (std::size_t i = 0; i < ds.rows(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            const double w1 = ws.by_level[1][r], w0 = ws.by_level[0][r];
            CHECK(w1 >= 0.0);
            CHECK(w0 >= 0.0);
            CHECK(std::isfinite(w1 + w0));
            if (!ds.observed(i) || ds.treatment(i) == 0) CHECK(w1 == 0.0);
            if (!ds.observed(i) || ds.treatment(i) == 1) CHECK(w0 == 0.0);
        }
    }
}

TEST_CASE("multivalued weights use the per-level propensity") {
    Matrix x(9, 1);
    x << -1, -0.5, 0, 0.5, 1, -0.2, 0.3, 0.8, -0.9;
    const std::vector<int> lv{0, 1, 2, 0, 1, 2, 0, 1, 2};
    const Dataset ds(Vector::Constant(9, 1.0), {1, 1, 1, 1, 0, 1, 1, 1, 1}, lv, x, {"x"}, 3);
    const auto rho = fit_multinomial_propensity(ds, {"intercept"});
    Vector r = Vector::Constant(9, 0.5);
    BinaryFit miss;
    miss.fitted_probs = r;
    const WeightSet ws = compute_weights(rho, miss, ds, WeightVariant::d_weighted);
    REQUIRE(ws.levels() == 3);
    CHECK(ws.by_level[2][2] == doctest::Approx(1.0 / (0.5 * (1.0 / 3.0))));
    CHECK(ws.by_level[1][4] == 0.0);
}
