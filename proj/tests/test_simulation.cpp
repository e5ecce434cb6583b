#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"

#include "dwm/errors.hpp"
#include "dwm/simulation.hpp"

using namespace dwm;

TEST_CASE("population generation is deterministic per seed") {
    const auto a = generate_population(DesignKind::ate_binary, 42, 20000);
    const auto b = generate_population(DesignKind::ate_binary, 42, 20000);
    const auto c = generate_population(DesignKind::ate_binary, 43, 20000);
    CHECK(a.covariates == b.covariates);
    CHECK(a.outcome_treated == b.outcome_treated);
    CHECK(a.treatment == b.treatment);
    CHECK(a.covariates != c.covariates);
    CHECK((a.covariates.col(0).array() == 1.0).all());
}

TEST_CASE("population covariate moments follow the design") {
    const auto pop = generate_population(DesignKind::qte_lognormal, 7, 400000);
    const Matrix x = pop.covariates.rightCols(2);
    const RowVector mean = x.colwise().mean();
    const Matrix centred = x.rowwise() - mean;
    const Matrix cov = centred.transpose() * centred / static_cast<double>(x.rows());
    CHECK(mean[0] == doctest::Approx(1.0).epsilon(0.01));
    CHECK(mean[1] == doctest::Approx(2.0).epsilon(0.01));
    CHECK(cov(0, 0) == doctest::Approx(3.0).epsilon(0.02));
    CHECK(cov(1, 1) == doctest::Approx(2.0).epsilon(0.02));
    CHECK(std::abs(cov(0, 1) - 0.2) < 0.02);
    CHECK((pop.outcome_treated.array() > 0.0).all());
}

TEST_CASE("population shares and ATE at one million rows") {
    const auto pop = cached_population(DesignKind::ate_binary, 42, 1000000);
    const auto t = compute_truths(*pop, {}, false);
    CHECK(std::abs(t.treated_share - 0.41) <= 0.005);
    CHECK(std::abs(t.observed_share - 0.38) <= 0.005);
    CHECK(std::abs(t.ate - 0.096) <= 0.003);
}

TEST_CASE("samples are without replacement and reproducible") {
    const auto pop = generate_population(DesignKind::ate_binary, 3, 5000);
    const auto s1 = draw_sample(pop, 1000, 0);
    const auto s2 = draw_sample(pop, 1000, 0);
    const auto s3 = draw_sample(pop, 1000, 1);
    CHECK(s1.rows == s2.rows);
    CHECK(s1.rows != s3.rows);
    CHECK(std::set<std::size_t>(s1.rows.begin(), s1.rows.end()).size() == 1000);
    for (std::size_t k = 0; k < 1000; k += 37) {
        const auto r = static_cast<Eigen::Index>(s1.rows[k]);
        CHECK(s1.data.treatment(k) == pop.treatment[s1.rows[k]]);
        CHECK(s1.data.covariates()(static_cast<Eigen::Index>(k), 1) == pop.covariates(r, 1));
        if (s1.data.observed(k)) {
            CHECK(s1.data.outcome(k) == (pop.treatment[s1.rows[k]] ? pop.outcome_treated[r] : pop.outcome_control[r]));
        }
    }
    // The full population drawn as a sample is a permutation.
    const auto all = draw_sample(pop, 5000, 2);
    CHECK(std::set<std::size_t>(all.rows.begin(), all.rows.end()).size() == 5000);
    CHECK_THROWS_AS(draw_sample(pop, 5001, 0), ConfigError);
}

TEST_CASE("true-probability weights average one per arm") {
    const auto pop = cached_population(DesignKind::ate_binary, 42, 1000000);
    const auto s = draw_sample(*pop, 200000, 0);
    const WeightSet ws = compute_weights_known(s.true_propensity, s.true_observation, s.data, WeightVariant::d_weighted);
    for (int g : {0, 1}) {
        const Vector w = ws.arm(ArmSelector{g});
        const double mean = w.mean();
        const double se = std::sqrt((w.array() - mean).square().mean() / static_cast<double>(w.size()));
        CHECK(std::abs(mean - 1.0) <= 5.0 * se);
    }
}

TEST_CASE("truth curves follow the lognormal quantile formula") {
    const auto pop = generate_population(DesignKind::qte_lognormal, 1, 20000);
    const auto t = compute_truths(pop, {0.25, 0.5}, true);
    const Matrix grid = evaluation_grid(DesignKind::qte_lognormal);
    CHECK(grid.rows() == 21);
    CHECK(grid(0, 1) == doctest::Approx(1.0 - 2.0 * std::sqrt(3.0)));
    CHECK(grid(20, 1) == doctest::Approx(1.0 + 2.0 * std::sqrt(3.0)));
    CHECK((grid.col(2).array() == 2.0).all());
    const auto par = design_parameters(DesignKind::qte_lognormal);
    const double z = -0.6744897501960817;
    for (Eigen::Index k = 0; k < grid.rows(); ++k) {
        const double truth = std::exp(grid.row(k).dot(par.theta_treated) + z) - std::exp(grid.row(k).dot(par.theta_control) + z);
        CHECK(t.cqte_curve[0][k] == doctest::Approx(truth).epsilon(1e-12));
    }
    CHECK(t.lp_curve.size() == 2);
    CHECK(t.quantile_treated[0] < t.quantile_treated[1]);
}

TEST_CASE("scenario registry round-trips through JSON") {
    const auto& reg = scenario_registry();
    CHECK(reg.size() == 6);
    for (const auto& cell : reg) {
        const auto back = CellSpec::from_json(cell.to_json());
        CHECK(back.to_json() == cell.to_json());
        CHECK(&find_scenario(cell.id) == &cell);
    }
    CHECK_THROWS_AS(find_scenario("ate-case9"), ConfigError);
    CHECK_THROWS_AS(CellSpec::from_json(nlohmann::json{{"id", "x"}}), ConfigError);
}

TEST_CASE("scenario runs are independent of the thread count") {
    ScenarioConfig cfg;
    cfg.scenario = "ate-case1";
    cfg.n = 600;
    cfg.reps = 6;
    cfg.population_size = 60000;
    cfg.threads = 1;
    const auto a = run_scenario(cfg);
    cfg.threads = 3;
    const auto b = run_scenario(cfg);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].rep == b.records[i].rep);
        CHECK(a.records[i].estimand == b.records[i].estimand);
        CHECK(a.records[i].value == b.records[i].value);
    }
    CHECK(a.successful_reps == 6);
    CHECK(sims_csv(a) == sims_csv(b));
    const auto ate = a.series(WeightVariant::d_weighted, "ate");
    CHECK(ate.size() == 6);
}

TEST_CASE("simulation outputs follow the documented layouts") {
    ScenarioConfig cfg;
    cfg.scenario = "qte-case1";
    cfg.n = 500;
    cfg.reps = 3;
    cfg.population_size = 30000;
    cfg.taus = {0.5};
    cfg.threads = 1;
    cfg.grid_points = 5;
    const auto r = run_scenario(cfg);
    const std::string sims = sims_csv(r);
    CHECK(sims.rfind("rep,variant,estimand,tau,value\n", 0) == 0);
    CHECK(sims.find(",d_weighted,uqte_rif,0.5,") != std::string::npos);
    const std::string curves = curves_csv(r);
    CHECK(curves.rfind("estimand,tau,x1,truth,unweighted,ps_weighted,d_weighted\n", 0) == 0);
    std::istringstream lines(curves);
    std::string line;
    int count = 0;
    while (std::getline(lines, line)) ++count;
    CHECK(count == 1 + 2 * 5);  // cqte and lp_cqte at one tau over five points
    const auto j = summary_json(r);
    CHECK(j["successful_reps"] == 3);
    CHECK(j["truths"]["taus"].size() == 1);
    CHECK(r.truths.cqte_curve[0].size() == 5);
}
