#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dwm/binary_response.hpp"
#include "dwm/dataset.hpp"
#include "dwm/mestimation.hpp"
#include "dwm/weights.hpp"

namespace dwm {

enum class DesignKind { ate_binary, qte_lognormal };
std::string to_string(DesignKind design);
DesignKind parse_design(const std::string& name);

/// Parameters of the two simulation designs. Covariates (x1, x2) and the
/// outcome errors are bivariate normal; treatment and observation follow
/// logistic latent indices.
struct DesignParameters {
    Vector covariate_mean;       // (x1, x2)
    Matrix covariate_cov;
    Matrix error_cov;            // (U0, U1)
    Vector theta_control;        // on (1, x1, x2)
    Vector theta_treated;
    Vector propensity;           // on (1, x1, x2)
    Vector observation;          // on (1, W, x1, x2)
};
DesignParameters design_parameters(DesignKind design);

/// Finite population with both potential outcomes and the true
/// probabilities, from stream 0 of the seed.
struct Population {
    DesignKind design = DesignKind::ate_binary;
    std::uint64_t seed = 0;
    Matrix covariates;  // N x 3 with intercept
    std::vector<int> treatment;
    std::vector<std::uint8_t> observed;
    Vector outcome_treated;
    Vector outcome_control;
    Vector propensity;   // true P(W = 1 | X)
    Vector observation;  // true P(S = 1 | X, W) at the realized W
    std::size_t size() const { return treatment.size(); }
};

Population generate_population(DesignKind design, std::uint64_t seed, std::size_t size = 1000000);

/// Without-replacement sample of n rows from stream 1 + rep. `rows` lists
/// the population rows drawn, in draw order.
struct Sample {
    Dataset data;
    std::vector<std::size_t> rows;
    Vector true_propensity;
    Vector true_observation;
};
Sample draw_sample(const Population& pop, std::size_t n, std::size_t rep);

/// Evaluation grid: x1 evenly spaced over mean +/- 2 SD, x2 at its mean.
Matrix evaluation_grid(DesignKind design, std::size_t points = 21);

/// Population quantities the estimators are judged against.
struct PopulationTruths {
    double treated_share = 0.0;
    double observed_share = 0.0;
    double ate = 0.0;
    double r2_control = 0.0;
    double r2_treated = 0.0;
    std::vector<double> taus;
    std::vector<double> quantile_treated;
    std::vector<double> quantile_control;
    std::vector<Vector> lp_treated;  // population linear quantile fits per tau
    std::vector<Vector> lp_control;
    Matrix grid;
    std::vector<Vector> lp_curve;    // per tau, over the grid
    std::vector<Vector> cqte_curve;  // true conditional quantile effect, per tau
    nlohmann::json to_json() const;
};

PopulationTruths compute_truths(const Population& pop, const std::vector<double>& taus, bool linear_projections);

/// Estimation choices of one cell of the simulation grid.
struct CellSpec {
    std::string id;
    DesignKind design = DesignKind::ate_binary;
    int case_number = 1;
    std::vector<std::string> propensity_columns;
    LinkKind propensity_link = LinkKind::logit;
    std::vector<std::string> observation_columns;
    LinkKind observation_link = LinkKind::logit;
    SecondStepSpec second_step;
    std::vector<double> taus;  // quantile designs only

    nlohmann::json to_json() const;
    static CellSpec from_json(const nlohmann::json& j);
};

/// All cells, keyed "ate-case1".."qte-case3".
const std::vector<CellSpec>& scenario_registry();
/// Throws ConfigError listing the registry for an unknown id.
const CellSpec& find_scenario(const std::string& id);

struct ScenarioConfig {
    std::string scenario = "ate-case1";
    std::size_t n = 5000;
    std::size_t reps = 500;
    std::uint64_t seed = 42;
    std::size_t population_size = 1000000;
    std::vector<double> taus;  // empty = the cell's default
    unsigned threads = 0;
    std::size_t grid_points = 21;
    double max_failure_share = 0.05;

    nlohmann::json to_json() const;
    /// Identifies runs whose replicates are paired draw-by-draw.
    std::string registry_key() const;
};

/// One per-replicate value. `grid_index` is -1 for scalar estimands.
struct McRecord {
    std::size_t rep = 0;
    WeightVariant variant = WeightVariant::d_weighted;
    std::string estimand;
    double tau = std::numeric_limits<double>::quiet_NaN();
    int grid_index = -1;
    double value = 0.0;
};

struct McSummary {
    WeightVariant variant;
    std::string estimand;
    double tau;
    int grid_index;
    std::size_t count = 0;
    double mean = 0.0;
    double sd = 0.0;
    double mc_se = 0.0;
    std::optional<double> truth;
};

struct McResult {
    ScenarioConfig config;
    CellSpec cell;
    PopulationTruths truths;
    std::vector<McRecord> records;  // ordered by replicate, then as produced
    std::vector<std::size_t> failed_reps;
    std::size_t successful_reps = 0;

    /// Values of one series in replicate order.
    std::vector<double> series(WeightVariant variant, const std::string& estimand, double tau = std::numeric_limits<double>::quiet_NaN(),
                               int grid_index = -1) const;
    std::vector<McSummary> summarize() const;
};

/// Population (cached per design, seed and size) shared by runs.
std::shared_ptr<const Population> cached_population(DesignKind design, std::uint64_t seed, std::size_t size);

McResult run_scenario(const ScenarioConfig& cfg);

/// Per-replicate scalar estimates as CSV: rep,variant,estimand,tau,value.
std::string sims_csv(const McResult& result);
/// Grid curves averaged over replicates:
/// estimand,tau,x1,truth,unweighted,ps_weighted,d_weighted.
std::string curves_csv(const McResult& result);
nlohmann::json summary_json(const McResult& result);

}  // namespace dwm
