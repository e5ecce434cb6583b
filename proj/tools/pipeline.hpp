#pragma once

#include <cstddef>
#include <cstdint>
#include <iterator>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dwm/binary_response.hpp"
#include "dwm/dataset.hpp"
#include "dwm/effects.hpp"
#include "dwm/simulation.hpp"
#include "dwm/weights.hpp"

namespace dwm::cli {

inline constexpr const char* kSoftwareVersion = "0.1.0";
inline constexpr const char* kSchemaVersion = "1.0";

enum class SeMode { none, correct_mean, misspecified_mean, bootstrap };
std::string to_string(SeMode mode);
SeMode parse_se_mode(const std::string& name);

/// Fully resolved plan of one invocation.
struct RunConfig {
    std::string command;

    // estimate
    std::string data;
    ColumnMap columns;
    std::string missing_token = "NA";
    int levels = 2;
    std::vector<std::string> propensity_columns;  // empty = intercept + all covariates
    LinkKind propensity_link = LinkKind::logit;
    std::vector<std::string> observation_columns;  // empty = intercept, W, covariates
    LinkKind observation_link = LinkKind::logit;
    std::vector<WeightVariant> variants{std::begin(kAllVariants), std::end(kAllVariants)};
    std::vector<std::string> estimands{"ate"};
    std::vector<double> taus{0.5};
    std::string mean_model = "ls";  // ls or glm:<family>
    std::vector<std::string> outcome_columns;
    std::optional<std::pair<double, double>> trim;
    SeMode se_mode = SeMode::none;
    std::size_t bootstrap_reps = 200;
    std::uint64_t seed = 42;
    unsigned threads = 0;
    std::string grid_column;  // empty = first covariate
    std::size_t grid_points = 21;
    std::string cqte_transform = "identity";
    std::string output = "results.json";
    std::string curves;

    // simulate / diagnose
    ScenarioConfig scenario;
    std::string out_dir;
    std::string run_dir;
    std::string reference_dir;

    nlohmann::json to_json() const;
    /// Throws ConfigError for an incomplete or contradictory plan.
    void validate() const;
};

/// Point estimates of one data set in a fixed order, plus per-run details.
struct EstimateRun {
    std::vector<EffectEstimate> effects;
    nlohmann::json details;
    Matrix grid;
};

/// `grid` fixes the CQTE grid (bootstrap replicates reuse the original one).
EstimateRun estimate_points(const Dataset& ds, const RunConfig& cfg, bool with_details, const Matrix* grid = nullptr);

struct EstimateOutput {
    nlohmann::json results;
    std::string curves_csv;
};
EstimateOutput cmd_estimate(const RunConfig& cfg);

struct SimulateOutput {
    nlohmann::json results;
    std::string sims_csv;
    std::string curves_csv;
};
SimulateOutput cmd_simulate(const RunConfig& cfg);

nlohmann::json cmd_diagnose(const RunConfig& cfg);

/// Parses arguments, runs the command, writes outputs atomically and returns
/// the process exit code. Errors go to `err` as a JSON object.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dwm::cli
