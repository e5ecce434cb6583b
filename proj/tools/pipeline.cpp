#include "pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"

#include "dwm/errors.hpp"
#include "dwm/inference.hpp"
#include "dwm/io_util.hpp"
#include "dwm/mestimation.hpp"

namespace dwm::cli {

std::string to_string(SeMode mode) {
    switch (mode) {
        case SeMode::none: return "none";
        case SeMode::correct_mean: return "correct_mean";
        case SeMode::misspecified_mean: return "misspecified_mean";
        case SeMode::bootstrap: return "bootstrap";
    }
    return "none";
}

SeMode parse_se_mode(const std::string& name) {
    if (name == "none") return SeMode::none;
    if (name == "correct_mean") return SeMode::correct_mean;
    if (name == "misspecified_mean") return SeMode::misspecified_mean;
    if (name == "bootstrap") return SeMode::bootstrap;
    throw ConfigError("unknown --se-mode '" + name + "' (none, correct_mean, misspecified_mean, bootstrap)");
}

namespace {

const std::vector<std::string> kEstimands{"ate", "ate_pooled", "uqte", "uqte_rif", "cqte", "lp_cqte"};

bool grid_estimand(const std::string& e) { return e == "cqte" || e == "lp_cqte"; }

ObjectiveKind mean_objective(const std::string& model) {
    if (model == "ls") return ObjectiveKind::least_squares();
    if (model.rfind("glm:", 0) == 0) return ObjectiveKind::glm(parse_family(model.substr(4)));
    throw ConfigError("unknown --mean-model '" + model + "' (ls or glm:<family>)");
}

OutcomeTransform parse_transform(const std::string& name) {
    if (name == "identity") return OutcomeTransform::identity;
    if (name == "log") return OutcomeTransform::log;
    throw ConfigError("unknown --cqte-transform '" + name + "' (identity or log)");
}

nlohmann::json optional_pair(const std::optional<std::pair<double, double>>& p) {
    return p ? nlohmann::json::array({p->first, p->second}) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["command"] = command;
    if (command == "estimate") {
        j["data"] = data;
        j["columns"] = {{"outcome", columns.outcome},
                        {"treatment", columns.treatment},
                        {"observed", columns.observed},
                        {"covariates", columns.covariates}};
        j["missing_token"] = missing_token;
        j["levels"] = levels;
        j["propensity"] = {{"link", dwm::to_string(propensity_link)}, {"columns", propensity_columns}};
        j["observation"] = {{"link", dwm::to_string(observation_link)}, {"columns", observation_columns}};
        std::vector<std::string> v;
        for (auto x : variants) v.push_back(dwm::to_string(x));
        j["variants"] = v;
        j["estimands"] = estimands;
        j["taus"] = taus;
        j["mean_model"] = mean_model;
        j["outcome_columns"] = outcome_columns;
        j["trim"] = optional_pair(trim);
        j["se_mode"] = to_string(se_mode);
        j["bootstrap_reps"] = bootstrap_reps;
        j["seed"] = seed;
        j["threads"] = threads;
        j["grid_column"] = grid_column;
        j["grid_points"] = grid_points;
        j["cqte_transform"] = cqte_transform;
        j["output"] = output;
        j["curves"] = curves;
    } else if (command == "simulate") {
        j["scenario"] = scenario.to_json();
        j["out_dir"] = out_dir;
    } else {
        if (run_dir.empty()) {
            j["scenario"] = scenario.to_json();
        } else {
            j["run"] = run_dir;
            j["reference_run"] = reference_dir.empty() ? run_dir : reference_dir;
        }
        j["output"] = output;
    }
    return j;
}

void RunConfig::validate() const {
    if (command == "estimate") {
        if (data.empty()) throw ConfigError("--data is required");
        if (columns.outcome.empty() || columns.treatment.empty()) throw ConfigError("--outcome and --treatment are required");
        if (columns.covariates.empty()) throw ConfigError("--covariates is required");
        if (levels < 2) throw ConfigError("--levels must be at least 2");
        if (variants.empty()) throw ConfigError("--variants is empty");
        if (estimands.empty()) throw ConfigError("--estimands is empty");
        for (const auto& e : estimands) {
            if (std::find(kEstimands.begin(), kEstimands.end(), e) == kEstimands.end()) {
                throw ConfigError("unknown estimand '" + e + "' (ate, ate_pooled, uqte, uqte_rif, cqte, lp_cqte)");
            }
            if (levels > 2 && e != "ate") throw ConfigError("only 'ate' contrasts are available for multivalued treatments");
        }
        for (double t : taus) {
            if (!(t > 0.0 && t < 1.0)) throw ConfigError("every tau must lie strictly inside (0, 1)");
        }
        mean_objective(mean_model);
        parse_transform(cqte_transform);
        if (trim && !(trim->first >= 0.0 && trim->first < trim->second && trim->second <= 1.0)) {
            throw ConfigError("--trim needs 0 <= lo < hi <= 1");
        }
        if (levels > 2 && (se_mode == SeMode::correct_mean || se_mode == SeMode::misspecified_mean)) {
            throw ConfigError("analytic SEs cover binary treatments; use --se-mode bootstrap");
        }
        if (levels > 2 && propensity_link != LinkKind::logit) {
            throw ConfigError("multivalued treatments use a multinomial logit propensity");
        }
        if (se_mode == SeMode::bootstrap && bootstrap_reps < 2) throw ConfigError("--bootstrap-reps must be at least 2");
        if (grid_points < 2) throw ConfigError("--grid-points must be at least 2");
        if (output.empty()) throw ConfigError("--output is required");
    } else if (command == "simulate") {
        find_scenario(scenario.scenario);
        if (out_dir.empty()) throw ConfigError("--out-dir is required");
    } else if (command == "diagnose") {
        if (run_dir.empty()) find_scenario(scenario.scenario);
        if (!reference_dir.empty() && run_dir.empty()) throw ConfigError("--reference-run needs --run");
    } else {
        throw ConfigError("unknown command '" + command + "'");
    }
}

// ---------------------------------------------------------------------------

namespace {

Matrix build_grid(const Dataset& ds, const RunConfig& cfg) {
    Design x = ds.covariate_design();
    if (!cfg.outcome_columns.empty()) x = x.subset(cfg.outcome_columns);
    const std::string column = cfg.grid_column.empty() ? cfg.columns.covariates.front() : cfg.grid_column;
    const auto it = std::find(x.names.begin(), x.names.end(), column);
    if (it == x.names.end()) throw ConfigError("grid column '" + column + "' is not a second-step regressor");
    const auto gc = static_cast<Eigen::Index>(it - x.names.begin());
    const RowVector mean = x.values.colwise().mean();
    const double sd = std::sqrt((x.values.col(gc).array() - mean[gc]).square().mean());
    Matrix grid(static_cast<Eigen::Index>(cfg.grid_points), x.values.cols());
    for (Eigen::Index k = 0; k < grid.rows(); ++k) {
        grid.row(k) = mean;
        grid(k, gc) = mean[gc] - 2.0 * sd + 4.0 * sd * static_cast<double>(k) / static_cast<double>(grid.rows() - 1);
    }
    return grid;
}

Eigen::Index grid_column_index(const Dataset& ds, const RunConfig& cfg) {
    Design x = ds.covariate_design();
    if (!cfg.outcome_columns.empty()) x = x.subset(cfg.outcome_columns);
    const std::string column = cfg.grid_column.empty() ? cfg.columns.covariates.front() : cfg.grid_column;
    return static_cast<Eigen::Index>(std::find(x.names.begin(), x.names.end(), column) - x.names.begin());
}

}  // namespace

EstimateRun estimate_points(const Dataset& ds, const RunConfig& cfg, bool with_details, const Matrix* grid_in) {
    EstimateRun run;
    run.grid = grid_in ? *grid_in : build_grid(ds, cfg);
    const bool binary = ds.levels() == 2;
    const BinaryFit miss = fit_missingness(ds, cfg.observation_columns, cfg.observation_link);
    std::optional<BinaryFit> ps;
    std::optional<MultinomialFit> mps;
    if (binary) {
        ps = fit_propensity(ds, cfg.propensity_columns, cfg.propensity_link);
    } else {
        mps = fit_multinomial_propensity(ds, cfg.propensity_columns);
    }
    if (with_details) {
        run.details["first_steps"]["observation"] = to_json(miss);
        if (ps) run.details["first_steps"]["propensity"] = to_json(*ps);
        if (mps) {
            run.details["first_steps"]["propensity"] = {{"link", "multinomial_logit"},
                                                        {"columns", mps->columns},
                                                        {"converged", mps->converged},
                                                        {"iterations", mps->iterations}};
        }
        run.details["fits"] = nlohmann::json::array();
    }

    SecondStepSpec mean_spec{mean_objective(cfg.mean_model), cfg.outcome_columns, OutcomeTransform::identity};
    const OutcomeTransform qtransform = parse_transform(cfg.cqte_transform);

    for (WeightVariant v : cfg.variants) {
        WeightSet ws = binary ? compute_weights(*ps, miss, ds, v) : compute_weights(*mps, miss, ds, v);
        if (cfg.trim) ws = trim(ws, ds, cfg.trim->first, cfg.trim->second);
        if (with_details && v == cfg.variants.front()) run.details["trim"] = trim_report(ws);

        auto add = [&](EffectEstimate e) {
            e.variant = v;
            run.effects.push_back(std::move(e));
        };
        auto record_fit = [&](const MEstimateFit& f) {
            if (!with_details) return;
            auto j = to_json(f);
            j["variant"] = dwm::to_string(v);
            run.details["fits"].push_back(j);
        };

        for (const auto& estimand : cfg.estimands) {
            if (estimand == "ate" && binary) {
                const auto f1 = solve_second_step(ds, ws, ArmSelector::treated(), mean_spec);
                const auto f0 = solve_second_step(ds, ws, ArmSelector::control(), mean_spec);
                record_fit(f1);
                record_fit(f0);
                EffectEstimate e = ate_separate(f1, f0, ds, ws.keep);
                e.estimand = "ate";
                if (with_details && (cfg.se_mode == SeMode::correct_mean || cfg.se_mode == SeMode::misspecified_mean)) {
                    const auto mode =
                        cfg.se_mode == SeMode::correct_mean ? MeanMode::correct_mean : MeanMode::misspecified_mean;
                    const auto av = ate_variance(f1, f0, ds, ws.keep, first_step_scores(v, *ps, miss), mode);
                    e.se = av.se();
                    e.metadata["projection_gap"] = {{"treated", av.treated.projection_gap()},
                                                    {"control", av.control.projection_gap()}};
                }
                add(e);
            } else if (estimand == "ate") {
                for (int g = 1; g < ds.levels(); ++g) add(arm_contrast(ds, ws, g, 0, mean_spec));
            } else if (estimand == "ate_pooled") {
                const auto family = mean_spec.objective.kind == ObjectiveKind::Kind::glm ? mean_spec.objective.family
                                                                                         : GlmFamily::gaussian_identity;
                add(ate_pooled(ds, ws, family, cfg.outcome_columns));
            } else {
                for (double tau : cfg.taus) {
                    if (estimand == "uqte") {
                        auto e = uqte_direct(ds, ws, tau);
                        e.estimand = "uqte";
                        add(e);
                    } else if (estimand == "uqte_rif") {
                        RifConfig rc;
                        rc.tau = tau;
                        rc.columns = cfg.outcome_columns;
                        add(uqte_rif(ds, ws, rc));
                    } else {
                        SecondStepSpec qs{ObjectiveKind::quantile(tau), cfg.outcome_columns,
                                          estimand == "cqte" ? qtransform : OutcomeTransform::identity};
                        const auto f1 = solve_second_step(ds, ws, ArmSelector::treated(), qs);
                        const auto f0 = solve_second_step(ds, ws, ArmSelector::control(), qs);
                        record_fit(f1);
                        record_fit(f0);
                        add(estimand == "cqte" ? cqte(f1, f0, run.grid, &ds) : lp_cqte(f1, f0, run.grid, &ds));
                    }
                }
            }
        }
    }
    return run;
}

namespace {

Vector stack_points(const std::vector<EffectEstimate>& effects) {
    Eigen::Index size = 0;
    for (const auto& e : effects) size += e.point.size();
    Vector out(size);
    Eigen::Index at = 0;
    for (const auto& e : effects) {
        out.segment(at, e.point.size()) = e.point;
        at += e.point.size();
    }
    return out;
}

std::string fmt(double v) {
    if (std::isnan(v)) return "";
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

}  // namespace

EstimateOutput cmd_estimate(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = load_csv(cfg.data, cfg.columns, cfg.missing_token, cfg.levels);
    EstimateRun run = estimate_points(ds, cfg, true, nullptr);

    nlohmann::json boot = nullptr;
    if (cfg.se_mode == SeMode::bootstrap) {
        const Matrix grid = run.grid;
        const std::size_t dim = static_cast<std::size_t>(stack_points(run.effects).size());
        const Statistic stat = [&cfg, &grid, dim](const Dataset& d) {
            const Vector v = stack_points(estimate_points(d, cfg, false, &grid).effects);
            if (static_cast<std::size_t>(v.size()) != dim) throw ConsistencyError("replicate produced a different estimate set");
            return v;
        };
        BootstrapOptions opt;
        opt.replications = cfg.bootstrap_reps;
        opt.seed = cfg.seed;
        opt.threads = cfg.threads;
        const auto res = pairs_bootstrap(ds, stat, opt);
        Eigen::Index at = 0;
        for (auto& e : run.effects) {
            if (e.point.size() == 1) {
                e.se = res.variance.se(at);
            } else {
                std::vector<double> se;
                for (Eigen::Index k = 0; k < e.point.size(); ++k) se.push_back(res.variance.se(at + k));
                e.metadata["se_curve"] = se;
            }
            at += e.point.size();
        }
        boot = {{"replications", res.variance.replications}, {"failed", res.failed.size()}};
    }

    EstimateOutput out;
    nlohmann::json& j = out.results;
    j["schema_version"] = kSchemaVersion;
    j["version"] = kSoftwareVersion;
    j["command"] = "estimate";
    j["config"] = cfg.to_json();
    j["data_summary"] = summarize(ds);
    j["first_steps"] = run.details["first_steps"];
    j["trim"] = run.details.contains("trim") ? run.details["trim"] : nlohmann::json(nullptr);
    j["second_steps"] = run.details["fits"];
    j["bootstrap"] = boot;
    nlohmann::json estimates = nlohmann::json::array();
    for (const auto& e : run.effects) {
        auto ej = e.to_json();
        ej["se_mode"] = to_string(cfg.se_mode);
        if (e.se) {
            ej["ci95"] = {e.value() - 1.959963984540054 * *e.se, e.value() + 1.959963984540054 * *e.se};
        } else if (cfg.se_mode != SeMode::none && e.point.size() == 1) {
            ej["se_note"] = "analytic standard errors cover the separate-slopes ATE; use --se-mode bootstrap";
        }
        estimates.push_back(ej);
    }
    j["estimates"] = estimates;

    // Grid curves, one row per (estimand, tau, grid point).
    std::ostringstream curves;
    curves << "estimand,tau,x1,truth,unweighted,ps_weighted,d_weighted\n";
    const Eigen::Index gc = grid_column_index(ds, cfg);
    std::map<std::pair<std::string, double>, std::array<const EffectEstimate*, 3>> rows;
    std::vector<std::pair<std::string, double>> order;
    for (const auto& e : run.effects) {
        if (!grid_estimand(e.estimand)) continue;
        const auto key = std::make_pair(e.estimand, e.tau);
        if (!rows.count(key)) {
            rows[key] = {nullptr, nullptr, nullptr};
            order.push_back(key);
        }
        rows[key][static_cast<int>(e.variant)] = &e;
    }
    for (const auto& key : order) {
        for (Eigen::Index k = 0; k < run.grid.rows(); ++k) {
            curves << key.first << ',' << fmt(key.second) << ',' << fmt(run.grid(k, gc)) << ',';
            for (int v = 0; v < 3; ++v) {
                curves << ',';
                if (rows[key][v]) curves << fmt(rows[key][v]->point[k]);
            }
            curves << '\n';
        }
    }
    out.curves_csv = curves.str();
    return out;
}

SimulateOutput cmd_simulate(const RunConfig& cfg) {
    cfg.validate();
    const McResult r = run_scenario(cfg.scenario);
    SimulateOutput out;
    out.results = summary_json(r);
    out.results["schema_version"] = kSchemaVersion;
    out.results["version"] = kSoftwareVersion;
    out.results["command"] = "simulate";
    out.results["config"] = cfg.to_json();
    out.results["registry"] = r.config.registry_key();
    out.sims_csv = sims_csv(r);
    out.curves_csv = curves_csv(r);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

/// Per-replicate series of a simulation run, keyed by (variant, estimand).
struct RunSeries {
    std::string registry;
    std::map<std::pair<std::string, std::string>, std::vector<double>> values;

    PairedSeries get(const std::string& variant, const std::string& estimand) const {
        const auto it = values.find({variant, estimand});
        if (it == values.end()) throw SchemaError("run has no series " + variant + "/" + estimand);
        return {registry, it->second};
    }
    std::vector<std::string> estimands_with_prefix(const std::string& variant, const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [key, v] : values) {
            if (key.first == variant && key.second.rfind(prefix, 0) == 0) out.push_back(key.second);
        }
        return out;
    }
};

RunSeries series_from_result(const McResult& r) {
    RunSeries s;
    s.registry = r.config.registry_key();
    for (const auto& rec : r.records) {
        if (rec.grid_index >= 0 || !std::isnan(rec.tau)) continue;
        s.values[{dwm::to_string(rec.variant), rec.estimand}].push_back(rec.value);
    }
    return s;
}

RunSeries series_from_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path results = fs::path(dir) / "results.json";
    const fs::path sims = fs::path(dir) / "sims.csv";
    std::ifstream rj(results);
    if (!rj) throw ConfigError("cannot read " + results.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(rj);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(results.string() + ": " + e.what());
    }
    if (!j.contains("schema_version") || j["schema_version"] != kSchemaVersion) {
        throw SchemaError(results.string() + ": unsupported schema_version");
    }
    if (!j.contains("registry")) throw SchemaError(results.string() + ": not a simulation run");
    RunSeries s;
    s.registry = j["registry"].get<std::string>();
    std::ifstream in(sims);
    if (!in) throw ConfigError("cannot read " + sims.string());
    std::string line;
    std::getline(in, line);
    if (line != "rep,variant,estimand,tau,value") throw SchemaError(sims.string() + ": unexpected header");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 5) throw SchemaError(sims.string() + ": line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
        if (!f[3].empty()) continue;
        try {
            s.values[{f[1], f[2]}].push_back(std::stod(f[4]));
        } catch (const std::exception&) {
            throw SchemaError(sims.string() + ": line " + std::to_string(lineno) + " has a non-numeric value");
        }
    }
    return s;
}

nlohmann::json diagnose_series(const RunSeries& run, const RunSeries& reference) {
    EfficiencyInput in;
    const std::string dw = dwm::to_string(WeightVariant::d_weighted);
    for (const std::string prefix : {"theta_treated_known_", "theta_control_known_"}) {
        for (const auto& known : reference.estimands_with_prefix(dw, prefix)) {
            const std::string estimated = prefix.substr(0, prefix.size() - 6) + known.substr(prefix.size());
            in.weight_comparisons.emplace_back(run.get(dw, estimated), reference.get(dw, known));
            in.weight_comparison_names.push_back(estimated);
        }
    }
    in.weight_comparisons.emplace_back(run.get(dw, "ate"), reference.get(dw, "ate_known_weights"));
    in.weight_comparison_names.push_back("ate");
    if (in.weight_comparisons.size() == 1) throw SchemaError("reference run carries no known-weight estimates");
    in.weighting_comparison = {run.get("unweighted", "ate"), run.get(dw, "ate")};
    for (const auto& [key, values] : run.values) {
        if (key.second.rfind("projection_gap_", 0) == 0) in.projection_gaps.insert(in.projection_gaps.end(), values.begin(), values.end());
    }
    nlohmann::json report = efficiency_report(in);
    report["registry"] = run.registry;
    report["reference_registry"] = reference.registry;
    return report;
}

}  // namespace

nlohmann::json cmd_diagnose(const RunConfig& cfg) {
    cfg.validate();
    nlohmann::json report;
    if (cfg.run_dir.empty()) {
        const CellSpec& cell = find_scenario(cfg.scenario.scenario);
        if (cell.design != DesignKind::ate_binary) throw ConfigError("efficiency diagnostics need an ATE scenario");
        const McResult r = run_scenario(cfg.scenario);
        const RunSeries s = series_from_result(r);
        report = diagnose_series(s, s);
    } else {
        const RunSeries run = series_from_dir(cfg.run_dir);
        const RunSeries ref = cfg.reference_dir.empty() ? run : series_from_dir(cfg.reference_dir);
        report = diagnose_series(run, ref);
    }
    report["schema_version"] = kSchemaVersion;
    report["version"] = kSoftwareVersion;
    report["command"] = "diagnose";
    report["config"] = cfg.to_json();
    return report;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json error_object(std::string_view category, const std::string& message, int code) {
    return {{"schema_version", kSchemaVersion},
            {"error", {{"category", std::string(category)}, {"message", message}, {"exit_code", code}}}};
}

void add_scenario_options(CLI::App* sub, RunConfig& cfg) {
    sub->add_option("--scenario", cfg.scenario.scenario, "Registered cell id (ate-case1..3, qte-case1..3)");
    sub->add_option("--n", cfg.scenario.n, "Sample size per replicate");
    sub->add_option("--reps", cfg.scenario.reps, "Monte Carlo replicates");
    sub->add_option("--seed", cfg.scenario.seed, "Seed of every random draw");
    sub->add_option("--population", cfg.scenario.population_size, "Population size");
    sub->add_option("--taus", cfg.scenario.taus, "Quantile levels")->delimiter(',');
    sub->add_option("--threads", cfg.scenario.threads, "Worker threads (0 = all cores)");
    sub->add_option("--grid-points", cfg.scenario.grid_points, "Points of the evaluation grid");
    sub->add_option("--max-failure-share", cfg.scenario.max_failure_share, "Tolerated share of failed replicates");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    CLI::App app{"Doubly weighted M-estimation of treatment effects", "dwm"};
    app.set_version_flag("--version", kSoftwareVersion);
    app.require_subcommand(1);

    std::vector<std::string> variants, trim_values;
    std::string ps_link = "logit", obs_link = "logit", se_mode;
    std::vector<double> trim_bounds;

    auto* est = app.add_subcommand("estimate", "Estimate effects from a CSV file");
    est->add_option("--data", cfg.data, "Input CSV")->required();
    est->add_option("--outcome", cfg.columns.outcome, "Outcome column")->required();
    est->add_option("--treatment", cfg.columns.treatment, "Treatment column (0..levels-1)")->required();
    est->add_option("--observed", cfg.columns.observed, "Observation indicator column (default: from missing outcomes)");
    est->add_option("--covariates", cfg.columns.covariates, "Covariate columns")->delimiter(',')->required();
    est->add_option("--missing-token", cfg.missing_token, "Token marking a missing outcome");
    est->add_option("--levels", cfg.levels, "Number of treatment levels");
    est->add_option("--ps-link", ps_link, "Propensity link (logit, probit)");
    est->add_option("--ps-columns", cfg.propensity_columns, "Propensity regressors")->delimiter(',');
    est->add_option("--obs-link", obs_link, "Observation-model link (logit, probit)");
    est->add_option("--obs-columns", cfg.observation_columns, "Observation-model regressors (may include W)")->delimiter(',');
    est->add_option("--variants", variants, "Weighting variants")->delimiter(',');
    est->add_option("--estimands", cfg.estimands, "ate, ate_pooled, uqte, uqte_rif, cqte, lp_cqte")->delimiter(',');
    est->add_option("--taus", cfg.taus, "Quantile levels")->delimiter(',');
    est->add_option("--mean-model", cfg.mean_model, "ls or glm:<family>");
    est->add_option("--outcome-columns", cfg.outcome_columns, "Second-step regressors")->delimiter(',');
    est->add_option("--trim", trim_bounds, "Composite-probability bounds lo,hi")->delimiter(',')->expected(2);
    est->add_option("--se-mode", se_mode, "none, correct_mean, misspecified_mean or bootstrap")->required();
    est->add_option("--bootstrap-reps", cfg.bootstrap_reps, "Bootstrap replications");
    est->add_option("--seed", cfg.seed, "Seed of every random draw");
    est->add_option("--threads", cfg.threads, "Worker threads (0 = all cores)");
    est->add_option("--grid-column", cfg.grid_column, "Covariate varied along the CQTE grid");
    est->add_option("--grid-points", cfg.grid_points, "Points of the CQTE grid");
    est->add_option("--cqte-transform", cfg.cqte_transform, "identity or log");
    est->add_option("--output", cfg.output, "results.json path");
    est->add_option("--curves", cfg.curves, "curves.csv path");

    auto* sim = app.add_subcommand("simulate", "Run a Monte Carlo scenario");
    add_scenario_options(sim, cfg);
    sim->add_option("--out-dir", cfg.out_dir, "Directory for sims.csv, curves.csv and results.json")->required();

    auto* diag = app.add_subcommand("diagnose", "Efficiency diagnostics on paired runs");
    add_scenario_options(diag, cfg);
    diag->add_option("--run", cfg.run_dir, "Directory of a simulate run");
    diag->add_option("--reference-run", cfg.reference_dir, "Directory of the run holding known-weight estimates");
    diag->add_option("--output", cfg.output, "Report path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kSoftwareVersion << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << error_object("config", e.what(), 2).dump() << "\n";
        return 2;
    }

    try {
        nlohmann::json status{{"status", "ok"}, {"outputs", nlohmann::json::array()}};
        if (*est) {
            cfg.command = "estimate";
            cfg.se_mode = parse_se_mode(se_mode);
            cfg.propensity_link = parse_link(ps_link);
            cfg.observation_link = parse_link(obs_link);
            if (!variants.empty()) {
                cfg.variants.clear();
                for (const auto& v : variants) cfg.variants.push_back(parse_variant(v));
            }
            if (!trim_bounds.empty()) cfg.trim = std::make_pair(trim_bounds[0], trim_bounds[1]);
            const auto res = cmd_estimate(cfg);
            if (!cfg.curves.empty()) {
                write_file_atomic(cfg.curves, res.curves_csv);
                status["outputs"].push_back(cfg.curves);
            }
            write_file_atomic(cfg.output, res.results.dump(2) + "\n");
            status["outputs"].push_back(cfg.output);
        } else if (*sim) {
            cfg.command = "simulate";
            const auto res = cmd_simulate(cfg);
            namespace fs = std::filesystem;
            const fs::path dir(cfg.out_dir);
            write_file_atomic((dir / "sims.csv").string(), res.sims_csv);
            write_file_atomic((dir / "curves.csv").string(), res.curves_csv);
            write_file_atomic((dir / "results.json").string(), res.results.dump(2) + "\n");
            for (const char* f : {"sims.csv", "curves.csv", "results.json"}) status["outputs"].push_back((dir / f).string());
        } else {
            cfg.command = "diagnose";
            if (cfg.output == "results.json") cfg.output = "diagnostics.json";
            const auto report = cmd_diagnose(cfg);
            write_file_atomic(cfg.output, report.dump(2) + "\n");
            status["outputs"].push_back(cfg.output);
            status["verdict"] = report["verdict"];
        }
        out << status.dump() << "\n";
        return 0;
    } catch (const Error& e) {
        const int code = exit_code(e.category());
        err << error_object(dwm::to_string(e.category()), e.what(), code).dump() << "\n";
        return code;
    } catch (const std::exception& e) {
        err << error_object("internal", e.what(), 1).dump() << "\n";
        return 1;
    }
}

}  // namespace dwm::cli
