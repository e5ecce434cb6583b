#include "dwm/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "dwm/effects.hpp"
#include "dwm/errors.hpp"
#include "dwm/inference.hpp"
#include "dwm/parallel.hpp"
#include "dwm/rng.hpp"

namespace dwm {

std::string to_string(DesignKind design) { return design == DesignKind::ate_binary ? "ate_binary" : "qte_lognormal"; }

DesignKind parse_design(const std::string& name) {
    if (name == "ate_binary") return DesignKind::ate_binary;
    if (name == "qte_lognormal") return DesignKind::qte_lognormal;
    throw ConfigError("unknown design '" + name + "'");
}

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

DesignParameters design_parameters(DesignKind design) {
    DesignParameters p;
    p.covariate_mean = vec({1.0, 2.0});
    p.covariate_cov.resize(2, 2);
    p.covariate_cov << 3.0, 0.2, 0.2, 2.0;
    p.error_cov.resize(2, 2);
    p.error_cov << 1.0, 0.2, 0.2, 1.0;
    p.propensity = vec({0.05, -0.2, -0.11});
    p.observation = vec({0.01, 0.03, 0.05, -0.28});
    if (design == DesignKind::ate_binary) {
        // Arm labels chosen so that the population ATE is positive.
        p.theta_treated = vec({0.0, 1.0, 1.0});
        p.theta_control = vec({-1.0, 1.0, 1.0});
    } else {
        p.theta_treated = vec({0.1, -0.36, -0.1});
        p.theta_control = vec({0.2, 0.24, -0.45});
    }
    return p;
}

Population generate_population(DesignKind design, std::uint64_t seed, std::size_t size) {
    if (size == 0) throw ConfigError("population size must be positive");
    const DesignParameters par = design_parameters(design);
    const Eigen::LLT<Matrix> lx(par.covariate_cov), lu(par.error_cov);
    const Matrix cx = lx.matrixL(), cu = lu.matrixL();

    Population pop;
    pop.design = design;
    pop.seed = seed;
    const auto n = static_cast<Eigen::Index>(size);
    pop.covariates.resize(n, 3);
    pop.treatment.resize(size);
    pop.observed.resize(size);
    pop.outcome_treated.resize(n);
    pop.outcome_control.resize(n);
    pop.propensity.resize(n);
    pop.observation.resize(n);

    RandomStream rng(seed, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z1 = rng.normal(), z2 = rng.normal();
        const double e0 = rng.normal(), e1 = rng.normal();
        const double x1 = par.covariate_mean[0] + cx(0, 0) * z1;
        const double x2 = par.covariate_mean[1] + cx(1, 0) * z1 + cx(1, 1) * z2;
        const double u0 = cu(0, 0) * e0;
        const double u1 = cu(1, 0) * e0 + cu(1, 1) * e1;
        pop.covariates.row(i) << 1.0, x1, x2;

        const double g_index = par.propensity.dot(pop.covariates.row(i));
        const int w = g_index + rng.logistic() > 0.0 ? 1 : 0;
        const double r_index = par.observation[0] + par.observation[1] * w + par.observation[2] * x1 +
                               par.observation[3] * x2;
        const std::uint8_t s = r_index + rng.logistic() > 0.0 ? 1 : 0;

        const double idx1 = par.theta_treated.dot(pop.covariates.row(i)) + u1;
        const double idx0 = par.theta_control.dot(pop.covariates.row(i)) + u0;
        if (design == DesignKind::ate_binary) {
            pop.outcome_treated[i] = idx1 > 0.0 ? 1.0 : 0.0;
            pop.outcome_control[i] = idx0 > 0.0 ? 1.0 : 0.0;
        } else {
            pop.outcome_treated[i] = std::exp(idx1);
            pop.outcome_control[i] = std::exp(idx0);
        }
        pop.treatment[static_cast<std::size_t>(i)] = w;
        pop.observed[static_cast<std::size_t>(i)] = s;
        pop.propensity[i] = link_cdf(LinkKind::logit, g_index);
        pop.observation[i] = link_cdf(LinkKind::logit, r_index);
    }
    return pop;
}

Sample draw_sample(const Population& pop, std::size_t n, std::size_t rep) {
    const std::size_t size = pop.size();
    if (n == 0 || n > size) throw ConfigError("sample size must lie in 1..population size");
    RandomStream rng(pop.seed, 1 + static_cast<std::uint64_t>(rep));
    std::unordered_map<std::size_t, std::size_t> swapped;
    swapped.reserve(2 * n);
    auto at = [&](std::size_t k) {
        const auto it = swapped.find(k);
        return it == swapped.end() ? k : it->second;
    };
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(size - i));
        const std::size_t vi = at(i), vj = at(j);
        swapped[j] = vi;
        swapped[i] = vj;
        rows[i] = vj;
    }

    const auto m = static_cast<Eigen::Index>(n);
    Matrix x(m, 2);
    Vector y(m), g(m), r(m);
    std::vector<std::uint8_t> s(n);
    std::vector<int> w(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto i = static_cast<Eigen::Index>(rows[k]);
        const auto kk = static_cast<Eigen::Index>(k);
        x.row(kk) = pop.covariates.row(i).tail(2);
        w[k] = pop.treatment[rows[k]];
        s[k] = pop.observed[rows[k]];
        y[kk] = s[k] ? (w[k] ? pop.outcome_treated[i] : pop.outcome_control[i]) : std::nan("");
        g[kk] = pop.propensity[i];
        r[kk] = pop.observation[i];
    }
    return Sample{Dataset(y, std::move(s), std::move(w), x, {"x1", "x2"}), std::move(rows), g, r};
}

Matrix evaluation_grid(DesignKind design, std::size_t points) {
    if (points < 2) throw ConfigError("grid needs at least two points");
    const DesignParameters par = design_parameters(design);
    const double sd = std::sqrt(par.covariate_cov(0, 0));
    const double lo = par.covariate_mean[0] - 2.0 * sd, hi = par.covariate_mean[0] + 2.0 * sd;
    Matrix grid(static_cast<Eigen::Index>(points), 3);
    for (std::size_t k = 0; k < points; ++k) {
        const double x1 = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
        grid.row(static_cast<Eigen::Index>(k)) << 1.0, x1, par.covariate_mean[1];
    }
    return grid;
}

// ---------------------------------------------------------------------------

nlohmann::json PopulationTruths::to_json() const {
    nlohmann::json j;
    j["treated_share"] = treated_share;
    j["observed_share"] = observed_share;
    j["ate"] = ate;
    j["r2_control"] = r2_control;
    j["r2_treated"] = r2_treated;
    if (!taus.empty()) {
        j["taus"] = taus;
        j["quantile_treated"] = quantile_treated;
        j["quantile_control"] = quantile_control;
        nlohmann::json lp = nlohmann::json::array();
        for (std::size_t k = 0; k < lp_treated.size(); ++k) {
            lp.push_back({{"tau", taus[k]}, {"treated", to_std(lp_treated[k])}, {"control", to_std(lp_control[k])}});
        }
        j["linear_projection"] = lp;
    }
    return j;
}

namespace {

double projection_r2(const Matrix& x, const Vector& y) {
    const Vector ones = Vector::Ones(y.size());
    const Vector theta = weighted_least_squares(x, y, ones).theta;
    const double ssr = (y - x * theta).squaredNorm();
    const double sst = (y.array() - y.mean()).matrix().squaredNorm();
    return 1.0 - ssr / sst;
}

}  // namespace

PopulationTruths compute_truths(const Population& pop, const std::vector<double>& taus, bool linear_projections) {
    PopulationTruths t;
    const auto n = static_cast<double>(pop.size());
    t.treated_share = std::accumulate(pop.treatment.begin(), pop.treatment.end(), 0.0) / n;
    t.observed_share = std::accumulate(pop.observed.begin(), pop.observed.end(), 0.0) / n;
    t.ate = (pop.outcome_treated - pop.outcome_control).mean();
    t.r2_treated = projection_r2(pop.covariates, pop.outcome_treated);
    t.r2_control = projection_r2(pop.covariates, pop.outcome_control);
    t.taus = taus;
    if (taus.empty()) return t;

    const DesignParameters par = design_parameters(pop.design);
    const Vector ones = Vector::Ones(pop.outcome_treated.size());
    t.grid = evaluation_grid(pop.design);
    for (double tau : taus) {
        t.quantile_treated.push_back(weighted_quantile(pop.outcome_treated, ones, tau));
        t.quantile_control.push_back(weighted_quantile(pop.outcome_control, ones, tau));
        const double z = link_quantile(LinkKind::probit, tau);
        Vector curve(t.grid.rows());
        for (Eigen::Index k = 0; k < t.grid.rows(); ++k) {
            curve[k] = std::exp(t.grid.row(k).dot(par.theta_treated) + z) -
                       std::exp(t.grid.row(k).dot(par.theta_control) + z);
        }
        t.cqte_curve.push_back(curve);
        if (linear_projections) {
            t.lp_treated.push_back(weighted_quantile_regression(pop.covariates, pop.outcome_treated, ones, tau).theta);
            t.lp_control.push_back(weighted_quantile_regression(pop.covariates, pop.outcome_control, ones, tau).theta);
            t.lp_curve.push_back(t.grid * (t.lp_treated.back() - t.lp_control.back()));
        }
    }
    return t;
}

// ---------------------------------------------------------------------------

nlohmann::json CellSpec::to_json() const {
    nlohmann::json j;
    j["id"] = id;
    j["design"] = to_string(design);
    j["case"] = case_number;
    j["propensity"] = {{"columns", propensity_columns}, {"link", to_string(propensity_link)}};
    j["observation"] = {{"columns", observation_columns}, {"link", to_string(observation_link)}};
    nlohmann::json ss;
    ss["objective"] = second_step.objective.kind == ObjectiveKind::Kind::least_squares ? "least_squares"
                      : second_step.objective.kind == ObjectiveKind::Kind::glm     ? "glm"
                                                                                  : "quantile";
    if (second_step.objective.kind == ObjectiveKind::Kind::glm) ss["family"] = to_string(second_step.objective.family);
    ss["columns"] = second_step.columns;
    ss["transform"] = second_step.transform == OutcomeTransform::log ? "log" : "identity";
    j["second_step"] = ss;
    j["taus"] = taus;
    return j;
}

CellSpec CellSpec::from_json(const nlohmann::json& j) {
    try {
        CellSpec c;
        c.id = j.at("id").get<std::string>();
        c.design = parse_design(j.at("design").get<std::string>());
        c.case_number = j.at("case").get<int>();
        c.propensity_columns = j.at("propensity").at("columns").get<std::vector<std::string>>();
        c.propensity_link = parse_link(j.at("propensity").at("link").get<std::string>());
        c.observation_columns = j.at("observation").at("columns").get<std::vector<std::string>>();
        c.observation_link = parse_link(j.at("observation").at("link").get<std::string>());
        const auto& ss = j.at("second_step");
        const auto kind = ss.at("objective").get<std::string>();
        if (kind == "least_squares") {
            c.second_step.objective = ObjectiveKind::least_squares();
        } else if (kind == "glm") {
            c.second_step.objective = ObjectiveKind::glm(parse_family(ss.at("family").get<std::string>()));
        } else if (kind == "quantile") {
            c.second_step.objective = ObjectiveKind::quantile(0.5);
        } else {
            throw ConfigError("unknown second-step objective '" + kind + "'");
        }
        c.second_step.columns = ss.at("columns").get<std::vector<std::string>>();
        c.second_step.transform =
            ss.at("transform").get<std::string>() == "log" ? OutcomeTransform::log : OutcomeTransform::identity;
        c.taus = j.at("taus").get<std::vector<double>>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed scenario specification: ") + e.what());
    }
}

const std::vector<CellSpec>& scenario_registry() {
    static const std::vector<CellSpec> registry = [] {
        const std::vector<std::string> x_all{"intercept", "x1", "x2"};
        const std::vector<std::string> z_all{"intercept", "W", "x1", "x2"};
        const std::vector<std::string> x_short{"intercept", "x2"};
        const std::vector<std::string> z_short{"intercept", "W", "x2"};
        const std::vector<double> taus{0.25, 0.5, 0.75};
        std::vector<CellSpec> cells;
        auto add = [&](std::string id, DesignKind d, int c, std::vector<std::string> pc, LinkKind pl,
                       std::vector<std::string> oc, LinkKind ol, ObjectiveKind obj, OutcomeTransform tr) {
            CellSpec s;
            s.id = std::move(id);
            s.design = d;
            s.case_number = c;
            s.propensity_columns = std::move(pc);
            s.propensity_link = pl;
            s.observation_columns = std::move(oc);
            s.observation_link = ol;
            s.second_step = {obj, x_all, tr};
            if (d == DesignKind::qte_lognormal) s.taus = taus;
            cells.push_back(std::move(s));
        };
        const auto ls = ObjectiveKind::least_squares();
        const auto probit_mean = ObjectiveKind::glm(GlmFamily::bernoulli_probit);
        const auto qr = ObjectiveKind::quantile(0.5);
        const auto id = OutcomeTransform::identity;
        add("ate-case1", DesignKind::ate_binary, 1, x_all, LinkKind::logit, z_all, LinkKind::logit, ls, id);
        add("ate-case2", DesignKind::ate_binary, 2, x_short, LinkKind::probit, z_short, LinkKind::probit, ls, id);
        add("ate-case3", DesignKind::ate_binary, 3, x_short, LinkKind::probit, z_short, LinkKind::probit, probit_mean,
            id);
        add("qte-case1", DesignKind::qte_lognormal, 1, x_all, LinkKind::logit, z_all, LinkKind::logit, qr, id);
        add("qte-case2", DesignKind::qte_lognormal, 2, x_short, LinkKind::probit, x_short, LinkKind::probit, qr, id);
        add("qte-case3", DesignKind::qte_lognormal, 3, x_short, LinkKind::probit, x_short, LinkKind::probit, qr,
            OutcomeTransform::log);
        return cells;
    }();
    return registry;
}

const CellSpec& find_scenario(const std::string& id) {
    for (const auto& c : scenario_registry()) {
        if (c.id == id) return c;
    }
    std::string known;
    for (const auto& c : scenario_registry()) known += (known.empty() ? "" : ", ") + c.id;
    throw ConfigError("unknown scenario '" + id + "' (registry: " + known + ")");
}

nlohmann::json ScenarioConfig::to_json() const {
    return {{"scenario", scenario},       {"n", n},
            {"reps", reps},               {"seed", seed},
            {"population_size", population_size}, {"taus", taus},
            {"threads", threads},         {"grid_points", grid_points},
            {"max_failure_share", max_failure_share}};
}

std::string ScenarioConfig::registry_key() const {
    std::ostringstream s;
    s << "design-of:" << scenario.substr(0, 3) << "/n=" << n << "/reps=" << reps << "/seed=" << seed
      << "/population=" << population_size;
    return s.str();
}

// ---------------------------------------------------------------------------

std::vector<double> McResult::series(WeightVariant variant, const std::string& estimand, double tau,
                                     int grid_index) const {
    std::vector<double> out;
    for (const auto& r : records) {
        if (r.variant != variant || r.estimand != estimand || r.grid_index != grid_index) continue;
        if (std::isnan(tau) != std::isnan(r.tau)) continue;
        if (!std::isnan(tau) && std::abs(r.tau - tau) > 1e-12) continue;
        out.push_back(r.value);
    }
    return out;
}

namespace {

std::optional<double> truth_for(const PopulationTruths& t, const std::string& estimand, double tau, int grid) {
    if (estimand == "ate") return t.ate;
    std::size_t k = 0;
    while (k < t.taus.size() && std::abs(t.taus[k] - tau) > 1e-12) ++k;
    if (k == t.taus.size()) return std::nullopt;
    if (estimand == "uqte_direct" || estimand == "uqte_rif") return t.quantile_treated[k] - t.quantile_control[k];
    if (estimand == "quantile_treated") return t.quantile_treated[k];
    if (estimand == "quantile_control") return t.quantile_control[k];
    if (grid >= 0 && estimand == "lp_cqte" && k < t.lp_curve.size()) return t.lp_curve[k][grid];
    if (grid >= 0 && estimand == "cqte") return t.cqte_curve[k][grid];
    return std::nullopt;
}

}  // namespace

std::vector<McSummary> McResult::summarize() const {
    struct Acc {
        McSummary s;
        double sum = 0.0;
        double sq = 0.0;
    };
    std::vector<Acc> acc;
    std::map<std::tuple<int, std::string, double, int>, std::size_t> index;
    for (const auto& r : records) {
        const double tau_key = std::isnan(r.tau) ? -1.0 : r.tau;
        const auto key = std::make_tuple(static_cast<int>(r.variant), r.estimand, tau_key, r.grid_index);
        auto it = index.find(key);
        if (it == index.end()) {
            it = index.emplace(key, acc.size()).first;
            Acc a;
            a.s.variant = r.variant;
            a.s.estimand = r.estimand;
            a.s.tau = r.tau;
            a.s.grid_index = r.grid_index;
            a.s.truth = truth_for(truths, r.estimand, r.tau, r.grid_index);
            acc.push_back(a);
        }
        Acc& a = acc[it->second];
        a.s.count += 1;
        a.sum += r.value;
        a.sq += r.value * r.value;
    }
    std::vector<McSummary> out;
    for (auto& a : acc) {
        const double c = static_cast<double>(a.s.count);
        a.s.mean = a.sum / c;
        const double var = c > 1 ? std::max(0.0, (a.sq - c * a.s.mean * a.s.mean) / (c - 1.0)) : 0.0;
        a.s.sd = std::sqrt(var);
        a.s.mc_se = a.s.sd / std::sqrt(c);
        out.push_back(a.s);
    }
    return out;
}

std::shared_ptr<const Population> cached_population(DesignKind design, std::uint64_t seed, std::size_t size) {
    static std::mutex mutex;
    static std::map<std::tuple<int, std::uint64_t, std::size_t>, std::shared_ptr<const Population>> cache;
    std::lock_guard lock(mutex);
    const auto key = std::make_tuple(static_cast<int>(design), seed, size);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    auto pop = std::make_shared<const Population>(generate_population(design, seed, size));
    cache.emplace(key, pop);
    return pop;
}

namespace {

const PopulationTruths& cached_truths(const Population& pop, const std::vector<double>& taus, bool linear) {
    static std::mutex mutex;
    static std::map<std::tuple<const Population*, std::vector<double>, bool>, PopulationTruths> cache;
    std::lock_guard lock(mutex);
    const auto key = std::make_tuple(&pop, taus, linear);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, compute_truths(pop, taus, linear)).first;
    return it->second;
}

void push(std::vector<McRecord>& out, std::size_t rep, WeightVariant v, std::string estimand, double value,
          double tau = std::numeric_limits<double>::quiet_NaN(), int grid = -1) {
    out.push_back({rep, v, std::move(estimand), tau, grid, value});
}

// Signed entries of mean(l c'), named prefix + "<row>_<col>".
void push_cross_moments(std::vector<McRecord>& out, std::size_t rep, WeightVariant v, const std::string& prefix,
                        const Matrix& l, const Matrix& c) {
    const Matrix m = l.transpose() * c / static_cast<double>(l.rows());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            push(out, rep, v, prefix + std::to_string(i) + "_" + std::to_string(j), m(i, j));
        }
    }
}

std::vector<McRecord> ate_replicate(const Sample& sample, const CellSpec& cell, std::size_t rep) {
    const Dataset& ds = sample.data;
    std::vector<McRecord> out;
    const auto ps = fit_propensity(ds, cell.propensity_columns, cell.propensity_link);
    const auto miss = fit_missingness(ds, cell.observation_columns, cell.observation_link);
    for (auto v : kAllVariants) {
        const WeightSet ws = compute_weights(ps, miss, ds, v);
        const auto f1 = solve_second_step(ds, ws, ArmSelector::treated(), cell.second_step);
        const auto f0 = solve_second_step(ds, ws, ArmSelector::control(), cell.second_step);
        push(out, rep, v, "ate", ate_separate(f1, f0, ds).value());
        const Matrix c = first_step_scores(v, ps, miss);
        const auto vc = ate_variance(f1, f0, ds, ws.keep, c, MeanMode::correct_mean);
        const auto vm = ate_variance(f1, f0, ds, ws.keep, c, MeanMode::misspecified_mean);
        push(out, rep, v, "ate_se_correct_mean", vc.se());
        push(out, rep, v, "ate_se_misspecified_mean", vm.se());
        push(out, rep, v, "projection_gap_treated", vm.treated.projection_gap());
        push(out, rep, v, "projection_gap_control", vm.control.projection_gap());
        for (Eigen::Index k = 0; k < f1.theta.size(); ++k) push(out, rep, v, "theta_treated_" + std::to_string(k), f1.theta[k]);
        for (Eigen::Index k = 0; k < f0.theta.size(); ++k) push(out, rep, v, "theta_control_" + std::to_string(k), f0.theta[k]);
        if (v == WeightVariant::d_weighted) {
            push_cross_moments(out, rep, v, "cross_lb_treated_", f1.row_scores, miss.scores);
            push_cross_moments(out, rep, v, "cross_lb_control_", f0.row_scores, miss.scores);
            push_cross_moments(out, rep, v, "cross_ld_treated_", f1.row_scores, ps.scores);
            push_cross_moments(out, rep, v, "cross_ld_control_", f0.row_scores, ps.scores);

            // Same draw with the true probabilities, for the efficiency comparison.
            const WeightSet known = compute_weights_known(sample.true_propensity, sample.true_observation, ds, v);
            const auto k1 = solve_second_step(ds, known, ArmSelector::treated(), cell.second_step);
            const auto k0 = solve_second_step(ds, known, ArmSelector::control(), cell.second_step);
            push(out, rep, v, "ate_known_weights", ate_separate(k1, k0, ds).value());
            for (Eigen::Index k = 0; k < k1.theta.size(); ++k)
                push(out, rep, v, "theta_treated_known_" + std::to_string(k), k1.theta[k]);
            for (Eigen::Index k = 0; k < k0.theta.size(); ++k)
                push(out, rep, v, "theta_control_known_" + std::to_string(k), k0.theta[k]);
        }
    }
    return out;
}

std::vector<McRecord> qte_replicate(const Sample& sample, const CellSpec& cell, const std::vector<double>& taus,
                                    const Matrix& grid, std::size_t rep) {
    const Dataset& ds = sample.data;
    std::vector<McRecord> out;
    const auto ps = fit_propensity(ds, cell.propensity_columns, cell.propensity_link);
    const auto miss = fit_missingness(ds, cell.observation_columns, cell.observation_link);
    for (auto v : kAllVariants) {
        const WeightSet ws = compute_weights(ps, miss, ds, v);
        for (double tau : taus) {
            const auto direct = uqte_direct(ds, ws, tau);
            push(out, rep, v, "uqte_direct", direct.value(), tau);
            push(out, rep, v, "quantile_treated", direct.metadata["quantile_treated"].get<double>(), tau);
            push(out, rep, v, "quantile_control", direct.metadata["quantile_control"].get<double>(), tau);
            RifConfig rc;
            rc.tau = tau;
            push(out, rep, v, "uqte_rif", uqte_rif(ds, ws, rc).value(), tau);

            SecondStepSpec spec = cell.second_step;
            spec.objective = ObjectiveKind::quantile(tau);
            const auto f1 = solve_second_step(ds, ws, ArmSelector::treated(), spec);
            const auto f0 = solve_second_step(ds, ws, ArmSelector::control(), spec);
            const auto curve = cqte(f1, f0, grid);
            for (Eigen::Index k = 0; k < grid.rows(); ++k) push(out, rep, v, "cqte", curve.point[k], tau, static_cast<int>(k));
            if (spec.transform == OutcomeTransform::identity) {
                const auto lp = lp_cqte(f1, f0, grid);
                for (Eigen::Index k = 0; k < grid.rows(); ++k)
                    push(out, rep, v, "lp_cqte", lp.point[k], tau, static_cast<int>(k));
            }
        }
    }
    return out;
}

}  // namespace

McResult run_scenario(const ScenarioConfig& cfg) {
    const CellSpec& cell = find_scenario(cfg.scenario);
    if (cfg.reps < 1) throw ConfigError("reps must be at least 1");
    if (cfg.n < 10 || cfg.n > cfg.population_size) throw ConfigError("n must lie in 10..population_size");

    McResult result;
    result.config = cfg;
    result.cell = cell;
    const std::vector<double> taus = cfg.taus.empty() ? cell.taus : cfg.taus;
    if (cell.design == DesignKind::qte_lognormal && taus.empty()) throw ConfigError("quantile scenario needs taus");
    result.config.taus = taus;

    const auto pop = cached_population(cell.design, cfg.seed, cfg.population_size);
    result.truths = cached_truths(*pop, cell.design == DesignKind::qte_lognormal ? taus : std::vector<double>{},
                                  cell.second_step.transform == OutcomeTransform::identity);
    const Matrix grid = evaluation_grid(cell.design, cfg.grid_points);
    result.truths.grid = grid;
    if (cell.design == DesignKind::qte_lognormal && cfg.grid_points != 21) {
        // Truth curves were built on the default grid; rebuild for this one.
        const DesignParameters par = design_parameters(cell.design);
        for (std::size_t k = 0; k < taus.size(); ++k) {
            const double z = link_quantile(LinkKind::probit, taus[k]);
            Vector curve(grid.rows());
            for (Eigen::Index r = 0; r < grid.rows(); ++r) {
                curve[r] = std::exp(grid.row(r).dot(par.theta_treated) + z) -
                           std::exp(grid.row(r).dot(par.theta_control) + z);
            }
            result.truths.cqte_curve[k] = curve;
            if (k < result.truths.lp_treated.size()) {
                result.truths.lp_curve[k] = grid * (result.truths.lp_treated[k] - result.truths.lp_control[k]);
            }
        }
    }

    std::vector<std::vector<McRecord>> per_rep(cfg.reps);
    std::vector<std::uint8_t> ok(cfg.reps, 0);
    parallel_for(cfg.reps, cfg.threads, [&](std::size_t rep) {
        try {
            const Sample sample = draw_sample(*pop, cfg.n, rep);
            per_rep[rep] = cell.design == DesignKind::ate_binary ? ate_replicate(sample, cell, rep)
                                                                 : qte_replicate(sample, cell, taus, grid, rep);
            ok[rep] = 1;
        } catch (const Error&) {
            ok[rep] = 0;
        }
    });
    for (std::size_t rep = 0; rep < cfg.reps; ++rep) {
        if (!ok[rep]) {
            result.failed_reps.push_back(rep);
            continue;
        }
        ++result.successful_reps;
        result.records.insert(result.records.end(), per_rep[rep].begin(), per_rep[rep].end());
    }
    if (static_cast<double>(result.failed_reps.size()) > cfg.max_failure_share * static_cast<double>(cfg.reps)) {
        throw ReliabilityError(std::to_string(result.failed_reps.size()) + " of " + std::to_string(cfg.reps) +
                               " replicates failed");
    }
    return result;
}

// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
    if (std::isnan(v)) return "";
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

}  // namespace

std::string sims_csv(const McResult& result) {
    std::ostringstream out;
    out << "rep,variant,estimand,tau,value\n";
    for (const auto& r : result.records) {
        if (r.grid_index >= 0) continue;
        out << r.rep << ',' << to_string(r.variant) << ',' << r.estimand << ',' << format_double(r.tau) << ','
            << format_double(r.value) << '\n';
    }
    return out.str();
}

std::string curves_csv(const McResult& result) {
    std::ostringstream out;
    out << "estimand,tau,x1,truth,unweighted,ps_weighted,d_weighted\n";
    const auto summaries = result.summarize();
    std::map<std::tuple<std::string, double, int>, std::array<double, 4>> rows;
    for (const auto& s : summaries) {
        if (s.grid_index < 0) continue;
        auto& row = rows.try_emplace({s.estimand, s.tau, s.grid_index}, std::array<double, 4>{NAN, NAN, NAN, NAN})
                        .first->second;
        row[0] = s.truth.value_or(NAN);
        row[1 + static_cast<int>(s.variant)] = s.mean;
    }
    for (const auto& [key, row] : rows) {
        const auto& [estimand, tau, k] = key;
        out << estimand << ',' << format_double(tau) << ',' << format_double(result.truths.grid(k, 1)) << ','
            << format_double(row[0]) << ',' << format_double(row[1]) << ',' << format_double(row[2]) << ','
            << format_double(row[3]) << '\n';
    }
    return out.str();
}

nlohmann::json summary_json(const McResult& result) {
    nlohmann::json j;
    j["scenario"] = result.cell.to_json();
    j["config"] = result.config.to_json();
    j["truths"] = result.truths.to_json();
    j["successful_reps"] = result.successful_reps;
    j["failed_reps"] = result.failed_reps;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : result.summarize()) {
        if (s.grid_index >= 0) continue;
        nlohmann::json r{{"variant", to_string(s.variant)}, {"estimand", s.estimand}, {"count", s.count},
                         {"mean", s.mean},                 {"sd", s.sd},             {"mc_se", s.mc_se}};
        if (!std::isnan(s.tau)) r["tau"] = s.tau;
        if (s.truth) {
            r["truth"] = *s.truth;
            r["bias"] = s.mean - *s.truth;
        }
        rows.push_back(r);
    }
    j["summaries"] = rows;
    return j;
}

}  // namespace dwm
