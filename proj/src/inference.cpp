#include "dwm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dwm/errors.hpp"
#include "dwm/parallel.hpp"
#include "dwm/rng.hpp"

namespace dwm {

std::string to_string(VarianceMode mode) {
    switch (mode) {
        case VarianceMode::adjusted: return "adjusted";
        case VarianceMode::unadjusted: return "unadjusted";
        case VarianceMode::bootstrap: return "bootstrap";
    }
    return "unknown";
}

std::string to_string(MeanMode mode) { return mode == MeanMode::correct_mean ? "correct_mean" : "misspecified_mean"; }

MeanMode parse_mean_mode(const std::string& name) {
    if (name == "correct_mean") return MeanMode::correct_mean;
    if (name == "misspecified_mean") return MeanMode::misspecified_mean;
    throw ConfigError("unknown mean mode '" + name + "'");
}

Matrix first_step_scores(WeightVariant variant, const BinaryFit& propensity, const BinaryFit& observation) {
    switch (variant) {
        case WeightVariant::unweighted: return Matrix(propensity.scores.rows(), 0);
        case WeightVariant::ps_weighted: return propensity.scores;
        case WeightVariant::d_weighted: {
            Matrix c(propensity.scores.rows(), observation.scores.cols() + propensity.scores.cols());
            c << observation.scores, propensity.scores;
            return c;
        }
    }
    return Matrix(propensity.scores.rows(), 0);
}

Matrix project_out(const Matrix& l, const Matrix& c, bool& used_pinv) {
    used_pinv = false;
    if (c.cols() == 0) return l;
    const Matrix ctc = symmetrize(c.transpose() * c);
    const Matrix inv = robust_inverse(ctc, 1e12, used_pinv);
    return l - c * (inv * (c.transpose() * l));
}

VarianceEstimate sandwich_theta(const MEstimateFit& fit, const Matrix& first_step, VarianceMode mode) {
    if (fit.hessian.size() == 0) {
        throw ConfigError("analytic variance is not available for " + fit.objective.name() + " fits; use the bootstrap");
    }
    if (mode == VarianceMode::bootstrap) throw ConfigError("sandwich_theta computes analytic modes only");
    const Matrix& l = fit.row_scores;
    if (first_step.rows() != l.rows()) throw ConsistencyError("first-step scores are not aligned with the fit rows");
    const double n = static_cast<double>(l.rows());

    VarianceEstimate v;
    v.mode = mode;
    v.hessian = fit.hessian;
    v.sigma = symmetrize(l.transpose() * l / n);
    if (mode == VarianceMode::adjusted) {
        v.residual_scores = project_out(l, first_step, v.used_pseudo_inverse);
    } else {
        v.residual_scores = l;
    }
    v.omega = symmetrize(v.residual_scores.transpose() * v.residual_scores / n);
    const Matrix hinv = spd_solve(fit.hessian, Matrix::Identity(fit.hessian.rows(), fit.hessian.cols()), "Hessian");
    v.covariance = symmetrize(hinv * v.omega * hinv / n);
    return v;
}

AteVariance ate_variance(const MEstimateFit& treated, const MEstimateFit& control, const Dataset& ds,
                         const std::vector<std::uint8_t>& keep, const Matrix& first_step, MeanMode mode) {
    for (const auto* f : {&treated, &control}) {
        if (f->objective.kind == ObjectiveKind::Kind::quantile) throw ConfigError("ATE variance needs mean fits");
    }
    if (treated.objective.name() != control.objective.name()) {
        throw ConfigError("treated and control fits use different objectives");
    }
    const Matrix x1 = ds.covariate_design().subset(treated.columns).values;
    const Matrix x0 = ds.covariate_design().subset(control.columns).values;
    const Eigen::Index n = x1.rows();
    const VarianceMode vmode = mode == MeanMode::correct_mean ? VarianceMode::unadjusted : VarianceMode::adjusted;

    AteVariance out;
    out.treated = sandwich_theta(treated, first_step, vmode);
    out.control = sandwich_theta(control, first_step, vmode);

    Vector contrast = Vector::Zero(n);
    RowVector j1 = RowVector::Zero(x1.cols()), j0 = RowVector::Zero(x0.cols());
    double count = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!keep[static_cast<std::size_t>(i)]) continue;
        const double e1 = x1.row(i).dot(treated.theta), e0 = x0.row(i).dot(control.theta);
        contrast[i] = treated.objective.predict(e1) - control.objective.predict(e0);
        j1 += treated.objective.predict_derivative(e1) * x1.row(i);
        j0 += control.objective.predict_derivative(e0) * x0.row(i);
        count += 1.0;
    }
    j1 /= count;
    j0 /= count;
    out.estimate = contrast.sum() / count;
    Vector centred = Vector::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (keep[static_cast<std::size_t>(i)]) centred[i] = contrast[i] - out.estimate;
    }
    double variance = centred.squaredNorm() / count / count;
    variance += (j1 * out.treated.covariance * j1.transpose())(0, 0);
    variance += (j0 * out.control.covariance * j0.transpose())(0, 0);
    if (mode == MeanMode::misspecified_mean) {
        const double dn = static_cast<double>(n);
        const Matrix h1inv = spd_solve(treated.hessian, Matrix::Identity(treated.hessian.rows(), treated.hessian.cols()), "Hessian");
        const Matrix h0inv = spd_solve(control.hessian, Matrix::Identity(control.hessian.rows(), control.hessian.cols()), "Hessian");
        const RowVector cov1 = centred.transpose() * out.treated.residual_scores / dn;
        const RowVector cov0 = centred.transpose() * out.control.residual_scores / dn;
        variance -= 2.0 * (cov1 * h1inv * j1.transpose())(0, 0) / dn;
        variance += 2.0 * (cov0 * h0inv * j0.transpose())(0, 0) / dn;
    }
    out.variance = variance;
    return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kBootstrapStreamBase = std::uint64_t{1} << 40;

Matrix sample_covariance(const Matrix& rows) {
    const Eigen::Index r = rows.rows();
    if (r < 2) return Matrix::Zero(rows.cols(), rows.cols());
    // Shifting by the first replicate first keeps identical replicates at exactly zero spread.
    const Matrix shifted = rows.rowwise() - RowVector(rows.row(0));
    const RowVector mean = shifted.colwise().mean();
    const Matrix centred = shifted.rowwise() - mean;
    return symmetrize(centred.transpose() * centred / static_cast<double>(r - 1));
}

}  // namespace

BootstrapResult pairs_bootstrap(const Dataset& ds, const Statistic& statistic, const BootstrapOptions& options) {
    const std::size_t b_count = options.forced_indices ? options.forced_indices->size() : options.replications;
    if (b_count < 2) throw ConfigError("bootstrap needs at least two replications");
    const std::size_t n = ds.rows();

    std::vector<Vector> values(b_count);
    std::vector<std::uint8_t> ok(b_count, 0);
    parallel_for(b_count, options.threads, [&](std::size_t b) {
        std::vector<std::size_t> rows;
        if (options.forced_indices) {
            rows = (*options.forced_indices)[b];
        } else {
            RandomStream rng(options.seed, kBootstrapStreamBase + b);
            rows.resize(n);
            for (auto& r : rows) r = static_cast<std::size_t>(rng.below(n));
        }
        try {
            values[b] = statistic(ds.subset(rows));
            ok[b] = values[b].allFinite() ? 1 : 0;
        } catch (const Error&) {
            ok[b] = 0;
        }
    });

    BootstrapResult out;
    std::vector<std::size_t> good;
    for (std::size_t b = 0; b < b_count; ++b) {
        if (ok[b]) {
            good.push_back(b);
        } else {
            out.failed.push_back(b);
        }
    }
    if (static_cast<double>(out.failed.size()) > options.max_failure_share * static_cast<double>(b_count)) {
        throw ReliabilityError(std::to_string(out.failed.size()) + " of " + std::to_string(b_count) +
                               " bootstrap replicates failed");
    }
    if (good.size() < 2) throw ReliabilityError("fewer than two successful bootstrap replicates");
    const Eigen::Index dim = values[good.front()].size();
    out.replicates.resize(static_cast<Eigen::Index>(good.size()), dim);
    for (std::size_t k = 0; k < good.size(); ++k) {
        if (values[good[k]].size() != dim) throw ConsistencyError("bootstrap statistic changed dimension");
        out.replicates.row(static_cast<Eigen::Index>(k)) = values[good[k]].transpose();
    }
    out.variance.mode = VarianceMode::bootstrap;
    out.variance.covariance = sample_covariance(out.replicates);
    out.variance.replications = good.size();
    out.variance.failures = out.failed.size();
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::json Verdict::to_json() const {
    return {{"name", name}, {"candidate", candidate}, {"reference", reference}, {"mc_se", mc_se}, {"pass", pass}};
}

namespace {

void check_pair(const PairedSeries& a, const PairedSeries& b) {
    if (a.registry != b.registry) {
        throw RegistryError("paired series come from different runs ('" + a.registry + "' vs '" + b.registry + "')");
    }
    if (a.values.size() != b.values.size()) throw RegistryError("paired series have different replication counts");
    if (a.values.size() < 3) throw ConfigError("need at least three replications for a Monte Carlo comparison");
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double sd_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

Verdict compare_variance(const std::string& name, const PairedSeries& candidate, const PairedSeries& reference,
                         double slack) {
    check_pair(candidate, reference);
    const double ma = mean_of(candidate.values), mb = mean_of(reference.values);
    const std::size_t r = candidate.values.size();
    std::vector<double> diff(r);
    double va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        const double da = (candidate.values[i] - ma) * (candidate.values[i] - ma);
        const double db = (reference.values[i] - mb) * (reference.values[i] - mb);
        va += da;
        vb += db;
        diff[i] = da - db;
    }
    const double scale = static_cast<double>(r) / static_cast<double>(r - 1);
    Verdict v;
    v.name = name;
    v.candidate = va / static_cast<double>(r - 1);
    v.reference = vb / static_cast<double>(r - 1);
    v.mc_se = scale * sd_of(diff) / std::sqrt(static_cast<double>(r));
    v.pass = v.candidate <= v.reference + slack * v.mc_se;
    return v;
}

Verdict compare_sd(const std::string& name, const PairedSeries& candidate, const PairedSeries& reference, double slack) {
    check_pair(candidate, reference);
    const double ma = mean_of(candidate.values), mb = mean_of(reference.values);
    const double sa = sd_of(candidate.values), sb = sd_of(reference.values);
    const std::size_t r = candidate.values.size();
    std::vector<double> diff(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double da = (candidate.values[i] - ma) * (candidate.values[i] - ma);
        const double db = (reference.values[i] - mb) * (reference.values[i] - mb);
        diff[i] = da / (2.0 * sa) - db / (2.0 * sb);
    }
    Verdict v;
    v.name = name;
    v.candidate = sa;
    v.reference = sb;
    v.mc_se = sd_of(diff) / std::sqrt(static_cast<double>(r));
    v.pass = v.candidate <= v.reference + slack * v.mc_se;
    return v;
}

nlohmann::json efficiency_report(const EfficiencyInput& input) {
    nlohmann::json report;
    bool all_pass = true;

    nlohmann::json c1 = nlohmann::json::array();
    bool weights_pass = !input.weight_comparisons.empty();
    for (std::size_t k = 0; k < input.weight_comparisons.size(); ++k) {
        const std::string name =
            k < input.weight_comparison_names.size() ? input.weight_comparison_names[k] : "component_" + std::to_string(k);
        const Verdict v = compare_variance(name, input.weight_comparisons[k].first, input.weight_comparisons[k].second);
        weights_pass = weights_pass && v.pass;
        c1.push_back(v.to_json());
    }
    if (!input.weight_comparisons.empty()) {
        report["estimated_vs_known_weights"] = {{"checks", c1}, {"verdict", weights_pass ? "pass" : "fail"}};
        all_pass = all_pass && weights_pass;
    }

    if (!input.weighting_comparison.first.values.empty() || !input.weighting_comparison.second.values.empty()) {
        const Verdict v = compare_sd("unweighted_vs_d_weighted_sd", input.weighting_comparison.first, input.weighting_comparison.second);
        report["unweighted_vs_d_weighted"] = {{"check", v.to_json()}, {"verdict", v.pass ? "pass" : "fail"}};
        all_pass = all_pass && v.pass;
    }

    if (!input.projection_gaps.empty()) {
        const double worst = *std::min_element(input.projection_gaps.begin(), input.projection_gaps.end());
        const bool pass = worst >= -1e-8;
        report["projection_psd"] = {{"min_eigenvalue", worst}, {"replicates", input.projection_gaps.size()},
                                    {"verdict", pass ? "pass" : "fail"}};
        all_pass = all_pass && pass;
    }
    report["verdict"] = all_pass ? "pass" : "fail";
    return report;
}

}  // namespace dwm
