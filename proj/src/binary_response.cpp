#include "dwm/binary_response.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/math/special_functions/erf.hpp>

#include "dwm/errors.hpp"

namespace dwm {

std::string to_string(LinkKind link) { return link == LinkKind::logit ? "logit" : "probit"; }

LinkKind parse_link(const std::string& name) {
    if (name == "logit") return LinkKind::logit;
    if (name == "probit") return LinkKind::probit;
    throw ConfigError("unknown link '" + name + "' (expected logit or probit)");
}

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double normal_cdf(double z) { return 0.5 * std::erfc(-z * kInvSqrt2); }
double normal_pdf(double z) { return kInvSqrt2Pi * std::exp(-0.5 * z * z); }

// phi(z) / Phi(z), stable in the far left tail through the scaled erfc.
double inverse_mills(double z) {
    if (z > -30.0) return normal_pdf(z) / normal_cdf(z);
    // Asymptotic expansion; relative error below 1e-10 for z <= -30.
    const double z2 = z * z;
    return -z / (1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2));
}

double log_normal_cdf(double z) {
    if (z > -30.0) return std::log(normal_cdf(z));
    return std::log(normal_pdf(z)) - std::log(-z) + std::log1p(-1.0 / (z * z));
}

double log1pexp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

IndexTerms probit_terms(double z, double y) {
    // For y = 1 the score in the index is lambda(z); for y = 0 it is -lambda(-z).
    // Both have second derivative -lambda (lambda + z) with the signed lambda.
    IndexTerms t{0.0, 0.0, 0.0};
    if (y > 0.0) {
        const double lam = inverse_mills(z);
        t.ll += y * log_normal_cdf(z);
        t.d1 += y * lam;
        t.d2 -= y * lam * (lam + z);
    }
    if (y < 1.0) {
        const double lam = -inverse_mills(-z);
        t.ll += (1.0 - y) * log_normal_cdf(-z);
        t.d1 += (1.0 - y) * lam;
        t.d2 -= (1.0 - y) * lam * (lam + z);
    }
    return t;
}

IndexTerms row_terms(LinkKind link, double z, double y) {
    if (link == LinkKind::logit) {
        const double p = 1.0 / (1.0 + std::exp(-z));
        return {y * z - log1pexp(z), y - p, -p * (1.0 - p)};
    }
    return probit_terms(z, y);
}

double log_likelihood(LinkKind link, const Vector& index, const Vector& y) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < index.size(); ++i) total += row_terms(link, index[i], y[i]).ll;
    return total;
}

void finalize(BinaryFit& fit, const Matrix& x, const Vector& y) {
    const Eigen::Index n = x.rows();
    const Vector index = x * fit.coefficients;
    fit.fitted_probs.resize(n);
    fit.scores.resize(n, x.cols());
    fit.clipped = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double p = link_cdf(fit.link, index[i]);
        if (p < kProbabilityFloor || p > 1.0 - kProbabilityFloor) {
            p = std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
            ++fit.clipped;
        }
        fit.fitted_probs[i] = p;
        fit.scores.row(i) = row_terms(fit.link, index[i], y[i]).d1 * x.row(i);
    }
    fit.information = symmetrize(fit.scores.transpose() * fit.scores / static_cast<double>(n));
}

}  // namespace

IndexTerms bernoulli_index_terms(LinkKind link, double z, double y) { return row_terms(link, z, y); }

double link_cdf(LinkKind link, double index) {
    if (link == LinkKind::logit) return 1.0 / (1.0 + std::exp(-index));
    return normal_cdf(index);
}

double link_pdf(LinkKind link, double index) {
    if (link == LinkKind::logit) {
        const double p = 1.0 / (1.0 + std::exp(-index));
        return p * (1.0 - p);
    }
    return normal_pdf(index);
}

double link_quantile(LinkKind link, double p) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("probability must lie strictly inside (0, 1)");
    if (link == LinkKind::logit) return std::log(p / (1.0 - p));
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

BinaryFit evaluate_binary_model(const Matrix& design, const Vector& response, LinkKind link, const Vector& coefficients,
                                std::vector<std::string> columns) {
    BinaryFit fit;
    fit.link = link;
    fit.columns = std::move(columns);
    fit.coefficients = coefficients;
    fit.converged = true;
    finalize(fit, design, response);
    return fit;
}

BinaryFit fit_binary_response(const Matrix& design, const Vector& response, LinkKind link,
                              std::vector<std::string> columns, const NewtonOptions& options) {
    const Eigen::Index n = design.rows();
    const Eigen::Index k = design.cols();
    if (response.size() != n || n == 0) throw SchemaError("binary response and design row counts differ");
    for (Eigen::Index i = 0; i < n; ++i) {
        if (response[i] != 0.0 && response[i] != 1.0) throw SchemaError("binary response must be 0 or 1");
    }
    const double total = response.sum();
    if (total == 0.0 || total == static_cast<double>(n)) {
        throw InfeasibleError("separation: binary response is constant (" + std::to_string(static_cast<long>(total)) +
                              " of " + std::to_string(n) + " ones)");
    }

    Vector beta = Vector::Zero(k);
    Vector index = Vector::Zero(n);
    double ll = log_likelihood(link, index, response);
    const double dn = static_cast<double>(n);

    for (int iter = 0; iter <= options.max_iterations; ++iter) {
        Vector grad = Vector::Zero(k);
        Matrix neg_hess = Matrix::Zero(k, k);
        Vector curvature(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const IndexTerms t = row_terms(link, index[i], response[i]);
            grad.noalias() += t.d1 * design.row(i).transpose();
            curvature[i] = -t.d2;
        }
        if ((grad / dn).cwiseAbs().maxCoeff() <= options.tolerance) {
            // One polishing step: Newton is quadratic here, so this takes the
            // score from the tolerance down to rounding level.
            neg_hess = design.transpose() * curvature.asDiagonal() * design;
            const Vector polished = beta + spd_solve(neg_hess, grad, "binary-response Hessian");
            const Vector polished_index = design * polished;
            const double polished_ll = log_likelihood(link, polished_index, response);
            if (std::isfinite(polished_ll) && polished_ll >= ll) {
                beta = polished;
                index = polished_index;
            }
            if (index.cwiseAbs().maxCoeff() > 35.0) {
                throw ConvergenceError("binary-response fit diverges (complete or quasi-complete separation)", beta);
            }
            BinaryFit fit;
            fit.link = link;
            fit.columns = std::move(columns);
            fit.coefficients = beta;
            fit.converged = true;
            fit.iterations = iter;
            finalize(fit, design, response);
            return fit;
        }
        if (iter == options.max_iterations) break;
        neg_hess = design.transpose() * curvature.asDiagonal() * design;
        const Vector step = spd_solve(neg_hess, grad, "binary-response Hessian");

        double scale = 1.0;
        bool accepted = false;
        for (int h = 0; h < 60; ++h) {
            const Vector trial = beta + scale * step;
            const Vector trial_index = design * trial;
            const double trial_ll = log_likelihood(link, trial_index, response);
            if (std::isfinite(trial_ll) && trial_ll >= ll - 1e-12 * std::abs(ll)) {
                beta = trial;
                index = trial_index;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if (!accepted) throw ConvergenceError("binary-response line search failed to improve the likelihood", beta);
    }
    throw ConvergenceError("binary-response fit did not converge in " + std::to_string(options.max_iterations) +
                               " iterations",
                           beta);
}

BinaryFit fit_propensity(const Dataset& ds, const std::vector<std::string>& columns, LinkKind link) {
    Design x = ds.covariate_design();
    if (!columns.empty()) x = x.subset(columns);
    Vector w(static_cast<Eigen::Index>(ds.rows()));
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        if (ds.treatment(i) > 1) throw ConfigError("binary propensity requested for a multivalued treatment");
        w[static_cast<Eigen::Index>(i)] = ds.treatment(i);
    }
    return fit_binary_response(x.values, w, link, x.names);
}

BinaryFit fit_missingness(const Dataset& ds, const std::vector<std::string>& columns, LinkKind link) {
    Design z = ds.augmented_design();
    if (!columns.empty()) z = z.subset(columns);
    return fit_binary_response(z.values, ds.observed_indicator(), link, z.names);
}

// ---------------------------------------------------------------------------

namespace {

Matrix softmax_probs(const Matrix& x, const Matrix& coef) {
    const Eigen::Index n = x.rows();
    const Eigen::Index m = coef.cols();
    Matrix eta(n, m + 1);
    eta.col(0).setZero();
    eta.rightCols(m) = x * coef;
    Matrix p(n, m + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double top = eta.row(i).maxCoeff();
        const RowVector e = (eta.row(i).array() - top).exp().matrix();
        p.row(i) = e / e.sum();
    }
    return p;
}

double multinomial_ll(const Matrix& p, const std::vector<int>& level) {
    double ll = 0.0;
    for (std::size_t i = 0; i < level.size(); ++i) ll += std::log(p(static_cast<Eigen::Index>(i), level[i]));
    return ll;
}

}  // namespace

MultinomialFit fit_multinomial_logit(const Matrix& design, const std::vector<int>& level, int levels,
                                     std::vector<std::string> columns, const NewtonOptions& options) {
    const Eigen::Index n = design.rows();
    const Eigen::Index k = design.cols();
    if (levels < 2) throw ConfigError("multinomial model needs at least two levels");
    if (static_cast<Eigen::Index>(level.size()) != n) throw SchemaError("treatment and design row counts differ");
    std::vector<std::size_t> counts(static_cast<std::size_t>(levels), 0);
    for (int g : level) {
        if (g < 0 || g >= levels) throw SchemaError("treatment level outside the declared range");
        ++counts[static_cast<std::size_t>(g)];
    }
    for (int g = 0; g < levels; ++g) {
        if (counts[static_cast<std::size_t>(g)] == 0) {
            throw InfeasibleError("separation: treatment level " + std::to_string(g) + " is never observed");
        }
    }

    const Eigen::Index m = levels - 1;
    const Eigen::Index dim = k * m;
    Matrix coef = Matrix::Zero(k, m);
    Matrix p = softmax_probs(design, coef);
    double ll = multinomial_ll(p, level);
    const double dn = static_cast<double>(n);

    auto flat = [&](const Matrix& c) { return Eigen::Map<const Vector>(c.data(), dim); };

    for (int iter = 0; iter <= options.max_iterations; ++iter) {
        Vector grad = Vector::Zero(dim);
        Matrix neg_hess = Matrix::Zero(dim, dim);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Vector xi = design.row(i).transpose();
            const Matrix outer = xi * xi.transpose();
            for (Eigen::Index a = 0; a < m; ++a) {
                const double pa = p(i, a + 1);
                const double ya = level[static_cast<std::size_t>(i)] == a + 1 ? 1.0 : 0.0;
                grad.segment(a * k, k) += (ya - pa) * xi;
                for (Eigen::Index b = 0; b < m; ++b) {
                    const double pb = p(i, b + 1);
                    const double c = (a == b ? pa : 0.0) - pa * pb;
                    neg_hess.block(a * k, b * k, k, k) += c * outer;
                }
            }
        }
        if ((grad / dn).cwiseAbs().maxCoeff() <= options.tolerance) {
            MultinomialFit fit;
            fit.levels = levels;
            fit.columns = std::move(columns);
            fit.coefficients = coef;
            fit.converged = true;
            fit.iterations = iter;
            fit.probabilities = p;
            fit.scores.resize(n, dim);
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index a = 0; a < m; ++a) {
                    const double ya = level[static_cast<std::size_t>(i)] == a + 1 ? 1.0 : 0.0;
                    fit.scores.block(i, a * k, 1, k) = (ya - p(i, a + 1)) * design.row(i);
                }
                for (Eigen::Index g = 0; g < levels; ++g) {
                    double& v = fit.probabilities(i, g);
                    if (v < kProbabilityFloor || v > 1.0 - kProbabilityFloor) {
                        v = std::clamp(v, kProbabilityFloor, 1.0 - kProbabilityFloor);
                        ++fit.clipped;
                    }
                }
            }
            fit.information = symmetrize(fit.scores.transpose() * fit.scores / dn);
            return fit;
        }
        if (iter == options.max_iterations) break;
        const Vector step = spd_solve(neg_hess, grad, "multinomial Hessian");
        double scale = 1.0;
        bool accepted = false;
        for (int h = 0; h < 60; ++h) {
            Matrix trial = coef;
            Eigen::Map<Vector>(trial.data(), dim) += scale * step;
            const Matrix trial_p = softmax_probs(design, trial);
            const double trial_ll = multinomial_ll(trial_p, level);
            if (std::isfinite(trial_ll) && trial_ll >= ll - 1e-12 * std::abs(ll)) {
                coef = trial;
                p = trial_p;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if (!accepted) throw ConvergenceError("multinomial line search failed to improve the likelihood", flat(coef));
    }
    throw ConvergenceError("multinomial fit did not converge", flat(coef));
}

MultinomialFit fit_multinomial_propensity(const Dataset& ds, const std::vector<std::string>& columns) {
    Design x = ds.covariate_design();
    if (!columns.empty()) x = x.subset(columns);
    return fit_multinomial_logit(x.values, ds.treatments(), ds.levels(), x.names);
}

nlohmann::json to_json(const BinaryFit& fit) {
    nlohmann::json j;
    j["link"] = to_string(fit.link);
    j["columns"] = fit.columns;
    j["coefficients"] = std::vector<double>(fit.coefficients.data(), fit.coefficients.data() + fit.coefficients.size());
    j["converged"] = fit.converged;
    j["iterations"] = fit.iterations;
    j["clipped"] = fit.clipped;
    j["mean_probability"] = fit.fitted_probs.mean();
    return j;
}

}  // namespace dwm
