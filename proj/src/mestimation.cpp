#include "dwm/mestimation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dwm/errors.hpp"

namespace dwm {

std::string to_string(GlmFamily family) {
    switch (family) {
        case GlmFamily::gaussian_identity: return "gaussian_identity";
        case GlmFamily::bernoulli_logit: return "bernoulli_logit";
        case GlmFamily::poisson_log: return "poisson_log";
        case GlmFamily::bernoulli_probit: return "bernoulli_probit";
    }
    return "unknown";
}

GlmFamily parse_family(const std::string& name) {
    for (auto f : {GlmFamily::gaussian_identity, GlmFamily::bernoulli_logit, GlmFamily::poisson_log,
                   GlmFamily::bernoulli_probit}) {
        if (to_string(f) == name) return f;
    }
    throw ConfigError("unknown GLM family '" + name + "'");
}

double glm_mean(GlmFamily family, double index) {
    switch (family) {
        case GlmFamily::gaussian_identity: return index;
        case GlmFamily::bernoulli_logit: return link_cdf(LinkKind::logit, index);
        case GlmFamily::poisson_log: return std::exp(index);
        case GlmFamily::bernoulli_probit: return link_cdf(LinkKind::probit, index);
    }
    return index;
}

double glm_mean_derivative(GlmFamily family, double index) {
    switch (family) {
        case GlmFamily::gaussian_identity: return 1.0;
        case GlmFamily::bernoulli_logit: return link_pdf(LinkKind::logit, index);
        case GlmFamily::poisson_log: return std::exp(index);
        case GlmFamily::bernoulli_probit: return link_pdf(LinkKind::probit, index);
    }
    return 1.0;
}

ObjectiveKind ObjectiveKind::quantile(double t) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("quantile level must lie strictly inside (0, 1)");
    return {Kind::quantile, GlmFamily::gaussian_identity, t};
}

std::string ObjectiveKind::name() const {
    switch (kind) {
        case Kind::least_squares: return "least_squares";
        case Kind::glm: return "glm_" + to_string(family);
        case Kind::quantile: return "quantile";
    }
    return "unknown";
}

double ObjectiveKind::predict(double index) const { return kind == Kind::glm ? glm_mean(family, index) : index; }

double ObjectiveKind::predict_derivative(double index) const {
    return kind == Kind::glm ? glm_mean_derivative(family, index) : 1.0;
}

namespace {

std::vector<std::size_t> active_rows(const Vector& w) {
    std::vector<std::size_t> rows;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        if (w[i] < 0.0 || !std::isfinite(w[i])) throw ConsistencyError("weights must be finite and nonnegative");
        if (w[i] > 0.0) rows.push_back(static_cast<std::size_t>(i));
    }
    return rows;
}

// Quasi-log-likelihood of one row and its first two derivatives in the index.
IndexTerms family_terms(GlmFamily family, double z, double y) {
    switch (family) {
        case GlmFamily::gaussian_identity: return {-0.5 * (y - z) * (y - z), y - z, -1.0};
        case GlmFamily::bernoulli_logit: return bernoulli_index_terms(LinkKind::logit, z, y);
        case GlmFamily::poisson_log: {
            const double mu = std::exp(z);
            return {y * z - mu, y - mu, -mu};
        }
        case GlmFamily::bernoulli_probit: return bernoulli_index_terms(LinkKind::probit, z, y);
    }
    return {0.0, 0.0, 0.0};
}

double link_of_mean(GlmFamily family, double mu) {
    switch (family) {
        case GlmFamily::gaussian_identity: return mu;
        case GlmFamily::bernoulli_logit: return link_quantile(LinkKind::logit, mu);
        case GlmFamily::poisson_log: return std::log(mu);
        case GlmFamily::bernoulli_probit: return link_quantile(LinkKind::probit, mu);
    }
    return mu;
}

void check_range(GlmFamily family, const Vector& y, const std::vector<std::size_t>& rows) {
    for (auto i : rows) {
        const double v = y[static_cast<Eigen::Index>(i)];
        const bool ok = family == GlmFamily::gaussian_identity ||
                        (family == GlmFamily::poisson_log && v >= 0.0) || (v >= 0.0 && v <= 1.0);
        if (!ok || !std::isfinite(v)) {
            throw SchemaError("outcome " + std::to_string(v) + " outside the range of family " + to_string(family));
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Least squares and GLM

WeightedLsResult weighted_least_squares(const Matrix& x, const Vector& y, const Vector& w) {
    const auto rows = active_rows(w);
    const auto p = x.cols();
    if (static_cast<Eigen::Index>(rows.size()) < p) throw InfeasibleError("fewer weighted rows than parameters");
    Matrix xs(static_cast<Eigen::Index>(rows.size()), p);
    Vector ys(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(rows[k]);
        const double s = std::sqrt(w[i]);
        xs.row(static_cast<Eigen::Index>(k)) = s * x.row(i);
        ys[static_cast<Eigen::Index>(k)] = s * y[i];
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(xs);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) throw RankError("weighted Gram matrix is singular on the kept rows");
    WeightedLsResult out;
    out.theta = qr.solve(ys);
    out.objective = 0.5 * (ys - xs * out.theta).squaredNorm();
    return out;
}

GlmResult weighted_glm(const Matrix& x, const Vector& y, const Vector& w, GlmFamily family, double tolerance,
                       int max_iterations) {
    const auto rows = active_rows(w);
    check_range(family, y, rows);
    const Eigen::Index p = x.cols();
    if (static_cast<Eigen::Index>(rows.size()) < p) throw InfeasibleError("fewer weighted rows than parameters");

    if (family == GlmFamily::gaussian_identity) {
        auto ls = weighted_least_squares(x, y, w);
        return {ls.theta, ls.objective, 1};
    }

    double wsum = 0.0, ybar = 0.0;
    for (auto i : rows) {
        wsum += w[static_cast<Eigen::Index>(i)];
        ybar += w[static_cast<Eigen::Index>(i)] * y[static_cast<Eigen::Index>(i)];
    }
    ybar /= wsum;

    // Start: weighted linear fit of the linked, shrunken outcome.
    Vector eta0 = Vector::Zero(y.size());
    for (auto i : rows) {
        const double mu = 0.5 * (y[static_cast<Eigen::Index>(i)] + ybar);
        eta0[static_cast<Eigen::Index>(i)] = link_of_mean(family, std::clamp(mu, 1e-6, family == GlmFamily::poisson_log ? 1e300 : 1.0 - 1e-6));
    }
    Vector theta = weighted_least_squares(x, eta0, w).theta;

    auto quasi_ll = [&](const Vector& th) {
        double total = 0.0;
        for (auto i : rows) {
            const auto r = static_cast<Eigen::Index>(i);
            total += w[r] * family_terms(family, x.row(r).dot(th), y[r]).ll;
        }
        return total;
    };
    double ll = quasi_ll(theta);

    for (int iter = 0; iter <= max_iterations; ++iter) {
        Vector grad = Vector::Zero(p);
        Matrix neg_hess = Matrix::Zero(p, p);
        for (auto i : rows) {
            const auto r = static_cast<Eigen::Index>(i);
            const IndexTerms t = family_terms(family, x.row(r).dot(theta), y[r]);
            grad.noalias() += w[r] * t.d1 * x.row(r).transpose();
            neg_hess.noalias() -= w[r] * t.d2 * x.row(r).transpose() * x.row(r);
        }
        if (grad.cwiseAbs().maxCoeff() <= tolerance * wsum) return {theta, -ll, iter};
        if (iter == max_iterations) break;
        const Vector step = spd_solve(neg_hess, grad, "GLM Hessian");
        double scale = 1.0;
        bool accepted = false;
        for (int h = 0; h < 60; ++h) {
            const Vector trial = theta + scale * step;
            const double trial_ll = quasi_ll(trial);
            if (std::isfinite(trial_ll) && trial_ll >= ll - 1e-12 * std::abs(ll)) {
                theta = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if (!accepted) throw ConvergenceError("GLM line search failed to improve the quasi-likelihood", theta);
    }
    throw ConvergenceError("GLM fit did not converge in " + std::to_string(max_iterations) + " iterations", theta);
}

// ---------------------------------------------------------------------------
// Quantile regression by vertex exchange.
//
// A vertex is a set of p rows whose fitted residual is zero. From a vertex
// the 2p edges free one basic row upward or downward while the others stay
// interpolated. The objective is piecewise linear along an edge, so the
// best point on an improving edge is the breakpoint where the slope turns
// nonnegative; that row replaces the freed one. Every pivot strictly
// lowers the objective, so the method terminates.

double check_loss(const Matrix& x, const Vector& y, const Vector& w, const Vector& theta, double tau) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        if (w[i] == 0.0) continue;
        const double r = y[i] - x.row(i).dot(theta);
        total += w[i] * r * (r < 0.0 ? tau - 1.0 : tau);
    }
    return total;
}

namespace {

std::vector<std::size_t> greedy_basis(const Matrix& x, const Vector& y, const Vector& w) {
    const Eigen::Index p = x.cols();
    const Vector theta = weighted_least_squares(x, y, w).theta;
    const Vector r = (y - x * theta).cwiseAbs();
    std::vector<std::size_t> order(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return r[static_cast<Eigen::Index>(a)] < r[static_cast<Eigen::Index>(b)];
    });
    std::vector<std::size_t> basis;
    Matrix q(p, p);
    for (auto i : order) {
        Vector v = x.row(static_cast<Eigen::Index>(i)).transpose();
        const double norm0 = v.norm();
        if (norm0 == 0.0) continue;
        for (std::size_t k = 0; k < basis.size(); ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            v -= q.col(kk).dot(v) * q.col(kk);
        }
        if (v.norm() > 1e-8 * norm0) {
            q.col(static_cast<Eigen::Index>(basis.size())) = v.normalized();
            basis.push_back(i);
            if (static_cast<Eigen::Index>(basis.size()) == p) return basis;
        }
    }
    throw RankError("weighted quantile design is rank deficient on the kept rows");
}

struct Breakpoint {
    double t;
    double slope_increase;
    std::size_t row;
};

class VertexSolver {
  public:
    VertexSolver(const Matrix& x, const Vector& y, const Vector& w, double tau)
        : x_(x), y_(y), w_(w), tau_(tau), m_(x.rows()), p_(x.cols()), in_basis_(static_cast<std::size_t>(x.rows()), 0) {
        y_scale_ = std::max(1.0, y.cwiseAbs().maxCoeff());
    }

    QuantileResult run(std::vector<std::size_t> basis) {
        basis_ = std::move(basis);
        for (auto b : basis_) in_basis_[b] = 1;
        int iterations = 0;
        const int limit = 200000;
        while (iterations < limit) {
            ++iterations;
            refresh();
            Eigen::Index best_j = -1;
            int best_sign = 0;
            double best_d = 0.0;
            for (Eigen::Index j = 0; j < p_; ++j) {
                for (int sign : {+1, -1}) {
                    const double d = derivative(j, sign);
                    if (d < -tol_[j] && d < best_d) {
                        best_d = d;
                        best_j = j;
                        best_sign = sign;
                    }
                }
            }
            if (best_j >= 0) {
                pivot(best_j, best_sign, best_d);
                continue;
            }
            // Optimal. Walk flat edges toward the lexicographically smallest vertex.
            bool moved = false;
            for (Eigen::Index j = 0; j < p_ && !moved; ++j) {
                for (int sign : {+1, -1}) {
                    if (std::abs(derivative(j, sign)) > tol_[j]) continue;
                    if (!lex_negative(-static_cast<double>(sign) * binv_.col(j))) continue;
                    if (pivot(j, sign, 0.0, true)) {
                        moved = true;
                        break;
                    }
                }
            }
            if (!moved) break;
        }
        if (iterations >= limit) throw ConvergenceError("quantile regression exceeded the pivot limit", theta_);
        QuantileResult out;
        out.theta = theta_;
        out.basis = basis_;
        out.iterations = iterations;
        out.objective = check_loss(x_, y_, w_, theta_, tau_);
        return out;
    }

  private:
    void refresh() {
        Matrix b(p_, p_);
        Vector yb(p_);
        for (Eigen::Index j = 0; j < p_; ++j) {
            b.row(j) = x_.row(static_cast<Eigen::Index>(basis_[static_cast<std::size_t>(j)]));
            yb[j] = y_[static_cast<Eigen::Index>(basis_[static_cast<std::size_t>(j)])];
        }
        Eigen::FullPivLU<Matrix> lu(b);
        if (!lu.isInvertible()) throw RankError("quantile regression basis became singular");
        binv_ = lu.inverse();
        theta_ = binv_ * yb;
        r_ = y_ - x_ * theta_;
        a_ = x_ * binv_;
        for (auto h : basis_) r_[static_cast<Eigen::Index>(h)] = 0.0;

        const double rtol = 1e-11 * y_scale_;
        g_ = Vector::Zero(p_);
        deg_plus_ = Vector::Zero(p_);
        deg_minus_ = Vector::Zero(p_);
        Vector magnitude = Vector::Zero(p_);
        degenerate_.assign(static_cast<std::size_t>(m_), 0);
        for (Eigen::Index i = 0; i < m_; ++i) {
            if (in_basis_[static_cast<std::size_t>(i)]) continue;
            const double wi = w_[i];
            if (std::abs(r_[i]) > rtol) {
                const double psi = r_[i] > 0.0 ? tau_ : tau_ - 1.0;
                g_.noalias() += (wi * psi) * a_.row(i).transpose();
            } else {
                degenerate_[static_cast<std::size_t>(i)] = 1;
                for (Eigen::Index j = 0; j < p_; ++j) {
                    const double s = a_(i, j);
                    deg_plus_[j] += wi * (s > 0.0 ? tau_ * s : (tau_ - 1.0) * s);
                    deg_minus_[j] += wi * (-s > 0.0 ? -tau_ * s : (1.0 - tau_) * s);
                }
            }
            magnitude.noalias() += wi * a_.row(i).cwiseAbs().transpose();
        }
        tol_.resize(p_);
        for (Eigen::Index j = 0; j < p_; ++j) {
            tol_[j] = 1e-11 * (magnitude[j] + w_[static_cast<Eigen::Index>(basis_[static_cast<std::size_t>(j)])]);
        }
    }

    // Slope of the objective when basic row j leaves with residual sign `sign`.
    double derivative(Eigen::Index j, int sign) const {
        const double wj = w_[static_cast<Eigen::Index>(basis_[static_cast<std::size_t>(j)])];
        if (sign > 0) return g_[j] + wj * tau_ + deg_plus_[j];
        return -g_[j] + wj * (1.0 - tau_) + deg_minus_[j];
    }

    bool lex_negative(const Vector& d) const {
        const double scale = d.cwiseAbs().maxCoeff();
        for (Eigen::Index k = 0; k < d.size(); ++k) {
            if (std::abs(d[k]) > 1e-12 * scale) return d[k] < 0.0;
        }
        return false;
    }

    // Moves along the edge to the breakpoint where the slope becomes
    // nonnegative (flat edges: the first breakpoint) and swaps rows.
    bool pivot(Eigen::Index j, int sign, double slope, bool flat = false) {
        breaks_.clear();
        for (Eigen::Index i = 0; i < m_; ++i) {
            if (in_basis_[static_cast<std::size_t>(i)] || degenerate_[static_cast<std::size_t>(i)]) continue;
            const double s = sign * a_(i, j);
            if (s == 0.0 || (r_[i] > 0.0) == (s > 0.0)) continue;
            breaks_.push_back({-r_[i] / s, w_[i] * std::abs(s), static_cast<std::size_t>(i)});
        }
        if (breaks_.empty()) {
            if (flat) return false;
            throw InfeasibleError("quantile regression objective is unbounded");
        }
        auto earlier = [](const Breakpoint& a, const Breakpoint& b) {
            return a.t < b.t || (a.t == b.t && a.row < b.row);
        };
        std::size_t entering = breaks_.front().row;
        if (flat) {
            entering = std::min_element(breaks_.begin(), breaks_.end(), earlier)->row;
        } else {
            // Near the optimum only a few breakpoints are crossed, so order a
            // growing prefix instead of sorting everything.
            bool found = false;
            std::size_t done = 0;
            double s = slope;
            std::size_t window = 64;
            while (!found && done < breaks_.size()) {
                const std::size_t end = std::min(breaks_.size(), done + window);
                if (end < breaks_.size()) {
                    std::nth_element(breaks_.begin() + static_cast<std::ptrdiff_t>(done),
                                     breaks_.begin() + static_cast<std::ptrdiff_t>(end), breaks_.end(), earlier);
                }
                std::sort(breaks_.begin() + static_cast<std::ptrdiff_t>(done),
                          breaks_.begin() + static_cast<std::ptrdiff_t>(end), earlier);
                for (std::size_t k = done; k < end; ++k) {
                    s += breaks_[k].slope_increase;
                    if (s >= 0.0) {
                        entering = breaks_[k].row;
                        found = true;
                        break;
                    }
                }
                done = end;
                window *= 4;
            }
            if (!found) throw InfeasibleError("quantile regression objective is unbounded");
        }
        in_basis_[basis_[static_cast<std::size_t>(j)]] = 0;
        basis_[static_cast<std::size_t>(j)] = entering;
        in_basis_[entering] = 1;
        return true;
    }

    const Matrix& x_;
    const Vector& y_;
    const Vector& w_;
    double tau_;
    Eigen::Index m_;
    Eigen::Index p_;
    double y_scale_ = 1.0;
    std::vector<std::size_t> basis_;
    std::vector<std::uint8_t> in_basis_;
    std::vector<std::uint8_t> degenerate_;
    Matrix binv_;
    Matrix a_;
    Vector theta_;
    Vector r_;
    Vector g_;
    Vector deg_plus_;
    Vector deg_minus_;
    Vector tol_;
    std::vector<Breakpoint> breaks_;
};

QuantileResult solve_active(const Matrix& x, const Vector& y, const Vector& w, double tau) {
    const Eigen::Index m = x.rows();
    std::vector<std::size_t> start;
    constexpr Eigen::Index kDirectLimit = 50000;
    if (m > kDirectLimit) {
        // Warm start from the optimum of an evenly strided subsample.
        const Eigen::Index stride = (m + kDirectLimit / 2 - 1) / (kDirectLimit / 2);
        std::vector<std::size_t> pick;
        for (Eigen::Index i = 0; i < m; i += stride) pick.push_back(static_cast<std::size_t>(i));
        const auto sub = solve_active(take_rows(x, pick), take(y, pick), take(w, pick), tau);
        for (auto b : sub.basis) start.push_back(pick[b]);
    } else {
        start = greedy_basis(x, y, w);
    }
    VertexSolver solver(x, y, w, tau);
    return solver.run(std::move(start));
}

}  // namespace

QuantileResult weighted_quantile_regression(const Matrix& x, const Vector& y, const Vector& w, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("quantile level must lie strictly inside (0, 1)");
    const auto rows = active_rows(w);
    if (static_cast<Eigen::Index>(rows.size()) < x.cols()) {
        throw InfeasibleError("quantile regression needs at least as many weighted rows as parameters");
    }
    const Matrix xs = take_rows(x, rows);
    const Vector ys = take(y, rows);
    const Vector ws = take(w, rows);
    for (Eigen::Index i = 0; i < ys.size(); ++i) {
        if (!std::isfinite(ys[i])) throw ConsistencyError("non-finite outcome on a weighted row");
    }
    auto res = solve_active(xs, ys, ws, tau);
    for (auto& b : res.basis) b = rows[b];
    std::sort(res.basis.begin(), res.basis.end());
    return res;
}

// ---------------------------------------------------------------------------
// Dataset-level wrappers

Vector arm_outcome(const Dataset& ds, const Vector& weights, OutcomeTransform transform) {
    Vector y = Vector::Zero(static_cast<Eigen::Index>(ds.rows()));
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        if (weights[r] == 0.0) continue;
        double v = ds.outcome(i);
        if (transform == OutcomeTransform::log) {
            if (!(v > 0.0)) throw SchemaError("log transform needs positive outcomes (row " + std::to_string(i) + ")");
            v = std::log(v);
        }
        y[r] = v;
    }
    return y;
}

void smooth_scores(const Matrix& x, const Vector& y, const Vector& w, const ObjectiveKind& objective,
                   const Vector& theta, Matrix& scores, Matrix* hessian) {
    if (objective.kind == ObjectiveKind::Kind::quantile) throw ConfigError("quantile objective has no smooth score");
    const Eigen::Index n = x.rows();
    const Eigen::Index p = x.cols();
    const GlmFamily family =
        objective.kind == ObjectiveKind::Kind::least_squares ? GlmFamily::gaussian_identity : objective.family;
    scores = Matrix::Zero(n, p);
    if (hessian) *hessian = Matrix::Zero(p, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (w[i] == 0.0) continue;
        const IndexTerms t = family_terms(family, x.row(i).dot(theta), y[i]);
        scores.row(i) = (-w[i] * t.d1) * x.row(i);
        if (hessian) hessian->noalias() -= (w[i] * t.d2) * x.row(i).transpose() * x.row(i);
    }
    if (hessian) *hessian = symmetrize(*hessian / static_cast<double>(n));
}

namespace {

Design arm_design(const Dataset& ds, const std::vector<std::string>& columns) {
    Design x = ds.covariate_design();
    if (!columns.empty()) x = x.subset(columns);
    return x;
}

MEstimateFit smooth_fit(const Dataset& ds, const WeightSet& ws, ArmSelector arm, const ObjectiveKind& objective,
                        const std::vector<std::string>& columns) {
    const Design x = arm_design(ds, columns);
    const Vector w = ws.arm(arm);
    if (w.sum() <= 0.0) throw InfeasibleError("arm " + std::to_string(arm.level) + " has no weighted rows");
    const Vector y = arm_outcome(ds, w, OutcomeTransform::identity);
    MEstimateFit fit;
    fit.arm = arm;
    fit.objective = objective;
    fit.columns = x.names;
    if (objective.kind == ObjectiveKind::Kind::least_squares) {
        auto res = weighted_least_squares(x.values, y, w);
        fit.theta = res.theta;
        fit.objective_value = res.objective;
        fit.iterations = 1;
    } else {
        auto res = weighted_glm(x.values, y, w, objective.family);
        fit.theta = res.theta;
        fit.objective_value = res.objective;
        fit.iterations = res.iterations;
    }
    smooth_scores(x.values, y, w, objective, fit.theta, fit.row_scores, &fit.hessian);
    return fit;
}

}  // namespace

MEstimateFit solve_weighted_ls(const Dataset& ds, const WeightSet& ws, ArmSelector arm,
                               const std::vector<std::string>& columns) {
    return smooth_fit(ds, ws, arm, ObjectiveKind::least_squares(), columns);
}

MEstimateFit solve_weighted_glm(const Dataset& ds, const WeightSet& ws, ArmSelector arm, GlmFamily family,
                                const std::vector<std::string>& columns) {
    return smooth_fit(ds, ws, arm, ObjectiveKind::glm(family), columns);
}

MEstimateFit solve_weighted_qr(const Dataset& ds, const WeightSet& ws, ArmSelector arm, double tau,
                               const std::vector<std::string>& columns, OutcomeTransform transform) {
    const Design x = arm_design(ds, columns);
    const Vector w = ws.arm(arm);
    if (w.sum() <= 0.0) throw InfeasibleError("arm " + std::to_string(arm.level) + " has no weighted rows");
    const Vector y = arm_outcome(ds, w, transform);
    auto res = weighted_quantile_regression(x.values, y, w, tau);
    MEstimateFit fit;
    fit.arm = arm;
    fit.objective = ObjectiveKind::quantile(tau);
    fit.transform = transform;
    fit.columns = x.names;
    fit.theta = res.theta;
    fit.objective_value = res.objective;
    fit.iterations = res.iterations;
    fit.basis = res.basis;
    fit.row_scores = Matrix::Zero(x.values.rows(), x.values.cols());
    for (Eigen::Index i = 0; i < x.values.rows(); ++i) {
        if (w[i] == 0.0) continue;
        const double r = y[i] - x.values.row(i).dot(fit.theta);
        fit.row_scores.row(i) = (-w[i] * (r < 0.0 ? tau - 1.0 : tau)) * x.values.row(i);
    }
    return fit;
}

MEstimateFit solve_second_step(const Dataset& ds, const WeightSet& ws, ArmSelector arm, const SecondStepSpec& spec) {
    switch (spec.objective.kind) {
        case ObjectiveKind::Kind::least_squares:
            if (spec.transform != OutcomeTransform::identity) throw ConfigError("log transform is for quantile fits");
            return solve_weighted_ls(ds, ws, arm, spec.columns);
        case ObjectiveKind::Kind::glm:
            if (spec.transform != OutcomeTransform::identity) throw ConfigError("log transform is for quantile fits");
            return solve_weighted_glm(ds, ws, arm, spec.objective.family, spec.columns);
        case ObjectiveKind::Kind::quantile:
            return solve_weighted_qr(ds, ws, arm, spec.objective.tau, spec.columns, spec.transform);
    }
    throw ConfigError("unknown objective");
}

// ---------------------------------------------------------------------------
// Stacked system

StackedFit solve_stacked_gmm(const Dataset& ds, const StackedSpec& spec) {
    if (ds.levels() != 2) throw ConfigError("stacked system supports binary treatments only");
    for (const auto* s : {&spec.control, &spec.treated}) {
        if (s->objective.kind == ObjectiveKind::Kind::quantile || s->transform != OutcomeTransform::identity) {
            throw ConfigError("stacked system needs smooth second-step objectives");
        }
    }
    Design xg = ds.covariate_design();
    if (!spec.propensity_columns.empty()) xg = xg.subset(spec.propensity_columns);
    Design zr = ds.augmented_design();
    if (!spec.observation_columns.empty()) zr = zr.subset(spec.observation_columns);
    const Design x0 = arm_design(ds, spec.control.columns);
    const Design x1 = arm_design(ds, spec.treated.columns);

    const Eigen::Index n = static_cast<Eigen::Index>(ds.rows());
    const Eigen::Index p0 = x0.values.cols(), p1 = x1.values.cols();
    const Eigen::Index kg = xg.values.cols(), kr = zr.values.cols();
    const Eigen::Index dim = p0 + p1 + kg + kr;
    const Vector wvec = ds.treatment_indicator(1);
    const Vector svec = ds.observed_indicator();
    const Vector ind1 = (wvec.array() * svec.array()).matrix();
    const Vector ind0 = ((1.0 - wvec.array()) * svec.array()).matrix();
    const Vector y1 = arm_outcome(ds, ind1, OutcomeTransform::identity);
    const Vector y0 = arm_outcome(ds, ind0, OutcomeTransform::identity);
    const double dn = static_cast<double>(n);
    const double scale0 = spec.scale_by_arm_size ? dn / ind0.sum() : 1.0;
    const double scale1 = spec.scale_by_arm_size ? dn / ind1.sum() : 1.0;

    auto moments = [&](const Vector& par) {
        const Vector th0 = par.segment(0, p0);
        const Vector th1 = par.segment(p0, p1);
        const Vector gam = par.segment(p0 + p1, kg);
        const Vector del = par.segment(p0 + p1 + kg, kr);
        Vector m = Vector::Zero(dim);
        const Vector ig = xg.values * gam;
        const Vector ir = zr.values * del;
        Vector w0 = Vector::Zero(n), w1 = Vector::Zero(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            m.segment(p0 + p1, kg) += bernoulli_index_terms(spec.propensity_link, ig[i], wvec[i]).d1 * xg.values.row(i).transpose();
            m.segment(p0 + p1 + kg, kr) +=
                bernoulli_index_terms(spec.observation_link, ir[i], svec[i]).d1 * zr.values.row(i).transpose();
            const double g = std::clamp(link_cdf(spec.propensity_link, ig[i]), kProbabilityFloor, 1.0 - kProbabilityFloor);
            const double r = std::clamp(link_cdf(spec.observation_link, ir[i]), kProbabilityFloor, 1.0 - kProbabilityFloor);
            w1[i] = ind1[i] / (r * g);
            w0[i] = ind0[i] / (r * (1.0 - g));
        }
        Matrix sc;
        smooth_scores(x0.values, y0, w0, spec.control.objective, th0, sc, nullptr);
        m.segment(0, p0) = -scale0 * sc.colwise().sum().transpose();
        smooth_scores(x1.values, y1, w1, spec.treated.objective, th1, sc, nullptr);
        m.segment(p0, p1) = -scale1 * sc.colwise().sum().transpose();
        return Vector(m / dn);
    };

    Vector par = Vector::Zero(dim);
    par.segment(0, p0) = weighted_least_squares(x0.values, y0, ind0).theta;
    par.segment(p0, p1) = weighted_least_squares(x1.values, y1, ind1).theta;
    if (spec.control.objective.kind == ObjectiveKind::Kind::glm) par.segment(0, p0).setZero();
    if (spec.treated.objective.kind == ObjectiveKind::Kind::glm) par.segment(p0, p1).setZero();

    Vector m = moments(par);
    double merit = m.squaredNorm();
    for (int iter = 0; iter < spec.max_iterations; ++iter) {
        if (m.cwiseAbs().maxCoeff() <= spec.tolerance) {
            StackedFit fit;
            fit.theta_control = par.segment(0, p0);
            fit.theta_treated = par.segment(p0, p1);
            fit.propensity = par.segment(p0 + p1, kg);
            fit.observation = par.segment(p0 + p1 + kg, kr);
            fit.iterations = iter;
            fit.moment_norm = m.cwiseAbs().maxCoeff();
            return fit;
        }
        Matrix jac(dim, dim);
        for (Eigen::Index k = 0; k < dim; ++k) {
            const double h = 1e-6 * std::max(1.0, std::abs(par[k]));
            Vector up = par, down = par;
            up[k] += h;
            down[k] -= h;
            jac.col(k) = (moments(up) - moments(down)) / (2.0 * h);
        }
        Eigen::FullPivLU<Matrix> lu(jac);
        lu.setThreshold(1e-12);
        if (!lu.isInvertible()) throw RankError("stacked moment Jacobian is singular at the current iterate");
        const Vector step = lu.solve(m);
        double scale = 1.0;
        bool accepted = false;
        for (int h = 0; h < 40; ++h) {
            const Vector trial = par - scale * step;
            const Vector tm = moments(trial);
            const double tmerit = tm.squaredNorm();
            if (std::isfinite(tmerit) && tmerit < merit) {
                par = trial;
                m = tm;
                merit = tmerit;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if (!accepted) {
            if (m.cwiseAbs().maxCoeff() <= 1e3 * spec.tolerance) continue;
            throw ConvergenceError("stacked system line search stalled", par);
        }
    }
    if (m.cwiseAbs().maxCoeff() <= spec.tolerance) {
        StackedFit fit;
        fit.theta_control = par.segment(0, p0);
        fit.theta_treated = par.segment(p0, p1);
        fit.propensity = par.segment(p0 + p1, kg);
        fit.observation = par.segment(p0 + p1 + kg, kr);
        fit.iterations = spec.max_iterations;
        fit.moment_norm = m.cwiseAbs().maxCoeff();
        return fit;
    }
    throw ConvergenceError("stacked system did not converge", par);
}

nlohmann::json to_json(const MEstimateFit& fit) {
    nlohmann::json j;
    j["arm"] = fit.arm.level;
    j["objective"] = fit.objective.name();
    if (fit.objective.kind == ObjectiveKind::Kind::quantile) j["tau"] = fit.objective.tau;
    j["transform"] = fit.transform == OutcomeTransform::log ? "log" : "identity";
    j["columns"] = fit.columns;
    j["theta"] = std::vector<double>(fit.theta.data(), fit.theta.data() + fit.theta.size());
    j["objective_value"] = fit.objective_value;
    j["iterations"] = fit.iterations;
    j["converged"] = fit.converged;
    return j;
}

}  // namespace dwm
