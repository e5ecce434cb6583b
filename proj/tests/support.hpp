#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "dwm/dataset.hpp"
#include "dwm/mestimation.hpp"

namespace testsupport {

using dwm::Matrix;
using dwm::Vector;

/// Small synthetic sample: two covariates, logistic treatment and
/// observation, linear outcome with normal noise.
inline dwm::Dataset synthetic(std::size_t n, std::uint64_t seed, double treated_shift = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;
    Matrix x(static_cast<Eigen::Index>(n), 2);
    Vector y(static_cast<Eigen::Index>(n));
    std::vector<std::uint8_t> s(n);
    std::vector<int> w(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        x(r, 0) = normal(rng);
        x(r, 1) = 1.0 + normal(rng);
        const double pg = 1.0 / (1.0 + std::exp(-(0.2 + 0.5 * x(r, 0) - 0.3 * x(r, 1))));
        w[i] = unif(rng) < pg ? 1 : 0;
        const double pr = 1.0 / (1.0 + std::exp(-(0.4 + 0.3 * w[i] - 0.4 * x(r, 0) + 0.2 * x(r, 1))));
        s[i] = unif(rng) < pr ? 1 : 0;
        y[r] = 1.0 + x(r, 0) + 0.5 * x(r, 1) + treated_shift * w[i] + normal(rng);
    }
    return dwm::Dataset(y, s, w, x, {"x1", "x2"});
}

struct Problem {
    Matrix x;
    Vector y;
    Vector w;
};

inline Problem random_problem(Eigen::Index n, Eigen::Index p, std::uint64_t seed, bool heavy = false) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif(0.2, 3.0);
    std::student_t_distribution<double> student(2.0);
    Problem pr{Matrix(n, p), Vector(n), Vector(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        pr.x(i, 0) = 1.0;
        for (Eigen::Index j = 1; j < p; ++j) pr.x(i, j) = normal(rng);
        pr.y[i] = 0.5 + pr.x.row(i).tail(p - 1).sum() + (heavy ? student(rng) : normal(rng));
        pr.w[i] = unif(rng);
    }
    return pr;
}

// Minimum of the weighted check loss over every vertex that interpolates
// p rows of a nonsingular subsystem.
inline double brute_force_quantile(const Matrix& x, const Vector& y, const Vector& w, double tau) {
    const Eigen::Index n = x.rows(), p = x.cols();
    std::vector<int> pick(static_cast<std::size_t>(n), 0);
    std::fill(pick.end() - p, pick.end(), 1);
    double best = std::numeric_limits<double>::infinity();
    do {
        Matrix b(p, p);
        Vector yb(p);
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!pick[static_cast<std::size_t>(i)]) continue;
            b.row(k) = x.row(i);
            yb[k] = y[i];
            ++k;
        }
        Eigen::FullPivLU<Matrix> lu(b);
        if (!lu.isInvertible()) continue;
        best = std::min(best, dwm::check_loss(x, y, w, lu.solve(yb), tau));
    } while (std::next_permutation(pick.begin(), pick.end()));
    return best;
}

}  // namespace testsupport
