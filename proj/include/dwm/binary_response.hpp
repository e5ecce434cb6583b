#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "dwm/dataset.hpp"
#include "dwm/linalg.hpp"

namespace dwm {

enum class LinkKind { logit, probit };

std::string to_string(LinkKind link);
LinkKind parse_link(const std::string& name);

/// Floor applied to fitted probabilities before they are used as divisors.
inline constexpr double kProbabilityFloor = 1e-6;

double link_cdf(LinkKind link, double index);
double link_pdf(LinkKind link, double index);
/// Inverse of the cdf; used to build known-probability fixtures.
double link_quantile(LinkKind link, double p);

/// Bernoulli log-likelihood of a response y in [0, 1] at index z, with its
/// first and second derivatives in z. Stable in the tails for both links.
struct IndexTerms {
    double ll;
    double d1;
    double d2;
};
IndexTerms bernoulli_index_terms(LinkKind link, double z, double y);

/// Fitted binary-response model. `scores` holds the per-row gradients of
/// the log-likelihood at the estimate, `information` their mean outer product.
struct BinaryFit {
    LinkKind link = LinkKind::logit;
    std::vector<std::string> columns;
    Vector coefficients;
    Vector fitted_probs;  // clipped to [floor, 1 - floor]
    Matrix scores;
    Matrix information;
    bool converged = false;
    int iterations = 0;
    std::size_t clipped = 0;
};

struct NewtonOptions {
    double tolerance = 1e-8;
    int max_iterations = 100;
};

/// Bernoulli maximum likelihood by Newton steps with step halving, starting
/// at zero. Throws InfeasibleError for a constant response, RankError for a
/// singular Hessian and ConvergenceError after the iteration budget.
BinaryFit fit_binary_response(const Matrix& design, const Vector& response, LinkKind link,
                              std::vector<std::string> columns = {}, const NewtonOptions& options = {});

/// Probabilities and scores of a binary model with fixed coefficients.
BinaryFit evaluate_binary_model(const Matrix& design, const Vector& response, LinkKind link, const Vector& coefficients,
                                std::vector<std::string> columns = {});

/// Treatment propensity on the named covariate columns (empty = all of X).
BinaryFit fit_propensity(const Dataset& ds, const std::vector<std::string>& columns, LinkKind link);

/// Observation probability on the named columns of Z = (1, W, X...)
/// (empty = all of Z).
BinaryFit fit_missingness(const Dataset& ds, const std::vector<std::string>& columns, LinkKind link);

/// Multinomial logit for a treatment with several levels; level 0 is the
/// reference. `probabilities` is N x levels with rows summing to one.
struct MultinomialFit {
    int levels = 0;
    std::vector<std::string> columns;
    Matrix coefficients;  // K x (levels - 1)
    Matrix probabilities;
    Matrix scores;        // N x K(levels - 1), level-major blocks
    Matrix information;
    bool converged = false;
    int iterations = 0;
    std::size_t clipped = 0;
};

MultinomialFit fit_multinomial_logit(const Matrix& design, const std::vector<int>& level, int levels,
                                     std::vector<std::string> columns = {}, const NewtonOptions& options = {});

MultinomialFit fit_multinomial_propensity(const Dataset& ds, const std::vector<std::string>& columns = {});

nlohmann::json to_json(const BinaryFit& fit);

}  // namespace dwm
