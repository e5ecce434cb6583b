#include "dwm/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "dwm/errors.hpp"
#include "dwm/io_util.hpp"

namespace dwm {

Eigen::Index Design::index_of(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
        std::string known;
        for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
        throw SchemaError("unknown design column '" + name + "' (available: " + known + ")");
    }
    return static_cast<Eigen::Index>(it - names.begin());
}

Design Design::subset(const std::vector<std::string>& columns) const {
    Design out;
    out.values.resize(values.rows(), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) {
        out.values.col(static_cast<Eigen::Index>(j)) = values.col(index_of(columns[j]));
    }
    out.names = columns;
    return out;
}

namespace {

bool is_intercept(const Matrix& m) {
    return m.cols() > 0 && m.rows() > 0 && (m.col(0).array() == 1.0).all();
}

}  // namespace

Dataset::Dataset(const Vector& outcome, std::vector<std::uint8_t> observed, std::vector<int> treatment,
                 const Matrix& covariates, std::vector<std::string> covariate_names, int levels)
    : observed_(std::move(observed)), treatment_(std::move(treatment)), levels_(levels) {
    const std::size_t n = observed_.size();
    if (n == 0) throw SchemaError("dataset has no rows");
    if (levels_ < 2) throw SchemaError("treatment needs at least two levels");
    if (treatment_.size() != n || static_cast<std::size_t>(outcome.size()) != n ||
        static_cast<std::size_t>(covariates.rows()) != n) {
        throw SchemaError("outcome, treatment, observed and covariates must have the same row count");
    }
    if (static_cast<std::size_t>(covariates.cols()) != covariate_names.size()) {
        throw SchemaError("covariate names do not match covariate columns");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (treatment_[i] < 0 || treatment_[i] >= levels_) {
            throw SchemaError("row " + std::to_string(i) + ": treatment level " + std::to_string(treatment_[i]) +
                              " outside 0.." + std::to_string(levels_ - 1));
        }
        if (observed_[i] > 1) throw SchemaError("row " + std::to_string(i) + ": observed indicator must be 0 or 1");
        if (!std::isfinite(covariates.row(static_cast<Eigen::Index>(i)).sum())) {
            throw SchemaError("row " + std::to_string(i) + ": missing or non-finite covariate");
        }
    }

    if (is_intercept(covariates)) {
        covariates_ = covariates;
        names_ = std::move(covariate_names);
        names_[0] = "intercept";
    } else {
        covariates_.resize(covariates.rows(), covariates.cols() + 1);
        covariates_.col(0).setOnes();
        covariates_.rightCols(covariates.cols()) = covariates;
        names_.reserve(covariate_names.size() + 1);
        names_.push_back("intercept");
        for (auto& name : covariate_names) names_.push_back(std::move(name));
    }

    const auto dependent = dependent_columns(covariates_);
    if (!dependent.empty()) {
        std::string cols;
        for (auto j : dependent) cols += (cols.empty() ? "" : ", ") + names_[j];
        throw RankError("covariate matrix is rank deficient; dependent columns: " + cols);
    }

    outcome_ = Vector::Constant(static_cast<Eigen::Index>(n), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < n; ++i) {
        if (!observed_[i]) continue;
        const double y = outcome[static_cast<Eigen::Index>(i)];
        if (!std::isfinite(y)) {
            throw ConsistencyError("row " + std::to_string(i) + ": observed = 1 but the outcome is missing");
        }
        outcome_[static_cast<Eigen::Index>(i)] = y;
    }
}

double Dataset::outcome(std::size_t i) const {
    if (!observed_[i]) throw ConsistencyError("row " + std::to_string(i) + ": outcome is not observed");
    return outcome_[static_cast<Eigen::Index>(i)];
}

Vector Dataset::outcomes(const std::vector<std::size_t>& rows) const {
    Vector out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) out[static_cast<Eigen::Index>(k)] = outcome(rows[k]);
    return out;
}

Design Dataset::covariate_design() const { return Design{covariates_, names_}; }

Design Dataset::augmented_design() const {
    const Eigen::Index n = covariates_.rows();
    const Eigen::Index dummies = levels_ - 1;
    Design z;
    z.values.resize(n, covariates_.cols() + dummies);
    z.values.col(0).setOnes();
    z.names.push_back("intercept");
    for (int g = 1; g < levels_; ++g) {
        z.values.col(g) = treatment_indicator(g);
        z.names.push_back(levels_ == 2 ? std::string("W") : "W" + std::to_string(g));
    }
    z.values.rightCols(covariates_.cols() - 1) = covariates_.rightCols(covariates_.cols() - 1);
    for (std::size_t j = 1; j < names_.size(); ++j) z.names.push_back(names_[j]);
    return z;
}

Vector Dataset::treatment_indicator(int level) const {
    Vector v(static_cast<Eigen::Index>(rows()));
    for (std::size_t i = 0; i < rows(); ++i) v[static_cast<Eigen::Index>(i)] = treatment_[i] == level ? 1.0 : 0.0;
    return v;
}

Vector Dataset::observed_indicator() const {
    Vector v(static_cast<Eigen::Index>(rows()));
    for (std::size_t i = 0; i < rows(); ++i) v[static_cast<Eigen::Index>(i)] = observed_[i];
    return v;
}

std::vector<std::size_t> Dataset::split_by_arm(ArmSelector arm) const {
    if (arm.level < 0 || arm.level >= levels_) throw ConfigError("arm index outside treatment levels");
    std::vector<std::size_t> rows_out;
    for (std::size_t i = 0; i < rows(); ++i) {
        if (observed_[i] && treatment_[i] == arm.level) rows_out.push_back(i);
    }
    if (rows_out.empty()) {
        throw InfeasibleError("no observed rows in arm " + std::to_string(arm.level) + " (overlap failure)");
    }
    return rows_out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows_in) const {
    const auto m = static_cast<Eigen::Index>(rows_in.size());
    Vector y(m);
    std::vector<std::uint8_t> s(rows_in.size());
    std::vector<int> w(rows_in.size());
    for (std::size_t k = 0; k < rows_in.size(); ++k) {
        y[static_cast<Eigen::Index>(k)] = outcome_[static_cast<Eigen::Index>(rows_in[k])];
        s[k] = observed_[rows_in[k]];
        w[k] = treatment_[rows_in[k]];
    }
    return Dataset(y, std::move(s), std::move(w), take_rows(covariates_, rows_in), names_, levels_);
}

// ---------------------------------------------------------------------------
// CSV

namespace {

bool parse_double(const std::string& cell, double& out) {
    const char* b = cell.data();
    const char* e = cell.data() + cell.size();
    while (b < e && *b == ' ') ++b;
    while (e > b && e[-1] == ' ') --e;
    if (b == e) return false;
    if (*b == '+') ++b;
    auto res = std::from_chars(b, e, out);
    return res.ec == std::errc() && res.ptr == e;
}

int parse_indicator(const std::string& cell, std::size_t row, const std::string& column, int levels) {
    double v = 0.0;
    if (!parse_double(cell, v) || v != std::floor(v) || v < 0 || v >= levels) {
        throw SchemaError("row " + std::to_string(row) + ": column '" + column + "' has invalid value '" + cell +
                          "'");
    }
    return static_cast<int>(v);
}

std::size_t column_index(const std::vector<std::string>& header, const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("column '" + name + "' not found in CSV header");
    return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

Dataset load_csv(const std::string& path, const ColumnMap& columns, const std::string& missing_token, int levels) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("'" + path + "' has no header row");
    const auto header = split_csv_line(line);

    const std::size_t y_col = column_index(header, columns.outcome);
    const std::size_t w_col = column_index(header, columns.treatment);
    const bool has_s = !columns.observed.empty();
    const std::size_t s_col = has_s ? column_index(header, columns.observed) : 0;
    std::vector<std::size_t> x_cols;
    for (const auto& c : columns.covariates) x_cols.push_back(column_index(header, c));

    std::vector<double> y;
    std::vector<std::uint8_t> s;
    std::vector<int> w;
    std::vector<double> x;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw SchemaError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                              " fields, found " + std::to_string(cells.size()));
        }
        const std::string& ycell = cells[y_col];
        const bool missing = ycell.empty() || ycell == missing_token;
        double yv = std::numeric_limits<double>::quiet_NaN();
        if (!missing && !parse_double(ycell, yv)) {
            throw SchemaError("row " + std::to_string(row) + ": outcome '" + ycell + "' is not numeric");
        }
        int sv = missing ? 0 : 1;
        if (has_s) {
            sv = parse_indicator(cells[s_col], row, columns.observed, 2);
            if (sv == 1 && missing) {
                throw ConsistencyError("row " + std::to_string(row) + ": observed = 1 but the outcome is missing");
            }
        }
        w.push_back(parse_indicator(cells[w_col], row, columns.treatment, levels));
        s.push_back(static_cast<std::uint8_t>(sv));
        y.push_back(sv ? yv : std::numeric_limits<double>::quiet_NaN());
        for (std::size_t j = 0; j < x_cols.size(); ++j) {
            double xv = 0.0;
            if (!parse_double(cells[x_cols[j]], xv) || !std::isfinite(xv)) {
                throw SchemaError("row " + std::to_string(row) + ": covariate '" + columns.covariates[j] +
                                  "' is missing or not numeric");
            }
            x.push_back(xv);
        }
        ++row;
    }
    if (row == 0) throw SchemaError("'" + path + "' has no data rows");

    const auto n = static_cast<Eigen::Index>(row);
    const auto p = static_cast<Eigen::Index>(x_cols.size());
    Matrix xm(n, p);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < p; ++j) xm(i, j) = x[static_cast<std::size_t>(i * p + j)];
    Vector yv = Eigen::Map<Vector>(y.data(), n);
    return Dataset(yv, std::move(s), std::move(w), xm, columns.covariates, levels);
}

void save_csv(const Dataset& ds, const std::string& path, const ColumnMap& columns,
              const std::string& missing_token) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << columns.outcome << ',' << columns.treatment;
    if (!columns.observed.empty()) out << ',' << columns.observed;
    const auto& names = ds.covariate_names();
    for (std::size_t j = 1; j < names.size(); ++j) out << ',' << names[j];
    out << '\n';
    const Matrix& x = ds.covariates();
    for (std::size_t i = 0; i < ds.rows(); ++i) {
        if (ds.observed(i)) {
            out << ds.outcome(i);
        } else {
            out << missing_token;
        }
        out << ',' << ds.treatment(i);
        if (!columns.observed.empty()) out << ',' << (ds.observed(i) ? 1 : 0);
        for (Eigen::Index j = 1; j < x.cols(); ++j) out << ',' << x(static_cast<Eigen::Index>(i), j);
        out << '\n';
    }
    write_file_atomic(path, out.str());
}

nlohmann::json summarize(const Dataset& ds) {
    nlohmann::json j;
    j["rows"] = ds.rows();
    j["levels"] = ds.levels();
    const Matrix& x = ds.covariates();
    const auto& names = ds.covariate_names();

    auto stats = [&](auto&& include) {
        nlohmann::json group;
        std::size_t count = 0;
        std::vector<double> sum(names.size(), 0.0), sq(names.size(), 0.0);
        double ysum = 0.0, ysq = 0.0;
        std::size_t ycount = 0;
        for (std::size_t i = 0; i < ds.rows(); ++i) {
            if (!include(i)) continue;
            ++count;
            for (std::size_t k = 1; k < names.size(); ++k) {
                const double v = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
                sum[k] += v;
                sq[k] += v * v;
            }
            if (ds.observed(i)) {
                const double v = ds.outcome(i);
                ysum += v;
                ysq += v * v;
                ++ycount;
            }
        }
        group["count"] = count;
        auto moments = [](double s, double q, std::size_t c) {
            nlohmann::json m;
            if (c == 0) return m;
            const double mean = s / static_cast<double>(c);
            const double var = c > 1 ? (q - static_cast<double>(c) * mean * mean) / static_cast<double>(c - 1) : 0.0;
            m["mean"] = mean;
            m["sd"] = std::sqrt(std::max(var, 0.0));
            return m;
        };
        for (std::size_t k = 1; k < names.size(); ++k) group["covariates"][names[k]] = moments(sum[k], sq[k], count);
        group["outcome"] = moments(ysum, ysq, ycount);
        group["observed_count"] = ycount;
        return group;
    };

    for (int g = 0; g < ds.levels(); ++g) {
        const std::string key = ds.levels() == 2 ? (g == 1 ? "treated" : "control") : "level_" + std::to_string(g);
        j["by_arm"][key] = stats([&](std::size_t i) { return ds.treatment(i) == g; });
        j["by_arm"][key]["observed"] = stats([&](std::size_t i) { return ds.treatment(i) == g && ds.observed(i); });
        j["by_arm"][key]["missing"] = stats([&](std::size_t i) { return ds.treatment(i) == g && !ds.observed(i); });
    }
    return j;
}

}  // namespace dwm
