#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dwm/linalg.hpp"

namespace dwm {

/// Treatment level whose potential outcome an estimation step targets.
/// Binary designs use control = 0 and treated = 1.
struct ArmSelector {
    int level = 1;

    static constexpr ArmSelector treated() { return {1}; }
    static constexpr ArmSelector control() { return {0}; }
};

/// Design matrix with named columns.
struct Design {
    Matrix values;
    std::vector<std::string> names;

    /// Columns picked by name, in the order given. Throws SchemaError on an
    /// unknown name.
    Design subset(const std::vector<std::string>& columns) const;
    Eigen::Index index_of(const std::string& name) const;
};

/// Observed sample: outcome with a presence mask, treatment level, the
/// observation indicator and covariates (first column is the intercept).
///
/// Immutable after construction. Unobserved outcomes are not stored as a
/// sentinel; reading one throws ConsistencyError.
class Dataset {
  public:
    /// `outcome` entries at rows with observed == 0 are ignored. An intercept
    /// column is prepended when the first covariate column is not constant 1.
    /// Throws SchemaError for bad treatment/observed codes and RankError for
    /// rank-deficient covariates.
    Dataset(const Vector& outcome, std::vector<std::uint8_t> observed, std::vector<int> treatment,
            const Matrix& covariates, std::vector<std::string> covariate_names, int levels = 2);

    std::size_t rows() const { return observed_.size(); }
    int levels() const { return levels_; }

    bool observed(std::size_t i) const { return observed_[i] != 0; }
    int treatment(std::size_t i) const { return treatment_[i]; }
    /// Observed outcome of row i; throws ConsistencyError if the row is masked.
    double outcome(std::size_t i) const;

    const std::vector<std::uint8_t>& observed_mask() const { return observed_; }
    const std::vector<int>& treatments() const { return treatment_; }
    const Matrix& covariates() const { return covariates_; }
    const std::vector<std::string>& covariate_names() const { return names_; }

    /// X with named columns ("intercept", then user covariates).
    Design covariate_design() const;
    /// Z = (1, W, X without intercept); multivalued designs expand W into
    /// dummies "W1".."WT" for levels 1..T.
    Design augmented_design() const;

    /// Treatment indicator for one level (1 where W == level).
    Vector treatment_indicator(int level) const;
    Vector observed_indicator() const;

    /// Rows with S = 1 and W = g. Throws InfeasibleError when empty.
    std::vector<std::size_t> split_by_arm(ArmSelector arm) const;

    /// New dataset from the given rows (duplicates allowed). Covariate rank is
    /// revalidated.
    Dataset subset(const std::vector<std::size_t>& rows) const;

    /// Outcome values of the given rows (all must be observed).
    Vector outcomes(const std::vector<std::size_t>& rows) const;

  private:
    Vector outcome_;
    std::vector<std::uint8_t> observed_;
    std::vector<int> treatment_;
    Matrix covariates_;
    std::vector<std::string> names_;
    int levels_;
};

/// Column mapping used by load_csv. An empty `observed` means S is derived
/// from the missing token.
struct ColumnMap {
    std::string outcome;
    std::string treatment;
    std::string observed;
    std::vector<std::string> covariates;
};

/// Reads a header-first CSV. Rows whose outcome cell equals `missing_token`
/// (or is empty) are unobserved; an explicit observed column must agree.
Dataset load_csv(const std::string& path, const ColumnMap& columns, const std::string& missing_token = "NA",
                 int levels = 2);

/// Writes columns (outcome, treatment, observed, covariates without the
/// intercept) with 17 significant digits; masked outcomes become `missing_token`.
void save_csv(const Dataset& ds, const std::string& path, const ColumnMap& columns,
              const std::string& missing_token = "NA");

/// Means and SDs of covariates and the observed outcome, by arm and
/// observation status.
nlohmann::json summarize(const Dataset& ds);

}  // namespace dwm
