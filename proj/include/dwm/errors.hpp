#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace dwm {

enum class ErrorCategory {
    schema,
    consistency,
    rank,
    convergence,
    infeasible,
    reliability,
    instability,
    config,
    registry,
};

std::string_view to_string(ErrorCategory category);

/// Process exit code used by the CLI: 2 config, 3 data, 4 numerical.
int exit_code(ErrorCategory category);

/// Base class of every error raised by the library. The category is what
/// the CLI reports in its machine-readable error object.
class Error : public std::runtime_error {
  public:
    Error(ErrorCategory category, const std::string& message)
        : std::runtime_error(message), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

  private:
    ErrorCategory category_;
};

class SchemaError : public Error {
  public:
    explicit SchemaError(const std::string& m) : Error(ErrorCategory::schema, m) {}
};

class ConsistencyError : public Error {
  public:
    explicit ConsistencyError(const std::string& m) : Error(ErrorCategory::consistency, m) {}
};

class RankError : public Error {
  public:
    explicit RankError(const std::string& m) : Error(ErrorCategory::rank, m) {}
};

/// Raised when an iterative solver exhausts its iteration budget. Carries
/// the last iterate so callers can inspect how far it got.
class ConvergenceError : public Error {
  public:
    ConvergenceError(const std::string& m, Eigen::VectorXd last_iterate)
        : Error(ErrorCategory::convergence, m), last_iterate_(std::move(last_iterate)) {}

    const Eigen::VectorXd& last_iterate() const noexcept { return last_iterate_; }

  private:
    Eigen::VectorXd last_iterate_;
};

/// Sample-level overlap failure: nothing left to estimate from.
class InfeasibleError : public Error {
  public:
    explicit InfeasibleError(const std::string& m) : Error(ErrorCategory::infeasible, m) {}
};

class ReliabilityError : public Error {
  public:
    explicit ReliabilityError(const std::string& m) : Error(ErrorCategory::reliability, m) {}
};

class InstabilityError : public Error {
  public:
    explicit InstabilityError(const std::string& m) : Error(ErrorCategory::instability, m) {}
};

class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& m) : Error(ErrorCategory::config, m) {}
};

class RegistryError : public Error {
  public:
    explicit RegistryError(const std::string& m) : Error(ErrorCategory::registry, m) {}
};

}  // namespace dwm
