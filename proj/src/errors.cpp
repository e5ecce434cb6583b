#include "dwm/errors.hpp"

namespace dwm {

std::string_view to_string(ErrorCategory category) {
    switch (category) {
        case ErrorCategory::schema: return "schema";
        case ErrorCategory::consistency: return "consistency";
        case ErrorCategory::rank: return "rank";
        case ErrorCategory::convergence: return "convergence";
        case ErrorCategory::infeasible: return "infeasible";
        case ErrorCategory::reliability: return "reliability";
        case ErrorCategory::instability: return "instability";
        case ErrorCategory::config: return "config";
        case ErrorCategory::registry: return "registry";
    }
    return "unknown";
}

int exit_code(ErrorCategory category) {
    switch (category) {
        case ErrorCategory::config:
        case ErrorCategory::registry:
            return 2;
        case ErrorCategory::schema:
        case ErrorCategory::consistency:
        case ErrorCategory::infeasible:
            return 3;
        case ErrorCategory::rank:
        case ErrorCategory::convergence:
        case ErrorCategory::reliability:
        case ErrorCategory::instability:
            return 4;
    }
    return 1;
}

}  // namespace dwm
