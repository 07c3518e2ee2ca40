#include "cbir/error.hpp"

namespace cbir {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::usage: return "usage";
        case ErrorCode::invalid_argument: return "invalid argument";
        case ErrorCode::io: return "i/o";
        case ErrorCode::missing_artifact: return "missing artifact";
        case ErrorCode::malformed_header: return "malformed header";
        case ErrorCode::truncated_payload: return "truncated payload";
        case ErrorCode::zero_dimensions: return "zero dimensions";
        case ErrorCode::dimension_mismatch: return "dimension mismatch";
        case ErrorCode::configuration_failure: return "configuration failure";
        case ErrorCode::zero_vector: return "zero vector";
        case ErrorCode::empty_input: return "empty input";
        case ErrorCode::degenerate_labels: return "degenerate labels";
        case ErrorCode::version_mismatch: return "version mismatch";
        case ErrorCode::corrupted_payload: return "corrupted payload";
        case ErrorCode::divergence: return "divergence";
    }
    return "unknown";
}

int exit_code(ErrorCode code) {
    switch (code) {
        case ErrorCode::usage:
        case ErrorCode::invalid_argument:
            return 1;
        case ErrorCode::divergence:
        case ErrorCode::zero_vector:
            return 3;
        default:
            return 2;
    }
}

}  // namespace cbir
