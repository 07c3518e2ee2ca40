#pragma once

#include <stdexcept>
#include <string>

namespace cbir {

enum class ErrorCode {
    usage,
    invalid_argument,
    io,
    missing_artifact,
    malformed_header,
    truncated_payload,
    zero_dimensions,
    dimension_mismatch,
    configuration_failure,
    zero_vector,
    empty_input,
    degenerate_labels,
    version_mismatch,
    corrupted_payload,
    divergence,
};

const char* to_string(ErrorCode code);

// Process exit status for a given error: 1 usage, 2 data, 3 numerical.
int exit_code(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace cbir
