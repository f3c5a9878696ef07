#pragma once

#include <stdexcept>
#include <string>

namespace nsi {

// Base class for all toolkit errors.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/axis mismatch between tensors.
struct dim_error : error {
    explicit dim_error(const std::string& msg) : error(msg) {}
};

// Violated API precondition (non-scalar loss, bad mode, ...).
struct contract_error : error {
    explicit contract_error(const std::string& msg) : error(msg) {}
};

// Bad user-facing configuration (CLI, experiment spec, grids).
struct config_error : error {
    explicit config_error(const std::string& msg) : error(msg) {}
};

// On-disk container problems. `code` distinguishes failure kinds.
struct format_error : error {
    enum class kind { bad_magic, version_mismatch, truncated, shape_inconsistent, io };
    kind code;
    format_error(kind k, const std::string& msg) : error(msg), code(k) {}
};

// NaN/Inf or other numerical breakdown.
struct numeric_error : error {
    explicit numeric_error(const std::string& msg) : error(msg) {}
};

// Training aborted (NaN loss); carries the diagnostic trace.
struct training_error : error {
    std::string trace;
    training_error(const std::string& msg, std::string trace_)
        : error(msg), trace(std::move(trace_)) {}
};

}  // namespace nsi
