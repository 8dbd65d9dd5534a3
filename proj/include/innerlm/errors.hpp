#pragma once

#include <stdexcept>
#include <string>

namespace innerlm {

// Shape/precondition violations in tensor ops and model assembly.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad argument values (ranges, duplicate depths, empty prompts, ...).
struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem problems: missing files, short reads, unwritable paths.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Structurally invalid files: bad magic, version or hash mismatch, schema violations.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss or gradient during optimization.
struct TrainingOverflowError : std::runtime_error {
    explicit TrainingOverflowError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace innerlm
