#pragma once

#include <stdexcept>
#include <string>

namespace star {

// Shape disagreement between tensors or between a tensor and an expected layout.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data (STT files, traces, manifests).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// A value that is structurally valid but semantically unusable
// (overlapping index ranges, empty text block, count out of range, ...).
class ArgumentError : public std::runtime_error {
public:
    explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

// A prune schedule that violates the R < P rule or is otherwise unsatisfiable.
class ConstraintError : public std::runtime_error {
public:
    explicit ConstraintError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid model or run configuration.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace star
