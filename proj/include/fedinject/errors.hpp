#pragma once

#include <stdexcept>
#include <string>

namespace fedinject {

// Error taxonomy. Each category maps to a distinct failure class so callers
// (and the CLI exit-code logic) can tell misuse apart from bad input.

/// Shape or axis mismatch between tensors.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A value outside its admissible domain (labels, probabilities, sizes).
class DomainError : public std::runtime_error {
public:
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Caller-supplied data is incomplete or malformed (missing modality, empty batch).
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API contract violation: structurally incompatible models, non-scalar loss, etc.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// The model cannot handle the request (untrained modality at inference time).
class CapabilityError : public std::runtime_error {
public:
    explicit CapabilityError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed serialized payload (bad magic, truncation, inconsistent lengths).
class ParseError : public std::runtime_error {
public:
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace fedinject
