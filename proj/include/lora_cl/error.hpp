#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lora_cl {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-convergence, non-finite values, training divergence.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// A state machine was driven out of order or holds inconsistent state.
class ContractError : public Error {
public:
    using Error::Error;
};

// A metric needs cells that were never evaluated.
class IncompleteDataError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

enum class FormatErrorKind {
    truncated_header,
    malformed_header,
    truncated_payload,
    unknown_dtype,
    bad_shape,
    offset_overlap,
    missing_tensor,
};

inline const char* to_string(FormatErrorKind k) {
    switch (k) {
    case FormatErrorKind::truncated_header: return "truncated_header";
    case FormatErrorKind::malformed_header: return "malformed_header";
    case FormatErrorKind::truncated_payload: return "truncated_payload";
    case FormatErrorKind::unknown_dtype: return "unknown_dtype";
    case FormatErrorKind::bad_shape: return "bad_shape";
    case FormatErrorKind::offset_overlap: return "offset_overlap";
    case FormatErrorKind::missing_tensor: return "missing_tensor";
    }
    return "unknown";
}

// Tensor-file parse failure. `offset` is the absolute byte offset in the file
// closest to the problem.
class FormatError : public Error {
public:
    FormatError(FormatErrorKind kind, std::uint64_t offset, const std::string& what)
        : Error(std::string(to_string(kind)) + " at byte " + std::to_string(offset) + ": " + what),
          kind_(kind), offset_(offset) {}

    FormatErrorKind kind() const noexcept { return kind_; }
    std::uint64_t offset() const noexcept { return offset_; }

private:
    FormatErrorKind kind_;
    std::uint64_t offset_;
};

} // namespace lora_cl
