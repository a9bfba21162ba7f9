#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvheat {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand extents do not fit the operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A configuration value makes the requested computation impossible.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Input data violates a documented invariant (boxes, coordinates, costs).
class ValidationError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

/// A spectrum handed to a real-output inverse is not Hermitian.
class SymmetryError : public Error {
public:
    using Error::Error;
};

/// An internal invariant broke, i.e. a construction bug upstream.
class InvariantError : public Error {
public:
    using Error::Error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// A loss or gradient became NaN or infinite.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Short machine-readable name of an error's category.
inline const char* error_kind(const std::exception& e) {
    if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const ValidationError*>(&e)) return "validation";
    if (dynamic_cast<const ParseError*>(&e)) return "parse";
    if (dynamic_cast<const SymmetryError*>(&e)) return "symmetry";
    if (dynamic_cast<const InvariantError*>(&e)) return "invariant";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric";
    return "internal";
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

}  // namespace mvheat
