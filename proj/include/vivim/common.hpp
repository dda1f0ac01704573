#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vivim {

// Base class for all errors raised by the library.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape/extent violations (mismatched operands, bad reshape, ...).
class ShapeError : public Error {
  public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
  public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Raised when the tensor allocator would exceed the configured budget.
class MemoryLimitError : public Error {
  public:
    explicit MemoryLimitError(const std::string& msg) : Error(msg) {}
};

// Malformed files (checkpoints, images, configs).
class FormatError : public Error {
  public:
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

using Shape = std::vector<std::size_t>;

namespace detail {

inline void format_into(std::ostringstream&) {}

template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    format_into(os, rest...);
}

}  // namespace detail

// Small helper for building error messages without a formatting dependency.
template <class... Args>
std::string str_cat(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    return os.str();
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

}  // namespace vivim
