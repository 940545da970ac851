#ifndef EVIFUSE_ERROR_HPP
#define EVIFUSE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace evifuse {

// Argument outside its documented range.
struct domain_error : std::runtime_error {
    explicit domain_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor/volume dimensions.
struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Totally conflicting evidence (kappa ~ 1) in Dempster combination.
struct conflict_error : std::runtime_error {
    explicit conflict_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or truncated file.
struct format_error : std::runtime_error {
    explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Input that is valid in shape but unusable (e.g. zero-variance volume).
struct degenerate_input_error : std::runtime_error {
    explicit degenerate_input_error(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse (stale cache, missing forward before backward, ...).
struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace evifuse

#endif
