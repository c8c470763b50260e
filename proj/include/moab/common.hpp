#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace moab {

// Single RNG type used everywhere; determinism contracts assume one stream
// consumed in a fixed order by a single thread.
using Rng = std::mt19937_64;

// Dimension / shape mismatches. Messages name the offending shapes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad runtime state: missing gradients, non-finite losses.
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed files. Messages carry line numbers or byte offsets.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid run configuration, rejected before any compute.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace moab
