#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace lacoste {

// Error taxonomy: argument_error for malformed call arguments (shape mismatch,
// out-of-range index), data_error for bad content (nonpositive depth, missing
// files), config_error for unusable run configuration, provider_error for
// failures raised by pluggable providers.
struct argument_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct provider_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

inline double uniform_real(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) {  // inclusive
    return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

inline double normal_real(Rng& rng, double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

}  // namespace lacoste
