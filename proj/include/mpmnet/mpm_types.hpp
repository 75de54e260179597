#pragma once

#include "mpmnet/tensor.hpp"

namespace mpmnet::mpm {

// Frozen per-class feature statistics.
struct ClassStats {
    Tensor mean_x;  // [d]
    Tensor mean_y;  // [d]
    Tensor cov_x;   // [d,d]
    Tensor cov_y;   // [d,d]
    std::int64_t n_x = 0;
    std::int64_t n_y = 0;
};

// Frozen decision parameters of the MPM head.
struct MpmSolution {
    Tensor a_star;  // [d]
    double b_star = 0;
    double alpha_star = 0;
};

}  // namespace mpmnet::mpm
