#pragma once

#include <optional>

#include "mpmnet/mpm_types.hpp"
#include "mpmnet/network.hpp"

namespace mpmnet {

// A trained binary classifier: feature extractor plus head state.
// Class index 0 is the positive digit, 1 the rest.
struct BinaryModel {
    net::NetworkArch arch;
    net::ModelParams params;
    int positive_digit = 0;

    // MPM head state (unused for the softmax head)
    double lambda = 0.0;
    std::optional<mpm::MpmSolution> solution;
    std::optional<mpm::ClassStats> frozen_stats;

    std::vector<int> predict(const Tensor& batch) const {
        return net::predict(arch, params, batch, solution);
    }

    // Pre-softmax logits [n,2]. MPM head: (v, 0) with v = a*'g(z) - b*, so
    // softmax(v,0) = (S(v), 1 - S(v)).
    Tensor logits(const Tensor& batch) const;

    // Decision values a*'g(z) - b* (MPM head only).
    std::vector<double> decision_values(const Tensor& batch) const;
};

}  // namespace mpmnet
