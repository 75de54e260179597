#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpmnet/mpm_types.hpp"
#include "mpmnet/tape.hpp"

namespace mpmnet::net {

enum class DatasetKind { Mnist, Cifar10 };
enum class HeadKind { Softmax2, Mpm1 };

DatasetKind parse_dataset_kind(const std::string& s);
HeadKind parse_head_kind(const std::string& s);
std::string to_string(DatasetKind k);
std::string to_string(HeadKind k);

struct LayerSpec {
    enum class Kind { Conv, Relu, MaxPool, Dropout, Affine };
    Kind kind;
    std::int64_t channels = 0;  // Conv: output channels; Affine: output units
    std::int64_t ksize = 0;     // Conv kernel extent
    double p = 0.5;             // Dropout probability
    std::string name;
};

struct NetworkArch {
    DatasetKind dataset;
    HeadKind head;
    Shape input_shape;  // {c, h, w}
    std::vector<LayerSpec> layers;
    std::int64_t feature_dim = 0;
};

NetworkArch build_arch(DatasetKind dataset, HeadKind head);

// Ordered named parameter tensors of the extractor plus the softmax head.
struct ModelParams {
    std::vector<std::pair<std::string, Tensor>> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const;
    std::int64_t count() const;  // total scalar parameters
    bool all_finite() const;
};

// Scaled-uniform init (variance 2/fan-in), zero biases.
ModelParams init_params(const NetworkArch& arch, std::mt19937_64& rng);

// Registers every parameter tensor as a tape leaf, in ModelParams order.
std::vector<Var> param_leaves(Tape& t, const ModelParams& p, bool requires_grad);

// Runs the feature extractor; batch:[n,c,h,w] -> [n,feature_dim].
// Dropout is active only when train is true (rng required then).
Var feature_forward(Tape& t, const NetworkArch& arch, const ModelParams& p, const std::vector<Var>& leaves,
                    Var batch, bool train = false, std::mt19937_64* rng = nullptr);

// Softmax head logits:[n,2] from features.
Var head_logits(Tape& t, const ModelParams& p, const std::vector<Var>& leaves, Var features);

// Class indices (0 = positive class) for either head. The MPM head needs a
// frozen solution: sign(a*'g(z) - b*) >= 0 maps to class 0.
std::vector<int> predict(const NetworkArch& arch, const ModelParams& p, const Tensor& batch,
                         const std::optional<mpm::MpmSolution>& sol);

}  // namespace mpmnet::net
