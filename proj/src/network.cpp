#include "mpmnet/network.hpp"

#include <algorithm>
#include <cmath>

namespace mpmnet::net {

DatasetKind parse_dataset_kind(const std::string& s) {
    if (s == "mnist") return DatasetKind::Mnist;
    if (s == "cifar10") return DatasetKind::Cifar10;
    throw ConfigError("unknown dataset kind '" + s + "'");
}

HeadKind parse_head_kind(const std::string& s) {
    if (s == "softmax" || s == "softmax-2") return HeadKind::Softmax2;
    if (s == "mpm" || s == "mpm-1") return HeadKind::Mpm1;
    throw ConfigError("unknown head kind '" + s + "'");
}

std::string to_string(DatasetKind k) { return k == DatasetKind::Mnist ? "mnist" : "cifar10"; }
std::string to_string(HeadKind k) { return k == HeadKind::Softmax2 ? "softmax" : "mpm"; }

NetworkArch build_arch(DatasetKind dataset, HeadKind head) {
    NetworkArch arch;
    arch.dataset = dataset;
    arch.head = head;
    using K = LayerSpec::Kind;
    if (dataset == DatasetKind::Mnist) {
        arch.input_shape = {1, 28, 28};
        arch.layers = {
            {K::Conv, 10, 5, 0, "conv1"}, {K::Relu, 0, 0, 0, "relu1"},    {K::MaxPool, 0, 0, 0, "pool1"},
            {K::Conv, 20, 5, 0, "conv2"}, {K::Relu, 0, 0, 0, "relu2"},    {K::Dropout, 0, 0, 0.5, "drop1"},
            {K::MaxPool, 0, 0, 0, "pool2"}, {K::Affine, 50, 0, 0, "fc1"}, {K::Relu, 0, 0, 0, "relu3"},
        };
        arch.feature_dim = 50;
    } else {
        arch.input_shape = {3, 32, 32};
        arch.layers = {
            {K::Conv, 64, 3, 0, "conv1"},  {K::Relu, 0, 0, 0, "relu1"},
            {K::Conv, 64, 3, 0, "conv2"},  {K::Relu, 0, 0, 0, "relu2"},
            {K::MaxPool, 0, 0, 0, "pool1"},
            {K::Conv, 128, 3, 0, "conv3"}, {K::Relu, 0, 0, 0, "relu3"},
            {K::Conv, 128, 3, 0, "conv4"}, {K::Relu, 0, 0, 0, "relu4"},
            {K::MaxPool, 0, 0, 0, "pool2"},
            {K::Affine, 256, 0, 0, "fc1"}, {K::Relu, 0, 0, 0, "relu5"},
        };
        arch.feature_dim = 256;
    }
    return arch;
}

Tensor& ModelParams::at(const std::string& name) {
    for (auto& [n, t] : tensors)
        if (n == name) return t;
    throw StateError("no parameter named '" + name + "'");
}

const Tensor& ModelParams::at(const std::string& name) const {
    for (auto& [n, t] : tensors)
        if (n == name) return t;
    throw StateError("no parameter named '" + name + "'");
}

bool ModelParams::has(const std::string& name) const {
    for (auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

std::int64_t ModelParams::count() const {
    std::int64_t c = 0;
    for (auto& [n, t] : tensors) c += t.numel();
    return c;
}

bool ModelParams::all_finite() const {
    for (auto& [n, t] : tensors)
        if (!t.all_finite()) return false;
    return true;
}

ModelParams init_params(const NetworkArch& arch, std::mt19937_64& rng) {
    ModelParams p;
    Shape cur = arch.input_shape;  // {c,h,w} during conv stage
    bool flat = false;
    std::int64_t flat_dim = 0;
    auto he_uniform = [&rng](Shape s, std::int64_t fan_in) {
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        return Tensor::uniform(std::move(s), -limit, limit, rng);
    };
    for (const auto& l : arch.layers) {
        switch (l.kind) {
            case LayerSpec::Kind::Conv: {
                const std::int64_t cin = cur[0];
                p.tensors.emplace_back(l.name + ".k", he_uniform({l.channels, cin, l.ksize, l.ksize}, cin * l.ksize * l.ksize));
                p.tensors.emplace_back(l.name + ".b", Tensor::zeros({l.channels}));
                cur = {l.channels, cur[1] - l.ksize + 1, cur[2] - l.ksize + 1};
                break;
            }
            case LayerSpec::Kind::MaxPool:
                cur = {cur[0], (cur[1] + 1) / 2, (cur[2] + 1) / 2};
                break;
            case LayerSpec::Kind::Affine: {
                if (!flat) {
                    flat_dim = cur[0] * cur[1] * cur[2];
                    flat = true;
                }
                p.tensors.emplace_back(l.name + ".w", he_uniform({flat_dim, l.channels}, flat_dim));
                p.tensors.emplace_back(l.name + ".b", Tensor::zeros({l.channels}));
                flat_dim = l.channels;
                break;
            }
            case LayerSpec::Kind::Relu:
            case LayerSpec::Kind::Dropout:
                break;
        }
    }
    if (arch.head == HeadKind::Softmax2) {
        p.tensors.emplace_back("head.w", he_uniform({arch.feature_dim, 2}, arch.feature_dim));
        p.tensors.emplace_back("head.b", Tensor::zeros({2}));
    }
    return p;
}

std::vector<Var> param_leaves(Tape& t, const ModelParams& p, bool requires_grad) {
    std::vector<Var> leaves;
    leaves.reserve(p.tensors.size());
    for (const auto& [n, tensor] : p.tensors) leaves.push_back(t.leaf(tensor, requires_grad));
    return leaves;
}

static Var leaf_of(const ModelParams& p, const std::vector<Var>& leaves, const std::string& name) {
    for (std::size_t i = 0; i < p.tensors.size(); ++i)
        if (p.tensors[i].first == name) return leaves[i];
    throw StateError("no parameter leaf named '" + name + "'");
}

Var feature_forward(Tape& t, const NetworkArch& arch, const ModelParams& p, const std::vector<Var>& leaves,
                    Var batch, bool train, std::mt19937_64* rng) {
    const Tensor& in = t.value(batch);
    if (in.rank() != 4 || in.dim(1) != arch.input_shape[0] || in.dim(2) != arch.input_shape[1] ||
        in.dim(3) != arch.input_shape[2])
        throw DimensionError("feature_forward: batch shape " + shape_str(in.shape()) + " does not match " +
                             to_string(arch.dataset));
    if (train && rng == nullptr) throw StateError("feature_forward: train mode needs an rng for dropout");
    Var x = batch;
    bool flat = false;
    for (const auto& l : arch.layers) {
        switch (l.kind) {
            case LayerSpec::Kind::Conv:
                x = t.channel_bias(t.conv2d(x, leaf_of(p, leaves, l.name + ".k")), leaf_of(p, leaves, l.name + ".b"));
                break;
            case LayerSpec::Kind::Relu:
                x = t.relu(x);
                break;
            case LayerSpec::Kind::MaxPool:
                x = t.maxpool2d(x);
                break;
            case LayerSpec::Kind::Dropout:
                if (train) x = t.dropout(x, l.p, *rng, true);
                break;
            case LayerSpec::Kind::Affine: {
                if (!flat) {
                    const Tensor& v = t.value(x);
                    x = t.reshape(x, {v.dim(0), v.numel() / v.dim(0)});
                    flat = true;
                }
                x = t.affine(x, leaf_of(p, leaves, l.name + ".w"), leaf_of(p, leaves, l.name + ".b"));
                break;
            }
        }
        if (!t.value(x).all_finite()) throw NumericError("non-finite activation after layer '" + l.name + "'");
    }
    return x;
}

Var head_logits(Tape& t, const ModelParams& p, const std::vector<Var>& leaves, Var features) {
    return t.affine(features, leaf_of(p, leaves, "head.w"), leaf_of(p, leaves, "head.b"));
}

std::vector<int> predict(const NetworkArch& arch, const ModelParams& p, const Tensor& batch,
                         const std::optional<mpm::MpmSolution>& sol) {
    Tape t;
    auto leaves = param_leaves(t, p, false);
    Var f = feature_forward(t, arch, p, leaves, t.leaf(batch), false, nullptr);
    const std::int64_t n = t.value(f).dim(0);
    std::vector<int> out(static_cast<std::size_t>(n));
    if (arch.head == HeadKind::Softmax2) {
        const Tensor& z = t.value(head_logits(t, p, leaves, f));
        for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = z.at2(i, 0) >= z.at2(i, 1) ? 0 : 1;
    } else {
        if (!sol.has_value()) throw StateError("predict: MPM head requires a frozen MpmSolution");
        const Tensor& fv = t.value(f);
        const std::int64_t d = fv.dim(1);
        if (sol->a_star.numel() != d) throw DimensionError("predict: a* dimension mismatch");
        for (std::int64_t i = 0; i < n; ++i) {
            double v = -sol->b_star;
            for (std::int64_t j = 0; j < d; ++j) v += sol->a_star[j] * fv.at2(i, j);
            out[static_cast<std::size_t>(i)] = v >= 0 ? 0 : 1;
        }
    }
    return out;
}

}  // namespace mpmnet::net
