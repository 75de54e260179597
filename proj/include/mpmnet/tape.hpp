#pragma once

#include <functional>
#include <random>
#include <vector>

#include "mpmnet/tensor.hpp"

namespace mpmnet {

// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Records a forward computation and replays it backward for gradients.
// One tape per forward pass; confined to a single thread.
class Tape {
public:
    Var leaf(Tensor value, bool requires_grad = false);

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }
    // Gradient accumulated by backward(); zeros if the node was never reached.
    Tensor grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[check(v)].needs; }

    // x:[n,in] W:[in,out] b:[out] -> [n,out]. Pass Var{} for no bias.
    Var affine(Var x, Var w, Var b);
    // x:[n,cin,h,w] k:[cout,cin,kh,kw] -> [n,cout,h-kh+1,w-kw+1]; valid, stride 1.
    Var conv2d(Var x, Var k);
    // b:[c] broadcast over [n,c,h,w].
    Var channel_bias(Var x, Var b);
    // 2x2 window, stride 2; odd extents padded with -inf on the high side.
    Var maxpool2d(Var x);

    Var relu(Var x);
    Var sigmoid(Var x);
    Var tanh_(Var x);
    Var log_(Var x);
    Var neg(Var x);
    Var scale(Var x, double c);
    Var add_const(Var x, double c);
    Var add(Var x, Var y);
    Var sub(Var x, Var y);
    Var mul(Var x, Var y);
    // Elementwise sqrt(x + sigma).
    Var sqrt_smoothed(Var x, double sigma);

    Var sum(Var x);
    // x:[n,...] -> [n]; sums everything but the leading dim.
    Var row_sum(Var x);
    Var dot(Var x, Var y);
    Var reshape(Var x, Shape s);
    Var select_rows(Var x, std::vector<std::int64_t> rows);

    // f:[n,d] -> [d]; column means.
    Var batch_mean(Var f);
    // f:[n,d] -> [d,d]; (1/n or 1/(n-1)) centered Gram + reg*I.
    Var batch_cov(Var f, double reg, bool biased = true);
    // a:[d], s:[d,d] symmetric PSD -> scalar sqrt(a'Sa + sigma).
    Var quad_form_sqrt(Var a, Var s, double sigma);

    // Inverted dropout; identity when train is false.
    Var dropout(Var x, double p, std::mt19937_64& rng, bool train);
    // logits:[n,k], labels in [0,k) -> scalar mean NLL (log-sum-exp stabilized).
    Var softmax_xent(Var logits, const std::vector<int>& labels);

    // Seeds d(root)=1 and accumulates gradients into every grad-flagged ancestor.
    void backward(Var root);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // empty until first accumulation
        bool needs = false;
        std::function<void(Tape&)> back;
    };

    int check(Var v) const;
    Var push(Tensor value, bool needs, std::function<void(Tape&)> back);
    Tensor& grad_buf(int id);
    bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }
    const Tensor& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    std::vector<Node> nodes_;
};

}  // namespace mpmnet
