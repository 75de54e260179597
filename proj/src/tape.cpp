#include "mpmnet/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <utility>

namespace mpmnet {

int Tape::check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw StateError("invalid Var handle");
    return v.id;
}

Var Tape::push(Tensor value, bool needs, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs = needs;
    if (needs) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}

Tensor Tape::grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(check(v))];
    if (n.grad.empty()) return Tensor::zeros(n.value.shape());
    return n.grad;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

void Tape::backward(Var root) {
    int r = check(root);
    if (nodes_[static_cast<std::size_t>(r)].value.numel() != 1)
        throw DimensionError("backward root must be a scalar");
    grad_buf(r)[0] = 1.0;
    for (int i = r; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.needs && n.back && !n.grad.empty()) n.back(*this);
    }
}

// ---------------------------------------------------------------------------

Var Tape::affine(Var xv, Var wv, Var bv) {
    int xi = check(xv), wi = check(wv);
    const Tensor& x = nodes_[xi].value;
    const Tensor& w = nodes_[wi].value;
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
        throw DimensionError("affine: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const std::int64_t n = x.dim(0), in = x.dim(1), out = w.dim(1);
    int bi = -1;
    if (bv.valid()) {
        bi = check(bv);
        const Tensor& b = nodes_[bi].value;
        if (b.numel() != out) throw DimensionError("affine: bias size mismatch");
    }
    Tensor y({n, out});
    for (std::int64_t i = 0; i < n; ++i) {
        double* yr = &y.at2(i, 0);
        if (bi >= 0) std::memcpy(yr, nodes_[bi].value.data(), static_cast<std::size_t>(out) * sizeof(double));
        const double* xr = &x.at2(i, 0);
        for (std::int64_t k = 0; k < in; ++k) {
            const double xv_ = xr[k];
            const double* wr = &w.at2(k, 0);
            for (std::int64_t j = 0; j < out; ++j) yr[j] += xv_ * wr[j];
        }
    }
    bool req = nodes_[xi].needs || nodes_[wi].needs || (bi >= 0 && nodes_[bi].needs);
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), req, [self, xi, wi, bi, n, in, out](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& x = t.nodes_[xi].value;
        const Tensor& w = t.nodes_[wi].value;
        if (t.nodes_[xi].needs) {
            Tensor& dx = t.grad_buf(xi);
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t k = 0; k < in; ++k) {
                    const double* wr = &w.at2(k, 0);
                    const double* gr = &g.at2(i, 0);
                    double acc = 0;
                    for (std::int64_t j = 0; j < out; ++j) acc += gr[j] * wr[j];
                    dx.at2(i, k) += acc;
                }
        }
        if (t.nodes_[wi].needs) {
            Tensor& dw = t.grad_buf(wi);
            for (std::int64_t i = 0; i < n; ++i) {
                const double* gr = &g.at2(i, 0);
                const double* xr = &x.at2(i, 0);
                for (std::int64_t k = 0; k < in; ++k) {
                    double* dwr = &dw.at2(k, 0);
                    const double xv_ = xr[k];
                    for (std::int64_t j = 0; j < out; ++j) dwr[j] += xv_ * gr[j];
                }
            }
        }
        if (bi >= 0 && t.nodes_[bi].needs) {
            Tensor& db = t.grad_buf(bi);
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < out; ++j) db[j] += g.at2(i, j);
        }
    });
}

Var Tape::conv2d(Var xv, Var kv) {
    int xi = check(xv), ki = check(kv);
    const Tensor& x = nodes_[xi].value;
    const Tensor& k = nodes_[ki].value;
    if (x.rank() != 4 || k.rank() != 4) throw DimensionError("conv2d: expects 4-d input and kernel");
    const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    if (k.dim(1) != cin) throw DimensionError("conv2d: channel mismatch");
    if (kh > h || kw > w) throw DimensionError("conv2d: kernel larger than input");
    const std::int64_t oh = h - kh + 1, ow = w - kw + 1;
    Tensor y({n, cout, oh, ow});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t co = 0; co < cout; ++co)
            for (std::int64_t ci = 0; ci < cin; ++ci)
                for (std::int64_t ky = 0; ky < kh; ++ky)
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                        const double kval = k.at4(co, ci, ky, kx);
                        for (std::int64_t oy = 0; oy < oh; ++oy) {
                            const double* xr = &x.at4(b, ci, oy + ky, kx);
                            double* yr = &y.at4(b, co, oy, 0);
                            for (std::int64_t ox = 0; ox < ow; ++ox) yr[ox] += kval * xr[ox];
                        }
                    }
    bool req = nodes_[xi].needs || nodes_[ki].needs;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), req, [self, xi, ki, n, cin, cout, kh, kw, oh, ow](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& x = t.nodes_[xi].value;
        const Tensor& k = t.nodes_[ki].value;
        if (t.nodes_[xi].needs) {
            Tensor& dx = t.grad_buf(xi);
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t co = 0; co < cout; ++co)
                    for (std::int64_t ci = 0; ci < cin; ++ci)
                        for (std::int64_t ky = 0; ky < kh; ++ky)
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                const double kval = k.at4(co, ci, ky, kx);
                                for (std::int64_t oy = 0; oy < oh; ++oy) {
                                    double* dxr = &dx.at4(b, ci, oy + ky, kx);
                                    const double* gr = &g.at4(b, co, oy, 0);
                                    for (std::int64_t ox = 0; ox < ow; ++ox) dxr[ox] += kval * gr[ox];
                                }
                            }
        }
        if (t.nodes_[ki].needs) {
            Tensor& dk = t.grad_buf(ki);
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t co = 0; co < cout; ++co)
                    for (std::int64_t ci = 0; ci < cin; ++ci)
                        for (std::int64_t ky = 0; ky < kh; ++ky)
                            for (std::int64_t kx = 0; kx < kw; ++kx) {
                                double acc = 0;
                                for (std::int64_t oy = 0; oy < oh; ++oy) {
                                    const double* xr = &x.at4(b, ci, oy + ky, kx);
                                    const double* gr = &g.at4(b, co, oy, 0);
                                    for (std::int64_t ox = 0; ox < ow; ++ox) acc += xr[ox] * gr[ox];
                                }
                                dk.at4(co, ci, ky, kx) += acc;
                            }
        }
    });
}

Var Tape::channel_bias(Var xv, Var bv) {
    int xi = check(xv), bi = check(bv);
    const Tensor& x = nodes_[xi].value;
    const Tensor& b = nodes_[bi].value;
    if (x.rank() != 4 || b.numel() != x.dim(1)) throw DimensionError("channel_bias: shape mismatch");
    const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor y = x;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            double* yr = y.data() + (i * c + j) * plane;
            const double bv_ = b[j];
            for (std::int64_t p = 0; p < plane; ++p) yr[p] += bv_;
        }
    bool req = nodes_[xi].needs || nodes_[bi].needs;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), req, [self, xi, bi, n, c, plane](Tape& t) {
        const Tensor& g = t.grad_of(self);
        if (t.nodes_[xi].needs) {
            Tensor& dx = t.grad_buf(xi);
            for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
        }
        if (t.nodes_[bi].needs) {
            Tensor& db = t.grad_buf(bi);
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < c; ++j) {
                    const double* gr = g.data() + (i * c + j) * plane;
                    double acc = 0;
                    for (std::int64_t p = 0; p < plane; ++p) acc += gr[p];
                    db[j] += acc;
                }
        }
    });
}

Var Tape::maxpool2d(Var xv) {
    int xi = check(xv);
    const Tensor& x = nodes_[xi].value;
    if (x.rank() != 4) throw DimensionError("maxpool2d: expects 4-d input");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
    Tensor y({n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(y.numel()));
    std::int64_t oi = 0;
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t oy = 0; oy < oh; ++oy)
                for (std::int64_t ox = 0; ox < ow; ++ox, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t besti = -1;
                    for (std::int64_t dy = 0; dy < 2; ++dy)
                        for (std::int64_t dx = 0; dx < 2; ++dx) {
                            const std::int64_t iy = 2 * oy + dy, ix = 2 * ox + dx;
                            if (iy >= h || ix >= w) continue;  // -inf pad
                            const std::int64_t flat = ((b * c + ch) * h + iy) * w + ix;
                            if (x[flat] > best) { best = x[flat]; besti = flat; }
                        }
                    y[oi] = best;
                    (*argmax)[static_cast<std::size_t>(oi)] = besti;
                }
    bool req = nodes_[xi].needs;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), req, [self, xi, argmax](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[(*argmax)[static_cast<std::size_t>(i)]] += g[i];
    });
}

// ---------------------------------------------------------------------------

static double stable_sigmoid(double v) {
    return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

Var Tape::relu(Var x) {
    int xi = check(x);
    Tensor y = nodes_[xi].value;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = y[i] > 0 ? y[i] : 0.0;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& in = t.nodes_[xi].value;
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * (in[i] > 0 ? 1.0 : 0.0);
    });
}

Var Tape::sigmoid(Var x) {
    int xi = check(x);
    Tensor y = nodes_[xi].value;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = stable_sigmoid(y[i]);
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& y = t.nodes_[static_cast<std::size_t>(self)].value;
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var Tape::tanh_(Var x) {
    int xi = check(x);
    Tensor y = nodes_[xi].value;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(y[i]);
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& y = t.nodes_[static_cast<std::size_t>(self)].value;
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Var Tape::log_(Var x) {
    int xi = check(x);
    Tensor y = nodes_[xi].value;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        if (y[i] <= 0) throw DomainError("log of non-positive value " + std::to_string(y[i]));
        y[i] = std::log(y[i]);
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& in = t.nodes_[xi].value;
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] / in[i];
    });
}

Var Tape::neg(Var x) { return scale(x, -1.0); }

Var Tape::scale(Var x, double c) {
    int xi = check(x);
    Tensor y = nodes_[xi].value;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= c;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi, c](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += c * g[i];
    });
}

Var Tape::add_const(Var x, double c) {
    int xi = check(x);
    Tensor y = nodes_[xi].value;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += c;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
    });
}

Var Tape::sqrt_smoothed(Var x, double sigma) {
    int xi = check(x);
    Tensor y = nodes_[xi].value;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        const double q = y[i] + sigma;
        if (q < 0) throw DomainError("sqrt_smoothed of negative value " + std::to_string(q));
        y[i] = std::sqrt(q);
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& y = t.nodes_[static_cast<std::size_t>(self)].value;
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (y[i] > 0) dx[i] += g[i] / (2.0 * y[i]);
    });
}

// Binary elementwise: shapes must match, or one side is a scalar.
static void binary_check(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b) && a.numel() != 1 && b.numel() != 1)
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " are not broadcastable");
}

Var Tape::add(Var xv, Var yv) {
    int xi = check(xv), yi = check(yv);
    const Tensor& a = nodes_[xi].value;
    const Tensor& b = nodes_[yi].value;
    binary_check(a, b, "add");
    const bool as = a.numel() == 1, bs = b.numel() == 1;
    Tensor y(as ? b.shape() : a.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a[as ? 0 : i] + b[bs ? 0 : i];
    bool req = nodes_[xi].needs || nodes_[yi].needs;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), req, [self, xi, yi, as, bs](Tape& t) {
        const Tensor& g = t.grad_of(self);
        if (t.nodes_[xi].needs) {
            Tensor& dx = t.grad_buf(xi);
            for (std::int64_t i = 0; i < g.numel(); ++i) dx[as ? 0 : i] += g[i];
        }
        if (t.nodes_[yi].needs) {
            Tensor& dy = t.grad_buf(yi);
            for (std::int64_t i = 0; i < g.numel(); ++i) dy[bs ? 0 : i] += g[i];
        }
    });
}

Var Tape::sub(Var x, Var y) { return add(x, neg(y)); }

Var Tape::mul(Var xv, Var yv) {
    int xi = check(xv), yi = check(yv);
    const Tensor& a = nodes_[xi].value;
    const Tensor& b = nodes_[yi].value;
    binary_check(a, b, "mul");
    const bool as = a.numel() == 1, bs = b.numel() == 1;
    Tensor y(as ? b.shape() : a.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a[as ? 0 : i] * b[bs ? 0 : i];
    bool req = nodes_[xi].needs || nodes_[yi].needs;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), req, [self, xi, yi, as, bs](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& a = t.nodes_[xi].value;
        const Tensor& b = t.nodes_[yi].value;
        if (t.nodes_[xi].needs) {
            Tensor& dx = t.grad_buf(xi);
            for (std::int64_t i = 0; i < g.numel(); ++i) dx[as ? 0 : i] += g[i] * b[bs ? 0 : i];
        }
        if (t.nodes_[yi].needs) {
            Tensor& dy = t.grad_buf(yi);
            for (std::int64_t i = 0; i < g.numel(); ++i) dy[bs ? 0 : i] += g[i] * a[as ? 0 : i];
        }
    });
}

Var Tape::sum(Var xv) {
    int xi = check(xv);
    const Tensor& x = nodes_[xi].value;
    double acc = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    int self = static_cast<int>(nodes_.size());
    return push(Tensor::scalar(acc), nodes_[xi].needs, [self, xi](Tape& t) {
        const double g = t.grad_of(self)[0];
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += g;
    });
}

Var Tape::row_sum(Var xv) {
    int xi = check(xv);
    const Tensor& x = nodes_[xi].value;
    if (x.rank() < 1) throw DimensionError("row_sum: scalar input");
    const std::int64_t n = x.dim(0);
    const std::int64_t stride = n > 0 ? x.numel() / n : 0;
    Tensor y({n});
    for (std::int64_t r = 0; r < n; ++r) {
        double acc = 0;
        for (std::int64_t j = 0; j < stride; ++j) acc += x[r * stride + j];
        y[r] = acc;
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi, n, stride](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t j = 0; j < stride; ++j) dx[r * stride + j] += g[r];
    });
}

Var Tape::dot(Var xv, Var yv) {
    int xi = check(xv), yi = check(yv);
    const Tensor& a = nodes_[xi].value;
    const Tensor& b = nodes_[yi].value;
    if (a.numel() != b.numel()) throw DimensionError("dot: size mismatch");
    double acc = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    bool req = nodes_[xi].needs || nodes_[yi].needs;
    int self = static_cast<int>(nodes_.size());
    return push(Tensor::scalar(acc), req, [self, xi, yi](Tape& t) {
        const double g = t.grad_of(self)[0];
        const Tensor& a = t.nodes_[xi].value;
        const Tensor& b = t.nodes_[yi].value;
        if (t.nodes_[xi].needs) {
            Tensor& dx = t.grad_buf(xi);
            for (std::int64_t i = 0; i < a.numel(); ++i) dx[i] += g * b[i];
        }
        if (t.nodes_[yi].needs) {
            Tensor& dy = t.grad_buf(yi);
            for (std::int64_t i = 0; i < b.numel(); ++i) dy[i] += g * a[i];
        }
    });
}

Var Tape::reshape(Var xv, Shape s) {
    int xi = check(xv);
    Tensor y = nodes_[xi].value.reshaped(std::move(s));
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
    });
}

Var Tape::select_rows(Var xv, std::vector<std::int64_t> rows) {
    int xi = check(xv);
    const Tensor& x = nodes_[xi].value;
    if (x.rank() < 1) throw DimensionError("select_rows: scalar input");
    const std::int64_t stride = x.numel() / std::max<std::int64_t>(x.dim(0), 1);
    Shape os = x.shape();
    os[0] = static_cast<std::int64_t>(rows.size());
    Tensor y(os);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= x.dim(0)) throw DimensionError("select_rows: index out of range");
        std::memcpy(y.data() + static_cast<std::int64_t>(r) * stride, x.data() + rows[r] * stride,
                    static_cast<std::size_t>(stride) * sizeof(double));
    }
    auto idx = std::make_shared<std::vector<std::int64_t>>(std::move(rows));
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi, idx, stride](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& dx = t.grad_buf(xi);
        for (std::size_t r = 0; r < idx->size(); ++r) {
            const double* gr = g.data() + static_cast<std::int64_t>(r) * stride;
            double* dr = dx.data() + (*idx)[r] * stride;
            for (std::int64_t i = 0; i < stride; ++i) dr[i] += gr[i];
        }
    });
}

Var Tape::batch_mean(Var fv) {
    int fi = check(fv);
    const Tensor& f = nodes_[fi].value;
    if (f.rank() != 2) throw DimensionError("batch_mean: expects n x d");
    const std::int64_t n = f.dim(0), d = f.dim(1);
    if (n < 1) throw TaskError("batch_mean: empty batch");
    Tensor m({d});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) m[j] += f.at2(i, j);
    for (std::int64_t j = 0; j < d; ++j) m[j] /= static_cast<double>(n);
    int self = static_cast<int>(nodes_.size());
    return push(std::move(m), nodes_[fi].needs, [self, fi, n, d](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& df = t.grad_buf(fi);
        const double inv = 1.0 / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j) df.at2(i, j) += inv * g[j];
    });
}

Var Tape::batch_cov(Var fv, double reg, bool biased) {
    int fi = check(fv);
    const Tensor& f = nodes_[fi].value;
    if (f.rank() != 2) throw DimensionError("batch_cov: expects n x d");
    const std::int64_t n = f.dim(0), d = f.dim(1);
    if (n < 2) throw TaskError("batch_cov: needs at least 2 samples, got " + std::to_string(n));
    if (reg < 0) throw ConfigError("batch_cov: negative regularizer");
    auto centered = std::make_shared<Tensor>(Shape{n, d});
    {
        std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += f.at2(i, j);
        for (auto& m : mean) m /= static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j)
                centered->at2(i, j) = f.at2(i, j) - mean[static_cast<std::size_t>(j)];
    }
    const double div = biased ? static_cast<double>(n) : static_cast<double>(n - 1);
    Tensor c({d, d});
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = &centered->at2(i, 0);
        for (std::int64_t j = 0; j < d; ++j) {
            const double rj = row[j];
            double* cr = &c.at2(j, 0);
            for (std::int64_t k = 0; k < d; ++k) cr[k] += rj * row[k];
        }
    }
    for (std::int64_t j = 0; j < d; ++j)
        for (std::int64_t k = 0; k < d; ++k) c.at2(j, k) /= div;
    for (std::int64_t j = 0; j < d; ++j) c.at2(j, j) += reg;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(c), nodes_[fi].needs, [self, fi, centered, n, d, div](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& df = t.grad_buf(fi);
        // dL/dF = (1/div) * Fc * (G + G'); the centering projector annihilates
        // the mean path because columns of Fc sum to zero.
        for (std::int64_t i = 0; i < n; ++i) {
            const double* row = &centered->at2(i, 0);
            double* dr = &df.at2(i, 0);
            for (std::int64_t k = 0; k < d; ++k) {
                double acc = 0;
                for (std::int64_t j = 0; j < d; ++j) acc += row[j] * (g.at2(j, k) + g.at2(k, j));
                dr[k] += acc / div;
            }
        }
    });
}

Var Tape::quad_form_sqrt(Var av, Var sv, double sigma) {
    int ai = check(av), si = check(sv);
    const Tensor& a = nodes_[ai].value;
    const Tensor& s = nodes_[si].value;
    const std::int64_t d = a.numel();
    if (s.rank() != 2 || s.dim(0) != d || s.dim(1) != d) throw DimensionError("quad_form_sqrt: shape mismatch");
    double q = 0;
    for (std::int64_t i = 0; i < d; ++i) {
        const double* sr = &s.at2(i, 0);
        double acc = 0;
        for (std::int64_t j = 0; j < d; ++j) acc += sr[j] * a[j];
        q += a[i] * acc;
    }
    if (q < -1e-9) throw NumericError("quad_form_sqrt: a'Sa = " + std::to_string(q) + " violates PSD");
    if (q < 0) q = 0;
    const double r = std::sqrt(q + sigma);
    bool req = nodes_[ai].needs || nodes_[si].needs;
    int self = static_cast<int>(nodes_.size());
    return push(Tensor::scalar(r), req, [self, ai, si, d, r](Tape& t) {
        if (r <= 0) return;  // flat at the origin when sigma = 0
        const double g = t.grad_of(self)[0] / (2.0 * r);
        const Tensor& a = t.nodes_[ai].value;
        const Tensor& s = t.nodes_[si].value;
        if (t.nodes_[ai].needs) {
            Tensor& da = t.grad_buf(ai);
            for (std::int64_t i = 0; i < d; ++i) {
                double acc = 0;
                for (std::int64_t j = 0; j < d; ++j) acc += (s.at2(i, j) + s.at2(j, i)) * a[j];
                da[i] += g * acc;
            }
        }
        if (t.nodes_[si].needs) {
            Tensor& ds = t.grad_buf(si);
            for (std::int64_t i = 0; i < d; ++i)
                for (std::int64_t j = 0; j < d; ++j) ds.at2(i, j) += g * a[i] * a[j];
        }
    });
}

Var Tape::dropout(Var xv, double p, std::mt19937_64& rng, bool train) {
    int xi = check(xv);
    if (p < 0 || p >= 1) throw ConfigError("dropout: probability must be in [0,1)");
    if (!train || p == 0.0) return xv;
    const Tensor& x = nodes_[xi].value;
    const double keep = 1.0 - p;
    auto mask = std::make_shared<Tensor>(x.shape());
    std::bernoulli_distribution d(keep);
    Tensor y = x;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        const double m = d(rng) ? 1.0 / keep : 0.0;
        (*mask)[i] = m;
        y[i] *= m;
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(y), nodes_[xi].needs, [self, xi, mask](Tape& t) {
        const Tensor& g = t.grad_of(self);
        Tensor& dx = t.grad_buf(xi);
        for (std::int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * (*mask)[i];
    });
}

Var Tape::softmax_xent(Var lv, const std::vector<int>& labels) {
    int li = check(lv);
    const Tensor& z = nodes_[li].value;
    if (z.rank() != 2) throw DimensionError("softmax_xent: expects n x k logits");
    const std::int64_t n = z.dim(0), k = z.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n) throw DimensionError("softmax_xent: label count mismatch");
    auto probs = std::make_shared<Tensor>(Shape{n, k});
    double loss = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const int l = labels[static_cast<std::size_t>(i)];
        if (l < 0 || l >= k) throw ConfigError("softmax_xent: label out of range");
        double mx = z.at2(i, 0);
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, z.at2(i, j));
        double se = 0;
        for (std::int64_t j = 0; j < k; ++j) se += std::exp(z.at2(i, j) - mx);
        const double lse = mx + std::log(se);
        for (std::int64_t j = 0; j < k; ++j) probs->at2(i, j) = std::exp(z.at2(i, j) - lse);
        loss += lse - z.at2(i, l);
    }
    loss /= static_cast<double>(n);
    auto lab = std::make_shared<std::vector<int>>(labels);
    int self = static_cast<int>(nodes_.size());
    return push(Tensor::scalar(loss), nodes_[li].needs, [self, li, probs, lab, n, k](Tape& t) {
        const double g = t.grad_of(self)[0] / static_cast<double>(n);
        Tensor& dz = t.grad_buf(li);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < k; ++j) {
                const double onehot = (j == (*lab)[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
                dz.at2(i, j) += g * (probs->at2(i, j) - onehot);
            }
    });
}

}  // namespace mpmnet
