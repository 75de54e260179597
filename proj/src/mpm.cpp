#include "mpmnet/mpm.hpp"

#include <algorithm>
#include <cmath>

namespace mpmnet::mpm {

namespace {

double vdot(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

// (S + S')/2 * a
Tensor sym_matvec(const Tensor& s, const Tensor& a) {
    const std::int64_t d = a.numel();
    Tensor out({d});
    for (std::int64_t i = 0; i < d; ++i) {
        double acc = 0;
        for (std::int64_t j = 0; j < d; ++j) acc += 0.5 * (s.at2(i, j) + s.at2(j, i)) * a[j];
        out[i] = acc;
    }
    return out;
}

double quad(const Tensor& s, const Tensor& a) {
    const std::int64_t d = a.numel();
    double q = 0;
    for (std::int64_t i = 0; i < d; ++i) {
        double acc = 0;
        for (std::int64_t j = 0; j < d; ++j) acc += s.at2(i, j) * a[j];
        q += a[i] * acc;
    }
    return std::max(q, 0.0);
}

Tensor axpy(const Tensor& x, double c, const Tensor& y) {  // x + c*y
    Tensor out = x;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c * y[i];
    return out;
}

}  // namespace

StatsVars class_stats(Tape& t, Var features, const std::vector<int>& labels_pm, double cov_reg, bool biased) {
    const Tensor& f = t.value(features);
    if (f.rank() != 2) throw DimensionError("class_stats: features must be n x d");
    if (static_cast<std::int64_t>(labels_pm.size()) != f.dim(0))
        throw DimensionError("class_stats: label count mismatch");
    std::vector<std::int64_t> pos, neg;
    for (std::size_t i = 0; i < labels_pm.size(); ++i)
        (labels_pm[i] > 0 ? pos : neg).push_back(static_cast<std::int64_t>(i));
    if (pos.size() < 2 || neg.size() < 2)
        throw TaskError("class_stats: each class needs >= 2 samples (got " + std::to_string(pos.size()) + "/" +
                        std::to_string(neg.size()) + ")");
    Var fx = t.select_rows(features, pos);
    Var fy = t.select_rows(features, neg);
    StatsVars s;
    s.mean_x = t.batch_mean(fx);
    s.mean_y = t.batch_mean(fy);
    s.cov_x = t.batch_cov(fx, cov_reg, biased);
    s.cov_y = t.batch_cov(fy, cov_reg, biased);
    s.n_x = static_cast<std::int64_t>(pos.size());
    s.n_y = static_cast<std::int64_t>(neg.size());
    return s;
}

Var mpm_loss(Tape& t, const StatsVars& stats, Var a, double lambda, double sqrt_sigma) {
    Var rx = t.quad_form_sqrt(a, stats.cov_x, sqrt_sigma);
    Var ry = t.quad_form_sqrt(a, stats.cov_y, sqrt_sigma);
    Var residual = t.add_const(t.dot(a, t.sub(stats.mean_x, stats.mean_y)), -1.0);
    return t.add(t.add(rx, ry), t.scale(residual, lambda));
}

ClassStats compute_class_stats(const Tensor& features, const std::vector<int>& labels_pm, double cov_reg,
                               bool biased) {
    Tape t;
    Var f = t.leaf(features);
    StatsVars s = class_stats(t, f, labels_pm, cov_reg, biased);
    return ClassStats{t.value(s.mean_x), t.value(s.mean_y), t.value(s.cov_x), t.value(s.cov_y), s.n_x, s.n_y};
}

double mpm_loss_value(const ClassStats& stats, const Tensor& a, double lambda, double sqrt_sigma) {
    const double rx = std::sqrt(quad(stats.cov_x, a) + sqrt_sigma);
    const double ry = std::sqrt(quad(stats.cov_y, a) + sqrt_sigma);
    Tensor delta = axpy(stats.mean_x, -1.0, stats.mean_y);
    return rx + ry + lambda * (vdot(a, delta) - 1.0);
}

double solve_b_star(const ClassStats& stats, const Tensor& a) {
    const double rx = std::sqrt(quad(stats.cov_x, a));
    const double ry = std::sqrt(quad(stats.cov_y, a));
    const double axm = vdot(a, stats.mean_x);
    if (rx + ry <= 0) throw NumericError("solve_b_star: both radicals are zero (degenerate statistics)");
    return axm - rx / (rx + ry);
}

double alpha_star(const ClassStats& stats, const Tensor& a) {
    const double r = std::sqrt(quad(stats.cov_x, a)) + std::sqrt(quad(stats.cov_y, a));
    return 1.0 / (r * r + 1.0);
}

MpmSolution freeze_solution(const ClassStats& stats, const Tensor& a) {
    // Eq. 10/11 hold at the constraint scale a'(mx-my)=1. The trained a only
    // satisfies the constraint approximately (and on batch statistics), so
    // rescale against the frozen stats first; decisions are invariant, but
    // b* and alpha* are not, and are wrong at any other scale.
    Tensor delta = axpy(stats.mean_x, -1.0, stats.mean_y);
    const double ad = vdot(a, delta);
    if (ad == 0.0 || !std::isfinite(ad))
        throw NumericError("freeze_solution: a'(mx-my) is zero; hyperplane is orthogonal to the class means");
    MpmSolution sol;
    sol.a_star = a;
    for (std::int64_t i = 0; i < sol.a_star.numel(); ++i) sol.a_star[i] /= ad;
    sol.b_star = solve_b_star(stats, sol.a_star);
    sol.alpha_star = alpha_star(stats, sol.a_star);
    return sol;
}

// ---------------------------------------------------------------------------
// classical solver

ClassicalResult solve_classical_mpm(const Tensor& mean_x, const Tensor& mean_y, const Tensor& cov_x,
                                    const Tensor& cov_y, double tol, int max_iters) {
    const std::int64_t d = mean_x.numel();
    Tensor delta = axpy(mean_x, -1.0, mean_y);
    const double dn2 = vdot(delta, delta);
    if (dn2 <= 0) throw TaskError("solve_classical_mpm: identical class means make a'(mx-my)=1 infeasible");

    // a0: minimum-norm solution of the constraint; N: orthonormal null basis of delta'.
    Tensor a0 = delta;
    for (std::int64_t i = 0; i < d; ++i) a0[i] /= dn2;
    std::vector<Tensor> basis;  // first the normalized delta, then the null space
    {
        Tensor dhat = delta;
        const double dn = std::sqrt(dn2);
        for (std::int64_t i = 0; i < d; ++i) dhat[i] /= dn;
        basis.push_back(dhat);
        for (std::int64_t e = 0; e < d && static_cast<std::int64_t>(basis.size()) < d; ++e) {
            Tensor v = Tensor::zeros({d});
            v[e] = 1.0;
            for (const auto& b : basis) {
                const double c = vdot(v, b);
                for (std::int64_t i = 0; i < d; ++i) v[i] -= c * b[i];
            }
            const double n = std::sqrt(vdot(v, v));
            if (n > 1e-10) {
                for (std::int64_t i = 0; i < d; ++i) v[i] /= n;
                basis.push_back(v);
            }
        }
    }
    const std::int64_t m = d - 1;  // reduced dimension
    auto expand = [&](const Tensor& u) {
        Tensor a = a0;
        for (std::int64_t j = 0; j < m; ++j)
            for (std::int64_t i = 0; i < d; ++i) a[i] += u[j] * basis[static_cast<std::size_t>(j + 1)][i];
        return a;
    };
    auto objective = [&](const Tensor& a) { return std::sqrt(quad(cov_x, a)) + std::sqrt(quad(cov_y, a)); };
    auto gradient_a = [&](const Tensor& a) {
        Tensor g = Tensor::zeros({d});
        const double rx = std::sqrt(quad(cov_x, a)), ry = std::sqrt(quad(cov_y, a));
        if (rx > 0) g = axpy(g, 1.0 / rx, sym_matvec(cov_x, a));
        if (ry > 0) g = axpy(g, 1.0 / ry, sym_matvec(cov_y, a));
        return g;
    };
    auto reduce = [&](const Tensor& g) {
        Tensor u = Tensor::zeros({std::max<std::int64_t>(m, 1)});
        for (std::int64_t j = 0; j < m; ++j) u[j] = vdot(g, basis[static_cast<std::size_t>(j + 1)]);
        return u;
    };

    Tensor u = Tensor::zeros({std::max<std::int64_t>(m, 1)});
    Tensor a = expand(u);
    double f = objective(a);
    Tensor g = reduce(gradient_a(a));
    double step = 1.0;
    Tensor u_prev = u, g_prev = g;
    int it = 0;
    int flat = 0;
    for (; it < max_iters && m > 0; ++it) {
        const double gn2 = vdot(g, g);
        if (gn2 < 1e-28) break;
        if (it > 0) {
            // Barzilai-Borwein step length
            Tensor su = axpy(u, -1.0, u_prev);
            Tensor sg = axpy(g, -1.0, g_prev);
            const double sy = vdot(su, sg), ss = vdot(su, su);
            if (sy > 1e-300) step = ss / sy;
            step = std::clamp(step, 1e-12, 1e6);
        }
        // Armijo backtracking
        double s = step;
        Tensor u_new = u;
        double f_new = f;
        for (int bt = 0; bt < 60; ++bt) {
            u_new = axpy(u, -s, g);
            f_new = objective(expand(u_new));
            if (f_new <= f - 1e-4 * s * gn2) break;
            s *= 0.5;
        }
        u_prev = u;
        g_prev = g;
        u = u_new;
        a = expand(u);
        const double rel = std::abs(f - f_new) / std::max(1.0, std::abs(f));
        f = f_new;
        g = reduce(gradient_a(a));
        flat = rel < tol ? flat + 1 : 0;
        if (flat >= 3) break;
    }

    ClassStats stats{mean_x, mean_y, cov_x, cov_y, 2, 2};
    ClassicalResult res;
    // constraint residual is <= 1e-6 here; skip freeze_solution's rescaling so
    // alpha* = 1/(objective^2+1) stays exact at the reported objective
    res.solution.a_star = a;
    res.solution.b_star = solve_b_star(stats, a);
    res.solution.alpha_star = alpha_star(stats, a);
    res.objective = f;
    res.iterations = it;
    return res;
}

// ---------------------------------------------------------------------------
// trainers

ConstraintMode parse_constraint_mode(const std::string& s) {
    if (s == "lagrangian-dual") return ConstraintMode::LagrangianDual;
    if (s == "fixed-penalty") return ConstraintMode::FixedPenalty;
    if (s == "hard-normalize") return ConstraintMode::HardNormalize;
    throw ConfigError("unknown constraint mode '" + s + "'");
}

void Nesterov::step(std::vector<std::pair<std::string, Tensor>>& params, const std::vector<Tensor>& grads, double lr,
                    double momentum) {
    if (velocity_.empty()) {
        velocity_.reserve(params.size());
        for (auto& [n, t] : params) velocity_.push_back(Tensor::zeros(t.shape()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].second;
        Tensor& v = velocity_[i];
        const Tensor& g = grads[i];
        for (std::int64_t j = 0; j < p.numel(); ++j) {
            v[j] = momentum * v[j] + g[j];
            p[j] -= lr * (g[j] + momentum * v[j]);
        }
    }
}

DeepMpmTrainer::DeepMpmTrainer(net::NetworkArch arch, net::ModelParams params, TrainConfig cfg)
    : arch_(std::move(arch)), params_(std::move(params)), cfg_(cfg), lr_(cfg.lr),
      head_lr_(cfg.head_lr > 0 ? cfg.head_lr : cfg.lr), lambda_(cfg.lambda_init), rng_(cfg.seed) {}

DeepMpmTrainer::DeepMpmTrainer(TrainConfig cfg)
    : cfg_(cfg), lr_(cfg.lr), head_lr_(cfg.head_lr > 0 ? cfg.head_lr : cfg.lr), lambda_(cfg.lambda_init),
      rng_(cfg.seed) {}

void DeepMpmTrainer::init_head(const StatsVars& stats, Tape& t) {
    Tensor delta = axpy(t.value(stats.mean_x), -1.0, t.value(stats.mean_y));
    const double dn2 = vdot(delta, delta);
    if (dn2 <= 0) throw NumericError("head init: identical class means in the first batch");
    a_ = delta;
    for (std::int64_t i = 0; i < a_.numel(); ++i) a_[i] /= dn2;
    lambda_ = cfg_.lambda_init;
}

StepResult DeepMpmTrainer::step(const Tensor& images, const std::vector<int>& labels_pm) {
    if (!arch_) throw StateError("trainer built in feature mode; use step_features");
    Tape t;
    auto leaves = net::param_leaves(t, params_, true);
    Var batch = t.leaf(images);
    Var features = net::feature_forward(t, *arch_, params_, leaves, batch, true, &rng_);
    return step_impl(t, features, labels_pm, leaves);
}

StepResult DeepMpmTrainer::step_features(const Tensor& features, const std::vector<int>& labels_pm) {
    Tape t;
    Tensor f = features.rank() == 2 ? features : features.reshaped({features.dim(0), features.numel() / features.dim(0)});
    Var fv = t.leaf(f);
    return step_impl(t, fv, labels_pm, {});
}

StepResult DeepMpmTrainer::step_impl(Tape& t, Var features, const std::vector<int>& labels_pm,
                                     const std::vector<Var>& leaves) {
    StatsVars stats = class_stats(t, features, labels_pm, cfg_.cov_reg, cfg_.biased_cov);
    if (a_.empty()) init_head(stats, t);

    const double lambda_used = cfg_.mode == ConstraintMode::HardNormalize ? 0.0 : lambda_;
    Var a_leaf = t.leaf(a_, true);
    Var loss = mpm_loss(t, stats, a_leaf, lambda_used, cfg_.sqrt_sigma);
    const double loss_val = t.value(loss).item();
    if (!std::isfinite(loss_val)) throw NumericError("non-finite MPM loss");
    t.backward(loss);

    Tensor ga = t.grad(a_leaf);
    if (!ga.all_finite()) throw NumericError("non-finite gradient of the hyperplane direction");

    if (!leaves.empty()) {
        std::vector<Tensor> grads;
        grads.reserve(leaves.size());
        for (std::size_t i = 0; i < leaves.size(); ++i) {
            grads.push_back(t.grad(leaves[i]));
            if (!grads.back().all_finite())
                throw NumericError("non-finite gradient for parameter '" + params_.tensors[i].first + "'");
        }
        opt_.step(params_.tensors, grads, lr_, cfg_.momentum);
        if (!params_.all_finite()) throw NumericError("non-finite parameter after update");
    }

    const Tensor sx = t.value(stats.cov_x), sy = t.value(stats.cov_y);
    Tensor delta = axpy(t.value(stats.mean_x), -1.0, t.value(stats.mean_y));
    auto grad_a = [&](const Tensor& a, double lam) {
        Tensor g = Tensor::zeros(a.shape());
        const double rx = std::sqrt(quad(sx, a) + cfg_.sqrt_sigma);
        const double ry = std::sqrt(quad(sy, a) + cfg_.sqrt_sigma);
        if (rx > 0) g = axpy(g, 1.0 / rx, sym_matvec(sx, a));
        if (ry > 0) g = axpy(g, 1.0 / ry, sym_matvec(sy, a));
        return axpy(g, lam, delta);
    };
    auto residual = [&](const Tensor& a) { return vdot(a, delta) - 1.0; };

    StepResult out;
    out.loss = loss_val;
    switch (cfg_.mode) {
        case ConstraintMode::LagrangianDual: {
            // extragradient step on the saddle point; the plain alternating
            // update is marginally stable and never tightens the constraint
            Tensor a_mid = axpy(a_, -head_lr_, ga);
            const double lam_mid = lambda_ + cfg_.dual_lr * residual(a_);
            Tensor g_mid = grad_a(a_mid, lam_mid);
            const double r_mid = residual(a_mid);
            a_ = axpy(a_, -head_lr_, g_mid);
            lambda_ += cfg_.dual_lr * r_mid;
            break;
        }
        case ConstraintMode::FixedPenalty:
            a_ = axpy(a_, -head_lr_, ga);
            break;
        case ConstraintMode::HardNormalize: {
            a_ = axpy(a_, -head_lr_, ga);
            const double s = vdot(a_, delta);
            if (std::abs(s) < 1e-30) throw NumericError("hard-normalize: a'(mx-my) collapsed to zero");
            for (std::int64_t i = 0; i < a_.numel(); ++i) a_[i] /= s;
            break;
        }
    }
    if (!a_.all_finite() || !std::isfinite(lambda_)) throw NumericError("non-finite head state after update");
    out.residual = residual(a_);
    return out;
}

void DeepMpmTrainer::end_epoch(int epoch) {
    for (int e : cfg_.lr_decay_epochs)
        if (e == epoch) {
            lr_ *= cfg_.lr_decay_factor;
            head_lr_ *= cfg_.lr_decay_factor;
        }
}

Tensor DeepMpmTrainer::features_of(const Tensor& images, std::int64_t batch) const {
    if (!arch_) {
        return images.rank() == 2 ? images : images.reshaped({images.dim(0), images.numel() / images.dim(0)});
    }
    const std::int64_t n = images.dim(0);
    Tensor out({n, arch_->feature_dim});
    for (std::int64_t start = 0; start < n; start += batch) {
        const std::int64_t len = std::min(batch, n - start);
        Tensor chunk({len, images.dim(1), images.dim(2), images.dim(3)});
        const std::int64_t stride = images.numel() / n;
        std::copy(images.data() + start * stride, images.data() + (start + len) * stride, chunk.data());
        Tape t;
        auto leaves = net::param_leaves(t, params_, false);
        const Tensor& f = t.value(net::feature_forward(t, *arch_, params_, leaves, t.leaf(chunk), false, nullptr));
        std::copy(f.data(), f.data() + f.numel(), out.data() + start * arch_->feature_dim);
    }
    return out;
}

std::pair<MpmSolution, ClassStats> DeepMpmTrainer::freeze(const Tensor& images,
                                                          const std::vector<int>& labels_pm) const {
    Tensor f = features_of(images);
    ClassStats stats = compute_class_stats(f, labels_pm, cfg_.cov_reg, cfg_.biased_cov);
    Tensor a = a_;
    if (a.empty()) {
        // zero training steps: freeze the same delta-based init a step would use
        Tensor delta = axpy(stats.mean_x, -1.0, stats.mean_y);
        const double dn2 = vdot(delta, delta);
        if (dn2 <= 0) throw NumericError("freeze: identical class means");
        a = delta;
        for (std::int64_t i = 0; i < a.numel(); ++i) a[i] /= dn2;
    }
    return {freeze_solution(stats, a), std::move(stats)};
}

SoftmaxTrainer::SoftmaxTrainer(net::NetworkArch arch, net::ModelParams params, TrainConfig cfg)
    : arch_(std::move(arch)), params_(std::move(params)), cfg_(cfg), lr_(cfg.lr), rng_(cfg.seed) {}

double SoftmaxTrainer::step(const Tensor& images, const std::vector<int>& labels_pm) {
    Tape t;
    auto leaves = net::param_leaves(t, params_, true);
    Var features = net::feature_forward(t, arch_, params_, leaves, t.leaf(images), true, &rng_);
    Var logits = net::head_logits(t, params_, leaves, features);
    std::vector<int> cls(labels_pm.size());
    for (std::size_t i = 0; i < labels_pm.size(); ++i) cls[i] = labels_pm[i] > 0 ? 0 : 1;
    Var loss = t.softmax_xent(logits, cls);
    const double loss_val = t.value(loss).item();
    if (!std::isfinite(loss_val)) throw NumericError("non-finite cross-entropy loss");
    t.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(leaves.size());
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        grads.push_back(t.grad(leaves[i]));
        if (!grads.back().all_finite())
            throw NumericError("non-finite gradient for parameter '" + params_.tensors[i].first + "'");
    }
    opt_.step(params_.tensors, grads, lr_, cfg_.momentum);
    if (!params_.all_finite()) throw NumericError("non-finite parameter after update");
    return loss_val;
}

void SoftmaxTrainer::end_epoch(int epoch) {
    for (int e : cfg_.lr_decay_epochs)
        if (e == epoch) lr_ *= cfg_.lr_decay_factor;
}

}  // namespace mpmnet::mpm
