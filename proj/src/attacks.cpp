#include "mpmnet/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <thread>

namespace mpmnet {

namespace {

using attack::MpmFgsmLoss;

int thread_count(int threads) {
    int t = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    return std::max(1, t);
}

std::vector<std::pair<std::int64_t, std::int64_t>> split_ranges(std::int64_t n, int k) {
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    const std::int64_t per = (n + k - 1) / std::max(1, k);
    for (std::int64_t lo = 0; lo < n; lo += per) out.emplace_back(lo, std::min(n, lo + per));
    return out;
}

template <typename Fn>
void parallel_ranges(std::int64_t n, int threads, Fn fn) {
    auto ranges = split_ranges(n, thread_count(threads));
    if (ranges.size() <= 1) {
        for (auto [lo, hi] : ranges) fn(lo, hi);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(ranges.size());
    for (std::size_t r = 0; r < ranges.size(); ++r)
        pool.emplace_back([&, r] {
            try {
                fn(ranges[r].first, ranges[r].second);
            } catch (...) {
                errs[r] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

Tensor slice_rows(const Tensor& x, std::int64_t lo, std::int64_t hi) {
    Shape s = x.shape();
    const std::int64_t stride = x.numel() / x.dim(0);
    s[0] = hi - lo;
    Tensor out(s);
    std::memcpy(out.data(), x.data() + lo * stride, static_cast<std::size_t>((hi - lo) * stride) * sizeof(double));
    return out;
}

// Logits [n,2] as a tape node. MPM head: affine with W=[a*|0], b=(-b*,0).
Var logits_graph(Tape& t, const BinaryModel& m, const std::vector<Var>& leaves, Var features) {
    if (m.arch.head == net::HeadKind::Softmax2) return net::head_logits(t, m.params, leaves, features);
    if (!m.solution.has_value()) throw StateError("MPM head has no frozen solution");
    const Tensor& a = m.solution->a_star;
    const std::int64_t d = a.numel();
    Tensor w({d, 2});
    for (std::int64_t j = 0; j < d; ++j) w.at2(j, 0) = a[j];
    Tensor b({2});
    b[0] = -m.solution->b_star;
    return t.affine(features, t.leaf(w), t.leaf(b));
}

int argcls(double z0, double z1) { return z0 >= z1 ? 0 : 1; }

}  // namespace

Tensor BinaryModel::logits(const Tensor& batch) const {
    Tape t;
    auto leaves = net::param_leaves(t, params, false);
    Var f = net::feature_forward(t, arch, params, leaves, t.leaf(batch), false, nullptr);
    return t.value(logits_graph(t, *this, leaves, f));
}

std::vector<double> BinaryModel::decision_values(const Tensor& batch) const {
    if (!solution.has_value()) throw StateError("decision_values: no frozen MPM solution");
    Tensor z = logits(batch);
    std::vector<double> out(static_cast<std::size_t>(z.dim(0)));
    for (std::int64_t i = 0; i < z.dim(0); ++i) out[static_cast<std::size_t>(i)] = z.at2(i, 0);
    return out;
}

}  // namespace mpmnet

namespace mpmnet::attack {

Var ModelTarget::logits(Tape& t, Var x) const {
    auto leaves = net::param_leaves(t, model->params, false);
    Var f = net::feature_forward(t, model->arch, model->params, leaves, x, false, nullptr);
    return logits_graph(t, *model, leaves, f);
}

std::vector<int> ModelTarget::predict(const Tensor& x) const { return model->predict(x); }

Var LinearTarget::logits(Tape& t, Var x) const {
    const std::int64_t d = w.numel();
    const Tensor& xv = t.value(x);
    if (xv.numel() % d != 0) throw DimensionError("LinearTarget: input size not a multiple of the weight dim");
    Var flat = t.reshape(x, {xv.numel() / d, d});
    Tensor wm({d, 2});
    for (std::int64_t j = 0; j < d; ++j) wm.at2(j, 0) = w[j];
    Tensor bias({2});
    bias[0] = b;
    return t.affine(flat, t.leaf(wm), t.leaf(bias));
}

std::vector<int> LinearTarget::predict(const Tensor& x) const {
    Tape t;
    const Tensor& z = t.value(logits(t, t.leaf(x)));
    std::vector<int> out(static_cast<std::size_t>(z.dim(0)));
    for (std::int64_t i = 0; i < z.dim(0); ++i) out[static_cast<std::size_t>(i)] = argcls(z.at2(i, 0), z.at2(i, 1));
    return out;
}

Tensor margin_grad_signs(const AttackTarget& target, const Tensor& x, const std::vector<int>& cls, int threads) {
    const std::int64_t n = x.dim(0);
    if (static_cast<std::int64_t>(cls.size()) != n) throw DimensionError("margin_grad_signs: label count mismatch");
    Tensor signs(x.shape());
    const std::int64_t stride = x.numel() / std::max<std::int64_t>(n, 1);
    parallel_ranges(n, threads, [&](std::int64_t lo, std::int64_t hi) {
        constexpr std::int64_t kSub = 64;
        for (std::int64_t s = lo; s < hi; s += kSub) {
            const std::int64_t e = std::min(hi, s + kSub);
            Tape t;
            Var xv = t.leaf(slice_rows(x, s, e), true);
            Var z = target.logits(t, xv);
            Tensor sel({e - s, 2});
            for (std::int64_t i = s; i < e; ++i) {
                const double c = cls[static_cast<std::size_t>(i)] == 0 ? -1.0 : 1.0;
                sel.at2(i - s, 0) = c;
                sel.at2(i - s, 1) = -c;
            }
            t.backward(t.sum(t.mul(z, t.leaf(sel))));
            Tensor g = t.grad(xv);
            for (std::int64_t i = 0; i < (e - s) * stride; ++i) {
                const double v = g[i];
                signs[s * stride + i] = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
            }
        }
    });
    return signs;
}

std::vector<int> predict_batched(const BinaryModel& m, const Tensor& images, std::int64_t batch, int threads) {
    const std::int64_t n = images.dim(0);
    std::vector<int> out(static_cast<std::size_t>(n));
    parallel_ranges(n, threads, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t s = lo; s < hi; s += batch) {
            const std::int64_t e = std::min(hi, s + batch);
            auto p = m.predict(slice_rows(images, s, e));
            std::copy(p.begin(), p.end(), out.begin() + s);
        }
    });
    return out;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& cls) {
    if (pred.size() != cls.size() || pred.empty()) throw EvalError("accuracy: size mismatch or empty");
    std::int64_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == cls[i];
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

FgsmGrid FgsmGrid::for_dataset(net::DatasetKind k) {
    FgsmGrid g;
    const double step = k == net::DatasetKind::Mnist ? 0.025 : 0.02;
    const double last = k == net::DatasetKind::Mnist ? 1.0 : 0.5;
    const int n = static_cast<int>(std::lround(last / step));
    for (int i = 0; i <= n; ++i) g.epsilons.push_back(i * step);
    return g;
}

void FgsmGrid::validate() const {
    if (epsilons.empty()) throw ConfigError("empty epsilon grid");
    if (epsilons.front() != 0.0) throw ConfigError("epsilon grid must start at 0");
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
        if (epsilons[i] < 0) throw ConfigError("negative epsilon");
        if (i > 0 && epsilons[i] <= epsilons[i - 1]) throw ConfigError("epsilon grid must be increasing");
    }
}

MpmFgsmLoss parse_mpm_fgsm_loss(const std::string& s) {
    if (s == "frozen-stats") return MpmFgsmLoss::FrozenStats;
    if (s == "margin") return MpmFgsmLoss::Margin;
    throw ConfigError("unknown MPM FGSM loss '" + s + "'");
}

Tensor loss_grad_signs(const BinaryModel& m, const Tensor& x, const std::vector<int>& cls, MpmFgsmLoss mode,
                       int threads) {
    const std::int64_t n = x.dim(0);
    if (static_cast<std::int64_t>(cls.size()) != n) throw DimensionError("loss_grad_signs: label count mismatch");
    Tensor signs(x.shape());
    const std::int64_t stride = x.numel() / std::max<std::int64_t>(n, 1);
    parallel_ranges(n, threads, [&](std::int64_t lo, std::int64_t hi) {
        constexpr std::int64_t kSub = 64;
        for (std::int64_t s = lo; s < hi; s += kSub) {
            const std::int64_t e = std::min(hi, s + kSub);
            Tape t;
            auto leaves = net::param_leaves(t, m.params, false);
            Var xv = t.leaf(slice_rows(x, s, e), true);
            Var f = net::feature_forward(t, m.arch, m.params, leaves, xv, false, nullptr);
            Var loss;
            if (m.arch.head == net::HeadKind::Softmax2) {
                std::vector<int> cb(cls.begin() + s, cls.begin() + e);
                loss = t.softmax_xent(net::head_logits(t, m.params, leaves, f), cb);
            } else {
                if (!m.solution.has_value()) throw StateError("MPM head has no frozen solution");
                // With frozen stats and the attacked example alone in its class
                // mean, only the multiplier term depends on the input, so
                // dJ/dz = +/- lambda * d(a'g(z))/dz. At the saddle lambda is
                // minus the objective, hence negative; fall back to -1 when the
                // training mode never produced a multiplier.
                double lam = m.lambda;
                if (std::abs(lam) < 1e-12) lam = -1.0;
                const Tensor& a = m.solution->a_star;
                Tensor w({a.numel(), 1});
                for (std::int64_t j = 0; j < a.numel(); ++j) w[j] = a[j];
                Var v = t.affine(f, t.leaf(w), Var{});
                Tensor coef({e - s, 1});
                for (std::int64_t i = s; i < e; ++i) {
                    const double sgn = cls[static_cast<std::size_t>(i)] == 0 ? 1.0 : -1.0;
                    coef[i - s] = mode == MpmFgsmLoss::FrozenStats ? lam * sgn : -sgn;
                }
                loss = t.sum(t.mul(v, t.leaf(coef)));
            }
            t.backward(loss);
            Tensor g = t.grad(xv);
            for (std::int64_t i = 0; i < (e - s) * stride; ++i) {
                const double v = g[i];
                signs[s * stride + i] = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
            }
        }
    });
    return signs;
}

Tensor fgsm(const BinaryModel& m, const Tensor& x, const std::vector<int>& cls, double eps, MpmFgsmLoss mode,
            int threads) {
    if (eps < 0) throw ConfigError("FGSM epsilon must be >= 0");
    Tensor s = loss_grad_signs(m, x, cls, mode, threads);
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::clamp(x[i] + eps * s[i], 0.0, 1.0);
    return out;
}

double cw_objective_f(double z0, double z1, int true_class, double kappa) {
    if (true_class != 0 && true_class != 1) throw ConfigError("true class must be 0 or 1");
    return (true_class == 0 ? z0 - z1 : z1 - z0) + kappa;
}

std::pair<double, double> mpm_logits(double v) { return {v, 0.0}; }

namespace {

void cw_chunk(const AttackTarget& target, const Tensor& x0, const std::vector<int>& cls, const CwConfig& cfg,
              std::int64_t lo, std::int64_t hi, CwBatchResult& out) {
    const std::int64_t n = hi - lo;
    const std::int64_t stride = x0.numel() / x0.dim(0);
    Tensor xc = slice_rows(x0, lo, hi);
    std::vector<int> cc(cls.begin() + lo, cls.begin() + hi);

    // tanh-space anchor; shrink into the open box so atanh is finite
    Tensor u0(xc.shape());
    for (std::int64_t i = 0; i < xc.numel(); ++i) u0[i] = std::atanh((2.0 * xc[i] - 1.0) * (1.0 - 1e-6));

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> c(static_cast<std::size_t>(n), cfg.c_initial);
    std::vector<double> c_lo(static_cast<std::size_t>(n), 0.0), c_hi(static_cast<std::size_t>(n), inf);
    std::vector<double> best_d2(static_cast<std::size_t>(n), inf);

    Tensor sel({n, 2});
    for (std::int64_t i = 0; i < n; ++i) {
        sel.at2(i, cc[static_cast<std::size_t>(i)]) = 1.0;
        sel.at2(i, 1 - cc[static_cast<std::size_t>(i)]) = -1.0;
    }
    Tensor ones = Tensor::full({n}, 1.0);

    for (int round = 0; round < cfg.binary_search_steps; ++round) {
        Tensor w = Tensor::zeros(xc.shape());
        Tensor m1 = Tensor::zeros(xc.shape()), m2 = Tensor::zeros(xc.shape());
        std::vector<char> found(static_cast<std::size_t>(n), 0);
        Tensor cvec({n});
        for (std::int64_t i = 0; i < n; ++i) cvec[i] = c[static_cast<std::size_t>(i)];

        for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
            Tape t;
            Var wv = t.leaf(w, true);
            Var xadv = t.add_const(t.scale(t.tanh_(t.add(wv, t.leaf(u0))), 0.5), 0.5);
            Var z = target.logits(t, xadv);
            Var diff = t.sub(xadv, t.leaf(xc));
            Var dist2 = t.row_sum(t.mul(diff, diff));
            Var hinge = t.relu(t.add_const(t.row_sum(t.mul(z, t.leaf(sel))), cfg.kappa));
            Var obj = t.add(t.dot(t.leaf(ones), dist2), t.dot(t.leaf(cvec), hinge));
            t.backward(obj);

            const Tensor& zt = t.value(z);
            const Tensor& d2 = t.value(dist2);
            const Tensor& xa = t.value(xadv);
            const bool last_iter = round == cfg.binary_search_steps - 1 && iter == cfg.max_iterations;
            for (std::int64_t i = 0; i < n; ++i) {
                const std::size_t ii = static_cast<std::size_t>(i);
                if (argcls(zt.at2(i, 0), zt.at2(i, 1)) == cc[ii]) {
                    // a never-successful example reports its final iterate
                    if (last_iter && best_d2[ii] == inf) {
                        out.l2[static_cast<std::size_t>(lo + i)] = std::sqrt(d2[i]);
                        out.c_final[static_cast<std::size_t>(lo + i)] = c[ii];
                        double li = 0;
                        for (std::int64_t j = 0; j < stride; ++j) {
                            const double px = xa[i * stride + j];
                            out.x_adv[(lo + i) * stride + j] = px;
                            li = std::max(li, std::abs(px - xc[i * stride + j]));
                        }
                        out.linf[static_cast<std::size_t>(lo + i)] = li;
                    }
                    continue;
                }
                found[ii] = 1;
                if (d2[i] >= best_d2[ii]) continue;
                best_d2[ii] = d2[i];
                out.success[static_cast<std::size_t>(lo + i)] = 1;
                out.l2[static_cast<std::size_t>(lo + i)] = std::sqrt(d2[i]);
                out.c_final[static_cast<std::size_t>(lo + i)] = c[ii];
                double li = 0;
                for (std::int64_t j = 0; j < stride; ++j) {
                    const double px = xa[i * stride + j];
                    out.x_adv[(lo + i) * stride + j] = px;
                    li = std::max(li, std::abs(px - xc[i * stride + j]));
                }
                out.linf[static_cast<std::size_t>(lo + i)] = li;
            }

            const Tensor g = t.grad(wv);
            const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, iter), bc2 = 1.0 - std::pow(b2, iter);
            for (std::int64_t i = 0; i < w.numel(); ++i) {
                m1[i] = b1 * m1[i] + (1 - b1) * g[i];
                m2[i] = b2 * m2[i] + (1 - b2) * g[i] * g[i];
                w[i] -= cfg.step_size * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + eps);
            }
        }

        for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t ii = static_cast<std::size_t>(i);
            if (found[ii]) {
                c_hi[ii] = c[ii];
                c[ii] = 0.5 * (c_lo[ii] + c_hi[ii]);
            } else {
                c_lo[ii] = c[ii];
                c[ii] = c_hi[ii] < inf ? 0.5 * (c_lo[ii] + c_hi[ii]) : c[ii] * 10.0;
            }
        }
    }
}

}  // namespace

CwBatchResult cw_l2(const AttackTarget& target, const Tensor& x, const std::vector<int>& cls, const CwConfig& cfg) {
    if (cfg.binary_search_steps < 1 || cfg.max_iterations < 1 || cfg.c_initial <= 0 || cfg.step_size <= 0)
        throw ConfigError("invalid C&W configuration");
    const std::int64_t n = x.dim(0);
    if (static_cast<std::int64_t>(cls.size()) != n) throw DimensionError("cw_l2: label count mismatch");
    CwBatchResult out;
    out.x_adv = x;
    out.success.assign(static_cast<std::size_t>(n), 0);
    out.l2.assign(static_cast<std::size_t>(n), 0.0);
    out.linf.assign(static_cast<std::size_t>(n), 0.0);
    out.c_final.assign(static_cast<std::size_t>(n), cfg.c_initial);
    parallel_ranges(n, cfg.threads,
                    [&](std::int64_t lo, std::int64_t hi) { cw_chunk(target, x, cls, cfg, lo, hi, out); });
    return out;
}

CwBatchResult cw_l2(const BinaryModel& m, const Tensor& x, const std::vector<int>& cls, const CwConfig& cfg) {
    return cw_l2(ModelTarget(m), x, cls, cfg);
}

EvalSet jointly_correct_set(const BinaryModel& a, const BinaryModel& b, const data::ImageDataset& ds,
                            const data::BinaryTask& task, std::int64_t max_examples, int threads) {
    if (task.ds != &ds) throw EvalError("task/dataset mismatch");
    std::vector<int> cls(task.labels.size());
    for (std::size_t i = 0; i < task.labels.size(); ++i) cls[i] = task.labels[i] > 0 ? 0 : 1;
    auto pa = predict_batched(a, ds.images, 256, threads);
    auto pb = predict_batched(b, ds.images, 256, threads);
    EvalSet set;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const std::size_t ii = static_cast<std::size_t>(i);
        if (pa[ii] == cls[ii] && pb[ii] == cls[ii]) set.indices.push_back(i);
        if (max_examples > 0 && static_cast<std::int64_t>(set.indices.size()) == max_examples) break;
    }
    if (set.indices.empty()) throw EvalError("no test example is classified correctly by both models");
    set.images = ds.gather(set.indices);
    set.cls.reserve(set.indices.size());
    for (auto i : set.indices) set.cls.push_back(cls[static_cast<std::size_t>(i)]);
    return set;
}

AttackReport eval_fgsm_grid(const BinaryModel& a, const std::string& name_a, const BinaryModel& b,
                            const std::string& name_b, const EvalSet& set, const FgsmGrid& grid, MpmFgsmLoss mode,
                            int threads) {
    grid.validate();
    const std::int64_t n = set.images.dim(0);
    const std::int64_t stride = set.images.numel() / n;
    AttackReport rep;
    rep.attack = "fgsm";
    rep.jointly_correct = n;
    const BinaryModel* models[2] = {&a, &b};
    const std::string names[2] = {name_a, name_b};
    for (int s = 0; s < 2; ++s) {
        Tensor signs = loss_grad_signs(*models[s], set.images, set.cls, mode, threads);
        for (double eps : grid.epsilons) {
            Tensor xadv(set.images.shape());
            for (std::int64_t i = 0; i < xadv.numel(); ++i)
                xadv[i] = std::clamp(set.images[i] + eps * signs[i], 0.0, 1.0);
            std::vector<int> preds[2];
            for (int tg = 0; tg < 2; ++tg) {
                preds[tg] = predict_batched(*models[tg], xadv, 256, threads);
                rep.curves.push_back({names[s], names[tg], eps, accuracy(preds[tg], set.cls)});
            }
            for (std::int64_t i = 0; i < n; ++i) {
                double d2 = 0, li = 0;
                for (std::int64_t j = 0; j < stride; ++j) {
                    const double d = xadv[i * stride + j] - set.images[i * stride + j];
                    d2 += d * d;
                    li = std::max(li, std::abs(d));
                }
                rep.examples.push_back({names[s], set.indices[static_cast<std::size_t>(i)], eps,
                                        preds[s][static_cast<std::size_t>(i)] != set.cls[static_cast<std::size_t>(i)],
                                        std::sqrt(d2), li});
            }
        }
    }
    return rep;
}

AttackReport eval_cw(const BinaryModel& a, const std::string& name_a, const BinaryModel& b, const std::string& name_b,
                     const EvalSet& set, const CwConfig& cfg) {
    const std::int64_t n = set.images.dim(0);
    AttackReport rep;
    rep.attack = "cw-l2";
    rep.jointly_correct = n;
    const BinaryModel* models[2] = {&a, &b};
    const std::string names[2] = {name_a, name_b};
    for (int s = 0; s < 2; ++s) {
        CwBatchResult res = cw_l2(*models[s], set.images, set.cls, cfg);
        std::vector<double> cs;
        for (std::int64_t i = 0; i < n; ++i)
            if (res.success[static_cast<std::size_t>(i)]) cs.push_back(res.c_final[static_cast<std::size_t>(i)]);
        double med = 0;
        if (!cs.empty()) {
            std::sort(cs.begin(), cs.end());
            med = cs[cs.size() / 2];
        }
        for (int tg = 0; tg < 2; ++tg)
            rep.curves.push_back({names[s], names[tg], med, accuracy(predict_batched(*models[tg], res.x_adv, 256, cfg.threads), set.cls)});
        for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t ii = static_cast<std::size_t>(i);
            rep.examples.push_back({names[s], set.indices[ii], res.c_final[ii], res.success[ii] != 0, res.l2[ii],
                                    res.linf[ii]});
        }
    }
    return rep;
}

GapSummary perturbation_gap(const AttackReport& rep, const std::string& source_a, const std::string& source_b) {
    std::vector<std::pair<std::int64_t, std::pair<bool, double>>> ra, rb;
    for (const auto& e : rep.examples) {
        if (e.source == source_a) ra.push_back({e.index, {e.success, e.l2}});
        if (e.source == source_b) rb.push_back({e.index, {e.success, e.l2}});
    }
    if (ra.empty() || rb.empty() || ra.size() != rb.size())
        throw EvalError("perturbation gap: the two sources cover different example sets");
    std::vector<double> diffs;
    GapSummary g;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        if (ra[i].first != rb[i].first)
            throw EvalError("perturbation gap: the two sources cover different example sets");
        if (!ra[i].second.first || !rb[i].second.first) continue;
        g.mean_a += ra[i].second.second;
        g.mean_b += rb[i].second.second;
        diffs.push_back(ra[i].second.second - rb[i].second.second);
    }
    if (diffs.empty()) throw EvalError("perturbation gap: no jointly successful example");
    g.count = static_cast<std::int64_t>(diffs.size());
    g.mean_a /= static_cast<double>(g.count);
    g.mean_b /= static_cast<double>(g.count);
    for (double d : diffs) g.mean_diff += d;
    g.mean_diff /= static_cast<double>(g.count);
    std::sort(diffs.begin(), diffs.end());
    g.median_diff = diffs.size() % 2 ? diffs[diffs.size() / 2]
                                     : 0.5 * (diffs[diffs.size() / 2 - 1] + diffs[diffs.size() / 2]);
    return g;
}

}  // namespace mpmnet::attack
