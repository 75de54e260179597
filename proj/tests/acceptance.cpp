// Acceptance gate: one pass/fail line per criterion, tolerances pinned below.
// Criteria 5-8 need MPMNET_DATA_DIR pointing at mnist/ IDX files; the desk
// models are trained once and shared.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mpmnet/attacks.hpp"
#include "mpmnet/checkpoint.hpp"
#include "mpmnet/mpm.hpp"
#include "mpmnet/report.hpp"
#include "testutil.hpp"

using namespace mpmnet;
using testutil::close;
using testutil::tensors_close;

namespace {

struct Criterion {
    int id;
    std::string title;
    std::vector<std::string> failures;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    Criterion(int id_, std::string title_) : id(id_), title(std::move(title_)) {}
    void expect(bool ok, const std::string& what) {
        if (!ok && failures.size() < 8) failures.push_back(what);
        if (!ok && failures.size() == 8) failures.push_back("...");
    }
    bool finish(const std::string& detail = "") {
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion %d [%s] %s%s%s [%.1fs]\n", id, failures.empty() ? "PASS" : "FAIL", title.c_str(),
                    detail.empty() ? "" : " -- ", detail.c_str(), sec);
        for (const auto& f : failures) std::printf("    failed: %s\n", f.c_str());
        std::fflush(stdout);
        return failures.empty();
    }
};

// ---------------------------------------------------------------------------
// criterion 1: FD gradient suite, h=1e-5, rtol 1e-4, >=20 instances per op

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// checks tape gradients of a scalar graph against central FD on every input
void fd_case(Criterion& c, const std::string& op, const std::vector<Tensor>& inputs, const GraphFn& graph) {
    Tape t;
    std::vector<Var> leaves;
    for (const auto& in : inputs) leaves.push_back(t.leaf(in, true));
    Var root = graph(t, leaves);
    t.backward(root);

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor got = t.grad(leaves[i]);
        Tensor want = testutil::fd_gradient(
            [&](const Tensor& x) {
                Tape ft;
                std::vector<Var> ls;
                for (std::size_t j = 0; j < inputs.size(); ++j) ls.push_back(ft.leaf(j == i ? x : inputs[j]));
                return ft.value(graph(ft, ls)).item();
            },
            inputs[i], 1e-5);
        const double err = testutil::max_rel_err(got, want);
        c.expect(err < 1e-4, op + " input " + std::to_string(i) + " rel err " + std::to_string(err));
    }
}

// keep |v| away from the relu kink so the FD probe stays on one side
Tensor kink_free(Shape s, std::mt19937_64& rng) {
    Tensor t = testutil::random_tensor(std::move(s), rng);
    for (std::int64_t i = 0; i < t.numel(); ++i)
        if (std::abs(t[i]) < 1e-3) t[i] += t[i] >= 0 ? 1e-3 : -1e-3;
    return t;
}

// scalarize a non-scalar op output against a fixed random weight
Var pick(Tape& t, Var y, const Tensor& w) { return t.sum(t.mul(y, t.leaf(w))); }

bool criterion1() {
    Criterion c(1, "gradient suite vs central FD (h=1e-5, rtol 1e-4, 20 instances/op)");
    std::mt19937_64 rng(11);
    int ops = 0;
    auto op = [&](const std::string& name, const std::function<void(int)>& run) {
        ++ops;
        for (int k = 0; k < 20; ++k) run(k);
    };
    using testutil::random_tensor;

    op("affine", [&](int) {
        Tensor w9 = random_tensor({4, 5}, rng);
        fd_case(c, "affine",
                {random_tensor({4, 3}, rng), random_tensor({3, 5}, rng), random_tensor({5}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.affine(l[0], l[1], l[2]), w9); });
    });
    op("conv2d", [&](int) {
        Tensor w9 = random_tensor({2, 3, 4, 4}, rng);
        fd_case(c, "conv2d", {random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.conv2d(l[0], l[1]), w9); });
    });
    op("channel_bias", [&](int) {
        Tensor w9 = random_tensor({2, 3, 4, 4}, rng);
        fd_case(c, "channel_bias", {random_tensor({2, 3, 4, 4}, rng), random_tensor({3}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.channel_bias(l[0], l[1]), w9); });
    });
    op("maxpool2d", [&](int) {
        Tensor w9 = random_tensor({2, 2, 3, 3}, rng);
        fd_case(c, "maxpool2d", {random_tensor({2, 2, 5, 5}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.maxpool2d(l[0]), w9); });
    });
    op("relu", [&](int) {
        Tensor w9 = random_tensor({3, 4}, rng);
        fd_case(c, "relu", {kink_free({3, 4}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.relu(l[0]), w9); });
    });
    op("sigmoid", [&](int) {
        Tensor w9 = random_tensor({3, 4}, rng);
        fd_case(c, "sigmoid", {random_tensor({3, 4}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.sigmoid(l[0]), w9); });
    });
    op("tanh", [&](int) {
        Tensor w9 = random_tensor({3, 4}, rng);
        fd_case(c, "tanh", {random_tensor({3, 4}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.tanh_(l[0]), w9); });
    });
    op("log", [&](int) {
        Tensor w9 = random_tensor({3, 4}, rng);
        fd_case(c, "log", {random_tensor({3, 4}, rng, 0.5, 2.0)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.log_(l[0]), w9); });
    });
    op("neg/scale/add_const", [&](int) {
        Tensor w9 = random_tensor({3, 4}, rng);
        fd_case(c, "neg/scale/add_const", {random_tensor({3, 4}, rng)}, [w9](Tape& t, const std::vector<Var>& l) {
            return pick(t, t.add_const(t.scale(t.neg(l[0]), 1.7), 0.3), w9);
        });
    });
    op("add/sub/mul", [&](int) {
        Tensor w9 = random_tensor({3, 4}, rng);
        fd_case(c, "add/sub/mul", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) {
                    return pick(t, t.mul(t.add(l[0], l[1]), t.sub(l[0], l[1])), w9);
                });
    });
    op("sqrt_smoothed", [&](int) {
        Tensor w9 = random_tensor({3, 4}, rng);
        fd_case(c, "sqrt_smoothed", {random_tensor({3, 4}, rng, 0.1, 2.0)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.sqrt_smoothed(l[0], 1e-3), w9); });
    });
    op("sum", [&](int) {
        fd_case(c, "sum", {random_tensor({3, 4}, rng)},
                [](Tape& t, const std::vector<Var>& l) { return t.sum(l[0]); });
    });
    op("row_sum", [&](int) {
        Tensor w9 = random_tensor({3}, rng);
        fd_case(c, "row_sum", {random_tensor({3, 2, 2}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.row_sum(l[0]), w9); });
    });
    op("dot", [&](int) {
        fd_case(c, "dot", {random_tensor({5}, rng), random_tensor({5}, rng)},
                [](Tape& t, const std::vector<Var>& l) { return t.dot(l[0], l[1]); });
    });
    op("reshape/select_rows", [&](int) {
        Tensor w9 = random_tensor({2, 2, 4}, rng);
        fd_case(c, "reshape/select_rows", {random_tensor({3, 8}, rng)}, [w9](Tape& t, const std::vector<Var>& l) {
            return pick(t, t.reshape(t.select_rows(l[0], {2, 0}), {2, 2, 4}), w9);
        });
    });
    op("batch_mean", [&](int) {
        Tensor w9 = random_tensor({3}, rng);
        fd_case(c, "batch_mean", {random_tensor({6, 3}, rng)},
                [w9](Tape& t, const std::vector<Var>& l) { return pick(t, t.batch_mean(l[0]), w9); });
    });
    op("batch_cov", [&](int k) {
        Tensor w9 = random_tensor({3, 3}, rng);
        const bool biased = k % 2 == 0;
        fd_case(c, "batch_cov", {random_tensor({6, 3}, rng)}, [w9, biased](Tape& t, const std::vector<Var>& l) {
            return pick(t, t.batch_cov(l[0], 1e-3, biased), w9);
        });
    });
    op("quad_form_sqrt", [&](int) {
        Tensor s = random_tensor({4, 4}, rng, 0.05, 0.4);
        for (std::int64_t i = 0; i < 4; ++i) {
            s.at2(i, i) += 2.0;
            for (std::int64_t j = 0; j < i; ++j) s.at2(i, j) = s.at2(j, i);
        }
        fd_case(c, "quad_form_sqrt", {random_tensor({4}, rng), s},
                [](Tape& t, const std::vector<Var>& l) { return t.quad_form_sqrt(l[0], l[1], 1e-6); });
    });
    op("dropout", [&](int k) {
        Tensor w9 = random_tensor({4, 6}, rng);
        const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(k);
        fd_case(c, "dropout", {random_tensor({4, 6}, rng)}, [w9, seed](Tape& t, const std::vector<Var>& l) {
            std::mt19937_64 drng(seed);  // same mask for every FD probe
            return pick(t, t.dropout(l[0], 0.4, drng, true), w9);
        });
    });
    op("softmax_xent", [&](int k) {
        std::vector<int> labels = {k % 3, (k + 1) % 3, 0, 2, 1};
        fd_case(c, "softmax_xent", {random_tensor({5, 3}, rng)},
                [labels](Tape& t, const std::vector<Var>& l) { return t.softmax_xent(l[0], labels); });
    });

    // end-to-end Eq.-(8) loss through conv -> pool -> affine features
    const std::vector<int> labels = {1, 1, 1, -1, -1, -1};
    op("eq8_end_to_end", [&](int) {
        Tensor x = random_tensor({6, 1, 6, 6}, rng);
        Tensor a = random_tensor({3}, rng);
        fd_case(c, "eq8_end_to_end",
                {random_tensor({2, 1, 3, 3}, rng), random_tensor({8, 3}, rng)},
                [x, a, labels](Tape& t, const std::vector<Var>& l) {
                    Var f = t.affine(t.reshape(t.maxpool2d(t.conv2d(t.leaf(x), l[0])), {6, 8}), l[1], Var{});
                    auto sv = mpm::class_stats(t, f, labels, 1e-4);
                    return mpm::mpm_loss(t, sv, t.leaf(a), 0.37, 1e-10);
                });
    });

    return c.finish(std::to_string(ops) + " op groups");
}

// ---------------------------------------------------------------------------
// shared linear-algebra oracles for criteria 2-3

Tensor solve_linear(Tensor m, Tensor b) {
    const std::int64_t d = b.numel();
    for (std::int64_t col = 0; col < d; ++col) {
        std::int64_t piv = col;
        for (std::int64_t r = col + 1; r < d; ++r)
            if (std::abs(m.at2(r, col)) > std::abs(m.at2(piv, col))) piv = r;
        for (std::int64_t j = 0; j < d; ++j) std::swap(m.at2(col, j), m.at2(piv, j));
        std::swap(b[col], b[piv]);
        for (std::int64_t r = col + 1; r < d; ++r) {
            const double f = m.at2(r, col) / m.at2(col, col);
            for (std::int64_t j = col; j < d; ++j) m.at2(r, j) -= f * m.at2(col, j);
            b[r] -= f * b[col];
        }
    }
    Tensor x = Tensor::zeros({d});
    for (std::int64_t r = d - 1; r >= 0; --r) {
        double acc = b[r];
        for (std::int64_t j = r + 1; j < d; ++j) acc -= m.at2(r, j) * x[j];
        x[r] = acc / m.at2(r, r);
    }
    return x;
}

Tensor random_pd(std::int64_t d, std::mt19937_64& rng, double eig_lo = 0.3, double eig_hi = 2.0) {
    Tensor a = testutil::random_tensor({d, d}, rng);
    Tensor s = Tensor::zeros({d, d});
    for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
            double acc = 0;
            for (std::int64_t k = 0; k < d; ++k) acc += a.at2(i, k) * a.at2(j, k);
            s.at2(i, j) = acc;
        }
    double tr = 0;
    for (std::int64_t i = 0; i < d; ++i) tr += s.at2(i, i);
    const double scale = (eig_hi - eig_lo) / std::max(tr, 1e-12);
    for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < d; ++j) s.at2(i, j) *= scale;
    for (std::int64_t i = 0; i < d; ++i) s.at2(i, i) += eig_lo;
    return s;
}

double qform(const Tensor& s, const Tensor& a) {
    double q = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        for (std::int64_t j = 0; j < a.numel(); ++j) q += a[i] * s.at2(i, j) * a[j];
    return q;
}

double objective_of(const Tensor& sx, const Tensor& sy, const Tensor& a) {
    return std::sqrt(std::max(qform(sx, a), 0.0)) + std::sqrt(std::max(qform(sy, a), 0.0));
}

bool criterion2() {
    Criterion c(2, "classical MPM vs analytic optimum (rtol 1e-5/1e-6) and 2-d grid oracle (1e-3)");
    std::mt19937_64 rng(99);
    for (int k = 0; k < 50; ++k) {
        const std::int64_t d = 2 + static_cast<std::int64_t>(rng() % 4);
        Tensor sigma = random_pd(d, rng);
        Tensor mx = testutil::random_tensor({d}, rng), my = testutil::random_tensor({d}, rng);
        Tensor delta = mx;
        double dn = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            delta[i] -= my[i];
            dn += delta[i] * delta[i];
        }
        if (dn < 0.25) {
            delta[0] += 1.0;
            mx[0] += 1.0;
        }
        auto res = mpm::solve_classical_mpm(mx, my, sigma, sigma, 1e-14);

        Tensor si_delta = solve_linear(sigma, delta);
        double dtsid = 0;
        for (std::int64_t i = 0; i < d; ++i) dtsid += delta[i] * si_delta[i];
        Tensor a_ref = si_delta;
        for (std::int64_t i = 0; i < d; ++i) a_ref[i] /= dtsid;

        c.expect(tensors_close(res.solution.a_star, a_ref, 1e-5, 1e-7), "instance " + std::to_string(k) + " direction");
        c.expect(close(res.objective, objective_of(sigma, sigma, a_ref), 1e-6),
                 "instance " + std::to_string(k) + " objective");
    }

    std::mt19937_64 rng2(123);
    for (int k = 0; k < 20; ++k) {
        Tensor sx = random_pd(2, rng2), sy = random_pd(2, rng2);
        Tensor mx = testutil::random_tensor({2}, rng2), my = testutil::random_tensor({2}, rng2);
        Tensor delta = mx;
        delta[0] -= my[0];
        delta[1] -= my[1];
        if (delta[0] * delta[0] + delta[1] * delta[1] < 0.25) {
            mx[0] += 1.0;
            delta[0] += 1.0;
        }
        auto res = mpm::solve_classical_mpm(mx, my, sx, sy, 1e-14);

        const double dnorm2 = delta[0] * delta[0] + delta[1] * delta[1];
        Tensor a0 = delta;
        a0[0] /= dnorm2;
        a0[1] /= dnorm2;
        const double dn = std::sqrt(dnorm2);
        const double n0 = -delta[1] / dn, n1 = delta[0] / dn;
        double best = 1e300;
        for (int g = -20000; g <= 20000; ++g) {
            Tensor a = a0;
            a[0] += g * 1e-3 * n0;
            a[1] += g * 1e-3 * n1;
            best = std::min(best, objective_of(sx, sy, a));
        }
        c.expect(std::abs(res.objective - best) <= 1e-3, "grid instance " + std::to_string(k));
    }
    return c.finish("70 instances");
}

bool criterion3() {
    Criterion c(3, "alpha* identity at solver output; synthetic two-Gaussian convergence (atol 1e-2, 500 steps)");
    std::mt19937_64 rng(7);
    for (int k = 0; k < 10; ++k) {
        const std::int64_t d = 2 + static_cast<std::int64_t>(rng() % 3);
        Tensor mx = testutil::random_tensor({d}, rng), my = testutil::random_tensor({d}, rng);
        mx[0] += 1.5;
        auto res = mpm::solve_classical_mpm(mx, my, random_pd(d, rng), random_pd(d, rng));
        c.expect(res.solution.alpha_star == 1.0 / (res.objective * res.objective + 1.0),
                 "alpha* identity instance " + std::to_string(k));
    }

    // exact-statistics instance: per-class mean +/-(1,0), covariance I
    const double r = std::sqrt(2.0);
    Tensor f({8, 2});
    const double rows[8][2] = {{1 + r, 0}, {1 - r, 0}, {1, r}, {1, -r}, {-1 + r, 0}, {-1 - r, 0}, {-1, r}, {-1, -r}};
    for (std::int64_t i = 0; i < 8; ++i) {
        f.at2(i, 0) = rows[i][0];
        f.at2(i, 1) = rows[i][1];
    }
    const std::vector<int> labels = {1, 1, 1, 1, -1, -1, -1, -1};

    mpm::TrainConfig cfg;
    cfg.lr = 0.05;
    cfg.dual_lr = 0.5;
    cfg.momentum = 0.0;
    cfg.cov_reg = 0.0;
    cfg.sqrt_sigma = 1e-12;
    cfg.lr_decay_epochs = {};
    mpm::DeepMpmTrainer trainer(cfg);
    for (int s = 0; s < 500; ++s) trainer.step_features(f, labels);
    c.expect(close(trainer.hyperplane()[0], 0.5, 0.0, 1e-2), "a[0] -> 0.5");
    c.expect(close(trainer.hyperplane()[1], 0.0, 0.0, 1e-2), "a[1] -> 0");
    auto [sol, stats] = trainer.freeze(f, labels);
    c.expect(close(sol.b_star, 0.0, 0.0, 1e-2), "b* -> 0");
    c.expect(close(sol.alpha_star, 0.5, 0.0, 1e-2), "alpha* -> 0.5");
    char buf[128];
    std::snprintf(buf, sizeof(buf), "a=(%.4f,%.4f) b=%.4f alpha=%.4f", trainer.hyperplane()[0],
                  trainer.hyperplane()[1], sol.b_star, sol.alpha_star);
    return c.finish(buf);
}

// ---------------------------------------------------------------------------
// criterion 4 helpers

BinaryModel random_softmax_model(std::uint64_t seed) {
    BinaryModel m;
    m.arch = net::build_arch(net::DatasetKind::Mnist, net::HeadKind::Softmax2);
    std::mt19937_64 rng(seed);
    m.params = net::init_params(m.arch, rng);
    return m;
}

BinaryModel random_mpm_model(std::uint64_t seed) {
    BinaryModel m;
    m.arch = net::build_arch(net::DatasetKind::Mnist, net::HeadKind::Mpm1);
    std::mt19937_64 rng(seed);
    m.params = net::init_params(m.arch, rng);
    mpm::MpmSolution sol;
    sol.a_star = testutil::random_tensor({50}, rng);
    sol.b_star = 0.1;
    sol.alpha_star = 0.5;
    m.solution = sol;
    m.lambda = -0.8;
    return m;
}

bool criterion4() {
    Criterion c(4, "attack validity: FGSM ball/box 100%; C&W successes misclassified+in-box; linear C&W within 10%");
    std::mt19937_64 rng(9);
    Tensor x = testutil::random_tensor({8, 1, 28, 28}, rng, 0.0, 1.0);
    std::vector<int> cls = {0, 1, 0, 1, 0, 1, 0, 1};

    auto sm = random_softmax_model(3);
    auto mm = random_mpm_model(4);
    for (const BinaryModel* m : {&sm, &mm}) {
        for (double eps : {0.1, 0.25, 0.5}) {
            Tensor xa = attack::fgsm(*m, x, cls, eps);
            bool ball = true, box = true;
            for (std::int64_t i = 0; i < xa.numel(); ++i) {
                ball = ball && std::abs(xa[i] - x[i]) <= eps + 1e-12;
                box = box && xa[i] >= 0.0 && xa[i] <= 1.0;
            }
            c.expect(ball, "FGSM eps-ball at eps " + std::to_string(eps));
            c.expect(box, "FGSM box at eps " + std::to_string(eps));
        }
    }

    // C&W on a real network: every success misclassified and in-box
    attack::CwConfig quick;
    quick.binary_search_steps = 3;
    quick.max_iterations = 80;
    quick.threads = 0;
    int successes = 0;
    for (const BinaryModel* m : {&sm, &mm}) {
        auto res = attack::cw_l2(*m, x, cls, quick);
        auto pred = m->predict(res.x_adv);
        for (std::size_t i = 0; i < cls.size(); ++i) {
            if (!res.success[i]) continue;
            ++successes;
            c.expect(pred[i] != cls[i], "C&W success " + std::to_string(i) + " not misclassified");
        }
        for (std::int64_t i = 0; i < res.x_adv.numel(); ++i)
            if (res.x_adv[i] < 0.0 || res.x_adv[i] > 1.0) {
                c.expect(false, "C&W output leaves the box");
                break;
            }
    }
    c.expect(successes > 0, "no C&W successes to validate");

    // linear model: analytic boundary distance |w'x+b|/||w|| within 10%
    std::mt19937_64 rng2(31);
    attack::CwConfig cfg;
    cfg.threads = 1;
    for (int k = 0; k < 5; ++k) {
        const std::int64_t d = 16;
        Tensor w = testutil::random_tensor({d}, rng2, -1.0, 1.0);
        double wn = 0;
        for (std::int64_t j = 0; j < d; ++j) wn += w[j] * w[j];
        wn = std::sqrt(wn);
        Tensor x1({1, 1, 4, 4});
        for (std::int64_t j = 0; j < d; ++j) x1[j] = 0.5;
        double v = 0;
        for (std::int64_t j = 0; j < d; ++j) v += w[j] * x1[j];
        attack::LinearTarget lin(w, -(v - 0.05 * wn));  // boundary 0.05 away
        auto res = attack::cw_l2(lin, x1, {0}, cfg);
        c.expect(res.success[0] != 0, "linear instance " + std::to_string(k) + " failed");
        if (res.success[0]) {
            c.expect(res.l2[0] <= 1.10 * 0.05 && res.l2[0] >= 0.90 * 0.05,
                     "linear instance " + std::to_string(k) + " l2 " + std::to_string(res.l2[0]) + " vs 0.05");
            c.expect(lin.predict(res.x_adv) != std::vector<int>{0}, "linear success not misclassified");
        }
    }
    return c.finish();
}

// ---------------------------------------------------------------------------
// desk-scale shared state (criteria 5-9)

struct Desk {
    data::ImageDataset train, test;
    data::BinaryTask train_task, test_task;
    BinaryModel mpm_model, cnn_model;
    std::vector<double> mpm_losses, cnn_losses;
    double train_sec = 0;
    bool ready = false;
};

constexpr std::uint64_t kDeskSeed = 1;
constexpr std::uint64_t kEpochStride = 0x9e3779b97f4a7c15ull;

template <class StepFn, class Trainer>
std::vector<double> run_desk_epochs(Trainer& trainer, const data::ImageDataset& train, const data::BinaryTask& task,
                                    const mpm::TrainConfig& tc, StepFn step) {
    std::vector<double> losses;
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        auto batches = data::stratified_batches(task, tc.batch_size,
                                                tc.seed + kEpochStride * static_cast<std::uint64_t>(epoch), tc.stratify);
        double sum = 0;
        for (const auto& b : batches) {
            Tensor images = train.gather(b);
            std::vector<int> labels;
            labels.reserve(b.size());
            for (auto i : b) labels.push_back(task.labels[static_cast<std::size_t>(i)]);
            sum += step(trainer, images, labels);
        }
        trainer.end_epoch(epoch);
        losses.push_back(sum / static_cast<double>(batches.size()));
    }
    return losses;
}

mpm::TrainConfig desk_config(bool softmax) {
    mpm::TrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 128;
    tc.lr_decay_epochs = {5, 8};
    tc.seed = kDeskSeed;
    // desk-mnist preset values: a fast extractor for the MPM net (lr 2e-2,
    // head step 1e-2, dual step 1), a gentle one for the baseline (1e-3)
    tc.lr = softmax ? 1e-3 : 2e-2;
    tc.head_lr = softmax ? 0.0 : 1e-2;
    tc.momentum = softmax ? 0.9 : 0.5;
    tc.dual_lr = 1.0;
    return tc;
}

std::pair<BinaryModel, std::vector<double>> train_desk_mpm(const data::ImageDataset& train,
                                                          const data::BinaryTask& task) {
    mpm::TrainConfig tc = desk_config(false);
    net::NetworkArch arch = net::build_arch(net::DatasetKind::Mnist, net::HeadKind::Mpm1);
    std::mt19937_64 rng(tc.seed);
    mpm::DeepMpmTrainer trainer(arch, net::init_params(arch, rng), tc);
    auto losses = run_desk_epochs(trainer, train, task, tc, [](mpm::DeepMpmTrainer& t, const Tensor& x,
                                                               const std::vector<int>& y) { return t.step(x, y).loss; });
    BinaryModel m;
    m.arch = arch;
    m.positive_digit = 0;
    auto [sol, stats] = trainer.freeze(train.images, task.labels);
    m.params = trainer.params();
    m.lambda = trainer.lambda();
    m.solution = std::move(sol);
    m.frozen_stats = std::move(stats);
    return {std::move(m), std::move(losses)};
}

std::pair<BinaryModel, std::vector<double>> train_desk_cnn(const data::ImageDataset& train,
                                                           const data::BinaryTask& task) {
    mpm::TrainConfig tc = desk_config(true);
    net::NetworkArch arch = net::build_arch(net::DatasetKind::Mnist, net::HeadKind::Softmax2);
    std::mt19937_64 rng(tc.seed);
    mpm::SoftmaxTrainer trainer(arch, net::init_params(arch, rng), tc);
    auto losses = run_desk_epochs(
        trainer, train, task, tc,
        [](mpm::SoftmaxTrainer& t, const Tensor& x, const std::vector<int>& y) { return t.step(x, y); });
    BinaryModel m;
    m.arch = arch;
    m.positive_digit = 0;
    m.params = trainer.params();
    return {std::move(m), std::move(losses)};
}

double test_accuracy(const BinaryModel& m, const data::ImageDataset& ds, const data::BinaryTask& task) {
    std::vector<int> cls(task.labels.size());
    for (std::size_t i = 0; i < task.labels.size(); ++i) cls[i] = task.labels[i] > 0 ? 0 : 1;
    return attack::accuracy(attack::predict_batched(m, ds.images), cls);
}

bool criterion5(Desk& desk) {
    Criterion c(5, "desk MNIST task 0 (5000 samples, 10 epochs): both heads >= 98%, gap <= 1.5%");
    const char* root = std::getenv("MPMNET_DATA_DIR");
    if (!root) {
        c.expect(false, "MPMNET_DATA_DIR is not set; desk criteria need the MNIST IDX files");
        return c.finish();
    }
    const std::string m = std::string(root) + "/mnist/";
    auto full_train = data::load_mnist_idx(m + "train-images-idx3-ubyte", m + "train-labels-idx1-ubyte", "train");
    desk.test = data::load_mnist_idx(m + "t10k-images-idx3-ubyte", m + "t10k-labels-idx1-ubyte", "test");
    desk.train = data::subset(full_train, 5000);
    desk.train_task = data::make_binary_task(desk.train, 0);
    desk.test_task = data::make_binary_task(desk.test, 0);

    const auto t0 = std::chrono::steady_clock::now();
    std::tie(desk.mpm_model, desk.mpm_losses) = train_desk_mpm(desk.train, desk.train_task);
    std::tie(desk.cnn_model, desk.cnn_losses) = train_desk_cnn(desk.train, desk.train_task);
    desk.train_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    desk.ready = true;

    const double acc_mpm = 100.0 * test_accuracy(desk.mpm_model, desk.test, desk.test_task);
    const double acc_cnn = 100.0 * test_accuracy(desk.cnn_model, desk.test, desk.test_task);
    c.expect(acc_mpm >= 98.0, "deepmpm test accuracy " + std::to_string(acc_mpm) + " < 98");
    c.expect(acc_cnn >= 98.0, "cnn test accuracy " + std::to_string(acc_cnn) + " < 98");
    c.expect(std::abs(acc_mpm - acc_cnn) <= 1.5, "accuracy gap " + std::to_string(std::abs(acc_mpm - acc_cnn)));
    c.expect(desk.train_sec < 900.0, "training took " + std::to_string(desk.train_sec) + "s (budget 900)");
    char buf[160];
    std::snprintf(buf, sizeof(buf), "deepmpm %.2f%% cnn %.2f%% gap %.2f, trained in %.0fs", acc_mpm, acc_cnn,
                  std::abs(acc_mpm - acc_cnn), desk.train_sec);
    return c.finish(buf);
}

double self_accuracy_at(const attack::AttackReport& rep, const std::string& name, double x) {
    for (const auto& r : rep.curves)
        if (r.source == name && r.target == name && std::abs(r.x - x) < 1e-9) return r.accuracy;
    return -1.0;
}

bool criterion6(const Desk& desk, attack::AttackReport& fgsm_rep_out) {
    Criterion c(6, "FGSM ordering: deepmpm self-acc > cnn self-acc at eps {0.2,0.3,0.4}; both 100% at eps 0");
    if (!desk.ready) {
        c.expect(false, "desk models unavailable");
        return c.finish();
    }
    auto set = attack::jointly_correct_set(desk.mpm_model, desk.cnn_model, desk.test, desk.test_task, 1000);
    auto grid = attack::FgsmGrid::for_dataset(net::DatasetKind::Mnist);
    fgsm_rep_out = attack::eval_fgsm_grid(desk.mpm_model, "deepmpm", desk.cnn_model, "cnn", set, grid);

    for (const std::string& s : {std::string("deepmpm"), std::string("cnn")})
        c.expect(self_accuracy_at(fgsm_rep_out, s, 0.0) == 1.0, s + " self-accuracy not exactly 100% at eps 0");
    std::string detail;
    for (double eps : {0.2, 0.3, 0.4}) {
        const double am = self_accuracy_at(fgsm_rep_out, "deepmpm", eps);
        const double ac = self_accuracy_at(fgsm_rep_out, "cnn", eps);
        c.expect(am >= 0 && ac >= 0, "missing curve row at eps " + std::to_string(eps));
        c.expect(am > ac, "deepmpm " + std::to_string(am) + " !> cnn " + std::to_string(ac) + " at eps " +
                              std::to_string(eps));
        char buf[64];
        std::snprintf(buf, sizeof(buf), "eps %.1f: %.1f%% vs %.1f%%; ", eps, 100 * am, 100 * ac);
        detail += buf;
    }
    return c.finish(detail);
}

bool criterion7(const Desk& desk, attack::AttackReport& cw_rep_out) {
    Criterion c(7, "C&W ordering (200 examples): cnn self-acc <= 5%, deepmpm self-acc >= 50%");
    if (!desk.ready) {
        c.expect(false, "desk models unavailable");
        return c.finish();
    }
    auto set = attack::jointly_correct_set(desk.mpm_model, desk.cnn_model, desk.test, desk.test_task, 200);
    attack::CwConfig cw;  // spec defaults: 6 rounds, c0 1e-3, 500 iters, step 1e-2
    cw_rep_out = attack::eval_cw(desk.mpm_model, "deepmpm", desk.cnn_model, "cnn", set, cw);

    double mpm_self = -1, cnn_self = -1;
    for (const auto& r : cw_rep_out.curves) {
        if (r.source == "deepmpm" && r.target == "deepmpm") mpm_self = r.accuracy;
        if (r.source == "cnn" && r.target == "cnn") cnn_self = r.accuracy;
    }
    c.expect(cnn_self >= 0 && mpm_self >= 0, "missing self-attack rows");
    c.expect(cnn_self <= 0.05, "cnn self-accuracy " + std::to_string(100 * cnn_self) + "% > 5%");
    c.expect(mpm_self >= 0.50, "deepmpm self-accuracy " + std::to_string(100 * mpm_self) + "% < 50%");
    char buf[96];
    std::snprintf(buf, sizeof(buf), "cnn %.2f%% deepmpm %.2f%%", 100 * cnn_self, 100 * mpm_self);
    return c.finish(buf);
}

bool criterion8(const Desk& desk, const attack::AttackReport& cw_rep) {
    Criterion c(8, "perturbation gap: mean L2(deepmpm) - L2(cnn) > 0 over jointly successful examples");
    if (!desk.ready || cw_rep.examples.empty()) {
        c.expect(false, "C&W report unavailable");
        return c.finish();
    }
    auto gap = attack::perturbation_gap(cw_rep, "deepmpm", "cnn");
    c.expect(gap.mean_diff > 0.0, "mean gap " + std::to_string(gap.mean_diff));
    char buf[128];
    std::snprintf(buf, sizeof(buf), "mean %.4f median %.4f over %lld examples", gap.mean_diff, gap.median_diff,
                  static_cast<long long>(gap.count));
    return c.finish(buf);
}

bool criterion9(const Desk& desk) {
    Criterion c(9, "reproducibility: same seed -> identical loss sequences and bit-identical report CSVs (1 thread)");
    if (!desk.ready) {
        c.expect(false, "desk models unavailable");
        return c.finish();
    }

    // small retrain, twice, both heads: loss sequences must match bit for bit
    auto small = data::subset(desk.train, 1000);
    auto task = data::make_binary_task(small, 0);
    {
        mpm::TrainConfig tc = desk_config(false);
        tc.epochs = 2;
        for (int head = 0; head < 2; ++head) {
            std::vector<std::vector<double>> seqs;
            for (int run = 0; run < 2; ++run) {
                if (head == 0) {
                    net::NetworkArch arch = net::build_arch(net::DatasetKind::Mnist, net::HeadKind::Mpm1);
                    std::mt19937_64 rng(tc.seed);
                    mpm::DeepMpmTrainer tr(arch, net::init_params(arch, rng), tc);
                    seqs.push_back(run_desk_epochs(tr, small, task, tc,
                                                   [](mpm::DeepMpmTrainer& t, const Tensor& x,
                                                      const std::vector<int>& y) { return t.step(x, y).loss; }));
                } else {
                    mpm::TrainConfig sc = desk_config(true);
                    sc.epochs = 2;
                    net::NetworkArch arch = net::build_arch(net::DatasetKind::Mnist, net::HeadKind::Softmax2);
                    std::mt19937_64 rng(sc.seed);
                    mpm::SoftmaxTrainer tr(arch, net::init_params(arch, rng), sc);
                    seqs.push_back(run_desk_epochs(tr, small, task, sc,
                                                   [](mpm::SoftmaxTrainer& t, const Tensor& x,
                                                      const std::vector<int>& y) { return t.step(x, y); }));
                }
            }
            c.expect(seqs[0] == seqs[1], std::string(head == 0 ? "deepmpm" : "cnn") + " loss sequences differ");
        }
    }

    // single-threaded FGSM report, twice, bit-identical CSV files
    namespace fs = std::filesystem;
    const fs::path tmp = fs::temp_directory_path() / "mpmnet_acceptance_repro";
    fs::create_directories(tmp);
    auto set = attack::jointly_correct_set(desk.mpm_model, desk.cnn_model, desk.test, desk.test_task, 100, 1);
    attack::FgsmGrid grid;
    grid.epsilons = {0.0, 0.1, 0.2, 0.3};
    std::vector<std::uint64_t> hashes;
    for (int run = 0; run < 2; ++run) {
        auto rep = attack::eval_fgsm_grid(desk.mpm_model, "deepmpm", desk.cnn_model, "cnn", set, grid,
                                          attack::MpmFgsmLoss::FrozenStats, 1);
        const std::string cpath = (tmp / ("curves" + std::to_string(run) + ".csv")).string();
        const std::string epath = (tmp / ("examples" + std::to_string(run) + ".csv")).string();
        report::write_attack_csv(cpath, epath, rep);
        hashes.push_back(report::fnv1a_file(cpath));
        hashes.push_back(report::fnv1a_file(epath));
    }
    c.expect(hashes[0] == hashes[2], "curve CSVs differ between identical runs");
    c.expect(hashes[1] == hashes[3], "example CSVs differ between identical runs");
    fs::remove_all(tmp);
    return c.finish();
}

}  // namespace

int main() {
    int failed = 0;
    failed += !criterion1();
    failed += !criterion2();
    failed += !criterion3();
    failed += !criterion4();

    Desk desk;
    attack::AttackReport fgsm_rep, cw_rep;
    failed += !criterion5(desk);
    failed += !criterion6(desk, fgsm_rep);
    failed += !criterion7(desk, cw_rep);
    failed += !criterion8(desk, cw_rep);
    failed += !criterion9(desk);

    std::printf("%s: %d/9 criteria passed\n", failed == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL", 9 - failed);
    return failed == 0 ? 0 : 1;
}
