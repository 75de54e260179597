#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mpmnet/tape.hpp"
#include "testutil.hpp"

using namespace mpmnet;
using testutil::fd_gradient;
using testutil::max_rel_err;
using testutil::random_tensor;
using testutil::tensors_close;

TEST_CASE("tensor basics") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.all_finite());
    CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), DimensionError);
    CHECK_THROWS_AS(t.reshaped({4}), DimensionError);
    CHECK(Tensor::scalar(3.0).item() == 3.0);
}

TEST_CASE("affine examples") {
    Tape t;
    SUBCASE("identity") {
        Var x = t.leaf(Tensor({1, 2}, {1, 2}));
        Var w = t.leaf(Tensor::identity(2));
        Var b = t.leaf(Tensor({2}, {0, 0}));
        Var y = t.affine(x, w, b);
        CHECK(t.value(y).at2(0, 0) == 1);
        CHECK(t.value(y).at2(0, 1) == 2);
    }
    SUBCASE("hand product") {
        Var x = t.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
        Var w = t.leaf(Tensor({2, 1}, {3, 5}));
        Var b = t.leaf(Tensor({1}, {1}));
        Var y = t.affine(x, w, b);
        CHECK(t.value(y).at2(0, 0) == 4);
        CHECK(t.value(y).at2(1, 0) == 6);
    }
    SUBCASE("shape mismatch") {
        Var x = t.leaf(Tensor({1, 3}));
        Var w = t.leaf(Tensor({2, 2}));
        CHECK_THROWS_AS(t.affine(x, w, Var{}), DimensionError);
    }
}

TEST_CASE("affine gradient vs finite differences") {
    std::mt19937_64 rng(7);
    Tensor x0 = random_tensor({3, 4}, rng);
    Tensor w0 = random_tensor({4, 2}, rng);
    Tensor b0 = random_tensor({2}, rng);

    Tape t;
    Var x = t.leaf(x0, true);
    Var w = t.leaf(w0, true);
    Var b = t.leaf(b0, true);
    Var s = t.sum(t.affine(x, w, b));
    t.backward(s);

    auto loss_w = [&](const Tensor& wt) {
        Tape u;
        return u.value(u.sum(u.affine(u.leaf(x0), u.leaf(wt), u.leaf(b0)))).item();
    };
    CHECK(max_rel_err(t.grad(w), fd_gradient(loss_w, w0)) < 1e-4);
    auto loss_x = [&](const Tensor& xt) {
        Tape u;
        return u.value(u.sum(u.affine(u.leaf(xt), u.leaf(w0), u.leaf(b0)))).item();
    };
    CHECK(max_rel_err(t.grad(x), fd_gradient(loss_x, x0)) < 1e-4);
}

TEST_CASE("conv2d examples") {
    Tape t;
    SUBCASE("hand sum") {
        Var x = t.leaf(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
        Var k = t.leaf(Tensor({1, 1, 2, 2}, {1, 0, 0, 1}));
        Var y = t.conv2d(x, k);
        CHECK(t.value(y).numel() == 1);
        CHECK(t.value(y)[0] == 5);
    }
    SUBCASE("identity kernel") {
        std::mt19937_64 rng(1);
        Tensor x0 = random_tensor({2, 1, 3, 3}, rng);
        Var x = t.leaf(x0);
        Var k = t.leaf(Tensor({1, 1, 1, 1}, {1}));
        Var y = t.conv2d(x, k);
        CHECK(tensors_close(t.value(y), x0, 0));
    }
    SUBCASE("kernel larger than input") {
        Var x = t.leaf(Tensor({1, 1, 2, 2}));
        Var k = t.leaf(Tensor({1, 1, 3, 3}));
        CHECK_THROWS_AS(t.conv2d(x, k), DimensionError);
    }
}

TEST_CASE("conv2d gradients vs finite differences") {
    std::mt19937_64 rng(11);
    Tensor x0 = random_tensor({1, 2, 5, 5}, rng);
    Tensor k0 = random_tensor({3, 2, 3, 3}, rng);
    Tape t;
    Var x = t.leaf(x0, true);
    Var k = t.leaf(k0, true);
    Var s = t.sum(t.conv2d(x, k));
    t.backward(s);
    auto loss_k = [&](const Tensor& kt) {
        Tape u;
        return u.value(u.sum(u.conv2d(u.leaf(x0), u.leaf(kt)))).item();
    };
    CHECK(max_rel_err(t.grad(k), fd_gradient(loss_k, k0)) < 1e-4);
    auto loss_x = [&](const Tensor& xt) {
        Tape u;
        return u.value(u.sum(u.conv2d(u.leaf(xt), u.leaf(k0)))).item();
    };
    CHECK(max_rel_err(t.grad(x), fd_gradient(loss_x, x0)) < 1e-4);
}

TEST_CASE("maxpool2d") {
    Tape t;
    SUBCASE("window max") {
        Var x = t.leaf(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
        Var y = t.maxpool2d(x);
        CHECK(t.value(y)[0] == 4);
    }
    SUBCASE("constant input") {
        Var x = t.leaf(Tensor::full({1, 1, 4, 4}, 2.5));
        Var y = t.maxpool2d(x);
        for (std::int64_t i = 0; i < t.value(y).numel(); ++i) CHECK(t.value(y)[i] == 2.5);
    }
    SUBCASE("odd extents pad to ceil") {
        Var x = t.leaf(Tensor({1, 1, 3, 5}, std::vector<double>(15, 1.0)));
        Var y = t.maxpool2d(x);
        CHECK(t.value(y).shape() == Shape{1, 1, 2, 3});
    }
    SUBCASE("gradient routes to argmax") {
        Tensor x0({1, 1, 2, 2}, {1, 7, 3, 4});
        Var x = t.leaf(x0, true);
        Var s = t.sum(t.maxpool2d(x));
        t.backward(s);
        Tensor g = t.grad(x);
        CHECK(g[0] == 0);
        CHECK(g[1] == 1);
        CHECK(g[2] == 0);
        CHECK(g[3] == 0);
    }
}

TEST_CASE("maxpool2d gradient vs finite differences away from ties") {
    std::mt19937_64 rng(3);
    // uniform doubles never tie in practice
    Tensor x0 = random_tensor({2, 2, 5, 4}, rng);
    Tape t;
    Var x = t.leaf(x0, true);
    t.backward(t.sum(t.maxpool2d(x)));
    auto loss = [&](const Tensor& xt) {
        Tape u;
        return u.value(u.sum(u.maxpool2d(u.leaf(xt)))).item();
    };
    CHECK(max_rel_err(t.grad(x), fd_gradient(loss, x0)) < 1e-4);
}

TEST_CASE("elementwise examples") {
    Tape t;
    Var r = t.relu(t.leaf(Tensor({2}, {-1, 2})));
    CHECK(t.value(r)[0] == 0);
    CHECK(t.value(r)[1] == 2);

    Var s = t.sigmoid(t.leaf(Tensor::scalar(0)));
    CHECK(t.value(s).item() == 0.5);

    Var q = t.leaf(Tensor::scalar(0.25), true);
    Var sq = t.sqrt_smoothed(q, 0.0);
    CHECK(t.value(sq).item() == 0.5);
    t.backward(sq);
    CHECK(t.grad(q).item() == doctest::Approx(1.0));

    CHECK_THROWS_AS(t.log_(t.leaf(Tensor({2}, {1.0, -1.0}))), DomainError);
    CHECK_THROWS_AS(t.add(t.leaf(Tensor({2})), t.leaf(Tensor({3}))), DimensionError);
}

TEST_CASE("elementwise gradients vs finite differences") {
    std::mt19937_64 rng(13);
    // sample away from relu kink and log/sqrt domain edges
    Tensor x0 = random_tensor({6}, rng, 0.2, 2.0);
    auto check_op = [&](auto make) {
        Tape t;
        Var x = t.leaf(x0, true);
        t.backward(t.sum(make(t, x)));
        auto loss = [&](const Tensor& xt) {
            Tape u;
            Var xu = u.leaf(xt);
            return u.value(u.sum(make(u, xu))).item();
        };
        CHECK(max_rel_err(t.grad(x), fd_gradient(loss, x0)) < 1e-4);
    };
    check_op([](Tape& t, Var x) { return t.relu(x); });
    check_op([](Tape& t, Var x) { return t.sigmoid(x); });
    check_op([](Tape& t, Var x) { return t.tanh_(x); });
    check_op([](Tape& t, Var x) { return t.log_(x); });
    check_op([](Tape& t, Var x) { return t.sqrt_smoothed(x, 1e-12); });
    check_op([](Tape& t, Var x) { return t.mul(x, t.scale(x, 2.0)); });
    check_op([](Tape& t, Var x) { return t.mul(x, t.leaf(Tensor::scalar(1.5))); });
}

TEST_CASE("batch_mean") {
    Tape t;
    Var f = t.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
    Var m = t.batch_mean(f);
    CHECK(t.value(m)[0] == 0.5);
    CHECK(t.value(m)[1] == 0.5);

    Var single = t.batch_mean(t.leaf(Tensor({1, 3}, {4, 5, 6})));
    CHECK(t.value(single)[0] == 4);
    CHECK(t.value(single)[2] == 6);

    CHECK_THROWS_AS(t.batch_mean(t.leaf(Tensor({0, 3}))), TaskError);

    std::mt19937_64 rng(5);
    Tensor f0 = random_tensor({4, 3}, rng);
    Tape u;
    Var fv = u.leaf(f0, true);
    Var w = u.leaf(random_tensor({3}, rng));
    u.backward(u.dot(u.batch_mean(fv), w));
    auto loss = [&](const Tensor& ft) {
        Tape v;
        return v.value(v.dot(v.batch_mean(v.leaf(ft)), v.leaf(u.value(w)))).item();
    };
    CHECK(max_rel_err(u.grad(fv), fd_gradient(loss, f0)) < 1e-4);
}

TEST_CASE("batch_cov examples") {
    Tape t;
    SUBCASE("hand value") {
        Var f = t.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
        Var c = t.batch_cov(f, 0.0);
        const Tensor& v = t.value(c);
        CHECK(v.at2(0, 0) == doctest::Approx(0.25));
        CHECK(v.at2(0, 1) == doctest::Approx(-0.25));
        CHECK(v.at2(1, 0) == doctest::Approx(-0.25));
        CHECK(v.at2(1, 1) == doctest::Approx(0.25));
    }
    SUBCASE("zero spread plus regularizer") {
        Tensor rows({3, 2}, {2, 5, 2, 5, 2, 5});
        Var c = t.batch_cov(t.leaf(rows), 1e-6);
        const Tensor& v = t.value(c);
        CHECK(v.at2(0, 0) == doctest::Approx(1e-6));
        CHECK(v.at2(1, 1) == doctest::Approx(1e-6));
        CHECK(v.at2(0, 1) == 0.0);
    }
    SUBCASE("insufficient samples") {
        CHECK_THROWS_AS(t.batch_cov(t.leaf(Tensor({1, 2})), 0.0), TaskError);
    }
    SUBCASE("unbiased divisor") {
        Var c = t.batch_cov(t.leaf(Tensor({2, 1}, {0, 1})), 0.0, false);
        CHECK(t.value(c).item() == doctest::Approx(0.5));
    }
}

TEST_CASE("batch_cov symmetry, PSD floor, gradient") {
    std::mt19937_64 rng(17);
    Tensor f0 = random_tensor({6, 3}, rng);
    const double reg = 1e-6;
    Tape t;
    Var f = t.leaf(f0, true);
    Var c = t.batch_cov(f, reg);
    const Tensor& cv = t.value(c);
    for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t j = 0; j < 3; ++j) CHECK(std::abs(cv.at2(i, j) - cv.at2(j, i)) <= 1e-12);
    // PSD + reg floor via random quadratic forms
    for (int k = 0; k < 50; ++k) {
        Tensor v = random_tensor({3}, rng);
        double q = 0, n2 = 0;
        for (std::int64_t i = 0; i < 3; ++i) {
            n2 += v[i] * v[i];
            for (std::int64_t j = 0; j < 3; ++j) q += v[i] * cv.at2(i, j) * v[j];
        }
        CHECK(q >= reg * n2 - 1e-9);
    }
    Tensor a0 = random_tensor({3}, rng);
    Tape u;
    Var fu = u.leaf(f0, true);
    Var au = u.leaf(a0);
    Var cu = u.batch_cov(fu, reg);
    // a' C a through two dots
    Var ca = u.affine(u.reshape(au, {1, 3}), cu, Var{});
    u.backward(u.dot(u.reshape(ca, {3}), au));
    auto loss = [&](const Tensor& ft) {
        Tape v;
        Var cv2 = v.batch_cov(v.leaf(ft), reg);
        Var av = v.leaf(a0);
        Var ca2 = v.affine(v.reshape(av, {1, 3}), cv2, Var{});
        return v.value(v.dot(v.reshape(ca2, {3}), av)).item();
    };
    CHECK(max_rel_err(u.grad(fu), fd_gradient(loss, f0)) < 1e-4);
}

TEST_CASE("quad_form_sqrt") {
    Tape t;
    SUBCASE("identity matrix") {
        Var a = t.leaf(Tensor({2}, {0.5, 0}));
        Var s = t.leaf(Tensor::identity(2));
        CHECK(t.value(t.quad_form_sqrt(a, s, 0.0)).item() == doctest::Approx(0.5));
    }
    SUBCASE("zero vector") {
        Var a = t.leaf(Tensor({2}, {0, 0}));
        Var s = t.leaf(Tensor::identity(2));
        CHECK(t.value(t.quad_form_sqrt(a, s, 0.0)).item() == 0.0);
    }
    SUBCASE("positive homogeneity") {
        std::mt19937_64 rng(23);
        for (int k = 0; k < 10; ++k) {
            Tensor a0 = random_tensor({3}, rng);
            Tensor b = random_tensor({3, 3}, rng);
            // S = B'B is PSD
            Tensor s0({3, 3});
            for (std::int64_t i = 0; i < 3; ++i)
                for (std::int64_t j = 0; j < 3; ++j)
                    for (std::int64_t l = 0; l < 3; ++l) s0.at2(i, j) += b.at2(l, i) * b.at2(l, j);
            const double c = 0.3 + 3.0 * std::generate_canonical<double, 53>(rng);
            Tensor ca = a0;
            for (std::int64_t i = 0; i < 3; ++i) ca[i] *= c;
            Tape u;
            const double r1 = u.value(u.quad_form_sqrt(u.leaf(a0), u.leaf(s0), 0.0)).item();
            const double r2 = u.value(u.quad_form_sqrt(u.leaf(ca), u.leaf(s0), 0.0)).item();
            CHECK(r2 == doctest::Approx(c * r1).epsilon(1e-12));
        }
    }
    SUBCASE("PSD violation") {
        Var a = t.leaf(Tensor({1}, {1.0}));
        Var s = t.leaf(Tensor({1, 1}, {-1.0}));
        CHECK_THROWS_AS(t.quad_form_sqrt(a, s, 0.0), NumericError);
    }
    SUBCASE("gradients flow to a and S") {
        std::mt19937_64 rng(29);
        Tensor a0 = random_tensor({3}, rng, 0.5, 1.5);
        Tensor s0 = Tensor::identity(3);
        s0.at2(0, 1) = s0.at2(1, 0) = 0.3;
        Tape u;
        Var a = u.leaf(a0, true);
        Var s = u.leaf(s0, true);
        u.backward(u.quad_form_sqrt(a, s, 0.0));
        auto fa = [&](const Tensor& at) {
            Tape v;
            return v.value(v.quad_form_sqrt(v.leaf(at), v.leaf(s0), 0.0)).item();
        };
        CHECK(max_rel_err(u.grad(a), fd_gradient(fa, a0)) < 1e-4);
        auto fs = [&](const Tensor& st) {
            Tape v;
            // symmetrize the perturbed matrix so the fd stays in the PSD cone
            Tensor sym = st;
            for (std::int64_t i = 0; i < 3; ++i)
                for (std::int64_t j = 0; j < 3; ++j) sym.at2(i, j) = 0.5 * (st.at2(i, j) + st.at2(j, i));
            return v.value(v.quad_form_sqrt(v.leaf(a0), v.leaf(sym), 0.0)).item();
        };
        // fd of the symmetrized map equals the symmetrized analytic gradient
        Tensor ga = u.grad(s);
        Tensor gfd = fd_gradient(fs, s0);
        Tensor gsym({3, 3});
        for (std::int64_t i = 0; i < 3; ++i)
            for (std::int64_t j = 0; j < 3; ++j) gsym.at2(i, j) = 0.5 * (ga.at2(i, j) + ga.at2(j, i));
        CHECK(max_rel_err(gsym, gfd) < 1e-4);
    }
}

TEST_CASE("chain rule on a two-layer toy network") {
    std::mt19937_64 rng(31);
    Tensor x0 = random_tensor({3, 4}, rng);
    Tensor w1 = random_tensor({4, 5}, rng);
    Tensor b1 = random_tensor({5}, rng);
    Tensor w2 = random_tensor({5, 2}, rng);
    Tensor b2 = random_tensor({2}, rng);
    auto forward = [&](Tape& t, const Tensor& xin, bool req) {
        Var x = t.leaf(xin, req);
        Var h = t.relu(t.affine(x, t.leaf(w1), t.leaf(b1)));
        Var y = t.affine(h, t.leaf(w2), t.leaf(b2));
        return std::pair{x, t.sum(t.mul(y, y))};
    };
    Tape t;
    auto [x, loss] = forward(t, x0, true);
    t.backward(loss);
    auto f = [&](const Tensor& xt) {
        Tape u;
        return u.value(forward(u, xt, false).second).item();
    };
    CHECK(max_rel_err(t.grad(x), fd_gradient(f, x0)) < 1e-4);
}

TEST_CASE("seeded graph replay is bitwise identical") {
    auto run = [] {
        std::mt19937_64 rng(99);
        Tape t;
        Var x = t.leaf(Tensor::uniform({4, 6}, -1, 1, rng), true);
        Var d = t.dropout(x, 0.5, rng, true);
        Var l = t.sum(t.mul(d, d));
        t.backward(l);
        return std::pair{t.value(l).item(), t.grad(x)};
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    CHECK(l1 == l2);
    for (std::int64_t i = 0; i < g1.numel(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("softmax_xent") {
    Tape t;
    SUBCASE("uniform") {
        Var z = t.leaf(Tensor({1, 2}, {0, 0}));
        CHECK(t.value(t.softmax_xent(z, {0})).item() == doctest::Approx(std::log(2.0)));
    }
    SUBCASE("saturated correct") {
        Var z = t.leaf(Tensor({1, 2}, {100, -100}));
        CHECK(t.value(t.softmax_xent(z, {0})).item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("gradient") {
        std::mt19937_64 rng(37);
        Tensor z0 = random_tensor({4, 2}, rng);
        std::vector<int> labels{0, 1, 1, 0};
        Tape u;
        Var z = u.leaf(z0, true);
        u.backward(u.softmax_xent(z, labels));
        auto f = [&](const Tensor& zt) {
            Tape v;
            return v.value(v.softmax_xent(v.leaf(zt), labels)).item();
        };
        CHECK(max_rel_err(u.grad(z), fd_gradient(f, z0)) < 1e-4);
    }
}

TEST_CASE("select_rows and dropout eval mode") {
    Tape t;
    Var x = t.leaf(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}), true);
    Var s = t.select_rows(x, {2, 0});
    CHECK(t.value(s).at2(0, 0) == 5);
    CHECK(t.value(s).at2(1, 1) == 2);
    t.backward(t.sum(s));
    CHECK(t.grad(x).at2(1, 0) == 0);
    CHECK(t.grad(x).at2(0, 0) == 1);

    std::mt19937_64 rng(41);
    Var d = t.dropout(x, 0.5, rng, false);
    CHECK(d.id == x.id);  // identity in eval mode
}
