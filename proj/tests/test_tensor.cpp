#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "treeqn/gradcheck.hpp"
#include "treeqn/optim.hpp"
#include "treeqn/rng.hpp"
#include "treeqn/tensor.hpp"

using namespace treeqn;

namespace {

Variable make_var(const std::string& name, const Shape& shape, std::span<const double> data) {
    Variable v(name, shape);
    std::copy(data.begin(), data.end(), v.value.begin());
    return v;
}

Variable random_var(const std::string& name, const Shape& shape, Rng& rng, double scale = 1.0) {
    Variable v(name, shape);
    for (double& x : v.value) x = rng.uniform(-scale, scale);
    return v;
}

}  // namespace

TEST_CASE("fc: identity weights pass the input through") {
    Tape tape;
    double w[4] = {1, 0, 0, 1};
    double b[2] = {0, 0};
    double x[2] = {3, 4};
    Tensor y = tape.fc(tape.constant(Shape{2}, x), tape.constant(Shape{2, 2}, w), tape.constant(Shape{2}, b));
    CHECK(y.value(0) == 3.0);
    CHECK(y.value(1) == 4.0);
}

TEST_CASE("fc: hand-computed sum") {
    Tape tape;
    double w[2] = {1, 1};
    double b[1] = {1};
    double x[2] = {2, 3};
    Tensor y = tape.fc(tape.constant(Shape{2}, x), tape.constant(Shape{1, 2}, w), tape.constant(Shape{1}, b));
    CHECK(y.value(0) == 6.0);
}

TEST_CASE("fc: shape mismatch is a hard error") {
    Tape tape;
    double w[6] = {1, 2, 3, 4, 5, 6};
    double b[2] = {0, 0};
    double x[2] = {1, 2};
    CHECK_THROWS_AS(tape.fc(tape.constant(Shape{2}, x), tape.constant(Shape{2, 3}, w), tape.constant(Shape{2}, b)),
                    std::invalid_argument);
}

TEST_CASE("fc: gradient of sum(y) matches central differences") {
    Rng rng(11);
    Variable w = random_var("w", Shape{5, 5}, rng);
    Variable b = random_var("b", Shape{5}, rng);
    Variable x = random_var("x", Shape{5}, rng);
    Variable* vars[] = {&w, &b, &x};
    auto report = finite_diff_check(
        [&](Tape& t) { return t.sum(t.fc(t.param(x), t.param(w), t.param(b))); }, vars);
    CHECK(report.max_rel_err <= 1e-6);
    CHECK(report.coords_checked == 35);
}

TEST_CASE("conv2d: all-ones 3x3 kernel sums the window") {
    Tape tape;
    std::vector<double> x(9, 1.0), k(9, 1.0);
    double b[1] = {0};
    Tensor y = tape.conv2d(tape.constant(Shape{1, 3, 3}, x), tape.constant(Shape{1, 1, 3, 3}, k),
                           tape.constant(Shape{1}, b), 1);
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y.value(0) == 9.0);
}

TEST_CASE("conv2d: valid output shape arithmetic") {
    Tape tape;
    Rng rng(3);
    std::vector<double> x(5 * 8 * 8), k(24 * 5 * 3 * 3), b(24);
    for (double& v : x) v = rng.next_double();
    for (double& v : k) v = rng.next_double();
    Tensor y = tape.conv2d(tape.constant(Shape{5, 8, 8}, x), tape.constant(Shape{24, 5, 3, 3}, k),
                           tape.constant(Shape{24}, b), 1);
    CHECK(y.shape() == Shape{24, 6, 6});
}

TEST_CASE("conv2d: non-integral output size is a hard error") {
    Tape tape;
    std::vector<double> x(5 * 5, 1.0), k(4, 1.0);
    double b[1] = {0};
    CHECK_THROWS_AS(tape.conv2d(tape.constant(Shape{1, 5, 5}, x), tape.constant(Shape{1, 1, 2, 2}, k),
                                tape.constant(Shape{1}, b), 2),
                    std::invalid_argument);
}

TEST_CASE("conv2d: gradient check vs finite differences") {
    Rng rng(17);
    Variable x = random_var("x", Shape{2, 5, 5}, rng);
    Variable k = random_var("k", Shape{3, 2, 3, 3}, rng);
    Variable b = random_var("b", Shape{3}, rng);
    Variable* vars[] = {&x, &k, &b};
    auto report = finite_diff_check(
        [&](Tape& t) { return t.sum(t.tanh(t.conv2d(t.param(x), t.param(k), t.param(b), 2))); }, vars);
    CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("softmax: symmetric input gives the uniform distribution") {
    Tape tape;
    double x[3] = {0, 0, 0};
    Tensor y = tape.softmax(tape.constant(Shape{3}, x));
    for (int i = 0; i < 3; ++i) CHECK(y.value(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax: output is a probability simplex") {
    Rng rng(5);
    Tape tape;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(4);
        for (double& v : x) v = rng.uniform(-30, 30);
        Tensor y = tape.softmax(tape.constant(Shape{4}, x));
        double total = 0.0;
        for (int i = 0; i < 4; ++i) {
            CHECK(y.value(i) >= 0.0);
            total += y.value(i);
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
    }
}

TEST_CASE("l2_normalize: 3-4-5 triangle") {
    Tape tape;
    double x[2] = {3, 4};
    Tensor y = tape.l2_normalize(tape.constant(Shape{2}, x));
    CHECK(y.value(0) == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(y.value(1) == doctest::Approx(0.8).epsilon(1e-14));
}

TEST_CASE("l2_normalize: unit output norm for inputs down to 1e-6") {
    Rng rng(7);
    Tape tape;
    for (double scale : {1.0, 1e-3, 1e-6}) {
        std::vector<double> x(8);
        for (double& v : x) v = rng.uniform(-1, 1);
        double norm = 0.0;
        for (double v : x) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : x) v *= scale / norm;  // exact magnitude `scale`
        Tensor y = tape.l2_normalize(tape.constant(Shape{8}, x));
        double out = 0.0;
        for (int i = 0; i < 8; ++i) out += y.value(i) * y.value(i);
        CHECK(std::abs(std::sqrt(out) - 1.0) <= 1e-10);
    }
}

TEST_CASE("softmax backup gradient: b(x) = sum x_i softmax(x)_i at [0, ln 3]") {
    Variable x = make_var("x", Shape{2}, std::vector<double>{0.0, std::log(3.0)});
    Variable* vars[] = {&x};
    auto forward = [&](Tape& t) {
        Tensor xs = t.param(x);
        return t.sum(t.mul(xs, t.softmax(xs)));
    };
    {
        Tape t;
        // weights (1/4, 3/4) -> b = 3/4 ln 3
        CHECK(forward(t).scalar() == doctest::Approx(0.75 * std::log(3.0)).epsilon(1e-12));
    }
    auto report = finite_diff_check(forward, vars);
    CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("backward: sum gives ones") {
    Tape tape;
    double x[3] = {5, -2, 0.5};
    Tensor xs = tape.input(Shape{3}, x);
    tape.backward(tape.sum(xs));
    auto g = xs.grad();
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 1.0);
}

TEST_CASE("backward: quadratic") {
    Tape tape;
    double x[2] = {1, 2};
    Tensor xs = tape.input(Shape{2}, x);
    tape.backward(tape.sum(tape.mul(xs, xs)));
    CHECK(xs.grad()[0] == doctest::Approx(2.0));
    CHECK(xs.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward: non-scalar loss is a hard error") {
    Tape tape;
    double x[2] = {1, 2};
    Tensor xs = tape.input(Shape{2}, x);
    CHECK_THROWS_AS(tape.backward(xs), std::invalid_argument);
}

TEST_CASE("backward: off-path tensors get zero gradient") {
    Tape tape;
    double a[2] = {1, 2}, b[2] = {3, 4};
    Tensor ta = tape.input(Shape{2}, a);
    Tensor tb = tape.input(Shape{2}, b);
    Tensor unused = tape.tanh(tb);
    tape.backward(tape.sum(ta));
    CHECK(unused.grad()[0] == 0.0);
    CHECK(tb.grad()[0] == 0.0);
}

TEST_CASE("backward: accumulate mode adds into variable grads") {
    Variable x = make_var("x", Shape{2}, std::vector<double>{1.0, 2.0});
    {
        Tape t;
        t.backward(t.sum(t.param(x)));
    }
    CHECK(x.grad[0] == 1.0);
    {
        Tape t;
        t.backward(t.sum(t.param(x)), /*accumulate=*/true);
    }
    CHECK(x.grad[0] == 2.0);
    {
        Tape t;
        t.backward(t.sum(t.param(x)));
    }
    CHECK(x.grad[0] == 1.0);  // zeroed first by default
}

TEST_CASE("index / stack / add_n / max wiring") {
    Tape tape;
    double x[4] = {0.5, 2.0, 2.0, -1.0};
    Tensor xs = tape.input(Shape{4}, x);
    Tensor picked = tape.index(xs, 1);
    CHECK(picked.scalar() == 2.0);

    Tensor m = tape.max(xs);
    CHECK(m.scalar() == 2.0);
    tape.backward(m);
    CHECK(xs.grad()[1] == 1.0);  // ties break to the lowest index
    CHECK(xs.grad()[2] == 0.0);

    std::vector<Tensor> scalars = {tape.index(xs, 0), tape.index(xs, 3)};
    Tensor stacked = tape.stack(scalars);
    CHECK(stacked.shape() == Shape{2});
    CHECK(stacked.value(1) == -1.0);
    Tensor total = tape.add_n(scalars);
    CHECK(total.scalar() == doctest::Approx(-0.5));
}

TEST_CASE("composite op chain matches finite differences") {
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        Variable x = random_var("x", Shape{6}, rng);
        Variable w = random_var("w", Shape{6, 6}, rng, 0.5);
        Variable b = random_var("b", Shape{6}, rng, 0.2);
        Variable* vars[] = {&x, &w, &b};
        auto forward = [&](Tape& t) {
            Tensor h = t.l2_normalize(t.param(x));
            h = t.add(h, t.tanh(t.fc(h, t.param(w), t.param(b))));
            Tensor p = t.log_softmax(h);
            Tensor q = t.softmax(h);
            Tensor ent = t.sum(t.mul(p, q));
            Tensor sq = t.mean(t.square(t.sub(h, t.mul_scalar(q, 2.0))));
            std::vector<Tensor> parts = {ent, sq, t.add_scalar(t.index(h, 2), 0.25)};
            return t.add_n(parts);
        };
        auto report = finite_diff_check(forward, vars);
        CHECK(report.max_rel_err <= 1e-6);
    }
}

TEST_CASE("finite differences on a linear function are exact") {
    // Integer values and a power-of-two step make every evaluation exact in
    // binary floating point, so the reported error is identically zero.
    Variable x = make_var("x", Shape{3}, std::vector<double>{1.0, 2.0, 3.0});
    Variable* vars[] = {&x};
    GradCheckOptions opts;
    opts.step = 0.5;
    auto report = finite_diff_check([&](Tape& t) { return t.sum(t.param(x)); }, vars, opts);
    CHECK(report.max_rel_err == 0.0);
}

TEST_CASE("finite-difference oracle self-test on sum(tanh(x))") {
    Rng rng(31);
    Variable x = random_var("x", Shape{10}, rng);
    Variable* vars[] = {&x};
    auto report = finite_diff_check([&](Tape& t) { return t.sum(t.tanh(t.param(x))); }, vars);
    CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("forward determinism: identical runs are bit-identical") {
    Rng rng(41);
    Variable x = random_var("x", Shape{16}, rng);
    Variable w = random_var("w", Shape{16, 16}, rng);
    Variable b = random_var("b", Shape{16}, rng);
    auto run = [&]() {
        Tape t;
        Tensor y = t.softmax(t.tanh(t.fc(t.l2_normalize(t.param(x)), t.param(w), t.param(b))));
        auto vals = y.values();
        return std::vector<double>(vals.begin(), vals.end());
    };
    auto a = run();
    auto c = run();
    CHECK(std::memcmp(a.data(), c.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("f32 precision mode quantizes op outputs to binary32") {
    Tape tape(Precision::f32);
    double x[2] = {0.1, 0.2};
    Tensor xs = tape.constant(Shape{2}, x);
    Tensor y = tape.add(xs, xs);
    for (int i = 0; i < 2; ++i) {
        CHECK(y.value(i) == static_cast<double>(static_cast<float>(static_cast<double>(static_cast<float>(x[i])) * 2.0)));
    }
}

TEST_CASE("rmsprop: first step from zero state") {
    Variable p("p", Shape{1});
    p.value[0] = 0.0;
    p.grad[0] = 1.0;
    Variable* params[] = {&p};
    RmsProp opt(params, 1e-4, 0.99, 1e-5);
    opt.step();
    // v = 0.01, step = -1e-4 / (0.1 + 1e-5)
    CHECK(opt.moment(0)[0] == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(p.value[0] == doctest::Approx(-1e-4 / (0.1 + 1e-5)).epsilon(1e-12));
    CHECK(p.value[0] == doctest::Approx(-9.999e-4).epsilon(1e-4));
}

TEST_CASE("rmsprop: zero gradient leaves parameters unchanged and decays v") {
    Variable p("p", Shape{1});
    p.value[0] = 1.5;
    p.grad[0] = 1.0;
    Variable* params[] = {&p};
    RmsProp opt(params, 1e-4, 0.99, 1e-5);
    opt.step();
    const double v_before = opt.moment(0)[0];
    const double value_before = p.value[0];
    p.grad[0] = 0.0;
    opt.step();
    CHECK(p.value[0] == value_before);
    CHECK(opt.moment(0)[0] == doctest::Approx(0.99 * v_before).epsilon(1e-14));
}

TEST_CASE("rmsprop: constant gradient drives v monotonically toward g^2") {
    Variable p("p", Shape{1});
    Variable* params[] = {&p};
    RmsProp opt(params, 1e-4, 0.99, 1e-5);
    const double g = 2.0;
    double prev = 0.0;
    for (int t = 1; t <= 50; ++t) {
        p.grad[0] = g;
        opt.step();
        const double v = opt.moment(0)[0];
        const double closed_form = (1.0 - std::pow(0.99, t)) * g * g;
        CHECK(v == doctest::Approx(closed_form).epsilon(1e-10));
        CHECK(v > prev);
        CHECK(v < g * g);
        prev = v;
    }
}

TEST_CASE("gradient clipping scales to the requested global norm") {
    Variable a("a", Shape{2}), b("b", Shape{1});
    a.grad = {3.0, 0.0};
    b.grad = {4.0};
    Variable* params[] = {&a, &b};
    const double norm = clip_global_grad_norm(params, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(a.grad[0] == doctest::Approx(0.6));
    CHECK(b.grad[0] == doctest::Approx(0.8));
}
