#include <doctest.h>

#include <cmath>

#include "lpvqa/autodiff.hpp"
#include "lpvqa/common.hpp"

using namespace lpvqa;
using namespace lpvqa::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
    Tensor t(shape, 0.0, requires_grad);
    for (double& v : t.data()) v = rng.uniform(-scale, scale);
    return t;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    Tensor x({2}, {0.0, 0.0});
    Tensor y = softmax(x);
    CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random_tensor({4, 9}, rng, 8.0);
        Tensor y = softmax(x);
        for (int r = 0; r < 4; ++r) {
            double sum = 0.0;
            for (int c = 0; c < 9; ++c) {
                double v = y.data()[r * 9 + c];
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("matmul of ones") {
    Tensor a({2, 3}, 1.0);
    Tensor b({3, 1}, 1.0);
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 1});
    CHECK(c.data()[0] == 3.0);
    CHECK(c.data()[1] == 3.0);
}

TEST_CASE("matmul shape mismatch names the op and shapes") {
    Tensor a({2, 3}, 1.0);
    Tensor b({4, 1}, 1.0);
    CHECK_THROWS_WITH_AS(matmul(a, b),
                         doctest::Contains("matmul"), Error);
}

TEST_CASE("conv2d stem shape: 30x30x3 through 10x10 stride 10 gives 3x3x64") {
    Rng rng(3);
    Tensor img = random_tensor({30, 30, 3}, rng, 0.5);
    Tensor kernel = random_tensor({10, 10, 3, 64}, rng, 0.1);
    Tensor out = conv2d(img, kernel, 10);
    CHECK(out.shape() == Shape{3, 3, 64});
}

TEST_CASE("backward of sum of squares") {
    Tensor x({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor loss = sum_all(mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("backward of log_softmax pick is onehot minus softmax") {
    Rng rng(11);
    Tensor x = random_tensor({1, 5}, rng, 2.0, true);
    Tensor probs = softmax(detach(x));
    const int k = 3;
    Tape tape;
    Tensor lp = log_softmax(x);
    Tensor loss = sum_all(pick_index(lp, {k}));
    tape.backward(loss);
    for (int i = 0; i < 5; ++i) {
        double expected = (i == k ? 1.0 : 0.0) - probs.data()[i];
        CHECK(x.grad()[i] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("gradient accumulation: two uses sum the single-use gradients") {
    Tensor x({3}, {0.5, -1.0, 2.0}, true);
    Tensor c({3}, {2.0, 3.0, 4.0});

    // single use: loss = sum(x * c)
    {
        Tape tape;
        Tensor loss = sum_all(mul(x, c));
        tape.backward(loss);
    }
    std::vector<double> single = x.grad();
    x.zero_grad();

    // double use: loss = sum(x * c) + sum(x * c)
    {
        Tape tape;
        Tensor loss = add(sum_all(mul(x, c)), sum_all(mul(x, c)));
        tape.backward(loss);
    }
    for (int i = 0; i < 3; ++i) {
        CHECK(x.grad()[i] == 2.0 * single[i]);  // exact equality of the computation
    }
}

TEST_CASE("tape reuse is an error") {
    Tensor x({1}, {2.0}, true);
    Tape tape;
    Tensor loss = mul(x, x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), Error);
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), Error);
}

TEST_CASE("every primitive matches finite differences at random smooth points") {
    Rng rng(1234);
    const double h = 1e-5, rtol = 1e-4;
    // each lambda maps a flat parameter vector to a scalar through one primitive
    struct Case {
        const char* name;
        int n;
        std::function<Tensor(const Tensor&)> f;
    };
    Rng aux(99);
    Tensor other = random_tensor({2, 6}, aux, 1.0);
    Tensor right = random_tensor({6, 3}, aux, 1.0);
    Tensor bias = random_tensor({6}, aux, 1.0);
    std::vector<int> picks = {1, 4};
    std::vector<int> embed_idx = {2, 0, 2};
    Tensor kernel = random_tensor({2, 2, 2, 3}, aux, 0.7);
    Tensor weights = random_tensor({2, 6}, aux, 1.0);

    std::vector<Case> cases = {
        {"matmul", 12, [&](const Tensor& p) {
             return sum_all(mul(matmul(reshape(p, {2, 6}), right), random_tensor({2, 3}, aux)));
         }},
        {"add_broadcast", 12, [&](const Tensor& p) {
             return sum_all(mul(add(reshape(p, {2, 6}), bias), weights));
         }},
        {"mul", 12, [&](const Tensor& p) {
             return sum_all(mul(reshape(p, {2, 6}), other));
         }},
        {"min", 12, [&](const Tensor& p) {
             return sum_all(mul(minimum(reshape(p, {2, 6}), other), weights));
         }},
        {"sigmoid", 12, [&](const Tensor& p) {
             return sum_all(mul(sigmoid(reshape(p, {2, 6})), weights));
         }},
        {"tanh", 12, [&](const Tensor& p) {
             return sum_all(mul(tanh_(reshape(p, {2, 6})), weights));
         }},
        {"relu", 12, [&](const Tensor& p) {
             return sum_all(mul(relu(reshape(p, {2, 6})), weights));
         }},
        {"softmax", 12, [&](const Tensor& p) {
             return sum_all(mul(softmax(reshape(p, {2, 6})), weights));
         }},
        {"log_softmax", 12, [&](const Tensor& p) {
             return sum_all(mul(log_softmax(reshape(p, {2, 6})), weights));
         }},
        {"embedding", 12, [&](const Tensor& p) {
             return sum_all(mul(embedding(reshape(p, {4, 3}), embed_idx),
                                random_tensor({3, 3}, aux)));
         }},
        {"conv2d", 32, [&](const Tensor& p) {
             return sum_all(mul(conv2d(reshape(p, {4, 4, 2}), kernel, 1),
                                random_tensor({3, 3, 3}, aux)));
         }},
        {"conv2d_kernel", 24, [&](const Tensor& p) {
             return sum_all(mul(conv2d(random_tensor({4, 4, 2}, aux), reshape(p, {2, 2, 2, 3}), 2),
                                random_tensor({2, 2, 3}, aux)));
         }},
        {"pad2d", 12, [&](const Tensor& p) {
             return sum_all(mul(pad2d(reshape(p, {2, 2, 3}), 1),
                                random_tensor({4, 4, 3}, aux)));
         }},
        {"sum_axis", 12, [&](const Tensor& p) {
             return sum_all(mul(sum_axis(reshape(p, {2, 6}), 0), random_tensor({6}, aux)));
         }},
        {"mean_axis", 12, [&](const Tensor& p) {
             return sum_all(mul(mean_axis(reshape(p, {2, 6}), 1), random_tensor({2}, aux)));
         }},
        {"concat", 12, [&](const Tensor& p) {
             return sum_all(mul(concat(reshape(p, {2, 6}), other),
                                random_tensor({2, 12}, aux)));
         }},
        {"scale", 12, [&](const Tensor& p) {
             return sum_all(mul(scale(reshape(p, {2, 6}), -2.5), weights));
         }},
        {"pick_index", 12, [&](const Tensor& p) {
             return sum_all(pick_index(reshape(p, {2, 6}), picks));
         }},
        {"slice_last", 12, [&](const Tensor& p) {
             return sum_all(mul(slice_last(reshape(p, {2, 6}), 2, 3),
                                random_tensor({2, 3}, aux)));
         }},
    };

    for (auto& c : cases) {
        CAPTURE(c.name);
        int checked = 0;
        for (int trial = 0; trial < 100; ++trial) {
            Tensor point = random_tensor({c.n}, rng, 1.0);
            // keep relu/min inputs away from their kinks
            for (double& v : point.data()) {
                if (std::abs(v) < 0.05) v += v >= 0.0 ? 0.1 : -0.1;
            }
            // aux tensors inside lambdas must be deterministic per call pair,
            // so re-seed the aux stream before each evaluation of f
            Rng fresh(500 + trial);
            aux = fresh;
            auto wrapped = [&](const Tensor& p) {
                Rng again(500 + trial);
                aux = again;
                return c.f(p);
            };
            GradCheckReport report = gradient_check(wrapped, point, h, rtol);
            if (!report.comparable) continue;
            ++checked;
            CAPTURE(report.max_rel_err);
            CHECK(report.pass);
        }
        CHECK(checked >= 90);  // kink skips must stay rare
    }
}

TEST_CASE("gradient_check flags relu kinks as non-comparable") {
    Tensor point({2}, {0.0, 1.0});
    auto f = [](const Tensor& p) { return sum_all(relu(p)); };
    GradCheckReport report = gradient_check(f, point, 1e-5, 1e-4);
    CHECK_FALSE(report.comparable);
    CHECK(report.pass);  // non-comparable is not a failure
}

TEST_CASE("gradient_check on sum of squares is tight") {
    Tensor point({3}, {1.0, 2.0, 3.0});
    auto f = [](const Tensor& p) { return sum_all(mul(p, p)); };
    GradCheckReport report = gradient_check(f, point, 1e-5, 1e-4);
    CHECK(report.comparable);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("adam first step moves by about minus lr") {
    Tensor p({1}, {0.0}, true);
    Adam opt({{"p", p}}, 1e-3, 0.9, 0.999, 1e-8);
    p.grad()[0] = 1.0;
    opt.step();
    // bias-corrected mhat/sqrt(vhat) = 1 at t=1 up to eps
    CHECK(std::abs(p.data()[0] - (-1e-3)) < 1e-6);
    CHECK_FALSE(p.has_grad());  // grads zeroed
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    Tensor p({3}, {0.5, -0.25, 4.0}, true);
    Adam opt({{"p", p}}, 1e-3);
    p.grad();  // allocate zeros
    opt.step();
    CHECK(p.data() == std::vector<double>{0.5, -0.25, 4.0});
    CHECK(opt.t() == 1);
}

TEST_CASE("adam with constant gradient moves monotonically against its sign") {
    Tensor p({1}, {1.0}, true);
    Adam opt({{"p", p}}, 1e-3);
    double prev = p.data()[0];
    for (int i = 0; i < 2; ++i) {
        p.grad()[0] = 0.7;
        opt.step();
        CHECK(p.data()[0] < prev);
        prev = p.data()[0];
    }
}

TEST_CASE("adam fails on a missing gradient naming the parameter") {
    Tensor p({1}, {0.0}, true);
    Adam opt({{"theta", p}});
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("theta"), Error);
}

TEST_CASE("non-finite op output raises when checks are on") {
    set_finite_checks(true);
    Tensor x({1}, {1e308});
    CHECK_THROWS_AS(scale(x, 10.0), Error);  // overflows to inf
}

TEST_CASE("forward and backward are deterministic") {
    auto run = [] {
        Rng rng(42);
        Tensor x = random_tensor({4, 6}, rng, 1.0, true);
        Tensor w = random_tensor({6, 3}, rng, 1.0, true);
        Tape tape;
        Tensor loss = sum_all(tanh_(matmul(x, w)));
        tape.backward(loss);
        std::vector<double> out = loss.data();
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    CHECK(run() == run());  // bit-identical
}
