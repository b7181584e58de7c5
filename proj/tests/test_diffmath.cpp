#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "panoptiq/rng.hpp"
#include "panoptiq/tape.hpp"

using namespace panoptiq;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -2.0,
                     double hi = 2.0) {
    Tensor t({r, c});
    for (double& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

// Keeps every coordinate at least `margin` away from zero, for kinked ops.
Tensor random_matrix_off_zero(Rng& rng, std::size_t r, std::size_t c, double margin) {
    Tensor t = random_matrix(rng, r, c);
    for (double& v : t.v)
        if (std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
    return t;
}

}  // namespace

TEST_CASE("elementwise add: y = x + x") {
    Tape tape;
    Var x = tape.input(Tensor::row({1.0, 2.0}));
    Var y = tape.add(x, x);
    CHECK(tape.val(y).v == std::vector<double>{2.0, 4.0});
}

TEST_CASE("row softmax of a constant row is uniform") {
    Tape tape;
    Var x = tape.input(Tensor::matrix({{0.0, 0.0}}));
    Var y = tape.row_softmax(x);
    CHECK(tape.val(y).v[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(tape.val(y).v[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("matmul matches hand product") {
    Tape tape;
    Var a = tape.input(Tensor::matrix({{1.0, 2.0}, {3.0, 4.0}}));
    Var b = tape.input(Tensor::matrix({{5.0}, {6.0}}));
    Var y = tape.matmul(a, b);
    CHECK(tape.val(y).v == std::vector<double>{17.0, 39.0});
}

TEST_CASE("shape mismatch is rejected with the op named") {
    Tape tape;
    Var a = tape.input(Tensor::zeros(2, 3));
    Var b = tape.input(Tensor::zeros(3, 2));
    CHECK_THROWS_WITH_AS(tape.add(a, b),
                         doctest::Contains("add: shape mismatch"),
                         std::invalid_argument);
    Var c = tape.input(Tensor::zeros(2, 2));
    CHECK_THROWS_WITH_AS(tape.matmul(a, c), doctest::Contains("matmul"),
                         std::invalid_argument);
}

TEST_CASE("log of non-positive value is rejected") {
    Tape tape;
    Var x = tape.input(Tensor::row({1.0, 0.0}));
    CHECK_THROWS_AS(tape.log(x), std::invalid_argument);
}

TEST_CASE("backward: sum adjoint is all ones") {
    Tape tape;
    Var x = tape.input(Tensor::matrix({{1.0, -2.0, 3.0}, {0.5, 0.0, -7.0}}));
    Var y = tape.sum_all(x);
    tape.backward(y);
    for (double g : tape.grad(x).v) CHECK(g == 1.0);
}

TEST_CASE("backward: d sum(x*x)/dx = 2x") {
    Tape tape;
    Var x = tape.input(Tensor::row({3.0}));
    Var y = tape.sum_all(tape.mul(x, x));
    tape.backward(y);
    CHECK(tape.grad(x).v[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward: sum of row-softmax has zero gradient") {
    Tape tape;
    Rng rng(11);
    Var x = tape.input(random_matrix(rng, 3, 5));
    Var y = tape.sum_all(tape.row_softmax(x));
    tape.backward(y);
    for (double g : tape.grad(x).v) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("backward rejects non-scalar output") {
    Tape tape;
    Var x = tape.input(Tensor::zeros(2, 2));
    Var y = tape.add(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("unused inputs receive zero gradient") {
    Tape tape;
    Var x = tape.input(Tensor::row({1.0, 2.0}));
    Var unused = tape.input(Tensor::zeros(4, 4));
    Var y = tape.sum_all(x);
    tape.backward(y);
    CHECK(tape.grad(unused).same_shape(tape.val(unused)));
    for (double g : tape.grad(unused).v) CHECK(g == 0.0);
}

TEST_CASE("grad_check: sum is exact") {
    auto graph = [](Tape& t, const std::vector<Var>& in) { return t.sum_all(in[0]); };
    Rng rng(5);
    // dyadic coordinates and step keep the central difference of a linear
    // map exact in floating point
    Tensor point = random_matrix(rng, 3, 4);
    for (double& v : point.v) v = std::round(v * 64.0) / 64.0;
    auto report = grad_check(graph, {point}, 0.5);
    CHECK(report.max_rel_err < 1e-12);
}

TEST_CASE("grad_check: sum(sigmoid(W*x)) under 1e-6") {
    auto graph = [](Tape& t, const std::vector<Var>& in) {
        return t.sum_all(t.sigmoid(t.matmul(in[0], in[1])));
    };
    Rng rng(7);
    auto report =
        grad_check(graph, {random_matrix(rng, 3, 3), random_matrix(rng, 3, 3)}, 1e-5);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("grad_check: dice-style ratio under 1e-5") {
    // 1 - (2*sum(p.*t) + eps) / (sum(p) + sum(t) + eps)
    auto graph = [](Tape& t, const std::vector<Var>& in) {
        Var p = t.sigmoid(in[0]);
        Var tgt = t.sigmoid(in[1]);
        Var inter = t.affine(t.sum_all(t.mul(p, tgt)), 2.0, 1.0);
        Var denom = t.affine(t.add(t.sum_all(p), t.sum_all(tgt)), 1.0, 1.0);
        return t.affine(t.div(inter, denom), -1.0, 1.0);
    };
    Rng rng(13);
    auto report =
        grad_check(graph, {random_matrix(rng, 2, 6), random_matrix(rng, 2, 6)}, 1e-5);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("every primitive passes grad_check at 100 random points") {
    Rng rng(101);
    double worst = 0.0;
    auto run = [&](const GraphFn& g, const std::vector<Tensor>& point) {
        const auto rep = grad_check(g, point, 1e-5);
        worst = std::max(worst, rep.max_rel_err);
        return rep.max_rel_err;
    };

    for (int trial = 0; trial < 100; ++trial) {
        Tensor a = random_matrix(rng, 3, 4);
        Tensor b = random_matrix(rng, 3, 4);
        Tensor sq = random_matrix(rng, 4, 4);
        Tensor rv = random_matrix(rng, 1, 4);
        Tensor pos = random_matrix(rng, 3, 4, 0.2, 3.0);
        Tensor offz = random_matrix_off_zero(rng, 3, 4, 1e-3);
        Tensor mask({3, 4});
        for (double& m : mask.v) m = rng.bernoulli(0.5) ? 1.0 : 0.0;
        std::vector<std::size_t> rows_idx = {2, 0, 2};
        std::vector<std::size_t> cols_idx = {1, 3, 0};

        auto scalarize = [](Tape& t, Var x) { return t.sum_all(t.mul(x, x)); };

        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.add(in[0], in[1]));
              }, {a, b}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.sub(in[0], in[1]));
              }, {a, b}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.mul(in[0], in[1]));
              }, {a, b}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.div(in[0], in[1]));
              }, {a, random_matrix_off_zero(rng, 3, 4, 0.5)}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.affine(in[0], -1.7, 0.3));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.relu(in[0]));
              }, {offz}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.sigmoid(in[0]));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.log(in[0]));
              }, {pos}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.exp(in[0]));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.powc(in[0], 2.5));
              }, {pos}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.clamp(in[0], -0.7, 0.9));
              }, {random_matrix_off_zero(rng, 3, 4, 1e-3)}) < 2e-4);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.add_rowvec(in[0], in[1]));
              }, {a, rv}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.mul_rowvec(in[0], in[1]));
              }, {a, rv}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.matmul(in[0], in[1]));
              }, {a, random_matrix(rng, 4, 2)}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.transpose(in[0]));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.concat_rows(in[0], in[1]));
              }, {a, b}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.concat_cols(in[0], in[1]));
              }, {a, b}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.slice_cols(in[0], 1, 2));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.gather_rows(in[0], rows_idx));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.gather_col_per_row(in[0], cols_idx));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.where(mask, in[0], in[1]));
              }, {a, b}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.row_softmax(in[0]));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.layer_norm(in[0]));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.linear(in[0], in[1], in[2]));
              }, {a, sq, rv}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return t.mean_all(in[0]);
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.sum_axis(in[0], 0));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.sum_axis(in[0], 1));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.mean_axis(in[0], 0));
              }, {a}) < 1e-6);
        CHECK(run([&](Tape& t, const std::vector<Var>& in) {
                  return scalarize(t, t.mean_axis(in[0], 1));
              }, {a}) < 1e-6);
    }
    INFO("worst relative error ", worst);
}

TEST_CASE("row softmax rows are in (0,1) and sum to 1") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        Tape tape;
        Var x = tape.input(random_matrix(rng, 4, 7, -30.0, 30.0));
        const Tensor& s = tape.val(tape.row_softmax(x));
        for (std::size_t i = 0; i < s.rows(); ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < s.cols(); ++j) {
                CHECK(s.at(i, j) > 0.0);
                CHECK(s.at(i, j) < 1.0);
                sum += s.at(i, j);
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("layer norm rows have zero mean and unit variance") {
    Rng rng(29);
    for (int trial = 0; trial < 50; ++trial) {
        Tape tape;
        // row variance well above the 1e-5 epsilon so the output variance
        // lands within 1e-6 of 1
        Var x = tape.input(random_matrix(rng, 3, 16, -40.0, 40.0));
        const Tensor& y = tape.val(tape.layer_norm(x));
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) mean += y.at(i, j);
            mean /= static_cast<double>(y.cols());
            CHECK(std::abs(mean) < 1e-9);
            double var = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) {
                const double d = y.at(i, j) - mean;
                var += d * d;
            }
            var /= static_cast<double>(y.cols());
            CHECK(std::abs(var - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("tape replay reproduces values bit-for-bit") {
    Rng rng(31);
    Tape tape;
    Var a = tape.input(random_matrix(rng, 4, 4));
    Var b = tape.input(random_matrix(rng, 4, 4));
    Var y = tape.row_softmax(tape.matmul(tape.layer_norm(a), tape.sigmoid(b)));
    const std::vector<double> before = tape.val(y).v;
    tape.replay();
    CHECK(tape.val(y).v == before);
}

TEST_CASE("two evaluations with identical inputs are bit-identical") {
    Rng rng(37);
    const Tensor a = random_matrix(rng, 5, 3);
    const Tensor b = random_matrix(rng, 3, 5);
    auto eval = [&]() {
        Tape t;
        Var x = t.input(a);
        Var w = t.input(b);
        return t.val(t.sum_all(t.row_softmax(t.matmul(x, w)))).v[0];
    };
    const double first = eval();
    const double second = eval();
    CHECK(first == second);
}
