#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <limits>

#include "sidemoe/autodiff.hpp"
#include "sidemoe/rng.hpp"
#include "sidemoe/tensor.hpp"

using namespace sidemoe;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Check one tape input against central differences of a scalar objective
// rebuilt from scratch at perturbed values. The objective path is the tape
// itself; the oracle path never touches tape gradients.
double tape_fd_error(const std::function<double(std::span<const double>)>& rebuild,
                     std::span<const double> params, std::span<const double> analytic,
                     double h = 1e-6) {
    return finite_difference_check(rebuild, params, analytic, h);
}

} // namespace

TEST_CASE("matmul matches hand arithmetic") {
    const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const Tensor m = Tensor::matrix(2, 2, {3, -1, 2, 5});
    CHECK(matmul(eye, m).data == m.data);

    const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    const Tensor ones = Tensor::matrix(2, 1, {1, 1});
    const Tensor c = matmul(a, ones);
    CHECK(c.data == std::vector<double>{3, 7});

    const Tensor zero = Tensor::zeros({2, 2});
    CHECK(matmul(zero, m).data == std::vector<double>(4, 0.0));
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({2, 2});
    CHECK_THROWS_MATCHES(matmul(a, b), DimensionError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("[2x3]") &&
                             Catch::Matchers::ContainsSubstring("[2x2]")));
}

TEST_CASE("matmul is bit-deterministic for identical inputs") {
    Rng rng(7);
    const Tensor a = Tensor::random_normal({5, 9}, rng);
    const Tensor b = Tensor::random_normal({9, 4}, rng);
    const Tensor c1 = matmul(a, b);
    const Tensor c2 = matmul(a, b);
    REQUIRE(c1.size() == c2.size());
    CHECK(std::memcmp(c1.data.data(), c2.data.data(), c1.size() * sizeof(double)) == 0);
}

TEST_CASE("layer_norm basics") {
    const Tensor gamma = Tensor::vector_of({1, 1});
    const Tensor beta = Tensor::vector_of({0, 0});

    const Tensor constant = Tensor::matrix(1, 2, {4, 4});
    const Tensor z = layer_norm(constant, gamma, beta, 1e-5);
    CHECK(z.data[0] == Catch::Approx(0.0).margin(1e-12));
    CHECK(z.data[1] == Catch::Approx(0.0).margin(1e-12));

    // var([1,3]) = 1, so with a vanishing eps the output is exactly [-1, 1]
    const Tensor row = Tensor::matrix(1, 2, {1, 3});
    const Tensor n = layer_norm(row, gamma, beta, 1e-300);
    CHECK(n.data[0] == -1.0);
    CHECK(n.data[1] == 1.0);

    const Tensor gamma0 = Tensor::vector_of({0, 0});
    const Tensor beta2 = Tensor::vector_of({5, -2});
    const Tensor only_beta = layer_norm(row, gamma0, beta2, 1e-5);
    CHECK(only_beta.data == std::vector<double>{5, -2});

    CHECK_THROWS_AS(layer_norm(row, gamma, beta, 0.0), ConfigError);
    CHECK_THROWS_AS(layer_norm(row, Tensor::vector_of({1}), beta, 1e-5), DimensionError);
}

TEST_CASE("softmax basics") {
    const Tensor even = softmax_rows(Tensor::vector_of({0, 0}));
    CHECK(even.data[0] == Catch::Approx(0.5).margin(1e-15));

    const Tensor two = softmax_rows(Tensor::vector_of({2, 1}));
    CHECK(two.data[0] == Catch::Approx(0.7311).margin(1e-4));
    CHECK(two.data[1] == Catch::Approx(0.2689).margin(1e-4));

    const Tensor masked = softmax_rows(Tensor::vector_of({5, -kInf}));
    CHECK(masked.data[0] == 1.0);
    CHECK(masked.data[1] == 0.0);

    CHECK_THROWS_AS(softmax_rows(Tensor::vector_of({-kInf, -kInf})), NumericError);
}

TEST_CASE("softmax can normalize along either axis of a matrix") {
    const Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4});
    const Tensor rows = softmax(x, 1);
    CHECK(rows.at(0, 0) + rows.at(0, 1) == Catch::Approx(1.0).margin(1e-12));
    const Tensor cols = softmax(x, 0);
    CHECK(cols.at(0, 0) + cols.at(1, 0) == Catch::Approx(1.0).margin(1e-12));
    // column 0 holds logits {1, 3}
    CHECK(cols.at(1, 0) == Catch::Approx(std::exp(2.0) / (1.0 + std::exp(2.0))).margin(1e-12));
    CHECK_THROWS_AS(softmax(x, 2), ConfigError);
}

TEST_CASE("softmax rows sum to one and shift-invariance holds") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = Tensor::random_normal({1, 8}, rng, 0.0, 3.0);
        const Tensor y = softmax_rows(x);
        double sum = 0.0;
        for (const double v : y.data) {
            CHECK(v > 0.0);
            sum += v;
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-12));

        const double shift = rng.uniform(-5.0, 5.0);
        Tensor xs = x;
        for (double& v : xs.data) v += shift;
        const Tensor ys = softmax_rows(xs);
        for (std::size_t i = 0; i < y.size(); ++i)
            CHECK(ys.data[i] == Catch::Approx(y.data[i]).margin(1e-12));
    }
}

TEST_CASE("cross entropy examples") {
    const int classes = 5;
    const Tensor uniform = Tensor::zeros({1, static_cast<std::size_t>(classes)});
    const int label0[] = {0};
    CHECK(cross_entropy(uniform, label0) == Catch::Approx(std::log(5.0)).margin(1e-12));

    const Tensor confident = Tensor::matrix(1, 2, {10, -10});
    CHECK(cross_entropy(confident, label0) == Catch::Approx(0.0).margin(1e-8));

    const Tensor three = Tensor::matrix(1, 3, {1, 2, 3});
    const int label2[] = {2};
    CHECK(cross_entropy(three, label2) == Catch::Approx(0.4076).margin(1e-3));

    const int bad[] = {3};
    CHECK_THROWS_AS(cross_entropy(three, bad), IndexError);
}

TEST_CASE("finite_difference_check on closed-form cases") {
    const double w[] = {3.0};
    const double analytic[] = {6.0};
    const auto square = [](std::span<const double> p) { return p[0] * p[0]; };
    CHECK(finite_difference_check(square, w, analytic, 1e-5) < 1e-6);

    const double zero[] = {0.0};
    const auto constant = [](std::span<const double>) { return 2.5; };
    CHECK(finite_difference_check(constant, w, zero, 1e-5) == 0.0);

    const auto bad = [](std::span<const double>) {
        return std::numeric_limits<double>::quiet_NaN();
    };
    CHECK_THROWS_AS(finite_difference_check(bad, w, analytic, 1e-5), NumericError);
}

namespace {

// Generic oracle harness: builds loss = sum(coeff * op(inputs)) on a fresh
// tape, then compares tape gradients of every input against central
// differences computed by rebuilding the whole forward.
struct OpCheck {
    std::vector<Tensor> inputs;
    std::function<Var(GradTape&, const std::vector<Var>&)> apply;

    double worst_error() {
        GradTape tape;
        std::vector<Var> vars;
        for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
        const Var out = apply(tape, vars);
        Rng rng(99);
        std::vector<double> coeff(tape.value(out).size());
        for (double& c : coeff) c = rng.uniform(-1.0, 1.0);
        const Var loss = tape.weighted_sum(out, coeff);
        tape.backward(loss);

        double worst = 0.0;
        for (std::size_t which = 0; which < inputs.size(); ++which) {
            const auto rebuild = [&](std::span<const double> p) {
                std::vector<Tensor> local = inputs;
                std::copy(p.begin(), p.end(), local[which].data.begin());
                GradTape t2;
                std::vector<Var> vs;
                for (const Tensor& t : local) vs.push_back(t2.leaf(t));
                const Var out2 = apply(t2, vs);
                double acc = 0.0;
                for (std::size_t i = 0; i < coeff.size(); ++i)
                    acc += coeff[i] * t2.value(out2).data[i];
                return acc;
            };
            worst = std::max(worst, finite_difference_check(rebuild, inputs[which].data,
                                                            tape.grad(vars[which]).data, 1e-6));
        }
        return worst;
    }
};

} // namespace

TEST_CASE("tape primitives match central finite differences") {
    Rng rng(1234);

    SECTION("matmul") {
        OpCheck chk{{Tensor::random_normal({3, 4}, rng), Tensor::random_normal({4, 2}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("add and scale") {
        OpCheck chk{{Tensor::random_normal({2, 3}, rng), Tensor::random_normal({2, 3}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) {
                        return t.scale(t.add(v[0], v[1]), -1.7);
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("bias broadcast") {
        OpCheck chk{{Tensor::random_normal({3, 4}, rng), Tensor::random_normal({4}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) {
                        return t.add_row_broadcast(v[0], v[1]);
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("gelu") {
        OpCheck chk{{Tensor::random_normal({2, 5}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) { return t.gelu(v[0]); }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("layer_norm") {
        OpCheck chk{{Tensor::random_normal({3, 6}, rng), Tensor::random_normal({6}, rng),
                     Tensor::random_normal({6}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) {
                        return t.layer_norm(v[0], v[1], v[2], 1e-5);
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("softmax") {
        OpCheck chk{{Tensor::random_normal({3, 5}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) { return t.softmax_rows(v[0]); }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("gather and scatter") {
        OpCheck chk{{Tensor::random_normal({4, 3}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) {
                        const Var g = t.gather_rows(v[0], {2, 0, 2});
                        return t.scatter_add_rows(g, {1, 3, 1}, 5);
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("per-row column gather with renormalization") {
        OpCheck chk{{Tensor::matrix(2, 4, {0.2, 0.4, 0.3, 0.1, 0.25, 0.25, 0.4, 0.1})},
                    [](GradTape& t, const std::vector<Var>& v) {
                        const Var g = t.gather_cols_per_row(v[0], {{1, 2}, {2, 0}});
                        return t.div_by_row_sum(g);
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("scale_rows and gather_elems") {
        OpCheck chk{{Tensor::random_normal({3, 4}, rng), Tensor::random_normal({3}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) {
                        const Var s = t.scale_rows(v[0], v[1]);
                        return t.gather_elems(s, {0, 5, 11, 7});
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("mean_rows and repeat_row") {
        OpCheck chk{{Tensor::random_normal({1, 4}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) {
                        return t.mean_rows(t.repeat_row(v[0], 5));
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("cross_entropy") {
        OpCheck chk{{Tensor::random_normal({4, 3}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) {
                        return t.cross_entropy(v[0], {0, 2, 1, 2});
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
    SECTION("transpose") {
        OpCheck chk{{Tensor::random_normal({3, 4}, rng), Tensor::random_normal({3, 2}, rng)},
                    [](GradTape& t, const std::vector<Var>& v) {
                        return t.matmul(t.transpose(v[0]), v[1]);
                    }};
        CHECK(chk.worst_error() < 1e-4);
    }
}

TEST_CASE("gradients accumulate across shared nodes") {
    // loss = sum(2x + 3x) -> dloss/dx = 5 for every element
    GradTape tape;
    const Var x = tape.leaf(Tensor::vector_of({1.5, -2.0, 0.25}));
    const Var s = tape.add(tape.scale(x, 2.0), tape.scale(x, 3.0));
    const Var loss = tape.weighted_sum(s, {1, 1, 1});
    tape.backward(loss);
    for (const double g : tape.grad(x).data) CHECK(g == Catch::Approx(5.0).margin(1e-14));
}
