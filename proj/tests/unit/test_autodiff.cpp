#include <doctest.h>

#include <cmath>
#include <functional>

#include "advvae/autodiff.hpp"
#include "advvae/error.hpp"
#include "oracles.hpp"

using namespace advvae;

namespace {

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::matrix(r, c);
    for (auto& v : t.values()) v = lo + (hi - lo) * rng.uniform();
    return t;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

double forward_value(const Builder& build, const std::vector<Tensor>& inputs, const Tensor& weights) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    Var out = build(tape, vars);
    if (out.value().rank() == 0) return out.value().item();
    return ops::sum(ops::mul(out, tape.constant(weights))).value().item();
}

// Checks d(loss)/d(input i) for every input against central differences. Non-scalar
// outputs are contracted with fixed random weights so every entry gets its own upstream gradient.
double check_gradients(const Builder& build, std::vector<Tensor> inputs, std::uint64_t seed = 99) {
    Tensor weights;
    {
        Tape probe;
        std::vector<Var> vars;
        for (const auto& t : inputs) vars.push_back(probe.constant(t));
        const Tensor& shape_of = build(probe, vars).value();
        Rng rng(seed);
        weights = Tensor(shape_of.shape());
        for (auto& v : weights.values()) v = rng.uniform() * 2.0 - 1.0;
    }
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.parameter(t));
    Var out = build(tape, vars);
    Var loss = out.value().rank() == 0 ? out : ops::sum(ops::mul(out, tape.constant(weights)));
    tape.backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor numeric = oracle::numeric_gradient(
            inputs[i],
            [&](const Tensor& x) {
                auto in = inputs;
                in[i] = x;
                return forward_value(build, in, weights);
            },
            kStep);
        worst = std::max(worst, oracle::max_relative_error(vars[i].grad(), numeric));
    }
    return worst;
}

}  // namespace

TEST_CASE("gradient of sum(matmul(A, B)) w.r.t. A matches finite differences") {
    Rng rng(1);
    const double err = check_gradients([](Tape&, const std::vector<Var>& v) { return ops::sum(ops::matmul(v[0], v[1])); },
                                       {random_matrix(3, 4, rng), random_matrix(4, 2, rng)});
    CHECK(err <= kTol);
}

TEST_CASE("every primitive passes the finite-difference check") {
    Rng rng(2);
    const Tensor a = random_matrix(3, 4, rng);
    const Tensor b = random_matrix(3, 4, rng);
    const Tensor row = random_matrix(1, 4, rng);
    const Tensor positive = random_matrix(3, 4, rng, 0.5, 2.0);
    // Keep relu inputs away from the kink.
    Tensor off_kink = random_matrix(3, 4, rng);
    for (auto& v : off_kink.values()) v = v >= 0 ? v + 0.05 : v - 0.05;

    struct Case {
        const char* name;
        Builder build;
        std::vector<Tensor> inputs;
    };
    const std::vector<Case> cases{
        {"matmul", [](Tape&, auto& v) { return ops::matmul(v[0], v[1]); }, {a, random_matrix(4, 5, rng)}},
        {"add", [](Tape&, auto& v) { return ops::add(v[0], v[1]); }, {a, b}},
        {"add_row", [](Tape&, auto& v) { return ops::add_row(v[0], v[1]); }, {a, row}},
        {"mul", [](Tape&, auto& v) { return ops::mul(v[0], v[1]); }, {a, b}},
        {"scale", [](Tape&, auto& v) { return ops::scale(v[0], -2.5); }, {a}},
        {"add_scalar", [](Tape&, auto& v) { return ops::add_scalar(v[0], 0.7); }, {a}},
        {"tanh", [](Tape&, auto& v) { return ops::tanh(v[0]); }, {a}},
        {"exp", [](Tape&, auto& v) { return ops::exp(v[0]); }, {a}},
        {"log", [](Tape&, auto& v) { return ops::log(v[0]); }, {positive}},
        {"relu", [](Tape&, auto& v) { return ops::relu(v[0]); }, {off_kink}},
        {"square", [](Tape&, auto& v) { return ops::square(v[0]); }, {a}},
        {"dropout",
         [](Tape&, auto& v) {
             Rng mask_rng(5);  // same mask on every evaluation
             return ops::dropout(v[0], 0.3, true, mask_rng);
         },
         {a}},
        {"l2_normalize_rows", [](Tape&, auto& v) { return ops::l2_normalize_rows(v[0]); }, {a}},
        {"softmax_rows", [](Tape&, auto& v) { return ops::softmax_rows(v[0]); }, {a}},
        {"log_softmax_rows", [](Tape&, auto& v) { return ops::log_softmax_rows(v[0]); }, {a}},
        {"sum", [](Tape&, auto& v) { return ops::sum(ops::square(v[0])); }, {a}},
        {"mean", [](Tape&, auto& v) { return ops::mean(ops::square(v[0])); }, {a}},
        {"slice_cols", [](Tape&, auto& v) { return ops::slice_cols(v[0], 1, 2); }, {a}},
        {"grl", [](Tape&, auto& v) { return ops::grl(v[0], {1.7}); }, {a}},
        {"gaussian_sample",
         [](Tape&, auto& v) {
             Rng noise(6);
             return ops::gaussian_sample(v[0], v[1], noise);
         },
         {a, b}},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        if (std::string(c.name) == "grl") {
            // Reversal makes the analytic gradient the negated, scaled numeric one.
            Tape tape;
            Var x = tape.parameter(c.inputs[0]);
            tape.backward(ops::sum(ops::grl(x, {1.7})));
            for (double g : x.grad().values()) CHECK(g == doctest::Approx(-1.7));
            continue;
        }
        CHECK(check_gradients(c.build, c.inputs) <= kTol);
    }
}

TEST_CASE("a node feeding two consumers sums both adjoints") {
    Rng rng(3);
    const double err = check_gradients(
        [](Tape&, const std::vector<Var>& v) {
            Var t = ops::tanh(v[0]);
            return ops::add(ops::mul(t, t), ops::exp(t));
        },
        {random_matrix(2, 3, rng)});
    CHECK(err <= kTol);
}

TEST_CASE("grl: identity forward, -lambda backward, inert at lambda 0") {
    Rng rng(4);
    const Tensor x0 = random_matrix(2, 3, rng);
    const Tensor up = random_matrix(2, 3, rng);
    for (double lambda : {0.0, 0.5, 1.0, 3.0}) {
        Tape tape;
        Var x = tape.parameter(x0);
        Var y = ops::grl(x, {lambda});
        CHECK(y.value() == x0);
        tape.backward(ops::sum(ops::mul(y, tape.constant(up))));
        for (std::size_t i = 0; i < up.numel(); ++i) {
            CHECK(x.grad()[i] == -lambda * up[i]);
        }
    }
}

TEST_CASE("backward rejects non-scalar losses and foreign handles") {
    Tape tape;
    Var x = tape.parameter(Tensor::matrix(2, 2, 1.0));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
    Tape other;
    Var y = other.parameter(Tensor::scalar(1.0));
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("domain and dimension errors") {
    Tape tape;
    CHECK_THROWS_AS(ops::log(tape.constant(Tensor::row({1.0, 0.0}))), DomainError);
    CHECK_THROWS_AS(ops::add(tape.constant(Tensor::matrix(2, 2)), tape.constant(Tensor::matrix(2, 3))), DimensionError);
    CHECK_THROWS_AS(ops::matmul(tape.constant(Tensor::matrix(2, 2)), tape.constant(Tensor::matrix(3, 2))), DimensionError);
    Rng rng(1);
    CHECK_THROWS_AS(ops::dropout(tape.constant(Tensor::matrix(2, 2)), 1.0, true, rng), DomainError);
}

TEST_CASE("parameter gradients accumulate until zero_grad") {
    Tape tape;
    Var w = tape.parameter(Tensor::row({1.0, 2.0}));
    Var loss = ops::sum(ops::square(w));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(w.grad()[0] == 4.0);
    CHECK(w.grad()[1] == 8.0);
    tape.zero_grad();
    CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("dropout: zeroes with probability p, rescales survivors, identity at inference") {
    Tape tape;
    const double p = 0.3;
    Var x = tape.constant(Tensor::matrix(200, 200, 1.0));
    Rng rng(8);
    const Tensor& y = ops::dropout(x, p, true, rng).value();
    std::size_t zeros = 0;
    for (double v : y.values()) {
        if (v == 0.0) {
            ++zeros;
        } else {
            CHECK(v == doctest::Approx(1.0 / (1.0 - p)));
        }
    }
    CHECK(static_cast<double>(zeros) / y.numel() == doctest::Approx(p).epsilon(0.05));
    Var same = ops::dropout(x, p, false, rng);
    CHECK(same.id() == x.id());
}

TEST_CASE("l2_normalize_rows maps zero rows to zero") {
    Tape tape;
    const Tensor& y = ops::l2_normalize_rows(tape.constant(Tensor::matrix({{3, 4}, {0, 0}}))).value();
    CHECK(y.at(0, 0) == doctest::Approx(0.6));
    CHECK(y.at(0, 1) == doctest::Approx(0.8));
    CHECK(y.at(1, 0) == 0.0);
    CHECK(y.at(1, 1) == 0.0);
}

TEST_CASE("gaussian sampling: sigma 0 gives mu, fixed seed repeats, moments match N(0, 1)") {
    Tape tape;
    Var mu = tape.constant(Tensor::row({0.25, -1.0}));
    Var lv = tape.constant(Tensor::row({0.3, 0.1}));
    // Copies: node references do not survive further pushes onto the tape.
    const Tensor z0 = ops::gaussian_sample(mu, lv, Tensor::row({0.0, 0.0})).value();
    CHECK(z0 == mu.value());

    Rng r1(11), r2(11);
    const Tensor first = ops::gaussian_sample(mu, lv, r1).value();
    const Tensor second = ops::gaussian_sample(mu, lv, r2).value();
    CHECK(first == second);

    const std::size_t n = 100000;
    Var zero_mu = tape.constant(Tensor::matrix(n, 1, 0.0));
    Var zero_lv = tape.constant(Tensor::matrix(n, 1, 0.0));
    Rng rng(12);
    const Tensor& z = ops::gaussian_sample(zero_mu, zero_lv, rng).value();
    double m = 0.0, v = 0.0;
    for (double x : z.values()) m += x;
    m /= n;
    for (double x : z.values()) v += (x - m) * (x - m);
    v /= n - 1;
    CHECK(std::abs(m) <= 0.02);
    CHECK(std::abs(v - 1.0) <= 0.05);
}
