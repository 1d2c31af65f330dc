#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ctrlab/autodiff.hpp"
#include "ctrlab/optim.hpp"
#include "ctrlab/tensor.hpp"

using namespace ctrlab;
namespace ad = ctrlab::ad;

namespace {

Tensor rand_tensor(std::vector<int> shape, rng::Stream& s, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = s.uniform(lo, hi);
    }
    return t;
}

}  // namespace

TEST_CASE("matmul basics") {
    ad::Tape tape;
    auto id2 = tape.leaf(Tensor::identity(2));
    auto m = tape.leaf(Tensor({2, 2}, {3, 4, 5, 6}));
    CHECK(ad::matmul(id2, m).val() == m.val());

    auto a = tape.leaf(Tensor({1, 2}, {1, 2}));
    auto b = tape.leaf(Tensor({2, 1}, {3, 4}));
    CHECK(ad::matmul(a, b).val() == Tensor({1, 1}, {11}));

    auto bad = tape.leaf(Tensor({3, 2}));
    CHECK_THROWS_AS(ad::matmul(a, bad), DimError);
}

TEST_CASE("matmul gradient equals ones x b^T") {
    rng::Stream s(7);
    Tensor av = rand_tensor({4, 5}, s);
    Tensor bv = rand_tensor({5, 3}, s);

    ad::Tape tape;
    auto a = tape.leaf(av);
    auto b = tape.leaf(bv);
    auto out = ad::sum(ad::matmul(a, b));
    tape.backward(out);

    // d sum(AB) / dA = ones(4x3) B^T
    Tensor expected({4, 5});
    for (int i = 0; i < 4; ++i) {
        for (int k = 0; k < 5; ++k) {
            double v = 0.0;
            for (int j = 0; j < 3; ++j) {
                v += bv.at(k, j);
            }
            expected.at(i, k) = v;
        }
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(a.grad()[i] == Catch::Approx(expected[i]).epsilon(1e-12));
    }

    // and against finite differences
    auto f = [&](ad::Tape&, std::span<const ad::Value> leaves) {
        return ad::sum(ad::matmul(leaves[0], leaves[1]));
    };
    auto report = opt::grad_check(f, {av, bv}, 1e-6, 1e-4);
    CHECK(report.pass);
}

TEST_CASE("softmax contract") {
    ad::Tape tape;
    auto sym = ad::softmax(tape.leaf(Tensor({2}, {0.0, 0.0})));
    CHECK(sym.val()[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(sym.val()[1] == Catch::Approx(0.5).margin(1e-15));

    auto big = ad::softmax(tape.leaf(Tensor({2}, {1000.0, 1000.0})));
    CHECK(big.val()[0] == Catch::Approx(0.5).margin(1e-15));

    // independent high-precision exp-normalize
    auto v = ad::softmax(tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}))).val();
    long double z = expl(1.0L) + expl(2.0L) + expl(3.0L);
    CHECK(v[0] == Catch::Approx(static_cast<double>(expl(1.0L) / z)).epsilon(1e-14));
    CHECK(v[1] == Catch::Approx(static_cast<double>(expl(2.0L) / z)).epsilon(1e-14));
    CHECK(v[2] == Catch::Approx(static_cast<double>(expl(3.0L) / z)).epsilon(1e-14));

    CHECK_THROWS_AS(ad::softmax(tape.leaf(Tensor({2, 2}))), DimError);
}

TEST_CASE("softmax sums to one and is shift invariant") {
    rng::Stream s(11);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor logits = rand_tensor({5}, s, -30.0, 30.0);
        ad::Tape tape;
        auto p = ad::softmax(tape.leaf(logits)).val();
        double sum = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            sum += p[i];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);

        Tensor shifted = logits;
        double c = s.uniform(-50.0, 50.0);
        for (std::size_t i = 0; i < shifted.size(); ++i) {
            shifted[i] += c;
        }
        auto q = ad::softmax(tape.leaf(shifted)).val();
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(std::abs(p[i] - q[i]) <= 1e-9);
        }
    }
}

TEST_CASE("scalar sigmoid") {
    CHECK(sigmoid(0.0) == 0.5);
    rng::Stream s(3);
    for (int i = 0; i < 100; ++i) {
        double x = s.uniform(-30.0, 30.0);
        CHECK(sigmoid(x) + sigmoid(-x) == Catch::Approx(1.0).margin(1e-15));
        CHECK(sigmoid(x) > 0.0);
        CHECK(sigmoid(x) < 1.0);
    }
    // saturation at the extremes rounds to the boundary without error
    CHECK(sigmoid(1000.0) == 1.0);
    CHECK(sigmoid(-1000.0) == 0.0);
    long double expect = 1.0L / (1.0L + expl(-10.0L));
    CHECK(sigmoid(10.0) == Catch::Approx(static_cast<double>(expect)).epsilon(1e-15));
    CHECK(sigmoid(10.0) == Catch::Approx(0.9999546021312976).epsilon(1e-12));
}

TEST_CASE("grad_check on x squared") {
    auto f = [](ad::Tape&, std::span<const ad::Value> leaves) { return ad::sumsq(leaves[0]); };
    auto report = opt::grad_check(f, {Tensor::scalar(3.0)}, 1e-6, 1e-4);
    CHECK(report.pass);

    // analytic derivative is exactly 6
    ad::Tape tape;
    auto x = tape.leaf(Tensor::scalar(3.0));
    auto y = ad::sumsq(x);
    tape.backward(y);
    CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("grad_check rejects non-finite forward values") {
    auto f = [](ad::Tape&, std::span<const ad::Value> leaves) { return ad::log(leaves[0]); };
    CHECK_THROWS_AS(opt::grad_check(f, {Tensor::scalar(-1.0)}, 1e-6, 1e-4), NonFiniteError);
}

TEST_CASE("value reused twice accumulates both paths") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor::scalar(3.0));
    auto y = ad::mul(x, x);  // x^2; both parents are the same node
    tape.backward(y);
    CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("forward and backward are deterministic") {
    rng::Stream s(5);
    Tensor a = rand_tensor({3, 3}, s);
    Tensor b = rand_tensor({3}, s);
    auto run = [&]() {
        ad::Tape tape;
        auto av = tape.leaf(a);
        auto bv = tape.leaf(b);
        auto out = ad::sum(ad::tanh(ad::matvec(av, bv)));
        tape.backward(out);
        return std::pair{out.val(), av.grad()};
    };
    auto [v1, g1] = run();
    auto [v2, g2] = run();
    CHECK(v1 == v2);
    CHECK(g1 == g2);
}

// Reverse-mode gradients match central finite differences on randomized
// inputs, 100 trials per op.
TEST_CASE("per-op gradient property") {
    constexpr double kStep = 1e-6;
    constexpr double kTol = 1e-4;
    constexpr int kTrials = 100;

    auto check_all = [&](const char* name, const opt::TapeFn& f, auto make_params) {
        rng::Stream s(rng::fnv1a(name));
        for (int trial = 0; trial < kTrials; ++trial) {
            std::vector<Tensor> params = make_params(s);
            auto report = opt::grad_check(f, params, kStep, kTol);
            INFO(name << " trial " << trial << " max_rel_err " << report.max_rel_err);
            REQUIRE(report.pass);
        }
    };

    auto vec2 = [](rng::Stream& s) {
        return std::vector<Tensor>{rand_tensor({4}, s), rand_tensor({4}, s)};
    };
    auto vec1 = [](rng::Stream& s) { return std::vector<Tensor>{rand_tensor({4}, s)}; };

    check_all("add", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(ad::add(l[0], l[1])); }, vec2);
    check_all("sub", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sumsq(ad::sub(l[0], l[1])); }, vec2);
    check_all("mul", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(ad::mul(l[0], l[1])); }, vec2);
    check_all("dot", [](ad::Tape&, std::span<const ad::Value> l) { return ad::dot(l[0], l[1]); }, vec2);
    check_all("scale", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(ad::scale(l[0], -1.7)); }, vec1);
    check_all("tanh", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(ad::tanh(l[0])); }, vec1);
    check_all("sigmoid", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(ad::sigmoid(l[0])); }, vec1);
    check_all("softplus", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(ad::softplus(l[0])); }, vec1);
    check_all("exp", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(ad::exp(l[0])); }, vec1);
    check_all("log", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(ad::log(l[0])); },
              [](rng::Stream& s) { return std::vector<Tensor>{rand_tensor({4}, s, 0.5, 3.0)}; });
    check_all("sum", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sum(l[0]); }, vec1);
    check_all("mean", [](ad::Tape&, std::span<const ad::Value> l) { return ad::mean(l[0]); }, vec1);
    check_all("sumsq", [](ad::Tape&, std::span<const ad::Value> l) { return ad::sumsq(l[0]); }, vec1);
    check_all("matmul",
              [](ad::Tape&, std::span<const ad::Value> l) { return ad::sumsq(ad::matmul(l[0], l[1])); },
              [](rng::Stream& s) {
                  return std::vector<Tensor>{rand_tensor({3, 4}, s), rand_tensor({4, 2}, s)};
              });
    check_all("matvec",
              [](ad::Tape&, std::span<const ad::Value> l) { return ad::sumsq(ad::matvec(l[0], l[1])); },
              [](rng::Stream& s) {
                  return std::vector<Tensor>{rand_tensor({3, 4}, s), rand_tensor({4}, s)};
              });
    check_all("softmax",
              [](ad::Tape&, std::span<const ad::Value> l) { return ad::sumsq(ad::softmax(l[0])); }, vec1);
    check_all("log_softmax",
              [](ad::Tape&, std::span<const ad::Value> l) { return ad::sumsq(ad::log_softmax(l[0])); }, vec1);
    check_all("pick", [](ad::Tape&, std::span<const ad::Value> l) { return ad::pick(ad::tanh(l[0]), 2); }, vec1);
    check_all("row",
              [](ad::Tape&, std::span<const ad::Value> l) { return ad::sumsq(ad::row(l[0], 1)); },
              [](rng::Stream& s) { return std::vector<Tensor>{rand_tensor({3, 4}, s)}; });
    check_all("concat",
              [](ad::Tape&, std::span<const ad::Value> l) {
                  return ad::sumsq(ad::concat({l[0], l[1]}));
              },
              vec2);
}

TEST_CASE("log_softmax matches log of softmax") {
    rng::Stream s(17);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits = rand_tensor({6}, s, -10.0, 10.0);
        ad::Tape tape;
        auto ls = ad::log_softmax(tape.leaf(logits)).val();
        auto p = ad::softmax(tape.leaf(logits)).val();
        for (std::size_t i = 0; i < ls.size(); ++i) {
            CHECK(ls[i] == Catch::Approx(std::log(p[i])).margin(1e-12));
        }
    }
}
