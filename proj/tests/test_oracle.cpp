#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ctrlab/oracle.hpp"

using namespace ctrlab;
using namespace ctrlab::oracle;
using catalog::PairLabel;
using catalog::Product;

namespace {

// World with an identity style matrix so kappa is directly controllable:
// ideal direction == image feature.
OracleParams identity_world(int dim, double gain, double base = 0.0) {
    OracleParams p;
    p.base_logodds = Tensor::full({8}, base);
    p.gain = gain;
    p.style = Tensor::identity(dim);
    p.annotator_threshold = 0.0;
    return p;
}

Product unit_product(int dim, int axis, int category = 0) {
    Product p;
    p.id = 0;
    p.category = category;
    p.title = {1, 2, 3};
    Tensor f({dim});
    f[static_cast<std::size_t>(axis)] = 1.0;
    p.image_feature = f;
    return p;
}

Tensor axis_vec(int dim, int axis, double v = 1.0) {
    Tensor t({dim});
    t[static_cast<std::size_t>(axis)] = v;
    return t;
}

}  // namespace

TEST_CASE("true_ctr closed forms") {
    auto world = identity_world(4, 2.0);
    Product p = unit_product(4, 0);

    // orthogonal background: kappa = 0, base = 0 -> 0.5
    CHECK(true_ctr(world, p, axis_vec(4, 1)) == Catch::Approx(0.5).margin(1e-15));

    // cosine is scale invariant
    Tensor bg({4}, {0.3, 0.4, -0.2, 0.1});
    Tensor bg3({4}, {0.9, 1.2, -0.6, 0.3});
    CHECK(true_ctr(world, p, bg) == Catch::Approx(true_ctr(world, p, bg3)).margin(1e-12));

    // b_cat = 1, w = 2, kappa = 0.5 -> sigmoid(2)
    auto world2 = identity_world(4, 2.0, 1.0);
    Tensor half({4}, {0.5, std::sqrt(0.75), 0.0, 0.0});  // cosine with e0 = 0.5
    long double expect = 1.0L / (1.0L + expl(-2.0L));
    CHECK(true_ctr(world2, p, half) == Catch::Approx(static_cast<double>(expect)).epsilon(1e-12));
    CHECK(true_ctr(world2, p, half) == Catch::Approx(0.8807970779778823).epsilon(1e-10));

    CHECK_THROWS_AS(true_ctr(world, p, Tensor({4})), DegenerateInputError);
}

TEST_CASE("true_ctr strictly increasing in kappa") {
    auto world = identity_world(2, 2.0, -1.0);
    Product p = unit_product(2, 0);
    double prev = -1.0;
    for (int i = 0; i <= 20; ++i) {
        double theta = 3.14159265358979 * (1.0 - static_cast<double>(i) / 20.0);
        Tensor bg({2}, {std::cos(theta), std::sin(theta)});
        double ctr = true_ctr(world, p, bg);
        CHECK(ctr > prev);
        prev = ctr;
    }
}

TEST_CASE("simulate_clicks") {
    auto world = identity_world(4, 2.0);
    Product p = unit_product(4, 0);
    Tensor orth = axis_vec(4, 1);  // true ctr 0.5

    SECTION("zero exposures give zero clicks") {
        auto o = simulate_clicks(world, p, orth, 0, 7);
        CHECK(o.clicks == 0);
        CHECK(o.exposures == 0);
    }

    SECTION("binomial concentration at p = 0.5") {
        auto o = simulate_clicks(world, p, orth, 100000, 7);
        double rate = static_cast<double>(o.clicks) / 100000.0;
        CHECK(std::abs(rate - 0.5) < 0.01);
        CHECK(o.true_ctr == Catch::Approx(0.5).margin(1e-15));
    }

    SECTION("same seed reproduces bit-for-bit") {
        auto a = simulate_clicks(world, p, orth, 5000, 123);
        auto b = simulate_clicks(world, p, orth, 5000, 123);
        CHECK(a.clicks == b.clicks);
        auto c = simulate_clicks(world, p, orth, 5000, 124);
        CHECK(a.clicks != c.clicks);  // astronomically unlikely to tie exactly
    }
}

TEST_CASE("annotate_match") {
    auto world = identity_world(4, 2.0);
    world.annotator_threshold = 0.3;
    Product p = unit_product(4, 0);

    CHECK(annotate_match(world, p, axis_vec(4, 0)));         // kappa = 1
    CHECK_FALSE(annotate_match(world, p, axis_vec(4, 0, -1.0)));  // kappa = -1

    // invariant to positive scaling of either side
    rng::Stream s(5);
    for (int i = 0; i < 50; ++i) {
        Tensor bg = Tensor::randn({4}, s);
        Tensor scaled = bg;
        double c = s.uniform(0.1, 10.0);
        for (std::size_t k = 0; k < scaled.size(); ++k) {
            scaled[k] *= c;
        }
        CHECK(annotate_match(world, p, bg) == annotate_match(world, p, scaled));
    }
}

TEST_CASE("pairwise_label") {
    auto world = identity_world(4, 2.0);
    Product p = unit_product(4, 0);

    SECTION("monotone in kappa") {
        Tensor hi({4}, {0.9, std::sqrt(1 - 0.81), 0, 0});
        Tensor lo({4}, {0.1, std::sqrt(1 - 0.01), 0, 0});
        CHECK(pairwise_label(world, p, hi, lo) == PairLabel::left_higher);
        CHECK(pairwise_label(world, p, lo, hi) == PairLabel::right_higher);
    }

    SECTION("category base shift never flips a same-product label") {
        rng::Stream s(17);
        for (int trial = 0; trial < 100; ++trial) {
            Tensor bg1 = Tensor::randn({4}, s);
            Tensor bg2 = Tensor::randn({4}, s);
            if (compatibility(world, p, bg1) == compatibility(world, p, bg2)) {
                continue;
            }
            auto base_label = pairwise_label(world, p, bg1, bg2);
            for (double delta : {-2.0, -0.5, 0.5, 2.0}) {
                auto shifted = world;
                shifted.base_logodds[0] += delta;
                CHECK(pairwise_label(shifted, p, bg1, bg2) == base_label);
            }
        }
    }

    SECTION("label equals brute-force CTR comparison") {
        rng::Stream s(29);
        for (int trial = 0; trial < 200; ++trial) {
            Tensor bg1 = Tensor::randn({4}, s);
            Tensor bg2 = Tensor::randn({4}, s);
            double c1 = true_ctr(world, p, bg1);
            double c2 = true_ctr(world, p, bg2);
            if (c1 == c2) {
                continue;
            }
            auto expect = c1 > c2 ? PairLabel::left_higher : PairLabel::right_higher;
            CHECK(pairwise_label(world, p, bg1, bg2) == expect);
        }
    }

    SECTION("exact tie raises") {
        Tensor bg = axis_vec(4, 1);
        CHECK_THROWS_AS(pairwise_label(world, p, bg, bg), TieError);
    }
}

TEST_CASE("make_oracle is deterministic and validated") {
    auto a = make_oracle(42, 8, 16, 16);
    auto b = make_oracle(42, 8, 16, 16);
    CHECK(a.base_logodds == b.base_logodds);
    CHECK(a.style == b.style);
    CHECK(a.gain == 2.0);
    CHECK_THROWS_AS(make_oracle(42, 8, 16, 16, -1.0), ConfigError);
}

TEST_CASE("calibrate_threshold hits the target quantile") {
    std::vector<double> kappas;
    for (int i = 0; i < 1000; ++i) {
        kappas.push_back(static_cast<double>(i) / 1000.0);
    }
    double tau = calibrate_threshold(kappas, 0.85);
    int matched = 0;
    for (double k : kappas) {
        matched += k >= tau ? 1 : 0;
    }
    double rate = static_cast<double>(matched) / 1000.0;
    CHECK(rate >= 0.84);
    CHECK(rate <= 0.86);

    CHECK_THROWS_AS(calibrate_threshold({}, 0.85), ConfigError);
    CHECK_THROWS_AS(calibrate_threshold(kappas, 1.5), ConfigError);
}
