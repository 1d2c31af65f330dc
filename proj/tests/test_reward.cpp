#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ctrlab/reward.hpp"

using namespace ctrlab;
using namespace ctrlab::reward;
using catalog::PairLabel;

namespace {

PairExample random_example(rng::Stream& s, const RewardConfig& cfg) {
    PairExample ex;
    ex.image_left = Tensor::randn({cfg.image_dim}, s);
    ex.image_right = Tensor::randn({cfg.image_dim}, s);
    ex.prompt_embedding = Tensor::randn({cfg.context_dim}, s);
    ex.label = s.uniform() < 0.5 ? PairLabel::left_higher : PairLabel::right_higher;
    ex.true_ctrs = {s.uniform(0.0, 0.5), s.uniform(0.0, 0.5)};
    return ex;
}

// Linearly separable synthetic task: the first image component carries the
// CTR directly.
PairExample separable_example(rng::Stream& s, const RewardConfig& cfg) {
    PairExample ex;
    ex.image_left = Tensor::randn({cfg.image_dim}, s);
    ex.image_right = Tensor::randn({cfg.image_dim}, s);
    ex.prompt_embedding = Tensor::randn({cfg.context_dim}, s);
    double cl = sigmoid(ex.image_left[0]);
    double cr = sigmoid(ex.image_right[0]);
    ex.true_ctrs = {cl, cr};
    ex.label = cl > cr ? PairLabel::left_higher : PairLabel::right_higher;
    return ex;
}

}  // namespace

TEST_CASE("build_rm_input structure") {
    RewardConfig cfg;
    auto params = RewardParams::init(cfg, 1);

    SECTION("zero inputs with zero biases give the zero vector") {
        auto zp = params;
        zp.b_vision = Tensor({cfg.enc_dim});
        zp.b_text = Tensor({cfg.enc_dim});
        Tensor u = build_rm_input(zp, Tensor({cfg.image_dim}), Tensor({cfg.image_dim}),
                                  Tensor({cfg.context_dim}));
        for (std::size_t i = 0; i < u.size(); ++i) {
            CHECK(u[i] == 0.0);
        }
    }

    SECTION("swapping images permutes the first two blocks only") {
        rng::Stream s(2);
        Tensor i1 = Tensor::randn({cfg.image_dim}, s);
        Tensor i2 = Tensor::randn({cfg.image_dim}, s);
        Tensor c = Tensor::randn({cfg.context_dim}, s);
        Tensor a = build_rm_input(params, i1, i2, c);
        Tensor b = build_rm_input(params, i2, i1, c);
        int d = cfg.enc_dim;
        for (int i = 0; i < d; ++i) {
            CHECK(a[static_cast<std::size_t>(i)] == b[static_cast<std::size_t>(d + i)]);
            CHECK(a[static_cast<std::size_t>(d + i)] == b[static_cast<std::size_t>(i)]);
            CHECK(a[static_cast<std::size_t>(2 * d + i)] == b[static_cast<std::size_t>(2 * d + i)]);
        }
    }

    SECTION("randomized independent re-evaluation") {
        rng::Stream s(3);
        for (int trial = 0; trial < 50; ++trial) {
            Tensor i1 = Tensor::randn({cfg.image_dim}, s);
            Tensor i2 = Tensor::randn({cfg.image_dim}, s);
            Tensor c = Tensor::randn({cfg.context_dim}, s);
            Tensor u = build_rm_input(params, i1, i2, c);
            for (int r = 0; r < cfg.enc_dim; ++r) {
                double v1 = params.b_vision[static_cast<std::size_t>(r)];
                double v2 = v1;
                double tx = params.b_text[static_cast<std::size_t>(r)];
                for (int j = 0; j < cfg.image_dim; ++j) {
                    v1 += params.w_vision.at(r, j) * i1[static_cast<std::size_t>(j)];
                    v2 += params.w_vision.at(r, j) * i2[static_cast<std::size_t>(j)];
                }
                for (int j = 0; j < cfg.context_dim; ++j) {
                    tx += params.w_text.at(r, j) * c[static_cast<std::size_t>(j)];
                }
                CHECK(u[static_cast<std::size_t>(r)] == Catch::Approx(v1).margin(1e-13));
                CHECK(u[static_cast<std::size_t>(cfg.enc_dim + r)] == Catch::Approx(v2).margin(1e-13));
                CHECK(u[static_cast<std::size_t>(2 * cfg.enc_dim + r)] == Catch::Approx(tx).margin(1e-13));
            }
        }
    }
}

TEST_CASE("compare_pair contract") {
    RewardConfig cfg;
    auto params = RewardParams::init(cfg, 5);
    rng::Stream s(6);

    SECTION("zero-initialized heads give the uniform distribution") {
        auto out = compare_pair(params, Tensor::randn({cfg.image_dim}, s),
                                Tensor::randn({cfg.image_dim}, s), Tensor::randn({cfg.context_dim}, s));
        CHECK(out.p[0] == 0.5);
        CHECK(out.p[1] == 0.5);
        CHECK(out.ctr_hat[0] == 0.0);
        CHECK(out.ctr_hat[1] == 0.0);
    }

    SECTION("p is a distribution for 1000 random inputs") {
        // give the heads real weight first
        auto trained = params;
        trained.w_cls = Tensor::randn({2, cfg.hidden_dim}, s);
        trained.b_cls = Tensor::randn({2}, s);
        for (int trial = 0; trial < 1000; ++trial) {
            auto out = compare_pair(trained, Tensor::randn({cfg.image_dim}, s),
                                    Tensor::randn({cfg.image_dim}, s),
                                    Tensor::randn({cfg.context_dim}, s));
            CHECK(std::abs(out.p[0] + out.p[1] - 1.0) <= 1e-12);
            CHECK(out.p[0] > 0.0);
            CHECK(out.p[1] > 0.0);
        }
    }

    SECTION("matches layer-by-layer re-evaluation") {
        auto trained = params;
        trained.w_cls = Tensor::randn({2, cfg.hidden_dim}, s);
        trained.w_ctr = Tensor::randn({2, cfg.hidden_dim}, s);
        Tensor i1 = Tensor::randn({cfg.image_dim}, s);
        Tensor i2 = Tensor::randn({cfg.image_dim}, s);
        Tensor c = Tensor::randn({cfg.context_dim}, s);

        Tensor u = build_rm_input(trained, i1, i2, c);
        std::vector<double> h1(static_cast<std::size_t>(cfg.hidden_dim));
        for (int i = 0; i < cfg.hidden_dim; ++i) {
            double v = trained.b1[static_cast<std::size_t>(i)];
            for (int j = 0; j < 3 * cfg.enc_dim; ++j) {
                v += trained.w1.at(i, j) * u[static_cast<std::size_t>(j)];
            }
            h1[static_cast<std::size_t>(i)] = std::tanh(v);
        }
        std::vector<double> h(static_cast<std::size_t>(cfg.hidden_dim));
        for (int i = 0; i < cfg.hidden_dim; ++i) {
            double v = trained.b2[static_cast<std::size_t>(i)];
            for (int j = 0; j < cfg.hidden_dim; ++j) {
                v += trained.w2.at(i, j) * h1[static_cast<std::size_t>(j)];
            }
            h[static_cast<std::size_t>(i)] = std::tanh(v);
        }
        double z0 = trained.b_cls[0], z1 = trained.b_cls[1];
        double r0 = trained.b_ctr[0], r1 = trained.b_ctr[1];
        for (int j = 0; j < cfg.hidden_dim; ++j) {
            z0 += trained.w_cls.at(0, j) * h[static_cast<std::size_t>(j)];
            z1 += trained.w_cls.at(1, j) * h[static_cast<std::size_t>(j)];
            r0 += trained.w_ctr.at(0, j) * h[static_cast<std::size_t>(j)];
            r1 += trained.w_ctr.at(1, j) * h[static_cast<std::size_t>(j)];
        }
        double mx = std::max(z0, z1);
        double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);

        auto out = compare_pair(trained, i1, i2, c);
        CHECK(out.p[0] == Catch::Approx(e0 / (e0 + e1)).margin(1e-12));
        CHECK(out.p[1] == Catch::Approx(e1 / (e0 + e1)).margin(1e-12));
        CHECK(out.ctr_hat[0] == Catch::Approx(r0).margin(1e-12));
        CHECK(out.ctr_hat[1] == Catch::Approx(r1).margin(1e-12));
    }
}

TEST_CASE("rm_loss closed forms") {
    RewardConfig cfg;
    auto params = RewardParams::init(cfg, 7);  // heads zero -> p uniform, ctr zero
    rng::Stream s(8);
    PairExample ex = random_example(s, cfg);

    SECTION("uniform head cross-entropy is ln 2") {
        RmLossConfig lcfg;
        lcfg.lambda1 = 1.0;
        lcfg.lambda2 = 0.0;
        double loss = rm_loss(params, std::span<const PairExample>(&ex, 1), lcfg);
        CHECK(std::abs(loss - std::log(2.0)) <= 1e-12);
    }

    SECTION("exact regression and confident correct head zero the loss terms") {
        PairExample exact = ex;
        exact.true_ctrs = {0.0, 0.0};  // ctr head outputs zero
        RmLossConfig lcfg;
        lcfg.lambda1 = 0.0;
        lcfg.lambda2 = 0.5;
        CHECK(rm_loss(params, std::span<const PairExample>(&exact, 1), lcfg) == 0.0);
    }

    SECTION("pointwise arithmetic") {
        PairExample off = ex;
        off.true_ctrs = {-0.1, 0.0};  // ctr head is zero, so residual is [0.1, 0]
        RmLossConfig lcfg;
        lcfg.lambda1 = 0.0;
        lcfg.lambda2 = 0.5;
        double loss = rm_loss(params, std::span<const PairExample>(&off, 1), lcfg);
        CHECK(loss == Catch::Approx(0.005).margin(1e-15));
    }

    SECTION("empty batch rejected") {
        RmLossConfig lcfg;
        CHECK_THROWS_AS(rm_loss(params, std::span<const PairExample>(), lcfg), ConfigError);
        RmLossConfig bad;
        bad.lambda1 = -1.0;
        CHECK_THROWS_AS(rm_loss(params, std::span<const PairExample>(&ex, 1), bad), ConfigError);
    }
}

TEST_CASE("rm_loss gradient matches finite differences with both branches toggled") {
    RewardConfig cfg;
    cfg.image_dim = 5;
    cfg.context_dim = 4;
    cfg.enc_dim = 4;
    cfg.hidden_dim = 6;
    rng::Stream s(9);

    for (auto [l1, l2] : std::vector<std::pair<double, double>>{{1.0, 0.5}, {1.0, 0.0}, {0.0, 0.5}}) {
        for (std::uint64_t trial = 0; trial < 5; ++trial) {
            auto params = RewardParams::init(cfg, 100 + trial);
            // non-zero heads so both branches carry gradient
            params.w_cls = Tensor::randn({2, cfg.hidden_dim}, s, 0.3);
            params.w_ctr = Tensor::randn({2, cfg.hidden_dim}, s, 0.3);
            std::vector<PairExample> batch{random_example(s, cfg), random_example(s, cfg),
                                           random_example(s, cfg)};
            RmLossConfig lcfg;
            lcfg.lambda1 = l1;
            lcfg.lambda2 = l2;

            std::vector<Tensor> tensors;
            params.visit([&](const char*, Tensor& t) { tensors.push_back(t); });
            auto f = [&](ad::Tape& tape, std::span<const ad::Value> leaves) {
                RewardVars vars{leaves[0], leaves[1], leaves[2], leaves[3], leaves[4],  leaves[5],
                                leaves[6], leaves[7], leaves[8], leaves[9], leaves[10], leaves[11]};
                return rm_loss(tape, vars, batch, lcfg);
            };
            auto report = opt::grad_check(f, tensors, 1e-6, 1e-4);
            INFO("l1=" << l1 << " l2=" << l2 << " trial " << trial << " err " << report.max_rel_err);
            REQUIRE(report.pass);
        }
    }
}

TEST_CASE("pair_accuracy contract") {
    RewardConfig cfg;

    SECTION("arithmetic on a hand-built predictor") {
        // heads zero -> always predicts left; craft labels for 3/4 accuracy
        auto params = RewardParams::init(cfg, 11);
        rng::Stream s(12);
        std::vector<PairExample> examples;
        for (int i = 0; i < 4; ++i) {
            PairExample ex = random_example(s, cfg);
            ex.label = i < 3 ? PairLabel::left_higher : PairLabel::right_higher;
            examples.push_back(ex);
        }
        CHECK(pair_accuracy(params, examples) == 0.75);
        examples.resize(3);
        CHECK(pair_accuracy(params, examples) == 1.0);
        CHECK_THROWS_AS(pair_accuracy(params, std::span<const PairExample>()), ConfigError);
    }

    SECTION("uninformative predictor sits near one half on balanced pairs") {
        auto params = RewardParams::init(cfg, 13);
        rng::Stream s(14);
        params.w_cls = Tensor::randn({2, cfg.hidden_dim}, s);  // random but label-independent
        std::vector<PairExample> examples;
        for (int i = 0; i < 10000; ++i) {
            examples.push_back(random_example(s, cfg));
        }
        double acc = pair_accuracy(params, examples);
        CHECK(std::abs(acc - 0.5) <= 3.0 * 0.005);
    }

    SECTION("equals a brute-force shadow computation") {
        auto params = RewardParams::init(cfg, 15);
        rng::Stream s(16);
        params.w_cls = Tensor::randn({2, cfg.hidden_dim}, s);
        std::vector<PairExample> examples;
        for (int i = 0; i < 200; ++i) {
            examples.push_back(random_example(s, cfg));
        }
        long correct = 0;
        for (const auto& ex : examples) {
            auto out = compare_pair(params, ex.image_left, ex.image_right, ex.prompt_embedding);
            int pred = out.p[1] > out.p[0] ? 1 : 0;
            int truth = ex.label == PairLabel::left_higher ? 0 : 1;
            correct += pred == truth;
        }
        CHECK(pair_accuracy(params, examples) ==
              static_cast<double>(correct) / static_cast<double>(examples.size()));
    }
}

TEST_CASE("train_rm with zero learning rate leaves params unchanged") {
    RewardConfig cfg;
    auto params = RewardParams::init(cfg, 17);
    auto saved = params;
    rng::Stream s(18);
    std::vector<PairExample> train;
    for (int i = 0; i < 32; ++i) {
        train.push_back(random_example(s, cfg));
    }
    RmTrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.learning_rate = 0.0;
    train_rm(params, train, {}, tcfg, 19);
    CHECK(params == saved);
}

TEST_CASE("train_rm learns a separable world") {
    RewardConfig cfg;
    auto params = RewardParams::init(cfg, 21);
    rng::Stream s(22);
    std::vector<PairExample> train, holdout;
    for (int i = 0; i < 600; ++i) {
        train.push_back(separable_example(s, cfg));
    }
    for (int i = 0; i < 200; ++i) {
        holdout.push_back(separable_example(s, cfg));
    }
    RmTrainConfig tcfg;
    tcfg.epochs = 15;
    tcfg.learning_rate = 0.02;
    auto stats = train_rm(params, train, holdout, tcfg, 23);
    REQUIRE(static_cast<int>(stats.rows.size()) == tcfg.epochs);
    double final_acc = stats.rows.back().pair_accuracy;
    INFO("held-out accuracy " << final_acc);
    CHECK(final_acc > 0.9);
    CHECK(stats.rows.back().train_loss < stats.rows.front().train_loss);
}

TEST_CASE("reward checkpoint round-trip") {
    RewardConfig cfg;
    auto params = RewardParams::init(cfg, 25);
    auto ckpt = to_checkpoint(params);
    CHECK(ckpt.model_kind == "reward");
    auto back = from_checkpoint(ckpt, cfg);
    CHECK(back == params);

    RewardConfig other = cfg;
    other.enc_dim = 4;
    CHECK_THROWS_AS(from_checkpoint(ckpt, other), IoError);
}
