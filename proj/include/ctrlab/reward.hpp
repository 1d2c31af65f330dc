#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "ctrlab/autodiff.hpp"
#include "ctrlab/catalog.hpp"
#include "ctrlab/checkpoint.hpp"
#include "ctrlab/common.hpp"
#include "ctrlab/optim.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab::reward {

struct RewardConfig {
    int image_dim = 16;    // d_f, per image slot
    int context_dim = 16;  // prompt embedding dim
    int enc_dim = 16;      // d_v, per encoder output
    int hidden_dim = 32;   // d_h
};

struct RmLossConfig {
    double lambda1 = 1.0;  // weight on the comparison cross-entropy
    double lambda2 = 0.5;  // weight on the CTR regression branch

    void validate() const {
        if (lambda1 < 0.0 || lambda2 < 0.0) {
            throw ConfigError("rm loss weights must be non-negative");
        }
    }
};

/// Two-branch pairwise reward model: shared linear vision encoder per image
/// slot, linear text encoder, a two-layer tanh trunk standing in for the
/// backbone's final-token state, and separate classification / CTR heads.
/// Heads start at zero so an untrained model scores every pair 50/50.
struct RewardParams {
    RewardConfig cfg;
    Tensor w_vision, b_vision;  // [enc x image], [enc]
    Tensor w_text, b_text;      // [enc x context], [enc]
    Tensor w1, b1;              // [hidden x 3*enc], [hidden]
    Tensor w2, b2;              // [hidden x hidden], [hidden]
    Tensor w_cls, b_cls;        // [2 x hidden], [2]
    Tensor w_ctr, b_ctr;        // [2 x hidden], [2]

    static RewardParams init(const RewardConfig& cfg, std::uint64_t seed) {
        rng::Stream s(rng::derive(seed, "rm/init"));
        auto scaled = [&](std::vector<int> shape, int fan_in) {
            return Tensor::randn(std::move(shape), s, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        };
        RewardParams p;
        p.cfg = cfg;
        p.w_vision = scaled({cfg.enc_dim, cfg.image_dim}, cfg.image_dim);
        p.b_vision = Tensor({cfg.enc_dim});
        p.w_text = scaled({cfg.enc_dim, cfg.context_dim}, cfg.context_dim);
        p.b_text = Tensor({cfg.enc_dim});
        p.w1 = scaled({cfg.hidden_dim, 3 * cfg.enc_dim}, 3 * cfg.enc_dim);
        p.b1 = Tensor({cfg.hidden_dim});
        p.w2 = scaled({cfg.hidden_dim, cfg.hidden_dim}, cfg.hidden_dim);
        p.b2 = Tensor({cfg.hidden_dim});
        p.w_cls = Tensor({2, cfg.hidden_dim});
        p.b_cls = Tensor({2});
        p.w_ctr = Tensor({2, cfg.hidden_dim});
        p.b_ctr = Tensor({2});
        return p;
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        fn("w_vision", w_vision);
        fn("b_vision", b_vision);
        fn("w_text", w_text);
        fn("b_text", b_text);
        fn("w1", w1);
        fn("b1", b1);
        fn("w2", w2);
        fn("b2", b2);
        fn("w_cls", w_cls);
        fn("b_cls", b_cls);
        fn("w_ctr", w_ctr);
        fn("b_ctr", b_ctr);
    }

    template <typename Fn>
    void visit(Fn&& fn) const {
        fn("w_vision", w_vision);
        fn("b_vision", b_vision);
        fn("w_text", w_text);
        fn("b_text", b_text);
        fn("w1", w1);
        fn("b1", b1);
        fn("w2", w2);
        fn("b2", b2);
        fn("w_cls", w_cls);
        fn("b_cls", b_cls);
        fn("w_ctr", w_ctr);
        fn("b_ctr", b_ctr);
    }

    bool operator==(const RewardParams& o) const {
        return w_vision == o.w_vision && b_vision == o.b_vision && w_text == o.w_text &&
               b_text == o.b_text && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 && b2 == o.b2 &&
               w_cls == o.w_cls && b_cls == o.b_cls && w_ctr == o.w_ctr && b_ctr == o.b_ctr;
    }
};

struct RewardOutput {
    std::array<double, 2> p{};        // comparison distribution, sums to 1
    std::array<double, 2> ctr_hat{};  // regression estimates for both slots
};

/// One rendered pair plus conditioning, ready for the reward model.
struct PairExample {
    Tensor image_left;        // [image_dim]
    Tensor image_right;       // [image_dim]
    Tensor prompt_embedding;  // [context_dim]
    catalog::PairLabel label = catalog::PairLabel::left_higher;
    std::array<double, 2> true_ctrs{};
};

struct RewardVars {
    ad::Value w_vision, b_vision, w_text, b_text, w1, b1, w2, b2, w_cls, b_cls, w_ctr, b_ctr;

    static RewardVars leaves(ad::Tape& tape, const RewardParams& p) {
        return RewardVars{tape.leaf(p.w_vision), tape.leaf(p.b_vision), tape.leaf(p.w_text),
                          tape.leaf(p.b_text),  tape.leaf(p.w1),       tape.leaf(p.b1),
                          tape.leaf(p.w2),      tape.leaf(p.b2),       tape.leaf(p.w_cls),
                          tape.leaf(p.b_cls),   tape.leaf(p.w_ctr),    tape.leaf(p.b_ctr)};
    }

    std::vector<ad::Value> list() const {
        return {w_vision, b_vision, w_text, b_text, w1, b1, w2, b2, w_cls, b_cls, w_ctr, b_ctr};
    }
};

/// [vision(I1); vision(I2); text(prompt)] in that fixed order.
inline ad::Value build_rm_input(ad::Tape& tape, const RewardVars& vars, const Tensor& image_left,
                                const Tensor& image_right, const Tensor& prompt_embedding) {
    ad::Value v1 = ad::affine(vars.w_vision, tape.leaf(image_left), vars.b_vision);
    ad::Value v2 = ad::affine(vars.w_vision, tape.leaf(image_right), vars.b_vision);
    ad::Value tx = ad::affine(vars.w_text, tape.leaf(prompt_embedding), vars.b_text);
    return ad::concat({v1, v2, tx});
}

inline Tensor build_rm_input(const RewardParams& params, const Tensor& image_left,
                             const Tensor& image_right, const Tensor& prompt_embedding) {
    ad::Tape tape;
    RewardVars vars = RewardVars::leaves(tape, params);
    return build_rm_input(tape, vars, image_left, image_right, prompt_embedding).val();
}

/// Trunk to the discriminative state h.
inline ad::Value trunk(const RewardVars& vars, ad::Value rm_input) {
    ad::Value h1 = ad::tanh(ad::affine(vars.w1, rm_input, vars.b1));
    return ad::tanh(ad::affine(vars.w2, h1, vars.b2));
}

inline RewardOutput compare_pair(const RewardParams& params, const Tensor& image_left,
                                 const Tensor& image_right, const Tensor& prompt_embedding) {
    ad::Tape tape;
    RewardVars vars = RewardVars::leaves(tape, params);
    ad::Value h = trunk(vars, build_rm_input(tape, vars, image_left, image_right, prompt_embedding));
    ad::Value p = ad::softmax(ad::affine(vars.w_cls, h, vars.b_cls));
    ad::Value ctr = ad::affine(vars.w_ctr, h, vars.b_ctr);
    RewardOutput out;
    out.p = {p.val()[0], p.val()[1]};
    out.ctr_hat = {ctr.val()[0], ctr.val()[1]};
    return out;
}

/// Combined reward loss over a batch: cross-entropy summed over pairs plus
/// lambda-weighted mean squared CTR error (the two reductions intentionally
/// differ).
inline ad::Value rm_loss(ad::Tape& tape, const RewardVars& vars, std::span<const PairExample> batch,
                         const RmLossConfig& cfg) {
    cfg.validate();
    if (batch.empty()) {
        throw ConfigError("rm_loss: empty batch");
    }
    ad::Value ce = tape.leaf(Tensor::scalar(0.0));
    ad::Value point = tape.leaf(Tensor::scalar(0.0));
    for (const PairExample& ex : batch) {
        ad::Value h = trunk(vars, build_rm_input(tape, vars, ex.image_left, ex.image_right,
                                                 ex.prompt_embedding));
        int target = ex.label == catalog::PairLabel::left_higher ? 0 : 1;
        ad::Value logp = ad::log_softmax(ad::affine(vars.w_cls, h, vars.b_cls));
        ce = ad::sub(ce, ad::pick(logp, target));

        ad::Value ctr = ad::affine(vars.w_ctr, h, vars.b_ctr);
        ad::Value target_ctr = tape.leaf(Tensor({2}, {ex.true_ctrs[0], ex.true_ctrs[1]}));
        point = ad::add(point, ad::sumsq(ad::sub(ctr, target_ctr)));
    }
    point = ad::scale(point, 1.0 / static_cast<double>(batch.size()));
    return ad::add(ad::scale(ce, cfg.lambda1), ad::scale(point, cfg.lambda2));
}

inline double rm_loss(const RewardParams& params, std::span<const PairExample> batch,
                      const RmLossConfig& cfg) {
    ad::Tape tape;
    RewardVars vars = RewardVars::leaves(tape, params);
    return rm_loss(tape, vars, batch, cfg).val()[0];
}

/// Fraction of pairs whose argmax side matches the label; an exact tie in
/// the head counts as the left slot.
inline double pair_accuracy(const RewardParams& params, std::span<const PairExample> examples) {
    if (examples.empty()) {
        throw ConfigError("pair_accuracy: empty test set");
    }
    long correct = 0;
    for (const PairExample& ex : examples) {
        RewardOutput out = compare_pair(params, ex.image_left, ex.image_right, ex.prompt_embedding);
        int pred = out.p[1] > out.p[0] ? 1 : 0;
        int truth = ex.label == catalog::PairLabel::left_higher ? 0 : 1;
        correct += pred == truth ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct RmTrainConfig {
    int epochs = 20;
    double learning_rate = 0.02;
    int batch_size = 16;
    RmLossConfig loss;
    bool pretrain_encoder = false;
    int encoder_epochs = 10;
    double encoder_lr = 0.01;
};

struct RmEpochRow {
    int epoch = 0;
    double train_loss = 0.0;     // mean combined loss per pair
    double pair_accuracy = 0.0;  // held-out
};

struct RmTrainStats {
    std::vector<RmEpochRow> rows;
};

/// Reconstruction pre-training of the vision encoder, the toy stand-in for
/// initializing from domain-pretrained weights. Trains encoder plus a
/// throwaway decoder to reproduce image features.
inline void pretrain_encoder(RewardParams& params, std::span<const Tensor> images, int epochs,
                             double lr, std::uint64_t seed) {
    if (images.empty()) {
        throw ConfigError("pretrain_encoder: no images");
    }
    rng::Stream s(rng::derive(seed, "rm/encoder"));
    Tensor w_dec = Tensor::randn({params.cfg.image_dim, params.cfg.enc_dim}, s,
                                 1.0 / std::sqrt(static_cast<double>(params.cfg.enc_dim)));
    Tensor b_dec({params.cfg.image_dim});

    opt::OptimizerConfig ocfg;
    ocfg.learning_rate = lr;
    opt::Optimizer optimizer(ocfg);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (const Tensor& img : images) {
            ad::Tape tape;
            ad::Value wv = tape.leaf(params.w_vision);
            ad::Value bv = tape.leaf(params.b_vision);
            ad::Value wd = tape.leaf(w_dec);
            ad::Value bd = tape.leaf(b_dec);
            ad::Value code = ad::affine(wv, tape.leaf(img), bv);
            ad::Value recon = ad::affine(wd, code, bd);
            ad::Value loss = ad::sumsq(ad::sub(recon, tape.leaf(img)));
            tape.backward(loss);
            std::vector<Tensor*> tensors{&params.w_vision, &params.b_vision, &w_dec, &b_dec};
            std::vector<const Tensor*> grads{&wv.grad(), &bv.grad(), &wd.grad(), &bd.grad()};
            optimizer.step(tensors, grads);
        }
    }
}

/// Mini-batch gradient descent on the combined loss. Left/right placement is
/// re-randomized per pair per epoch to keep the classifier free of positional
/// bias.
inline RmTrainStats train_rm(RewardParams& params, std::span<const PairExample> train,
                             std::span<const PairExample> holdout, const RmTrainConfig& cfg,
                             std::uint64_t seed) {
    if (train.empty()) {
        throw ConfigError("train_rm: empty training set");
    }
    RmTrainStats stats;

    if (cfg.pretrain_encoder) {
        std::vector<Tensor> images;
        images.reserve(train.size());
        for (const PairExample& ex : train) {
            images.push_back(ex.image_left);
        }
        pretrain_encoder(params, images, cfg.encoder_epochs, cfg.encoder_lr, seed);
    }

    opt::OptimizerConfig ocfg;
    ocfg.learning_rate = cfg.learning_rate;
    opt::Optimizer optimizer(ocfg);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    rng::Stream shuffler(rng::derive(seed, "rm/order"));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffler.shuffle(order);
        rng::Stream flips(rng::derive(seed, "rm/flips", {static_cast<std::uint64_t>(epoch)}));
        std::vector<PairExample> epoch_set;
        epoch_set.reserve(train.size());
        for (std::size_t idx : order) {
            PairExample ex = train[idx];
            if (flips.uniform() < 0.5) {
                std::swap(ex.image_left, ex.image_right);
                std::swap(ex.true_ctrs[0], ex.true_ctrs[1]);
                ex.label = ex.label == catalog::PairLabel::left_higher ? catalog::PairLabel::right_higher
                                                                       : catalog::PairLabel::left_higher;
            }
            epoch_set.push_back(std::move(ex));
        }

        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < epoch_set.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(epoch_set.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::span<const PairExample> batch(epoch_set.data() + start, end - start);
            ad::Tape tape;
            RewardVars vars = RewardVars::leaves(tape, params);
            ad::Value loss = rm_loss(tape, vars, batch, cfg.loss);
            epoch_loss += loss.val()[0];
            tape.backward(loss);

            std::vector<Tensor*> tensors;
            params.visit([&](const char*, Tensor& t) { tensors.push_back(&t); });
            std::vector<const Tensor*> grads;
            for (const ad::Value& v : vars.list()) {
                grads.push_back(&v.grad());
            }
            optimizer.step(tensors, grads);
        }

        RmEpochRow row;
        row.epoch = epoch;
        row.train_loss = epoch_loss / static_cast<double>(train.size());
        row.pair_accuracy = holdout.empty() ? 0.0 : pair_accuracy(params, holdout);
        stats.rows.push_back(row);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Checkpointing.
// ---------------------------------------------------------------------------

inline Checkpoint to_checkpoint(const RewardParams& params) {
    Checkpoint ckpt;
    ckpt.model_kind = "reward";
    params.visit([&](const char* name, const Tensor& t) { ckpt.params.emplace_back(name, t); });
    return ckpt;
}

inline RewardParams from_checkpoint(const Checkpoint& ckpt, const RewardConfig& cfg) {
    if (ckpt.model_kind != "reward") {
        throw IoError("checkpoint model_kind '" + ckpt.model_kind + "', expected 'reward'");
    }
    RewardParams p;
    p.cfg = cfg;
    p.w_vision = ckpt.find("w_vision");
    p.b_vision = ckpt.find("b_vision");
    p.w_text = ckpt.find("w_text");
    p.b_text = ckpt.find("b_text");
    p.w1 = ckpt.find("w1");
    p.b1 = ckpt.find("b1");
    p.w2 = ckpt.find("w2");
    p.b2 = ckpt.find("b2");
    p.w_cls = ckpt.find("w_cls");
    p.b_cls = ckpt.find("b_cls");
    p.w_ctr = ckpt.find("w_ctr");
    p.b_ctr = ckpt.find("b_ctr");
    if (p.w_vision.rows() != cfg.enc_dim || p.w_vision.cols() != cfg.image_dim ||
        p.w1.cols() != 3 * cfg.enc_dim || p.w_cls.rows() != 2) {
        throw IoError("checkpoint shapes do not match reward config");
    }
    return p;
}

}  // namespace ctrlab::reward
