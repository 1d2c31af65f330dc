#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctrlab/autodiff.hpp"
#include "ctrlab/catalog.hpp"
#include "ctrlab/checkpoint.hpp"
#include "ctrlab/common.hpp"
#include "ctrlab/optim.hpp"
#include "ctrlab/oracle.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab::policy {

struct PolicyConfig {
    int vocab = 64;        // V
    int embed_dim = 16;    // d_e
    int hidden_dim = 32;   // d_h
    int context_dim = 32;  // image_dim + prompt context_dim
    int length = 8;        // L, fixed; no end-of-sequence token
};

/// Fixed-length background description. Its environment-facing embedding
/// comes from the fixed shared token table, never from trainable weights, so
/// the oracle's notion of a description stays stable while the policy learns.
struct Description {
    std::vector<int> tokens;

    bool operator==(const Description& o) const { return tokens == o.tokens; }
};

inline Tensor description_embedding(const Description& d, const catalog::EmbeddingTable& table) {
    return table.embed_mean(d.tokens);
}

/// Conditioning vector for the generator: product image features concatenated
/// with the instruct-prompt embedding.
struct PolicyContext {
    Tensor features;  // [context_dim]
};

inline PolicyContext make_policy_context(const Tensor& image_feature,
                                         const catalog::InstructPrompt& prompt) {
    int n = image_feature.dim() + prompt.context_embedding.dim();
    Tensor f({n});
    std::size_t off = 0;
    for (std::size_t i = 0; i < image_feature.size(); ++i) {
        f[off++] = image_feature[i];
    }
    for (std::size_t i = 0; i < prompt.context_embedding.size(); ++i) {
        f[off++] = prompt.context_embedding[i];
    }
    return PolicyContext{std::move(f)};
}

/// Single-layer recurrent generator over token sequences:
///   h_t = tanh(W_c c + W_e emb(y_{t-1}) + W_h h_{t-1} + b_h)
///   logits_t = W_o h_t + b_o
/// The first step uses a zero previous-token embedding.
struct PolicyParams {
    PolicyConfig cfg;
    Tensor token_embedding;  // [V x d_e]
    Tensor w_context;        // [d_h x context_dim]
    Tensor w_input;          // [d_h x d_e]
    Tensor w_hidden;         // [d_h x d_h]
    Tensor b_hidden;         // [d_h]
    Tensor w_out;            // [V x d_h]
    Tensor b_out;            // [V]

    static PolicyParams init(const PolicyConfig& cfg, std::uint64_t seed) {
        rng::Stream s(rng::derive(seed, "policy/init"));
        PolicyParams p;
        p.cfg = cfg;
        auto scaled = [&](std::vector<int> shape, int fan_in) {
            return Tensor::randn(std::move(shape), s, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        };
        p.token_embedding = scaled({cfg.vocab, cfg.embed_dim}, cfg.embed_dim);
        p.w_context = scaled({cfg.hidden_dim, cfg.context_dim}, cfg.context_dim);
        p.w_input = scaled({cfg.hidden_dim, cfg.embed_dim}, cfg.embed_dim);
        p.w_hidden = scaled({cfg.hidden_dim, cfg.hidden_dim}, cfg.hidden_dim);
        p.b_hidden = Tensor({cfg.hidden_dim});
        p.w_out = scaled({cfg.vocab, cfg.hidden_dim}, cfg.hidden_dim);
        p.b_out = Tensor({cfg.vocab});
        return p;
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        fn("token_embedding", token_embedding);
        fn("w_context", w_context);
        fn("w_input", w_input);
        fn("w_hidden", w_hidden);
        fn("b_hidden", b_hidden);
        fn("w_out", w_out);
        fn("b_out", b_out);
    }

    template <typename Fn>
    void visit(Fn&& fn) const {
        fn("token_embedding", token_embedding);
        fn("w_context", w_context);
        fn("w_input", w_input);
        fn("w_hidden", w_hidden);
        fn("b_hidden", b_hidden);
        fn("w_out", w_out);
        fn("b_out", b_out);
    }

    bool operator==(const PolicyParams& o) const {
        return token_embedding == o.token_embedding && w_context == o.w_context &&
               w_input == o.w_input && w_hidden == o.w_hidden && b_hidden == o.b_hidden &&
               w_out == o.w_out && b_out == o.b_out;
    }
};

/// Immutable copy for use as the frozen reference model.
inline PolicyParams freeze_reference(const PolicyParams& params) { return params; }

/// Tape leaves for one differentiable pass over the policy.
struct PolicyVars {
    ad::Value token_embedding, w_context, w_input, w_hidden, b_hidden, w_out, b_out;

    static PolicyVars leaves(ad::Tape& tape, const PolicyParams& p) {
        return PolicyVars{tape.leaf(p.token_embedding), tape.leaf(p.w_context),
                          tape.leaf(p.w_input),        tape.leaf(p.w_hidden),
                          tape.leaf(p.b_hidden),       tape.leaf(p.w_out),
                          tape.leaf(p.b_out)};
    }

    std::vector<ad::Value> list() const {
        return {token_embedding, w_context, w_input, w_hidden, b_hidden, w_out, b_out};
    }
};

inline void check_description(const PolicyConfig& cfg, const Description& d) {
    if (static_cast<int>(d.tokens.size()) != cfg.length) {
        throw VocabError("description length " + std::to_string(d.tokens.size()) + ", expected " +
                         std::to_string(cfg.length));
    }
    for (int t : d.tokens) {
        if (t < 0 || t >= cfg.vocab) {
            throw VocabError("description token " + std::to_string(t) + " out of vocabulary");
        }
    }
}

/// Differentiable sequence log-probability under the recurrent factorization.
inline ad::Value log_prob(ad::Tape& tape, const PolicyVars& vars, const PolicyConfig& cfg,
                          const PolicyContext& ctx, const Description& d) {
    check_description(cfg, d);
    ad::Value c = tape.leaf(ctx.features);
    ad::Value ctx_drive = ad::matvec(vars.w_context, c);
    ad::Value h = tape.leaf(Tensor({cfg.hidden_dim}));
    ad::Value total = tape.leaf(Tensor::scalar(0.0));
    for (int t = 0; t < cfg.length; ++t) {
        ad::Value pre = ad::add(ad::add(ctx_drive, ad::matvec(vars.w_hidden, h)), vars.b_hidden);
        if (t > 0) {
            ad::Value prev = ad::row(vars.token_embedding, d.tokens[static_cast<std::size_t>(t - 1)]);
            pre = ad::add(pre, ad::matvec(vars.w_input, prev));
        }
        h = ad::tanh(pre);
        ad::Value logits = ad::add(ad::matvec(vars.w_out, h), vars.b_out);
        total = ad::add(total, ad::pick(ad::log_softmax(logits), d.tokens[static_cast<std::size_t>(t)]));
    }
    return total;
}

/// Plain log-probability; same tape code path as the differentiable version
/// so identical parameters yield bit-identical values.
inline double log_prob(const PolicyParams& params, const PolicyContext& ctx, const Description& d) {
    ad::Tape tape;
    PolicyVars vars = PolicyVars::leaves(tape, params);
    return log_prob(tape, vars, params.cfg, ctx, d).val()[0];
}

/// Ancestral sampling from temperature-scaled per-step distributions.
/// Temperature zero selects the greedy (argmax) sequence; ties break to the
/// lowest token index.
inline Description sample(const PolicyParams& p, const PolicyContext& ctx, double temperature,
                          std::uint64_t seed) {
    if (temperature < 0.0) {
        throw ConfigError("sample: temperature must be non-negative");
    }
    const PolicyConfig& cfg = p.cfg;
    if (ctx.features.dim() != cfg.context_dim) {
        throw DimError("sample: context dimension mismatch");
    }
    rng::Stream s(seed);

    std::vector<double> ctx_drive(static_cast<std::size_t>(cfg.hidden_dim));
    for (int i = 0; i < cfg.hidden_dim; ++i) {
        double v = 0.0;
        for (int j = 0; j < cfg.context_dim; ++j) {
            v += p.w_context.at(i, j) * ctx.features[static_cast<std::size_t>(j)];
        }
        ctx_drive[static_cast<std::size_t>(i)] = v;
    }

    std::vector<double> h(static_cast<std::size_t>(cfg.hidden_dim), 0.0);
    Description out;
    out.tokens.reserve(static_cast<std::size_t>(cfg.length));
    int prev = -1;
    for (int t = 0; t < cfg.length; ++t) {
        std::vector<double> hn(static_cast<std::size_t>(cfg.hidden_dim));
        for (int i = 0; i < cfg.hidden_dim; ++i) {
            double v = ctx_drive[static_cast<std::size_t>(i)] + p.b_hidden[static_cast<std::size_t>(i)];
            for (int j = 0; j < cfg.hidden_dim; ++j) {
                v += p.w_hidden.at(i, j) * h[static_cast<std::size_t>(j)];
            }
            if (prev >= 0) {
                for (int j = 0; j < cfg.embed_dim; ++j) {
                    v += p.w_input.at(i, j) * p.token_embedding.at(prev, j);
                }
            }
            hn[static_cast<std::size_t>(i)] = std::tanh(v);
        }
        h = std::move(hn);

        std::vector<double> logits(static_cast<std::size_t>(cfg.vocab));
        double mx = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < cfg.vocab; ++v) {
            double z = p.b_out[static_cast<std::size_t>(v)];
            for (int j = 0; j < cfg.hidden_dim; ++j) {
                z += p.w_out.at(v, j) * h[static_cast<std::size_t>(j)];
            }
            logits[static_cast<std::size_t>(v)] = z;
            mx = std::max(mx, z);
        }

        int chosen = 0;
        if (temperature == 0.0) {
            for (int v = 1; v < cfg.vocab; ++v) {
                if (logits[static_cast<std::size_t>(v)] > logits[static_cast<std::size_t>(chosen)]) {
                    chosen = v;
                }
            }
        } else {
            double z = 0.0;
            std::vector<double> probs(static_cast<std::size_t>(cfg.vocab));
            for (int v = 0; v < cfg.vocab; ++v) {
                probs[static_cast<std::size_t>(v)] = std::exp((logits[static_cast<std::size_t>(v)] - mx) / temperature);
                z += probs[static_cast<std::size_t>(v)];
            }
            double u = s.uniform() * z;
            double acc = 0.0;
            chosen = cfg.vocab - 1;
            for (int v = 0; v < cfg.vocab; ++v) {
                acc += probs[static_cast<std::size_t>(v)];
                if (u < acc) {
                    chosen = v;
                    break;
                }
            }
        }
        out.tokens.push_back(chosen);
        prev = chosen;
    }
    return out;
}

inline Description greedy(const PolicyParams& p, const PolicyContext& ctx) {
    return sample(p, ctx, 0.0, 0);
}

// ---------------------------------------------------------------------------
// Supervised pre-training: maximize likelihood of oracle-compatible
// descriptions, the toy analog of e-commerce knowledge injection.
// ---------------------------------------------------------------------------

struct PretrainConfig {
    int epochs = 6;
    double learning_rate = 0.02;
    int targets_per_product = 8;
    int candidates_per_product = 400;
    double holdout_fraction = 0.1;
};

struct PretrainStats {
    std::vector<double> epoch_train_nll;
    double initial_holdout_nll = 0.0;
    double final_holdout_nll = 0.0;
    int products_skipped = 0;  // no compatible target found
    int examples = 0;
};

/// Builds per-product compatible targets by rejection sampling: random token
/// sequences whose fixed-table embeddings satisfy kappa >= tau.
inline std::vector<Description> compatible_targets(const oracle::OracleParams& world,
                                                   const catalog::Product& product,
                                                   const catalog::EmbeddingTable& desc_table,
                                                   const PolicyConfig& cfg, int want, int budget,
                                                   std::uint64_t seed) {
    rng::Stream s(seed);
    std::vector<Description> out;
    for (int i = 0; i < budget && static_cast<int>(out.size()) < want; ++i) {
        Description d;
        d.tokens.resize(static_cast<std::size_t>(cfg.length));
        for (int& t : d.tokens) {
            t = static_cast<int>(s.below(static_cast<std::uint64_t>(cfg.vocab)));
        }
        double kappa = oracle::compatibility(world, product, description_embedding(d, desc_table));
        if (kappa >= world.annotator_threshold) {
            out.push_back(std::move(d));
        }
    }
    return out;
}

using ContextFn = std::function<PolicyContext(const catalog::Product&)>;

inline PretrainStats pretrain(PolicyParams& params, std::span<const catalog::Product> products,
                              const oracle::OracleParams& world,
                              const catalog::EmbeddingTable& desc_table, const ContextFn& context_of,
                              const PretrainConfig& cfg, std::uint64_t seed) {
    if (products.empty()) {
        throw ConfigError("pretrain: catalog is empty");
    }
    PretrainStats stats;

    struct Example {
        std::size_t product;
        Description target;
    };
    std::vector<Example> train, holdout;
    std::vector<PolicyContext> contexts;
    contexts.reserve(products.size());
    std::size_t holdout_every =
        cfg.holdout_fraction > 0.0 ? static_cast<std::size_t>(std::max(2.0, 1.0 / cfg.holdout_fraction)) : 0;
    for (std::size_t i = 0; i < products.size(); ++i) {
        contexts.push_back(context_of(products[i]));
        auto targets = compatible_targets(
            world, products[i], desc_table, params.cfg, cfg.targets_per_product,
            cfg.candidates_per_product,
            rng::derive(seed, "pretrain/targets", {static_cast<std::uint64_t>(products[i].id)}));
        if (targets.empty()) {
            ++stats.products_skipped;
            continue;
        }
        bool is_holdout = holdout_every != 0 && (i % holdout_every) == holdout_every - 1;
        for (auto& t : targets) {
            (is_holdout ? holdout : train).push_back(Example{i, std::move(t)});
        }
    }
    if (train.empty()) {
        throw ConfigError("pretrain: no compatible targets for any product");
    }
    stats.examples = static_cast<int>(train.size());

    auto mean_nll = [&](const std::vector<Example>& set) {
        if (set.empty()) {
            return 0.0;
        }
        double total = 0.0;
        for (const Example& e : set) {
            total -= log_prob(params, contexts[e.product], e.target);
        }
        return total / static_cast<double>(set.size());
    };
    stats.initial_holdout_nll = mean_nll(holdout);

    opt::OptimizerConfig ocfg;
    ocfg.learning_rate = cfg.learning_rate;
    opt::Optimizer optimizer(ocfg);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    rng::Stream shuffler(rng::derive(seed, "pretrain/order"));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffler.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t idx : order) {
            const Example& e = train[idx];
            ad::Tape tape;
            PolicyVars vars = PolicyVars::leaves(tape, params);
            ad::Value nll = ad::neg(log_prob(tape, vars, params.cfg, contexts[e.product], e.target));
            epoch_loss += nll.val()[0];
            tape.backward(nll);

            std::vector<Tensor*> tensors;
            std::vector<const Tensor*> grads;
            params.visit([&](const char*, Tensor& t) { tensors.push_back(&t); });
            for (const ad::Value& v : vars.list()) {
                grads.push_back(&v.grad());
            }
            optimizer.step(tensors, grads);
        }
        stats.epoch_train_nll.push_back(epoch_loss / static_cast<double>(train.size()));
    }
    stats.final_holdout_nll = mean_nll(holdout);
    return stats;
}

// ---------------------------------------------------------------------------
// Checkpointing.
// ---------------------------------------------------------------------------

inline Checkpoint to_checkpoint(const PolicyParams& params) {
    Checkpoint ckpt;
    ckpt.model_kind = "policy";
    params.visit([&](const char* name, const Tensor& t) { ckpt.params.emplace_back(name, t); });
    return ckpt;
}

inline PolicyParams from_checkpoint(const Checkpoint& ckpt, const PolicyConfig& cfg) {
    if (ckpt.model_kind != "policy") {
        throw IoError("checkpoint model_kind '" + ckpt.model_kind + "', expected 'policy'");
    }
    PolicyParams p;
    p.cfg = cfg;
    p.token_embedding = ckpt.find("token_embedding");
    p.w_context = ckpt.find("w_context");
    p.w_input = ckpt.find("w_input");
    p.w_hidden = ckpt.find("w_hidden");
    p.b_hidden = ckpt.find("b_hidden");
    p.w_out = ckpt.find("w_out");
    p.b_out = ckpt.find("b_out");
    if (p.token_embedding.rows() != cfg.vocab || p.token_embedding.cols() != cfg.embed_dim ||
        p.w_context.rows() != cfg.hidden_dim || p.w_context.cols() != cfg.context_dim ||
        p.w_out.rows() != cfg.vocab || p.w_out.cols() != cfg.hidden_dim) {
        throw IoError("checkpoint shapes do not match policy config");
    }
    return p;
}

}  // namespace ctrlab::policy
