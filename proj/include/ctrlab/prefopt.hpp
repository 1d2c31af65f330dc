#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "ctrlab/autodiff.hpp"
#include "ctrlab/catalog.hpp"
#include "ctrlab/common.hpp"
#include "ctrlab/optim.hpp"
#include "ctrlab/policy.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab::prefopt {

/// Product conditioning as the generator sees it: original image features
/// plus the serialized instruct prompt.
struct PromptContext {
    Tensor image_feature;
    catalog::InstructPrompt prompt;
};

inline policy::PolicyContext to_policy_context(const PromptContext& c) {
    return policy::make_policy_context(c.image_feature, c.prompt);
}

enum class MismatchTag { visual, textual };

struct MismatchContext {
    PromptContext context;
    MismatchTag tag = MismatchTag::visual;
};

/// One unit of preference data: chosen and rejected descriptions for a
/// product context, plus the mismatched contexts used by the product-centric
/// term.
struct PreferenceTuple {
    PromptContext context;
    policy::Description y_plus;
    policy::Description y_minus;
    std::vector<MismatchContext> mismatches;
};

struct DpoConfig {
    double beta = 0.1;
    int epochs = 5;
    int products_per_epoch = 64;
    bool use_visual = true;
    bool use_textual = true;
    double mask_fraction = 0.75;
    double sample_temperature = 1.0;
    int resample_limit = 5;
    double learning_rate = 0.05;

    void validate() const {
        if (beta <= 0.0) {
            throw ConfigError("dpo beta must be positive");
        }
        if (mask_fraction <= 0.0 || mask_fraction >= 1.0) {
            throw ConfigError("mask fraction must lie in (0, 1)");
        }
        if (sample_temperature <= 0.0) {
            throw ConfigError("sample temperature must be positive");
        }
        if (resample_limit < 1 || products_per_epoch < 1) {
            throw ConfigError("resample limit and products per epoch must be positive");
        }
    }
};

// ---------------------------------------------------------------------------
// Losses. Reference log-probabilities are plain doubles computed through the
// identical forward path, so at policy == reference every log-ratio vanishes
// exactly and both losses sit at ln 2.
// ---------------------------------------------------------------------------

/// -log sigmoid(margin), numerically stable.
inline ad::Value preference_loss_from_margin(ad::Value margin) {
    return ad::softplus(ad::neg(margin));
}

inline ad::Value dpo_loss(ad::Tape& tape, const policy::PolicyVars& vars,
                          const policy::PolicyConfig& cfg, const policy::PolicyParams& reference,
                          const PreferenceTuple& tuple, double beta) {
    if (tuple.y_plus == tuple.y_minus) {
        throw InvariantError("dpo_loss: chosen and rejected descriptions are identical");
    }
    policy::PolicyContext ctx = to_policy_context(tuple.context);
    ad::Value lp_plus = policy::log_prob(tape, vars, cfg, ctx, tuple.y_plus);
    ad::Value lp_minus = policy::log_prob(tape, vars, cfg, ctx, tuple.y_minus);
    double ref_diff = policy::log_prob(reference, ctx, tuple.y_plus) -
                      policy::log_prob(reference, ctx, tuple.y_minus);
    ad::Value margin = ad::sub(ad::sub(lp_plus, lp_minus), tape.leaf(Tensor::scalar(ref_diff)));
    return preference_loss_from_margin(ad::scale(margin, beta));
}

inline double dpo_loss(const policy::PolicyParams& params, const policy::PolicyParams& reference,
                       const PreferenceTuple& tuple, double beta) {
    ad::Tape tape;
    policy::PolicyVars vars = policy::PolicyVars::leaves(tape, params);
    return dpo_loss(tape, vars, params.cfg, reference, tuple, beta).val()[0];
}

/// Product-centric term: the contrast keeps y_plus fixed and varies the
/// context, averaging over the tuple's mismatched contexts.
inline ad::Value pcpo_loss(ad::Tape& tape, const policy::PolicyVars& vars,
                           const policy::PolicyConfig& cfg, const policy::PolicyParams& reference,
                           const PreferenceTuple& tuple, double beta,
                           std::span<const MismatchContext> mismatches) {
    if (mismatches.empty()) {
        throw ConfigError("pcpo_loss: tuple has no mismatched contexts");
    }
    policy::PolicyContext ctx = to_policy_context(tuple.context);
    ad::Value lp_true = policy::log_prob(tape, vars, cfg, ctx, tuple.y_plus);
    double ref_true = policy::log_prob(reference, ctx, tuple.y_plus);

    ad::Value total = tape.leaf(Tensor::scalar(0.0));
    for (const MismatchContext& mc : mismatches) {
        policy::PolicyContext hat = to_policy_context(mc.context);
        ad::Value lp_hat = policy::log_prob(tape, vars, cfg, hat, tuple.y_plus);
        double ref_hat = policy::log_prob(reference, hat, tuple.y_plus);
        ad::Value margin =
            ad::sub(ad::sub(lp_true, lp_hat), tape.leaf(Tensor::scalar(ref_true - ref_hat)));
        total = ad::add(total, preference_loss_from_margin(ad::scale(margin, beta)));
    }
    return ad::scale(total, 1.0 / static_cast<double>(mismatches.size()));
}

inline ad::Value pcpo_loss(ad::Tape& tape, const policy::PolicyVars& vars,
                           const policy::PolicyConfig& cfg, const policy::PolicyParams& reference,
                           const PreferenceTuple& tuple, double beta) {
    return pcpo_loss(tape, vars, cfg, reference, tuple, beta, tuple.mismatches);
}

inline double pcpo_loss(const policy::PolicyParams& params, const policy::PolicyParams& reference,
                        const PreferenceTuple& tuple, double beta) {
    ad::Tape tape;
    policy::PolicyVars vars = policy::PolicyVars::leaves(tape, params);
    return pcpo_loss(tape, vars, params.cfg, reference, tuple, beta).val()[0];
}

inline std::vector<MismatchContext> selected_mismatches(const PreferenceTuple& tuple, bool use_visual,
                                                        bool use_textual) {
    std::vector<MismatchContext> out;
    for (const MismatchContext& mc : tuple.mismatches) {
        if ((mc.tag == MismatchTag::visual && use_visual) ||
            (mc.tag == MismatchTag::textual && use_textual)) {
            out.push_back(mc);
        }
    }
    return out;
}

struct TotalLossParts {
    ad::Value total;
    double dpo = 0.0;
    double pcpo = 0.0;  // zero when the term is disabled
};

/// Combined objective: DPO plus the product-centric term when any mismatch
/// strategy is enabled; with both flags off this reduces to pure DPO.
inline TotalLossParts total_loss(ad::Tape& tape, const policy::PolicyVars& vars,
                                 const policy::PolicyConfig& cfg,
                                 const policy::PolicyParams& reference, const PreferenceTuple& tuple,
                                 double beta, bool use_visual, bool use_textual) {
    TotalLossParts parts{dpo_loss(tape, vars, cfg, reference, tuple, beta)};
    parts.dpo = parts.total.val()[0];
    auto selected = selected_mismatches(tuple, use_visual, use_textual);
    if (!selected.empty()) {
        ad::Value pc = pcpo_loss(tape, vars, cfg, reference, tuple, beta, selected);
        parts.pcpo = pc.val()[0];
        parts.total = ad::add(parts.total, pc);
    }
    return parts;
}

inline double total_loss(const policy::PolicyParams& params, const policy::PolicyParams& reference,
                         const PreferenceTuple& tuple, double beta, bool use_visual,
                         bool use_textual) {
    ad::Tape tape;
    policy::PolicyVars vars = policy::PolicyVars::leaves(tape, params);
    return total_loss(tape, vars, params.cfg, reference, tuple, beta, use_visual, use_textual)
        .total.val()[0];
}

// ---------------------------------------------------------------------------
// Mismatch constructors. Each changes exactly one modality.
// ---------------------------------------------------------------------------

/// Zeroes floor(mask_fraction * dim) uniformly chosen image-feature
/// components; the prompt is untouched.
inline PromptContext make_visual_mismatch(const PromptContext& context, double mask_fraction,
                                          std::uint64_t seed) {
    if (mask_fraction <= 0.0 || mask_fraction >= 1.0) {
        throw ConfigError("visual mismatch: mask fraction must lie in (0, 1)");
    }
    int dim = context.image_feature.dim();
    int n_mask = static_cast<int>(std::floor(mask_fraction * static_cast<double>(dim)));
    std::vector<int> idx(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i) {
        idx[static_cast<std::size_t>(i)] = i;
    }
    rng::Stream s(seed);
    s.shuffle(idx);
    PromptContext out = context;
    for (int i = 0; i < n_mask; ++i) {
        out.image_feature[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 0.0;
    }
    return out;
}

/// Replaces the prompt's product attributes with those of a uniformly chosen
/// different product, re-serialized under the same question; the image
/// feature is untouched.
inline PromptContext make_textual_mismatch(const PromptContext& context,
                                           std::span<const catalog::Product> products,
                                           int self_product_id,
                                           const catalog::TemplateRegistry& registry,
                                           const catalog::EmbeddingTable& char_table,
                                           std::uint64_t seed) {
    std::vector<const catalog::Product*> donors;
    for (const auto& p : products) {
        if (p.id != self_product_id) {
            donors.push_back(&p);
        }
    }
    if (donors.empty()) {
        throw ConfigError("textual mismatch: need at least two products");
    }
    rng::Stream s(seed);
    const catalog::Product* donor = donors[s.below(donors.size())];
    PromptContext out = context;
    out.prompt = catalog::build_instruct_prompt(context.prompt.question_id, *donor, registry, char_table);
    return out;
}

// ---------------------------------------------------------------------------
// Algorithm loop. The environment enters through hooks so tests can swap the
// reward model for the ground-truth oracle.
// ---------------------------------------------------------------------------

/// Relative scores (p1, p2) for two rendered images of the same product.
using PairScorer =
    std::function<std::pair<double, double>(const catalog::Product&, const Tensor&, const Tensor&)>;

struct OptimizationHooks {
    std::function<PromptContext(const catalog::Product&)> pm_context;
    std::function<Tensor(const catalog::Product&, const policy::Description&, std::uint64_t)> render;
    PairScorer score_pair;
    // (mean oracle CTR, match rate) of greedy outputs on the evaluation set
    std::function<std::pair<double, double>(const policy::PolicyParams&)> evaluate;
    // prebound mismatch constructors
    std::function<PromptContext(const PromptContext&, std::uint64_t)> visual_mismatch;
    std::function<PromptContext(const PromptContext&, std::uint64_t)> textual_mismatch;
};

struct EpochStats {
    int tuples_built = 0;
    int skipped = 0;  // resample exhaustion
    double mean_dpo_loss = 0.0;
    double mean_pcpo_loss = 0.0;
};

/// One pass of Algorithm-style tuple collection followed by gradient updates
/// over the collected set, in product order.
inline EpochStats run_epoch(policy::PolicyParams& params, const policy::PolicyParams& reference,
                            std::span<const catalog::Product> pool, const OptimizationHooks& hooks,
                            const DpoConfig& cfg, int epoch_index, std::uint64_t seed,
                            opt::Optimizer& optimizer) {
    cfg.validate();
    if (pool.empty()) {
        throw ConfigError("run_epoch: empty product pool");
    }
    auto e = static_cast<std::uint64_t>(epoch_index);

    // deterministic per-epoch product subset
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    rng::Stream picker(rng::derive(seed, "opt/products", {e}));
    picker.shuffle(order);
    std::size_t take = std::min(order.size(), static_cast<std::size_t>(cfg.products_per_epoch));
    order.resize(take);
    std::sort(order.begin(), order.end());  // fixed accumulation order by product position

    EpochStats stats;
    std::vector<PreferenceTuple> tuples;
    for (std::size_t slot : order) {
        const catalog::Product& product = pool[slot];
        auto pid = static_cast<std::uint64_t>(product.id);
        PromptContext ctx = hooks.pm_context(product);
        policy::PolicyContext pctx = to_policy_context(ctx);

        policy::Description y1, y2;
        bool distinct = false;
        for (int attempt = 0; attempt < cfg.resample_limit; ++attempt) {
            auto a = static_cast<std::uint64_t>(attempt);
            y1 = policy::sample(params, pctx, cfg.sample_temperature,
                                rng::derive(seed, "opt/sample/a", {e, pid, a}));
            y2 = policy::sample(params, pctx, cfg.sample_temperature,
                                rng::derive(seed, "opt/sample/b", {e, pid, a}));
            if (!(y1 == y2)) {
                distinct = true;
                break;
            }
        }
        if (!distinct) {
            ++stats.skipped;
            continue;
        }

        // both renders share one seed so the description is the only variable
        std::uint64_t render_seed = rng::derive(seed, "opt/render", {e, pid});
        Tensor img1 = hooks.render(product, y1, render_seed);
        Tensor img2 = hooks.render(product, y2, render_seed);
        auto [p1, p2] = hooks.score_pair(product, img1, img2);

        PreferenceTuple tuple;
        tuple.context = std::move(ctx);
        if (p1 > p2) {
            tuple.y_plus = y1;
            tuple.y_minus = y2;
        } else {
            tuple.y_plus = y2;
            tuple.y_minus = y1;
        }
        if (cfg.use_visual) {
            tuple.mismatches.push_back(MismatchContext{
                hooks.visual_mismatch(tuple.context, rng::derive(seed, "opt/vis", {e, pid})),
                MismatchTag::visual});
        }
        if (cfg.use_textual) {
            tuple.mismatches.push_back(MismatchContext{
                hooks.textual_mismatch(tuple.context, rng::derive(seed, "opt/txt", {e, pid})),
                MismatchTag::textual});
        }
        tuples.push_back(std::move(tuple));
    }
    stats.tuples_built = static_cast<int>(tuples.size());

    for (const PreferenceTuple& tuple : tuples) {
        ad::Tape tape;
        policy::PolicyVars vars = policy::PolicyVars::leaves(tape, params);
        TotalLossParts parts =
            total_loss(tape, vars, params.cfg, reference, tuple, cfg.beta, cfg.use_visual, cfg.use_textual);
        stats.mean_dpo_loss += parts.dpo;
        stats.mean_pcpo_loss += parts.pcpo;
        tape.backward(parts.total);

        std::vector<Tensor*> tensors;
        params.visit([&](const char*, Tensor& t) { tensors.push_back(&t); });
        std::vector<const Tensor*> grads;
        for (const ad::Value& v : vars.list()) {
            grads.push_back(&v.grad());
        }
        optimizer.step(tensors, grads);
    }
    if (!tuples.empty()) {
        stats.mean_dpo_loss /= static_cast<double>(tuples.size());
        stats.mean_pcpo_loss /= static_cast<double>(tuples.size());
    }
    return stats;
}

struct TrajectoryRow {
    int epoch = 0;  // 0 is the pre-optimization baseline
    double mean_oracle_ctr = 0.0;
    double match_rate = 0.0;
    int tuples_built = 0;
    int skipped = 0;
    double mean_dpo_loss = 0.0;
    double mean_pcpo_loss = 0.0;
};

/// Full optimization run: N epochs of tuple collection and updates, with the
/// greedy policy evaluated on held-out products after every epoch.
inline std::vector<TrajectoryRow> run_optimization(policy::PolicyParams& params,
                                                   const policy::PolicyParams& reference,
                                                   std::span<const catalog::Product> pool,
                                                   const OptimizationHooks& hooks,
                                                   const DpoConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (cfg.epochs < 1) {
        throw ConfigError("run_optimization: need at least one epoch");
    }
    opt::OptimizerConfig ocfg;
    ocfg.learning_rate = cfg.learning_rate;
    opt::Optimizer optimizer(ocfg);

    std::vector<TrajectoryRow> rows;
    auto [ctr0, match0] = hooks.evaluate(params);
    rows.push_back(TrajectoryRow{0, ctr0, match0, 0, 0, 0.0, 0.0});

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochStats stats = run_epoch(params, reference, pool, hooks, cfg, epoch, seed, optimizer);
        auto [ctr, match] = hooks.evaluate(params);
        rows.push_back(TrajectoryRow{epoch, ctr, match, stats.tuples_built, stats.skipped,
                                     stats.mean_dpo_loss, stats.mean_pcpo_loss});
    }
    return rows;
}

}  // namespace ctrlab::prefopt
