#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "ctrlab/catalog.hpp"
#include "ctrlab/common.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab::oracle {

/// Hidden click world. A product's ideal background direction is
/// style^T * image_feature; compatibility kappa is the cosine between that
/// direction and a background embedding, and the true CTR is
/// sigmoid(base_logodds[category] + gain * kappa).
struct OracleParams {
    Tensor base_logodds;          // [K]
    double gain = 2.0;            // w > 0
    Tensor style;                 // [image_dim x context_dim]
    double annotator_threshold = 0.5;  // tau in (-1, 1), calibrated per world
};

inline OracleParams make_oracle(std::uint64_t seed, int categories, int image_dim, int context_dim,
                                double gain = 2.0, double annotator_threshold = 0.5) {
    if (gain <= 0.0) {
        throw ConfigError("oracle gain must be positive");
    }
    OracleParams params;
    rng::Stream base(rng::derive(seed, "oracle/base"));
    params.base_logodds = Tensor({categories});
    for (int k = 0; k < categories; ++k) {
        params.base_logodds[static_cast<std::size_t>(k)] = base.uniform(-2.5, -0.5);
    }
    rng::Stream style(rng::derive(seed, "oracle/style"));
    params.style = Tensor::randn({image_dim, context_dim}, style);
    params.gain = gain;
    params.annotator_threshold = annotator_threshold;
    return params;
}

/// Product's ideal background direction in context space.
inline Tensor ideal_direction(const OracleParams& params, const catalog::Product& product) {
    const Tensor& s = params.style;
    if (product.image_feature.dim() != s.rows()) {
        throw DimError("oracle: image feature does not match style matrix");
    }
    Tensor out({s.cols()});
    for (int j = 0; j < s.cols(); ++j) {
        double v = 0.0;
        for (int i = 0; i < s.rows(); ++i) {
            v += s.at(i, j) * product.image_feature[static_cast<std::size_t>(i)];
        }
        out[static_cast<std::size_t>(j)] = v;
    }
    return out;
}

/// kappa: cosine between the product's ideal direction and the background
/// embedding. Scale-invariant in both arguments.
inline double compatibility(const OracleParams& params, const catalog::Product& product,
                            const Tensor& background_embedding) {
    Tensor ideal = ideal_direction(params, product);
    if (!ideal.same_shape(background_embedding)) {
        throw DimError("oracle: background embedding dimension mismatch");
    }
    double ni = norm(ideal);
    double nb = norm(background_embedding);
    if (ni == 0.0 || nb == 0.0) {
        throw DegenerateInputError("oracle: zero-norm vector in cosine");
    }
    return dot_raw(ideal, background_embedding) / (ni * nb);
}

inline double base_logodds_of(const OracleParams& params, const catalog::Product& product) {
    if (product.category < 0 || product.category >= params.base_logodds.dim()) {
        throw DimError("oracle: product category out of range");
    }
    return params.base_logodds[static_cast<std::size_t>(product.category)];
}

inline double true_ctr(const OracleParams& params, const catalog::Product& product,
                       const Tensor& background_embedding) {
    double kappa = compatibility(params, product, background_embedding);
    return sigmoid(base_logodds_of(params, product) + params.gain * kappa);
}

struct ClickOutcome {
    long exposures = 0;
    long clicks = 0;
    double true_ctr = 0.0;
};

inline ClickOutcome simulate_clicks(const OracleParams& params, const catalog::Product& product,
                                    const Tensor& background_embedding, long exposures,
                                    std::uint64_t seed) {
    if (exposures < 0) {
        throw ConfigError("simulate_clicks: exposures must be non-negative");
    }
    ClickOutcome outcome;
    outcome.exposures = exposures;
    outcome.true_ctr = true_ctr(params, product, background_embedding);
    rng::Stream s(seed);
    outcome.clicks = s.binomial(exposures, outcome.true_ctr);
    return outcome;
}

/// Simulated annotator: compatible iff kappa >= tau.
inline bool annotate_match(const OracleParams& params, const catalog::Product& product,
                           const Tensor& background_embedding) {
    return compatibility(params, product, background_embedding) >= params.annotator_threshold;
}

inline catalog::PairLabel pairwise_label(const OracleParams& params, const catalog::Product& product,
                                         const Tensor& bg_left, const Tensor& bg_right) {
    double l = true_ctr(params, product, bg_left);
    double r = true_ctr(params, product, bg_right);
    if (l == r) {
        throw TieError("pairwise_label: exact CTR tie; caller must exclude");
    }
    return l > r ? catalog::PairLabel::left_higher : catalog::PairLabel::right_higher;
}

/// Threshold such that roughly `target_match_rate` of the given kappas land
/// at or above it. Used once per world, after policy pre-training.
inline double calibrate_threshold(std::span<const double> kappas, double target_match_rate) {
    if (kappas.empty()) {
        throw ConfigError("calibrate_threshold: no compatibility samples");
    }
    if (target_match_rate <= 0.0 || target_match_rate >= 1.0) {
        throw ConfigError("calibrate_threshold: target rate must lie in (0, 1)");
    }
    std::vector<double> sorted(kappas.begin(), kappas.end());
    std::sort(sorted.begin(), sorted.end());
    // Matching kappa >= tau, so tau is the (1 - rate) quantile from below.
    std::size_t idx = static_cast<std::size_t>(
        std::floor((1.0 - target_match_rate) * static_cast<double>(sorted.size())));
    idx = std::min(idx, sorted.size() - 1);
    return sorted[idx];
}

}  // namespace ctrlab::oracle
