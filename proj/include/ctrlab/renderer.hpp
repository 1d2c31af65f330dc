#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ctrlab/catalog.hpp"
#include "ctrlab/common.hpp"
#include "ctrlab/policy.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab::renderer {

/// Denoising schedule: strictly decreasing alpha-bar coefficients with
/// abar[0] = 1 and abar[T] > 0.
struct Schedule {
    std::vector<double> alpha_bar;  // size T + 1

    int steps() const { return static_cast<int>(alpha_bar.size()) - 1; }

    void validate() const {
        if (alpha_bar.size() < 2) {
            throw ScheduleError("schedule needs at least one step");
        }
        if (alpha_bar[0] != 1.0) {
            throw ScheduleError("schedule must start at alpha_bar = 1");
        }
        for (std::size_t t = 1; t < alpha_bar.size(); ++t) {
            if (!(alpha_bar[t] > 0.0) || !(alpha_bar[t] < alpha_bar[t - 1])) {
                throw ScheduleError("alpha_bar must be strictly decreasing and positive");
            }
        }
    }

    static Schedule cosine(int steps, double cut = 0.95) {
        if (steps < 1) {
            throw ScheduleError("schedule needs at least one step");
        }
        Schedule s;
        s.alpha_bar.resize(static_cast<std::size_t>(steps) + 1);
        for (int t = 0; t <= steps; ++t) {
            double angle = (static_cast<double>(t) / static_cast<double>(steps)) *
                           (3.141592653589793238463 / 2.0) * cut;
            double c = std::cos(angle);
            s.alpha_bar[static_cast<std::size_t>(t)] = c * c;
        }
        s.validate();
        return s;
    }
};

struct Latent {
    Tensor x;
    int t = 0;
};

/// Binary mask over feature components; ones mark the product region.
struct ProductMask {
    std::vector<std::uint8_t> m;

    /// Fixed half-dim mask derived from the product id alone, so the same
    /// product always keeps the same foreground components.
    static ProductMask for_product(int product_id, int dim) {
        std::vector<int> idx(static_cast<std::size_t>(dim));
        for (int i = 0; i < dim; ++i) {
            idx[static_cast<std::size_t>(i)] = i;
        }
        rng::Stream s(rng::derive(0, "mask", {static_cast<std::uint64_t>(product_id)}));
        s.shuffle(idx);
        ProductMask mask;
        mask.m.assign(static_cast<std::size_t>(dim), 0);
        for (int i = 0; i < dim / 2; ++i) {
            mask.m[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
        }
        return mask;
    }
};

/// Fixed linear map from description-embedding space into image-feature
/// space; lift(emb(y)) is the target the denoiser pulls toward.
struct Lift {
    Tensor matrix;  // [image_dim x context_dim]

    Tensor apply(const Tensor& e) const {
        if (e.rank() != 1 || e.dim() != matrix.cols()) {
            throw DimError("lift: embedding dimension mismatch");
        }
        Tensor out({matrix.rows()});
        for (int i = 0; i < matrix.rows(); ++i) {
            double v = 0.0;
            for (int j = 0; j < matrix.cols(); ++j) {
                v += matrix.at(i, j) * e[static_cast<std::size_t>(j)];
            }
            out[static_cast<std::size_t>(i)] = v;
        }
        return out;
    }
};

inline Lift make_lift(std::uint64_t seed, int image_dim, int context_dim) {
    rng::Stream s(rng::derive(seed, "tables/lift"));
    return Lift{Tensor::randn({image_dim, context_dim}, s,
                              1.0 / std::sqrt(static_cast<double>(context_dim)))};
}

/// Predicted noise: a linear pull of strength gamma toward the lifted
/// description target.
inline Tensor toy_denoiser(const Tensor& x, const Tensor& lifted_target, double gamma = 0.5) {
    if (!x.same_shape(lifted_target)) {
        throw DimError("toy_denoiser: latent/target shape mismatch");
    }
    Tensor eps(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        eps[i] = (x[i] - lifted_target[i]) * gamma;
    }
    return eps;
}

/// One deterministic denoising update from step t+1 down to t:
///   x_t = sqrt(abar_t) (x_{t+1} - sqrt(1-abar_{t+1}) eps) / sqrt(abar_{t+1})
///       + sqrt(1-abar_t) eps
inline Tensor ddim_update(double abar_t, double abar_next, const Tensor& x_next, const Tensor& eps) {
    if (!x_next.same_shape(eps)) {
        throw DimError("ddim_update: latent/noise shape mismatch");
    }
    double a = std::sqrt(abar_t);
    double an = std::sqrt(abar_next);
    double bn = std::sqrt(1.0 - abar_next);
    double b = std::sqrt(1.0 - abar_t);
    Tensor out(x_next.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a * (x_next[i] - bn * eps[i]) / an + b * eps[i];
    }
    return out;
}

inline Latent ddim_step(const Schedule& schedule, const Latent& x_next, const Tensor& lifted_target,
                        double gamma = 0.5) {
    int t_next = x_next.t;
    if (t_next < 1 || t_next > schedule.steps()) {
        throw ScheduleError("ddim_step: step index out of range");
    }
    Tensor eps = toy_denoiser(x_next.x, lifted_target, gamma);
    Tensor x = ddim_update(schedule.alpha_bar[static_cast<std::size_t>(t_next - 1)],
                           schedule.alpha_bar[static_cast<std::size_t>(t_next)], x_next.x, eps);
    return Latent{std::move(x), t_next - 1};
}

/// Inpainting blend: keep the product's masked components, take the denoised
/// latent elsewhere. Componentwise select, so masked entries match the
/// product latent bit for bit.
inline Tensor blend(const Tensor& x, const Tensor& x_o, const ProductMask& mask) {
    if (!x.same_shape(x_o) || mask.m.size() != x.size()) {
        throw DimError("blend: dimension mismatch");
    }
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = mask.m[i] ? x_o[i] : x[i];
    }
    return out;
}

using StepObserver = std::function<void(const Tensor& post_blend, int t)>;

/// Full inpainting render: seeded Gaussian init at step T, then a denoising
/// update followed by the product blend down to step 0. The product latent is
/// the product's image feature.
inline Tensor render(const Schedule& schedule, const catalog::Product& product,
                     const ProductMask& mask, const Tensor& lifted_target, std::uint64_t seed,
                     double gamma = 0.5, const StepObserver& observe = {}) {
    schedule.validate();
    const Tensor& x_o = product.image_feature;
    rng::Stream s(seed);
    Latent latent{Tensor::randn(x_o.shape(), s), schedule.steps()};
    for (int t = schedule.steps() - 1; t >= 0; --t) {
        latent = ddim_step(schedule, latent, lifted_target, gamma);
        latent.x = blend(latent.x, x_o, mask);
        if (observe) {
            observe(latent.x, t);
        }
    }
    return latent.x;
}

/// Ad image for a (product, description) pair under the shared fixed tables.
inline Tensor render_description(const Schedule& schedule, const catalog::Product& product,
                                 const ProductMask& mask, const policy::Description& y,
                                 const catalog::EmbeddingTable& desc_table, const Lift& lift,
                                 std::uint64_t seed, double gamma = 0.5) {
    Tensor target = lift.apply(policy::description_embedding(y, desc_table));
    return render(schedule, product, mask, target, seed, gamma);
}

}  // namespace ctrlab::renderer
