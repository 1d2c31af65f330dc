#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctrlab/autodiff.hpp"
#include "ctrlab/common.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab::opt {

enum class Kind { sgd, adam };

struct OptimizerConfig {
    Kind kind = Kind::sgd;
    double learning_rate = 0.01;  // >= 0; zero means "hold parameters fixed"
    bool cosine_decay = false;
    long decay_steps = 0;  // horizon for cosine decay; ignored when decay off
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Gradient-descent optimizer with an optional per-parameter second-moment
/// variant and optional cosine learning-rate decay. Accumulator shapes are
/// pinned to the parameter shapes on first use.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
        if (cfg_.learning_rate < 0.0) {
            throw ConfigError("learning rate must be non-negative");
        }
        if (cfg_.cosine_decay && cfg_.decay_steps <= 0) {
            throw ConfigError("cosine decay requires a positive step horizon");
        }
    }

    double current_lr() const {
        double lr = cfg_.learning_rate;
        if (cfg_.cosine_decay) {
            double frac = std::min(1.0, static_cast<double>(step_count_) / static_cast<double>(cfg_.decay_steps));
            lr *= 0.5 * (1.0 + std::cos(3.141592653589793238463 * frac));
        }
        return lr;
    }

    long step_count() const { return step_count_; }

    void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
        if (params.size() != grads.size()) {
            throw DimError("optimizer: parameter/gradient count mismatch");
        }
        if (m_.empty()) {
            for (const Tensor* p : params) {
                m_.push_back(Tensor::zeros(p->shape()));
                v_.push_back(Tensor::zeros(p->shape()));
            }
        }
        if (m_.size() != params.size()) {
            throw DimError("optimizer: parameter count changed between steps");
        }
        double lr = current_lr();
        ++step_count_;
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor& p = *params[k];
            const Tensor& g = *grads[k];
            if (!p.same_shape(g)) {
                throw DimError("optimizer: gradient shape mismatch");
            }
            if (!m_[k].same_shape(p)) {
                throw DimError("optimizer: accumulator shape mismatch");
            }
            switch (cfg_.kind) {
                case Kind::sgd:
                    if (lr != 0.0) {
                        for (std::size_t i = 0; i < p.size(); ++i) {
                            p[i] -= lr * g[i];
                        }
                    }
                    break;
                case Kind::adam: {
                    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
                    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
                        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                        if (lr != 0.0) {
                            double mh = m_[k][i] / bc1;
                            double vh = v_[k][i] / bc2;
                            p[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
                        }
                    }
                    break;
                }
            }
        }
    }

    void step(std::vector<Tensor*> params, std::vector<const Tensor*> grads) {
        step(std::span<Tensor* const>(params), std::span<const Tensor* const>(grads));
    }

private:
    OptimizerConfig cfg_;
    long step_count_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

// ---------------------------------------------------------------------------
// Gradient verification against central finite differences.
// ---------------------------------------------------------------------------

/// Scalar function of a parameter list, evaluated through a fresh tape so the
/// reverse-mode gradients can be read off the leaves.
using TapeFn = std::function<ad::Value(ad::Tape&, std::span<const ad::Value>)>;

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    int worst_param = -1;
    std::size_t worst_entry = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

inline double eval_plain(const TapeFn& f, const std::vector<Tensor>& params) {
    ad::Tape tape;
    std::vector<ad::Value> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) {
        leaves.push_back(tape.leaf(p));
    }
    ad::Value out = f(tape, leaves);
    if (out.val().size() != 1) {
        throw DimError("grad_check: function must be scalar-valued");
    }
    double v = out.val()[0];
    if (!std::isfinite(v)) {
        throw NonFiniteError("grad_check: non-finite forward value");
    }
    return v;
}

/// Compares tape gradients against central finite differences, entry by
/// entry. Relative error uses a unit floor so near-zero gradients are judged
/// on absolute error.
inline GradCheckReport grad_check(const TapeFn& f, std::vector<Tensor> params, double step, double tol) {
    if (step <= 0.0) {
        throw ConfigError("grad_check: step must be positive");
    }
    GradCheckReport report;

    ad::Tape tape;
    std::vector<ad::Value> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) {
        leaves.push_back(tape.leaf(p));
    }
    ad::Value out = f(tape, leaves);
    if (out.val().size() != 1) {
        throw DimError("grad_check: function must be scalar-valued");
    }
    if (!std::isfinite(out.val()[0])) {
        throw NonFiniteError("grad_check: non-finite forward value");
    }
    tape.backward(out);

    for (std::size_t k = 0; k < params.size(); ++k) {
        const Tensor& analytic = leaves[k].grad();
        for (std::size_t i = 0; i < params[k].size(); ++i) {
            double saved = params[k][i];
            params[k][i] = saved + step;
            double fp = eval_plain(f, params);
            params[k][i] = saved - step;
            double fm = eval_plain(f, params);
            params[k][i] = saved;
            double numeric = (fp - fm) / (2.0 * step);
            double a = analytic[i];
            double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = static_cast<int>(k);
                report.worst_entry = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace ctrlab::opt
