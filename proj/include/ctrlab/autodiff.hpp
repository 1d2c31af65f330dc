#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctrlab/common.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab::ad {

class Tape;

/// Lightweight handle into a tape node. Cheap to copy; valid as long as the
/// owning tape is alive.
class Value {
public:
    Value() = default;

    const Tensor& val() const;
    const Tensor& grad() const;
    Tape* tape() const { return tape_; }
    int id() const { return id_; }

private:
    friend class Tape;
    Value(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Reverse-mode tape. Nodes are appended in forward (topological) order; the
/// backward pass walks them once in reverse, accumulating adjoints. Forward
/// and backward are RNG-free, so results are deterministic given inputs.
class Tape {
public:
    using Rule = std::function<void(Tape&)>;

    Value leaf(const Tensor& t) { return append(t); }

    Value append(Tensor value) {
        Tensor grad = Tensor::zeros(value.shape());
        nodes_.push_back(Node{std::move(value), std::move(grad), {}});
        return Value(this, static_cast<int>(nodes_.size()) - 1);
    }

    void set_rule(Value v, Rule rule) { nodes_[static_cast<std::size_t>(v.id())].rule = std::move(rule); }

    /// Runs the backward pass from a scalar root. Each node's rule fires
    /// exactly once, in reverse creation order.
    void backward(Value root) {
        if (root.tape() != this) {
            throw InvariantError("backward called with foreign value");
        }
        Node& r = nodes_[static_cast<std::size_t>(root.id())];
        if (r.value.size() != 1) {
            throw DimError("backward root must be scalar");
        }
        r.grad[0] = 1.0;
        for (int i = root.id(); i >= 0; --i) {
            auto& node = nodes_[static_cast<std::size_t>(i)];
            if (node.rule) {
                node.rule(*this);
            }
        }
    }

    const Tensor& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    Tensor& grad_of(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    const Tensor& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        Rule rule;
    };

    std::deque<Node> nodes_;
};

inline const Tensor& Value::val() const { return tape_->value_of(id_); }
inline const Tensor& Value::grad() const { return tape_->grad_of(id_); }

namespace detail {

inline Tape& same_tape(const Value& a, const Value& b) {
    if (a.tape() == nullptr || a.tape() != b.tape()) {
        throw InvariantError("values belong to different tapes");
    }
    return *a.tape();
}

inline Tape& tape_of(const Value& a) {
    if (a.tape() == nullptr) {
        throw InvariantError("value not bound to a tape");
    }
    return *a.tape();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

inline void require_vector(const Tensor& a, const char* op) {
    if (a.rank() != 1) {
        throw DimError(std::string(op) + ": expected vector, got " + a.shape_str());
    }
}

}  // namespace detail

// ----------------------------- elementwise ---------------------------------

inline Value add(Value a, Value b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    detail::require_same_shape(av, bv, "add");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += bv[i];
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ib = b.id(), ir = r.id();
    tape.set_rule(r, [ia, ib, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        Tensor& ga = t.grad_of(ia);
        Tensor& gb = t.grad_of(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
    return r;
}

inline Value sub(Value a, Value b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    detail::require_same_shape(av, bv, "sub");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= bv[i];
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ib = b.id(), ir = r.id();
    tape.set_rule(r, [ia, ib, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        Tensor& ga = t.grad_of(ia);
        Tensor& gb = t.grad_of(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
    return r;
}

inline Value mul(Value a, Value b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    detail::require_same_shape(av, bv, "mul");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= bv[i];
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ib = b.id(), ir = r.id();
    tape.set_rule(r, [ia, ib, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& av = t.value_of(ia);
        const Tensor& bv = t.value_of(ib);
        Tensor& ga = t.grad_of(ia);
        Tensor& gb = t.grad_of(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * bv[i];
            gb[i] += g[i] * av[i];
        }
    });
    return r;
}

inline Value scale(Value a, double c) {
    Tape& tape = detail::tape_of(a);
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= c;
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir, c](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * c;
        }
    });
    return r;
}

inline Value neg(Value a) { return scale(a, -1.0); }

inline Value tanh(Value a) {
    Tape& tape = detail::tape_of(a);
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::tanh(out[i]);
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& y = t.value_of(ir);
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * (1.0 - y[i] * y[i]);
        }
    });
    return r;
}

inline Value sigmoid(Value a) {
    Tape& tape = detail::tape_of(a);
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ctrlab::sigmoid(out[i]);
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& y = t.value_of(ir);
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * y[i] * (1.0 - y[i]);
        }
    });
    return r;
}

inline Value softplus(Value a) {
    Tape& tape = detail::tape_of(a);
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ctrlab::softplus(out[i]);
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& x = t.value_of(ia);
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * ctrlab::sigmoid(x[i]);
        }
    });
    return r;
}

inline Value exp(Value a) {
    Tape& tape = detail::tape_of(a);
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(out[i]);
    }
    out.validate();
    Value r = tape.append(std::move(out));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& y = t.value_of(ir);
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * y[i];
        }
    });
    return r;
}

inline Value log(Value a) {
    Tape& tape = detail::tape_of(a);
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::log(out[i]);
    }
    out.validate();
    Value r = tape.append(std::move(out));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& x = t.value_of(ia);
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] / x[i];
        }
    });
    return r;
}

// ----------------------------- linear algebra ------------------------------

inline Value matmul(Value a, Value b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
        throw DimError("matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
    }
    int m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            double aip = av.at(i, p);
            for (int j = 0; j < n; ++j) {
                out.at(i, j) += aip * bv.at(p, j);
            }
        }
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ib = b.id(), ir = r.id();
    tape.set_rule(r, [ia, ib, ir, m, k, n](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& av = t.value_of(ia);
        const Tensor& bv = t.value_of(ib);
        Tensor& ga = t.grad_of(ia);
        Tensor& gb = t.grad_of(ib);
        // dA = G B^T, dB = A^T G
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                double s = 0.0;
                for (int j = 0; j < n; ++j) {
                    s += g.at(i, j) * bv.at(p, j);
                }
                ga.at(i, p) += s;
            }
        }
        for (int p = 0; p < k; ++p) {
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int i = 0; i < m; ++i) {
                    s += av.at(i, p) * g.at(i, j);
                }
                gb.at(p, j) += s;
            }
        }
    });
    return r;
}

inline Value matvec(Value w, Value x) {
    Tape& tape = detail::same_tape(w, x);
    const Tensor& wv = w.val();
    const Tensor& xv = x.val();
    if (wv.rank() != 2 || xv.rank() != 1 || wv.cols() != xv.dim()) {
        throw DimError("matvec: incompatible shapes " + wv.shape_str() + " x " + xv.shape_str());
    }
    int m = wv.rows(), n = wv.cols();
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            s += wv.at(i, j) * xv[static_cast<std::size_t>(j)];
        }
        out[static_cast<std::size_t>(i)] = s;
    }
    Value r = tape.append(std::move(out));
    int iw = w.id(), ix = x.id(), ir = r.id();
    tape.set_rule(r, [iw, ix, ir, m, n](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& wv = t.value_of(iw);
        const Tensor& xv = t.value_of(ix);
        Tensor& gw = t.grad_of(iw);
        Tensor& gx = t.grad_of(ix);
        for (int i = 0; i < m; ++i) {
            double gi = g[static_cast<std::size_t>(i)];
            for (int j = 0; j < n; ++j) {
                gw.at(i, j) += gi * xv[static_cast<std::size_t>(j)];
                gx[static_cast<std::size_t>(j)] += gi * wv.at(i, j);
            }
        }
    });
    return r;
}

inline Value dot(Value a, Value b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    detail::require_same_shape(av, bv, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        s += av[i] * bv[i];
    }
    Value r = tape.append(Tensor::scalar(s));
    int ia = a.id(), ib = b.id(), ir = r.id();
    tape.set_rule(r, [ia, ib, ir](Tape& t) {
        double g = t.grad_of(ir)[0];
        const Tensor& av = t.value_of(ia);
        const Tensor& bv = t.value_of(ib);
        Tensor& ga = t.grad_of(ia);
        Tensor& gb = t.grad_of(ib);
        for (std::size_t i = 0; i < av.size(); ++i) {
            ga[i] += g * bv[i];
            gb[i] += g * av[i];
        }
    });
    return r;
}

// ----------------------------- reductions ----------------------------------

inline Value sum(Value a) {
    Tape& tape = detail::tape_of(a);
    const Tensor& av = a.val();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        s += av[i];
    }
    Value r = tape.append(Tensor::scalar(s));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        double g = t.grad_of(ir)[0];
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += g;
        }
    });
    return r;
}

inline Value mean(Value a) {
    Tape& tape = detail::tape_of(a);
    const Tensor& av = a.val();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        s += av[i];
    }
    double inv = 1.0 / static_cast<double>(av.size());
    Value r = tape.append(Tensor::scalar(s * inv));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir, inv](Tape& t) {
        double g = t.grad_of(ir)[0] * inv;
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += g;
        }
    });
    return r;
}

/// Sum of squared entries.
inline Value sumsq(Value a) {
    Tape& tape = detail::tape_of(a);
    const Tensor& av = a.val();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        s += av[i] * av[i];
    }
    Value r = tape.append(Tensor::scalar(s));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        double g = t.grad_of(ir)[0];
        const Tensor& av = t.value_of(ia);
        Tensor& ga = t.grad_of(ia);
        for (std::size_t i = 0; i < av.size(); ++i) {
            ga[i] += 2.0 * g * av[i];
        }
    });
    return r;
}

// ----------------------------- softmax family ------------------------------

/// Max-subtraction stabilized softmax over a vector.
inline Value softmax(Value a) {
    Tape& tape = detail::tape_of(a);
    const Tensor& av = a.val();
    detail::require_vector(av, "softmax");
    double mx = av[0];
    for (std::size_t i = 1; i < av.size(); ++i) {
        mx = std::max(mx, av[i]);
    }
    Tensor out(av.shape());
    double z = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = std::exp(av[i] - mx);
        z += out[i];
    }
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] /= z;
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& p = t.value_of(ir);
        Tensor& ga = t.grad_of(ia);
        double gp = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            gp += g[i] * p[i];
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            ga[i] += p[i] * (g[i] - gp);
        }
    });
    return r;
}

inline Value log_softmax(Value a) {
    Tape& tape = detail::tape_of(a);
    const Tensor& av = a.val();
    detail::require_vector(av, "log_softmax");
    double mx = av[0];
    for (std::size_t i = 1; i < av.size(); ++i) {
        mx = std::max(mx, av[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        z += std::exp(av[i] - mx);
    }
    double lz = mx + std::log(z);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = av[i] - lz;
    }
    Value r = tape.append(std::move(out));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        const Tensor& y = t.value_of(ir);
        Tensor& ga = t.grad_of(ia);
        double gs = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            gs += g[i];
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] - std::exp(y[i]) * gs;
        }
    });
    return r;
}

// ----------------------------- indexing ------------------------------------

inline Value pick(Value a, int index) {
    Tape& tape = detail::tape_of(a);
    const Tensor& av = a.val();
    detail::require_vector(av, "pick");
    if (index < 0 || index >= av.dim()) {
        throw DimError("pick: index out of range");
    }
    Value r = tape.append(Tensor::scalar(av[static_cast<std::size_t>(index)]));
    int ia = a.id(), ir = r.id();
    tape.set_rule(r, [ia, ir, index](Tape& t) {
        t.grad_of(ia)[static_cast<std::size_t>(index)] += t.grad_of(ir)[0];
    });
    return r;
}

/// Row of a matrix as a vector (embedding lookup).
inline Value row(Value m, int index) {
    Tape& tape = detail::tape_of(m);
    const Tensor& mv = m.val();
    if (mv.rank() != 2) {
        throw DimError("row: expected matrix");
    }
    if (index < 0 || index >= mv.rows()) {
        throw DimError("row: index out of range");
    }
    int n = mv.cols();
    Tensor out({n});
    for (int j = 0; j < n; ++j) {
        out[static_cast<std::size_t>(j)] = mv.at(index, j);
    }
    Value r = tape.append(std::move(out));
    int im = m.id(), ir = r.id();
    tape.set_rule(r, [im, ir, index, n](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        Tensor& gm = t.grad_of(im);
        for (int j = 0; j < n; ++j) {
            gm.at(index, j) += g[static_cast<std::size_t>(j)];
        }
    });
    return r;
}

inline Value concat(std::span<const Value> parts) {
    if (parts.empty()) {
        throw DimError("concat: empty input");
    }
    Tape& tape = detail::tape_of(parts[0]);
    int total = 0;
    for (const Value& p : parts) {
        detail::require_vector(p.val(), "concat");
        if (p.tape() != &tape) {
            throw InvariantError("concat: values belong to different tapes");
        }
        total += p.val().dim();
    }
    Tensor out({total});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<int> sizes;
    for (const Value& p : parts) {
        const Tensor& pv = p.val();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            out[off + i] = pv[i];
        }
        off += pv.size();
        ids.push_back(p.id());
        sizes.push_back(pv.dim());
    }
    Value r = tape.append(std::move(out));
    int ir = r.id();
    tape.set_rule(r, [ids, sizes, ir](Tape& t) {
        const Tensor& g = t.grad_of(ir);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            Tensor& gp = t.grad_of(ids[k]);
            for (int i = 0; i < sizes[k]; ++i) {
                gp[static_cast<std::size_t>(i)] += g[off + static_cast<std::size_t>(i)];
            }
            off += static_cast<std::size_t>(sizes[k]);
        }
    });
    return r;
}

inline Value concat(std::initializer_list<Value> parts) {
    std::vector<Value> v(parts);
    return concat(std::span<const Value>(v));
}

/// W x + b.
inline Value affine(Value w, Value x, Value b) { return add(matvec(w, x), b); }

}  // namespace ctrlab::ad
