#ifndef HSRDIFF_TENSOR_HPP
#define HSRDIFF_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "hsrdiff/errors.hpp"
#include "hsrdiff/rng.hpp"

namespace hsrdiff {

using shape_t = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const shape_t& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const shape_t& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace detail {

inline thread_local bool g_autograd_enabled = true;

}  // namespace detail

// RAII guard disabling graph recording; used by samplers and metrics.
struct no_grad_guard {
    bool prev;
    no_grad_guard() : prev(detail::g_autograd_enabled) { detail::g_autograd_enabled = false; }
    ~no_grad_guard() { detail::g_autograd_enabled = prev; }
    no_grad_guard(const no_grad_guard&) = delete;
    no_grad_guard& operator=(const no_grad_guard&) = delete;
};

template <class R>
struct tensor_node {
    shape_t shape;
    std::vector<R> value;
    std::vector<R> grad;  // sized lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<tensor_node<R>>> parents;
    std::function<void(tensor_node<R>&)> backprop;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

    std::vector<R>& grad_buf() {
        if (grad.size() != value.size()) grad.assign(value.size(), R(0));
        return grad;
    }
};

// Value-semantics handle onto a graph node. Copies share the node.
template <class R>
class tensor {
public:
    using node_t = tensor_node<R>;
    using node_ptr = std::shared_ptr<node_t>;

    tensor() = default;
    explicit tensor(node_ptr n) : n_(std::move(n)) {}

    static tensor zeros(shape_t shape) { return filled(std::move(shape), R(0)); }

    static tensor filled(shape_t shape, R v) {
        auto n = std::make_shared<node_t>();
        n->value.assign(static_cast<std::size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        return tensor(std::move(n));
    }

    static tensor from(shape_t shape, std::vector<R> data) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw shape_error(detail::concat("tensor::from: shape ", shape_str(shape),
                                             " does not match data length ", data.size()));
        auto n = std::make_shared<node_t>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return tensor(std::move(n));
    }

    static tensor scalar(R v) { return from({}, {v}); }

    // Leaf with requires_grad set; the unit of optimization.
    static tensor param(shape_t shape, std::vector<R> data) {
        tensor t = from(std::move(shape), std::move(data));
        t.n_->requires_grad = true;
        return t;
    }

    static tensor randn(shape_t shape, rng& gen) {
        auto n = std::make_shared<node_t>();
        const auto count = static_cast<std::size_t>(shape_numel(shape));
        n->shape = std::move(shape);
        n->value.resize(count);
        for (auto& v : n->value) v = static_cast<R>(gen.normal());
        return tensor(std::move(n));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const shape_t& shape() const { return n_->shape; }
    std::int64_t numel() const { return n_->numel(); }
    std::int64_t dim(std::size_t i) const { return n_->shape[i]; }
    std::size_t rank() const { return n_->shape.size(); }
    bool requires_grad() const { return n_->requires_grad; }

    const std::vector<R>& value() const { return n_->value; }
    std::vector<R>& mutable_value() { return n_->value; }
    const std::vector<R>& grad() const { return n_->grad; }

    R item() const {
        if (numel() != 1) throw shape_error("item() requires a single-element tensor");
        return n_->value[0];
    }

    void clear_grad() { n_->grad.clear(); }

    node_ptr node() const { return n_; }

    // Reverse-mode sweep from a scalar. Gradients accumulate additively into
    // every reachable node with requires_grad, leaves included.
    void backward() const {
        if (numel() != 1)
            throw shape_error("backward() may only be called on a scalar loss");
        // iterative DFS post-order
        std::vector<node_t*> order;
        std::unordered_set<node_t*> visited;
        std::vector<std::pair<node_t*, std::size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        visited.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                node_t* p = node->parents[idx++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->grad_buf()[0] += R(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            node_t* node = *it;
            if (!node->backprop) continue;
            // a node may legitimately receive zero writes (e.g. through an
            // all-zero kernel); its backprop still needs a zeroed buffer
            node->grad_buf();
            node->backprop(*node);
        }
    }

private:
    node_ptr n_;
};

namespace detail {

template <class R>
tensor<R> make_op(shape_t shape, std::vector<R> value,
                  std::vector<std::shared_ptr<tensor_node<R>>> parents,
                  std::function<void(tensor_node<R>&)> backprop) {
    auto n = std::make_shared<tensor_node<R>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (g_autograd_enabled) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p->requires_grad;
        if (needs) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(backprop);
        }
    }
    return tensor<R>(std::move(n));
}

template <class R>
void check_same_shape(const tensor<R>& a, const tensor<R>& b, const char* op) {
    if (a.shape() != b.shape())
        throw shape_error(detail::concat(op, ": shape mismatch ", shape_str(a.shape()),
                                         " vs ", shape_str(b.shape())));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class R>
tensor<R> add(const tensor<R>& a, const tensor<R>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<R> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return detail::make_op<R>(a.shape(), std::move(out), {a.node(), b.node()},
        [](tensor_node<R>& self) {
            for (int k = 0; k < 2; ++k) {
                auto& p = *self.parents[k];
                if (!p.requires_grad) continue;
                auto& g = p.grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        });
}

template <class R>
tensor<R> sub(const tensor<R>& a, const tensor<R>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<R> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return detail::make_op<R>(a.shape(), std::move(out), {a.node(), b.node()},
        [](tensor_node<R>& self) {
            if (self.parents[0]->requires_grad) {
                auto& g = self.parents[0]->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (self.parents[1]->requires_grad) {
                auto& g = self.parents[1]->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        });
}

template <class R>
tensor<R> mul(const tensor<R>& a, const tensor<R>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<R> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return detail::make_op<R>(a.shape(), std::move(out), {a.node(), b.node()},
        [](tensor_node<R>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                auto& g = pa.grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
            }
        });
}

template <class R>
tensor<R> scale(const tensor<R>& a, double c) {
    std::vector<R> out(a.value().size());
    const R cr = static_cast<R>(c);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * cr;
    return detail::make_op<R>(a.shape(), std::move(out), {a.node()},
        [cr](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * cr;
        });
}

template <class R>
tensor<R> add_scalar(const tensor<R>& a, double c) {
    std::vector<R> out(a.value().size());
    const R cr = static_cast<R>(c);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + cr;
    return detail::make_op<R>(a.shape(), std::move(out), {a.node()},
        [](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
}

template <class R>
tensor<R> neg(const tensor<R>& a) { return scale(a, -1.0); }

// |x| with subgradient 0 at exact zero
template <class R>
tensor<R> abs_val(const tensor<R>& a) {
    std::vector<R> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.value()[i]);
    return detail::make_op<R>(a.shape(), std::move(out), {a.node()},
        [](tensor_node<R>& self) {
            auto& p = *self.parents[0];
            auto& g = p.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const R x = p.value[i];
                g[i] += self.grad[i] * (x > R(0) ? R(1) : (x < R(0) ? R(-1) : R(0)));
            }
        });
}

template <class R>
tensor<R> gelu(const tensor<R>& a) {
    std::vector<R> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = static_cast<double>(a.value()[i]);
        out[i] = static_cast<R>(0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)));
    }
    return detail::make_op<R>(a.shape(), std::move(out), {a.node()},
        [](tensor_node<R>& self) {
            auto& p = *self.parents[0];
            auto& g = p.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double x = static_cast<double>(p.value[i]);
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
                const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
                g[i] += self.grad[i] * static_cast<R>(cdf + x * pdf);
            }
        });
}

template <class R>
tensor<R> silu(const tensor<R>& a) {
    std::vector<R> out(a.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = static_cast<double>(a.value()[i]);
        out[i] = static_cast<R>(x / (1.0 + std::exp(-x)));
    }
    return detail::make_op<R>(a.shape(), std::move(out), {a.node()},
        [](tensor_node<R>& self) {
            auto& p = *self.parents[0];
            auto& g = p.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double x = static_cast<double>(p.value[i]);
                const double s = 1.0 / (1.0 + std::exp(-x));
                g[i] += self.grad[i] * static_cast<R>(s * (1.0 + x * (1.0 - s)));
            }
        });
}

// ------------------------------------------------------- row/column broadcast
// x viewed as (M, N) with M = shape[0] of a rank-2 tensor. Rows carry one
// bias/scale entry each; columns the transposed convention.

namespace detail {

template <class R>
void check_rank2(const tensor<R>& x, const char* op) {
    if (x.rank() != 2) throw shape_error(detail::concat(op, ": expected rank-2, got ", shape_str(x.shape())));
}

}  // namespace detail

template <class R>
tensor<R> add_rows(const tensor<R>& x, const tensor<R>& b) {
    detail::check_rank2(x, "add_rows");
    if (b.rank() != 1 || b.dim(0) != x.dim(0))
        throw shape_error("add_rows: bias length must equal row count");
    const std::int64_t M = x.dim(0), N = x.dim(1);
    std::vector<R> out(x.value().size());
    for (std::int64_t i = 0; i < M; ++i) {
        const R bi = b.value()[i];
        for (std::int64_t j = 0; j < N; ++j) out[i * N + j] = x.value()[i * N + j] + bi;
    }
    return detail::make_op<R>(x.shape(), std::move(out), {x.node(), b.node()},
        [M, N](tensor_node<R>& self) {
            if (self.parents[0]->requires_grad) {
                auto& g = self.parents[0]->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (self.parents[1]->requires_grad) {
                auto& g = self.parents[1]->grad_buf();
                for (std::int64_t i = 0; i < M; ++i) {
                    R acc = R(0);
                    for (std::int64_t j = 0; j < N; ++j) acc += self.grad[i * N + j];
                    g[i] += acc;
                }
            }
        });
}

template <class R>
tensor<R> mul_rows(const tensor<R>& x, const tensor<R>& s) {
    detail::check_rank2(x, "mul_rows");
    if (s.rank() != 1 || s.dim(0) != x.dim(0))
        throw shape_error("mul_rows: scale length must equal row count");
    const std::int64_t M = x.dim(0), N = x.dim(1);
    std::vector<R> out(x.value().size());
    for (std::int64_t i = 0; i < M; ++i) {
        const R si = s.value()[i];
        for (std::int64_t j = 0; j < N; ++j) out[i * N + j] = x.value()[i * N + j] * si;
    }
    return detail::make_op<R>(x.shape(), std::move(out), {x.node(), s.node()},
        [M, N](tensor_node<R>& self) {
            auto& px = *self.parents[0];
            auto& ps = *self.parents[1];
            if (px.requires_grad) {
                auto& g = px.grad_buf();
                for (std::int64_t i = 0; i < M; ++i) {
                    const R si = ps.value[i];
                    for (std::int64_t j = 0; j < N; ++j) g[i * N + j] += self.grad[i * N + j] * si;
                }
            }
            if (ps.requires_grad) {
                auto& g = ps.grad_buf();
                for (std::int64_t i = 0; i < M; ++i) {
                    R acc = R(0);
                    for (std::int64_t j = 0; j < N; ++j)
                        acc += self.grad[i * N + j] * px.value[i * N + j];
                    g[i] += acc;
                }
            }
        });
}

template <class R>
tensor<R> add_cols(const tensor<R>& x, const tensor<R>& b) {
    detail::check_rank2(x, "add_cols");
    if (b.rank() != 1 || b.dim(0) != x.dim(1))
        throw shape_error("add_cols: bias length must equal column count");
    const std::int64_t M = x.dim(0), N = x.dim(1);
    std::vector<R> out(x.value().size());
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j) out[i * N + j] = x.value()[i * N + j] + b.value()[j];
    return detail::make_op<R>(x.shape(), std::move(out), {x.node(), b.node()},
        [M, N](tensor_node<R>& self) {
            if (self.parents[0]->requires_grad) {
                auto& g = self.parents[0]->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (self.parents[1]->requires_grad) {
                auto& g = self.parents[1]->grad_buf();
                for (std::int64_t i = 0; i < M; ++i)
                    for (std::int64_t j = 0; j < N; ++j) g[j] += self.grad[i * N + j];
            }
        });
}

// ------------------------------------------------------------------ reductions

template <class R>
tensor<R> sum_all(const tensor<R>& a) {
    R acc = R(0);
    for (R v : a.value()) acc += v;
    return detail::make_op<R>({}, {acc}, {a.node()},
        [](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            const R go = self.grad[0];
            for (auto& v : g) v += go;
        });
}

template <class R>
tensor<R> mean_all(const tensor<R>& a) {
    if (a.numel() == 0) throw shape_error("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

namespace detail {

// Decompose a shape around `axis` into (outer, axis_len, inner) strides.
inline void axis_split(const shape_t& s, int axis, std::int64_t& outer,
                       std::int64_t& len, std::int64_t& inner) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw shape_error(detail::concat("axis ", axis, " out of range for ", shape_str(s)));
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline shape_t drop_axis(const shape_t& s, int axis) {
    shape_t out;
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
        if (i != axis) out.push_back(s[i]);
    return out;
}

}  // namespace detail

template <class R>
tensor<R> reduce_sum(const tensor<R>& a, int axis) {
    std::int64_t outer, len, inner;
    detail::axis_split(a.shape(), axis, outer, len, inner);
    std::vector<R> out(static_cast<std::size_t>(outer * inner), R(0));
    const auto& v = a.value();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < len; ++k)
            for (std::int64_t i = 0; i < inner; ++i)
                out[o * inner + i] += v[(o * len + k) * inner + i];
    return detail::make_op<R>(detail::drop_axis(a.shape(), axis), std::move(out), {a.node()},
        [outer, len, inner](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t k = 0; k < len; ++k)
                    for (std::int64_t i = 0; i < inner; ++i)
                        g[(o * len + k) * inner + i] += self.grad[o * inner + i];
        });
}

template <class R>
tensor<R> reduce_mean(const tensor<R>& a, int axis) {
    std::int64_t outer, len, inner;
    detail::axis_split(a.shape(), axis, outer, len, inner);
    return scale(reduce_sum(a, axis), 1.0 / static_cast<double>(len));
}

// Gradient routes to the first maximal element along the axis.
template <class R>
tensor<R> reduce_max(const tensor<R>& a, int axis) {
    std::int64_t outer, len, inner;
    detail::axis_split(a.shape(), axis, outer, len, inner);
    std::vector<R> out(static_cast<std::size_t>(outer * inner));
    const auto& v = a.value();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            R best = v[(o * len) * inner + i];
            for (std::int64_t k = 1; k < len; ++k)
                best = std::max(best, v[(o * len + k) * inner + i]);
            out[o * inner + i] = best;
        }
    return detail::make_op<R>(detail::drop_axis(a.shape(), axis), std::move(out), {a.node()},
        [outer, len, inner](tensor_node<R>& self) {
            auto& p = *self.parents[0];
            auto& g = p.grad_buf();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < inner; ++i) {
                    std::int64_t arg = 0;
                    R best = p.value[(o * len) * inner + i];
                    for (std::int64_t k = 1; k < len; ++k) {
                        const R v = p.value[(o * len + k) * inner + i];
                        if (v > best) { best = v; arg = k; }
                    }
                    g[(o * len + arg) * inner + i] += self.grad[o * inner + i];
                }
        });
}

// ------------------------------------------------------------- shape movement

template <class R>
tensor<R> reshape(const tensor<R>& a, shape_t shape) {
    if (shape_numel(shape) != a.numel())
        throw shape_error(detail::concat("reshape: cannot view ", shape_str(a.shape()),
                                         " as ", shape_str(shape)));
    return detail::make_op<R>(std::move(shape), a.value(), {a.node()},
        [](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
}

template <class R>
tensor<R> permute(const tensor<R>& a, const std::vector<int>& perm) {
    const auto& s = a.shape();
    if (perm.size() != s.size()) throw shape_error("permute: rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    shape_t out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] < 0 || perm[i] >= static_cast<int>(s.size()) || seen[perm[i]])
            throw shape_error("permute: invalid axis permutation");
        seen[perm[i]] = true;
        out_shape[i] = s[perm[i]];
    }
    const std::size_t rank = s.size();
    std::vector<std::int64_t> in_strides(rank, 1), out_strides(rank, 1);
    for (int i = static_cast<int>(rank) - 2; i >= 0; --i)
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    for (int i = static_cast<int>(rank) - 2; i >= 0; --i)
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

    const std::int64_t n = a.numel();
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(rank, 0);
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t src = 0;
        for (std::size_t d = 0; d < rank; ++d) src += idx[d] * in_strides[perm[d]];
        (*map)[lin] = src;
        for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<R> out(static_cast<std::size_t>(n));
    const auto& v = a.value();
    for (std::int64_t i = 0; i < n; ++i) out[i] = v[(*map)[i]];
    return detail::make_op<R>(std::move(out_shape), std::move(out), {a.node()},
        [map](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += self.grad[i];
        });
}

// rank-2 transpose
template <class R>
tensor<R> transpose(const tensor<R>& a) {
    detail::check_rank2(a, "transpose");
    return permute(a, {1, 0});
}

// swap the last two axes of a batched matrix stack
template <class R>
tensor<R> transpose_last2(const tensor<R>& a) {
    std::vector<int> perm(a.rank());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
}

template <class R>
tensor<R> concat(const std::vector<tensor<R>>& parts, int axis) {
    if (parts.empty()) throw shape_error("concat: no inputs");
    const auto& s0 = parts[0].shape();
    std::int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != s0.size()) throw shape_error("concat: rank mismatch");
        for (std::size_t d = 0; d < s0.size(); ++d)
            if (static_cast<int>(d) != axis && p.shape()[d] != s0[d])
                throw shape_error("concat: non-axis dimensions must agree");
        axis_total += p.shape()[axis];
    }
    shape_t out_shape = s0;
    out_shape[axis] = axis_total;
    std::int64_t outer, len, inner;
    detail::axis_split(out_shape, axis, outer, len, inner);

    std::vector<R> out(static_cast<std::size_t>(outer * len * inner));
    std::vector<std::int64_t> lens;
    std::vector<std::shared_ptr<tensor_node<R>>> parents;
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t plen = p.shape()[axis];
        const auto& v = p.value();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(v.begin() + o * plen * inner, v.begin() + (o + 1) * plen * inner,
                      out.begin() + (o * len + offset) * inner);
        offset += plen;
        lens.push_back(plen);
        parents.push_back(p.node());
    }
    return detail::make_op<R>(std::move(out_shape), std::move(out), std::move(parents),
        [outer, len, inner, lens](tensor_node<R>& self) {
            std::int64_t off = 0;
            for (std::size_t k = 0; k < lens.size(); ++k) {
                auto& p = *self.parents[k];
                const std::int64_t plen = lens[k];
                if (p.requires_grad) {
                    auto& g = p.grad_buf();
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t i = 0; i < plen * inner; ++i)
                            g[o * plen * inner + i] += self.grad[(o * len + off) * inner + i];
                }
                off += plen;
            }
        });
}

template <class R>
std::vector<tensor<R>> split(const tensor<R>& a, int axis, const std::vector<std::int64_t>& sizes) {
    std::int64_t outer, len, inner;
    detail::axis_split(a.shape(), axis, outer, len, inner);
    std::int64_t total = 0;
    for (auto s : sizes) total += s;
    if (total != len) throw shape_error("split: sizes do not cover axis");
    std::vector<tensor<R>> outs;
    std::int64_t offset = 0;
    for (auto plen : sizes) {
        shape_t os = a.shape();
        os[axis] = plen;
        std::vector<R> out(static_cast<std::size_t>(outer * plen * inner));
        const auto& v = a.value();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(v.begin() + (o * len + offset) * inner,
                      v.begin() + (o * len + offset + plen) * inner,
                      out.begin() + o * plen * inner);
        const std::int64_t off = offset;
        outs.push_back(detail::make_op<R>(std::move(os), std::move(out), {a.node()},
            [outer, len, inner, plen, off](tensor_node<R>& self) {
                auto& g = self.parents[0]->grad_buf();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < plen * inner; ++i)
                        g[(o * len + off) * inner + i] += self.grad[o * plen * inner + i];
            }));
        offset += plen;
    }
    return outs;
}

// contiguous sub-block, any rank
template <class R>
tensor<R> slice(const tensor<R>& a, const std::vector<std::int64_t>& starts,
                const shape_t& sizes) {
    const auto& s = a.shape();
    if (starts.size() != s.size() || sizes.size() != s.size())
        throw shape_error("slice: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
        if (starts[d] < 0 || sizes[d] < 1 || starts[d] + sizes[d] > s[d])
            throw shape_error(detail::concat("slice: window out of bounds on axis ", d));
    const std::size_t rank = s.size();
    std::vector<std::int64_t> in_strides(rank, 1);
    for (int i = static_cast<int>(rank) - 2; i >= 0; --i)
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    const std::int64_t n = shape_numel(sizes);
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(rank, 0);
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t src = 0;
        for (std::size_t d = 0; d < rank; ++d) src += (starts[d] + idx[d]) * in_strides[d];
        (*map)[lin] = src;
        for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
            if (++idx[d] < sizes[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<R> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[(*map)[i]];
    return detail::make_op<R>(sizes, std::move(out), {a.node()},
        [map](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += self.grad[i];
        });
}

// ---------------------------------------------------------------------- matmul

namespace detail {

template <class R>
void mm_accum(const R* a, const R* b, R* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t i = 0; i < M; ++i) {
        R* crow = c + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const R aik = a[i * K + k];
            const R* brow = b + k * N;
            for (std::int64_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C += A * B^T
template <class R>
void mm_accum_bt(const R* a, const R* bt, R* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t i = 0; i < M; ++i) {
        for (std::int64_t j = 0; j < N; ++j) {
            R acc = R(0);
            const R* arow = a + i * K;
            const R* brow = bt + j * K;
            for (std::int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            c[i * N + j] += acc;
        }
    }
}

// C += A^T * B  (A is K x M)
template <class R>
void mm_accum_at(const R* at, const R* b, R* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t k = 0; k < K; ++k) {
        const R* arow = at + k * M;
        const R* brow = b + k * N;
        for (std::int64_t i = 0; i < M; ++i) {
            const R aki = arow[i];
            R* crow = c + i * N;
            for (std::int64_t j = 0; j < N; ++j) crow[j] += aki * brow[j];
        }
    }
}

}  // namespace detail

// Batched matrix product. Leading dimensions must match exactly, or `b` may be
// rank-2 and is then shared across the batch.
template <class R>
tensor<R> matmul(const tensor<R>& a, const tensor<R>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw shape_error("matmul: operands must have rank >= 2");
    const std::int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
    const std::int64_t Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
    if (K != Kb)
        throw shape_error(detail::concat("matmul: inner dimensions disagree, ",
                                         shape_str(sa), " vs ", shape_str(sb)));
    const bool b_shared = (sb.size() == 2 && sa.size() > 2);
    if (!b_shared && sa.size() != sb.size())
        throw shape_error("matmul: batch ranks disagree");
    std::int64_t batch = 1;
    for (std::size_t d = 0; d + 2 < sa.size(); ++d) {
        if (!b_shared && sa[d] != sb[d])
            throw shape_error("matmul: batch dimensions disagree");
        batch *= sa[d];
    }
    shape_t out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(M);
    out_shape.push_back(N);

    std::vector<R> out(static_cast<std::size_t>(batch * M * N), R(0));
    const R* pa = a.value().data();
    const R* pb = b.value().data();
    for (std::int64_t t = 0; t < batch; ++t)
        detail::mm_accum(pa + t * M * K, b_shared ? pb : pb + t * K * N,
                         out.data() + t * M * N, M, K, N);

    return detail::make_op<R>(std::move(out_shape), std::move(out), {a.node(), b.node()},
        [M, K, N, batch, b_shared](tensor_node<R>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                auto& ga = pa.grad_buf();
                for (std::int64_t t = 0; t < batch; ++t)
                    detail::mm_accum_bt(self.grad.data() + t * M * N,
                                        pb.value.data() + (b_shared ? 0 : t * K * N),
                                        ga.data() + t * M * K, M, N, K);
            }
            if (pb.requires_grad) {
                auto& gb = pb.grad_buf();
                for (std::int64_t t = 0; t < batch; ++t)
                    detail::mm_accum_at(pa.value.data() + t * M * K,
                                        self.grad.data() + t * M * N,
                                        gb.data() + (b_shared ? 0 : t * K * N), K, M, N);
            }
        });
}

// --------------------------------------------------------- softmax / layernorm

// Softmax along the last axis, max-subtracted so finite inputs cannot overflow.
template <class R>
tensor<R> softmax_last(const tensor<R>& a) {
    if (a.rank() < 1) throw shape_error("softmax: rank must be >= 1");
    const std::int64_t N = a.shape().back();
    const std::int64_t rows = a.numel() / N;
    std::vector<R> out(a.value().size());
    const auto& v = a.value();
    for (std::int64_t r = 0; r < rows; ++r) {
        const R* x = v.data() + r * N;
        R* y = out.data() + r * N;
        R mx = x[0];
        for (std::int64_t j = 1; j < N; ++j) mx = std::max(mx, x[j]);
        R denom = R(0);
        for (std::int64_t j = 0; j < N; ++j) {
            y[j] = std::exp(x[j] - mx);
            denom += y[j];
        }
        const R inv = R(1) / denom;
        for (std::int64_t j = 0; j < N; ++j) y[j] *= inv;
    }
    return detail::make_op<R>(a.shape(), std::move(out), {a.node()},
        [N, rows](tensor_node<R>& self) {
            // dx = y * (g - sum(g*y)) along the axis
            auto& g = self.parents[0]->grad_buf();
            const auto& yv = self.value;  // softmax output lives in self.value
            for (std::int64_t r = 0; r < rows; ++r) {
                const R* yr = yv.data() + r * N;
                const R* gr = self.grad.data() + r * N;
                R dot = R(0);
                for (std::int64_t j = 0; j < N; ++j) dot += gr[j] * yr[j];
                R* go = g.data() + r * N;
                for (std::int64_t j = 0; j < N; ++j) go[j] += yr[j] * (gr[j] - dot);
            }
        });
}

template <class R>
tensor<R> softmax(const tensor<R>& a, int axis) {
    const int rank = static_cast<int>(a.rank());
    if (axis < 0 || axis >= rank)
        throw shape_error(detail::concat("softmax: axis ", axis, " out of range"));
    if (axis == rank - 1) return softmax_last(a);
    std::vector<int> to_last, back(rank);
    for (int i = 0; i < rank; ++i)
        if (i != axis) to_last.push_back(i);
    to_last.push_back(axis);
    for (int i = 0; i < rank; ++i) back[to_last[i]] = i;
    return permute(softmax_last(permute(a, to_last)), back);
}

// Layer norm over the last axis of (M, N): each row normalized to zero mean &
// unit variance (eps = 1e-5), then per-column affine gain/bias.
template <class R>
tensor<R> layer_norm_rows(const tensor<R>& x, const tensor<R>& gain, const tensor<R>& bias) {
    detail::check_rank2(x, "layer_norm_rows");
    const std::int64_t M = x.dim(0), N = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != N || bias.rank() != 1 || bias.dim(0) != N)
        throw shape_error("layer_norm_rows: affine parameters must have length N");
    constexpr double eps = 1e-5;
    std::vector<R> out(x.value().size());
    auto stats = std::make_shared<std::vector<R>>(static_cast<std::size_t>(2 * M));
    const auto& v = x.value();
    for (std::int64_t i = 0; i < M; ++i) {
        const R* row = v.data() + i * N;
        double mean = 0;
        for (std::int64_t j = 0; j < N; ++j) mean += row[j];
        mean /= N;
        double var = 0;
        for (std::int64_t j = 0; j < N; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= N;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * i] = static_cast<R>(mean);
        (*stats)[2 * i + 1] = static_cast<R>(inv);
        R* y = out.data() + i * N;
        for (std::int64_t j = 0; j < N; ++j)
            y[j] = static_cast<R>((row[j] - mean) * inv) * gain.value()[j] + bias.value()[j];
    }
    return detail::make_op<R>(x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
        [M, N, stats](tensor_node<R>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            for (std::int64_t i = 0; i < M; ++i) {
                const R mean = (*stats)[2 * i];
                const R inv = (*stats)[2 * i + 1];
                const R* xrow = px.value.data() + i * N;
                const R* grow = self.grad.data() + i * N;
                if (pb.requires_grad) {
                    auto& gb = pb.grad_buf();
                    for (std::int64_t j = 0; j < N; ++j) gb[j] += grow[j];
                }
                if (pg.requires_grad) {
                    auto& gg = pg.grad_buf();
                    for (std::int64_t j = 0; j < N; ++j)
                        gg[j] += grow[j] * (xrow[j] - mean) * inv;
                }
                if (px.requires_grad) {
                    // dL/dxhat_j = g_j * gain_j; then standard LN backward
                    R sum_gh = R(0), sum_ghx = R(0);
                    for (std::int64_t j = 0; j < N; ++j) {
                        const R gh = grow[j] * pg.value[j];
                        sum_gh += gh;
                        sum_ghx += gh * (xrow[j] - mean) * inv;
                    }
                    auto& gx = px.grad_buf();
                    const R invN = R(1) / static_cast<R>(N);
                    for (std::int64_t j = 0; j < N; ++j) {
                        const R xhat = (xrow[j] - mean) * inv;
                        const R gh = grow[j] * pg.value[j];
                        gx[i * N + j] += inv * (gh - invN * sum_gh - xhat * invN * sum_ghx);
                    }
                }
            }
        });
}

// General-axis layer norm; permutes the chosen axis to the back.
template <class R>
tensor<R> layer_norm(const tensor<R>& x, const tensor<R>& gain, const tensor<R>& bias, int axis) {
    const int rank = static_cast<int>(x.rank());
    if (axis < 0 || axis >= rank)
        throw shape_error(detail::concat("layer_norm: axis ", axis, " out of range"));
    const std::int64_t N = x.shape()[axis];
    if (axis == rank - 1) {
        auto flat = reshape(x, {x.numel() / N, N});
        return reshape(layer_norm_rows(flat, gain, bias), x.shape());
    }
    std::vector<int> to_last, back(rank);
    for (int i = 0; i < rank; ++i)
        if (i != axis) to_last.push_back(i);
    to_last.push_back(axis);
    for (int i = 0; i < rank; ++i) back[to_last[i]] = i;
    auto moved = permute(x, to_last);
    auto flat = reshape(moved, {moved.numel() / N, N});
    auto normed = layer_norm_rows(flat, gain, bias);
    return permute(reshape(normed, moved.shape()), back);
}

// Rows of an (..., N) tensor scaled to unit L2 norm along the last axis.
template <class R>
tensor<R> l2_normalize_last(const tensor<R>& x) {
    const std::int64_t N = x.shape().back();
    const std::int64_t rows = x.numel() / N;
    constexpr double eps = 1e-12;
    std::vector<R> out(x.value().size());
    auto inv_norms = std::make_shared<std::vector<R>>(static_cast<std::size_t>(rows));
    const auto& v = x.value();
    for (std::int64_t r = 0; r < rows; ++r) {
        const R* row = v.data() + r * N;
        double ss = 0;
        for (std::int64_t j = 0; j < N; ++j) ss += static_cast<double>(row[j]) * row[j];
        const double inv = 1.0 / std::sqrt(ss + eps);
        (*inv_norms)[r] = static_cast<R>(inv);
        for (std::int64_t j = 0; j < N; ++j) out[r * N + j] = static_cast<R>(row[j] * inv);
    }
    return detail::make_op<R>(x.shape(), std::move(out), {x.node()},
        [N, rows, inv_norms](tensor_node<R>& self) {
            auto& p = *self.parents[0];
            auto& g = p.grad_buf();
            for (std::int64_t r = 0; r < rows; ++r) {
                const R inv = (*inv_norms)[r];
                const R* y = self.value.data() + r * N;
                const R* go = self.grad.data() + r * N;
                R dot = R(0);
                for (std::int64_t j = 0; j < N; ++j) dot += go[j] * y[j];
                for (std::int64_t j = 0; j < N; ++j)
                    g[r * N + j] += inv * (go[j] - y[j] * dot);
            }
        });
}

}  // namespace hsrdiff

#endif  // HSRDIFF_TENSOR_HPP
