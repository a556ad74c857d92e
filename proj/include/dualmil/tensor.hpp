#pragma once

// Dense row-major tensors of doubles with define-by-run reverse-mode
// differentiation. Every op builds a fresh graph node; a Tape is recorded from
// the loss at backward time and discarded afterwards.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualmil/errors.hpp"

namespace dualmil {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized iff requires_grad
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward;  // pushes this->grad into parents
    const char* op = "leaf";
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline void check_finite(std::span<const double> xs, const char* op, const char* what) {
    for (double x : xs) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite ") + what + " produced by " + op);
        }
    }
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_size(shape) != values.size()) {
            throw DimensionError("tensor shape " + shape_string(shape) + " does not hold " +
                                 std::to_string(values.size()) + " values");
        }
        detail::check_finite(values, "tensor construction", "value");
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
        if (requires_grad) node_->grad.assign(node_->value.size(), 0.0);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }
    static Tensor vector(std::vector<double> v, bool requires_grad = false) {
        const std::size_t n = v.size();
        return Tensor({n}, std::move(v), requires_grad);
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                         bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(v), requires_grad);
    }

    static Tensor from_node(detail::NodePtr node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->parents.empty() && !node_->backward; }

    std::span<const double> values() const { return node_->value; }
    std::span<double> mutable_values() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad; }

    double operator[](std::size_t i) const { return node_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape[1] + c]; }
    double item() const {
        if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
        return node_->value[0];
    }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    /// Same values, no graph history, no gradient.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    /// Independent leaf copy.
    Tensor clone() const {
        Tensor t(shape(), node_->value, requires_grad());
        return t;
    }

    const detail::NodePtr& node() const { return node_; }

private:
    detail::NodePtr node_;
};

namespace detail {

/// Wraps an op result; the graph edge is kept only when some operand needs gradients.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                          std::vector<NodePtr> parents, std::function<void(Node&)> backward) {
    check_finite(values, op, "value");
    auto node = std::make_shared<Node>();
    node->op = op;
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = grad_mode() && std::any_of(parents.begin(), parents.end(),
                                                     [](const NodePtr& p) { return p->requires_grad; });
    if (node->requires_grad) {
        node->grad.assign(node->value.size(), 0.0);
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor::from_node(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                             " vs " + shape_string(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
    if (a.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got " + shape_string(a.shape()));
    }
}

inline void require_nonempty(const Tensor& a, const char* op) {
    if (a.size() == 0) throw DimensionError(std::string(op) + ": empty input");
}

template <class Fn, class Dfn>
Tensor unary(const Tensor& x, const char* op, Fn f, Dfn dfdx) {
    std::vector<double> out(x.size());
    const auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    return make_result(op, x.shape(), std::move(out), {x.node()}, [dfdx](Node& self) {
        Node& in = *self.parents[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            in.grad[i] += self.grad[i] * dfdx(in.value[i], self.value[i]);
        }
    });
}

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Topologically ordered record of the graph reachable from a root.
class Tape {
public:
    static Tape record(const Tensor& root) {
        Tape tape;
        if (!root.requires_grad()) return tape;
        std::unordered_set<const detail::Node*> seen;
        // Iterative post-order DFS: a node is emitted after all of its operands.
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(root.node().get(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) {
                    stack.emplace_back(parent, 0);
                }
            } else {
                tape.nodes_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    std::span<detail::Node* const> nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

    /// Runs every recorded adjoint once, last node first.
    void run_backward() const {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            detail::Node* node = *it;
            if (node->backward) node->backward(*node);
        }
        for (const detail::Node* node : nodes_) detail::check_finite(node->grad, node->op, "gradient");
    }

private:
    std::vector<detail::Node*> nodes_;
};

/// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every reachable
/// tensor that requires them.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    loss.node()->grad[0] += 1.0;
    Tape::record(loss).run_backward();
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] * [k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = av[i * k + p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
        }
    }
    return detail::make_result("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                               [m, k, n](detail::Node& self) {
        detail::Node& A = *self.parents[0];
        detail::Node& B = *self.parents[1];
        const double* g = self.grad.data();
        if (A.requires_grad) {
            // dA = dC * B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = B.value.data() + p * n;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * brow[j];
                    A.grad[i * k + p] += acc;
                }
            }
        }
        if (B.requires_grad) {
            // dB = A^T * dC
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double s = A.value[i * k + p];
                    double* brow = B.grad.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) brow[j] += s * g[i * n + j];
                }
            }
        }
    });
}

/// Affine map applied to each row: x [n x in], weight [out x in], bias [out] -> [n x out].
/// Pass an undefined Tensor as bias for a bias-free map.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(weight, 2, "linear");
    const std::size_t n = x.rows(), in = x.cols(), out = weight.rows();
    if (weight.cols() != in) {
        throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " +
                             shape_string(weight.shape()));
    }
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.size() != out)) {
        throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs " +
                             std::to_string(out) + " outputs");
    }
    const auto xv = x.values();
    const auto wv = weight.values();
    std::vector<double> wt(in * out);
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t p = 0; p < in; ++p) wt[p * out + o] = wv[o * in + p];
    std::vector<double> y(n * out, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = y.data() + i * out;
        if (has_bias) std::copy(bias.values().begin(), bias.values().end(), row);
        for (std::size_t p = 0; p < in; ++p) {
            const double s = xv[i * in + p];
            if (s == 0.0) continue;
            const double* wrow = wt.data() + p * out;
            for (std::size_t o = 0; o < out; ++o) row[o] += s * wrow[o];
        }
    }
    std::vector<detail::NodePtr> parents{x.node(), weight.node()};
    if (has_bias) parents.push_back(bias.node());
    return detail::make_result("linear", {n, out}, std::move(y), std::move(parents),
                               [n, in, out, has_bias](detail::Node& self) {
        detail::Node& X = *self.parents[0];
        detail::Node& W = *self.parents[1];
        const double* __restrict g = self.grad.data();
        if (X.requires_grad) {
            const double* __restrict wv = W.value.data();
            for (std::size_t i = 0; i < n; ++i) {
                double* __restrict xrow = X.grad.data() + i * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double s = g[i * out + o];
                    const double* __restrict wrow = wv + o * in;
                    for (std::size_t p = 0; p < in; ++p) xrow[p] += s * wrow[p];
                }
            }
        }
        if (W.requires_grad) {
            const double* __restrict xv = X.value.data();
            double* __restrict wg = W.grad.data();
            for (std::size_t i = 0; i < n; ++i) {
                const double* __restrict xrow = xv + i * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double s = g[i * out + o];
                    double* __restrict wrow = wg + o * in;
                    for (std::size_t p = 0; p < in; ++p) wrow[p] += s * xrow[p];
                }
            }
        }
        if (has_bias) {
            detail::Node& B = *self.parents[2];
            if (B.requires_grad) {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t o = 0; o < out; ++o) B.grad[o] += g[i * out + o];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result("add", a.shape(), std::move(out), {a.node(), b.node()},
                               [](detail::Node& self) {
        for (int side = 0; side < 2; ++side) {
            detail::Node& in = *self.parents[side];
            if (!in.requires_grad) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result("sub", a.shape(), std::move(out), {a.node(), b.node()},
                               [](detail::Node& self) {
        detail::Node& A = *self.parents[0];
        detail::Node& B = *self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (A.requires_grad) A.grad[i] += self.grad[i];
            if (B.requires_grad) B.grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result("mul", a.shape(), std::move(out), {a.node(), b.node()},
                               [](detail::Node& self) {
        detail::Node& A = *self.parents[0];
        detail::Node& B = *self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (A.requires_grad) A.grad[i] += self.grad[i] * B.value[i];
            if (B.requires_grad) B.grad[i] += self.grad[i] * A.value[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(x, "scale", [s](double v) { return s * v; },
                         [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    return detail::unary(x, "add_scalar", [s](double v) { return v + s; },
                         [](double, double) { return 1.0; });
}

/// 1 - x
inline Tensor one_minus(const Tensor& x) {
    return detail::unary(x, "one_minus", [](double v) { return 1.0 - v; },
                         [](double, double) { return -1.0; });
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(x, "sigmoid", [](double v) { return sigmoid(v); },
                         [](double, double s) { return s * (1.0 - s); });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary(x, "tanh", [](double v) { return std::tanh(v); },
                         [](double, double t) { return 1.0 - t * t; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(x, "exp", [](double v) { return std::exp(v); },
                         [](double, double e) { return e; });
}

inline Tensor log(const Tensor& x) {
    for (double v : x.values()) {
        if (!(v > 0.0)) throw DomainError("log of nonpositive value " + std::to_string(v));
    }
    return detail::unary(x, "log", [](double v) { return std::log(v); },
                         [](double v, double) { return 1.0 / v; });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                         [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Gradient passes where lo <= x <= hi and is zero outside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    return detail::unary(x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
                         [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and views

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return detail::make_result("sum", {1}, {s}, {x.node()}, [](detail::Node& self) {
        detail::Node& in = *self.parents[0];
        for (double& g : in.grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    detail::require_nonempty(x, "mean");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Numerically stable softmax over a vector.
inline Tensor softmax(const Tensor& x) {
    detail::require_rank(x, 1, "softmax");
    detail::require_nonempty(x, "softmax");
    const auto xv = x.values();
    const double mx = *std::max_element(xv.begin(), xv.end());
    std::vector<double> out(x.size());
    double z = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(xv[i] - mx);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return detail::make_result("softmax", x.shape(), std::move(out), {x.node()},
                               [](detail::Node& self) {
        detail::Node& in = *self.parents[0];
        double dot = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) dot += self.grad[i] * self.value[i];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            in.grad[i] += self.value[i] * (self.grad[i] - dot);
        }
    });
}

/// Index of the first maximal entry.
inline std::size_t argmax(std::span<const double> xs) {
    return static_cast<std::size_t>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

struct MaxResult {
    Tensor value;  // scalar
    std::size_t index;
};

/// Maximum with lowest-index tie-break; the gradient routes to that element only.
inline MaxResult reduce_max(const Tensor& x) {
    detail::require_rank(x, 1, "reduce_max");
    detail::require_nonempty(x, "reduce_max");
    const std::size_t idx = argmax(x.values());
    Tensor v = detail::make_result("reduce_max", {1}, {x[idx]}, {x.node()},
                                   [idx](detail::Node& self) {
        self.parents[0]->grad[idx] += self.grad[0];
    });
    return {std::move(v), idx};
}

/// Element at a flat index, as a scalar tensor.
inline Tensor select(const Tensor& x, std::size_t index) {
    if (index >= x.size()) {
        throw DimensionError("select: index " + std::to_string(index) + " out of " +
                             shape_string(x.shape()));
    }
    return detail::make_result("select", {1}, {x[index]}, {x.node()},
                               [index](detail::Node& self) {
        self.parents[0]->grad[index] += self.grad[0];
    });
}

/// One row of a matrix, as a vector.
inline Tensor row(const Tensor& x, std::size_t r) {
    detail::require_rank(x, 2, "row");
    if (r >= x.rows()) throw DimensionError("row: index out of range");
    const std::size_t c = x.cols();
    std::vector<double> out(x.values().begin() + r * c, x.values().begin() + (r + 1) * c);
    return detail::make_result("row", {c}, std::move(out), {x.node()}, [r, c](detail::Node& self) {
        for (std::size_t j = 0; j < c; ++j) self.parents[0]->grad[r * c + j] += self.grad[j];
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return detail::make_result("reshape", std::move(shape), std::move(out), {x.node()},
                               [](detail::Node& self) {
        detail::Node& in = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
    });
}

/// Concatenates vectors end to end.
inline Tensor concat(const std::vector<Tensor>& parts) {
    std::vector<double> out;
    std::vector<detail::NodePtr> parents;
    for (const Tensor& p : parts) {
        detail::require_rank(p, 1, "concat");
        out.insert(out.end(), p.values().begin(), p.values().end());
        parents.push_back(p.node());
    }
    const std::size_t n = out.size();
    return detail::make_result("concat", {n}, std::move(out), std::move(parents),
                               [](detail::Node& self) {
        std::size_t offset = 0;
        for (const auto& p : self.parents) {
            if (p->requires_grad) {
                for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[offset + i];
            }
            offset += p->value.size();
        }
    });
}

}  // namespace dualmil
