// ad.hpp - reverse-mode automatic differentiation over dense tensors.
//
// Each forward pass builds a graph of shared Node objects; backward() from a
// scalar loss topologically sorts the graph, propagates gradients, and then
// releases the graph edges. All storage is double precision so gradients can
// be validated against central finite differences at 1e-4 step.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "morphmark/rng.hpp"

namespace morphmark::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
};

inline void ensure_grad(Node& n) {
    if (n.grad.size() != n.val.size()) n.grad.assign(n.val.size(), 0.0);
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : n_(std::move(node)) {}

    static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (values.size() != numel(shape))
            throw std::invalid_argument("Tensor::leaf: value count does not match shape");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->val = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(numel(shape), 0.0);
        return leaf(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(double v) { return leaf({1}, {v}); }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->val.size(); }
    const std::vector<double>& values() const { return n_->val; }
    std::vector<double>& values() { return n_->val; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    double item() const {
        if (n_->val.size() != 1) throw std::logic_error("Tensor::item: not a scalar");
        return n_->val[0];
    }
    std::shared_ptr<Node>& node() { return n_; }
    const std::shared_ptr<Node>& node() const { return n_; }

    // detached copy: same values, no graph history
    Tensor detach() const { return leaf(n_->shape, n_->val, false); }

private:
    std::shared_ptr<Node> n_;
};

namespace detail {

inline Tensor make_op(const char* name, Shape shape, std::vector<double> val,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    n->op = name;
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward);
    }
    return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void backward(Tensor loss) {
    Node* root = loss.node().get();
    if (!root || root->val.size() != 1)
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    if (!std::isfinite(root->val[0]))
        throw std::runtime_error(std::string("backward: non-finite loss produced by op '") +
                                 root->op + "'");

    // iterative post-order DFS for a topological order
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    ensure_grad(*root);
    root->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            for (const auto& p : n->parents)
                if (p->requires_grad) ensure_grad(*p);
            n->backward_fn(*n);
        }
    }
    // release the graph; gradients stay on the nodes
    for (Node* n : topo) {
        n->backward_fn = nullptr;
        n->parents.clear();
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
    return detail::make_op("add", a.shape(), std::move(v), {a.node(), b.node()},
                           [](Node& self) {
                               for (int k = 0; k < 2; ++k) {
                                   Node& p = *self.parents[k];
                                   if (!p.requires_grad) continue;
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       p.grad[i] += self.grad[i];
                               }
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
    return detail::make_op("sub", a.shape(), std::move(v), {a.node(), b.node()},
                           [](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad)
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       pa.grad[i] += self.grad[i];
                               if (pb.requires_grad)
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       pb.grad[i] -= self.grad[i];
                           });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
    return detail::make_op("mul", a.shape(), std::move(v), {a.node(), b.node()},
                           [](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad)
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       pa.grad[i] += self.grad[i] * pb.val[i];
                               if (pb.requires_grad)
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       pb.grad[i] += self.grad[i] * pa.val[i];
                           });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
    return detail::make_op("scale", a.shape(), std::move(v), {a.node()},
                           [c](Node& self) {
                               Node& p = *self.parents[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   p.grad[i] += self.grad[i] * c;
                           });
}

inline Tensor add_const(const Tensor& a, double c) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + c;
    return detail::make_op("add_const", a.shape(), std::move(v), {a.node()},
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   p.grad[i] += self.grad[i];
                           });
}

#define MORPHMARK_UNARY_OP(NAME, FWD, BWD)                                              \
    inline Tensor NAME(const Tensor& a) {                                               \
        std::vector<double> v(a.size());                                                \
        for (std::size_t i = 0; i < v.size(); ++i) {                                    \
            const double x = a.values()[i];                                             \
            (void)x;                                                                    \
            v[i] = (FWD);                                                               \
        }                                                                               \
        return detail::make_op(#NAME, a.shape(), std::move(v), {a.node()},              \
                               [](Node& self) {                                         \
                                   Node& p = *self.parents[0];                          \
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) { \
                                       const double x = p.val[i];                       \
                                       const double y = self.val[i];                    \
                                       (void)x;                                         \
                                       (void)y;                                         \
                                       p.grad[i] += self.grad[i] * (BWD);               \
                                   }                                                    \
                               });                                                      \
    }

MORPHMARK_UNARY_OP(tanh_t, std::tanh(x), 1.0 - y * y)
MORPHMARK_UNARY_OP(relu, x > 0.0 ? x : 0.0, x > 0.0 ? 1.0 : 0.0)
MORPHMARK_UNARY_OP(exp_t, std::exp(x), y)
MORPHMARK_UNARY_OP(neg, -x, -1.0)
MORPHMARK_UNARY_OP(abs_t, std::fabs(x), x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0))
MORPHMARK_UNARY_OP(sin_t, std::sin(x), std::cos(x))
MORPHMARK_UNARY_OP(cos_t, std::cos(x), -std::sin(x))
MORPHMARK_UNARY_OP(square, x* x, 2.0 * x)

#undef MORPHMARK_UNARY_OP

// sqrt with an epsilon inside the root to keep the derivative finite at 0
inline Tensor sqrt_eps(const Tensor& a, double eps = 1e-12) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(a.values()[i] + eps);
    return detail::make_op("sqrt_eps", a.shape(), std::move(v), {a.node()},
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   p.grad[i] += self.grad[i] * 0.5 / self.val[i];
                           });
}

// elementwise division; denominator values must stay away from zero
inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] / b.values()[i];
    return detail::make_op("div", a.shape(), std::move(v), {a.node(), b.node()},
                           [](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad)
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       pa.grad[i] += self.grad[i] / pb.val[i];
                               if (pb.requires_grad)
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       pb.grad[i] -= self.grad[i] * self.val[i] / pb.val[i];
                           });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return detail::make_op("sum", {1}, {s}, {a.node()},
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               const double g = self.grad[0];
                               for (double& pg : p.grad) pg += g;
                           });
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (double x : a.values()) s += x;
    return detail::make_op("mean", {1}, {s * inv}, {a.node()},
                           [inv](Node& self) {
                               Node& p = *self.parents[0];
                               const double g = self.grad[0] * inv;
                               for (double& pg : p.grad) pg += g;
                           });
}

// mean over rows of an L x D matrix -> vector of D
inline Tensor mean_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw std::invalid_argument("mean_rows: expects a matrix");
    const int L = a.shape()[0], D = a.shape()[1];
    std::vector<double> v(static_cast<std::size_t>(D), 0.0);
    for (int r = 0; r < L; ++r)
        for (int c = 0; c < D; ++c) v[c] += a.values()[static_cast<std::size_t>(r) * D + c];
    const double inv = 1.0 / L;
    for (double& x : v) x *= inv;
    return detail::make_op("mean_rows", {D}, std::move(v), {a.node()},
                           [L, D, inv](Node& self) {
                               Node& p = *self.parents[0];
                               for (int r = 0; r < L; ++r)
                                   for (int c = 0; c < D; ++c)
                                       p.grad[static_cast<std::size_t>(r) * D + c] +=
                                           self.grad[c] * inv;
                           });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// c = op(a) * op(b); a is MxK (or KxM when trans_a), b is KxN (or NxK)
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                     bool trans_b = false) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw std::invalid_argument("matmul: expects matrices");
    const int M = trans_a ? a.shape()[1] : a.shape()[0];
    const int K = trans_a ? a.shape()[0] : a.shape()[1];
    const int Kb = trans_b ? b.shape()[1] : b.shape()[0];
    const int N = trans_b ? b.shape()[0] : b.shape()[1];
    if (K != Kb) throw std::invalid_argument("matmul: inner dimension mismatch");

    const int lda = a.shape()[1], ldb = b.shape()[1];
    auto A = [&](int i, int k) {
        return trans_a ? a.values()[static_cast<std::size_t>(k) * lda + i]
                       : a.values()[static_cast<std::size_t>(i) * lda + k];
    };
    auto B = [&](int k, int j) {
        return trans_b ? b.values()[static_cast<std::size_t>(j) * ldb + k]
                       : b.values()[static_cast<std::size_t>(k) * ldb + j];
    };
    std::vector<double> v(static_cast<std::size_t>(M) * N, 0.0);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
            const double aik = A(i, k);
            if (aik == 0.0) continue;
            double* row = v.data() + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) row[j] += aik * B(k, j);
        }

    return detail::make_op(
        "matmul", {M, N}, std::move(v), {a.node(), b.node()},
        [M, N, K, lda, ldb, trans_a, trans_b](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            auto Av = [&](int i, int k) {
                return trans_a ? pa.val[static_cast<std::size_t>(k) * lda + i]
                               : pa.val[static_cast<std::size_t>(i) * lda + k];
            };
            auto Bv = [&](int k, int j) {
                return trans_b ? pb.val[static_cast<std::size_t>(j) * ldb + k]
                               : pb.val[static_cast<std::size_t>(k) * ldb + j];
            };
            auto Ag = [&](int i, int k) -> double& {
                return trans_a ? pa.grad[static_cast<std::size_t>(k) * lda + i]
                               : pa.grad[static_cast<std::size_t>(i) * lda + k];
            };
            auto Bg = [&](int k, int j) -> double& {
                return trans_b ? pb.grad[static_cast<std::size_t>(j) * ldb + k]
                               : pb.grad[static_cast<std::size_t>(k) * ldb + j];
            };
            for (int i = 0; i < M; ++i) {
                const double* grow = self.grad.data() + static_cast<std::size_t>(i) * N;
                if (pa.requires_grad) {
                    for (int k = 0; k < K; ++k) {
                        double s = 0.0;
                        for (int j = 0; j < N; ++j) s += grow[j] * Bv(k, j);
                        Ag(i, k) += s;
                    }
                }
                if (pb.requires_grad) {
                    for (int k = 0; k < K; ++k) {
                        const double aik = Av(i, k);
                        if (aik == 0.0) continue;
                        for (int j = 0; j < N; ++j) Bg(k, j) += aik * grow[j];
                    }
                }
            }
        });
}

// adds a length-D vector to every row of an L x D matrix
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.shape().size() != 2 || v.shape().size() != 1 || a.shape()[1] != v.shape()[0])
        throw std::invalid_argument("add_rowvec: shape mismatch");
    const int L = a.shape()[0], D = a.shape()[1];
    std::vector<double> out(a.values());
    for (int r = 0; r < L; ++r)
        for (int c = 0; c < D; ++c) out[static_cast<std::size_t>(r) * D + c] += v.values()[c];
    return detail::make_op("add_rowvec", a.shape(), std::move(out), {a.node(), v.node()},
                           [L, D](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pv = *self.parents[1];
                               if (pa.requires_grad)
                                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                                       pa.grad[i] += self.grad[i];
                               if (pv.requires_grad)
                                   for (int r = 0; r < L; ++r)
                                       for (int c = 0; c < D; ++c)
                                           pv.grad[c] +=
                                               self.grad[static_cast<std::size_t>(r) * D + c];
                           });
}

inline Tensor softmax_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw std::invalid_argument("softmax_rows: expects a matrix");
    const int L = a.shape()[0], D = a.shape()[1];
    std::vector<double> v(a.size());
    for (int r = 0; r < L; ++r) {
        const double* in = a.values().data() + static_cast<std::size_t>(r) * D;
        double* out = v.data() + static_cast<std::size_t>(r) * D;
        double mx = in[0];
        for (int c = 1; c < D; ++c) mx = std::max(mx, in[c]);
        double s = 0.0;
        for (int c = 0; c < D; ++c) {
            out[c] = std::exp(in[c] - mx);
            s += out[c];
        }
        for (int c = 0; c < D; ++c) out[c] /= s;
    }
    return detail::make_op("softmax", a.shape(), std::move(v), {a.node()},
                           [L, D](Node& self) {
                               Node& p = *self.parents[0];
                               for (int r = 0; r < L; ++r) {
                                   const double* y = self.val.data() + static_cast<std::size_t>(r) * D;
                                   const double* g = self.grad.data() + static_cast<std::size_t>(r) * D;
                                   double dot = 0.0;
                                   for (int c = 0; c < D; ++c) dot += y[c] * g[c];
                                   double* pg = p.grad.data() + static_cast<std::size_t>(r) * D;
                                   for (int c = 0; c < D; ++c) pg[c] += y[c] * (g[c] - dot);
                               }
                           });
}

// layer normalization over the last dimension of an L x D matrix
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    if (a.shape().size() != 2) throw std::invalid_argument("layer_norm: expects a matrix");
    const int L = a.shape()[0], D = a.shape()[1];
    if (gamma.shape() != Shape{D} || beta.shape() != Shape{D})
        throw std::invalid_argument("layer_norm: gamma/beta must be length-D vectors");
    std::vector<double> v(a.size());
    std::vector<double> mu(static_cast<std::size_t>(L)), istd(static_cast<std::size_t>(L));
    for (int r = 0; r < L; ++r) {
        const double* in = a.values().data() + static_cast<std::size_t>(r) * D;
        double m = 0.0;
        for (int c = 0; c < D; ++c) m += in[c];
        m /= D;
        double var = 0.0;
        for (int c = 0; c < D; ++c) var += (in[c] - m) * (in[c] - m);
        var /= D;
        const double is = 1.0 / std::sqrt(var + eps);
        mu[r] = m;
        istd[r] = is;
        double* out = v.data() + static_cast<std::size_t>(r) * D;
        for (int c = 0; c < D; ++c)
            out[c] = gamma.values()[c] * (in[c] - m) * is + beta.values()[c];
    }
    return detail::make_op(
        "layer_norm", a.shape(), std::move(v), {a.node(), gamma.node(), beta.node()},
        [L, D, mu = std::move(mu), istd = std::move(istd)](Node& self) {
            Node& pa = *self.parents[0];
            Node& pg = *self.parents[1];
            Node& pb = *self.parents[2];
            for (int r = 0; r < L; ++r) {
                const double* x = pa.val.data() + static_cast<std::size_t>(r) * D;
                const double* g = self.grad.data() + static_cast<std::size_t>(r) * D;
                const double m = mu[r], is = istd[r];
                if (pg.requires_grad || pb.requires_grad) {
                    for (int c = 0; c < D; ++c) {
                        if (pg.requires_grad) pg.grad[c] += g[c] * (x[c] - m) * is;
                        if (pb.requires_grad) pb.grad[c] += g[c];
                    }
                }
                if (pa.requires_grad) {
                    // dL/dxhat = g * gamma; standard layernorm backward
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = 0; c < D; ++c) {
                        const double dxhat = g[c] * pg.val[c];
                        const double xhat = (x[c] - m) * is;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    double* pag = pa.grad.data() + static_cast<std::size_t>(r) * D;
                    for (int c = 0; c < D; ++c) {
                        const double dxhat = g[c] * pg.val[c];
                        const double xhat = (x[c] - m) * is;
                        pag[c] += is * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / D);
                    }
                }
            }
        });
}

// seeded dropout; at p=0 or disabled it is the identity
inline Tensor dropout(const Tensor& a, double p, Rng& rng, bool enabled) {
    if (!enabled || p <= 0.0) return a;
    if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(a.size());
    for (double& m : mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * mask[i];
    return detail::make_op("dropout", a.shape(), std::move(v), {a.node()},
                           [mask = std::move(mask)](Node& self) {
                               Node& pa = *self.parents[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   pa.grad[i] += self.grad[i] * mask[i];
                           });
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

// copy with a new shape (same element count, same linear order)
inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) throw std::invalid_argument("reshape: element count mismatch");
    return detail::make_op("reshape", std::move(shape), a.values(), {a.node()},
                           [](Node& self) {
                               Node& p = *self.parents[0];
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   p.grad[i] += self.grad[i];
                           });
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) throw std::invalid_argument("transpose: expects a matrix");
    const int R = a.shape()[0], C = a.shape()[1];
    std::vector<double> v(a.size());
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
            v[static_cast<std::size_t>(c) * R + r] = a.values()[static_cast<std::size_t>(r) * C + c];
    return detail::make_op("transpose", {C, R}, std::move(v), {a.node()},
                           [R, C](Node& self) {
                               Node& p = *self.parents[0];
                               for (int r = 0; r < R; ++r)
                                   for (int c = 0; c < C; ++c)
                                       p.grad[static_cast<std::size_t>(r) * C + c] +=
                                           self.grad[static_cast<std::size_t>(c) * R + r];
                           });
}

// select a column range [c0, c1) of an L x D matrix
inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    const int L = a.shape()[0], D = a.shape()[1];
    if (c0 < 0 || c1 > D || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    const int W = c1 - c0;
    std::vector<double> v(static_cast<std::size_t>(L) * W);
    for (int r = 0; r < L; ++r)
        for (int c = 0; c < W; ++c)
            v[static_cast<std::size_t>(r) * W + c] =
                a.values()[static_cast<std::size_t>(r) * D + c0 + c];
    return detail::make_op("slice_cols", {L, W}, std::move(v), {a.node()},
                           [L, D, W, c0](Node& self) {
                               Node& p = *self.parents[0];
                               for (int r = 0; r < L; ++r)
                                   for (int c = 0; c < W; ++c)
                                       p.grad[static_cast<std::size_t>(r) * D + c0 + c] +=
                                           self.grad[static_cast<std::size_t>(r) * W + c];
                           });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int L = parts[0].shape()[0];
    int D = 0;
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& t : parts) {
        if (t.shape().size() != 2 || t.shape()[0] != L)
            throw std::invalid_argument("concat_cols: row count mismatch");
        D += t.shape()[1];
        parents.push_back(t.node());
    }
    std::vector<double> v(static_cast<std::size_t>(L) * D);
    int off = 0;
    std::vector<int> widths;
    for (const auto& t : parts) {
        const int W = t.shape()[1];
        widths.push_back(W);
        for (int r = 0; r < L; ++r)
            for (int c = 0; c < W; ++c)
                v[static_cast<std::size_t>(r) * D + off + c] =
                    t.values()[static_cast<std::size_t>(r) * W + c];
        off += W;
    }
    return detail::make_op("concat_cols", {L, D}, std::move(v), std::move(parents),
                           [L, D, widths = std::move(widths)](Node& self) {
                               int off2 = 0;
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                   Node& p = *self.parents[k];
                                   const int W = widths[k];
                                   if (p.requires_grad) {
                                       for (int r = 0; r < L; ++r)
                                           for (int c = 0; c < W; ++c)
                                               p.grad[static_cast<std::size_t>(r) * W + c] +=
                                                   self.grad[static_cast<std::size_t>(r) * D +
                                                             off2 + c];
                                   }
                                   off2 += W;
                               }
                           });
}

// gather rows of an L x D matrix by index (backward scatters)
inline Tensor gather_rows(const Tensor& a, std::vector<int> rows) {
    const int D = a.shape()[1];
    const int L = a.shape()[0];
    std::vector<double> v(rows.size() * static_cast<std::size_t>(D));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= L) throw std::invalid_argument("gather_rows: index out of range");
        for (int c = 0; c < D; ++c)
            v[r * D + c] = a.values()[static_cast<std::size_t>(rows[r]) * D + c];
    }
    const int Lr = static_cast<int>(rows.size());
    return detail::make_op("gather_rows", {Lr, D}, std::move(v), {a.node()},
                           [D, rows = std::move(rows)](Node& self) {
                               Node& p = *self.parents[0];
                               for (std::size_t r = 0; r < rows.size(); ++r)
                                   for (int c = 0; c < D; ++c)
                                       p.grad[static_cast<std::size_t>(rows[r]) * D + c] +=
                                           self.grad[r * D + c];
                           });
}

}  // namespace morphmark::ad
