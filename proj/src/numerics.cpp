#include "dkgen/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace dkgen {

namespace {
thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected 2-D tensor, got shape " +
                         shape_str(t.shape()));
    }
}
}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace detail {
std::vector<double>& TensorImpl::grad_buf() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}
}  // namespace detail

using detail::TensorImpl;

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    return from(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
std::size_t Tensor::dim(std::size_t axis) const { return impl_->shape.at(axis); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
    if (size() != 1) {
        throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
    }
    return impl_->data[0];
}

double Tensor::at(std::size_t i) const { return impl_->data.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
    check_rank2(*this, "at");
    return impl_->data.at(r * impl_->shape[1] + c);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw Error("grad(): no gradient buffer");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    return Tensor::from(impl_->shape, impl_->data, false);
}

void Tensor::backward() const {
    if (size() != 1) {
        throw Error("backward(): loss must be scalar, got shape " + shape_str(shape()));
    }
    if (!impl_->requires_grad) {
        throw Error("backward(): loss does not require grad");
    }
    // Post-order DFS for topological order (parents before children).
    std::vector<TensorImpl*> topo;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    // Interior nodes get a fresh pass; leaves accumulate across calls.
    for (TensorImpl* node : topo) {
        if (node->backprop && !node->grad.empty()) {
            std::fill(node->grad.begin(), node->grad.end(), 0.0);
        }
    }
    impl_->grad_buf()[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backprop && !node->grad.empty()) node->backprop();
    }
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// Op constructor: tracks parents and wires the backward closure only when the
// tape is enabled and some input requires grad.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               std::function<void(TensorImpl&)> backprop) {
    auto out = Tensor::from(std::move(shape), std::move(data), false);
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const auto& in : inputs) {
        if (in.defined() && in.requires_grad()) any = true;
    }
    if (!any) return out;
    auto impl = out.impl();
    impl->requires_grad = true;
    for (const auto& in : inputs) impl->parents.push_back(in.impl());
    TensorImpl* raw = impl.get();
    impl->backprop = [raw, fn = std::move(backprop)]() { fn(*raw); };
    return out;
}

// ---------------------------------------------------------------- elementwise

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

// Unary elementwise op from value and derivative functions.
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
    std::vector<double> out(a.size());
    auto ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
    return make_op(a.shape(), std::move(out), {a},
                   [ai = a.impl(), df](TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       auto& g = ai->grad_buf();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += self.grad[i] * df(ai->data[i], self.data[i]);
                       }
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                       for (auto* p : {ai.get(), bi.get()}) {
                           if (!p->requires_grad) continue;
                           auto& g = p->grad_buf();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                       if (ai->requires_grad) {
                           auto& g = ai->grad_buf();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (bi->requires_grad) {
                           auto& g = bi->grad_buf();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                       }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return make_op(a.shape(), std::move(out), {a, b},
                   [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                       if (ai->requires_grad) {
                           auto& g = ai->grad_buf();
                           for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += self.grad[i] * bi->data[i];
                       }
                       if (bi->requires_grad) {
                           auto& g = bi->grad_buf();
                           for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += self.grad[i] * ai->data[i];
                       }
                   });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x * c; },
                    [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x + c; },
                    [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor log(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return unary_op(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        a,
        [](double x) {
            return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        },
        [](double x, double) {
            return x > 0.0 ? 1.0 / (1.0 + std::exp(-x))
                           : std::exp(x) / (1.0 + std::exp(x));
        });
}

// ---------------------------------------------------------------- matrix ops

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ad[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = &bd[kk * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_op({m, n}, std::move(out), {a, b},
                   [ai = a.impl(), bi = b.impl(), m, k, n](TensorImpl& self) {
                       if (ai->requires_grad) {
                           auto& ga = ai->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double gc = self.grad[i * n + j];
                                   if (gc == 0.0) continue;
                                   for (std::size_t kk = 0; kk < k; ++kk)
                                       ga[i * k + kk] += gc * bi->data[kk * n + j];
                               }
                       }
                       if (bi->requires_grad) {
                           auto& gb = bi->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t kk = 0; kk < k; ++kk) {
                                   const double av = ai->data[i * k + kk];
                                   if (av == 0.0) continue;
                                   for (std::size_t j = 0; j < n; ++j)
                                       gb[kk * n + j] += av * self.grad[i * n + j];
                               }
                       }
                   });
}

Tensor transpose(const Tensor& a) {
    check_rank2(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    auto ad = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
    return make_op({n, m}, std::move(out), {a},
                   [ai = a.impl(), m, n](TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       auto& g = ai->grad_buf();
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                               g[i * n + j] += self.grad[j * m + i];
                   });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    check_rank2(a, "slice_rows");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (begin > end || end > m) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") out of " + shape_str(a.shape()));
    }
    std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + end * n);
    return make_op({end - begin, n}, std::move(out), {a},
                   [ai = a.impl(), begin, n](TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       auto& g = ai->grad_buf();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                           g[begin * n + i] += self.grad[i];
                   });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    check_rank2(a, "slice_cols");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (begin > end || end > n) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") out of " + shape_str(a.shape()));
    }
    const std::size_t w = end - begin;
    std::vector<double> out(m * w);
    auto ad = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = ad[i * n + begin + j];
    return make_op({m, w}, std::move(out), {a},
                   [ai = a.impl(), begin, n, m, w](TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       auto& g = ai->grad_buf();
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < w; ++j)
                               g[i * n + begin + j] += self.grad[i * w + j];
                   });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts[0].dim(1);
    std::size_t m = 0;
    for (const auto& p : parts) {
        check_rank2(p, "concat_rows");
        if (p.dim(1) != n) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
        }
        m += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_op({m, n}, std::move(out), parts,
                   [impls](TensorImpl& self) {
                       std::size_t off = 0;
                       for (const auto& pi : impls) {
                           const std::size_t sz = pi->data.size();
                           if (pi->requires_grad) {
                               auto& g = pi->grad_buf();
                               for (std::size_t i = 0; i < sz; ++i)
                                   g[i] += self.grad[off + i];
                           }
                           off += sz;
                       }
                   });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts[0].dim(0);
    std::size_t n = 0;
    for (const auto& p : parts) {
        check_rank2(p, "concat_cols");
        if (p.dim(0) != m) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        }
        n += p.dim(1);
    }
    std::vector<double> out(m * n);
    std::size_t coff = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        auto pd = p.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * n + coff + j] = pd[i * w + j];
        coff += w;
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_op({m, n}, std::move(out), parts,
                   [impls, m, n](TensorImpl& self) {
                       std::size_t coff = 0;
                       for (const auto& pi : impls) {
                           const std::size_t w = pi->shape[1];
                           if (pi->requires_grad) {
                               auto& g = pi->grad_buf();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < w; ++j)
                                       g[i * w + j] += self.grad[i * n + coff + j];
                           }
                           coff += w;
                       }
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op(std::move(shape), std::move(out), {a},
                   [ai = a.impl()](TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       auto& g = ai->grad_buf();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                   });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    return make_op({1}, {s}, {a}, [ai = a.impl()](TensorImpl& self) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buf();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    const double inv = 1.0 / static_cast<double>(a.size());
    return make_op({1}, {s * inv}, {a}, [ai = a.impl(), inv](TensorImpl& self) {
        if (!ai->requires_grad) return;
        auto& g = ai->grad_buf();
        for (double& v : g) v += self.grad[0] * inv;
    });
}

Tensor stack_scalars(const std::vector<Tensor>& scalars) {
    if (scalars.empty()) throw ShapeError("stack_scalars: no inputs");
    std::vector<double> out;
    for (const auto& s : scalars) out.push_back(s.item());
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& s : scalars) impls.push_back(s.impl());
    return make_op({scalars.size()}, std::move(out), scalars,
                   [impls](TensorImpl& self) {
                       for (std::size_t i = 0; i < impls.size(); ++i) {
                           if (impls[i]->requires_grad)
                               impls[i]->grad_buf()[0] += self.grad[i];
                       }
                   });
}

// ---------------------------------------------------------------- nn primitives

namespace {

// Shared row-softmax; rows of width n, optional keep-mask per element.
Tensor rows_softmax(const Tensor& a, std::size_t rows, std::size_t n,
                    const std::vector<uint8_t>* keep) {
    if (n == 0) throw ShapeError("softmax: empty axis");
    auto ad = a.data();
    std::vector<double> out(a.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &ad[r * n];
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (keep && !(*keep)[r * n + j]) continue;
            m = std::max(m, x[j]);
        }
        if (m == -std::numeric_limits<double>::infinity()) {
            throw Error("softmax: fully masked row " + std::to_string(r));
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (keep && !(*keep)[r * n + j]) continue;
            out[r * n + j] = std::exp(x[j] - m);
            s += out[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= s;
    }
    return make_op(a.shape(), std::move(out), {a},
                   [ai = a.impl(), rows, n](TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       auto& g = ai->grad_buf();
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* y = &self.data[r * n];
                           const double* gy = &self.grad[r * n];
                           double dot = 0.0;
                           for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                           for (std::size_t j = 0; j < n; ++j)
                               g[r * n + j] += y[j] * (gy[j] - dot);
                       }
                   });
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
    if (a.rank() == 1) return rows_softmax(a, 1, a.dim(0), nullptr);
    check_rank2(a, "softmax");
    const int last = 1;
    if (axis == -1 || axis == last) return rows_softmax(a, a.dim(0), a.dim(1), nullptr);
    if (axis == 0) return transpose(softmax(transpose(a), -1));
    throw ShapeError("softmax: bad axis " + std::to_string(axis));
}

Tensor softmax_masked(const Tensor& a, const std::vector<uint8_t>& keep) {
    check_rank2(a, "softmax_masked");
    if (keep.size() != a.size()) {
        throw ShapeError("softmax_masked: mask size " + std::to_string(keep.size()) +
                         " vs tensor " + shape_str(a.shape()));
    }
    return rows_softmax(a, a.dim(0), a.dim(1), &keep);
}

Tensor log_softmax(const Tensor& a) {
    const std::size_t rows = a.rank() == 1 ? 1 : a.dim(0);
    const std::size_t n = a.rank() == 1 ? a.dim(0) : a.dim(1);
    if (a.rank() > 2) throw ShapeError("log_softmax: rank > 2");
    if (n == 0) throw ShapeError("log_softmax: empty axis");
    auto ad = a.data();
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &ad[r * n];
        double m = *std::max_element(x, x + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[j] - lse;
    }
    return make_op(a.shape(), std::move(out), {a},
                   [ai = a.impl(), rows, n](TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       auto& g = ai->grad_buf();
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* y = &self.data[r * n];
                           const double* gy = &self.grad[r * n];
                           double gsum = 0.0;
                           for (std::size_t j = 0; j < n; ++j) gsum += gy[j];
                           for (std::size_t j = 0; j < n; ++j)
                               g[r * n + j] += gy[j] - std::exp(y[j]) * gsum;
                       }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_rank2(x, "layer_norm");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gain.size() != n || bias.size() != n) {
        throw ShapeError("layer_norm: gain/bias width mismatch with " +
                         shape_str(x.shape()));
    }
    auto xd = x.data();
    auto gd = gain.data();
    auto bd = bias.data();
    std::vector<double> out(m * n);
    std::vector<double> mu(m), sigma(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = &xd[r * n];
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += row[j];
        mu[r] = s / n;
        double v = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = row[j] - mu[r];
            v += d * d;
        }
        sigma[r] = std::sqrt(v / n + eps);
        for (std::size_t j = 0; j < n; ++j)
            out[r * n + j] = gd[j] * (row[j] - mu[r]) / sigma[r] + bd[j];
    }
    return make_op(
        {m, n}, std::move(out), {x, gain, bias},
        [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), m, n, mu, sigma](
            TensorImpl& self) {
            for (std::size_t r = 0; r < m; ++r) {
                const double* row = &xi->data[r * n];
                const double* gy = &self.grad[r * n];
                const double inv = 1.0 / sigma[r];
                // xhat, dxhat per row
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                std::vector<double> xhat(n), dxhat(n);
                for (std::size_t j = 0; j < n; ++j) {
                    xhat[j] = (row[j] - mu[r]) * inv;
                    dxhat[j] = gy[j] * gi->data[j];
                    sum_dxhat += dxhat[j];
                    sum_dxhat_xhat += dxhat[j] * xhat[j];
                }
                if (xi->requires_grad) {
                    auto& gx = xi->grad_buf();
                    for (std::size_t j = 0; j < n; ++j) {
                        gx[r * n + j] += inv * (dxhat[j] - sum_dxhat / n -
                                                xhat[j] * sum_dxhat_xhat / n);
                    }
                }
                if (gi->requires_grad) {
                    auto& gg = gi->grad_buf();
                    for (std::size_t j = 0; j < n; ++j) gg[j] += gy[j] * xhat[j];
                }
                if (bi->requires_grad) {
                    auto& gb = bi->grad_buf();
                    for (std::size_t j = 0; j < n; ++j) gb[j] += gy[j];
                }
            }
        });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    check_rank2(table, "embedding_lookup");
    const std::size_t v = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
    std::vector<double> out(ids.size() * d);
    auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
            throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) +
                             " out of table " + shape_str(table.shape()));
        }
        std::copy_n(&td[static_cast<std::size_t>(ids[i]) * d], d, &out[i * d]);
    }
    return make_op({ids.size(), d}, std::move(out), {table},
                   [ti = table.impl(), ids, d](TensorImpl& self) {
                       if (!ti->requires_grad) return;
                       auto& g = ti->grad_buf();
                       for (std::size_t i = 0; i < ids.size(); ++i)
                           for (std::size_t j = 0; j < d; ++j)
                               g[static_cast<std::size_t>(ids[i]) * d + j] +=
                                   self.grad[i * d + j];
                   });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_rank2(x, "linear");
    check_rank2(w, "linear");
    const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
    if (w.dim(0) != k || b.size() != n) {
        throw ShapeError("linear: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) +
                         " b" + shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    auto xd = x.data(), wd = w.data(), bd = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = &out[i * n];
        std::copy_n(bd.data(), n, orow);
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double xv = xd[i * k + kk];
            if (xv == 0.0) continue;
            const double* wrow = &wd[kk * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += xv * wrow[j];
        }
    }
    return make_op({m, n}, std::move(out), {x, w, b},
                   [xi = x.impl(), wi = w.impl(), bi = b.impl(), m, k, n](TensorImpl& self) {
                       if (xi->requires_grad) {
                           auto& gx = xi->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double gc = self.grad[i * n + j];
                                   if (gc == 0.0) continue;
                                   for (std::size_t kk = 0; kk < k; ++kk)
                                       gx[i * k + kk] += gc * wi->data[kk * n + j];
                               }
                       }
                       if (wi->requires_grad) {
                           auto& gw = wi->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t kk = 0; kk < k; ++kk) {
                                   const double xv = xi->data[i * k + kk];
                                   if (xv == 0.0) continue;
                                   for (std::size_t j = 0; j < n; ++j)
                                       gw[kk * n + j] += xv * self.grad[i * n + j];
                               }
                       }
                       if (bi->requires_grad) {
                           auto& gb = bi->grad_buf();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                   gb[j] += self.grad[i * n + j];
                       }
                   });
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must be in [0,1)");
    if (rate == 0.0) return scale(a, 1.0);
    const double keep = 1.0 - rate;
    std::vector<double> mask(a.size());
    for (double& mv : mask) mv = rng.uniform() < keep ? 1.0 / keep : 0.0;
    std::vector<double> out(a.size());
    auto ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * mask[i];
    return make_op(a.shape(), std::move(out), {a},
                   [ai = a.impl(), mask](TensorImpl& self) {
                       if (!ai->requires_grad) return;
                       auto& g = ai->grad_buf();
                       for (std::size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i] * mask[i];
                   });
}

// ---------------------------------------------------------------- Rng

struct Rng::State {
    explicit State(std::uint64_t seed) : gen(seed) {}
    std::mt19937_64 gen;
};

Rng::Rng(std::uint64_t seed) : seed_(seed), state_(std::make_shared<State>(seed)) {}

std::uint64_t Rng::next_u64() { return state_->gen(); }

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
}

double Rng::normal(double mean, double stddev) {
    if (have_spare_) {
        have_spare_ = false;
        return mean + stddev * spare_;
    }
    // Box-Muller; u1 kept away from 0.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
}

std::size_t Rng::uniform_index(std::size_t n) {
    if (n == 0) throw Error("uniform_index: empty range");
    return static_cast<std::size_t>(next_u64() % n);
}

// ---------------------------------------------------------------- AdamW

void AdamW::step(ParamMap& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        if (!p.requires_grad()) continue;
        if (!p.has_grad()) {
            throw Error("adamw_step: missing gradient for parameter '" + name + "'");
        }
        auto& slot = slots_[name];
        if (slot.m.empty()) {
            slot.m.assign(p.size(), 0.0);
            slot.v.assign(p.size(), 0.0);
        }
        auto data = p.mutable_data();
        auto g = p.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            data[i] -= opt_.lr * opt_.weight_decay * data[i];
            slot.m[i] = opt_.beta1 * slot.m[i] + (1.0 - opt_.beta1) * g[i];
            slot.v[i] = opt_.beta2 * slot.v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            data[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        }
    }
}

void AdamW::zero_grads(ParamMap& params) {
    for (auto& [name, p] : params) p.zero_grad();
}

}  // namespace dkgen
