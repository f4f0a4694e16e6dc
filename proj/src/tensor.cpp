#include "lqec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "lqec/errors.hpp"

namespace lqec {

struct TensorImpl : std::enable_shared_from_this<TensorImpl> {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward populates it
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&, BackwardPass&)> backprop;

    int64_t size() const { return static_cast<int64_t>(value.size()); }
    bool is_leaf() const { return parents.empty(); }
};

namespace {

int64_t shape_product(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

void check_shape_positive(const std::vector<int>& shape) {
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

std::shared_ptr<TensorImpl> make_impl(std::vector<int> shape, std::vector<double> data,
                                      bool requires_grad) {
    check_shape_positive(shape);
    if (shape_product(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}

int64_t as_index(double v, int64_t limit, const char* what) {
    if (!(v >= 0) || v != std::floor(v) || v >= static_cast<double>(limit))
        throw InputError(std::string(what) + " must be an integer in [0, " +
                         std::to_string(limit) + "), got " + std::to_string(v));
    return static_cast<int64_t>(v);
}

}  // namespace

// ---- Tensor handle -----------------------------------------------------

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_recording_enabled() { return g_grad_enabled; }

Tensor make_op_result(std::vector<int> shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(TensorImpl&, BackwardPass&)> backprop) {
    auto impl = make_impl(std::move(shape), std::move(value), false);
    bool any_grad = false;
    if (g_grad_enabled)
        for (const auto& p : parents) any_grad = any_grad || p.requires_grad();
    if (any_grad) {
        impl->requires_grad = true;
        impl->parents.reserve(parents.size());
        for (const auto& p : parents) impl->parents.push_back(p.shared_impl());
        impl->backprop = std::move(backprop);
    }
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = shape_product(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto n = shape_product(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

Tensor Tensor::identity(int n) {
    std::vector<double> d(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) d[static_cast<size_t>(i) * n + i] = 1.0;
    return from_data({n, n}, std::move(d));
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::dim(int i) const { return impl_->shape.at(i); }
int64_t Tensor::size() const { return impl_->size(); }

std::span<const double> Tensor::data() const { return impl_->value; }
std::span<double> Tensor::mutable_data() { return impl_->value; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

std::span<const double> Tensor::grad() const { return impl_->grad; }
std::span<double> Tensor::mutable_grad() { return impl_->grad; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
void Tensor::zero_grad() { impl_->grad.assign(impl_->value.size(), 0.0); }

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a scalar tensor, shape is " + shape_str(impl_->shape));
    return impl_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (idx.size() != impl_->shape.size()) throw ShapeError("index rank mismatch in at()");
    int64_t off = 0;
    auto it = idx.begin();
    for (size_t d = 0; d < impl_->shape.size(); ++d, ++it) off = off * impl_->shape[d] + *it;
    return impl_->value[static_cast<size_t>(off)];
}

Tensor Tensor::detach() const { return clone_as_leaf(false); }

Tensor Tensor::clone_as_leaf(bool requires_grad) const {
    return from_data(impl_->shape, impl_->value, requires_grad);
}

// ---- backward pass -----------------------------------------------------

class BackwardPass {
public:
    std::vector<double>& grad_of(TensorImpl* impl) {
        auto [it, inserted] = table_.try_emplace(impl);
        if (inserted) it->second.assign(impl->value.size(), 0.0);
        return it->second;
    }
    const std::vector<double>* find(TensorImpl* impl) const {
        auto it = table_.find(impl);
        return it == table_.end() ? nullptr : &it->second;
    }

private:
    std::unordered_map<TensorImpl*, std::vector<double>> table_;
};

void GradSink::merge_into_grads() const {
    for (const auto& kv : grads_) {
        TensorImpl* impl = kv.second.first.get();
        if (impl->grad.empty()) impl->grad.assign(impl->value.size(), 0.0);
        const auto& buf = kv.second.second;
        for (size_t i = 0; i < buf.size(); ++i) impl->grad[i] += buf[i];
    }
}

void backward(const Tensor& loss, GradSink* sink) {
    if (!loss.defined() || loss.size() != 1 || loss.rank() != 0)
        throw ContractError("backward() requires a scalar (rank-0) loss tensor");
    TensorImpl* root = loss.impl();
    if (!root->requires_grad)
        throw ContractError("backward() loss is not attached to any grad-requiring input");

    // Reverse topological order over the grad-requiring subgraph.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame { TensorImpl* node; size_t next_parent; };
    std::vector<Frame> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next_parent++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    BackwardPass bp;
    bp.grad_of(root)[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backprop) node->backprop(*node, bp);
    }

    // Flush accumulated gradients. Shared leaves go to the sink when one is
    // given (interior grads are skipped then: the sink caller owns the
    // graph and only consumes leaf gradients); otherwise everything lands
    // in the tensor's own grad buffer.
    for (TensorImpl* node : order) {
        const std::vector<double>* buf = bp.find(node);
        if (!buf) continue;
        if (sink && !node->is_leaf()) continue;
        if (sink && node->is_leaf()) {
            auto [it2, inserted] = sink->grads_.try_emplace(node);
            if (inserted) {
                it2->second.first = node->shared_from_this();
                it2->second.second.assign(node->value.size(), 0.0);
            }
            auto& acc = it2->second.second;
            for (size_t i = 0; i < buf->size(); ++i) acc[i] += (*buf)[i];
        } else {
            if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
            for (size_t i = 0; i < buf->size(); ++i) node->grad[i] += (*buf)[i];
        }
    }
}

// ---- kernels -----------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]; inner accumulation ascending in k.
void mm_nn(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* c = C + static_cast<size_t>(i) * n;
        const double* a = A + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double aip = a[p];
            if (aip == 0.0) continue;
            const double* b = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += aip * b[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T; dot products ascending in n.
void mm_nt(const double* A, const double* B, double* C, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<size_t>(i) * n;
        double* c = C + static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            const double* b = B + static_cast<size_t>(j) * n;
            double acc = 0.0;
            for (int p = 0; p < n; ++p) acc += a[p] * b[p];
            c[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]; accumulation ascending in m for every cell.
void mm_tn(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int p = 0; p < m; ++p) {
        const double* a = A + static_cast<size_t>(p) * k;
        const double* b = B + static_cast<size_t>(p) * n;
        for (int i = 0; i < k; ++i) {
            const double ai = a[i];
            if (ai == 0.0) continue;
            double* c = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) c[j] += ai * b[j];
        }
    }
}

struct BroadcastPlan {
    bool left_is_big = true;  // which operand has the full result shape
    int64_t outer = 1;
    int64_t inner = 1;
};

BroadcastPlan broadcast_plan(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    BroadcastPlan plan;
    const std::vector<int>*big, *small;
    if (sa.size() >= sb.size()) {
        big = &sa;
        small = &sb;
        plan.left_is_big = true;
    } else {
        big = &sb;
        small = &sa;
        plan.left_is_big = false;
    }
    const size_t off = big->size() - small->size();
    for (size_t i = 0; i < small->size(); ++i) {
        if ((*small)[i] != (*big)[off + i])
            throw ShapeError(std::string(op) + ": shape " + shape_str(sb) +
                             " does not broadcast onto " + shape_str(sa));
    }
    plan.inner = shape_product(*small);
    plan.outer = shape_product(*big) / plan.inner;
    if (sa.size() == sb.size() && sa != sb)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    return plan;
}

template <class Fwd, class BwdBig, class BwdSmall>
Tensor elementwise_binary(const Tensor& x, const Tensor& y, const char* op, Fwd fwd,
                          BwdBig bwd_big, BwdSmall bwd_small) {
    const BroadcastPlan plan = broadcast_plan(x, y, op);
    const Tensor& big = plan.left_is_big ? x : y;
    const Tensor& small = plan.left_is_big ? y : x;
    const auto bigv = big.data();
    const auto smallv = small.data();
    const int64_t inner = plan.inner;
    std::vector<double> out(bigv.size());
    for (int64_t k = 0; k < static_cast<int64_t>(bigv.size()); ++k)
        out[static_cast<size_t>(k)] =
            plan.left_is_big ? fwd(bigv[k], smallv[k % inner]) : fwd(smallv[k % inner], bigv[k]);

    const bool left_is_big = plan.left_is_big;
    return make_op_result(
        big.shape(), std::move(out), {x, y},
        [left_is_big, inner, bwd_big, bwd_small](TensorImpl& self, BackwardPass& bp) {
            TensorImpl* bigp = left_is_big ? self.parents[0].get() : self.parents[1].get();
            TensorImpl* smallp = left_is_big ? self.parents[1].get() : self.parents[0].get();
            const auto& dout = *bp.find(&self);
            const auto& bigv = bigp->value;
            const auto& smallv = smallp->value;
            if (bigp->requires_grad) {
                auto& g = bp.grad_of(bigp);
                for (size_t k = 0; k < dout.size(); ++k)
                    g[k] += bwd_big(dout[k], bigv[k], smallv[k % inner], left_is_big);
            }
            if (smallp->requires_grad) {
                auto& g = bp.grad_of(smallp);
                for (size_t k = 0; k < dout.size(); ++k)
                    g[k % inner] += bwd_small(dout[k], bigv[k], smallv[k % inner], left_is_big);
            }
        });
}

void check_rank2(const Tensor& t, const char* op, const char* which) {
    if (t.rank() != 2)
        throw ShapeError(std::string(op) + ": " + which + " must be 2-D, shape is " +
                         shape_str(t.shape()));
}

}  // namespace

// ---- primitive implementations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul", "left operand");
    check_rank2(b, "matmul", "right operand");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return make_op_result({m, n}, std::move(out), {a, b},
                          [m, k, n](TensorImpl& self, BackwardPass& bp) {
                              TensorImpl* pa = self.parents[0].get();
                              TensorImpl* pb = self.parents[1].get();
                              const auto& dout = *bp.find(&self);
                              if (pa->requires_grad)
                                  mm_nt(dout.data(), pb->value.data(), bp.grad_of(pa).data(), m, n, k);
                              if (pb->requires_grad)
                                  mm_tn(pa->value.data(), dout.data(), bp.grad_of(pb).data(), m, k, n);
                          });
}

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double d, double, double, bool) { return d; },
        [](double d, double, double, bool) { return d; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double d, double, double, bool left_is_big) { return left_is_big ? d : -d; },
        [](double d, double, double, bool left_is_big) { return left_is_big ? -d : d; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double d, double, double s, bool) { return d * s; },
        [](double d, double bgv, double, bool) { return d * bgv; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        a, b, "div", [](double x, double y) { return x / y; },
        // d/d(big): big is numerator when left_is_big, else denominator.
        [](double d, double bgv, double s, bool left_is_big) {
            return left_is_big ? d / s : -d * s / (bgv * bgv);
        },
        [](double d, double bgv, double s, bool left_is_big) {
            return left_is_big ? -d * bgv / (s * s) : d / bgv;
        });
}

Tensor transpose(const Tensor& a) {
    check_rank2(a, "transpose", "operand");
    const int m = a.dim(0), n = a.dim(1);
    const auto v = a.data();
    std::vector<double> out(v.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = v[static_cast<size_t>(i) * n + j];
    return make_op_result({n, m}, std::move(out), {a}, [m, n](TensorImpl& self, BackwardPass& bp) {
        TensorImpl* p = self.parents[0].get();
        if (!p->requires_grad) return;
        const auto& dout = *bp.find(&self);
        auto& g = bp.grad_of(p);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                g[static_cast<size_t>(i) * n + j] += dout[static_cast<size_t>(j) * m + i];
    });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    check_shape_positive(shape);
    if (shape_product(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op_result(std::move(shape), std::move(out), {a},
                          [](TensorImpl& self, BackwardPass& bp) {
                              TensorImpl* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              const auto& dout = *bp.find(&self);
                              auto& g = bp.grad_of(p);
                              for (size_t i = 0; i < dout.size(); ++i) g[i] += dout[i];
                          });
}

Tensor softmax_rows(const Tensor& a) {
    if (a.rank() < 1) throw DomainError("softmax_rows: operand must have at least one dimension");
    const int d = a.shape().back();
    if (d < 1) throw DomainError("softmax_rows: empty rows");
    const int64_t rows = a.size() / d;
    const auto v = a.data();
    std::vector<double> out(v.size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = v.data() + r * d;
        double* y = out.data() + r * d;
        double mx = x[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (int j = 0; j < d; ++j) y[j] /= sum;
    }
    return make_op_result(a.shape(), std::move(out), {a},
                          [d, rows](TensorImpl& self, BackwardPass& bp) {
                              TensorImpl* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              const auto& dout = *bp.find(&self);
                              const auto& y = self.value;
                              auto& g = bp.grad_of(p);
                              for (int64_t r = 0; r < rows; ++r) {
                                  const double* yr = y.data() + r * d;
                                  const double* dr = dout.data() + r * d;
                                  double dot = 0.0;
                                  for (int j = 0; j < d; ++j) dot += dr[j] * yr[j];
                                  double* gr = g.data() + r * d;
                                  for (int j = 0; j < d; ++j) gr[j] += yr[j] * (dr[j] - dot);
                              }
                          });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain) {
    if (x.rank() < 1) throw ShapeError("rmsnorm: operand must have at least one dimension");
    const int d = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != d)
        throw ShapeError("rmsnorm: gain shape " + shape_str(gain.shape()) +
                         " does not match last dimension of " + shape_str(x.shape()));
    constexpr double kEps = 1e-30;
    const int64_t rows = x.size() / d;
    const auto xv = x.data();
    const auto gv = gain.data();
    std::vector<double> out(xv.size());
    std::vector<double> inv_rms(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double ss = 0.0;
        for (int j = 0; j < d; ++j) ss += xr[j] * xr[j];
        const double inv = 1.0 / std::sqrt(ss / d + kEps);
        inv_rms[static_cast<size_t>(r)] = inv;
        double* yr = out.data() + r * d;
        for (int j = 0; j < d; ++j) yr[j] = xr[j] * inv * gv[j];
    }
    return make_op_result(
        x.shape(), std::move(out), {x, gain},
        [d, rows, inv_rms = std::move(inv_rms)](TensorImpl& self, BackwardPass& bp) {
            TensorImpl* px = self.parents[0].get();
            TensorImpl* pg = self.parents[1].get();
            const auto& dout = *bp.find(&self);
            const auto& xv = px->value;
            const auto& gv = pg->value;
            if (px->requires_grad) {
                auto& gx = bp.grad_of(px);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = xv.data() + r * d;
                    const double* dr = dout.data() + r * d;
                    const double inv = inv_rms[static_cast<size_t>(r)];
                    double dot = 0.0;  // sum_k d_k g_k x_k
                    for (int j = 0; j < d; ++j) dot += dr[j] * gv[j] * xr[j];
                    const double scale = dot * inv * inv * inv / d;
                    double* gr = gx.data() + r * d;
                    for (int j = 0; j < d; ++j) gr[j] += dr[j] * gv[j] * inv - xr[j] * scale;
                }
            }
            if (pg->requires_grad) {
                auto& gg = bp.grad_of(pg);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = xv.data() + r * d;
                    const double* dr = dout.data() + r * d;
                    const double inv = inv_rms[static_cast<size_t>(r)];
                    for (int j = 0; j < d; ++j) gg[j] += dr[j] * xr[j] * inv;
                }
            }
        });
}

Tensor gelu(const Tensor& x) {
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
    return make_op_result(x.shape(), std::move(out), {x}, [](TensorImpl& self, BackwardPass& bp) {
        TensorImpl* p = self.parents[0].get();
        if (!p->requires_grad) return;
        const auto& dout = *bp.find(&self);
        const auto& xv = p->value;
        auto& g = bp.grad_of(p);
        constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (size_t i = 0; i < dout.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
            g[i] += dout[i] * (cdf + xv[i] * pdf);
        }
    });
}

Tensor embedding_lookup(const Tensor& table, const Tensor& ids) {
    check_rank2(table, "embedding_lookup", "table");
    const int64_t vocab = table.dim(0);
    const int d = table.dim(1);
    const auto idv = ids.data();
    const int64_t n = ids.size();
    std::vector<int64_t> index(static_cast<size_t>(n));
    for (int64_t t = 0; t < n; ++t)
        index[static_cast<size_t>(t)] = as_index(idv[static_cast<size_t>(t)], vocab, "embedding id");
    const auto tv = table.data();
    std::vector<double> out(static_cast<size_t>(n) * d);
    for (int64_t t = 0; t < n; ++t)
        std::copy_n(tv.data() + index[static_cast<size_t>(t)] * d, d, out.data() + t * d);
    return make_op_result({static_cast<int>(n), d}, std::move(out), {table, ids},
                          [d, index = std::move(index)](TensorImpl& self, BackwardPass& bp) {
                              TensorImpl* p = self.parents[0].get();
                              if (!p->requires_grad) return;
                              const auto& dout = *bp.find(&self);
                              auto& g = bp.grad_of(p);
                              for (size_t t = 0; t < index.size(); ++t) {
                                  double* dst = g.data() + index[t] * d;
                                  const double* src = dout.data() + t * d;
                                  for (int j = 0; j < d; ++j) dst[j] += src[j];
                              }
                          });
}

Tensor cross_entropy_rows(const Tensor& logits, const Tensor& targets) {
    check_rank2(logits, "cross_entropy_rows", "logits");
    const int n = logits.dim(0), v = logits.dim(1);
    if (v < 1) throw DomainError("cross_entropy_rows: empty rows");
    if (targets.size() != n)
        throw ShapeError("cross_entropy_rows: expected " + std::to_string(n) + " targets, got " +
                         std::to_string(targets.size()));
    const auto lv = logits.data();
    const auto tv = targets.data();
    std::vector<int64_t> index(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        index[static_cast<size_t>(i)] = as_index(tv[static_cast<size_t>(i)], v, "target token");
    std::vector<double> out(static_cast<size_t>(n));
    std::vector<double> probs(lv.size());  // cached softmax for the backward pass
    for (int i = 0; i < n; ++i) {
        const double* row = lv.data() + static_cast<size_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        double* prow = probs.data() + static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j) {
            prow[j] = std::exp(row[j] - mx);
            sum += prow[j];
        }
        for (int j = 0; j < v; ++j) prow[j] /= sum;
        out[static_cast<size_t>(i)] = std::log(sum) + mx - row[index[static_cast<size_t>(i)]];
    }
    return make_op_result(
        {n}, std::move(out), {logits, targets},
        [n, v, index = std::move(index), probs = std::move(probs)](TensorImpl& self,
                                                                   BackwardPass& bp) {
            TensorImpl* p = self.parents[0].get();
            if (!p->requires_grad) return;
            const auto& dout = *bp.find(&self);
            auto& g = bp.grad_of(p);
            for (int i = 0; i < n; ++i) {
                const double d = dout[static_cast<size_t>(i)];
                const double* prow = probs.data() + static_cast<size_t>(i) * v;
                double* grow = g.data() + static_cast<size_t>(i) * v;
                for (int j = 0; j < v; ++j) grow[j] += d * prow[j];
                grow[index[static_cast<size_t>(i)]] -= d;
            }
        });
}

Tensor frobenius_sq(const Tensor& a) {
    const auto v = a.data();
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return make_op_result({}, {acc}, {a}, [](TensorImpl& self, BackwardPass& bp) {
        TensorImpl* p = self.parents[0].get();
        if (!p->requires_grad) return;
        const double d = (*bp.find(&self))[0];
        auto& g = bp.grad_of(p);
        const auto& xv = p->value;
        for (size_t i = 0; i < xv.size(); ++i) g[i] += 2.0 * d * xv[i];
    });
}

Tensor mean(const Tensor& a) {
    const auto v = a.data();
    double acc = 0.0;
    for (double x : v) acc += x;
    const double n = static_cast<double>(v.size());
    return make_op_result({}, {acc / n}, {a}, [n](TensorImpl& self, BackwardPass& bp) {
        TensorImpl* p = self.parents[0].get();
        if (!p->requires_grad) return;
        const double d = (*bp.find(&self))[0] / n;
        auto& g = bp.grad_of(p);
        for (size_t i = 0; i < g.size(); ++i) g[i] += d;
    });
}

// ---- dispatch ----------------------------------------------------------

namespace {
const std::pair<OpKind, const char*> kOpNames[] = {
    {OpKind::matmul, "matmul"},
    {OpKind::add, "add"},
    {OpKind::mul, "mul"},
    {OpKind::sub, "sub"},
    {OpKind::div, "div"},
    {OpKind::transpose, "transpose"},
    {OpKind::reshape, "reshape"},
    {OpKind::softmax_rows, "softmax_rows"},
    {OpKind::rmsnorm, "rmsnorm"},
    {OpKind::gelu, "gelu"},
    {OpKind::embedding_lookup, "embedding_lookup"},
    {OpKind::cross_entropy_rows, "cross_entropy_rows"},
    {OpKind::frobenius_sq, "frobenius_sq"},
    {OpKind::mean, "mean"},
};
}  // namespace

OpKind op_kind_from_name(const std::string& name) {
    for (const auto& [kind, n] : kOpNames)
        if (name == n) return kind;
    throw ContractError("unknown primitive op: " + name);
}

const std::string& op_kind_name(OpKind kind) {
    static const std::unordered_map<OpKind, std::string> names = [] {
        std::unordered_map<OpKind, std::string> m;
        for (const auto& [k, n] : kOpNames) m[k] = n;
        return m;
    }();
    return names.at(kind);
}

Tensor forward_primitive(OpKind kind, const std::vector<Tensor>& inputs) {
    auto need = [&](size_t n) {
        if (inputs.size() != n)
            throw ContractError(op_kind_name(kind) + " expects " + std::to_string(n) +
                                " inputs, got " + std::to_string(inputs.size()));
    };
    switch (kind) {
        case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
        case OpKind::add: need(2); return add(inputs[0], inputs[1]);
        case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
        case OpKind::sub: need(2); return sub(inputs[0], inputs[1]);
        case OpKind::div: need(2); return div(inputs[0], inputs[1]);
        case OpKind::transpose: need(1); return transpose(inputs[0]);
        case OpKind::reshape: {
            need(2);
            std::vector<int> shape;
            for (double v : inputs[1].data())
                shape.push_back(static_cast<int>(as_index(v, 1 << 30, "reshape dimension")));
            return reshape(inputs[0], std::move(shape));
        }
        case OpKind::softmax_rows: need(1); return softmax_rows(inputs[0]);
        case OpKind::rmsnorm: need(2); return rmsnorm(inputs[0], inputs[1]);
        case OpKind::gelu: need(1); return gelu(inputs[0]);
        case OpKind::embedding_lookup: need(2); return embedding_lookup(inputs[0], inputs[1]);
        case OpKind::cross_entropy_rows: need(2); return cross_entropy_rows(inputs[0], inputs[1]);
        case OpKind::frobenius_sq: need(1); return frobenius_sq(inputs[0]);
        case OpKind::mean: need(1); return mean(inputs[0]);
    }
    throw ContractError("unhandled primitive op");
}

// ---- gradcheck ----------------------------------------------------------

double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
    if (!(h > 0)) throw ContractError("gradcheck: step h must be positive");
    Tensor x = point.clone_as_leaf(true);
    Tensor loss = f(x);
    if (loss.size() != 1 || loss.rank() != 0)
        throw ContractError("gradcheck: f must be scalar-valued");
    std::vector<double> analytic(static_cast<size_t>(point.size()), 0.0);
    if (loss.requires_grad()) {
        backward(loss);
        if (x.has_grad()) {
            auto g = x.grad();
            analytic.assign(g.begin(), g.end());
        }
    }
    double max_err = 0.0;
    Tensor probe = point.clone_as_leaf(false);
    auto pv = probe.mutable_data();
    for (int64_t i = 0; i < point.size(); ++i) {
        const double orig = pv[static_cast<size_t>(i)];
        pv[static_cast<size_t>(i)] = orig + h;
        const double fp = f(probe).item();
        pv[static_cast<size_t>(i)] = orig - h;
        const double fm = f(probe).item();
        pv[static_cast<size_t>(i)] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[static_cast<size_t>(i)];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
        max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
    return max_err;
}

}  // namespace lqec
