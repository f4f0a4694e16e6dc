#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace lqec {

struct TensorImpl;
class BackwardPass;

// Dense n-dimensional array of doubles with optional reverse-mode gradient.
//
// Tensor is a cheap shared handle: copies alias the same storage. The
// compute graph is implicit in the tensors themselves; every operation on
// an input that requires grad records its parents and a backprop closure
// on the result, and backward() replays them in reverse topological order.
// Graphs are per forward pass and are reclaimed when the result tensors go
// out of scope, so an optimization step frees its tape by dropping the loss.
//
// Tensors that do not require grad are immutable once handed to an
// operation and are safe to share across threads.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor identity(int n);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int rank() const;
    int dim(int i) const;
    int64_t size() const;

    std::span<const double> data() const;
    // Mutable access to the raw values. Only meaningful for leaf tensors
    // (parameters) before or between graph recordings; mutating a tensor
    // that an existing graph captured invalidates that graph's gradients.
    std::span<double> mutable_data();

    bool requires_grad() const;
    void set_requires_grad(bool value);

    // Gradient accumulated by backward(); empty span until populated.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    bool has_grad() const;
    void zero_grad();

    double item() const;                 // value of a scalar tensor
    double at(std::initializer_list<int> idx) const;

    Tensor detach() const;               // copies values, drops the graph
    Tensor clone_as_leaf(bool requires_grad) const;

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& shared_impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend struct TensorImpl;
    friend Tensor make_op_result(std::vector<int>, std::vector<double>,
                                 std::vector<Tensor>,
                                 std::function<void(TensorImpl&, BackwardPass&)>);
};

// ---- primitive operations --------------------------------------------

// 2-D matrix product. Accumulation over the inner dimension is sequential
// (lowest index first) for every output element, so results are
// bit-reproducible per build.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise arithmetic. Shapes must match exactly, or one operand's
// shape must be a suffix of the other's (trailing-dimension broadcast;
// scalars broadcast to anything).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);                     // 2-D
Tensor reshape(const Tensor& a, std::vector<int> shape);

// Row-wise softmax over the last dimension. Stable (max-subtracted);
// strictly positive for inputs whose row spread stays within the exp
// range (|x_i - max| < ~700); entries further below the row max underflow
// to exact zero.
Tensor softmax_rows(const Tensor& a);

// RMS normalization over the last dimension with a gain vector (no bias):
// y = x * gain / sqrt(mean(x^2) + 1e-30).
Tensor rmsnorm(const Tensor& x, const Tensor& gain);

// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

// table: [V, d]; ids: integer-valued tensor of any shape [n]; result [n, d].
Tensor embedding_lookup(const Tensor& table, const Tensor& ids);

// logits: [n, V]; targets: integer-valued [n]; result [n] of per-row
// negative log-likelihoods, computed with a stable log-sum-exp.
Tensor cross_entropy_rows(const Tensor& logits, const Tensor& targets);

Tensor frobenius_sq(const Tensor& a);                  // scalar sum of squares
Tensor mean(const Tensor& a);                          // scalar mean

// Uniform dispatch over the primitive set, used by the CLI-facing layers
// and the python bindings.
enum class OpKind {
    matmul, add, mul, sub, div, transpose, reshape, softmax_rows,
    rmsnorm, gelu, embedding_lookup, cross_entropy_rows, frobenius_sq, mean
};
OpKind op_kind_from_name(const std::string& name);
const std::string& op_kind_name(OpKind kind);
// reshape reads the target shape from an extra trailing input holding the
// dimensions as integer values.
Tensor forward_primitive(OpKind kind, const std::vector<Tensor>& inputs);

// Scoped suppression of graph recording on the current thread; forwards
// under a guard produce constant results regardless of input flags.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_recording_enabled();

// ---- reverse mode ----------------------------------------------------

// Collects leaf gradients instead of accumulating them into the leaves'
// own grad buffers. Lets concurrent backward passes over graphs that share
// parameters run race-free; merge() applies the collected sums in a fixed
// order chosen by the caller.
class GradSink {
public:
    void merge_into_grads() const;       // adds every entry to its leaf's grad
    bool empty() const { return grads_.empty(); }

private:
    friend void backward(const Tensor&, GradSink*);
    std::unordered_map<TensorImpl*, std::pair<std::shared_ptr<TensorImpl>, std::vector<double>>> grads_;
};

// Accumulates d(loss)/dt into t.grad for every tensor t with requires_grad
// reachable from loss (or into sink for shared leaves, when given).
// Repeated calls accumulate additively. loss must be a scalar attached to
// a graph with at least one grad-requiring input.
void backward(const Tensor& loss, GradSink* sink = nullptr);

// Max over coordinates of |analytic - central difference| /
// max(|analytic|, |central|, 1e-12) for a scalar-valued f at point.
double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                 double h);

}  // namespace lqec
