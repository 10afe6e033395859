#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gct/rng.hpp"

namespace gct::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
long long shape_numel(const Shape& s);

struct TensorImpl;

/// Dense row-major float64 tensor with optional reverse-mode gradient
/// tracking. Copying a Tensor copies a handle; the storage is shared.
/// Values are immutable once an op has consumed them (mutating leaf data is
/// allowed between graph constructions, e.g. by the optimizer).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    int dim(int i) const;
    long long numel() const;
    bool requires_grad() const;

    const std::string& name() const;
    Tensor& set_name(std::string n);

    std::vector<double>& data();
    const std::vector<double>& data() const;

    /// Gradient buffer; allocated (zero-filled) on first access.
    std::vector<double>& grad();
    bool has_grad() const;
    void zero_grad();

    /// Scalar access helpers.
    double value() const;
    double at(int i) const;
    double at(int i, int j) const;

    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> ptr() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until needed
    bool requires_grad = false;
    uint64_t id = 0;
    const char* op = "leaf";
    std::string name;
    std::vector<Tensor> parents;
    // Reads this node's grad and accumulates contributions into parent grads.
    std::function<void(TensorImpl&)> backward_fn;
};

/// Thread-local autodiff switch. Ops record graph structure only while
/// enabled and at least one input requires a gradient.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Creates an op node. `backward` receives the node's output gradient and
/// must accumulate into the grads of whichever parents require them. Used by
/// every built-in op and available for custom differentiable ops.
Tensor make_op(const char* op_name, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(const std::vector<double>& out_grad)> backward);

// ---- elementwise (NumPy-style broadcasting on binary ops) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh_act(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor clamp_min(const Tensor& a, double lo);

// ---- linear algebra ----
/// Matrix product over the last two axes; leading (batch) axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D only

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(const Tensor& a, const Tensor& b);          // 2-D
Tensor slice_cols(const Tensor& a, int start, int count);      // 2-D
Tensor gather_rows(const Tensor& a, const std::vector<int>& indices);

// ---- reductions / normalization ----
Tensor softmax(const Tensor& a, int axis);

struct MaxReduce {
    Tensor values;            // input shape with `axis` removed
    std::vector<int> argmax;  // flat, first index wins ties
};
MaxReduce reduce_max(const Tensor& a, int axis);

Tensor reduce_sum(const Tensor& a, int axis, bool keepdim);
Tensor reduce_mean(const Tensor& a, int axis, bool keepdim);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

/// (x - mean) / sqrt(var + eps) along `axis`.
Tensor layer_normalize(const Tensor& a, int axis, double eps = 1e-5);
/// (x - mean) / (std + eps) along `axis`; constant slices map to zero.
Tensor context_normalize(const Tensor& a, int axis, double eps = 1e-5);

/// Mean over elements of weight * (max(o,0) - o*y + log(1+exp(-|o|))).
/// `targets` and `weights` are treated as constants.
Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& targets,
                            const std::vector<double>& weights);

// ---- reverse pass ----

/// One node of a recorded computation, in topological order.
struct GraphNode {
    uint64_t id;
    const char* op;
    std::vector<uint64_t> inputs;
};
struct GraphRecord {
    std::vector<GraphNode> nodes;
};
GraphRecord record_graph(const Tensor& root);

/// Reverse-topological gradient accumulation from a scalar loss. Leaf grads
/// accumulate across calls; interior grads are fresh per call.
void backward(const Tensor& loss);

// ---- optimizer ----
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, double lr = 1e-3, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8);
    /// Applies one update from the current grads. Throws on a NaN gradient,
    /// naming the offending parameter.
    void step();
    void zero_grad();
    long step_count() const { return step_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, eps_;
    long step_ = 0;
};

// ---- checkpoints ----
// Flat binary format, little-endian: magic "GCTCKPT1", u32 param count, then
// per parameter {u32 name length, name bytes, u32 rank, i64 dims..., f64 data}.
void save_checkpoint(const std::string& path, const std::vector<Tensor>& params);
void load_checkpoint(const std::string& path, std::vector<Tensor>& params);

}  // namespace gct::ad
