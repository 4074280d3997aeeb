#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "zskd/errors.hpp"

namespace zskd {

using Shape = std::vector<int>;

int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Padding { Valid, Same };

// Output extent of a convolution/pooling along one axis.
int conv_out_dim(int in, int k, int stride, Padding padding);

// Stability constant added inside cross_entropy's log.
inline constexpr double kLogEpsilon = 1e-12;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated on first use
    bool requires_grad = false;  // user-set, leaves only
    bool needs_grad = false;     // this node or some ancestor requires grad
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pushes grad into parents

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    bool is_leaf() const { return parents.empty() && !backprop; }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense n-d array of 64-bit reals with an optional gradient slot. Value
// semantics over a shared graph node: copying a Tensor aliases the node.
// Tensors written by an op are immutable; leaves may be mutated between
// graph builds (that is how the optimizer updates parameters).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node()->shape; }
    int64_t size() const { return node()->size(); }
    int rank() const { return static_cast<int>(node()->shape.size()); }

    double item() const;  // scalar tensors only

    std::span<const double> data() const { return node()->data; }
    // Leaves only: op outputs are immutable.
    std::span<double> mutable_data();

    bool requires_grad() const { return node()->requires_grad; }
    void set_requires_grad(bool rg);  // leaves only

    bool is_leaf() const { return node()->is_leaf(); }

    bool has_grad() const { return !node()->grad.empty(); }
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    detail::Node* node() const {
        if (!node_) throw StateError("tensor: use of an undefined tensor");
        return node_.get();
    }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    friend Tensor make_op_output(Shape shape, std::vector<double> data,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::Node&)> backprop,
                                 const char* op_name);

    std::shared_ptr<detail::Node> node_;
};

// ---- forward ops (all record the reverse pass when an input needs it) ----

// input [H,W,Cin] or [B,H,W,Cin]; kernels [kh,kw,Cin,Cout]; bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              int stride, Padding padding);

// input [H,W,C] or [B,H,W,C]; window k, given stride. Gradient routes to the
// first (row-major) argmax of each window.
Tensor maxpool2d(const Tensor& input, int k, int stride);

// input [n] or [B,n]; weight [n,m]; bias [m].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& input);

// Rowwise temperature softmax over [K] or [B,K]; max-subtracted.
Tensor softmax_t(const Tensor& logits, double tau);

// Both arguments are probability vectors ([K] or [B,K]); returns a scalar,
// meaned over the batch: -sum_i t_i * log(p_i + kLogEpsilon).
Tensor cross_entropy(const Tensor& target, const Tensor& predicted);

// Squared-distance alternative distillation loss: per-row sum of squared
// differences, meaned over the batch.
Tensor mse(const Tensor& target, const Tensor& predicted);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor sum(const Tensor& a);

// [B,H,W,C] -> [B,H*W*C] (or [H,W,C] -> [H*W*C]); row-major, so a copy-free
// relabeling of the same data.
Tensor flatten(const Tensor& a);

// Populates grad on every tensor that requires it, walking the recorded
// graph in reverse topological order. Leaf gradients accumulate across
// calls; call zero_grad between steps. Intermediate gradients are
// recomputed fresh each call.
void backward(const Tensor& loss);

// ---- optimizer ----

struct AdamState {
    std::vector<double> m;  // first moment
    std::vector<double> v;  // second moment
    int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    explicit AdamState(int64_t n) : m(n, 0.0), v(n, 0.0) {}
};

// Standard bias-corrected Adam update, in place.
void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, double lr);
void adam_step(Tensor& param, AdamState& state, double lr);

}  // namespace zskd
