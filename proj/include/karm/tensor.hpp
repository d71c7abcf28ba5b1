#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace karm {

namespace detail {

struct Node {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates this node's grad into the parents' grads.
    std::function<void(Node&)> backprop;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

/// Dense n-d array of doubles with reverse-mode autodiff. Value type;
/// copies share the underlying node (graph edges are shared_ptr links).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    std::int64_t size() const { return node_->size(); }
    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::vector<double>& grad() { return node_->grad; }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
    void clear_grad() { node_->grad.clear(); }

    /// Value of a scalar (single-element) tensor.
    double item() const;

    /// Detached copy: same shape/data, no graph history.
    Tensor detach() const;

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Forward ops. Each records enough state for backward() when any input
// requires grad.
Tensor add(const Tensor& a, const Tensor& b);           // same shape, or (B,N)+(N,)
Tensor mul_elementwise(const Tensor& a, const Tensor& b);
Tensor sub_scalar(const Tensor& a, double c);           // a - c
Tensor scale(const Tensor& a, double c);                // c * a
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor sum(const Tensor& a);                            // -> scalar
Tensor l1_norm(const Tensor& a);                        // -> scalar, sum |a_i|
Tensor matmul(const Tensor& a, const Tensor& b);        // (M,K)x(K,N)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias);  // valid, stride 1
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor repeat_batch(const Tensor& a, int batch);        // (C,H,W) -> (B,C,H,W)

/// Mean cross-entropy of softmax(logits) against integer labels.
/// logits: (B,N); labels.size() == B.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Populates grads of every tensor reachable from `loss` that requires grad.
/// Grads accumulate additively across fan-out. Throws if loss is non-scalar.
void backward(const Tensor& loss);

std::string shape_str(const std::vector<int>& shape);

}  // namespace karm
