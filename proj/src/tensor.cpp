#include "karm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace karm {

namespace {

using detail::Node;

std::int64_t numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::shared_ptr<Node> make_node(std::vector<int> shape, std::vector<double> data,
                                bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

[[noreturn]] void shape_error(const std::string& op, const std::vector<int>& a,
                              const std::vector<int>& b) {
    throw std::invalid_argument("shape mismatch in " + op + ": " + shape_str(a) +
                                " vs " + shape_str(b));
}

// Builds the result node of an op. Parents and backprop are only recorded
// when grad will actually flow.
Tensor make_result(std::vector<int> shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backprop) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    auto n = make_node(std::move(shape), std::move(data), needs);
    if (needs) {
        for (const auto& t : inputs) n->parents.push_back(t.node_ptr());
        n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto n = numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("from_data: shape " + shape_str(shape) +
                                    " does not match data length " +
                                    std::to_string(data.size()));
    return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor");
    return node_->data[0];
}

Tensor Tensor::detach() const {
    return Tensor(make_node(node_->shape, node_->data, false));
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        std::vector<double> out(a.data());
        for (std::int64_t i = 0; i < b.size(); ++i) out[i] += b.data()[i];
        auto* an = a.node();
        auto* bn = b.node();
        return make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
            }
        });
    }
    // (B,N) + (N,) bias broadcast
    if (a.shape().size() == 2 && b.shape().size() == 1 && a.shape()[1] == b.shape()[0]) {
        int B = a.shape()[0], N = a.shape()[1];
        std::vector<double> out(a.data());
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < N; ++j) out[i * N + j] += b.data()[j];
        auto* an = a.node();
        auto* bn = b.node();
        return make_result(a.shape(), std::move(out), {a, b}, [an, bn, B, N](Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < B; ++i)
                    for (int j = 0; j < N; ++j) bn->grad[j] += self.grad[i * N + j];
            }
        });
    }
    shape_error("add", a.shape(), b.shape());
}

Tensor mul_elementwise(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul_elementwise", a.shape(), b.shape());
    std::vector<double> out(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto* an = a.node();
    auto* bn = b.node();
    return make_result(a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->data[i];
        }
    });
}

Tensor sub_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (auto& v : out) v -= c;
    auto* an = a.node();
    return make_result(a.shape(), std::move(out), {a}, [an](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (auto& v : out) v *= c;
    auto* an = a.node();
    return make_result(a.shape(), std::move(out), {a}, [an, c](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    });
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = std::max(0.0, a.data()[i]);
    auto* an = a.node();
    return make_result(a.shape(), std::move(out), {a}, [an](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (an->data[i] > 0.0) an->grad[i] += self.grad[i];
    });
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
    auto* an = a.node();
    return make_result(a.shape(), std::move(out), {a}, [an](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double s = self.data[i];
            an->grad[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

Tensor tanh_op(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = std::tanh(a.data()[i]);
    auto* an = a.node();
    return make_result(a.shape(), std::move(out), {a}, [an](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double t = self.data[i];
            an->grad[i] += self.grad[i] * (1.0 - t * t);
        }
    });
}

Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    auto* an = a.node();
    return make_result({1}, {s}, {a}, [an](Node& self) {
        an->ensure_grad();
        for (auto& g : an->grad) g += self.grad[0];
    });
}

Tensor l1_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += std::abs(v);
    auto* an = a.node();
    return make_result({1}, {s}, {a}, [an](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < an->data.size(); ++i) {
            double d = an->data[i];
            // subgradient 0 at exactly 0
            an->grad[i] += self.grad[0] * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        shape_error("matmul", a.shape(), b.shape());
    int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    std::vector<double> out(static_cast<size_t>(M) * N, 0.0);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k) {
            double av = a.data()[i * K + k];
            if (av == 0.0) continue;
            for (int j = 0; j < N; ++j) out[i * N + j] += av * b.data()[k * N + j];
        }
    auto* an = a.node();
    auto* bn = b.node();
    return make_result({M, N}, std::move(out), {a, b}, [an, bn, M, K, N](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) {
                    double g = self.grad[i * N + j];
                    if (g == 0.0) continue;
                    for (int k = 0; k < K; ++k) an->grad[i * K + k] += g * bn->data[k * N + j];
                }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) {
                    double av = an->data[i * K + k];
                    if (av == 0.0) continue;
                    for (int j = 0; j < N; ++j) bn->grad[k * N + j] += av * self.grad[i * N + j];
                }
        }
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.shape().size() != 4 || w.shape().size() != 4 || x.shape()[1] != w.shape()[1])
        shape_error("conv2d", x.shape(), w.shape());
    int B = x.shape()[0], IC = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int OC = w.shape()[0], KH = w.shape()[2], KW = w.shape()[3];
    if (bias.shape() != std::vector<int>{OC}) shape_error("conv2d bias", bias.shape(), {OC});
    int OH = H - KH + 1, OW = W - KW + 1;
    if (OH <= 0 || OW <= 0) shape_error("conv2d", x.shape(), w.shape());

    std::vector<double> out(static_cast<size_t>(B) * OC * OH * OW);
    const auto& xd = x.data();
    const auto& wd = w.data();
    for (int b = 0; b < B; ++b)
        for (int oc = 0; oc < OC; ++oc)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = bias.data()[oc];
                    for (int ic = 0; ic < IC; ++ic)
                        for (int kh = 0; kh < KH; ++kh) {
                            const double* xr = &xd[((b * IC + ic) * H + oh + kh) * W + ow];
                            const double* wr = &wd[((oc * IC + ic) * KH + kh) * KW];
                            for (int kw = 0; kw < KW; ++kw) acc += xr[kw] * wr[kw];
                        }
                    out[((b * OC + oc) * OH + oh) * OW + ow] = acc;
                }

    auto* xn = x.node();
    auto* wn = w.node();
    auto* bn = bias.node();
    return make_result({B, OC, OH, OW}, std::move(out), {x, w, bias},
                       [xn, wn, bn, B, IC, H, W, OC, KH, KW, OH, OW](Node& self) {
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int oc = 0; oc < OC; ++oc)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        double g = self.grad[((b * OC + oc) * OH + oh) * OW + ow];
                        if (g == 0.0) continue;
                        if (bn->requires_grad) bn->grad[oc] += g;
                        for (int ic = 0; ic < IC; ++ic)
                            for (int kh = 0; kh < KH; ++kh) {
                                size_t xoff = ((b * IC + ic) * H + oh + kh) * W + ow;
                                size_t woff = ((oc * IC + ic) * KH + kh) * KW;
                                if (xn->requires_grad)
                                    for (int kw = 0; kw < KW; ++kw)
                                        xn->grad[xoff + kw] += g * wn->data[woff + kw];
                                if (wn->requires_grad)
                                    for (int kw = 0; kw < KW; ++kw)
                                        wn->grad[woff + kw] += g * xn->data[xoff + kw];
                            }
                    }
    });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (numel(shape) != a.size())
        throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " +
                                    shape_str(shape) + " changes element count");
    auto* an = a.node();
    return make_result(std::move(shape), a.data(), {a}, [an](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor repeat_batch(const Tensor& a, int batch) {
    std::vector<int> shape;
    shape.push_back(batch);
    for (int d : a.shape()) shape.push_back(d);
    std::vector<double> out;
    out.reserve(a.size() * batch);
    for (int b = 0; b < batch; ++b)
        out.insert(out.end(), a.data().begin(), a.data().end());
    auto* an = a.node();
    std::int64_t n = a.size();
    return make_result(std::move(shape), std::move(out), {a}, [an, batch, n](Node& self) {
        an->ensure_grad();
        for (int b = 0; b < batch; ++b)
            for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[b * n + i];
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape().size() != 2)
        throw std::invalid_argument("softmax_cross_entropy: logits must be 2-d, got " +
                                    shape_str(logits.shape()));
    int B = logits.shape()[0], N = logits.shape()[1];
    if (static_cast<int>(labels.size()) != B)
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for batch " + std::to_string(B));
    for (int y : labels)
        if (y < 0 || y >= N)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) +
                                        " out of range [0," + std::to_string(N) + ")");
    // keep softmax for backward
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(B) * N);
    double loss = 0.0;
    for (int i = 0; i < B; ++i) {
        const double* row = &logits.data()[i * N];
        double mx = *std::max_element(row, row + N);
        double z = 0.0;
        for (int j = 0; j < N; ++j) z += std::exp(row[j] - mx);
        double logz = std::log(z) + mx;
        for (int j = 0; j < N; ++j) (*probs)[i * N + j] = std::exp(row[j] - logz);
        loss += logz - row[labels[i]];
    }
    loss /= B;
    auto* ln = logits.node();
    auto labels_copy = labels;
    return make_result({1}, {loss}, {logits},
                       [ln, probs, labels_copy, B, N](Node& self) {
        ln->ensure_grad();
        double g = self.grad[0] / B;
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < N; ++j) {
                double d = (*probs)[i * N + j] - (j == labels_copy[i] ? 1.0 : 0.0);
                ln->grad[i * N + j] += g * d;
            }
    });
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    // iterative topological sort over parent links
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

}  // namespace karm
