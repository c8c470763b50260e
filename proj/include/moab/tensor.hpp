#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "moab/common.hpp"

namespace moab {

class Tensor;

// Backward rule of one op: reads the output's accumulated gradient and
// scatters it into the parents' gradients.
using BackwardFn = std::function<void(Tensor& out)>;

// Dense row-major tensor of 64-bit floats with reverse-mode autodiff.
// Copies are shallow: they share the underlying node, so a Tensor behaves
// like a handle into the computation graph.
class Tensor {
public:
    using Shape = std::vector<std::size_t>;

    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor scalar(double value, bool requires_grad = false);

    // Graph-building hook used by every op, including ops defined in other
    // translation units. The output tracks gradients iff any parent does;
    // otherwise parents and the backward rule are dropped.
    static Tensor from_op(Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents, BackwardFn backward);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const;

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;                     // requires size() == 1
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    std::span<double> grad();
    std::span<const double> grad() const;
    void zero_grad();

    // Reverse-mode sweep from a scalar output. Gradients accumulate into
    // every reachable requires_grad tensor.
    void backward();

    std::size_t parent_count() const;
    Tensor& parent(std::size_t i);

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    struct Node;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    Node& node() const;

    std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. All are pure given their inputs (dropout additionally
// consumes the rng stream in training mode).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& x, const Tensor& y);        // same shape
Tensor sub(const Tensor& x, const Tensor& y);
Tensor mul(const Tensor& x, const Tensor& y);        // elementwise
Tensor scale(const Tensor& x, double c);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // [n x d] + [d]

Tensor matmul(const Tensor& x, const Tensor& y);     // [m x k]·[k x n]

// y = x·Wᵀ + b with W laid out [out x in]; the fully connected primitive.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_rows(const Tensor& x);                // [n x d], max-stabilized
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

// Per-pixel channel mixing: weight [Cout x C], bias [Cout], x [B x C x H x W].
Tensor conv2d_1x1(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Valid (unpadded) convolution, weight [Cout x Cin x k x k].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride);

Tensor global_avg_pool(const Tensor& x);             // [B x C x H x W] -> [B x C]

// Mean over the batch of -log softmax(logits)[label]; labels in {0,1,2}.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor sum(const Tensor& x);                         // -> scalar
Tensor mean(const Tensor& x);                        // -> scalar
Tensor reshape(const Tensor& x, Tensor::Shape new_shape);
Tensor row(const Tensor& x, std::size_t index);      // x[index, ...]
Tensor stack_rows(std::span<const Tensor> parts);    // k tensors of shape S -> [k, S...]
Tensor concat_cols(const Tensor& x, const Tensor& y);  // [n x a],[n x b] -> [n x a+b]

// gain·Q with orthonormal rows (rows <= cols) or columns (rows > cols),
// from a Gram-Schmidt pass over a standard-normal draw.
Tensor orthogonal_init(std::size_t rows, std::size_t cols, double gain, Rng& rng);

}  // namespace moab
