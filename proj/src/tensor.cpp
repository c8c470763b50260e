#include "moab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace moab {

namespace {

std::size_t shape_product(const Tensor::Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

[[noreturn]] void throw_shape(const std::string& op, const Tensor& a, const Tensor& b) {
    throw ShapeError(op + ": incompatible shapes " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()));
}

}  // namespace

struct Tensor::Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized iff requires_grad
    bool requires_grad = false;
    std::vector<Tensor> parents;
    BackwardFn backward;
};

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : Tensor(std::move(shape), std::vector<double>(), requires_grad) {
    node_->data.assign(shape_product(node_->shape), fill);
    if (requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    for (std::size_t d : node_->shape) {
        if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(node_->shape));
    }
    node_->data = std::move(data);
    if (!node_->data.empty() && node_->data.size() != shape_product(node_->shape)) {
        throw ShapeError("data length " + std::to_string(node_->data.size()) +
                         " does not match shape " + shape_string(node_->shape));
    }
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad.assign(shape_product(node_->shape), 0.0);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::from_op(Shape shape, std::vector<double> data,
                       std::vector<Tensor> parents, BackwardFn backward) {
    bool needs_grad = false;
    for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
    Tensor out(std::move(shape), std::move(data), needs_grad);
    if (needs_grad) {
        out.node_->parents = std::move(parents);
        out.node_->backward = std::move(backward);
    }
    return out;
}

Tensor::Node& Tensor::node() const {
    if (!node_) throw StateError("operation on an undefined tensor");
    return *node_;
}

const Tensor::Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
    return s[axis];
}

std::size_t Tensor::size() const { return node().data.size(); }

std::span<double> Tensor::data() { return node().data; }
std::span<const double> Tensor::data() const { return node().data; }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a scalar, got " + shape_string(shape()));
    return node().data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_string(s));
    std::size_t flat = 0, axis = 0;
    for (std::size_t i : index) {
        if (i >= s[axis]) throw ShapeError("index out of range for " + shape_string(s));
        flat = flat * s[axis] + i;
        ++axis;
    }
    return node().data[flat];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    Node& n = node();
    n.requires_grad = on;
    if (on) n.grad.assign(n.data.size(), 0.0);
    else n.grad.clear();
    return *this;
}

std::span<double> Tensor::grad() {
    Node& n = node();
    if (!n.requires_grad) throw StateError("tensor has no gradient buffer");
    return n.grad;
}

std::span<const double> Tensor::grad() const {
    const Node& n = node();
    if (!n.requires_grad) throw StateError("tensor has no gradient buffer");
    return n.grad;
}

void Tensor::zero_grad() {
    Node& n = node();
    std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

std::size_t Tensor::parent_count() const { return node().parents.size(); }

Tensor& Tensor::parent(std::size_t i) {
    Node& n = node();
    if (i >= n.parents.size()) throw StateError("parent index out of range");
    return n.parents[i];
}

void Tensor::backward() {
    if (size() != 1) throw ShapeError("backward() requires a scalar output, got " + shape_string(shape()));
    if (!requires_grad()) throw StateError("backward() on a tensor that does not require gradients");

    // Iterative post-order over the parent DAG, deduplicated by node identity.
    std::vector<Tensor> topo;
    std::unordered_set<const Node*> visited;
    struct Frame {
        Tensor tensor;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({*this, 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& top = stack.back();
        Node& n = top.tensor.node();
        if (top.next_parent < n.parents.size()) {
            Tensor& p = n.parents[top.next_parent++];
            if (visited.insert(p.node_.get()).second) stack.push_back({p, 0});
        } else {
            topo.push_back(top.tensor);
            stack.pop_back();
        }
    }

    node_->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node& n = it->node();
        if (n.backward) n.backward(*it);
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

void accumulate(Tensor& t, std::span<const double> contribution) {
    if (!t.requires_grad()) return;
    auto g = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

}  // namespace

Tensor add(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape()) throw_shape("add", x, y);
    std::vector<double> out(x.size());
    auto xv = x.data(), yv = y.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i];
    return Tensor::from_op(x.shape(), std::move(out), {x, y}, [](Tensor& o) {
        accumulate(o.parent(0), o.grad());
        accumulate(o.parent(1), o.grad());
    });
}

Tensor sub(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape()) throw_shape("sub", x, y);
    std::vector<double> out(x.size());
    auto xv = x.data(), yv = y.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] - yv[i];
    return Tensor::from_op(x.shape(), std::move(out), {x, y}, [](Tensor& o) {
        auto g = o.grad();
        accumulate(o.parent(0), g);
        Tensor& y = o.parent(1);
        if (y.requires_grad()) {
            auto yg = y.grad();
            for (std::size_t i = 0; i < yg.size(); ++i) yg[i] -= g[i];
        }
    });
}

Tensor mul(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape()) throw_shape("mul", x, y);
    std::vector<double> out(x.size());
    auto xv = x.data(), yv = y.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * yv[i];
    return Tensor::from_op(x.shape(), std::move(out), {x, y}, [](Tensor& o) {
        auto g = o.grad();
        Tensor& x = o.parent(0);
        Tensor& y = o.parent(1);
        auto xv = x.data(), yv = y.data();
        if (x.requires_grad()) {
            auto xg = x.grad();
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g[i] * yv[i];
        }
        if (y.requires_grad()) {
            auto yg = y.grad();
            for (std::size_t i = 0; i < yg.size(); ++i) yg[i] += g[i] * xv[i];
        }
    });
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
    return Tensor::from_op(x.shape(), std::move(out), {x}, [c](Tensor& o) {
        Tensor& x = o.parent(0);
        if (!x.requires_grad()) return;
        auto g = o.grad();
        auto xg = x.grad();
        for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += c * g[i];
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) throw_shape("add_bias", x, bias);
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(x.size());
    auto xv = x.data(), bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
    return Tensor::from_op(x.shape(), std::move(out), {x, bias}, [rows, cols](Tensor& o) {
        auto g = o.grad();
        accumulate(o.parent(0), g);
        Tensor& b = o.parent(1);
        if (b.requires_grad()) {
            auto bg = b.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) bg[c] += g[r * cols + c];
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& x, const Tensor& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) throw_shape("matmul", x, y);
    const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
    std::vector<double> out(m * n, 0.0);
    auto xv = x.data(), yv = y.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double xip = xv[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xip * yv[p * n + j];
        }
    return Tensor::from_op({m, n}, std::move(out), {x, y}, [m, k, n](Tensor& o) {
        auto g = o.grad();
        Tensor& x = o.parent(0);
        Tensor& y = o.parent(1);
        auto xv = x.data(), yv = y.data();
        if (x.requires_grad()) {
            auto xg = x.grad();  // dX = dZ · Yᵀ
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) xg[i * k + p] += gij * yv[p * n + j];
                }
        }
        if (y.requires_grad()) {
            auto yg = y.grad();  // dY = Xᵀ · dZ
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double xip = xv[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) yg[p * n + j] += xip * g[i * n + j];
                }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) throw_shape("linear", x, weight);
    const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (bias.rank() != 1 || bias.dim(0) != out_dim) throw_shape("linear bias", weight, bias);
    std::vector<double> out(rows * out_dim);
    auto xv = x.data(), wv = weight.data(), bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = bv[o];
            for (std::size_t i = 0; i < in; ++i) acc += xv[r * in + i] * wv[o * in + i];
            out[r * out_dim + o] = acc;
        }
    return Tensor::from_op({rows, out_dim}, std::move(out), {x, weight, bias},
                           [rows, in, out_dim](Tensor& o) {
        auto g = o.grad();
        Tensor& x = o.parent(0);
        Tensor& w = o.parent(1);
        Tensor& b = o.parent(2);
        auto xv = x.data(), wv = w.data();
        if (x.requires_grad()) {
            auto xg = x.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t od = 0; od < out_dim; ++od) {
                    const double gro = g[r * out_dim + od];
                    for (std::size_t i = 0; i < in; ++i) xg[r * in + i] += gro * wv[od * in + i];
                }
        }
        if (w.requires_grad()) {
            auto wg = w.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t od = 0; od < out_dim; ++od) {
                    const double gro = g[r * out_dim + od];
                    for (std::size_t i = 0; i < in; ++i) wg[od * in + i] += gro * xv[r * in + i];
                }
        }
        if (b.requires_grad()) {
            auto bg = b.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t od = 0; od < out_dim; ++od) bg[od] += g[r * out_dim + od];
        }
    });
}

// ---------------------------------------------------------------------------
// Activations and normalization
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return Tensor::from_op(x.shape(), std::move(out), {x}, [](Tensor& o) {
        Tensor& x = o.parent(0);
        if (!x.requires_grad()) return;
        auto g = o.grad();
        auto xv = x.data();
        auto xg = x.grad();
        for (std::size_t i = 0; i < xg.size(); ++i)
            if (xv[i] > 0.0) xg[i] += g[i];
    });
}

namespace {

// Overflow-free logistic; saturates cleanly to 0 / 1 for huge |x|.
double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(xv[i]);
    return Tensor::from_op(x.shape(), std::move(out), {x}, [](Tensor& o) {
        Tensor& x = o.parent(0);
        if (!x.requires_grad()) return;
        auto g = o.grad();
        auto s = o.data();
        auto xg = x.grad();
        for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g[i] * s[i] * (1.0 - s[i]);
    });
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows expects a matrix, got " + shape_string(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(x.size());
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = xv[r * cols];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xv[r * cols + c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = std::exp(xv[r * cols + c] - mx);
            denom += out[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= denom;
    }
    return Tensor::from_op(x.shape(), std::move(out), {x}, [rows, cols](Tensor& o) {
        Tensor& x = o.parent(0);
        if (!x.requires_grad()) return;
        auto g = o.grad();
        auto s = o.data();
        auto xg = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * s[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
                xg[r * cols + c] += s[r * cols + c] * (g[r * cols + c] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    if (x.rank() != 2) throw ShapeError("layer_norm expects a matrix, got " + shape_string(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gamma.size() != cols || beta.size() != cols) throw_shape("layer_norm affine", x, gamma);
    constexpr double kVarEps = 1e-5;

    std::vector<double> out(x.size());
    std::vector<double> normalized(x.size());
    std::vector<double> rstd(rows);
    auto xv = x.data(), gv = gamma.data(), bv = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += xv[r * cols + c];
        mu /= double(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = xv[r * cols + c] - mu;
            var += d * d;
        }
        var /= double(cols);
        rstd[r] = 1.0 / std::sqrt(var + kVarEps);
        for (std::size_t c = 0; c < cols; ++c) {
            normalized[r * cols + c] = (xv[r * cols + c] - mu) * rstd[r];
            out[r * cols + c] = gv[c] * normalized[r * cols + c] + bv[c];
        }
    }
    return Tensor::from_op(x.shape(), std::move(out), {x, gamma, beta},
                           [rows, cols, normalized = std::move(normalized),
                            rstd = std::move(rstd)](Tensor& o) {
        auto g = o.grad();
        Tensor& x = o.parent(0);
        Tensor& gamma = o.parent(1);
        Tensor& beta = o.parent(2);
        auto gv = gamma.data();
        if (gamma.requires_grad()) {
            auto gg = gamma.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * normalized[r * cols + c];
        }
        if (beta.requires_grad()) {
            auto bg = beta.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) bg[c] += g[r * cols + c];
        }
        if (x.requires_grad()) {
            auto xg = x.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double dxhat = g[r * cols + c] * gv[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * normalized[r * cols + c];
                }
                const double inv_n = 1.0 / double(cols);
                for (std::size_t c = 0; c < cols; ++c) {
                    const double dxhat = g[r * cols + c] * gv[c];
                    xg[r * cols + c] += rstd[r] * (dxhat - inv_n * sum_dxhat -
                                                   normalized[r * cols + c] * inv_n * sum_dxhat_xhat);
                }
            }
        }
    });
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw std::invalid_argument("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;

    // Inverted dropout: survivors scaled at train time, eval is the identity.
    const double keep_scale = 1.0 / (1.0 - rate);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> mask(x.size());
    std::vector<double> out(x.size());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = unit(rng) < rate ? 0.0 : keep_scale;
        out[i] = xv[i] * mask[i];
    }
    return Tensor::from_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Tensor& o) {
        Tensor& x = o.parent(0);
        if (!x.requires_grad()) return;
        auto g = o.grad();
        auto xg = x.grad();
        for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// Convolutions and pooling
// ---------------------------------------------------------------------------

Tensor conv2d_1x1(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 4 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) throw_shape("conv2d_1x1", x, weight);
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0);
    if (bias.size() != cout) throw_shape("conv2d_1x1 bias", weight, bias);
    const std::size_t hw = h * w;
    std::vector<double> out(batch * cout * hw);
    auto xv = x.data(), wv = weight.data(), bv = bias.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t p = 0; p < hw; ++p) {
                double acc = bv[o];
                for (std::size_t c = 0; c < cin; ++c) acc += wv[o * cin + c] * xv[(b * cin + c) * hw + p];
                out[(b * cout + o) * hw + p] = acc;
            }
    return Tensor::from_op({batch, cout, h, w}, std::move(out), {x, weight, bias},
                           [batch, cin, cout, hw](Tensor& o) {
        auto g = o.grad();
        Tensor& x = o.parent(0);
        Tensor& w = o.parent(1);
        Tensor& b = o.parent(2);
        auto xv = x.data(), wv = w.data();
        if (x.requires_grad()) {
            auto xg = x.grad();
            for (std::size_t bb = 0; bb < batch; ++bb)
                for (std::size_t oo = 0; oo < cout; ++oo)
                    for (std::size_t p = 0; p < hw; ++p) {
                        const double go = g[(bb * cout + oo) * hw + p];
                        for (std::size_t c = 0; c < cin; ++c) xg[(bb * cin + c) * hw + p] += go * wv[oo * cin + c];
                    }
        }
        if (w.requires_grad()) {
            auto wg = w.grad();
            for (std::size_t bb = 0; bb < batch; ++bb)
                for (std::size_t oo = 0; oo < cout; ++oo)
                    for (std::size_t p = 0; p < hw; ++p) {
                        const double go = g[(bb * cout + oo) * hw + p];
                        for (std::size_t c = 0; c < cin; ++c) wg[oo * cin + c] += go * xv[(bb * cin + c) * hw + p];
                    }
        }
        if (b.requires_grad()) {
            auto bg = b.grad();
            for (std::size_t bb = 0; bb < batch; ++bb)
                for (std::size_t oo = 0; oo < cout; ++oo)
                    for (std::size_t p = 0; p < hw; ++p) bg[oo] += g[(bb * cout + oo) * hw + p];
        }
    });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
    if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) throw_shape("conv2d", x, weight);
    if (stride == 0) throw std::invalid_argument("conv2d stride must be positive");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (bias.size() != cout) throw_shape("conv2d bias", weight, bias);
    if (kh > h || kw > w) throw_shape("conv2d kernel larger than input", x, weight);
    const std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;

    std::vector<double> out(batch * cout * oh * ow);
    auto xv = x.data(), wv = weight.data(), bv = bias.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = bv[o];
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t u = 0; u < kh; ++u)
                            for (std::size_t v = 0; v < kw; ++v)
                                acc += wv[((o * cin + c) * kh + u) * kw + v] *
                                       xv[((b * cin + c) * h + i * stride + u) * w + j * stride + v];
                    out[((b * cout + o) * oh + i) * ow + j] = acc;
                }
    return Tensor::from_op({batch, cout, oh, ow}, std::move(out), {x, weight, bias},
                           [batch, cin, cout, h, w, kh, kw, oh, ow, stride](Tensor& t) {
        auto g = t.grad();
        Tensor& x = t.parent(0);
        Tensor& wt = t.parent(1);
        Tensor& b = t.parent(2);
        auto xv = x.data(), wv = wt.data();
        for (std::size_t bb = 0; bb < batch; ++bb)
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const double go = g[((bb * cout + o) * oh + i) * ow + j];
                        if (b.requires_grad()) b.grad()[o] += go;
                        for (std::size_t c = 0; c < cin; ++c)
                            for (std::size_t u = 0; u < kh; ++u)
                                for (std::size_t v = 0; v < kw; ++v) {
                                    const std::size_t xi = ((bb * cin + c) * h + i * stride + u) * w + j * stride + v;
                                    const std::size_t wi = ((o * cin + c) * kh + u) * kw + v;
                                    if (x.requires_grad()) x.grad()[xi] += go * wv[wi];
                                    if (wt.requires_grad()) wt.grad()[wi] += go * xv[xi];
                                }
                    }
    });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool expects [B x C x H x W], got " + shape_string(x.shape()));
    const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<double> out(batch * ch, 0.0);
    auto xv = x.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
            double acc = 0.0;
            for (std::size_t p = 0; p < hw; ++p) acc += xv[(b * ch + c) * hw + p];
            out[b * ch + c] = acc / double(hw);
        }
    return Tensor::from_op({batch, ch}, std::move(out), {x}, [batch, ch, hw](Tensor& o) {
        Tensor& x = o.parent(0);
        if (!x.requires_grad()) return;
        auto g = o.grad();
        auto xg = x.grad();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < ch; ++c) {
                const double share = g[b * ch + c] / double(hw);
                for (std::size_t p = 0; p < hw; ++p) xg[(b * ch + c) * hw + p] += share;
            }
    });
}

// ---------------------------------------------------------------------------
// Loss and reductions
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy expects [batch x classes], got " + shape_string(logits.shape()));
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(batch));
    for (int l : labels)
        if (l < 0 || std::size_t(l) >= classes)
            throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");

    auto lv = logits.data();
    std::vector<double> probs(logits.size());
    double total = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        double mx = lv[r * classes];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, lv[r * classes + c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            probs[r * classes + c] = std::exp(lv[r * classes + c] - mx);
            denom += probs[r * classes + c];
        }
        for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= denom;
        total += mx + std::log(denom) - lv[r * classes + std::size_t(labels[r])];
    }
    std::vector<int> labels_copy(labels.begin(), labels.end());
    return Tensor::from_op({1}, {total / double(batch)}, {logits},
                           [batch, classes, probs = std::move(probs),
                            labels = std::move(labels_copy)](Tensor& o) {
        Tensor& logits = o.parent(0);
        if (!logits.requires_grad()) return;
        const double g = o.grad()[0] / double(batch);
        auto lg = logits.grad();
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t c = 0; c < classes; ++c) {
                const double one_hot = (c == std::size_t(labels[r])) ? 1.0 : 0.0;
                lg[r * classes + c] += g * (probs[r * classes + c] - one_hot);
            }
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return Tensor::from_op({1}, {acc}, {x}, [](Tensor& o) {
        Tensor& x = o.parent(0);
        if (!x.requires_grad()) return;
        const double g = o.grad()[0];
        auto xg = x.grad();
        for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g;
    });
}

Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / double(x.size()));
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Tensor::Shape new_shape) {
    std::size_t n = 1;
    for (std::size_t d : new_shape) n *= d;
    if (n != x.size())
        throw ShapeError("reshape from " + shape_string(x.shape()) + " to " + shape_string(new_shape));
    std::vector<double> out(x.data().begin(), x.data().end());
    return Tensor::from_op(std::move(new_shape), std::move(out), {x}, [](Tensor& o) {
        accumulate(o.parent(0), o.grad());
    });
}

Tensor row(const Tensor& x, std::size_t index) {
    if (x.rank() < 1 || index >= x.dim(0))
        throw ShapeError("row " + std::to_string(index) + " out of range for " + shape_string(x.shape()));
    Tensor::Shape sub(x.shape().begin() + 1, x.shape().end());
    if (sub.empty()) sub = {1};
    const std::size_t width = x.size() / x.dim(0);
    std::vector<double> out(x.data().begin() + index * width, x.data().begin() + (index + 1) * width);
    return Tensor::from_op(std::move(sub), std::move(out), {x}, [index, width](Tensor& o) {
        Tensor& x = o.parent(0);
        if (!x.requires_grad()) return;
        auto g = o.grad();
        auto xg = x.grad();
        for (std::size_t i = 0; i < width; ++i) xg[index * width + i] += g[i];
    });
}

Tensor stack_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("stack_rows requires at least one tensor");
    const Tensor::Shape& base = parts[0].shape();
    for (const Tensor& p : parts)
        if (p.shape() != base) throw_shape("stack_rows", parts[0], p);
    const std::size_t width = parts[0].size();
    Tensor::Shape out_shape;
    out_shape.push_back(parts.size());
    out_shape.insert(out_shape.end(), base.begin(), base.end());
    std::vector<double> out;
    out.reserve(parts.size() * width);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return Tensor::from_op(std::move(out_shape), std::move(out),
                           std::vector<Tensor>(parts.begin(), parts.end()), [width](Tensor& o) {
        auto g = o.grad();
        for (std::size_t k = 0; k < o.parent_count(); ++k) {
            Tensor& p = o.parent(k);
            if (!p.requires_grad()) continue;
            auto pg = p.grad();
            for (std::size_t i = 0; i < width; ++i) pg[i] += g[k * width + i];
        }
    });
}

Tensor concat_cols(const Tensor& x, const Tensor& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0)) throw_shape("concat_cols", x, y);
    const std::size_t rows = x.dim(0), xc = x.dim(1), yc = y.dim(1);
    std::vector<double> out(rows * (xc + yc));
    auto xv = x.data(), yv = y.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < xc; ++c) out[r * (xc + yc) + c] = xv[r * xc + c];
        for (std::size_t c = 0; c < yc; ++c) out[r * (xc + yc) + xc + c] = yv[r * yc + c];
    }
    return Tensor::from_op({rows, xc + yc}, std::move(out), {x, y}, [rows, xc, yc](Tensor& o) {
        auto g = o.grad();
        Tensor& x = o.parent(0);
        Tensor& y = o.parent(1);
        if (x.requires_grad()) {
            auto xg = x.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < xc; ++c) xg[r * xc + c] += g[r * (xc + yc) + c];
        }
        if (y.requires_grad()) {
            auto yg = y.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < yc; ++c) yg[r * yc + c] += g[r * (xc + yc) + xc + c];
        }
    });
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

Tensor orthogonal_init(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
    if (rows == 0 || cols == 0) throw ShapeError("orthogonal_init requires positive extents");
    const bool transpose = rows > cols;  // orthonormalize the shorter side
    const std::size_t m = transpose ? cols : rows;
    const std::size_t n = transpose ? rows : cols;

    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> basis(m, std::vector<double>(n));
    for (auto& v : basis)
        for (double& e : v) e = normal(rng);

    // Modified Gram-Schmidt with one re-orthogonalization pass. A degenerate
    // residual (probability ~0) is redrawn.
    for (std::size_t i = 0; i < m; ++i) {
        for (int attempt = 0;; ++attempt) {
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t j = 0; j < i; ++j) {
                    double dot = 0.0;
                    for (std::size_t k = 0; k < n; ++k) dot += basis[i][k] * basis[j][k];
                    for (std::size_t k = 0; k < n; ++k) basis[i][k] -= dot * basis[j][k];
                }
            double norm = 0.0;
            for (double e : basis[i]) norm += e * e;
            norm = std::sqrt(norm);
            if (norm > 1e-12) {
                for (double& e : basis[i]) e /= norm;
                break;
            }
            if (attempt > 8) throw StateError("orthogonal_init failed to produce an independent draw");
            for (double& e : basis[i]) e = normal(rng);
        }
    }

    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double v = gain * basis[i][k];
            if (transpose) out[k * cols + i] = v;
            else out[i * cols + k] = v;
        }
    return Tensor({rows, cols}, std::move(out));
}

}  // namespace moab
