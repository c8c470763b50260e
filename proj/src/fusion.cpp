#include "moab/fusion.hpp"

#include <cmath>

namespace moab {

namespace {

void require_vector(const Tensor& v, const char* op) {
    if (v.rank() != 1)
        throw ShapeError(std::string(op) + " expects a vector, got " + shape_string(v.shape()));
}

void require_kind(const PaddedVector& v, PadKind expected, const char* op) {
    if (v.kind != expected)
        throw std::invalid_argument(std::string(op) + ": operand padded with " +
                                    (v.kind == PadKind::One ? "1" : "0") + ", expected " +
                                    (expected == PadKind::One ? "1" : "0"));
}

}  // namespace

PaddedVector pad(const Tensor& v, PadKind kind) {
    require_vector(v, "pad");
    const std::size_t n = v.size();
    std::vector<double> out(n + 1);
    out[0] = kind == PadKind::One ? 1.0 : 0.0;
    auto vv = v.data();
    for (std::size_t i = 0; i < n; ++i) out[i + 1] = vv[i];
    Tensor padded = Tensor::from_op({n + 1}, std::move(out), {v}, [n](Tensor& o) {
        Tensor& v = o.parent(0);
        if (!v.requires_grad()) return;
        auto g = o.grad();
        auto vg = v.grad();
        for (std::size_t i = 0; i < n; ++i) vg[i] += g[i + 1];
    });
    return {padded, kind};
}

Tensor outer_product(const PaddedVector& a1, const PaddedVector& b1) {
    require_kind(a1, PadKind::One, "outer_product");
    require_kind(b1, PadKind::One, "outer_product");
    const Tensor& a = a1.values;
    const Tensor& b = b1.values;
    const std::size_t n = a.size(), m = b.size();
    std::vector<double> out(n * m);
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i] * bv[j];
    return Tensor::from_op({n, m}, std::move(out), {a, b}, [n, m](Tensor& o) {
        auto g = o.grad();
        Tensor& a = o.parent(0);
        Tensor& b = o.parent(1);
        auto av = a.data(), bv = b.data();
        if (a.requires_grad()) {
            auto ag = a.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ag[i] += g[i * m + j] * bv[j];
        }
        if (b.requires_grad()) {
            auto bg = b.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) bg[j] += g[i * m + j] * av[i];
        }
    });
}

Tensor outer_division(const PaddedVector& a1, const PaddedVector& b1, double epsilon) {
    require_kind(a1, PadKind::One, "outer_division");
    require_kind(b1, PadKind::One, "outer_division");
    if (!(epsilon > 0.0)) throw std::invalid_argument("outer_division epsilon must be positive");
    const Tensor& a = a1.values;
    const Tensor& b = b1.values;
    const std::size_t n = a.size(), m = b.size();
    std::vector<double> out(n * m);
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i] / (bv[j] + epsilon);
    return Tensor::from_op({n, m}, std::move(out), {a, b}, [n, m, epsilon](Tensor& o) {
        auto g = o.grad();
        Tensor& a = o.parent(0);
        Tensor& b = o.parent(1);
        auto av = a.data(), bv = b.data();
        if (a.requires_grad()) {
            auto ag = a.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ag[i] += g[i * m + j] / (bv[j] + epsilon);
        }
        if (b.requires_grad()) {
            auto bg = b.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    const double denom = bv[j] + epsilon;
                    bg[j] -= g[i * m + j] * av[i] / (denom * denom);
                }
        }
    });
}

Tensor outer_addition(const PaddedVector& a0, const PaddedVector& b0) {
    require_kind(a0, PadKind::Zero, "outer_addition");
    require_kind(b0, PadKind::Zero, "outer_addition");
    const Tensor& a = a0.values;
    const Tensor& b = b0.values;
    const std::size_t n = a.size(), m = b.size();
    std::vector<double> out(n * m);
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i] + bv[j];
    return Tensor::from_op({n, m}, std::move(out), {a, b}, [n, m](Tensor& o) {
        auto g = o.grad();
        Tensor& a = o.parent(0);
        Tensor& b = o.parent(1);
        if (a.requires_grad()) {
            auto ag = a.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ag[i] += g[i * m + j];
        }
        if (b.requires_grad()) {
            auto bg = b.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) bg[j] += g[i * m + j];
        }
    });
}

Tensor outer_subtraction(const PaddedVector& a0, const PaddedVector& b0) {
    require_kind(a0, PadKind::Zero, "outer_subtraction");
    require_kind(b0, PadKind::Zero, "outer_subtraction");
    const Tensor& a = a0.values;
    const Tensor& b = b0.values;
    const std::size_t n = a.size(), m = b.size();
    std::vector<double> out(n * m);
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i] - bv[j];
    return Tensor::from_op({n, m}, std::move(out), {a, b}, [n, m](Tensor& o) {
        auto g = o.grad();
        Tensor& a = o.parent(0);
        Tensor& b = o.parent(1);
        if (a.requires_grad()) {
            auto ag = a.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ag[i] += g[i * m + j];
        }
        if (b.requires_grad()) {
            auto bg = b.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) bg[j] -= g[i * m + j];
        }
    });
}

Tensor fused_branch_stack(const Tensor& a, const Tensor& b, double epsilon) {
    require_vector(a, "fused_branch_stack");
    require_vector(b, "fused_branch_stack");
    const PaddedVector a1 = pad(a, PadKind::One), b1 = pad(b, PadKind::One);
    const PaddedVector a0 = pad(a, PadKind::Zero), b0 = pad(b, PadKind::Zero);
    const Tensor planes[] = {
        sigmoid(outer_addition(a0, b0)),
        sigmoid(outer_subtraction(a0, b0)),
        sigmoid(outer_product(a1, b1)),
        sigmoid(outer_division(a1, b1, epsilon)),
    };
    return stack_rows(planes);
}

// ---------------------------------------------------------------------------
// Fusion head
// ---------------------------------------------------------------------------

std::string to_string(FusionVariant variant) {
    switch (variant) {
        case FusionVariant::Moab: return "moab";
        case FusionVariant::Concat: return "concat";
        case FusionVariant::OafOnly: return "oaf";
        case FusionVariant::Dbf: return "dbf";
        case FusionVariant::StdAdd: return "std-add";
    }
    throw std::invalid_argument("unknown fusion variant");
}

FusionVariant fusion_variant_from_string(const std::string& name) {
    if (name == "moab") return FusionVariant::Moab;
    if (name == "concat") return FusionVariant::Concat;
    if (name == "oaf") return FusionVariant::OafOnly;
    if (name == "dbf") return FusionVariant::Dbf;
    if (name == "std-add") return FusionVariant::StdAdd;
    throw std::invalid_argument("unknown fusion variant '" + name +
                                "' (expected moab, concat, oaf, dbf or std-add)");
}

std::size_t FusionConfig::channels() const {
    switch (variant) {
        case FusionVariant::Moab: return 4;
        case FusionVariant::Dbf: return 2;
        case FusionVariant::OafOnly: return 1;
        default: return 0;
    }
}

std::size_t FusionConfig::resolved_expand() const {
    if (std_add_expand != 0) return std_add_expand;
    // Pick the width making the standard-addition head match the OAF head's
    // parameter count:  W*(D+1) + W*H  ==  F*H.
    const double numerator = double(flatten_width()) * double(head_hidden);
    const double denominator = double(feature_dim + 1 + head_hidden);
    return std::size_t(std::llround(numerator / denominator));
}

FusionHead::FusionHead(const FusionConfig& config, Rng& rng) : config_(config) {
    if (config_.feature_dim == 0) throw std::invalid_argument("feature_dim must be positive");
    if (!(config_.epsilon_div > 0.0)) throw std::invalid_argument("epsilon_div must be positive");
    if (!(config_.dropout_rate >= 0.0 && config_.dropout_rate < 1.0))
        throw std::invalid_argument("dropout_rate must lie in [0, 1)");

    const std::size_t channels = config_.channels();
    if (channels >= 2) {
        // Near-uniform channel mixing at init so the condensed map starts out
        // close to the branch mean.
        std::normal_distribution<double> jitter(0.0, 0.01);
        std::vector<double> w(channels);
        for (double& e : w) e = 1.0 / double(channels) + jitter(rng);
        conv_weight_ = Parameter("head.conv.weight", Tensor({1, channels}, std::move(w)));
        conv_bias_ = Parameter("head.conv.bias", Tensor({1}, 0.0));
    }

    std::size_t fc1_in = 0;
    switch (config_.variant) {
        case FusionVariant::Moab:
        case FusionVariant::Dbf:
        case FusionVariant::OafOnly:
            fc1_in = config_.flatten_width();
            break;
        case FusionVariant::Concat:
            fc1_in = 2 * config_.feature_dim;
            break;
        case FusionVariant::StdAdd:
            expand_ = Linear(config_.feature_dim, config_.resolved_expand(), "head.expand", rng);
            fc1_in = config_.resolved_expand();
            break;
    }
    fc1_ = Linear(fc1_in, config_.head_hidden, "head.fc1", rng);
    fc2_ = Linear(config_.head_hidden, 3, "head.fc2", rng);
}

std::vector<Tensor> FusionHead::branch_planes(const Tensor& a_row, const Tensor& b_row) const {
    const PaddedVector a0 = pad(a_row, PadKind::Zero), b0 = pad(b_row, PadKind::Zero);
    switch (config_.variant) {
        case FusionVariant::Moab: {
            const PaddedVector a1 = pad(a_row, PadKind::One), b1 = pad(b_row, PadKind::One);
            return {sigmoid(outer_addition(a0, b0)), sigmoid(outer_subtraction(a0, b0)),
                    sigmoid(outer_product(a1, b1)),
                    sigmoid(outer_division(a1, b1, config_.epsilon_div))};
        }
        case FusionVariant::Dbf: {
            const PaddedVector a1 = pad(a_row, PadKind::One), b1 = pad(b_row, PadKind::One);
            return {sigmoid(outer_addition(a0, b0)), sigmoid(outer_product(a1, b1))};
        }
        case FusionVariant::OafOnly:
            return {sigmoid(outer_addition(a0, b0))};
        default:
            throw StateError("branch_planes: variant has no outer branches");
    }
}

Tensor FusionHead::fused_features(const Tensor& a, const Tensor& b) const {
    const std::size_t batch = a.dim(0);
    switch (config_.variant) {
        case FusionVariant::Concat:
            return concat_cols(a, b);
        case FusionVariant::StdAdd:
            return sigmoid(expand_->forward(add(a, b)));
        default:
            break;
    }
    std::vector<Tensor> per_sample;
    per_sample.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        const std::vector<Tensor> planes = branch_planes(row(a, i), row(b, i));
        per_sample.push_back(stack_rows(planes));
    }
    Tensor stacked = stack_rows(per_sample);  // [B x C x E x E]
    if (conv_weight_) stacked = conv2d_1x1(stacked, conv_weight_->value, conv_bias_->value);
    return reshape(stacked, {batch, config_.flatten_width()});
}

FusionOutput FusionHead::forward(const Tensor& a_in, const Tensor& b_in, bool training,
                                 Rng& rng) const {
    const bool single = a_in.rank() == 1;
    if (a_in.rank() != b_in.rank())
        throw ShapeError("fusion inputs differ in rank: " + shape_string(a_in.shape()) + " vs " +
                         shape_string(b_in.shape()));
    Tensor a = single ? reshape(a_in, {1, a_in.size()}) : a_in;
    Tensor b = single ? reshape(b_in, {1, b_in.size()}) : b_in;
    if (a.rank() != 2 || a.dim(1) != config_.feature_dim || b.dim(1) != config_.feature_dim ||
        a.dim(0) != b.dim(0))
        throw ShapeError("fusion expects [batch x " + std::to_string(config_.feature_dim) +
                         "] embeddings, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));

    Tensor hidden = relu(fc1_.forward(fused_features(a, b)));
    Tensor dropped = dropout(hidden, config_.dropout_rate, training, rng);
    Tensor logits = fc2_.forward(dropped);
    if (single) {
        logits = reshape(logits, {3});
        hidden = reshape(hidden, {config_.head_hidden});
    }
    return {logits, hidden};
}

FusionOutput FusionHead::forward(const Tensor& a, const Tensor& b) const {
    Rng unused(0);
    return forward(a, b, /*training=*/false, unused);
}

Tensor FusionHead::condensed_map(const Tensor& a, const Tensor& b) const {
    require_vector(a, "condensed_map");
    require_vector(b, "condensed_map");
    if (config_.channels() == 0)
        throw StateError("condensed_map: variant '" + to_string(config_.variant) +
                         "' has no stacked branches");
    Tensor stacked = stack_rows(std::vector<Tensor>{stack_rows(branch_planes(a, b))});
    if (conv_weight_) stacked = conv2d_1x1(stacked, conv_weight_->value, conv_bias_->value);
    const std::size_t e = config_.plane_extent();
    return reshape(stacked, {1, e, e});
}

void FusionHead::collect(std::vector<Parameter>& out) const {
    if (conv_weight_) {
        out.push_back(*conv_weight_);
        out.push_back(*conv_bias_);
    }
    if (expand_) expand_->collect(out);
    fc1_.collect(out);
    fc2_.collect(out);
}

std::vector<Parameter> FusionHead::parameters() const {
    std::vector<Parameter> out;
    collect(out);
    return out;
}

std::size_t FusionHead::parameter_count() const { return count_params(parameters()); }

}  // namespace moab
