#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moab/nn.hpp"
#include "moab/tensor.hpp"

namespace moab {

// Denominator guard for the division branch.
inline constexpr double kDivisionEpsilon = 1.2e-20;

// Leading pad constant: 1 for product/division, 0 for addition/subtraction.
// The pad keeps the original vectors visible in row 0 / column 0 of every
// outer matrix.
enum class PadKind { One, Zero };

struct PaddedVector {
    Tensor values;  // length N+1, element 0 is the pad constant
    PadKind kind;
};

PaddedVector pad(const Tensor& v, PadKind kind);

// The four outer-arithmetic operators. Each combines all pairs of entries of
// two padded vectors into an (N+1) x (M+1) matrix:
//   product      P[i][j] = a1[i] * b1[j]
//   division     D[i][j] = a1[i] / (b1[j] + eps)
//   addition     A[i][j] = a0[i] + b0[j]
//   subtraction  S[i][j] = a0[i] - b0[j]
Tensor outer_product(const PaddedVector& a1, const PaddedVector& b1);
Tensor outer_division(const PaddedVector& a1, const PaddedVector& b1,
                      double epsilon = kDivisionEpsilon);
Tensor outer_addition(const PaddedVector& a0, const PaddedVector& b0);
Tensor outer_subtraction(const PaddedVector& a0, const PaddedVector& b0);

// All four squashed branches of one sample stacked along a leading channel
// axis in the order A, S, P, D.
Tensor fused_branch_stack(const Tensor& a, const Tensor& b,
                          double epsilon = kDivisionEpsilon);

enum class FusionVariant { Moab, Concat, OafOnly, Dbf, StdAdd };

std::string to_string(FusionVariant variant);
FusionVariant fusion_variant_from_string(const std::string& name);

struct FusionConfig {
    FusionVariant variant = FusionVariant::Moab;
    double epsilon_div = kDivisionEpsilon;
    std::size_t feature_dim = 32;   // modality embedding width
    std::size_t head_hidden = 64;
    double dropout_rate = 0.1;
    // Width of the standard-addition expansion layer; 0 selects the width
    // that matches the OAF head's parameter count.
    std::size_t std_add_expand = 0;

    std::size_t plane_extent() const { return feature_dim + 1; }
    std::size_t flatten_width() const { return plane_extent() * plane_extent(); }
    std::size_t channels() const;     // branch count for the stacked variants
    std::size_t resolved_expand() const;
};

struct FusionOutput {
    Tensor logits;     // [batch x 3] (or [3] for a single sample)
    Tensor embedding;  // penultimate activation, [batch x head_hidden]
};

// One fusion classifier head over a pair of modality embeddings. The MOAB
// variant stacks all four branches and condenses them with a learned 1x1
// convolution; the ablation variants reduce or bypass that stage.
class FusionHead {
public:
    FusionHead(const FusionConfig& config, Rng& rng);

    // a, b: [batch x feature_dim] or single vectors [feature_dim].
    FusionOutput forward(const Tensor& a, const Tensor& b, bool training, Rng& rng) const;

    // Eval-mode forward; no dropout stream consumed.
    FusionOutput forward(const Tensor& a, const Tensor& b) const;

    // The condensed map M* of one sample: post-conv [1 x E x E] for MOAB and
    // DBF, the single squashed branch for OAF.
    Tensor condensed_map(const Tensor& a, const Tensor& b) const;

    void collect(std::vector<Parameter>& out) const;
    std::vector<Parameter> parameters() const;
    std::size_t parameter_count() const;

    const FusionConfig& config() const { return config_; }

private:
    Tensor fused_features(const Tensor& a, const Tensor& b) const;
    std::vector<Tensor> branch_planes(const Tensor& a_row, const Tensor& b_row) const;

    FusionConfig config_;
    std::optional<Parameter> conv_weight_;  // [1 x channels]
    std::optional<Parameter> conv_bias_;    // [1]
    std::optional<Linear> expand_;          // StdAdd only
    Linear fc1_;
    Linear fc2_;
};

}  // namespace moab
