#pragma once

#include <vector>

#include "moab/nn.hpp"
#include "moab/tensor.hpp"

namespace moab {

inline constexpr std::size_t kGeneFeatures = 80;
inline constexpr std::size_t kImageExtent = 32;
inline constexpr std::size_t kEmbeddingDim = 32;

// Genomic encoder: three FC blocks with output widths [80, 40, 32], each
// block FC -> ReLU -> layer norm, dropout 0.2 after blocks 2 and 3.
class GenomicMLP {
public:
    explicit GenomicMLP(Rng& rng, double dropout_rate = 0.2);

    // genes: [batch x 80] -> [batch x 32]
    Tensor embed(const Tensor& genes, bool training, Rng& rng) const;

    void collect(std::vector<Parameter>& out) const;
    std::vector<Parameter> parameters() const;
    std::size_t parameter_count() const;

private:
    Linear fc1_, fc2_, fc3_;
    LayerNorm norm1_, norm2_, norm3_;
    double dropout_rate_;
};

// Small trainable image encoder producing the same 32-wide embedding contract
// as a full CNN backbone: two strided 3x3 convolutions, global average pool,
// FC to 32.
class ToyImageEncoder {
public:
    explicit ToyImageEncoder(Rng& rng);

    // images: [batch x 1 x 32 x 32] -> [batch x 32]
    Tensor embed(const Tensor& images, bool training, Rng& rng) const;

    void collect(std::vector<Parameter>& out) const;
    std::vector<Parameter> parameters() const;
    std::size_t parameter_count() const;

private:
    Parameter conv1_weight_, conv1_bias_;
    Parameter conv2_weight_, conv2_bias_;
    Linear fc_;
};

// Classifier tail for single-modality runs: dropout 0.2 then FC(32 -> 3).
class UnimodalTail {
public:
    UnimodalTail(const std::string& name, Rng& rng, double dropout_rate = 0.2);

    Tensor logits(const Tensor& embedding, bool training, Rng& rng) const;

    void collect(std::vector<Parameter>& out) const;

private:
    Linear fc_;
    double dropout_rate_;
};

}  // namespace moab
