#include "moab/backbones.hpp"

namespace moab {

namespace {

void check_width(const Tensor& x, std::size_t expected, const char* what) {
    if (x.rank() != 2 || x.dim(1) != expected)
        throw ShapeError(std::string(what) + " expects [batch x " + std::to_string(expected) +
                         "], got " + shape_string(x.shape()));
}

// Orthogonal init over the flattened [Cout x Cin*k*k] filter matrix.
Parameter conv_parameter(const std::string& name, std::size_t cout, std::size_t cin,
                         std::size_t kernel, Rng& rng) {
    Tensor flat = orthogonal_init(cout, cin * kernel * kernel, 1.0, rng);
    std::vector<double> data(flat.data().begin(), flat.data().end());
    return Parameter(name, Tensor({cout, cin, kernel, kernel}, std::move(data)));
}

}  // namespace

GenomicMLP::GenomicMLP(Rng& rng, double dropout_rate)
    : fc1_(kGeneFeatures, 80, "mlp.fc1", rng),
      fc2_(80, 40, "mlp.fc2", rng),
      fc3_(40, kEmbeddingDim, "mlp.fc3", rng),
      norm1_(80, "mlp.norm1"),
      norm2_(40, "mlp.norm2"),
      norm3_(kEmbeddingDim, "mlp.norm3"),
      dropout_rate_(dropout_rate) {}

Tensor GenomicMLP::embed(const Tensor& genes, bool training, Rng& rng) const {
    check_width(genes, kGeneFeatures, "GenomicMLP");
    Tensor h = norm1_.forward(relu(fc1_.forward(genes)));
    h = norm2_.forward(relu(fc2_.forward(h)));
    h = dropout(h, dropout_rate_, training, rng);
    h = norm3_.forward(relu(fc3_.forward(h)));
    return dropout(h, dropout_rate_, training, rng);
}

void GenomicMLP::collect(std::vector<Parameter>& out) const {
    fc1_.collect(out);
    norm1_.collect(out);
    fc2_.collect(out);
    norm2_.collect(out);
    fc3_.collect(out);
    norm3_.collect(out);
}

std::vector<Parameter> GenomicMLP::parameters() const {
    std::vector<Parameter> out;
    collect(out);
    return out;
}

std::size_t GenomicMLP::parameter_count() const { return count_params(parameters()); }

ToyImageEncoder::ToyImageEncoder(Rng& rng)
    : conv1_weight_(conv_parameter("img.conv1.weight", 8, 1, 3, rng)),
      conv1_bias_("img.conv1.bias", Tensor({8}, 0.0)),
      conv2_weight_(conv_parameter("img.conv2.weight", 16, 8, 3, rng)),
      conv2_bias_("img.conv2.bias", Tensor({16}, 0.0)),
      fc_(16, kEmbeddingDim, "img.fc", rng) {}

Tensor ToyImageEncoder::embed(const Tensor& images, bool training, Rng& rng) const {
    (void)training;
    (void)rng;
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != kImageExtent ||
        images.dim(3) != kImageExtent)
        throw ShapeError("ToyImageEncoder expects [batch x 1 x 32 x 32], got " +
                         shape_string(images.shape()));
    Tensor h = relu(conv2d(images, conv1_weight_.value, conv1_bias_.value, 2));  // -> 8 x 15 x 15
    h = relu(conv2d(h, conv2_weight_.value, conv2_bias_.value, 2));              // -> 16 x 7 x 7
    return fc_.forward(global_avg_pool(h));
}

void ToyImageEncoder::collect(std::vector<Parameter>& out) const {
    out.push_back(conv1_weight_);
    out.push_back(conv1_bias_);
    out.push_back(conv2_weight_);
    out.push_back(conv2_bias_);
    fc_.collect(out);
}

std::vector<Parameter> ToyImageEncoder::parameters() const {
    std::vector<Parameter> out;
    collect(out);
    return out;
}

std::size_t ToyImageEncoder::parameter_count() const { return count_params(parameters()); }

UnimodalTail::UnimodalTail(const std::string& name, Rng& rng, double dropout_rate)
    : fc_(kEmbeddingDim, 3, name + ".fc", rng), dropout_rate_(dropout_rate) {}

Tensor UnimodalTail::logits(const Tensor& embedding, bool training, Rng& rng) const {
    check_width(embedding, kEmbeddingDim, "UnimodalTail");
    return fc_.forward(dropout(embedding, dropout_rate_, training, rng));
}

void UnimodalTail::collect(std::vector<Parameter>& out) const { fc_.collect(out); }

}  // namespace moab
