#pragma once

#include <string>
#include <vector>

#include "moab/tensor.hpp"

namespace moab {

// A named trainable tensor. The tensor always tracks gradients; the name is
// a path unique within one model ("mlp.fc2.weight").
struct Parameter {
    std::string name;
    Tensor value;

    Parameter() = default;
    Parameter(std::string name, Tensor value);
};

std::size_t count_params(const std::vector<Parameter>& params);

// Fully connected layer, weight [out x in] with orthogonal init, zero bias.
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, const std::string& name, Rng& rng, double gain = 1.0);

    Tensor forward(const Tensor& x) const { return linear(x, weight.value, bias.value); }
    void collect(std::vector<Parameter>& out) const;

    std::size_t in_features() const { return weight.value.dim(1); }
    std::size_t out_features() const { return weight.value.dim(0); }

    Parameter weight;
    Parameter bias;
};

// Per-row normalization with learned affine (gamma starts at 1, beta at 0).
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(std::size_t width, const std::string& name);

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma.value, beta.value); }
    void collect(std::vector<Parameter>& out) const;

    Parameter gamma;
    Parameter beta;
};

struct AdamConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with L2-style weight decay folded into the gradient before the moment
// update. step() zeroes gradients after applying the update.
class Adam {
public:
    Adam(std::vector<Parameter> params, AdamConfig config);

    void step();
    std::int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return config_; }

private:
    std::vector<Parameter> params_;
    std::vector<std::vector<double>> first_moment_;
    std::vector<std::vector<double>> second_moment_;
    AdamConfig config_;
    std::int64_t step_ = 0;
};

}  // namespace moab
