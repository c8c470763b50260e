#include "moab/nn.hpp"

#include <cmath>
#include <unordered_set>

namespace moab {

Parameter::Parameter(std::string name, Tensor value) : name(std::move(name)), value(std::move(value)) {
    if (!this->value.requires_grad()) this->value.set_requires_grad(true);
}

std::size_t count_params(const std::vector<Parameter>& params) {
    std::size_t total = 0;
    for (const Parameter& p : params) total += p.value.size();
    return total;
}

Linear::Linear(std::size_t in, std::size_t out, const std::string& name, Rng& rng, double gain)
    : weight(name + ".weight", orthogonal_init(out, in, gain, rng)),
      bias(name + ".bias", Tensor({out}, 0.0)) {}

void Linear::collect(std::vector<Parameter>& out) const {
    out.push_back(weight);
    out.push_back(bias);
}

LayerNorm::LayerNorm(std::size_t width, const std::string& name)
    : gamma(name + ".gamma", Tensor({width}, 1.0)), beta(name + ".beta", Tensor({width}, 0.0)) {}

void LayerNorm::collect(std::vector<Parameter>& out) const {
    out.push_back(gamma);
    out.push_back(beta);
}

Adam::Adam(std::vector<Parameter> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    std::unordered_set<std::string> names;
    for (const Parameter& p : params_) {
        if (!p.value.defined() || !p.value.requires_grad())
            throw StateError("optimizer parameter '" + p.name + "' has no gradient buffer");
        if (!names.insert(p.name).second)
            throw StateError("duplicate parameter name '" + p.name + "'");
        first_moment_.emplace_back(p.value.size(), 0.0);
        second_moment_.emplace_back(p.value.size(), 0.0);
    }
}

void Adam::step() {
    ++step_;
    const double bias1 = 1.0 - std::pow(config_.beta1, double(step_));
    const double bias2 = 1.0 - std::pow(config_.beta2, double(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter& p = params_[pi];
        if (!p.value.requires_grad())
            throw StateError("parameter '" + p.name + "' lost its gradient buffer");
        auto values = p.value.data();
        auto grads = p.value.grad();
        auto& m = first_moment_[pi];
        auto& v = second_moment_[pi];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grads[i] + config_.weight_decay * values[i];
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
            const double m_hat = m[i] / bias1;
            const double v_hat = v[i] / bias2;
            values[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
        }
        p.value.zero_grad();
    }
}

}  // namespace moab
