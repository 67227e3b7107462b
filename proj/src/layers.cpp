#include "emi/layers.hpp"

#include <cmath>

#include "emi/ops.hpp"

namespace emi {

ParamList clone_params(const ParamList& params)
{
    ParamList out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) {
        out.emplace_back(name, t.detach());
    }
    return out;
}

void copy_values(const ParamList& src, ParamList& dst)
{
    if (src.size() != dst.size()) {
        throw DimensionError("copy_values: parameter count mismatch");
    }
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape()) {
            throw DimensionError("copy_values: mismatch at " + dst[i].first);
        }
        auto from = src[i].second.data();
        auto to = dst[i].second.mutable_data();
        std::copy(from.begin(), from.end(), to.begin());
    }
}

void set_trainable(ParamList& params, bool trainable)
{
    for (auto& [name, t] : params) {
        t.set_requires_grad(trainable);
    }
}

std::size_t count_scalars(const ParamList& params)
{
    std::size_t n = 0;
    for (const auto& p : params) {
        n += p.second.numel();
    }
    return n;
}

Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        x = dist(rng);
    }
    return Tensor(std::move(shape), std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias)
    : weight(uniform_init({in, out}, in, rng))
{
    if (with_bias) {
        bias = uniform_init({1, out}, in, rng);
    }
}

Tensor Linear::forward(const Tensor& x) const
{
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const
{
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) {
        out.emplace_back(prefix + ".bias", bias);
    }
}

Tensor activate(const Tensor& x, Activation act)
{
    switch (act) {
    case Activation::Tanh:
        return tanh(x);
    case Activation::Relu:
        return relu(x);
    case Activation::Identity:
        break;
    }
    return x;
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng, Activation act)
    : first(in, hidden, rng), second(hidden, out, rng), activation(act)
{
}

Tensor Mlp::forward(const Tensor& x) const { return second.forward(activate(first.forward(x), activation)); }

void Mlp::collect(ParamList& out, const std::string& prefix) const
{
    first.collect(out, prefix + ".0");
    second.collect(out, prefix + ".1");
}

} // namespace emi
