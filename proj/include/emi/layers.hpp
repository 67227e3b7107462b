#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "emi/tensor.hpp"

namespace emi {

/// Ordered (name, tensor) pairs. Tensors alias the owning module's storage.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

/// Deep copies with fresh storage.
ParamList clone_params(const ParamList& params);
/// Copies values name-by-name from src into dst; shapes must agree.
void copy_values(const ParamList& src, ParamList& dst);
void set_trainable(ParamList& params, bool trainable);
std::size_t count_scalars(const ParamList& params);

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

/// y = x W + b, W is [in x out].
struct Linear {
    Tensor weight;
    Tensor bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias = true);

    std::size_t in_features() const { return weight.rows(); }
    std::size_t out_features() const { return weight.cols(); }
    Tensor forward(const Tensor& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

enum class Activation { Tanh, Relu, Identity };

Tensor activate(const Tensor& x, Activation act);

/// Two affine maps with an activation in between.
struct Mlp {
    Linear first;
    Linear second;
    Activation activation = Activation::Tanh;

    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng,
        Activation act = Activation::Tanh);

    Tensor forward(const Tensor& x) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

} // namespace emi
