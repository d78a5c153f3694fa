#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedinject/autodiff.hpp"
#include "fedinject/tensor.hpp"

namespace fedinject::nn {

using tensor::Conv2dSpec;
using tensor::Parameter;
using tensor::Tape;
using tensor::Tensor;
using tensor::Val;

/// Named handle used by serialization, aggregation and optimizers.
struct NamedParam {
    std::string name;
    Parameter* param = nullptr;
};

/// Gaussian init scaled by 1/sqrt(fan_in); every weight gets its own stream
/// keyed by (init_key, local name) so layouts never depend on construction order.
Tensor gaussian_init(std::vector<std::size_t> shape, std::size_t fan_in, std::uint64_t key);

struct Linear {
    Parameter w; // [in x out]
    Parameter b; // [out]
    bool has_bias = true;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, std::uint64_t init_key, bool bias = true);

    Val forward(Tape& tape, Val x) const;
    void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

struct Conv2dLayer {
    Conv2dSpec spec;
    Parameter w; // [Cout x Cin*Kh*Kw]
    Parameter b; // [Cout]

    Conv2dLayer() = default;
    Conv2dLayer(Conv2dSpec s, std::uint64_t init_key);

    Val forward(Tape& tape, Val x) const;
    void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

/// in -> hidden (ReLU) -> out.
struct Mlp {
    Linear fc1;
    Linear fc2;

    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t init_key);

    Val forward(Tape& tape, Val x) const;
    void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

} // namespace fedinject::nn
