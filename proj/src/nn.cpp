#include "fedinject/nn.hpp"

#include <cmath>

#include "fedinject/rng.hpp"

namespace fedinject::nn {

Tensor gaussian_init(std::vector<std::size_t> shape, std::size_t fan_in, std::uint64_t key) {
    Tensor t(std::move(shape));
    rng::Stream s(key);
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
    for (double& v : t.data()) v = scale * s.normal();
    return t;
}

Linear::Linear(std::size_t in, std::size_t out, std::uint64_t init_key, bool bias)
    : w(gaussian_init({in, out}, in, rng::derive(init_key, "w"))),
      b(Tensor({out})),
      has_bias(bias) {}

Val Linear::forward(Tape& tape, Val x) const {
    Val y = tensor::matmul(x, tape.leaf(const_cast<Parameter&>(w)));
    if (has_bias) y = tensor::add(y, tape.leaf(const_cast<Parameter&>(b)));
    return y;
}

void Linear::collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + "/w", &w});
    if (has_bias) out.push_back({prefix + "/b", &b});
}

Conv2dLayer::Conv2dLayer(Conv2dSpec s, std::uint64_t init_key)
    : spec(s),
      w(gaussian_init({s.out_channels, s.in_channels * s.kernel_h * s.kernel_w},
                      s.in_channels * s.kernel_h * s.kernel_w, rng::derive(init_key, "w"))),
      b(Tensor({s.out_channels})) {}

Val Conv2dLayer::forward(Tape& tape, Val x) const {
    return tensor::conv2d(x, tape.leaf(const_cast<Parameter&>(w)),
                          tape.leaf(const_cast<Parameter&>(b)), spec);
}

void Conv2dLayer::collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + "/w", &w});
    out.push_back({prefix + "/b", &b});
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t init_key)
    : fc1(in, hidden, rng::derive(init_key, "fc1")),
      fc2(hidden, out, rng::derive(init_key, "fc2")) {}

Val Mlp::forward(Tape& tape, Val x) const {
    return fc2.forward(tape, tensor::relu(fc1.forward(tape, x)));
}

void Mlp::collect(const std::string& prefix, std::vector<NamedParam>& out) {
    fc1.collect(prefix + "/fc1", out);
    fc2.collect(prefix + "/fc2", out);
}

} // namespace fedinject::nn
