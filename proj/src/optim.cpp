#include "fedinject/optim.hpp"

#include <cmath>

namespace fedinject::tensor {

void Optimizer::step(std::span<Parameter* const> params) {
    for (Parameter* p : params) {
        if (p->trainable) {
            auto w = p->value.data();
            auto g = p->grad.data();
            if (kind_ == OptKind::Sgd) {
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
            } else {
                Slot& s = slots_[p];
                if (s.t == 0) {
                    s.m = Tensor(p->value.shape());
                    s.v = Tensor(p->value.shape());
                }
                ++s.t;
                const double b1 = hyper_.beta1, b2 = hyper_.beta2;
                const double bc1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
                const double bc2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
                auto m = s.m.data();
                auto v = s.v.data();
                for (std::size_t i = 0; i < w.size(); ++i) {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    const double mhat = m[i] / bc1;
                    const double vhat = v[i] / bc2;
                    w[i] -= lr_ * mhat / (std::sqrt(vhat) + hyper_.eps);
                }
            }
        }
        p->zero_grad();
    }
}

void Optimizer::zero_grad(std::span<Parameter* const> params) {
    for (Parameter* p : params) p->zero_grad();
}

} // namespace fedinject::tensor
