#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>

#include "fedinject/tensor.hpp"

namespace fedinject::tensor {

enum class OptKind { Sgd, Adam };

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// SGD / Adam over an explicit parameter list. Moment buffers are keyed by
/// parameter identity and created on first use, so one optimizer can step
/// disjoint parameter subsets (per-task submodels) without cross-talk.
class Optimizer {
public:
    Optimizer(OptKind kind, double lr, AdamHyper hyper = {})
        : kind_(kind), lr_(lr), hyper_(hyper) {}

    OptKind kind() const { return kind_; }
    double learning_rate() const { return lr_; }

    /// Applies the update rule to every trainable parameter in `params` and
    /// clears all their grads (including non-trainable ones).
    void step(std::span<Parameter* const> params);

    void zero_grad(std::span<Parameter* const> params);

private:
    struct Slot {
        Tensor m, v;
        std::int64_t t = 0;
    };

    OptKind kind_;
    double lr_;
    AdamHyper hyper_;
    std::unordered_map<Parameter*, Slot> slots_; // lookup only; never iterated
};

} // namespace fedinject::tensor
