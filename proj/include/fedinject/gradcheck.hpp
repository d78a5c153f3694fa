#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedinject/autodiff.hpp"
#include "fedinject/tensor.hpp"

namespace fedinject::tensor {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t components = 0;
    std::string worst; // "param#k[i]" of the worst component
};

/// Compares the tape gradient of a deterministic scalar objective against
/// central finite differences over every component of `params`.
/// `objective` must rebuild the loss from current parameter values each call.
GradCheckReport grad_check(const std::function<Val(Tape&)>& objective,
                           std::span<Parameter* const> params, double fd_step = 1e-5);

} // namespace fedinject::tensor
