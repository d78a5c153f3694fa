#include "fedinject/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fedinject::tensor {

namespace {

double eval_objective(const std::function<Val(Tape&)>& objective) {
    Tape tape;
    Val loss = objective(tape);
    return tape.value(loss).at(0);
}

} // namespace

GradCheckReport grad_check(const std::function<Val(Tape&)>& objective,
                           std::span<Parameter* const> params, double fd_step) {
    // Analytic pass. Grads are cleared first so stale accumulation cannot leak in.
    for (Parameter* p : params) p->zero_grad();
    std::vector<Tensor> analytic;
    {
        Tape tape;
        Val loss = objective(tape);
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    GradCheckReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter* p = params[k];
        auto w = p->value.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double keep = w[i];
            w[i] = keep + fd_step;
            const double fp = eval_objective(objective);
            w[i] = keep - fd_step;
            const double fm = eval_objective(objective);
            w[i] = keep;
            const double fd = (fp - fm) / (2.0 * fd_step);
            const double an = analytic[k].data()[i];
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
            const double rel = std::abs(an - fd) / denom;
            ++report.components;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = "param#" + std::to_string(k) + "[" + std::to_string(i) + "]";
            }
        }
    }
    for (Parameter* p : params) p->zero_grad();
    return report;
}

} // namespace fedinject::tensor
