#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fedinject/tensor.hpp"

namespace fedinject::tensor {

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid for the tape's lifetime.
struct Val {
    Tape* tape = nullptr;
    std::int32_t id = -1;
};

/// Reverse-mode tape. Append-only: node ids are a topological order, so the
/// backward sweep is a single reverse pass. One tape per forward pass; tapes
/// are single-threaded and never shared.
class Tape {
public:
    using BackFn = std::function<void(Tape&, std::int32_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf bound to a Parameter; backward accumulates into p.grad.
    Val leaf(Parameter& p);

    /// Leaf with no gradient destination.
    Val constant(Tensor t);

    Val emplace(Tensor value, BackFn back);

    const Tensor& value(Val v) const;
    Tensor& grad(Val v);

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse creation
    /// order, accumulating into every reachable Parameter's grad.
    /// ContractError if loss is not scalar or backward already ran.
    void backward(Val loss);

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackFn back;
        Parameter* param = nullptr;
    };

    const Node& node(Val v) const;
    Node& node(Val v);

    std::vector<Node> nodes_;
    bool swept_ = false;
};

// --- Operations -------------------------------------------------------------
// Each op validates shapes, computes the forward value eagerly, and registers
// a closure that scatters the node's gradient to its parents.

/// Elementwise sum. `b` may also be [n] or [1xn] broadcast across the rows of
/// an [mxn] `a`.
Val add(Val a, Val b);
Val sub(Val a, Val b);

/// Elementwise (Hadamard) product of same-shape tensors.
Val mul(Val a, Val b);

Val scale(Val a, double s);

/// [mxk] x [kxn] -> [mxn].
Val matmul(Val a, Val b);

/// a x b^T: [mxk] x [nxk] -> [mxn].
Val matmul_transb(Val a, Val b);

/// max(x, 0); subgradient at 0 is 0.
Val relu(Val a);

/// Numerically stabilized softmax along `axis` (rank-1: axis 0; rank-2: 0 or 1).
Val softmax(Val a, std::size_t axis);

/// Mean over the batch of -log softmax(logits)[label]; scalar output.
Val cross_entropy(Val logits, const std::vector<int>& labels);

Val sum(Val a);
Val mean(Val a);

/// Mean over rows: [mxn] -> [1xn].
Val mean_rows(Val a);

/// Column-wise concatenation of [mxn_i] blocks -> [m x sum(n_i)].
Val concat_cols(std::span<const Val> parts);

struct Conv2dSpec {
    std::size_t in_channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t out_channels = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;

    std::size_t out_h() const { return height - kernel_h + 1; }
    std::size_t out_w() const { return width - kernel_w + 1; }
};

/// Valid-mode stride-1 convolution.
/// x: [B x Cin*H*W], w: [Cout x Cin*Kh*Kw], b: [Cout] -> [B x Cout*Ho*Wo].
Val conv2d(Val x, Val w, Val b, const Conv2dSpec& spec);

/// Mean over the spatial axis per channel: [B x C*S] -> [B x C].
Val channel_mean_pool(Val x, std::size_t channels, std::size_t spatial);

/// y = coeffs[index] * x, with gradient flowing to both x and coeffs.
Val scale_by_coeff(Val x, Val coeffs, std::size_t index);

// Eager (non-tape) helpers shared with evaluation code.
Tensor softmax_eager(const Tensor& x, std::size_t axis);

} // namespace fedinject::tensor
