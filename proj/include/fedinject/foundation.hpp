#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedinject/client_model.hpp"
#include "fedinject/nn.hpp"
#include "fedinject/optim.hpp"
#include "fedinject/tasks.hpp"

namespace fedinject::foundation {

using client::ClientModel;
using client::TaskBatch;
using client::TaskSpec;
using nn::NamedParam;
using tensor::Parameter;
using tensor::Tape;
using tensor::Tensor;
using tensor::Val;

struct FoundationConfig {
    std::size_t vocab_size = 256;
    std::size_t embed_dim = 32; // d_k; backbone width is 2*d_k (features ; prompt)
    std::size_t backbone_blocks = 2;
    std::size_t lora_rank = 4;
    std::size_t num_experts = 4; // P
    std::size_t router_hidden = 16;
    bool router_mlp = true; // false drops the MLP refinement; pooled context is
                            // truncated to the first P entries instead
    std::size_t num_classes = 2;
    double lora_a_scale = 0.1; // A is small Gaussian, B starts at zero
};

/// Attention-based expert selector over task and modality descriptions.
struct RouterParams {
    Parameter wq, wk, wv; // [d_k x d_k]
    nn::Mlp mlp;          // d_k -> hidden -> P
    bool use_mlp = true;
    std::size_t num_experts = 0;

    void collect(const std::string& prefix, std::vector<NamedParam>& out);
};

/// Low-rank adapter pair; the product b*a has rank <= lora_rank.
struct LoraExpert {
    Parameter a; // [width x rank]
    Parameter b; // [rank x width], zero-initialized
};

/// Frozen residual MLP block plus its trainable adapter experts.
struct BackboneBlock {
    Parameter w1, b1, w2, b2; // frozen
    std::vector<LoraExpert> experts;
};

struct RouterOutput {
    std::vector<double> alpha; // length P, nonnegative, sums to 1
};

/// The frozen foundation model stand-in plus its trainable periphery
/// (alignment map, LoRA experts, router). Frozen weights are used as tape
/// constants, so no gradient path can ever touch them.
class FoundationStub {
public:
    FoundationStub(const FoundationConfig& cfg, std::size_t encoder_dim, std::uint64_t seed);

    const FoundationConfig& config() const { return cfg_; }
    std::size_t width() const { return 2 * cfg_.embed_dim; }
    std::size_t slot_width() const { return client::kNumModalities * encoder_dim_; }

    /// Whitespace-tokenize, hash tokens into the vocabulary and look up frozen
    /// embedding rows. [L x d_k]; InputError on empty text.
    Tensor embed_text(const std::string& text) const;

    /// Expert-selection weights for a task: scaled dot-product attention of
    /// modality-description tokens over task-prompt tokens, mean-pooled, then
    /// the router head and a softmax. [1 x P] on the tape.
    Val route(Tape& tape, const TaskSpec& task);
    RouterOutput route_alpha(const TaskSpec& task);

    /// Canonical-slot encoding of the batch through `agg` encoders, bias-free
    /// linear alignment to d_k, concatenated with the mean-pooled prompt
    /// embedding. [B x 2*d_k].
    Val align_features(Tape& tape, const ClientModel& agg, const TaskSpec& task,
                       const TaskBatch& batch);

    /// Per block: frozen residual output + sum_p alpha_p * (x A_p) B_p, then the
    /// frozen output head. h: [B x 2*d_k] -> logits [B x num_classes].
    Val lora_moe_forward(Tape& tape, Val h, Val alpha);

    std::vector<NamedParam> frozen_parameters();
    /// alignment map + experts + router (the injection trainable set minus the
    /// aggregated encoders, which live in the server model).
    std::vector<NamedParam> trainable_parameters();

    RouterParams& router() { return router_; }
    std::vector<BackboneBlock>& blocks() { return blocks_; }
    nn::Linear& alignment() { return alignment_; }

private:
    FoundationConfig cfg_;
    std::size_t encoder_dim_;
    Parameter embedding_; // [vocab x d_k], frozen
    std::vector<BackboneBlock> blocks_;
    Parameter head_w, head_b; // frozen
    nn::Linear alignment_;    // bias-free, trainable
    RouterParams router_;
};

/// One cross-entropy optimization step over the given public batches through
/// align_features -> route -> lora_moe_forward. Updates the aggregated
/// encoders (inside `agg`) and the stub periphery; frozen weights untouched.
/// Returns the pre-step loss.
double injection_step(FoundationStub& stub, ClientModel& agg,
                      const std::map<int, TaskBatch>& public_batches, tensor::Optimizer& opt);

struct ZeroShotPrediction {
    int label = 0;
    double score = 0.0; // softmax probability of the predicted label
};

/// Zero-shot forward with the validation task's own prompt and modality
/// description. CapabilityError when the task needs a modality `agg` was never
/// trained on.
std::vector<ZeroShotPrediction> zero_shot_infer(FoundationStub& stub, const ClientModel& agg,
                                                const TaskSpec& task, const TaskBatch& batch);

} // namespace fedinject::foundation
