#include "fedinject/foundation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fedinject/autodiff.hpp"
#include "fedinject/errors.hpp"
#include "fedinject/rng.hpp"

namespace fedinject::foundation {

void RouterParams::collect(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + "/wq", &wq});
    out.push_back({prefix + "/wk", &wk});
    out.push_back({prefix + "/wv", &wv});
    if (use_mlp) mlp.collect(prefix + "/mlp", out);
}

FoundationStub::FoundationStub(const FoundationConfig& cfg, std::size_t encoder_dim,
                               std::uint64_t seed)
    : cfg_(cfg), encoder_dim_(encoder_dim) {
    if (cfg.num_experts == 0) throw DomainError("foundation: need at least one expert");
    if (!cfg.router_mlp && cfg.num_experts > cfg.embed_dim) {
        throw DomainError("foundation: without the router MLP, experts must not exceed d_k");
    }
    const std::uint64_t key = rng::derive(seed, "stub");
    const std::size_t dk = cfg.embed_dim;
    const std::size_t w = width();

    embedding_ = Parameter(nn::gaussian_init({cfg.vocab_size, dk}, dk, rng::derive(key, "emb")),
                           /*trainable=*/false);
    for (std::size_t bidx = 0; bidx < cfg.backbone_blocks; ++bidx) {
        BackboneBlock blk;
        blk.w1 = Parameter(nn::gaussian_init({w, w}, w, rng::derive(key, "blk_w1", bidx)), false);
        blk.b1 = Parameter(Tensor({w}), false);
        blk.w2 = Parameter(nn::gaussian_init({w, w}, w, rng::derive(key, "blk_w2", bidx)), false);
        blk.b2 = Parameter(Tensor({w}), false);
        for (std::size_t p = 0; p < cfg.num_experts; ++p) {
            LoraExpert e;
            Tensor a = nn::gaussian_init({w, cfg.lora_rank}, w, rng::derive(key, "lora_a", bidx, p));
            for (double& v : a.data()) v *= cfg.lora_a_scale;
            e.a = Parameter(std::move(a));
            e.b = Parameter(Tensor({cfg.lora_rank, w})); // zero start: adapters are a no-op
            blk.experts.push_back(std::move(e));
        }
        blocks_.push_back(std::move(blk));
    }
    head_w = Parameter(nn::gaussian_init({w, cfg.num_classes}, w, rng::derive(key, "head_w")),
                       false);
    head_b = Parameter(Tensor({cfg.num_classes}), false);

    alignment_ = nn::Linear(slot_width(), dk, rng::derive(key, "align"), /*bias=*/false);

    router_.wq = Parameter(nn::gaussian_init({dk, dk}, dk, rng::derive(key, "router_wq")));
    router_.wk = Parameter(nn::gaussian_init({dk, dk}, dk, rng::derive(key, "router_wk")));
    router_.wv = Parameter(nn::gaussian_init({dk, dk}, dk, rng::derive(key, "router_wv")));
    router_.mlp = nn::Mlp(dk, cfg.router_hidden, cfg.num_experts, rng::derive(key, "router_mlp"));
    router_.use_mlp = cfg.router_mlp;
    router_.num_experts = cfg.num_experts;
}

Tensor FoundationStub::embed_text(const std::string& text) const {
    std::istringstream is(text);
    std::vector<std::string> tokens;
    for (std::string tok; is >> tok;) tokens.push_back(tok);
    if (tokens.empty()) throw InputError("embed_text: empty text");
    const std::size_t dk = cfg_.embed_dim;
    Tensor out({tokens.size(), dk});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::size_t row = rng::hash_str(tokens[i]) % cfg_.vocab_size;
        for (std::size_t c = 0; c < dk; ++c) out.at2(i, c) = embedding_.value.at2(row, c);
    }
    return out;
}

Val FoundationStub::route(Tape& tape, const TaskSpec& task) {
    if (task.prompt_text.empty() || task.modality_description.empty()) {
        throw InputError("route: task " + task.name + " needs prompt and modality description");
    }
    const std::size_t dk = cfg_.embed_dim;
    Val m = tape.constant(embed_text(task.modality_description));
    Val t = tape.constant(embed_text(task.prompt_text));
    Val q = tensor::matmul(m, tape.leaf(router_.wq));
    Val k = tensor::matmul(t, tape.leaf(router_.wk));
    Val v = tensor::matmul(t, tape.leaf(router_.wv));
    Val scores = tensor::scale(tensor::matmul_transb(q, k), 1.0 / std::sqrt(static_cast<double>(dk)));
    Val attn = tensor::softmax(scores, 1);
    Val ctx = tensor::matmul(attn, v);
    Val pooled = tensor::mean_rows(ctx);
    Val logits;
    if (router_.use_mlp) {
        logits = router_.mlp.forward(tape, pooled);
    } else {
        // Simplified head: project onto the first P coordinates.
        Tensor proj({dk, cfg_.num_experts});
        for (std::size_t p = 0; p < cfg_.num_experts; ++p) proj.at2(p, p) = 1.0;
        logits = tensor::matmul(pooled, tape.constant(std::move(proj)));
    }
    return tensor::softmax(logits, 1);
}

RouterOutput FoundationStub::route_alpha(const TaskSpec& task) {
    Tape tape;
    const Tensor& a = tape.value(route(tape, task));
    RouterOutput out;
    out.alpha.assign(a.data().begin(), a.data().end());
    return out;
}

Val FoundationStub::align_features(Tape& tape, const ClientModel& agg, const TaskSpec& task,
                                   const TaskBatch& batch) {
    if (agg.config().encoder_dim != encoder_dim_) {
        throw ContractError("align_features: encoder width mismatch");
    }
    std::size_t rows = 0;
    for (const auto& [m, mat] : batch.features) rows = mat.rows();
    if (rows == 0) throw InputError("align_features: empty batch");

    // Canonical slot layout: one block per modality in enum order; absent
    // modalities stay zero so their alignment rows receive no gradient.
    std::vector<Val> slots;
    for (std::size_t mi = 0; mi < client::kNumModalities; ++mi) {
        const auto m = static_cast<client::ModalityKind>(mi);
        const bool used =
            std::find(task.modalities.begin(), task.modalities.end(), m) != task.modalities.end();
        if (used) {
            auto it = batch.features.find(m);
            if (it == batch.features.end()) {
                throw InputError(std::string("sample is missing modality ") +
                                 client::modality_name(m) + " required by task " + task.name);
            }
            slots.push_back(agg.encode_single(tape, m, it->second));
        } else {
            slots.push_back(tape.constant(Tensor({rows, encoder_dim_})));
        }
    }
    Val slotted = tensor::concat_cols(slots);
    Val aligned = alignment_.forward(tape, slotted);

    // Mean-pooled prompt embedding, tiled across the batch (frozen, constant).
    const Tensor prompt = embed_text(task.prompt_text);
    Tensor pooled({rows, cfg_.embed_dim});
    for (std::size_t c = 0; c < cfg_.embed_dim; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < prompt.rows(); ++r) acc += prompt.at2(r, c);
        acc /= static_cast<double>(prompt.rows());
        for (std::size_t r = 0; r < rows; ++r) pooled.at2(r, c) = acc;
    }
    std::vector<Val> parts = {aligned, tape.constant(std::move(pooled))};
    return tensor::concat_cols(parts);
}

Val FoundationStub::lora_moe_forward(Tape& tape, Val h, Val alpha) {
    const std::size_t w = width();
    if (tape.value(h).cols() != w) {
        throw DimensionError("lora_moe_forward: h width " +
                             std::to_string(tape.value(h).cols()) + " does not match backbone " +
                             std::to_string(w));
    }
    if (tape.value(alpha).size() != cfg_.num_experts) {
        throw DimensionError("lora_moe_forward: alpha length mismatch");
    }
    Val x = h;
    for (BackboneBlock& blk : blocks_) {
        Val pre = tensor::add(tensor::matmul(x, tape.constant(blk.w1.value)),
                              tape.constant(blk.b1.value));
        Val frozen = tensor::add(tensor::matmul(tensor::relu(pre), tape.constant(blk.w2.value)),
                                 tape.constant(blk.b2.value));
        Val out = tensor::add(x, frozen);
        for (std::size_t p = 0; p < blk.experts.size(); ++p) {
            Val low = tensor::matmul(x, tape.leaf(blk.experts[p].a));
            Val path = tensor::matmul(low, tape.leaf(blk.experts[p].b));
            out = tensor::add(out, tensor::scale_by_coeff(path, alpha, p));
        }
        x = out;
    }
    return tensor::add(tensor::matmul(x, tape.constant(head_w.value)),
                       tape.constant(head_b.value));
}

std::vector<NamedParam> FoundationStub::frozen_parameters() {
    std::vector<NamedParam> out;
    out.push_back({"emb", &embedding_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "block" + std::to_string(i);
        out.push_back({p + "/w1", &blocks_[i].w1});
        out.push_back({p + "/b1", &blocks_[i].b1});
        out.push_back({p + "/w2", &blocks_[i].w2});
        out.push_back({p + "/b2", &blocks_[i].b2});
    }
    out.push_back({"head/w", &head_w});
    out.push_back({"head/b", &head_b});
    return out;
}

std::vector<NamedParam> FoundationStub::trainable_parameters() {
    std::vector<NamedParam> out;
    alignment_.collect("align", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        for (std::size_t p = 0; p < blocks_[i].experts.size(); ++p) {
            const std::string prefix =
                "block" + std::to_string(i) + "/expert" + std::to_string(p);
            out.push_back({prefix + "/a", &blocks_[i].experts[p].a});
            out.push_back({prefix + "/b", &blocks_[i].experts[p].b});
        }
    }
    router_.collect("router", out);
    return out;
}

double injection_step(FoundationStub& stub, ClientModel& agg,
                      const std::map<int, TaskBatch>& public_batches, tensor::Optimizer& opt) {
    if (public_batches.empty()) throw InputError("injection_step: no public batches");
    Tape tape;
    std::vector<Val> losses;
    for (const auto& [task_id, batch] : public_batches) {
        if (batch.labels.empty()) {
            throw InputError("injection_step: empty public batch for task " +
                             std::to_string(task_id));
        }
        const TaskSpec& spec = agg.task(task_id);
        Val h = stub.align_features(tape, agg, spec, batch);
        Val alpha = stub.route(tape, spec);
        Val logits = stub.lora_moe_forward(tape, h, alpha);
        losses.push_back(tensor::cross_entropy(logits, batch.labels));
    }
    Val loss = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) loss = tensor::add(loss, losses[i]);
    loss = tensor::scale(loss, 1.0 / static_cast<double>(losses.size()));
    const double value = tape.value(loss).at(0);
    tape.backward(loss);

    std::vector<tensor::Parameter*> params;
    for (const NamedParam& np : agg.encoder_parameters()) params.push_back(np.param);
    for (const NamedParam& np : stub.trainable_parameters()) params.push_back(np.param);
    opt.step(params);
    return value;
}

std::vector<ZeroShotPrediction> zero_shot_infer(FoundationStub& stub, const ClientModel& agg,
                                                const TaskSpec& task, const TaskBatch& batch) {
    for (client::ModalityKind m : task.modalities) {
        if (!agg.has_modality(m)) {
            throw CapabilityError(std::string("cannot handle task ") + task.name +
                                  ": modality " + client::modality_name(m) +
                                  " was never trained");
        }
    }
    Tape tape;
    Val h = stub.align_features(tape, agg, task, batch);
    Val alpha = stub.route(tape, task);
    const Tensor logits = tape.value(stub.lora_moe_forward(tape, h, alpha));
    const Tensor probs = tensor::softmax_eager(logits, 1);
    std::vector<ZeroShotPrediction> out(batch.size());
    const std::size_t classes = probs.cols();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
            if (probs.at2(i, c) > probs.at2(i, best)) best = c;
        }
        out[i] = {static_cast<int>(best), probs.at2(i, best)};
    }
    return out;
}

} // namespace fedinject::foundation
