#include "fedinject/client_model.hpp"

#include <algorithm>
#include <set>

#include "fedinject/errors.hpp"
#include "fedinject/rng.hpp"

namespace fedinject::client {

namespace {

class ConvImageEncoder final : public Encoder {
public:
    ConvImageEncoder(const ClientModelConfig& cfg, std::uint64_t key)
        : Encoder(ModalityKind::Image, cfg.encoder_dim) {
        const std::size_t h = cfg.shapes.image_h, w = cfg.shapes.image_w, k = cfg.image_kernel;
        conv1_ = nn::Conv2dLayer({1, h, w, cfg.conv_c1, k, k}, rng::derive(key, "conv1"));
        conv2_ = nn::Conv2dLayer({cfg.conv_c1, h - k + 1, w - k + 1, cfg.conv_c2, k, k},
                                 rng::derive(key, "conv2"));
        pooled_spatial_ = conv2_.spec.out_h() * conv2_.spec.out_w();
        fc_ = nn::Linear(cfg.conv_c2, cfg.encoder_dim, rng::derive(key, "fc"));
    }

    Val forward(Tape& tape, const Tensor& raw) const override {
        Val x = tape.constant(raw);
        Val h1 = tensor::relu(conv1_.forward(tape, x));
        Val h2 = tensor::relu(conv2_.forward(tape, h1));
        Val pooled = tensor::channel_mean_pool(h2, conv2_.spec.out_channels, pooled_spatial_);
        return fc_.forward(tape, pooled);
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) override {
        conv1_.collect(prefix + "/conv1", out);
        conv2_.collect(prefix + "/conv2", out);
        fc_.collect(prefix + "/fc", out);
    }

private:
    nn::Conv2dLayer conv1_, conv2_;
    nn::Linear fc_;
    std::size_t pooled_spatial_ = 0;
};

// 1-D convolution expressed as a Wx1 image.
class ConvSignalEncoder final : public Encoder {
public:
    ConvSignalEncoder(const ClientModelConfig& cfg, std::uint64_t key)
        : Encoder(ModalityKind::Signal, cfg.encoder_dim) {
        const std::size_t len = cfg.shapes.signal_len, k = cfg.signal_kernel;
        conv1_ = nn::Conv2dLayer({1, len, 1, cfg.conv_c1, k, 1}, rng::derive(key, "conv1"));
        conv2_ = nn::Conv2dLayer({cfg.conv_c1, len - k + 1, 1, cfg.conv_c2, k, 1},
                                 rng::derive(key, "conv2"));
        pooled_spatial_ = conv2_.spec.out_h();
        fc_ = nn::Linear(cfg.conv_c2, cfg.encoder_dim, rng::derive(key, "fc"));
    }

    Val forward(Tape& tape, const Tensor& raw) const override {
        Val x = tape.constant(raw);
        Val h1 = tensor::relu(conv1_.forward(tape, x));
        Val h2 = tensor::relu(conv2_.forward(tape, h1));
        Val pooled = tensor::channel_mean_pool(h2, conv2_.spec.out_channels, pooled_spatial_);
        return fc_.forward(tape, pooled);
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) override {
        conv1_.collect(prefix + "/conv1", out);
        conv2_.collect(prefix + "/conv2", out);
        fc_.collect(prefix + "/fc", out);
    }

private:
    nn::Conv2dLayer conv1_, conv2_;
    nn::Linear fc_;
    std::size_t pooled_spatial_ = 0;
};

class MlpEncoder final : public Encoder {
public:
    MlpEncoder(ModalityKind m, std::size_t raw_dim, const ClientModelConfig& cfg,
               std::uint64_t key)
        : Encoder(m, cfg.encoder_dim), mlp_(raw_dim, cfg.tabular_hidden, cfg.encoder_dim, key) {}

    Val forward(Tape& tape, const Tensor& raw) const override {
        return mlp_.forward(tape, tape.constant(raw));
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) override {
        mlp_.collect(prefix, out);
    }

private:
    nn::Mlp mlp_;
};

} // namespace

std::unique_ptr<Encoder> make_encoder(ModalityKind m, const ClientModelConfig& cfg,
                                      std::uint64_t init_key) {
    switch (m) {
        case ModalityKind::Image: return std::make_unique<ConvImageEncoder>(cfg, init_key);
        case ModalityKind::Signal: return std::make_unique<ConvSignalEncoder>(cfg, init_key);
        default:
            return std::make_unique<MlpEncoder>(m, cfg.shapes.raw_width(m), cfg, init_key);
    }
}

Decoder::Decoder(int task, std::size_t input_dim, std::size_t hidden, std::size_t classes,
                 std::uint64_t init_key)
    : task_id(task), mlp(input_dim, hidden, classes, init_key) {}

ClientModel::ClientModel(int client_id, std::span<const TaskSpec> tasks,
                         const ClientModelConfig& cfg, std::uint64_t seed)
    : client_id_(client_id), cfg_(cfg) {
    if (tasks.empty()) throw InputError("client model needs at least one task");
    std::set<ModalityKind> needed;
    for (const TaskSpec& t : tasks) {
        t.validate();
        if (!tasks_.emplace(t.task_id, t).second) {
            throw InputError("duplicate task id " + std::to_string(t.task_id));
        }
        needed.insert(t.modalities.begin(), t.modalities.end());
    }
    const std::uint64_t base = rng::derive(seed, "client_init", static_cast<std::uint64_t>(client_id));
    for (ModalityKind m : needed) {
        encoders_.emplace(m, make_encoder(m, cfg, rng::derive(base, modality_name(m))));
    }
    for (const auto& [id, spec] : tasks_) {
        const std::size_t input_dim = cfg.encoder_dim * spec.modalities.size();
        decoders_.emplace(id, Decoder(id, input_dim, cfg.decoder_hidden,
                                      static_cast<std::size_t>(spec.num_classes),
                                      rng::derive(base, "dec", static_cast<std::uint64_t>(id))));
    }
}

const TaskSpec& ClientModel::task(int task_id) const {
    auto it = tasks_.find(task_id);
    if (it == tasks_.end()) throw InputError("unknown task id " + std::to_string(task_id));
    return it->second;
}

std::vector<NamedParam> ClientModel::named_parameters() {
    std::vector<NamedParam> out = encoder_parameters();
    auto dec = decoder_parameters();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
}

std::vector<NamedParam> ClientModel::encoder_parameters() {
    std::vector<NamedParam> out;
    for (auto& [m, enc] : encoders_) {
        enc->collect(std::string("enc/") + modality_name(m), out);
    }
    return out;
}

std::vector<NamedParam> ClientModel::decoder_parameters() {
    std::vector<NamedParam> out;
    for (auto& [id, dec] : decoders_) {
        dec.collect("dec/" + std::to_string(id), out);
    }
    return out;
}

std::vector<NamedParam> ClientModel::task_parameters(int task_id) {
    const TaskSpec& spec = task(task_id);
    std::vector<NamedParam> out;
    for (ModalityKind m : spec.modalities) {
        encoders_.at(m)->collect(std::string("enc/") + modality_name(m), out);
    }
    decoders_.at(task_id).collect("dec/" + std::to_string(task_id), out);
    return out;
}

ParamSnapshot ClientModel::snapshot() {
    ParamSnapshot out;
    for (const NamedParam& np : named_parameters()) out.emplace(np.name, np.param->value);
    return out;
}

void ClientModel::load(const ParamSnapshot& values) {
    auto params = named_parameters();
    if (values.size() != params.size()) {
        throw ContractError("load: snapshot has " + std::to_string(values.size()) +
                            " parameters, model has " + std::to_string(params.size()));
    }
    for (NamedParam& np : params) {
        auto it = values.find(np.name);
        if (it == values.end()) throw ContractError("load: missing parameter " + np.name);
        if (!it->second.same_shape(np.param->value)) {
            throw ContractError("load: shape mismatch for " + np.name + ": " +
                                it->second.shape_str() + " vs " + np.param->value.shape_str());
        }
        np.param->value = it->second;
    }
}

Val ClientModel::encode_single(Tape& tape, ModalityKind m, const Tensor& raw) const {
    auto it = encoders_.find(m);
    if (it == encoders_.end()) {
        throw InputError(std::string("no encoder for modality ") + modality_name(m));
    }
    return it->second->forward(tape, raw);
}

Val encode_concat(Tape& tape, const ClientModel& model, const TaskSpec& task,
                  const TaskBatch& batch) {
    std::vector<Val> parts;
    parts.reserve(task.modalities.size());
    for (ModalityKind m : task.modalities) {
        auto it = batch.features.find(m);
        if (it == batch.features.end()) {
            throw InputError(std::string("sample is missing modality ") + modality_name(m) +
                             " required by task " + task.name);
        }
        parts.push_back(model.encode_single(tape, m, it->second));
    }
    if (parts.size() == 1) return parts[0];
    return tensor::concat_cols(parts);
}

Val ClientModel::decode(Tape& tape, int task_id, Val features) const {
    auto it = decoders_.find(task_id);
    if (it == decoders_.end()) throw InputError("unknown task id " + std::to_string(task_id));
    return it->second.forward(tape, features);
}

Val client_forward(Tape& tape, ClientModel& model, int task_id, const TaskBatch& batch) {
    const TaskSpec& spec = model.task(task_id);
    Val features = encode_concat(tape, model, spec, batch);
    return model.decode(tape, task_id, features);
}

Val local_loss(Tape& tape, ClientModel& model, const std::map<int, TaskBatch>& batches) {
    if (batches.empty()) throw InputError("local_loss: no task batches");
    std::vector<Val> losses;
    for (const auto& [task_id, batch] : batches) {
        if (batch.labels.empty()) {
            throw InputError("local_loss: empty batch for task " + std::to_string(task_id));
        }
        Val logits = client_forward(tape, model, task_id, batch);
        losses.push_back(tensor::cross_entropy(logits, batch.labels));
    }
    Val total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = tensor::add(total, losses[i]);
    return tensor::scale(total, 1.0 / static_cast<double>(losses.size()));
}

Val fedprox_penalty_subset(Tape& tape, std::span<NamedParam> params, const ParamSnapshot& global,
                           double lambda) {
    if (lambda < 0.0) throw DomainError("fedprox: lambda must be >= 0");
    Val total = tape.constant(Tensor::scalar(0.0));
    for (NamedParam& np : params) {
        auto it = global.find(np.name);
        if (it == global.end()) {
            throw ContractError("fedprox: global model lacks parameter " + np.name);
        }
        if (!it->second.same_shape(np.param->value)) {
            throw ContractError("fedprox: shape mismatch for " + np.name);
        }
        Val diff = tensor::sub(tape.leaf(*np.param), tape.constant(it->second));
        total = tensor::add(total, tensor::sum(tensor::mul(diff, diff)));
    }
    return tensor::scale(total, lambda / 2.0);
}

Val fedprox_penalty(Tape& tape, ClientModel& model, const ParamSnapshot& global, double lambda) {
    auto params = model.named_parameters();
    if (params.size() != global.size()) {
        throw ContractError("fedprox: model and global have different parameter counts");
    }
    return fedprox_penalty_subset(tape, params, global, lambda);
}

Val fedprox_penalty(Tape& tape, ClientModel& model, ClientModel& global, double lambda) {
    return fedprox_penalty(tape, model, global.snapshot(), lambda);
}

std::vector<double> train_local(ClientModel& model, const std::map<int, TaskDataset>& shard,
                                const TrainLocalConfig& cfg) {
    if (shard.empty()) throw InputError("train_local: empty shard");
    for (const auto& [id, data] : shard) {
        if (data.size() == 0) {
            throw InputError("train_local: task " + std::to_string(id) + " has no samples");
        }
    }
    if (cfg.algo == FedAlgo::FedProx && cfg.lambda > 0.0 && cfg.global == nullptr) {
        throw ContractError("train_local: FedProx with lambda > 0 needs a global anchor");
    }
    const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
    tensor::Optimizer opt(tensor::OptKind::Adam, cfg.lr);
    std::vector<double> trace;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Per-task shuffled orders, keyed independently of every other task.
        std::map<int, std::vector<std::size_t>> orders;
        std::size_t max_steps = 0;
        for (const auto& [id, data] : shard) {
            std::vector<std::size_t> idx(data.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            rng::Stream s(rng::derive(
                cfg.seed, {rng::hash_str("batch_order"),
                           static_cast<std::uint64_t>(model.client_id()), cfg.round,
                           static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(id)}));
            s.shuffle(idx);
            max_steps = std::max(max_steps, (idx.size() + bs - 1) / bs);
            orders.emplace(id, std::move(idx));
        }

        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t step = 0; step < max_steps; ++step) {
            for (const auto& [id, data] : shard) {
                const auto& order = orders.at(id);
                const std::size_t begin = step * bs;
                if (begin >= order.size()) continue; // this task is exhausted for the epoch
                const std::size_t end = std::min(order.size(), begin + bs);
                const std::vector<std::size_t> batch_idx(order.begin() + begin,
                                                         order.begin() + end);
                const TaskBatch batch = data.slice(batch_idx);

                Tape tape;
                Val loss = tensor::cross_entropy(client_forward(tape, model, id, batch),
                                                 batch.labels);
                auto params = model.task_parameters(id);
                if (cfg.algo == FedAlgo::FedProx && cfg.lambda > 0.0) {
                    loss = tensor::add(
                        loss, fedprox_penalty_subset(tape, params, *cfg.global, cfg.lambda));
                }
                loss_sum += tape.value(loss).at(0);
                ++steps;
                tape.backward(loss);
                std::vector<Parameter*> ptrs;
                ptrs.reserve(params.size());
                for (const NamedParam& np : params) ptrs.push_back(np.param);
                opt.step(ptrs);
            }
        }
        trace.push_back(steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps));
    }
    return trace;
}

} // namespace fedinject::client
