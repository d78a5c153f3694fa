#include "fedinject/federation.hpp"

#include <algorithm>
#include <mutex>
#include <thread>

#include "fedinject/errors.hpp"
#include "fedinject/rng.hpp"

namespace fedinject::fed {

const char* algo_name(FedAlgo a) { return a == FedAlgo::FedAvg ? "FedAvg" : "FedProx"; }

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Base: return "base";
        case Variant::GlobalFinetune: return "global_finetune";
        case Variant::LlmFinetune: return "llm_finetune";
    }
    return "?";
}

const char* scope_name(Scope s) { return s == Scope::SingleTask ? "single" : "multi"; }

void FederationConfig::validate() const {
    if (num_clients < 1) throw DomainError("config: num_clients must be >= 1");
    if (num_rounds < 0) throw DomainError("config: num_rounds must be >= 0");
    if (lambda < 0.0) throw DomainError("config: lambda must be >= 0");
    if (local_epochs < 0 || public_epochs < 0) throw DomainError("config: epochs must be >= 0");
    if (batch_size == 0) throw DomainError("config: batch_size must be >= 1");
    if (local_lr <= 0.0 || foundation_lr <= 0.0) throw DomainError("config: learning rates must be > 0");
}

std::pair<ParamSnapshot, ParamSnapshot> aggregate(std::span<const ModelUpdate> updates) {
    if (updates.empty()) throw InputError("aggregate: no updates");
    std::vector<std::size_t> order(updates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return updates[a].client_id < updates[b].client_id;
    });

    const ModelUpdate& ref = updates[order[0]];
    for (std::size_t k = 1; k < order.size(); ++k) {
        const ModelUpdate& u = updates[order[k]];
        if (u.tensors.size() != ref.tensors.size()) {
            throw ContractError("aggregate: update from client " + std::to_string(u.client_id) +
                                " has " + std::to_string(u.tensors.size()) + " tensors, expected " +
                                std::to_string(ref.tensors.size()));
        }
        for (std::size_t j = 0; j < ref.tensors.size(); ++j) {
            if (u.tensors[j].first != ref.tensors[j].first) {
                throw ContractError("aggregate: parameter name mismatch at index " +
                                    std::to_string(j) + ": " + u.tensors[j].first + " vs " +
                                    ref.tensors[j].first);
            }
            if (!u.tensors[j].second.same_shape(ref.tensors[j].second)) {
                throw ContractError("aggregate: shape mismatch for parameter " +
                                    ref.tensors[j].first);
            }
        }
    }

    const double inv_n = 1.0 / static_cast<double>(updates.size());
    ParamSnapshot theta_e, theta_d;
    for (std::size_t j = 0; j < ref.tensors.size(); ++j) {
        const auto& name = ref.tensors[j].first;
        tensor::Tensor mean(ref.tensors[j].second.shape());
        auto out = mean.data();
        std::vector<double> comp(out.size(), 0.0); // Kahan compensation
        for (std::size_t k : order) {
            auto src = updates[k].tensors[j].second.data();
            for (std::size_t i = 0; i < out.size(); ++i) {
                const double y = src[i] - comp[i];
                const double t = out[i] + y;
                comp[i] = (t - out[i]) - y;
                out[i] = t;
            }
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv_n;
        if (name.rfind("enc/", 0) == 0) {
            theta_e.emplace(name, std::move(mean));
        } else if (name.rfind("dec/", 0) == 0) {
            theta_d.emplace(name, std::move(mean));
        } else {
            throw ContractError("aggregate: unexpected parameter " + name);
        }
    }
    return {std::move(theta_e), std::move(theta_d)};
}

std::string surface_label(FedAlgo algo, Scope scope, const char* suffix) {
    return std::string(algo_name(algo)) + (scope == Scope::SingleTask ? "_s" : "_m") + suffix;
}

Experiment::Experiment(const datagen::FederatedDataset& data, const FederationConfig& cfg,
                       const client::ClientModelConfig& mcfg,
                       const foundation::FoundationConfig& fcfg)
    : data_(data), cfg_(cfg), mcfg_(mcfg), fcfg_(fcfg) {
    cfg_.validate();
    if (cfg_.scope == Scope::SingleTask) {
        const auto it = std::find_if(data_.training_tasks.begin(), data_.training_tasks.end(),
                                     [&](const client::TaskSpec& t) {
                                         return t.task_id == cfg_.single_task_id;
                                     });
        if (it == data_.training_tasks.end()) {
            throw InputError("experiment: unknown single task id " +
                             std::to_string(cfg_.single_task_id));
        }
        scope_tasks_ = {*it};
    } else {
        scope_tasks_ = data_.training_tasks;
    }

    for (int i = 0; i < cfg_.num_clients; ++i) {
        clients_.push_back(
            std::make_unique<ClientModel>(i, scope_tasks_, mcfg_, cfg_.seed));
        std::map<int, client::TaskDataset> shard;
        for (const auto& spec : scope_tasks_) {
            const auto& shards = data_.splits.at(spec.task_id).client_shards;
            if (shards.size() != static_cast<std::size_t>(cfg_.num_clients)) {
                throw ContractError("dataset was sharded for " + std::to_string(shards.size()) +
                                    " clients, config asks for " +
                                    std::to_string(cfg_.num_clients));
            }
            shard.emplace(spec.task_id, shards[static_cast<std::size_t>(i)]);
        }
        client_shards_.push_back(std::move(shard));
    }
    for (const auto& spec : scope_tasks_) {
        public_sets_.emplace(spec.task_id, data_.splits.at(spec.task_id).public_set);
    }

    server_model_ = std::make_unique<ClientModel>(cfg_.num_clients, scope_tasks_, mcfg_, cfg_.seed);
    stub_ = std::make_unique<foundation::FoundationStub>(fcfg_, mcfg_.encoder_dim, cfg_.seed);

    // The server's freshly initialized model is the round-0 global.
    for (const auto& np : server_model_->encoder_parameters())
        state_.theta_e.emplace(np.name, np.param->value);
    for (const auto& np : server_model_->decoder_parameters())
        state_.theta_d.emplace(np.name, np.param->value);
    broadcast();
}

ModelUpdate Experiment::collect_update(int client_index) {
    ClientModel& model = *clients_[static_cast<std::size_t>(client_index)];
    ModelUpdate u;
    u.round_index = static_cast<std::uint32_t>(state_.round_index);
    u.client_id = static_cast<std::uint32_t>(model.client_id());
    for (const auto& np : model.named_parameters()) u.tensors.emplace_back(np.name, np.param->value);
    std::uint64_t samples = 0;
    for (const auto& [task_id, data] : client_shards_[static_cast<std::size_t>(client_index)])
        samples += data.size();
    u.sample_count = samples;
    // Transport is simulated, but the codec is always exercised.
    return deserialize_update(serialize_update(u));
}

void Experiment::broadcast() {
    ModelUpdate msg;
    msg.round_index = static_cast<std::uint32_t>(state_.round_index);
    msg.client_id = kServerId;
    for (const auto& [name, t] : state_.theta_e) msg.tensors.emplace_back(name, t);
    for (const auto& [name, t] : state_.theta_d) msg.tensors.emplace_back(name, t);
    const ModelUpdate decoded = deserialize_update(serialize_update(msg));
    ParamSnapshot merged;
    for (const auto& [name, t] : decoded.tensors) merged.emplace(name, t);
    for (auto& c : clients_) c->load(merged);
    server_model_->load(merged);
}

void Experiment::server_finetune(RoundRecord& record) {
    client::TrainLocalConfig tc;
    tc.epochs = cfg_.public_epochs;
    tc.batch_size = cfg_.batch_size;
    tc.lr = cfg_.local_lr;
    tc.algo = FedAlgo::FedAvg;
    tc.seed = cfg_.seed;
    tc.round = static_cast<std::uint64_t>(state_.round_index);
    record.server_losses = client::train_local(*server_model_, public_sets_, tc);
}

void Experiment::server_injection(RoundRecord& record) {
    tensor::Optimizer opt(tensor::OptKind::Adam, cfg_.foundation_lr);
    const std::size_t bs = cfg_.batch_size;
    for (int epoch = 0; epoch < cfg_.public_epochs; ++epoch) {
        std::map<int, std::vector<std::size_t>> orders;
        std::size_t max_steps = 0;
        for (const auto& [task_id, data] : public_sets_) {
            std::vector<std::size_t> idx(data.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            rng::Stream s(rng::derive(
                cfg_.seed, {rng::hash_str("public_order"),
                            static_cast<std::uint64_t>(state_.round_index),
                            static_cast<std::uint64_t>(epoch),
                            static_cast<std::uint64_t>(task_id)}));
            s.shuffle(idx);
            max_steps = std::max(max_steps, (idx.size() + bs - 1) / bs);
            orders.emplace(task_id, std::move(idx));
        }
        for (std::size_t step = 0; step < max_steps; ++step) {
            std::map<int, client::TaskBatch> batches;
            for (const auto& [task_id, data] : public_sets_) {
                const auto& order = orders.at(task_id);
                const std::size_t begin = step * bs;
                if (begin >= order.size()) continue;
                const std::size_t end = std::min(order.size(), begin + bs);
                batches.emplace(task_id,
                                data.slice({order.begin() + begin, order.begin() + end}));
            }
            if (batches.empty()) continue;
            record.server_losses.push_back(
                foundation::injection_step(*stub_, *server_model_, batches, opt));
        }
    }
}

RoundRecord Experiment::run_round() {
    RoundRecord record;
    record.round = state_.round_index;
    record.client_final_losses.resize(clients_.size(), 0.0);

    // FedProx anchors to the parameters broadcast at the start of the round.
    ParamSnapshot anchor;
    for (const auto& [name, t] : state_.theta_e) anchor.emplace(name, t);
    for (const auto& [name, t] : state_.theta_d) anchor.emplace(name, t);

    std::vector<ModelUpdate> updates(clients_.size());
    const std::size_t wave =
        cfg_.threads > 0 ? static_cast<std::size_t>(cfg_.threads) : clients_.size();
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (std::size_t begin = 0; begin < clients_.size(); begin += wave) {
        const std::size_t end = std::min(clients_.size(), begin + wave);
        std::vector<std::thread> pool;
        for (std::size_t i = begin; i < end; ++i) {
            pool.emplace_back([&, i] {
                try {
                    client::TrainLocalConfig tc;
                    tc.epochs = cfg_.local_epochs;
                    tc.batch_size = cfg_.batch_size;
                    tc.lr = cfg_.local_lr;
                    tc.algo = cfg_.algo;
                    tc.lambda = cfg_.algo == FedAlgo::FedProx ? cfg_.lambda : 0.0;
                    tc.global = &anchor;
                    tc.seed = cfg_.seed;
                    tc.round = static_cast<std::uint64_t>(state_.round_index);
                    const auto trace = client::train_local(*clients_[i], client_shards_[i], tc);
                    if (!trace.empty()) record.client_final_losses[i] = trace.back();
                    updates[i] = collect_update(static_cast<int>(i));
                } catch (...) {
                    const std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    auto [theta_e, theta_d] = aggregate(updates);
    state_.theta_e = std::move(theta_e);
    state_.theta_d = std::move(theta_d);

    // Server step sees the freshly aggregated parameters.
    {
        ParamSnapshot merged;
        for (const auto& [name, t] : state_.theta_e) merged.emplace(name, t);
        for (const auto& [name, t] : state_.theta_d) merged.emplace(name, t);
        server_model_->load(merged);
    }
    const bool last_round = state_.round_index + 1 == cfg_.num_rounds;
    if (cfg_.variant == Variant::GlobalFinetune && (cfg_.finetune_per_round || last_round)) {
        server_finetune(record);
    } else if (cfg_.variant == Variant::LlmFinetune) {
        server_injection(record);
    }
    if (cfg_.variant != Variant::Base) {
        ParamSnapshot theta_e2, theta_d2;
        for (const auto& np : server_model_->encoder_parameters())
            theta_e2.emplace(np.name, np.param->value);
        for (const auto& np : server_model_->decoder_parameters())
            theta_d2.emplace(np.name, np.param->value);
        state_.theta_e = std::move(theta_e2);
        state_.theta_d = std::move(theta_d2);
    }

    ++state_.round_index;
    broadcast();
    return record;
}

void Experiment::run() {
    for (int r = 0; r < cfg_.num_rounds; ++r) trace_.push_back(run_round());
}

std::vector<std::uint8_t> Experiment::frozen_checkpoint() {
    ModelUpdate msg;
    msg.round_index = static_cast<std::uint32_t>(state_.round_index);
    msg.client_id = kServerId;
    for (const auto& np : stub_->frozen_parameters())
        msg.tensors.emplace_back(np.name, np.param->value);
    return serialize_update(msg);
}

std::vector<int> Experiment::predict_global(int task_id, const client::TaskDataset& data) {
    tensor::Tape tape;
    const client::TaskBatch batch = data.all();
    const tensor::Tensor logits =
        tape.value(client::client_forward(tape, *server_model_, task_id, batch));
    std::vector<int> preds(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits.at2(i, c) > logits.at2(i, best)) best = c;
        }
        preds[i] = static_cast<int>(best);
    }
    return preds;
}

std::vector<int> Experiment::predict_foundation(const client::TaskSpec& task,
                                                const client::TaskDataset& data) {
    const auto scored = foundation::zero_shot_infer(*stub_, *server_model_, task, data.all());
    std::vector<int> preds(scored.size());
    for (std::size_t i = 0; i < scored.size(); ++i) preds[i] = scored[i].label;
    return preds;
}

ExperimentResult run_experiment(const datagen::FederatedDataset& data,
                                const FederationConfig& cfg,
                                const client::ClientModelConfig& mcfg,
                                const foundation::FoundationConfig& fcfg) {
    ExperimentResult result;
    result.experiment = std::make_unique<Experiment>(data, cfg, mcfg, fcfg);
    Experiment& exp = *result.experiment;
    exp.run();

    auto eval_rows = [&](const char* suffix, bool foundation_path) {
        for (const auto& spec : exp.scope_tasks()) {
            const auto& test = exp.dataset().splits.at(spec.task_id).test;
            const std::vector<int> preds = foundation_path
                                               ? exp.predict_foundation(spec, test)
                                               : exp.predict_global(spec.task_id, test);
            eval::MetricsRow row = eval::classification_metrics(preds, test.labels);
            row.config_label = surface_label(cfg.algo, cfg.scope, suffix);
            row.task = spec.name;
            result.rows.push_back(std::move(row));
        }
    };
    switch (cfg.variant) {
        case Variant::Base: eval_rows("", false); break;
        case Variant::GlobalFinetune: eval_rows("^+", false); break;
        case Variant::LlmFinetune:
            eval_rows("^*", false);
            eval_rows("^F", true);
            break;
    }
    return result;
}

} // namespace fedinject::fed
