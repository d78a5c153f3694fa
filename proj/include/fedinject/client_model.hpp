#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedinject/nn.hpp"
#include "fedinject/optim.hpp"
#include "fedinject/tasks.hpp"

namespace fedinject::client {

using nn::NamedParam;
using tensor::Parameter;
using tensor::Tape;
using tensor::Tensor;
using tensor::Val;

/// Width/architecture knobs shared by all client models in an experiment.
struct ClientModelConfig {
    std::size_t encoder_dim = 16;   // fixed-width embedding per modality
    std::size_t decoder_hidden = 32;
    std::size_t conv_c1 = 4;
    std::size_t conv_c2 = 8;
    std::size_t image_kernel = 3;
    std::size_t signal_kernel = 5;
    std::size_t tabular_hidden = 32;
    ModalityShapes shapes;
};

/// Modality-specific encoder: raw features -> fixed-width embedding.
class Encoder {
public:
    Encoder(ModalityKind m, std::size_t out_dim) : modality_(m), output_dim_(out_dim) {}
    virtual ~Encoder() = default;

    ModalityKind modality() const { return modality_; }
    std::size_t output_dim() const { return output_dim_; }

    /// raw: [B x raw_width] -> [B x output_dim].
    virtual Val forward(Tape& tape, const Tensor& raw) const = 0;
    virtual void collect(const std::string& prefix, std::vector<NamedParam>& out) = 0;

private:
    ModalityKind modality_;
    std::size_t output_dim_;
};

std::unique_ptr<Encoder> make_encoder(ModalityKind m, const ClientModelConfig& cfg,
                                      std::uint64_t init_key);

/// Per-task prediction head over the concatenated modality embeddings.
/// Decoders of different tasks share no parameters.
struct Decoder {
    int task_id = 0;
    nn::Mlp mlp;

    Decoder() = default;
    Decoder(int task, std::size_t input_dim, std::size_t hidden, std::size_t classes,
            std::uint64_t init_key);

    Val forward(Tape& tape, Val features) const { return mlp.forward(tape, features); }
    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        mlp.collect(prefix, out);
    }
};

/// Snapshot of named parameter values, used for broadcast, FedProx anchors and
/// aggregation. Ordering is the canonical model order.
using ParamSnapshot = std::map<std::string, Tensor>;

/// Per-client bundle: one encoder per modality (shared across tasks touching
/// that modality) and one decoder per task.
class ClientModel {
public:
    /// Builds encoders for the union of the tasks' modalities and one decoder
    /// per task. Initialization is keyed by (seed, client_id, parameter name)
    /// only, so the same parameters come out identical regardless of which
    /// other tasks are present.
    ClientModel(int client_id, std::span<const TaskSpec> tasks, const ClientModelConfig& cfg,
                std::uint64_t seed);

    int client_id() const { return client_id_; }
    const ClientModelConfig& config() const { return cfg_; }

    const TaskSpec& task(int task_id) const;
    const std::map<int, TaskSpec>& tasks() const { return tasks_; }
    const std::map<ModalityKind, std::unique_ptr<Encoder>>& encoders() const { return encoders_; }
    bool has_modality(ModalityKind m) const { return encoders_.count(m) != 0; }

    std::vector<NamedParam> named_parameters();
    std::vector<NamedParam> encoder_parameters();
    std::vector<NamedParam> decoder_parameters();
    /// Parameters engaged by one task: its modalities' encoders + its decoder.
    std::vector<NamedParam> task_parameters(int task_id);

    ParamSnapshot snapshot();
    /// Bit-exact load; ContractError when names/shapes do not line up.
    void load(const ParamSnapshot& values);

    Val encode_single(Tape& tape, ModalityKind m, const Tensor& raw) const;
    /// Runs the task's decoder over concatenated features.
    Val decode(Tape& tape, int task_id, Val features) const;

private:
    int client_id_;
    ClientModelConfig cfg_;
    std::map<int, TaskSpec> tasks_;
    std::map<ModalityKind, std::unique_ptr<Encoder>> encoders_;
    std::map<int, Decoder> decoders_;
};

/// Concatenation of per-modality encoder outputs in the task's declared order.
/// InputError (naming the modality) when the batch lacks one.
Val encode_concat(Tape& tape, const ClientModel& model, const TaskSpec& task,
                  const TaskBatch& batch);

/// Decoder over encode_concat; logits [B x num_classes]. InputError on unknown task.
Val client_forward(Tape& tape, ClientModel& model, int task_id, const TaskBatch& batch);

/// Unweighted mean over tasks of per-task mean cross-entropy.
Val local_loss(Tape& tape, ClientModel& model, const std::map<int, TaskBatch>& batches);

/// (lambda/2) * sum over all parameters of squared elementwise difference.
Val fedprox_penalty(Tape& tape, ClientModel& model, const ParamSnapshot& global, double lambda);
Val fedprox_penalty(Tape& tape, ClientModel& model, ClientModel& global, double lambda);
/// Same penalty restricted to an explicit parameter subset.
Val fedprox_penalty_subset(Tape& tape, std::span<NamedParam> params, const ParamSnapshot& global,
                           double lambda);

enum class FedAlgo { FedAvg, FedProx };

struct TrainLocalConfig {
    int epochs = 1;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    FedAlgo algo = FedAlgo::FedAvg;
    double lambda = 0.0;
    const ParamSnapshot* global = nullptr; // FedProx anchor
    std::uint64_t seed = 0;                // experiment seed
    std::uint64_t round = 0;               // batch-order keying
};

/// Minibatch Adam over the client's shard. Tasks step round-robin: each step
/// touches only the current task's encoders and decoder, so tasks with
/// disjoint modalities evolve exactly as they would in isolation.
/// Returns the per-epoch mean training loss.
std::vector<double> train_local(ClientModel& model, const std::map<int, TaskDataset>& shard,
                                const TrainLocalConfig& cfg);

} // namespace fedinject::client
