#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedinject/client_model.hpp"
#include "fedinject/datagen.hpp"
#include "fedinject/foundation.hpp"
#include "fedinject/metrics.hpp"
#include "fedinject/wire.hpp"

namespace fedinject::fed {

using client::ClientModel;
using client::FedAlgo;
using client::ParamSnapshot;

enum class Variant { Base, GlobalFinetune, LlmFinetune };
enum class Scope { SingleTask, MultiTask };

const char* algo_name(FedAlgo a);
const char* variant_name(Variant v);
const char* scope_name(Scope s);

struct FederationConfig {
    int num_clients = 5;
    int num_rounds = 10;
    FedAlgo algo = FedAlgo::FedAvg;
    double lambda = 0.0; // FedProx proximal weight
    Variant variant = Variant::Base;
    Scope scope = Scope::MultiTask;
    int single_task_id = 2; // task trained when scope == SingleTask
    std::uint64_t seed = 0;
    int local_epochs = 1;
    int public_epochs = 1; // server finetune / injection epochs per round
    std::size_t batch_size = 32;
    double local_lr = 1e-4;
    double foundation_lr = 5e-4;
    bool finetune_per_round = true; // GlobalFinetune every round vs once at the end
    int threads = 0;                // 0 = one thread per client

    void validate() const;
};

/// Server-side view after a round: the aggregated (and possibly injected)
/// encoder/decoder parameters.
struct GlobalState {
    int round_index = 0;
    ParamSnapshot theta_e;
    ParamSnapshot theta_d;
};

/// Unweighted per-parameter mean over updates, compensated (Kahan) summation
/// in ascending client-id order. ContractError naming the first offending
/// parameter on heterogeneous shapes. Returns (theta_e, theta_d) split by the
/// enc/ and dec/ name prefixes.
std::pair<ParamSnapshot, ParamSnapshot> aggregate(std::span<const ModelUpdate> updates);

struct RoundRecord {
    int round = 0;
    std::vector<double> client_final_losses; // last-epoch mean local loss per client
    std::vector<double> server_losses;       // finetune or injection loss per step
};

/// One full federated experiment over a synthetic benchmark dataset:
/// broadcast -> local training -> wire roundtrip -> aggregation -> optional
/// server step -> broadcast, for num_rounds rounds.
class Experiment {
public:
    Experiment(const datagen::FederatedDataset& data, const FederationConfig& cfg,
               const client::ClientModelConfig& mcfg, const foundation::FoundationConfig& fcfg);

    /// Executes one communication round; see RoundRecord for the trace.
    RoundRecord run_round();
    /// Runs the configured number of rounds.
    void run();

    const FederationConfig& config() const { return cfg_; }
    const GlobalState& state() const { return state_; }
    const std::vector<RoundRecord>& trace() const { return trace_; }
    const std::vector<client::TaskSpec>& scope_tasks() const { return scope_tasks_; }
    const datagen::FederatedDataset& dataset() const { return data_; }

    /// The server-held aggregated model (the byproduct global model).
    ClientModel& global_model() { return *server_model_; }
    foundation::FoundationStub& stub() { return *stub_; }

    /// Serialized frozen stub parameters; byte-stable across the experiment.
    std::vector<std::uint8_t> frozen_checkpoint();

    /// Argmax predictions of the global client-style model on a dataset.
    std::vector<int> predict_global(int task_id, const client::TaskDataset& data);
    /// Argmax predictions through the injected foundation path.
    std::vector<int> predict_foundation(const client::TaskSpec& task,
                                        const client::TaskDataset& data);

private:
    ModelUpdate collect_update(int client_index);
    void broadcast();
    void server_finetune(RoundRecord& record);
    void server_injection(RoundRecord& record);

    datagen::FederatedDataset data_;
    FederationConfig cfg_;
    client::ClientModelConfig mcfg_;
    foundation::FoundationConfig fcfg_;
    std::vector<client::TaskSpec> scope_tasks_;
    std::vector<std::unique_ptr<ClientModel>> clients_;
    std::vector<std::map<int, client::TaskDataset>> client_shards_; // per client: task -> data
    std::map<int, client::TaskDataset> public_sets_;                // task -> public split
    std::unique_ptr<ClientModel> server_model_;
    std::unique_ptr<foundation::FoundationStub> stub_;
    GlobalState state_;
    std::vector<RoundRecord> trace_;
};

/// Convenience label like "FedAvg_s", "FedProx_m^F".
std::string surface_label(FedAlgo algo, Scope scope, const char* suffix);

struct ExperimentResult {
    std::unique_ptr<Experiment> experiment;
    std::vector<eval::MetricsRow> rows;
};

/// Runs an experiment and evaluates its surfaces on the test splits:
/// Base -> one row per scope task; GlobalFinetune -> ^+ rows; LlmFinetune ->
/// ^F rows (foundation path) plus ^* byproduct rows from the same execution.
ExperimentResult run_experiment(const datagen::FederatedDataset& data,
                                const FederationConfig& cfg,
                                const client::ClientModelConfig& mcfg,
                                const foundation::FoundationConfig& fcfg);

} // namespace fedinject::fed
