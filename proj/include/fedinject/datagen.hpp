#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedinject/tasks.hpp"

namespace fedinject::datagen {

/// Distribution-shift descriptor for validation twins: class separation is
/// scaled by `margin_scale` and every feature receives a common `offset`.
struct ShiftSpec {
    double margin_scale = 1.0;
    double offset = 0.0;
};

/// Generator parameters for one synthetic task: class-conditional Gaussians
/// around +-margin times a sign pattern keyed by (task, modality).
struct SyntheticTaskRecipe {
    client::TaskSpec task;
    client::ModalityShapes shapes;
    double margin = 1.2;
    double label_balance = 0.5; // P(label == 1)
    std::optional<ShiftSpec> shift;
};

/// n labeled samples; deterministic given (recipe, seed, sample index).
client::TaskDataset generate_task(const SyntheticTaskRecipe& recipe, std::size_t n,
                                  std::uint64_t seed);

inline constexpr std::size_t kDefaultRatios[4] = {7, 1, 1, 1};

/// Largest-remainder apportionment of n_total into parts proportional to
/// `ratios`; ties go to the earlier part. Sizes sum to n_total exactly.
std::vector<std::size_t> partition(std::size_t n_total,
                                   std::span<const std::size_t> ratios = kDefaultRatios);

/// Shuffle by seed, deal round-robin; shard sizes differ by at most one.
std::vector<std::vector<std::size_t>> shard_clients(const std::vector<std::size_t>& train_ids,
                                                    std::size_t n_clients, std::uint64_t seed);

/// One training task's materialized splits.
struct TaskSplits {
    std::vector<client::TaskDataset> client_shards;
    client::TaskDataset public_set;
    client::TaskDataset dev;
    client::TaskDataset test;
};

struct FederatedDataset {
    std::vector<client::TaskSpec> training_tasks;            // ascending task_id
    std::map<int, TaskSplits> splits;                        // keyed by task_id
    std::vector<client::TaskSpec> validation_tasks;
    std::map<int, client::TaskDataset> validation_sets;      // test-only
};

struct BenchmarkDataConfig {
    std::size_t samples_per_task = 600;
    std::size_t validation_samples = 200;
    std::size_t num_clients = 5;
    double margin = 1.2;
    double label_balance = 0.5;
    double shift_margin_scale = 0.7;
    double shift_offset = 0.3;
    client::ModalityShapes shapes;
};

/// Six training tasks covering all six modalities plus two validation tasks:
/// a distribution-shifted twin of the multi-modal clinical task and a
/// two-modality screen used to exercise capability limits.
std::vector<SyntheticTaskRecipe> default_training_recipes(const BenchmarkDataConfig& cfg);
std::vector<SyntheticTaskRecipe> default_validation_recipes(const BenchmarkDataConfig& cfg);

FederatedDataset build_benchmark_dataset(const BenchmarkDataConfig& cfg, std::uint64_t seed);

/// Writes one container file per split part (client shards, public, dev, test,
/// validation) with records as (id/label, id/<modality>) tensors.
void dump_dataset(const FederatedDataset& dataset, const std::string& dir);

} // namespace fedinject::datagen
