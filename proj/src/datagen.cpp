#include "fedinject/datagen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "fedinject/errors.hpp"
#include "fedinject/rng.hpp"
#include "fedinject/wire.hpp"

namespace fedinject::datagen {

using client::ModalityKind;
using client::TaskDataset;
using client::TaskSpec;
using tensor::Tensor;

namespace {

/// Fixed +-1 pattern per (task, modality); the class mean is +-margin * pattern.
std::vector<double> sign_pattern(int task_id, ModalityKind m, std::size_t width) {
    rng::Stream s(rng::derive(0x5167u, "pattern", static_cast<std::uint64_t>(task_id),
                              static_cast<std::uint64_t>(m)));
    std::vector<double> p(width);
    for (double& v : p) v = s.uniform() < 0.5 ? -1.0 : 1.0;
    return p;
}

} // namespace

TaskDataset generate_task(const SyntheticTaskRecipe& recipe, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw InputError("generate_task: need at least one sample");
    recipe.task.validate();
    const double margin =
        recipe.margin * (recipe.shift ? recipe.shift->margin_scale : 1.0);
    const double offset = recipe.shift ? recipe.shift->offset : 0.0;

    TaskDataset data;
    data.spec = recipe.task;
    data.labels.resize(n);
    const auto tid = static_cast<std::uint64_t>(recipe.task.task_id);
    for (std::size_t i = 0; i < n; ++i) {
        rng::Stream s(rng::derive(seed, "label", tid, i));
        data.labels[i] = s.uniform() < recipe.label_balance ? 1 : 0;
    }
    for (ModalityKind m : recipe.task.modalities) {
        const std::size_t w = recipe.shapes.raw_width(m);
        const std::vector<double> pattern = sign_pattern(recipe.task.task_id, m, w);
        Tensor mat({n, w});
        for (std::size_t i = 0; i < n; ++i) {
            rng::Stream s(rng::derive(seed, {rng::hash_str("features"), tid, i,
                                             static_cast<std::uint64_t>(m)}));
            const double sign = data.labels[i] == 1 ? 1.0 : -1.0;
            for (std::size_t c = 0; c < w; ++c) {
                mat.at2(i, c) = sign * margin * pattern[c] + offset + s.normal();
            }
        }
        data.features.emplace(m, std::move(mat));
    }
    return data;
}

std::vector<std::size_t> partition(std::size_t n_total, std::span<const std::size_t> ratios) {
    if (ratios.empty()) throw InputError("partition: empty ratio list");
    if (n_total < ratios.size()) {
        throw InputError("partition: n_total " + std::to_string(n_total) +
                         " smaller than the number of parts " + std::to_string(ratios.size()));
    }
    const std::size_t denom = std::accumulate(ratios.begin(), ratios.end(), std::size_t{0});
    if (denom == 0) throw InputError("partition: ratios sum to zero");

    std::vector<std::size_t> sizes(ratios.size());
    std::vector<std::pair<std::size_t, std::size_t>> remainders; // (remainder numerator, part)
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const std::size_t num = n_total * ratios[i];
        sizes[i] = num / denom;
        assigned += sizes[i];
        remainders.emplace_back(num % denom, i);
    }
    // Largest remainder first; ties broken by the earlier part index.
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n_total; ++k, ++assigned) {
        sizes[remainders[k % remainders.size()].second] += 1;
    }
    return sizes;
}

std::vector<std::vector<std::size_t>> shard_clients(const std::vector<std::size_t>& train_ids,
                                                    std::size_t n_clients, std::uint64_t seed) {
    if (n_clients == 0) throw InputError("shard_clients: need at least one client");
    std::vector<std::size_t> ids = train_ids;
    rng::Stream s(rng::derive(seed, "shard"));
    s.shuffle(ids);
    std::vector<std::vector<std::size_t>> shards(n_clients);
    for (std::size_t i = 0; i < ids.size(); ++i) shards[i % n_clients].push_back(ids[i]);
    return shards;
}

namespace {

TaskDataset subset(const TaskDataset& full, const std::vector<std::size_t>& ids) {
    TaskDataset out;
    out.spec = full.spec;
    const client::TaskBatch b = full.slice(ids);
    out.features = b.features;
    out.labels = b.labels;
    return out;
}

TaskSpec make_task(int id, std::string name, std::vector<ModalityKind> modalities,
                   std::string prompt, std::string description,
                   client::TaskRole role = client::TaskRole::Training) {
    TaskSpec t;
    t.task_id = id;
    t.name = std::move(name);
    t.modalities = std::move(modalities);
    t.prompt_text = std::move(prompt);
    t.modality_description = std::move(description);
    t.role = role;
    return t;
}

} // namespace

std::vector<SyntheticTaskRecipe> default_training_recipes(const BenchmarkDataConfig& cfg) {
    std::vector<SyntheticTaskRecipe> recipes;
    auto add = [&](TaskSpec spec) {
        SyntheticTaskRecipe r;
        r.task = std::move(spec);
        r.shapes = cfg.shapes;
        r.margin = cfg.margin;
        r.label_balance = cfg.label_balance;
        recipes.push_back(std::move(r));
    };
    add(make_task(0, "image_screen_a", {ModalityKind::Image},
                  "should this screening image be flagged as abnormal?",
                  "grayscale chest image pixels"));
    add(make_task(1, "image_screen_b", {ModalityKind::Image},
                  "does this image indicate an acute finding?",
                  "grayscale chest image pixels"));
    add(make_task(2, "signal_rhythm", {ModalityKind::Signal},
                  "is the given waveform abnormal?", "single channel waveform signal"));
    add(make_task(3, "clinical_outcome", {ModalityKind::VitalSign, ModalityKind::LabResult},
                  "based on these clinical features, will the outcome occur for this patient?",
                  "vital sign window and laboratory test panel"));
    add(make_task(4, "infusion_flag", {ModalityKind::InputVar},
                  "do the input variables indicate an intervention?",
                  "input variable window"));
    add(make_task(5, "fluid_balance", {ModalityKind::InputVar, ModalityKind::OutputVar},
                  "do the input and output variables indicate imbalance?",
                  "input variable window and output variable window"));
    return recipes;
}

std::vector<SyntheticTaskRecipe> default_validation_recipes(const BenchmarkDataConfig& cfg) {
    std::vector<SyntheticTaskRecipe> recipes;

    // Shifted twin of clinical_outcome: same feature space and generator
    // pattern (same task_id drives the pattern), different distribution.
    SyntheticTaskRecipe twin;
    twin.task = make_task(3, "clinical_outcome_shifted",
                          {ModalityKind::VitalSign, ModalityKind::LabResult},
                          "based on these clinical features, will the complication occur?",
                          "vital sign window and laboratory test panel",
                          client::TaskRole::Validation);
    twin.task.task_id = 100;
    twin.shapes = cfg.shapes;
    twin.margin = cfg.margin;
    twin.label_balance = cfg.label_balance;
    twin.shift = ShiftSpec{cfg.shift_margin_scale, cfg.shift_offset};
    recipes.push_back(std::move(twin));

    SyntheticTaskRecipe combo;
    combo.task = make_task(101, "excretion_screen",
                           {ModalityKind::LabResult, ModalityKind::OutputVar},
                           "do the labs and output variables indicate a clearance problem?",
                           "laboratory test panel and output variable window",
                           client::TaskRole::Validation);
    combo.shapes = cfg.shapes;
    combo.margin = cfg.margin;
    combo.label_balance = cfg.label_balance;
    recipes.push_back(std::move(combo));
    return recipes;
}

namespace {

/// The shifted twin must share its generator pattern with its training
/// counterpart; patterns are keyed by task_id, so generate with the source id
/// and relabel afterwards.
TaskDataset generate_validation(const SyntheticTaskRecipe& recipe, std::size_t n,
                                std::uint64_t seed) {
    if (recipe.task.task_id == 100) {
        SyntheticTaskRecipe src = recipe;
        src.task.task_id = 3;
        TaskDataset data = generate_task(src, n, rng::derive(seed, "validation"));
        data.spec = recipe.task;
        return data;
    }
    return generate_task(recipe, n, rng::derive(seed, "validation"));
}

} // namespace

FederatedDataset build_benchmark_dataset(const BenchmarkDataConfig& cfg, std::uint64_t seed) {
    FederatedDataset out;
    for (const SyntheticTaskRecipe& recipe : default_training_recipes(cfg)) {
        const TaskDataset full = generate_task(recipe, cfg.samples_per_task, seed);
        const auto sizes = partition(cfg.samples_per_task);
        std::vector<std::size_t> ids(cfg.samples_per_task);
        std::iota(ids.begin(), ids.end(), 0);

        TaskSplits splits;
        std::size_t off = 0;
        const std::vector<std::size_t> train_ids(ids.begin(), ids.begin() + sizes[0]);
        off += sizes[0];
        const std::vector<std::size_t> public_ids(ids.begin() + off, ids.begin() + off + sizes[1]);
        off += sizes[1];
        const std::vector<std::size_t> dev_ids(ids.begin() + off, ids.begin() + off + sizes[2]);
        off += sizes[2];
        const std::vector<std::size_t> test_ids(ids.begin() + off, ids.begin() + off + sizes[3]);

        const auto shards = shard_clients(
            train_ids, cfg.num_clients,
            rng::derive(seed, "clients", static_cast<std::uint64_t>(recipe.task.task_id)));
        for (const auto& shard_ids : shards) splits.client_shards.push_back(subset(full, shard_ids));
        splits.public_set = subset(full, public_ids);
        splits.dev = subset(full, dev_ids);
        splits.test = subset(full, test_ids);

        out.training_tasks.push_back(recipe.task);
        out.splits.emplace(recipe.task.task_id, std::move(splits));
    }
    for (const SyntheticTaskRecipe& recipe : default_validation_recipes(cfg)) {
        out.validation_tasks.push_back(recipe.task);
        out.validation_sets.emplace(recipe.task.task_id,
                                    generate_validation(recipe, cfg.validation_samples, seed));
    }
    return out;
}

namespace {

void dump_part(const client::TaskDataset& part, const std::string& path) {
    fed::ModelUpdate container;
    container.round_index = 0;
    container.client_id = fed::kServerId;
    for (std::size_t i = 0; i < part.size(); ++i) {
        const std::string prefix = std::to_string(i);
        container.tensors.emplace_back(prefix + "/label",
                                       Tensor({1}, {static_cast<double>(part.labels[i])}));
        for (const auto& [m, mat] : part.features) {
            Tensor row({mat.cols()});
            for (std::size_t c = 0; c < mat.cols(); ++c) row.at(c) = mat.at2(i, c);
            container.tensors.emplace_back(prefix + "/" + client::modality_name(m),
                                           std::move(row));
        }
    }
    const auto bytes = fed::serialize_update(container);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw InputError("cannot open " + tmp + " for writing");
        os.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
    }
    std::filesystem::rename(tmp, path);
}

} // namespace

void dump_dataset(const FederatedDataset& dataset, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& [task_id, splits] : dataset.splits) {
        const std::string base = dir + "/task" + std::to_string(task_id);
        for (std::size_t c = 0; c < splits.client_shards.size(); ++c) {
            dump_part(splits.client_shards[c], base + "_client" + std::to_string(c) + ".bin");
        }
        dump_part(splits.public_set, base + "_public.bin");
        dump_part(splits.dev, base + "_dev.bin");
        dump_part(splits.test, base + "_test.bin");
    }
    for (const auto& [task_id, data] : dataset.validation_sets) {
        dump_part(data, dir + "/validation" + std::to_string(task_id) + "_test.bin");
    }
}

} // namespace fedinject::datagen
