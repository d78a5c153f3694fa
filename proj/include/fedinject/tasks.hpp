#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedinject/tensor.hpp"

namespace fedinject::client {

/// The six client-trainable data modalities. Text never appears here: only the
/// foundation stub embeds text (prompts and descriptions).
enum class ModalityKind : std::uint8_t {
    Image = 0,
    Signal = 1,
    VitalSign = 2,
    LabResult = 3,
    InputVar = 4,
    OutputVar = 5,
};

inline constexpr std::size_t kNumModalities = 6;

const char* modality_name(ModalityKind m);
ModalityKind modality_from_name(const std::string& name);

enum class TaskRole : std::uint8_t { Training = 0, Validation = 1 };

/// One prediction task: which modalities feed it, its class count, and the
/// text the foundation router sees.
struct TaskSpec {
    int task_id = 0;
    std::string name;
    std::vector<ModalityKind> modalities; // ordered, unique
    int num_classes = 2;
    std::string prompt_text;
    std::string modality_description;
    TaskRole role = TaskRole::Training;

    void validate() const; // InputError on empty/duplicate modalities, bad class count
};

/// Raw per-modality feature widths. Image and Signal carry layout metadata the
/// conv encoders need; tabular modalities are flat windows.
struct ModalityShapes {
    std::size_t image_h = 8;
    std::size_t image_w = 8;
    std::size_t signal_len = 32;
    std::size_t vital_dim = 14;
    std::size_t lab_dim = 20;
    std::size_t input_dim = 8;
    std::size_t output_dim = 8;

    std::size_t raw_width(ModalityKind m) const;
};

/// A batch of samples: per-modality feature matrices [B x raw_width] plus labels.
struct TaskBatch {
    std::map<ModalityKind, tensor::Tensor> features;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

/// Full task dataset in memory; slices produce batches.
struct TaskDataset {
    TaskSpec spec;
    std::map<ModalityKind, tensor::Tensor> features; // [n x raw_width]
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    TaskBatch slice(const std::vector<std::size_t>& indices) const;
    TaskBatch all() const;
};

} // namespace fedinject::client
