#include "fedinject/tasks.hpp"

#include <set>

#include "fedinject/errors.hpp"

namespace fedinject::client {

const char* modality_name(ModalityKind m) {
    switch (m) {
        case ModalityKind::Image: return "image";
        case ModalityKind::Signal: return "signal";
        case ModalityKind::VitalSign: return "vital_sign";
        case ModalityKind::LabResult: return "lab_result";
        case ModalityKind::InputVar: return "input_var";
        case ModalityKind::OutputVar: return "output_var";
    }
    return "unknown";
}

ModalityKind modality_from_name(const std::string& name) {
    for (std::size_t i = 0; i < kNumModalities; ++i) {
        const auto m = static_cast<ModalityKind>(i);
        if (name == modality_name(m)) return m;
    }
    throw InputError("unknown modality name: " + name);
}

void TaskSpec::validate() const {
    if (modalities.empty()) throw InputError("task " + name + ": empty modality list");
    if (num_classes < 2) throw InputError("task " + name + ": num_classes must be >= 2");
    std::set<ModalityKind> seen;
    for (ModalityKind m : modalities) {
        if (!seen.insert(m).second) {
            throw InputError("task " + name + ": duplicate modality " + modality_name(m));
        }
    }
}

std::size_t ModalityShapes::raw_width(ModalityKind m) const {
    switch (m) {
        case ModalityKind::Image: return image_h * image_w;
        case ModalityKind::Signal: return signal_len;
        case ModalityKind::VitalSign: return vital_dim;
        case ModalityKind::LabResult: return lab_dim;
        case ModalityKind::InputVar: return input_dim;
        case ModalityKind::OutputVar: return output_dim;
    }
    return 0;
}

TaskBatch TaskDataset::slice(const std::vector<std::size_t>& indices) const {
    TaskBatch out;
    for (const auto& [m, mat] : features) {
        const std::size_t w = mat.cols();
        tensor::Tensor sub({indices.size(), w});
        for (std::size_t r = 0; r < indices.size(); ++r)
            for (std::size_t c = 0; c < w; ++c) sub.at2(r, c) = mat.at2(indices[r], c);
        out.features.emplace(m, std::move(sub));
    }
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) out.labels.push_back(labels[i]);
    return out;
}

TaskBatch TaskDataset::all() const {
    std::vector<std::size_t> idx(size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return slice(idx);
}

} // namespace fedinject::client
