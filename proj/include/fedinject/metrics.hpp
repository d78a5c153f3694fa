#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fedinject::eval {

/// One benchmark-table cell: a config label, a task, and its classification
/// metrics. `capable == false` marks the "cannot handle" rows; metric values
/// are meaningless there and rendered as x in CSV.
struct MetricsRow {
    std::string config_label;
    std::string task;
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0; // number of evaluated samples
    bool capable = true;
};

/// Binary accuracy / precision / recall / F1 with the zero-division convention
/// that an empty denominator yields 0. InputError on length mismatch.
MetricsRow classification_metrics(const std::vector<int>& preds, const std::vector<int>& labels,
                                  int positive_class = 1);

} // namespace fedinject::eval
