#include "fedinject/metrics.hpp"

#include "fedinject/errors.hpp"

namespace fedinject::eval {

MetricsRow classification_metrics(const std::vector<int>& preds, const std::vector<int>& labels,
                                  int positive_class) {
    if (preds.size() != labels.size()) {
        throw InputError("classification_metrics: " + std::to_string(preds.size()) +
                         " predictions vs " + std::to_string(labels.size()) + " labels");
    }
    if (preds.empty()) throw InputError("classification_metrics: empty input");

    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool pred_pos = preds[i] == positive_class;
        const bool label_pos = labels[i] == positive_class;
        if (pred_pos && label_pos) ++tp;
        else if (pred_pos && !label_pos) ++fp;
        else if (!pred_pos && label_pos) ++fn;
        else ++tn;
    }
    MetricsRow row;
    row.support = preds.size();
    const double n = static_cast<double>(preds.size());
    row.accuracy = static_cast<double>(tp + tn) / n;
    row.precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    row.recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    row.f1 = (row.precision + row.recall) == 0.0
                 ? 0.0
                 : 2.0 * row.precision * row.recall / (row.precision + row.recall);
    return row;
}

} // namespace fedinject::eval
