#include "ofa/metrics.h"

#include <algorithm>
#include <numeric>

namespace ofa {

void ScoreMatrix::validate() const {
    const size_t expected = static_cast<size_t>(num_examples) * num_classes;
    if (scores.size() != expected || labels.size() != expected)
        throw InputError("score matrix storage does not match " + std::to_string(num_examples) + "x" +
                         std::to_string(num_classes));
    for (uint8_t l : labels)
        if (l > 1) throw InputError("labels must be binary");
}

std::optional<double> average_precision(const std::vector<float>& scores,
                                        const std::vector<uint8_t>& labels) {
    if (scores.size() != labels.size()) throw InputError("ap: scores and labels differ in length");
    std::vector<uint32_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](uint32_t a, uint32_t b) { return scores[a] > scores[b]; });
    double ap = 0.0;
    int64_t hits = 0;
    for (size_t k = 0; k < order.size(); ++k) {
        if (labels[order[k]]) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    }
    if (hits == 0) return std::nullopt;
    return ap / static_cast<double>(hits);
}

std::vector<std::optional<double>> per_class_ap(const ScoreMatrix& m) {
    m.validate();
    std::vector<std::optional<double>> out(static_cast<size_t>(m.num_classes));
    std::vector<float> s(static_cast<size_t>(m.num_examples));
    std::vector<uint8_t> l(static_cast<size_t>(m.num_examples));
    for (int c = 0; c < m.num_classes; ++c) {
        for (int i = 0; i < m.num_examples; ++i) {
            s[static_cast<size_t>(i)] = m.scores[static_cast<size_t>(i) * m.num_classes + c];
            l[static_cast<size_t>(i)] = m.labels[static_cast<size_t>(i) * m.num_classes + c];
        }
        out[static_cast<size_t>(c)] = average_precision(s, l);
    }
    return out;
}

double mean_average_precision(const ScoreMatrix& m) {
    const auto aps = per_class_ap(m);
    double sum = 0.0;
    int present = 0;
    for (const auto& ap : aps)
        if (ap) {
            sum += *ap;
            ++present;
        }
    if (present == 0) throw InputError("mAP undefined: no class has a positive label");
    return sum / present;
}

}  // namespace ofa
