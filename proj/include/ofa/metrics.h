#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "ofa/common.h"

namespace ofa {

struct ScoreMatrix {
    int num_examples = 0;
    int num_classes = 0;
    std::vector<float> scores;    // [N, C] row-major
    std::vector<uint8_t> labels;  // [N, C] binary

    void validate() const;
};

// AP over one class: sort by descending score (ties broken by original
// index), mean over positive ranks k of (positives in top-k)/k.
// Empty when the class has no positives; the class is then skipped at the
// mAP level rather than scored 0.
std::optional<double> average_precision(const std::vector<float>& scores,
                                        const std::vector<uint8_t>& labels);

std::vector<std::optional<double>> per_class_ap(const ScoreMatrix& m);

// Unweighted mean of per-class AP over classes with at least one positive.
// Throws InputError when no class qualifies.
double mean_average_precision(const ScoreMatrix& m);

}  // namespace ofa
