#pragma once

#include "ofa/train.h"

namespace ofa {

struct Constraint {
    int64_t target_params = 0;
    int64_t epsilon = 200000;
    int population = 25;

    void validate() const;
    int64_t lo() const { return target_params - epsilon; }
    int64_t hi() const { return target_params + epsilon; }
};

struct CandidateResult {
    ArchConfig arch;
    int64_t params = 0;
    double val_map = 0.0;
};

struct PopulationStats {
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0, stddev = 0;
};

struct SearchReport {
    Constraint constraint;
    std::vector<CandidateResult> candidates;
    CandidateResult winner;
    PopulationStats stats;

    nlohmann::json to_json() const;
    std::string to_csv() const;  // params,val_map rows
};

// Rejection-samples archs until the parameter count lands in
// [target-eps, target+eps]; gives up after 100,000 rejections with an error
// naming the space's parameter range.
ArchConfig sample_in_constraint(Rng& rng, const SupernetSpec& spec, const Constraint& constraint);

struct SearchOptions {
    int calib_batches = 10;  // batch-norm recalibration passes per candidate
    int batch_size = 64;
    int eval_limit = 0;  // 0 = whole eval set
};

// Recalibrates batch-norm statistics on cloned buffers (calib batches run in
// statistics-update mode with weights frozen), then scores the subnet on the
// eval set. The supernet's own buffers are never touched.
double evaluate_arch(const Model& supernet, const ArchConfig& arch, const DatasetCache& eval_set,
                     const DatasetCache& calib_set, const SearchOptions& opt);

// Per constraint: `population` distinct in-bound candidates (duplicates by
// arch string are resampled), each scored on the eval set; winner maximizes
// val mAP with ties broken by fewer params then lexicographic arch string.
std::vector<SearchReport> random_search(const Model& supernet, const std::vector<Constraint>& constraints,
                                        const DatasetCache& eval_set, const DatasetCache& calib_set,
                                        uint64_t seed, const SearchOptions& opt);

// Quartiles by linear interpolation at q*(n-1); population standard deviation.
PopulationStats population_stats(const std::vector<double>& scores);

// One line per report: constraint, mean, stddev, quartiles. Tab-separated
// with a header row.
std::string variance_report(const std::vector<SearchReport>& reports);

}  // namespace ofa
