#pragma once

#include "ofa/search.h"
#include "ofa/synth.h"
#include "ofa/train.h"

namespace ofa {

struct DataConfig {
    std::string dir = "data";  // relative to the config file's directory
    int classes = 8;
    int train_examples = 2000;
    int val_examples = 500;
    int test_examples = 500;
    double clip_seconds = 2.0;

    std::string manifest(const std::string& split) const { return dir + "/" + split + ".tsv"; }
};

// One structured config drives every subcommand. Defaults mirror the
// reference training recipe; apply_desk_scale() divides the iteration
// counts by 100 for desk-size runs (teacher pinned to 5000).
struct RunConfig {
    uint64_t seed = 0;
    std::string out_dir = "runs/out";
    DataConfig data;
    SupernetSpec supernet = SupernetSpec::default_full(8);
    TrainConfig train;
    int64_t teacher_iters = 400000;
    int64_t single_iters = 100000;
    int64_t finetune_iters = 10000;
    std::vector<Constraint> constraints;
    SearchOptions search;

    RunConfig();

    // Unknown keys anywhere are rejected (ConfigError naming the key).
    // Unless `allow_missing_data`, the train and val manifests must exist.
    static RunConfig load(const std::string& path, bool allow_missing_data = false);
    nlohmann::json to_json() const;

    void apply_desk_scale();
    void require_split(const std::string& split) const;
};

bool config_equal(const RunConfig& a, const RunConfig& b);

}  // namespace ofa
