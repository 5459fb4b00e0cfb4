#include "ofa/config.h"

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace ofa {

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const std::string& context) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown key '" + context + key + "'");
    }
}

}  // namespace

RunConfig::RunConfig() {
    constraints = {{800000, 200000, 25}, {1800000, 200000, 25}, {2800000, 200000, 25},
                   {3800000, 200000, 25}};
    train.batch_size = 64;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json jc = nlohmann::json::array();
    for (const auto& c : constraints)
        jc.push_back({{"target_params", c.target_params}, {"epsilon", c.epsilon}, {"population", c.population}});
    return {
        {"seed", seed},
        {"out_dir", out_dir},
        {"data",
         {{"dir", data.dir},
          {"classes", data.classes},
          {"train_examples", data.train_examples},
          {"val_examples", data.val_examples},
          {"test_examples", data.test_examples},
          {"clip_seconds", data.clip_seconds}}},
        {"supernet", supernet.to_json()},
        {"train",
         {{"batch_size", train.batch_size},
          {"learning_rate", train.learning_rate},
          {"phase1_iters", train.phase1_iters},
          {"phase2_iters", train.phase2_iters},
          {"k_subnets", train.k_subnets},
          {"checkpoint_interval", train.checkpoint_interval},
          {"eval_interval", train.eval_interval},
          {"teacher_iters", teacher_iters},
          {"single_iters", single_iters},
          {"finetune_iters", finetune_iters}}},
        {"augment",
         {{"specaugment",
           {{"enabled", train.augment.specaugment.enabled},
            {"time_mask_width", train.augment.specaugment.time_mask_width},
            {"freq_mask_width", train.augment.specaugment.freq_mask_width},
            {"num_time_masks", train.augment.specaugment.num_time_masks},
            {"num_freq_masks", train.augment.specaugment.num_freq_masks}}},
          {"mixup", {{"enabled", train.augment.mixup.enabled}, {"alpha", train.augment.mixup.alpha}}}}},
        {"search",
         {{"constraints", jc},
          {"calib_batches", search.calib_batches},
          {"eval_limit", search.eval_limit}}}};
}

RunConfig RunConfig::load(const std::string& path, bool allow_missing_data) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }

    RunConfig cfg;
    try {
        check_keys(j, {"seed", "out_dir", "data", "supernet", "train", "augment", "search"}, "");
        if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
        if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
        if (j.contains("data")) {
            const auto& d = j.at("data");
            check_keys(d, {"dir", "classes", "train_examples", "val_examples", "test_examples",
                           "clip_seconds"},
                       "data.");
            cfg.data.dir = d.value("dir", cfg.data.dir);
            cfg.data.classes = d.value("classes", cfg.data.classes);
            cfg.data.train_examples = d.value("train_examples", cfg.data.train_examples);
            cfg.data.val_examples = d.value("val_examples", cfg.data.val_examples);
            cfg.data.test_examples = d.value("test_examples", cfg.data.test_examples);
            cfg.data.clip_seconds = d.value("clip_seconds", cfg.data.clip_seconds);
        }
        if (j.contains("supernet")) {
            check_keys(j.at("supernet"),
                       {"blocks", "input_channels", "mel_bins", "head", "width_ratios",
                        "elastic_depth_mask"},
                       "supernet.");
            cfg.supernet = SupernetSpec::from_json(j.at("supernet"));
        } else {
            cfg.supernet = SupernetSpec::default_full(cfg.data.classes);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            check_keys(t,
                       {"batch_size", "learning_rate", "phase1_iters", "phase2_iters", "k_subnets",
                        "checkpoint_interval", "eval_interval", "teacher_iters", "single_iters",
                        "finetune_iters"},
                       "train.");
            cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
            cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
            cfg.train.phase1_iters = t.value("phase1_iters", cfg.train.phase1_iters);
            cfg.train.phase2_iters = t.value("phase2_iters", cfg.train.phase2_iters);
            cfg.train.k_subnets = t.value("k_subnets", cfg.train.k_subnets);
            cfg.train.checkpoint_interval = t.value("checkpoint_interval", cfg.train.checkpoint_interval);
            cfg.train.eval_interval = t.value("eval_interval", cfg.train.eval_interval);
            cfg.teacher_iters = t.value("teacher_iters", cfg.teacher_iters);
            cfg.single_iters = t.value("single_iters", cfg.single_iters);
            cfg.finetune_iters = t.value("finetune_iters", cfg.finetune_iters);
        }
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            check_keys(a, {"specaugment", "mixup"}, "augment.");
            if (a.contains("specaugment")) {
                const auto& s = a.at("specaugment");
                check_keys(s,
                           {"enabled", "time_mask_width", "freq_mask_width", "num_time_masks",
                            "num_freq_masks"},
                           "augment.specaugment.");
                auto& sa = cfg.train.augment.specaugment;
                sa.enabled = s.value("enabled", sa.enabled);
                sa.time_mask_width = s.value("time_mask_width", sa.time_mask_width);
                sa.freq_mask_width = s.value("freq_mask_width", sa.freq_mask_width);
                sa.num_time_masks = s.value("num_time_masks", sa.num_time_masks);
                sa.num_freq_masks = s.value("num_freq_masks", sa.num_freq_masks);
            }
            if (a.contains("mixup")) {
                const auto& m = a.at("mixup");
                check_keys(m, {"enabled", "alpha"}, "augment.mixup.");
                cfg.train.augment.mixup.enabled = m.value("enabled", cfg.train.augment.mixup.enabled);
                cfg.train.augment.mixup.alpha = m.value("alpha", cfg.train.augment.mixup.alpha);
            }
        }
        if (j.contains("search")) {
            const auto& s = j.at("search");
            check_keys(s, {"constraints", "calib_batches", "eval_limit"}, "search.");
            if (s.contains("constraints")) {
                cfg.constraints.clear();
                for (const auto& c : s.at("constraints")) {
                    check_keys(c, {"target_params", "epsilon", "population"}, "search.constraints[].");
                    Constraint out;
                    out.target_params = c.at("target_params").get<int64_t>();
                    out.epsilon = c.value("epsilon", out.epsilon);
                    out.population = c.value("population", out.population);
                    cfg.constraints.push_back(out);
                }
            }
            cfg.search.calib_batches = s.value("calib_batches", cfg.search.calib_batches);
            cfg.search.eval_limit = s.value("eval_limit", cfg.search.eval_limit);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad config value: " + std::string(e.what()));
    }

    // data paths resolve against the config file's directory
    const fs::path base = fs::path(path).parent_path();
    if (!fs::path(cfg.data.dir).is_absolute()) cfg.data.dir = (base / cfg.data.dir).lexically_normal().string();
    if (!fs::path(cfg.out_dir).is_absolute()) cfg.out_dir = (base / cfg.out_dir).lexically_normal().string();

    cfg.train.seed = cfg.seed;
    cfg.supernet.validate();
    cfg.train.validate();
    for (const auto& c : cfg.constraints) c.validate();

    if (!allow_missing_data) {
        for (const char* split : {"train", "val"})
            if (!fs::exists(cfg.data.manifest(split)))
                throw ConfigError("referenced path does not exist: " + cfg.data.manifest(split));
    }
    return cfg;
}

void RunConfig::apply_desk_scale() {
    teacher_iters = 5000;
    train.phase1_iters = std::max<int64_t>(1, train.phase1_iters / 100);
    train.phase2_iters = std::max<int64_t>(1, train.phase2_iters / 100);
    single_iters = std::max<int64_t>(1, single_iters / 100);
    finetune_iters = std::max<int64_t>(1, finetune_iters / 100);
    train.checkpoint_interval = std::max<int64_t>(1, train.checkpoint_interval / 100);
}

void RunConfig::require_split(const std::string& split) const {
    if (!fs::exists(data.manifest(split)))
        throw ConfigError("referenced path does not exist: " + data.manifest(split));
}

bool config_equal(const RunConfig& a, const RunConfig& b) {
    // echoed configs carry resolved absolute paths, so reload is exact
    return a.to_json() == b.to_json();
}

}  // namespace ofa
