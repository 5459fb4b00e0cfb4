// Single-binary pipeline driver: synthesize data, train the teacher and the
// weight-sharing supernet, search under parameter constraints, evaluate and
// fine-tune — all against one config file with targeted flag overrides.
#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ofa/checkpoint.h"
#include "ofa/config.h"
#include "ofa/search.h"
#include "ofa/synth.h"
#include "ofa/train.h"

namespace fs = std::filesystem;
using namespace ofa;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    int64_t seed_override = -1;
    bool force = false;
    bool desk_scale = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run config file (JSON)")->required();
    cmd->add_option("--out", args.out_override, "override the config's output directory");
    cmd->add_option("--seed", args.seed_override, "override the config's seed");
    cmd->add_flag("--force", args.force, "overwrite existing artifacts");
    cmd->add_flag("--desk-scale", args.desk_scale, "divide iteration counts by 100");
}

RunConfig resolve_config(const CommonArgs& args, bool allow_missing_data) {
    RunConfig cfg = RunConfig::load(args.config_path, allow_missing_data);
    if (!args.out_override.empty()) {
        fs::path out = args.out_override;
        if (out.is_relative()) out = fs::current_path() / out;
        cfg.out_dir = out.lexically_normal().string();
    }
    if (args.seed_override >= 0) {
        cfg.seed = static_cast<uint64_t>(args.seed_override);
        cfg.train.seed = cfg.seed;
    }
    if (args.desk_scale) cfg.apply_desk_scale();
    return cfg;
}

// Refuses to clobber an existing artifact unless --force.
void claim_output(const fs::path& path, bool force) {
    if (fs::exists(path) && !force)
        throw InputError("output exists (use --force to overwrite): " + path.string());
    fs::create_directories(path.parent_path());
}

void echo_resolved_config(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    std::ofstream os(fs::path(cfg.out_dir) / "config.resolved.json");
    os << cfg.to_json().dump(2) << "\n";
}

class TrainLog {
  public:
    TrainLog(const fs::path& path, bool force) {
        claim_output(path, force);
        os_.open(path, std::ios::app);
        if (!os_) throw InputError("cannot open log: " + path.string());
    }
    void line(int64_t iter, const std::string& phase, double loss, const std::string& arch) {
        os_ << iter << "\t" << phase << "\t" << loss << "\t" << arch << "\n";
        os_.flush();
    }

  private:
    std::ofstream os_;
};

DatasetCache load_split(const RunConfig& cfg, const std::string& split) {
    cfg.require_split(split);
    return DatasetCache(load_manifest(cfg.data.manifest(split)));
}

Constraint parse_constraint(const std::string& text) {
    // target[:epsilon[:population]]
    Constraint c;
    std::stringstream ss(text);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, ':')) parts.push_back(part);
    if (parts.empty() || parts.size() > 3) throw ConfigError("bad --constraint '" + text + "'");
    c.target_params = std::stoll(parts[0]);
    if (parts.size() > 1) c.epsilon = std::stoll(parts[1]);
    if (parts.size() > 2) c.population = std::stoi(parts[2]);
    c.validate();
    return c;
}

int run_synth_data(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, true);
    echo_resolved_config(cfg);
    for (const auto& [split, count] :
         {std::pair{std::string("train"), cfg.data.train_examples},
          std::pair{std::string("val"), cfg.data.val_examples},
          std::pair{std::string("test"), cfg.data.test_examples}}) {
        if (count <= 0) continue;
        const fs::path manifest = cfg.data.manifest(split);
        if (fs::exists(manifest) && !args.force)
            throw InputError("output exists (use --force to overwrite): " + manifest.string());
        SynthParams p;
        p.num_classes = cfg.data.classes;
        p.num_examples = count;
        p.clip_seconds = cfg.data.clip_seconds;
        p.seed = mix_seed(cfg.seed, fnv1a(split.data(), split.size()));
        p.split = split;
        auto m = synth_dataset(p, cfg.data.dir);
        std::cout << split << ": " << m.entries.size() << " examples, " << m.class_names.size()
                  << " classes -> " << manifest.string() << "\n";
    }
    return 0;
}

int run_features(const CommonArgs& args, const std::string& wav_path, const std::string& out_file) {
    RunConfig cfg = resolve_config(args, true);
    auto clip = read_wav(wav_path);
    auto f = log_mel(clip);
    const fs::path out = out_file.empty() ? fs::path(cfg.out_dir) / "features.ofaf" : fs::path(out_file);
    claim_output(out, args.force);
    write_feature_file(out.string(), f);
    std::cout << "features: " << f.mel << "x" << f.frames << " -> " << out.string() << "\n";
    return 0;
}

int run_train_teacher(const CommonArgs& args, int64_t iters_override) {
    RunConfig cfg = resolve_config(args, false);
    echo_resolved_config(cfg);
    const fs::path ckpt = fs::path(cfg.out_dir) / "teacher.ofac";
    claim_output(ckpt, args.force);

    auto train_data = load_split(cfg, "train");
    auto val_data = load_split(cfg, "val");
    const int64_t iters = iters_override >= 0 ? iters_override : cfg.teacher_iters;

    TrainLog log(fs::path(cfg.out_dir) / "teacher.log", true);
    std::ofstream map_log(fs::path(cfg.out_dir) / "teacher_val_map.tsv");

    TrainConfig tcfg = cfg.train;
    Rng init = derive_rng(tcfg.seed, kStreamInit);
    Model teacher = Model::init_standalone(cfg.supernet, largest_arch(cfg.supernet), init,
                                           ModelKind::kTeacher);
    Adam adam(teacher.trainable(), tcfg.adam());
    TrainCallbacks cb;
    cb.on_step = [&](int64_t i, const std::string& p, double l, const std::string& a) {
        log.line(i, p, l, a);
    };
    cb.on_eval = [&](int64_t i) {
        const double m = evaluate_map(teacher, largest_arch(cfg.supernet), val_data, tcfg.batch_size);
        map_log << i << "\t" << m << "\n";
        map_log.flush();
    };
    train_model(teacher, adam, train_data, tcfg, 0, iters, LossMode::kHard, nullptr,
                tcfg.augment.mixup.enabled, "teacher", cb);

    TrainState state;
    state.iteration = iters;
    save_checkpoint(ckpt.string(), teacher, state, &adam);
    const double final_map =
        evaluate_map(teacher, largest_arch(cfg.supernet), val_data, tcfg.batch_size);
    std::cout << "teacher: " << iters << " iters, val mAP " << final_map << " -> " << ckpt.string()
              << "\n";
    return 0;
}

int run_cache_teacher(const CommonArgs& args, const std::string& teacher_path) {
    RunConfig cfg = resolve_config(args, false);
    const fs::path src =
        teacher_path.empty() ? fs::path(cfg.out_dir) / "teacher.ofac" : fs::path(teacher_path);
    const fs::path out = fs::path(cfg.out_dir) / "teacher_cache.ofat";
    claim_output(out, args.force);
    auto loaded = load_checkpoint(src.string());
    auto train_data = load_split(cfg, "train");
    auto cache = build_teacher_cache(loaded.model, train_data, cfg.train.batch_size);
    save_teacher_cache(out.string(), cache);
    std::cout << "teacher cache: " << cache.ids.size() << " entries -> " << out.string() << "\n";
    return 0;
}

int run_train_supernet(const CommonArgs& args, int64_t iters_cap, const std::string& cache_path,
                       const std::string& resume_path) {
    RunConfig cfg = resolve_config(args, false);
    echo_resolved_config(cfg);
    const fs::path ckpt = fs::path(cfg.out_dir) / "supernet.ofac";
    if (resume_path.empty()) claim_output(ckpt, args.force);

    auto train_data = load_split(cfg, "train");
    auto cache = load_teacher_cache(
        cache_path.empty() ? (fs::path(cfg.out_dir) / "teacher_cache.ofat").string() : cache_path);

    TrainConfig tcfg = cfg.train;
    if (iters_cap >= 0) {
        tcfg.phase1_iters = std::min(tcfg.phase1_iters, iters_cap);
        tcfg.phase2_iters = std::min(tcfg.phase2_iters, iters_cap - tcfg.phase1_iters);
    }

    Model supernet;
    int64_t start_iter = 0;
    Rng master = derive_rng(tcfg.seed, kStreamInit);
    if (!resume_path.empty()) {
        auto loaded = load_checkpoint(resume_path);
        Adam adam = restore_adam(loaded);  // aliases the tensors the model keeps
        supernet = std::move(loaded.model);
        start_iter = loaded.train.iteration;
        master.deserialize(loaded.train.rng_state);
        TrainLog log(fs::path(cfg.out_dir) / "supernet.log", true);
        TrainCallbacks cb;
        cb.on_step = [&](int64_t i, const std::string& p, double l, const std::string& a) {
            log.line(i, p, l, a);
        };
        cb.on_checkpoint = [&](int64_t iter) {
            TrainState st;
            st.iteration = iter;
            st.rng_state = master.serialize();
            save_checkpoint((fs::path(cfg.out_dir) / "supernet_latest.ofac").string(), supernet, st,
                            &adam);
        };
        supernet_train(supernet, adam, train_data, tcfg, start_iter, cache, cb);
        TrainState state;
        state.iteration = tcfg.phase1_iters + tcfg.phase2_iters;
        state.rng_state = master.serialize();
        claim_output(ckpt, true);
        save_checkpoint(ckpt.string(), supernet, state, &adam);
    } else {
        supernet = Model::init_supernet(cfg.supernet, master);
        Adam adam(supernet.trainable(), tcfg.adam());
        TrainLog log(fs::path(cfg.out_dir) / "supernet.log", args.force);
        TrainCallbacks cb;
        cb.on_step = [&](int64_t i, const std::string& p, double l, const std::string& a) {
            log.line(i, p, l, a);
        };
        cb.on_checkpoint = [&](int64_t iter) {
            TrainState st;
            st.iteration = iter;
            st.rng_state = master.serialize();
            save_checkpoint((fs::path(cfg.out_dir) / "supernet_latest.ofac").string(), supernet, st,
                            &adam);
        };
        supernet_train(supernet, adam, train_data, tcfg, 0, cache, cb);
        TrainState state;
        state.iteration = tcfg.phase1_iters + tcfg.phase2_iters;
        state.rng_state = master.serialize();
        save_checkpoint(ckpt.string(), supernet, state, &adam);
    }
    std::cout << "supernet: iterations " << start_iter << ".."
              << (tcfg.phase1_iters + tcfg.phase2_iters) << " -> " << ckpt.string() << "\n";
    return 0;
}

int run_train_single(const CommonArgs& args, const std::string& arch_text, const std::string& mode_text,
                     int64_t iters_override, const std::string& cache_path) {
    RunConfig cfg = resolve_config(args, false);
    echo_resolved_config(cfg);
    const LossMode mode = mode_text == "scratch" ? LossMode::kHard : LossMode::kDistill;
    const fs::path ckpt = fs::path(cfg.out_dir) / ("single_" + mode_text + ".ofac");
    claim_output(ckpt, args.force);

    auto train_data = load_split(cfg, "train");
    auto arch = ArchConfig::parse(arch_text);
    validate_arch(cfg.supernet, arch);

    TeacherCache cache;
    if (mode == LossMode::kDistill)
        cache = load_teacher_cache(
            cache_path.empty() ? (fs::path(cfg.out_dir) / "teacher_cache.ofat").string() : cache_path);

    const int64_t iters = iters_override >= 0 ? iters_override : cfg.single_iters;
    TrainLog log(fs::path(cfg.out_dir) / ("single_" + mode_text + ".log"), true);
    TrainCallbacks cb;
    cb.on_step = [&](int64_t i, const std::string& p, double l, const std::string& a) {
        log.line(i, p, l, a);
    };
    auto model = train_single(cfg.supernet, arch, train_data, cfg.train, iters, mode,
                              mode == LossMode::kDistill ? &cache : nullptr, cb);
    TrainState state;
    state.iteration = iters;
    save_checkpoint(ckpt.string(), model, state);
    std::cout << "single (" << mode_text << "): arch " << arch.str() << ", params "
              << count_params(cfg.supernet, arch) << " -> " << ckpt.string() << "\n";
    return 0;
}

int run_search(const CommonArgs& args, const std::string& supernet_path,
               const std::vector<std::string>& constraint_texts) {
    RunConfig cfg = resolve_config(args, false);
    echo_resolved_config(cfg);
    auto loaded = load_checkpoint(
        supernet_path.empty() ? (fs::path(cfg.out_dir) / "supernet.ofac").string() : supernet_path);

    std::vector<Constraint> constraints = cfg.constraints;
    if (!constraint_texts.empty()) {
        constraints.clear();
        for (const auto& t : constraint_texts) constraints.push_back(parse_constraint(t));
    }
    if (constraints.empty()) throw ConfigError("no constraints given (config search.constraints)");

    auto val_data = load_split(cfg, "val");
    auto calib_data = load_split(cfg, "train");
    SearchOptions opt = cfg.search;
    opt.batch_size = cfg.train.batch_size;

    auto reports = random_search(loaded.model, constraints, val_data, calib_data, cfg.seed, opt);
    for (const auto& r : reports) {
        const std::string stem = "search_report_" + std::to_string(r.constraint.target_params);
        const fs::path jpath = fs::path(cfg.out_dir) / (stem + ".json");
        claim_output(jpath, args.force);
        std::ofstream(jpath) << r.to_json().dump(2) << "\n";
        std::ofstream(fs::path(cfg.out_dir) / (stem + ".csv")) << r.to_csv();
        std::cout << "constraint " << r.constraint.target_params << " +- " << r.constraint.epsilon
                  << ": winner " << r.winner.arch.str() << " params " << r.winner.params << " val mAP "
                  << r.winner.val_map << "\n";
    }
    return 0;
}

int run_evaluate(const CommonArgs& args, const std::string& ckpt_path, const std::string& arch_text,
                 const std::string& split) {
    RunConfig cfg = resolve_config(args, false);
    auto loaded = load_checkpoint(ckpt_path);
    const ArchConfig arch = !arch_text.empty() ? ArchConfig::parse(arch_text)
                            : loaded.model.arch ? *loaded.model.arch
                                                : largest_arch(loaded.model.spec);
    validate_arch(loaded.model.spec, arch);
    auto eval_data = load_split(cfg, split);

    ScoreMatrix scores;
    if (loaded.model.kind == ModelKind::kSupernet) {
        // supernet slices need fresh statistics before they are comparable
        auto calib_data = load_split(cfg, "train");
        BnOverride stats = clone_bn_stats(loaded.model);
        auto view = make_view(loaded.model, arch);
        int cursor = 0;
        for (int pass = 0; pass < cfg.search.calib_batches; ++pass) {
            std::vector<int> rows;
            for (int i = 0; i < cfg.train.batch_size; ++i) {
                rows.push_back(cursor);
                cursor = (cursor + 1) % calib_data.size();
            }
            auto batch = make_batch(calib_data, rows);
            subnet_forward(view, batch.features, BnMode::kTrain, &stats);
        }
        scores = collect_scores(loaded.model, arch, eval_data, cfg.train.batch_size, &stats);
    } else {
        scores = collect_scores(loaded.model, arch, eval_data, cfg.train.batch_size);
    }

    const auto aps = per_class_ap(scores);
    const double map = mean_average_precision(scores);
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& ap : aps) per_class.push_back(ap ? nlohmann::json(*ap) : nlohmann::json(nullptr));
    nlohmann::json out = {{"mAP", map},
                          {"per_class_ap", per_class},
                          {"params", count_params(loaded.model.spec, arch)},
                          {"arch", arch.str()},
                          {"split", split}};
    const fs::path jpath = fs::path(cfg.out_dir) / ("evaluate_" + split + ".json");
    claim_output(jpath, args.force);
    std::ofstream(jpath) << out.dump(2) << "\n";
    std::cout << out.dump() << "\n";
    return 0;
}

int run_finetune(const CommonArgs& args, const std::string& supernet_path, const std::string& arch_text,
                 int64_t iters_override, const std::string& cache_path) {
    RunConfig cfg = resolve_config(args, false);
    echo_resolved_config(cfg);
    const fs::path ckpt = fs::path(cfg.out_dir) / "finetune.ofac";
    claim_output(ckpt, args.force);

    auto loaded = load_checkpoint(
        supernet_path.empty() ? (fs::path(cfg.out_dir) / "supernet.ofac").string() : supernet_path);
    auto arch = ArchConfig::parse(arch_text);
    validate_arch(loaded.model.spec, arch);
    auto train_data = load_split(cfg, "train");
    auto val_data = load_split(cfg, "val");
    auto cache = load_teacher_cache(
        cache_path.empty() ? (fs::path(cfg.out_dir) / "teacher_cache.ofat").string() : cache_path);

    const int64_t iters = iters_override >= 0 ? iters_override : cfg.finetune_iters;
    SearchOptions opt = cfg.search;
    opt.batch_size = cfg.train.batch_size;
    const double before = evaluate_arch(loaded.model, arch, val_data, train_data, opt);

    TrainLog log(fs::path(cfg.out_dir) / "finetune.log", true);
    TrainCallbacks cb;
    cb.on_step = [&](int64_t i, const std::string& p, double l, const std::string& a) {
        log.line(i, p, l, a);
    };
    auto tuned = finetune_subnet(loaded.model, arch, train_data, cfg.train, iters, cache, cb);
    const double after = evaluate_map(tuned, arch, val_data, cfg.train.batch_size);

    TrainState state;
    state.iteration = iters;
    save_checkpoint(ckpt.string(), tuned, state);
    std::cout << "finetune: " << iters << " iters, val mAP " << before << " -> " << after << ", "
              << ckpt.string() << "\n";
    return 0;
}

int run_report_variance(const CommonArgs& args, const std::vector<std::string>& report_paths) {
    RunConfig cfg = resolve_config(args, true);
    std::vector<SearchReport> reports;
    for (const auto& p : report_paths) {
        std::ifstream is(p);
        if (!is) throw InputError("cannot open report: " + p);
        nlohmann::json j = nlohmann::json::parse(is);
        SearchReport r;
        r.constraint.target_params = j.at("constraint").at("target_params").get<int64_t>();
        r.constraint.epsilon = j.at("constraint").at("epsilon").get<int64_t>();
        r.constraint.population = j.at("constraint").at("population").get<int>();
        for (const auto& c : j.at("candidates")) {
            CandidateResult cand;
            cand.arch = ArchConfig::parse(c.at("arch").get<std::string>());
            cand.params = c.at("params").get<int64_t>();
            cand.val_map = c.at("val_map").get<double>();
            r.candidates.push_back(std::move(cand));
        }
        std::vector<double> scores;
        for (const auto& c : r.candidates) scores.push_back(c.val_map);
        r.stats = population_stats(scores);
        reports.push_back(std::move(r));
    }
    const std::string table = variance_report(reports);
    const fs::path out = fs::path(cfg.out_dir) / "variance.tsv";
    claim_output(out, args.force);
    std::ofstream(out) << table;
    std::cout << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    configure_runtime();
    CLI::App app{"Once-for-all acoustic event classification pipeline"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string wav_path, out_file, teacher_path, supernet_path, cache_path, resume_path;
    std::string arch_text, mode_text = "distill", split = "val", ckpt_path;
    int64_t iters_override = -1;
    std::vector<std::string> constraint_texts, report_paths;

    auto* synth = app.add_subcommand("synth-data", "generate the synthetic corpus");
    add_common(synth, common);

    auto* features = app.add_subcommand("features", "log-mel features from a wav file");
    add_common(features, common);
    features->add_option("--wav", wav_path, "input wav (PCM16 mono 32 kHz)")->required();
    features->add_option("--out-file", out_file, "output feature file");

    auto* teacher = app.add_subcommand("train-teacher", "train the full-width teacher");
    add_common(teacher, common);
    teacher->add_option("--iters", iters_override, "override teacher iterations");

    auto* cache = app.add_subcommand("cache-teacher", "precompute teacher probabilities");
    add_common(cache, common);
    cache->add_option("--teacher", teacher_path, "teacher checkpoint");

    auto* supernet = app.add_subcommand("train-supernet", "two-phase KD supernet training");
    add_common(supernet, common);
    supernet->add_option("--iters", iters_override, "cap total supernet iterations");
    supernet->add_option("--teacher-cache", cache_path, "teacher cache file");
    supernet->add_option("--resume", resume_path, "resume from a checkpoint");

    auto* single = app.add_subcommand("train-single", "train one architecture standalone");
    add_common(single, common);
    single->add_option("--arch", arch_text, "architecture string")->required();
    single->add_option("--mode", mode_text, "scratch|distill")
        ->check(CLI::IsMember({"scratch", "distill"}));
    single->add_option("--iters", iters_override, "override iterations");
    single->add_option("--teacher-cache", cache_path, "teacher cache file");

    auto* search = app.add_subcommand("search", "constraint-bounded random search");
    add_common(search, common);
    search->add_option("--supernet", supernet_path, "supernet checkpoint");
    search->add_option("--constraint", constraint_texts,
                       "target[:epsilon[:population]] (repeatable; overrides config)");

    auto* evaluate = app.add_subcommand("evaluate", "mAP of a checkpoint on a split");
    add_common(evaluate, common);
    evaluate->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    evaluate->add_option("--arch", arch_text, "architecture string (supernets)");
    evaluate->add_option("--split", split, "val|test")->check(CLI::IsMember({"val", "test"}));

    auto* finetune = app.add_subcommand("finetune", "continual KD fine-tuning of a subnet");
    add_common(finetune, common);
    finetune->add_option("--supernet", supernet_path, "supernet checkpoint");
    finetune->add_option("--arch", arch_text, "architecture string")->required();
    finetune->add_option("--iters", iters_override, "override iterations");
    finetune->add_option("--teacher-cache", cache_path, "teacher cache file");

    auto* variance = app.add_subcommand("report-variance", "population statistics table");
    add_common(variance, common);
    variance->add_option("--report", report_paths, "search report json (repeatable)")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return run_synth_data(common);
        if (features->parsed()) return run_features(common, wav_path, out_file);
        if (teacher->parsed()) return run_train_teacher(common, iters_override);
        if (cache->parsed()) return run_cache_teacher(common, teacher_path);
        if (supernet->parsed())
            return run_train_supernet(common, iters_override, cache_path, resume_path);
        if (single->parsed())
            return run_train_single(common, arch_text, mode_text, iters_override, cache_path);
        if (search->parsed()) return run_search(common, supernet_path, constraint_texts);
        if (evaluate->parsed()) return run_evaluate(common, ckpt_path, arch_text, split);
        if (finetune->parsed())
            return run_finetune(common, supernet_path, arch_text, iters_override, cache_path);
        if (variance->parsed()) return run_report_variance(common, report_paths);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const InfeasibleError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
