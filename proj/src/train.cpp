#include "ofa/train.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ofa {

void TrainConfig::validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm)");
    if (k_subnets < 1) throw ConfigError("k_subnets must be >= 1");
    if (phase1_iters < 0 || phase2_iters < 0) throw ConfigError("iteration counts must be >= 0");
    if (learning_rate <= 0.0f) throw ConfigError("learning_rate must be positive");
    if (checkpoint_interval < 1 || eval_interval < 1) throw ConfigError("intervals must be >= 1");
}

void spec_augment_inplace(float* values, int mel, int frames, const SpecAugmentConfig& cfg, Rng& rng) {
    if (!cfg.enabled) return;
    if (cfg.time_mask_width < 0 || cfg.time_mask_width > frames)
        throw InputError("time mask width exceeds frame axis");
    if (cfg.freq_mask_width < 0 || cfg.freq_mask_width > mel)
        throw InputError("freq mask width exceeds mel axis");

    double sum = 0.0;
    const int64_t n = static_cast<int64_t>(mel) * frames;
    for (int64_t i = 0; i < n; ++i) sum += values[i];
    const float fill = static_cast<float>(sum / static_cast<double>(n));

    for (int i = 0; i < cfg.num_time_masks; ++i) {
        const int w = rng.uniform_int(0, cfg.time_mask_width);
        const int start = rng.uniform_int(0, frames - w);
        for (int m = 0; m < mel; ++m)
            for (int t = start; t < start + w; ++t) values[static_cast<int64_t>(m) * frames + t] = fill;
    }
    for (int i = 0; i < cfg.num_freq_masks; ++i) {
        const int w = rng.uniform_int(0, cfg.freq_mask_width);
        const int start = rng.uniform_int(0, mel - w);
        for (int m = start; m < start + w; ++m)
            for (int t = 0; t < frames; ++t) values[static_cast<int64_t>(m) * frames + t] = fill;
    }
}

FeatureMatrix spec_augment(const FeatureMatrix& features, const SpecAugmentConfig& cfg, Rng& rng) {
    FeatureMatrix out = features;
    spec_augment_inplace(out.values.data(), out.mel, out.frames, cfg, rng);
    return out;
}

MixedExample mixup_blend(const FeatureMatrix& x1, const std::vector<float>& y1, const FeatureMatrix& x2,
                         const std::vector<float>& y2, float lambda) {
    if (x1.mel != x2.mel || x1.frames != x2.frames || y1.size() != y2.size())
        throw DimError("mixup operands differ in shape");
    MixedExample out;
    out.x.mel = x1.mel;
    out.x.frames = x1.frames;
    out.x.values.resize(x1.values.size());
    for (size_t i = 0; i < x1.values.size(); ++i)
        out.x.values[i] = lambda * x1.values[i] + (1.0f - lambda) * x2.values[i];
    out.y.resize(y1.size());
    for (size_t i = 0; i < y1.size(); ++i) out.y[i] = lambda * y1[i] + (1.0f - lambda) * y2[i];
    return out;
}

MixedExample mixup(const FeatureMatrix& x1, const std::vector<float>& y1, const FeatureMatrix& x2,
                   const std::vector<float>& y2, float alpha, Rng& rng) {
    const float lambda = static_cast<float>(rng.beta(alpha, alpha));
    return mixup_blend(x1, y1, x2, y2, lambda);
}

const std::vector<float>& TeacherCache::at(const std::string& id) const {
    auto it = probs.find(id);
    if (it == probs.end()) throw StateError("teacher cache has no entry for '" + id + "'");
    return it->second;
}

void TeacherCache::require_cover(const DatasetCache& data) const {
    if (num_classes != data.num_classes())
        throw StateError("teacher cache classes (" + std::to_string(num_classes) +
                         ") do not match dataset (" + std::to_string(data.num_classes()) + ")");
    for (int i = 0; i < data.size(); ++i)
        if (!probs.count(data.id(i)))
            throw StateError("teacher cache missing example '" + data.id(i) + "'");
}

ScoreMatrix collect_scores(const Model& model, const ArchConfig& arch, const DatasetCache& data,
                           int batch_size, const BnOverride* bn_override, int limit) {
    if (data.size() == 0) throw InputError("evaluation over an empty dataset");
    const int total = limit > 0 ? std::min(limit, data.size()) : data.size();
    auto view = make_view(model, arch);
    ScoreMatrix m;
    m.num_examples = total;
    m.num_classes = data.num_classes();
    m.scores.resize(static_cast<size_t>(total) * m.num_classes);
    m.labels.assign(static_cast<size_t>(total) * m.num_classes, 0);
    for (int lo = 0; lo < total; lo += batch_size) {
        const int hi = std::min(total, lo + batch_size);
        std::vector<int> rows;
        for (int i = lo; i < hi; ++i) rows.push_back(i);
        auto batch = make_batch(data, rows);
        auto probs = subnet_forward(view, batch.features, BnMode::kEval, bn_override);
        std::copy(probs->data.begin(), probs->data.end(),
                  m.scores.begin() + static_cast<size_t>(lo) * m.num_classes);
        for (int i = lo; i < hi; ++i)
            for (int l : data.labels(i))
                m.labels[static_cast<size_t>(i) * m.num_classes + static_cast<size_t>(l)] = 1;
    }
    return m;
}

double evaluate_map(const Model& model, const ArchConfig& arch, const DatasetCache& data, int batch_size,
                    const BnOverride* bn_override, int limit) {
    return mean_average_precision(collect_scores(model, arch, data, batch_size, bn_override, limit));
}

TeacherCache build_teacher_cache(const Model& teacher, const DatasetCache& data, int batch_size) {
    const ArchConfig arch = teacher.arch ? *teacher.arch : largest_arch(teacher.spec);
    auto view = make_view(teacher, arch);
    TeacherCache cache;
    cache.num_classes = teacher.spec.head.num_classes;
    for (int lo = 0; lo < data.size(); lo += batch_size) {
        const int hi = std::min(data.size(), lo + batch_size);
        std::vector<int> rows;
        for (int i = lo; i < hi; ++i) rows.push_back(i);
        auto batch = make_batch(data, rows);
        auto probs = subnet_forward(view, batch.features, BnMode::kEval);
        const int classes = cache.num_classes;
        for (int i = lo; i < hi; ++i) {
            std::vector<float> p(probs->data.begin() + static_cast<size_t>(i - lo) * classes,
                                 probs->data.begin() + static_cast<size_t>(i - lo + 1) * classes);
            cache.ids.push_back(data.id(i));
            cache.probs.emplace(data.id(i), std::move(p));
        }
    }
    return cache;
}

void save_teacher_cache(const std::string& path, const TeacherCache& cache) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write teacher cache: " + path);
    os.write("OFAT", 4);
    const uint32_t version = 1, classes = static_cast<uint32_t>(cache.num_classes);
    const uint64_t count = cache.ids.size();
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&classes), 4);
    os.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& id : cache.ids) {
        const uint32_t len = static_cast<uint32_t>(id.size());
        os.write(reinterpret_cast<const char*>(&len), 4);
        os.write(id.data(), len);
        const auto& p = cache.probs.at(id);
        os.write(reinterpret_cast<const char*>(p.data()),
                 static_cast<std::streamsize>(p.size() * sizeof(float)));
    }
}

TeacherCache load_teacher_cache(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open teacher cache: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "OFAT", 4) != 0) throw FormatError("bad teacher cache magic in " + path);
    uint32_t version = 0, classes = 0;
    uint64_t count = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&classes), 4);
    is.read(reinterpret_cast<char*>(&count), 8);
    if (!is || version != 1) throw FormatError("unsupported teacher cache in " + path);
    TeacherCache cache;
    cache.num_classes = static_cast<int>(classes);
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t len = 0;
        is.read(reinterpret_cast<char*>(&len), 4);
        std::string id(len, '\0');
        is.read(id.data(), len);
        std::vector<float> p(classes);
        is.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(classes * sizeof(float)));
        if (!is) throw CorruptionError("truncated teacher cache at entry " + std::to_string(i));
        cache.ids.push_back(id);
        cache.probs.emplace(std::move(id), std::move(p));
    }
    return cache;
}

namespace {

TensorPtr distill_targets(const TeacherCache& cache, const DatasetCache& data, const Batch& batch) {
    const int classes = cache.num_classes;
    auto t = Tensor::zeros({static_cast<int>(batch.indices.size()), classes});
    for (size_t i = 0; i < batch.indices.size(); ++i) {
        const auto& p = cache.at(data.id(batch.indices[i]));
        std::copy(p.begin(), p.end(), t->data.begin() + static_cast<int64_t>(i) * classes);
    }
    return t;
}

void augment_batch(TensorPtr& features, const SpecAugmentConfig& cfg, Rng& rng) {
    const int batch = features->dim(0);
    const int mel = features->dim(2), frames = features->dim(3);
    for (int i = 0; i < batch; ++i)
        spec_augment_inplace(features->data.data() + static_cast<int64_t>(i) * mel * frames, mel, frames,
                             cfg, rng);
}

void mixup_batch(TensorPtr& features, TensorPtr& labels, const MixupConfig& cfg, Rng& rng) {
    if (!cfg.enabled) return;
    const int batch = features->dim(0);
    const int64_t feat = static_cast<int64_t>(features->dim(2)) * features->dim(3);
    const int classes = labels->dim(1);
    std::vector<int> perm(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i) perm[static_cast<size_t>(i)] = i;
    for (int i = batch - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(0, i))]);

    const std::vector<float> fsrc = features->data;
    const std::vector<float> lsrc = labels->data;
    for (int i = 0; i < batch; ++i) {
        const float lam = static_cast<float>(rng.beta(cfg.alpha, cfg.alpha));
        const int j = perm[static_cast<size_t>(i)];
        float* fx = features->data.data() + static_cast<int64_t>(i) * feat;
        const float* fa = fsrc.data() + static_cast<int64_t>(i) * feat;
        const float* fb = fsrc.data() + static_cast<int64_t>(j) * feat;
        for (int64_t k = 0; k < feat; ++k) fx[k] = lam * fa[k] + (1.0f - lam) * fb[k];
        float* lx = labels->data.data() + static_cast<int64_t>(i) * classes;
        const float* la = lsrc.data() + static_cast<int64_t>(i) * classes;
        const float* lb = lsrc.data() + static_cast<int64_t>(j) * classes;
        for (int k = 0; k < classes; ++k) lx[k] = lam * la[k] + (1.0f - lam) * lb[k];
    }
}

// bce_soft clamps its inputs, so divergence must be caught on the raw
// probabilities before the loss hides it.
void require_finite(const TensorPtr& probs, int64_t iter) {
    for (float v : probs->data)
        if (!std::isfinite(v))
            throw DivergenceError("non-finite model output at iteration " + std::to_string(iter));
}

void fire_interval_callbacks(const TrainConfig& cfg, const TrainCallbacks& cb, int64_t iter) {
    if (cb.on_checkpoint && (iter + 1) % cfg.checkpoint_interval == 0) cb.on_checkpoint(iter + 1);
    if (cb.on_eval && (iter + 1) % cfg.eval_interval == 0) cb.on_eval(iter + 1);
}

}  // namespace

void train_model(Model& model, Adam& adam, const DatasetCache& data, const TrainConfig& cfg,
                 int64_t start_iter, int64_t end_iter, LossMode mode, const TeacherCache* teacher,
                 bool use_mixup, const std::string& phase, const TrainCallbacks& cb) {
    cfg.validate();
    if (mode == LossMode::kDistill) {
        if (!teacher) throw StateError("distillation training needs a teacher cache");
        teacher->require_cover(data);
    }
    const ArchConfig arch = model.arch ? *model.arch : largest_arch(model.spec);
    auto view = make_view(model, arch);
    const std::string arch_str = arch.str();
    BatchStream stream(data, cfg.batch_size, cfg.seed);

    for (int64_t iter = start_iter; iter < end_iter; ++iter) {
        auto batch = stream.batch_at(iter);
        TensorPtr target =
            mode == LossMode::kDistill ? distill_targets(*teacher, data, batch) : batch.labels;
        if (use_mixup && mode == LossMode::kHard) {
            Rng mix_rng = derive_rng(cfg.seed, kStreamMixup, static_cast<uint64_t>(iter));
            mixup_batch(batch.features, batch.labels, cfg.augment.mixup, mix_rng);
            target = batch.labels;
        }
        Rng aug_rng = derive_rng(cfg.seed, kStreamAugment, static_cast<uint64_t>(iter));
        augment_batch(batch.features, cfg.augment.specaugment, aug_rng);

        GradTape tape;
        auto probs = subnet_forward(view, batch.features, BnMode::kTrain);
        require_finite(probs, iter);
        auto loss = bce_soft(probs, target);
        const double loss_value = loss->data[0];
        if (!std::isfinite(loss_value))
            throw DivergenceError("non-finite loss at iteration " + std::to_string(iter));
        tape.backward(loss);
        adam.step();

        if (cb.on_step) cb.on_step(iter, phase, loss_value, arch_str);
        fire_interval_callbacks(cfg, cb, iter);
    }
}

Model train_teacher(const SupernetSpec& spec, const DatasetCache& data, const TrainConfig& cfg,
                    int64_t iters, const TrainCallbacks& cb) {
    Rng init_rng = derive_rng(cfg.seed, kStreamInit);
    Model teacher = Model::init_standalone(spec, largest_arch(spec), init_rng, ModelKind::kTeacher);
    Adam adam(teacher.trainable(), cfg.adam());
    train_model(teacher, adam, data, cfg, 0, iters, LossMode::kHard, nullptr,
                cfg.augment.mixup.enabled, "teacher", cb);
    return teacher;
}

Model train_single(const SupernetSpec& spec, const ArchConfig& arch, const DatasetCache& data,
                   const TrainConfig& cfg, int64_t iters, LossMode mode, const TeacherCache* teacher,
                   const TrainCallbacks& cb) {
    validate_arch(spec, arch);
    Rng init_rng = derive_rng(cfg.seed, kStreamInit);
    Model model = Model::init_standalone(spec, arch, init_rng, ModelKind::kSingle);
    Adam adam(model.trainable(), cfg.adam());
    train_model(model, adam, data, cfg, 0, iters, mode, teacher, false, "single", cb);
    return model;
}

void supernet_train(Model& supernet, Adam& adam, const DatasetCache& data, const TrainConfig& cfg,
                    int64_t start_iter, const TeacherCache& teacher, const TrainCallbacks& cb) {
    cfg.validate();
    teacher.require_cover(data);
    if (supernet.arch) throw StateError("supernet training needs an elastic model");
    const auto largest = largest_arch(supernet.spec);
    auto largest_view = make_view(supernet, largest);
    const std::string largest_str = largest.str();
    BatchStream stream(data, cfg.batch_size, cfg.seed);
    const int64_t total = cfg.phase1_iters + cfg.phase2_iters;

    const int mel = data.mel(), frames = data.frames();
    for (int64_t iter = start_iter; iter < total; ++iter) {
        auto batch = stream.batch_at(iter);
        auto target = distill_targets(teacher, data, batch);
        Rng aug_rng = derive_rng(cfg.seed, kStreamAugment, static_cast<uint64_t>(iter));

        GradTape tape;
        TensorPtr loss;
        std::string arch_str;
        if (iter < cfg.phase1_iters) {
            augment_batch(batch.features, cfg.augment.specaugment, aug_rng);
            auto probs = subnet_forward(largest_view, batch.features, BnMode::kTrain);
            require_finite(probs, iter);
            loss = bce_soft(probs, target);
            arch_str = largest_str;
        } else {
            Rng arch_rng = derive_rng(cfg.seed, kStreamArch, static_cast<uint64_t>(iter));
            for (int k = 0; k < cfg.k_subnets; ++k) {
                const auto arch = sample_arch(arch_rng, supernet.spec);
                auto view = make_view(supernet, arch);
                // fresh augmentation draw per sampled subnet
                auto x = Tensor::from_data(batch.features->shape, batch.features->data);
                for (int i = 0; i < x->dim(0); ++i)
                    spec_augment_inplace(x->data.data() + static_cast<int64_t>(i) * mel * frames, mel,
                                         frames, cfg.augment.specaugment, aug_rng);
                auto probs = subnet_forward(view, x, BnMode::kTrain);
                require_finite(probs, iter);
                auto l = bce_soft(probs, target);
                loss = loss ? add(loss, l) : l;
                if (!arch_str.empty()) arch_str += ";";
                arch_str += arch.str();
            }
        }
        const double loss_value = loss->data[0];
        if (!std::isfinite(loss_value))
            throw DivergenceError("non-finite loss at iteration " + std::to_string(iter));
        tape.backward(loss);
        adam.step();  // one update over the summed losses

        const std::string phase = iter < cfg.phase1_iters ? "phase1" : "phase2";
        if (cb.on_step) cb.on_step(iter, phase, loss_value, arch_str);
        fire_interval_callbacks(cfg, cb, iter);
    }
}

Model finetune_subnet(const Model& supernet, const ArchConfig& arch, const DatasetCache& data,
                      const TrainConfig& cfg, int64_t iters, const TeacherCache& teacher,
                      const TrainCallbacks& cb) {
    Model model = extract_standalone(supernet, arch, ModelKind::kSingle);
    Adam adam(model.trainable(), cfg.adam());
    train_model(model, adam, data, cfg, 0, iters, LossMode::kDistill, &teacher, false, "finetune", cb);
    return model;
}

}  // namespace ofa
