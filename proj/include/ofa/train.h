#pragma once

#include <functional>
#include <unordered_map>

#include "ofa/checkpoint.h"
#include "ofa/dataset.h"
#include "ofa/metrics.h"
#include "ofa/supernet.h"

namespace ofa {

struct SpecAugmentConfig {
    bool enabled = true;
    int time_mask_width = 64;  // T
    int freq_mask_width = 8;   // F
    int num_time_masks = 2;
    int num_freq_masks = 2;
};

struct MixupConfig {
    bool enabled = true;
    float alpha = 1.0f;
};

struct AugmentConfig {
    SpecAugmentConfig specaugment;
    MixupConfig mixup;
};

enum class LossMode { kHard, kDistill };

struct TrainConfig {
    int batch_size = 64;
    float learning_rate = 1e-3f;
    int64_t phase1_iters = 100000;
    int64_t phase2_iters = 200000;
    int k_subnets = 4;
    uint64_t seed = 0;
    AugmentConfig augment;
    LossMode loss_mode = LossMode::kDistill;
    int64_t checkpoint_interval = 10000;
    int64_t eval_interval = 1000;

    void validate() const;
    AdamConfig adam() const { return {learning_rate, 0.9f, 0.999f, 1e-8f}; }
};

// Masked cells are set to the matrix's mean value (pre-mask). Per mask: width
// drawn uniform in [0, cfg width], then start uniform in [0, axis - width].
// Masks may overlap. Two draws are consumed per mask regardless of width.
void spec_augment_inplace(float* values, int mel, int frames, const SpecAugmentConfig& cfg, Rng& rng);
FeatureMatrix spec_augment(const FeatureMatrix& features, const SpecAugmentConfig& cfg, Rng& rng);

struct MixedExample {
    FeatureMatrix x;
    std::vector<float> y;
};

MixedExample mixup_blend(const FeatureMatrix& x1, const std::vector<float>& y1, const FeatureMatrix& x2,
                         const std::vector<float>& y2, float lambda);
// lambda ~ Beta(alpha, alpha)
MixedExample mixup(const FeatureMatrix& x1, const std::vector<float>& y1, const FeatureMatrix& x2,
                   const std::vector<float>& y2, float alpha, Rng& rng);

// Teacher probabilities on clean (un-augmented) features, keyed by example id.
struct TeacherCache {
    int num_classes = 0;
    std::vector<std::string> ids;
    std::unordered_map<std::string, std::vector<float>> probs;

    const std::vector<float>& at(const std::string& id) const;
    void require_cover(const DatasetCache& data) const;
};

TeacherCache build_teacher_cache(const Model& teacher, const DatasetCache& data, int batch_size);
void save_teacher_cache(const std::string& path, const TeacherCache& cache);
TeacherCache load_teacher_cache(const std::string& path);

struct TrainCallbacks {
    std::function<void(int64_t iter, const std::string& phase, double loss, const std::string& arch)>
        on_step;
    std::function<void(int64_t iter)> on_checkpoint;  // fires every checkpoint_interval steps
    std::function<void(int64_t iter)> on_eval;        // fires every eval_interval steps
};

// Eval-mode forward over the whole set in manifest order; macro mAP.
double evaluate_map(const Model& model, const ArchConfig& arch, const DatasetCache& data, int batch_size,
                    const BnOverride* bn_override = nullptr, int limit = 0);
ScoreMatrix collect_scores(const Model& model, const ArchConfig& arch, const DatasetCache& data,
                           int batch_size, const BnOverride* bn_override = nullptr, int limit = 0);

// Core loop: steps `model` in place over [start_iter, end_iter). Hard mode
// trains against the multi-hot labels, distill mode against cached teacher
// probabilities. SpecAugment applies per example; mixup only when
// `use_mixup`. Aborts with DivergenceError on a non-finite loss.
void train_model(Model& model, Adam& adam, const DatasetCache& data, const TrainConfig& cfg,
                 int64_t start_iter, int64_t end_iter, LossMode mode, const TeacherCache* teacher,
                 bool use_mixup, const std::string& phase, const TrainCallbacks& cb = {});

// Largest architecture, hard labels, mixup + SpecAugment.
Model train_teacher(const SupernetSpec& spec, const DatasetCache& data, const TrainConfig& cfg,
                    int64_t iters, const TrainCallbacks& cb = {});

// Standalone weights for one arch; scratch = hard labels, distill = KD.
// SpecAugment on in both, no mixup.
Model train_single(const SupernetSpec& spec, const ArchConfig& arch, const DatasetCache& data,
                   const TrainConfig& cfg, int64_t iters, LossMode mode, const TeacherCache* teacher,
                   const TrainCallbacks& cb = {});

// Two-phase KD supernet training. Phase 1 trains only the largest subnet;
// phase 2 samples K archs per step, sums their K distillation losses (fresh
// SpecAugment draw per subnet) and applies one optimizer update. Resumable
// from any start_iter.
void supernet_train(Model& supernet, Adam& adam, const DatasetCache& data, const TrainConfig& cfg,
                    int64_t start_iter, const TeacherCache& teacher, const TrainCallbacks& cb = {});

// Copies the subnet out of the supernet, then continues with KD training.
Model finetune_subnet(const Model& supernet, const ArchConfig& arch, const DatasetCache& data,
                      const TrainConfig& cfg, int64_t iters, const TeacherCache& teacher,
                      const TrainCallbacks& cb = {});

}  // namespace ofa
