#pragma once

#include <string>
#include <vector>

#include "ofa/features.h"
#include "ofa/tensor.h"

namespace ofa {

struct ManifestEntry {
    std::string id;
    std::string path;  // relative to the manifest's directory
    std::vector<int> labels;
};

struct DatasetManifest {
    std::string split;  // train|val|test
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> entries;
    std::string base_dir;  // set on load; feature paths resolve against it

    int num_classes() const { return static_cast<int>(class_names.size()); }
    void validate() const;
};

// Line-oriented, tab-separated; '#'-prefixed header lines carry the split
// tag and the class table.
void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// All features resident in memory. Every referenced file is read eagerly so
// a broken manifest fails at load, naming the offending entry.
class DatasetCache {
  public:
    explicit DatasetCache(const DatasetManifest& manifest);

    int size() const { return static_cast<int>(features_.size()); }
    int num_classes() const { return num_classes_; }
    int mel() const { return mel_; }
    int frames() const { return frames_; }
    const FeatureMatrix& features(int i) const { return features_[static_cast<size_t>(i)]; }
    const std::vector<int>& labels(int i) const { return labels_[static_cast<size_t>(i)]; }
    const std::string& id(int i) const { return ids_[static_cast<size_t>(i)]; }

  private:
    int num_classes_ = 0;
    int mel_ = 0;
    int frames_ = 0;
    std::vector<FeatureMatrix> features_;
    std::vector<std::vector<int>> labels_;
    std::vector<std::string> ids_;
};

struct Batch {
    TensorPtr features;        // [B, 1, mel, T]
    TensorPtr labels;          // [B, C] multi-hot
    std::vector<int> indices;  // rows into the cache
};

// Deterministic shuffled batching: epoch e uses the permutation drawn from
// rng(seed, e), so the batch at any global step is a pure function of
// (seed, dataset, batch_size, step). The final short batch is kept.
class BatchStream {
  public:
    BatchStream(const DatasetCache& cache, int batch_size, uint64_t seed);

    int batches_per_epoch() const { return batches_per_epoch_; }
    Batch batch_at(int64_t step) const;

  private:
    const DatasetCache* cache_;
    int batch_size_;
    uint64_t seed_;
    int batches_per_epoch_;
    mutable int64_t cached_epoch_ = -1;
    mutable std::vector<int> perm_;
};

// Stacks explicit cache rows into a batch (calibration passes, evaluation).
Batch make_batch(const DatasetCache& cache, const std::vector<int>& rows);

}  // namespace ofa
