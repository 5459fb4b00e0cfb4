#include "ofa/dataset.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace ofa {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : line) {
        if (c == '\t') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    return parts;
}

}  // namespace

void DatasetManifest::validate() const {
    if (class_names.empty()) throw ManifestError("manifest has no class table");
    std::vector<std::string> seen;
    for (const auto& e : entries) {
        if (e.id.empty()) throw ManifestError("manifest entry with empty id");
        for (int l : e.labels)
            if (l < 0 || l >= num_classes())
                throw ManifestError("entry '" + e.id + "' has label index " + std::to_string(l) +
                                    " outside 0.." + std::to_string(num_classes() - 1));
    }
    std::vector<std::string> ids;
    ids.reserve(entries.size());
    for (const auto& e : entries) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw ManifestError("duplicate ids in manifest");
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    manifest.validate();
    std::ofstream os(path);
    if (!os) throw ManifestError("cannot write manifest: " + path);
    os << "#split\t" << manifest.split << "\n";
    for (size_t i = 0; i < manifest.class_names.size(); ++i)
        os << "#class\t" << i << "\t" << manifest.class_names[i] << "\n";
    for (const auto& e : manifest.entries) {
        os << e.id << "\t" << e.path << "\t";
        for (size_t i = 0; i < e.labels.size(); ++i) os << (i ? "," : "") << e.labels[i];
        os << "\n";
    }
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ManifestError("cannot open manifest: " + path);
    DatasetManifest m;
    m.base_dir = fs::path(path).parent_path().string();
    std::string line;
    std::vector<std::pair<int, std::string>> classes;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto parts = split_tabs(line);
        if (line[0] == '#') {
            if (parts[0] == "#split" && parts.size() == 2) {
                m.split = parts[1];
            } else if (parts[0] == "#class" && parts.size() == 3) {
                classes.emplace_back(std::stoi(parts[1]), parts[2]);
            } else {
                throw ManifestError("bad header line in " + path + ": " + line);
            }
            continue;
        }
        if (parts.size() != 3) throw ManifestError("bad entry line in " + path + ": " + line);
        ManifestEntry e;
        e.id = parts[0];
        e.path = parts[1];
        std::stringstream ls(parts[2]);
        std::string tok;
        while (std::getline(ls, tok, ','))
            if (!tok.empty()) e.labels.push_back(std::stoi(tok));
        if (e.labels.empty()) throw ManifestError("entry '" + e.id + "' has no labels");
        m.entries.push_back(std::move(e));
    }
    std::sort(classes.begin(), classes.end());
    for (size_t i = 0; i < classes.size(); ++i) {
        if (classes[i].first != static_cast<int>(i))
            throw ManifestError("class table in " + path + " is not contiguous");
        m.class_names.push_back(classes[i].second);
    }
    m.validate();
    return m;
}

DatasetCache::DatasetCache(const DatasetManifest& manifest) {
    manifest.validate();
    num_classes_ = manifest.num_classes();
    features_.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        const fs::path full = fs::path(manifest.base_dir) / e.path;
        if (!fs::exists(full))
            throw ManifestError("entry '" + e.id + "': missing feature file " + full.string());
        FeatureMatrix f = read_feature_file(full.string());
        if (mel_ == 0) {
            mel_ = f.mel;
            frames_ = f.frames;
        } else if (f.mel != mel_ || f.frames != frames_) {
            throw ManifestError("entry '" + e.id + "': feature shape " + std::to_string(f.mel) + "x" +
                                std::to_string(f.frames) + " differs from " + std::to_string(mel_) + "x" +
                                std::to_string(frames_));
        }
        features_.push_back(std::move(f));
        labels_.push_back(e.labels);
        ids_.push_back(e.id);
    }
}

BatchStream::BatchStream(const DatasetCache& cache, int batch_size, uint64_t seed)
    : cache_(&cache), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ < 1) throw InputError("batch size must be >= 1");
    if (cache.size() == 0) throw InputError("batch stream over an empty dataset");
    batches_per_epoch_ = (cache.size() + batch_size_ - 1) / batch_size_;
}

Batch BatchStream::batch_at(int64_t step) const {
    const int64_t epoch = step / batches_per_epoch_;
    const int k = static_cast<int>(step % batches_per_epoch_);
    if (epoch != cached_epoch_) {
        perm_.resize(static_cast<size_t>(cache_->size()));
        for (int i = 0; i < cache_->size(); ++i) perm_[static_cast<size_t>(i)] = i;
        Rng rng = derive_rng(seed_, kStreamShuffle, static_cast<uint64_t>(epoch));
        for (int i = cache_->size() - 1; i > 0; --i)
            std::swap(perm_[static_cast<size_t>(i)], perm_[static_cast<size_t>(rng.uniform_int(0, i))]);
        cached_epoch_ = epoch;
    }
    const int lo = k * batch_size_;
    const int hi = std::min(cache_->size(), lo + batch_size_);
    return make_batch(*cache_, std::vector<int>(perm_.begin() + lo, perm_.begin() + hi));
}

Batch make_batch(const DatasetCache& cache, const std::vector<int>& rows) {
    if (rows.empty()) throw InputError("empty batch");
    const int mel = cache.mel(), frames = cache.frames(), classes = cache.num_classes();
    Batch batch;
    batch.indices = rows;
    batch.features = Tensor::zeros({static_cast<int>(rows.size()), 1, mel, frames});
    batch.labels = Tensor::zeros({static_cast<int>(rows.size()), classes});
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& f = cache.features(rows[i]);
        std::copy(f.values.begin(), f.values.end(),
                  batch.features->data.begin() + static_cast<int64_t>(i) * mel * frames);
        for (int l : cache.labels(rows[i]))
            batch.labels->data[i * static_cast<size_t>(classes) + static_cast<size_t>(l)] = 1.0f;
    }
    return batch;
}

}  // namespace ofa
