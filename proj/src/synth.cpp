#include "ofa/synth.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace fs = std::filesystem;

namespace ofa {

namespace {

constexpr uint64_t kStreamLabels = 101;
constexpr uint64_t kStreamRender = 102;

// Classes sharing a family (k, k+4, ...) sit a scant 16% apart in frequency;
// with per-event detune their ranges overlap, so the corpus carries genuine
// same-family confusion instead of clean spectral anchors.
double class_frequency(int k, int num_classes) {
    (void)num_classes;
    static const double base[4] = {400.0, 620.0, 950.0, 1500.0};
    return base[k % 4] * std::pow(1.16, k / 4);
}

std::string class_name(int k, int num_classes) {
    static const char* families[] = {"tone", "noise", "chirp", "amtone"};
    const int hz = static_cast<int>(std::lround(class_frequency(k, num_classes)));
    return std::string(families[k % 4]) + "_" + std::to_string(hz) + "hz";
}

// Voss-McCartney pink noise: one of 16 octave rows refreshes per sample.
std::vector<float> pink_noise(size_t n, Rng& rng) {
    constexpr int kRows = 16;
    double rows[kRows];
    double total = 0.0;
    for (double& r : rows) {
        r = rng.uniform(-1.0, 1.0);
        total += r;
    }
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) {
        size_t counter = i + 1;
        int row = 0;
        while (row < kRows - 1 && (counter & 1u) == 0) {
            counter >>= 1;
            ++row;
        }
        total -= rows[row];
        rows[row] = rng.uniform(-1.0, 1.0);
        total += rows[row];
        out[i] = static_cast<float>(total / kRows);
    }
    return out;
}

double rms(const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s / std::max<size_t>(1, v.size()));
}

// One event of class k: family decided by k % 4, length and phase by rng.
std::vector<float> render_event(int k, int num_classes, size_t length, Rng& rng) {
    const double f0 = class_frequency(k, num_classes) * (1.0 + rng.uniform(-0.12, 0.12));
    const double sr = kSampleRate;
    std::vector<float> out(length, 0.0f);
    const double phase0 = rng.uniform(0.0, 2.0 * M_PI);
    switch (k % 4) {
        case 0:  // steady tone
            for (size_t i = 0; i < length; ++i)
                out[i] = static_cast<float>(std::sin(phase0 + 2.0 * M_PI * f0 * i / sr));
            break;
        case 1: {  // band-limited noise: white noise through a resonant two-pole
            const double bw = f0 * 0.25;
            const double r = std::exp(-M_PI * bw / sr);
            const double a1 = -2.0 * r * std::cos(2.0 * M_PI * f0 / sr);
            const double a2 = r * r;
            double y1 = 0.0, y2 = 0.0;
            for (size_t i = 0; i < length; ++i) {
                const double x = rng.uniform(-1.0, 1.0);
                const double y = x - a1 * y1 - a2 * y2;
                y2 = y1;
                y1 = y;
                out[i] = static_cast<float>(y * (1.0 - r));
            }
            break;
        }
        case 2: {  // linear chirp f0 -> 1.5 f0
            double phase = phase0;
            for (size_t i = 0; i < length; ++i) {
                const double f = f0 * (1.0 + 0.5 * static_cast<double>(i) / static_cast<double>(length));
                phase += 2.0 * M_PI * f / sr;
                out[i] = static_cast<float>(std::sin(phase));
            }
            break;
        }
        default: {  // amplitude-modulated tone, 6 Hz modulation
            for (size_t i = 0; i < length; ++i) {
                const double am = 0.5 * (1.0 + std::sin(2.0 * M_PI * 6.0 * i / sr));
                out[i] = static_cast<float>(am * std::sin(phase0 + 2.0 * M_PI * f0 * i / sr));
            }
            break;
        }
    }
    // 10 ms attack/release ramps against clicks
    const size_t ramp = std::min<size_t>(length / 4, static_cast<size_t>(sr * 0.01));
    for (size_t i = 0; i < ramp; ++i) {
        const float g = static_cast<float>(i + 1) / static_cast<float>(ramp + 1);
        out[i] *= g;
        out[length - 1 - i] *= g;
    }
    return out;
}

std::vector<std::vector<int>> draw_label_sets(const SynthParams& p, Rng& rng) {
    std::vector<std::vector<int>> labels(static_cast<size_t>(p.num_examples));
    const auto draw_one = [&](Rng& r, int force_class) {
        const int n_pos = r.uniform_int(1, 3);
        std::vector<int> classes;
        if (force_class >= 0) classes.push_back(force_class);
        while (static_cast<int>(classes.size()) < n_pos) {
            const int c = r.uniform_int(0, p.num_classes - 1);
            if (std::find(classes.begin(), classes.end(), c) == classes.end()) classes.push_back(c);
        }
        std::sort(classes.begin(), classes.end());
        return classes;
    };
    for (auto& l : labels) l = draw_one(rng, -1);

    // rebalance: every class must land in at least num_examples/20 examples
    const int min_count = std::max(1, p.num_examples / 20);
    for (;;) {
        std::vector<int> counts(static_cast<size_t>(p.num_classes), 0);
        for (const auto& l : labels)
            for (int c : l) ++counts[static_cast<size_t>(c)];
        int rare = -1;
        for (int c = 0; c < p.num_classes; ++c)
            if (counts[static_cast<size_t>(c)] < min_count) {
                rare = c;
                break;
            }
        if (rare < 0) break;
        const int victim = rng.uniform_int(0, p.num_examples - 1);
        labels[static_cast<size_t>(victim)] = draw_one(rng, rare);
    }
    return labels;
}

}  // namespace

DatasetManifest synth_dataset(const SynthParams& p, const std::string& out_dir) {
    if (p.num_classes < 2) throw InputError("synth corpus needs at least 2 classes");
    if (p.num_examples < 1) throw InputError("synth corpus needs at least 1 example");
    const auto clip_len = static_cast<size_t>(std::llround(p.clip_seconds * kSampleRate));
    if (clip_len == 0) throw InputError("clip length must be positive");

    const fs::path dir = fs::path(out_dir) / p.split;
    fs::create_directories(dir);

    const uint64_t split_tag = fnv1a(p.split.data(), p.split.size());
    Rng label_rng = derive_rng(p.seed, kStreamLabels, split_tag);
    const auto label_sets = draw_label_sets(p, label_rng);

    DatasetManifest manifest;
    manifest.split = p.split;
    manifest.base_dir = out_dir;
    for (int c = 0; c < p.num_classes; ++c) manifest.class_names.push_back(class_name(c, p.num_classes));

    std::vector<ManifestEntry> entries(static_cast<size_t>(p.num_examples));
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < p.num_examples; ++i) {
        Rng rng = derive_rng(p.seed, kStreamRender, split_tag, static_cast<uint64_t>(i));
        auto mix = pink_noise(clip_len, rng);
        const double bed_rms = std::max(1e-6, rms(mix));
        for (int c : label_sets[static_cast<size_t>(i)]) {
            const double frac = rng.uniform(0.15, 0.4);
            const auto ev_len = std::max<size_t>(static_cast<size_t>(frac * clip_len), 64);
            const auto onset = static_cast<size_t>(rng.uniform(0.0, 1.0) * (clip_len - ev_len));
            const double snr_db = rng.uniform(5.0, 20.0);
            auto event = render_event(c, p.num_classes, ev_len, rng);
            const double ev_rms = std::max(1e-9, rms(event));
            const double gain = bed_rms * std::pow(10.0, snr_db / 20.0) / ev_rms;
            for (size_t j = 0; j < ev_len; ++j)
                mix[onset + j] += static_cast<float>(gain * event[j]);
        }
        float peak = 0.0f;
        for (float v : mix) peak = std::max(peak, std::abs(v));
        if (peak > 0.9f)
            for (float& v : mix) v *= 0.9f / peak;

        WaveClip clip;
        clip.samples = std::move(mix);
        const auto features = log_mel(clip);

        char name[64];
        std::snprintf(name, sizeof(name), "%s-%05d", p.split.c_str(), i);
        const std::string rel = p.split + "/" + name + ".ofaf";
        write_feature_file((fs::path(out_dir) / rel).string(), features);
        entries[static_cast<size_t>(i)] = {name, rel, label_sets[static_cast<size_t>(i)]};
    }
    manifest.entries = std::move(entries);
    save_manifest(manifest, (fs::path(out_dir) / (p.split + ".tsv")).string());
    return manifest;
}

}  // namespace ofa
