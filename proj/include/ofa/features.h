#pragma once

#include <string>
#include <vector>

#include "ofa/common.h"

namespace ofa {

struct WaveClip {
    std::vector<float> samples;  // [-1, 1]
    int sample_rate = 32000;

    double duration() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

struct FeatureMatrix {
    int mel = 0;
    int frames = 0;
    std::vector<float> values;  // row-major [mel, frames]

    float at(int m, int t) const { return values[static_cast<size_t>(m) * frames + t]; }
};

constexpr int kMelBins = 64;
constexpr int kStftWindow = 1024;
constexpr int kStftHop = 320;
constexpr int kSampleRate = 32000;
constexpr float kLogFloor = 1e-10f;

// Frames produced for a clip of `num_samples`: both ends are padded with
// (window - hop)/2 zeros, which centers each frame on its hop segment and
// yields exactly len/hop frames whenever hop divides len (1000 for 10 s,
// 200 for 2 s).
int log_mel_frames(int64_t num_samples);

// 64-band log-mel spectrogram: Hann window 1024, hop 320, power spectrum,
// HTK-scale triangular filters spanning 0..16 kHz, natural log with floor
// 1e-10. Requires 32 kHz input.
FeatureMatrix log_mel(const WaveClip& clip);

// Feature files: 16-byte header {magic "OFAF", version u32, mel u32,
// frames u32} then raw little-endian f32, row-major [mel, frames].
void write_feature_file(const std::string& path, const FeatureMatrix& f);
FeatureMatrix read_feature_file(const std::string& path);

// Minimal PCM16 mono WAV support; ingestion only accepts 32 kHz.
WaveClip read_wav(const std::string& path);
void write_wav(const std::string& path, const WaveClip& clip);

}  // namespace ofa
