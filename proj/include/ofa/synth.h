#pragma once

#include <string>

#include "ofa/dataset.h"

namespace ofa {

// Synthetic multi-label acoustic-event corpus. Each class is a distinct
// template — tone, band-limited noise burst, chirp or AM tone, cycling over
// the four families with class-specific frequencies — and each example mixes
// 1-3 classes at random onsets over a pink-noise bed at 5-20 dB SNR.
struct SynthParams {
    int num_classes = 8;
    int num_examples = 2000;
    double clip_seconds = 2.0;
    uint64_t seed = 0;
    std::string split = "train";
};

// Renders feature files under <out_dir>/<split>/ and writes
// <out_dir>/<split>.tsv; returns the manifest (base_dir set).
DatasetManifest synth_dataset(const SynthParams& params, const std::string& out_dir);

}  // namespace ofa
