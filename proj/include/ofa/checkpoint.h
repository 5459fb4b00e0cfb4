#pragma once

#include <string>

#include "ofa/nn.h"
#include "ofa/supernet.h"

namespace ofa {

struct TrainState {
    int64_t iteration = 0;
    bool has_adam = false;
    AdamConfig adam_config;
    int64_t adam_step = 0;
    std::string rng_state;
};

struct LoadedCheckpoint {
    Model model;
    TrainState train;
    // Adam moments aligned with model.trainable(); empty when !train.has_adam.
    std::vector<std::vector<float>> m, v;
};

// Binary container: magic "OFAC", version, model kind, spec+arch as JSON,
// training state (iteration, optimizer scalars, rng string), then a
// named-tensor table followed by raw little-endian f32 payloads.
// Reload-then-save is byte-identical.
void save_checkpoint(const std::string& path, const Model& model, const TrainState& train,
                     Adam* adam = nullptr);
LoadedCheckpoint load_checkpoint(const std::string& path);

// Rebuilds the optimizer over model.trainable() with the stored moments.
Adam restore_adam(const LoadedCheckpoint& ckpt);

}  // namespace ofa
