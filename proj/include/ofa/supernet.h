#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ofa/nn.h"
#include "ofa/tensor.h"

namespace ofa {

struct BlockSpec {
    bool dynamic = false;
    int full_channels = 0;
    int layers = 2;
};

struct HeadSpec {
    int embed_dim = 512;
    int num_classes = 0;
};

// The elastic architecture space: conv blocks with 2x2 mean pooling between
// consecutive blocks, then global pooling, an embed layer and a sigmoid
// multi-label classifier. Dynamic blocks support elastic width over
// `width_ratios` and, where the depth mask allows, elastic depth {1,2}.
struct SupernetSpec {
    std::vector<BlockSpec> blocks;
    int input_channels = 1;
    int mel_bins = 64;
    HeadSpec head;
    std::vector<float> width_ratios = {0.4f, 0.6f, 0.8f, 1.0f};
    std::vector<bool> elastic_depth_mask;  // one entry per dynamic block; true allows depth 1

    int num_dynamic() const;
    void validate() const;

    // 64/128/256/512 CNN with a 512-wide embed layer; depth mask [2,2,X].
    static SupernetSpec default_full(int num_classes);

    nlohmann::json to_json() const;
    static SupernetSpec from_json(const nlohmann::json& j);
};

// "2,2,X" <-> {false,false,true}
std::vector<bool> parse_depth_mask(const std::string& text);
std::string depth_mask_str(const std::vector<bool>& mask);

struct BlockChoice {
    int depth = 2;
    std::vector<float> ratios;  // one per retained layer
};

// One concrete sub-network: a choice per dynamic block. Canonical text form
// "d2:0.8,0.6|d2:1.0,0.4|d1:0.6".
struct ArchConfig {
    std::vector<BlockChoice> choices;

    std::string str() const;
    static ArchConfig parse(const std::string& text);
    bool operator==(const ArchConfig& other) const { return str() == other.str(); }
};

// floor(ratio * full), the elastic-width channel rule.
int scaled_channels(float ratio, int full);

// Throws InvalidArchError when arch does not fit the spec.
void validate_arch(const SupernetSpec& spec, const ArchConfig& arch);

struct ConvLayerPlan {
    std::string conv;  // tensor name prefix, e.g. "b1.conv0"
    std::string bn;    // e.g. "b1.bn0"
    int in_used = 0;
    int out_used = 0;
};

// Resolved per-layer channel counts for one sub-network.
struct ForwardPlan {
    std::vector<std::vector<ConvLayerPlan>> blocks;
    int head_in = 0;
    int embed = 0;
    int classes = 0;
};

ForwardPlan plan_subnet(const SupernetSpec& spec, const ArchConfig& arch);

enum class ModelKind : uint32_t { kSupernet = 0, kTeacher = 1, kSingle = 2 };

// Named-tensor store plus the spec that shaped it. A supernet holds
// full-width tensors (arch empty); a standalone model holds tensors sized to
// its arch. Copies share tensor storage; use clone() for a deep copy.
struct Model {
    SupernetSpec spec;
    std::optional<ArchConfig> arch;
    ModelKind kind = ModelKind::kSupernet;

    const std::vector<std::string>& names() const { return order_; }
    const TensorPtr& at(const std::string& name) const;
    bool has(const std::string& name) const { return map_.count(name) != 0; }
    void add(const std::string& name, TensorPtr t);

    // Trainable tensors in name order: conv weights, bn gamma/beta, head
    // weights and biases. Running statistics are buffers, not parameters.
    std::vector<TensorPtr> trainable() const;
    std::vector<std::string> trainable_names() const;

    Model clone() const;

    static bool is_buffer(const std::string& name);
    static Model init_supernet(const SupernetSpec& spec, Rng& rng);
    static Model init_standalone(const SupernetSpec& spec, const ArchConfig& arch, Rng& rng,
                                 ModelKind kind = ModelKind::kSingle);

  private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, TensorPtr> map_;
};

// A forward-capable selection S(w, a): shares storage with the model and
// touches only leading-channel slices.
struct SubnetView {
    const Model* model = nullptr;
    ForwardPlan plan;
};

SubnetView make_view(const Model& model, const ArchConfig& arch);

using BnOverride = std::unordered_map<std::string, TensorPtr>;

// Runs the sub-network on input [B, input_channels, mel_bins, T]. When
// `bn_override` maps a running-stat tensor name, that tensor is used (and in
// train mode updated) instead of the model's own buffer.
TensorPtr subnet_forward(const SubnetView& view, const TensorPtr& input, BnMode mode,
                         const BnOverride* bn_override = nullptr);

// Clones every bn running-stat buffer, keyed by tensor name.
BnOverride clone_bn_stats(const Model& model);

// Copies the sliced weights out into a self-contained model.
Model extract_standalone(const Model& supernet, const ArchConfig& arch,
                         ModelKind kind = ModelKind::kSingle);

// Exact trainable-parameter count for the sub-network (running stats excluded).
int64_t count_params(const SupernetSpec& spec, const ArchConfig& arch);

ArchConfig sample_arch(Rng& rng, const SupernetSpec& spec);
ArchConfig largest_arch(const SupernetSpec& spec);
ArchConfig smallest_arch(const SupernetSpec& spec);
uint64_t space_size(const SupernetSpec& spec);

// FNV-1a over names and tensor payloads; changes iff any stored value changes.
uint64_t weight_hash(const Model& model);

}  // namespace ofa
