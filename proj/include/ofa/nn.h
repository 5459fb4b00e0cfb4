#pragma once

#include "ofa/tensor.h"

namespace ofa {

enum class BnMode { kTrain, kEval };

// 3x3 convolution, stride 1, zero padding 1, no bias. `out_channels` /
// `in_channels` select the leading slice of the weight tensor; -1 means the
// full extent. Gradients accumulate only into the sliced weight region.
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, int out_channels = -1, int in_channels = -1);

// 2x2 mean pooling, stride 2. Odd trailing row/column is edge-replicated.
TensorPtr avg_pool_2x2(const TensorPtr& x);

// Per-channel batch norm over [B,C,H,W]. Train mode normalizes by batch
// statistics and folds them into the running buffers with momentum; eval mode
// reads the running buffers. `channels` slices the parameter/buffer tensors.
TensorPtr batch_norm2d(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                       const TensorPtr& running_mean, const TensorPtr& running_var, BnMode mode,
                       int channels = -1, float momentum = 0.9f, float eps = 1e-5f);

TensorPtr relu(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);

// x[B,Din] * w[Dout,Din]^T + b. `out_features`/`in_features` slice w and b.
TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int out_features = -1,
                 int in_features = -1);

// [B,C,H,W] -> [B,C], mean over both spatial axes.
TensorPtr global_avg_pool(const TensorPtr& x);

// Soft binary cross entropy: mean over all entries of
// -[t*ln(p) + (1-t)*ln(1-p)], p clamped to [1e-7, 1-1e-7]. The target is a
// constant (no gradient flows to it).
TensorPtr bce_soft(const TensorPtr& predicted, const TensorPtr& target);

TensorPtr add(const TensorPtr& a, const TensorPtr& b);

struct AdamConfig {
    float learning_rate = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Adam with bias correction over a fixed parameter list. step() applies one
// update from the accumulated gradients and zeroes them.
class Adam {
  public:
    explicit Adam(std::vector<TensorPtr> params, AdamConfig cfg = {});

    void step();

    int64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    size_t num_params() const { return params_.size(); }
    std::vector<float>& moment1(size_t i) { return m_[i]; }
    std::vector<float>& moment2(size_t i) { return v_[i]; }
    void restore(int64_t step_count) { t_ = step_count; }

  private:
    std::vector<TensorPtr> params_;
    std::vector<std::vector<float>> m_, v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace ofa
