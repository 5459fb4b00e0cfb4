#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ofa/common.h"

namespace ofa {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major float tensor. Values are written once by the op that
// produces them; gradients accumulate into `grad` during tape replay.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty, or same length as data
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad();
    void zero_grad();

    static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<int> shape, float value, bool requires_grad = false);
    static TensorPtr from_data(std::vector<int> shape, std::vector<float> values, bool requires_grad = false);
    static TensorPtr randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad = false);
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Flat record of backward rules in forward order. Ops append while a tape is
// active; backward() seeds the loss gradient and replays in reverse. Closures
// hold shared_ptrs to their operands, so clear() releases intermediates.
class GradTape {
  public:
    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape* active() { return active_; }
    static bool recording() { return active_ != nullptr; }

    void record(std::function<void()> backward_fn);
    void backward(const TensorPtr& loss);
    // Replays recorded ops in reverse without seeding; callers set output
    // gradients themselves first.
    void replay();
    void clear();
    size_t size() const { return ops_.size(); }

  private:
    std::vector<std::function<void()>> ops_;
    GradTape* prev_ = nullptr;
    static thread_local GradTape* active_;
};

}  // namespace ofa
