#include "ofa/tensor.h"

#include <malloc.h>

#include <algorithm>
#include <sstream>

namespace ofa {

void configure_runtime() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimError("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

void Tensor::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
}

void Tensor::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0f);
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    int64_t n = shape_numel(shape);
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(n), 0.0f);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

TensorPtr Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr Tensor::from_data(std::vector<int> shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw DimError("data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(values);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

TensorPtr Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t->data) v = static_cast<float>(rng.normal() * stddev);
    return t;
}

thread_local GradTape* GradTape::active_ = nullptr;

GradTape::GradTape() : prev_(active_) {
    active_ = this;
}

GradTape::~GradTape() {
    active_ = prev_;
}

void GradTape::record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
}

void GradTape::backward(const TensorPtr& loss) {
    if (!loss->requires_grad) throw StateError("backward on a tensor that does not require grad");
    loss->ensure_grad();
    std::fill(loss->grad.begin(), loss->grad.end(), 1.0f);
    replay();
}

void GradTape::replay() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void GradTape::clear() {
    ops_.clear();
}

}  // namespace ofa
