#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ofa/nn.h"
#include "ofa/tensor.h"
#include "oracles.h"

using namespace ofa;

namespace {

TensorPtr random_tensor(std::vector<int> shape, Rng& rng, float lo = -1.0f, float hi = 1.0f,
                        bool rg = false) {
    auto t = Tensor::zeros(std::move(shape), rg);
    for (auto& v : t->data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

bool all_finite(const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace

TEST_CASE("conv2d center tap scales a 1x1 input") {
    auto x = Tensor::from_data({1, 1, 1, 1}, {2.0f});
    std::vector<float> w(9, 0.0f);
    w[4] = 3.0f;
    auto weight = Tensor::from_data({1, 1, 3, 3}, w);
    auto y = conv2d(x, weight);
    CHECK(y->data[0] == doctest::Approx(6.0f));
}

TEST_CASE("conv2d matches the sliding-window oracle") {
    Rng rng(7);
    auto x = random_tensor({1, 1, 4, 4}, rng);
    auto w = random_tensor({1, 1, 3, 3}, rng);
    auto y = conv2d(x, w);
    auto ref = oracle::conv2d_naive(x->data, 1, 1, 4, 4, w->data, 1, 1);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y->data[i] - ref[i]) < 1e-6f);
}

TEST_CASE("conv2d matches the oracle on larger shapes and channel slices") {
    Rng rng(11);
    for (int trial = 0; trial < 8; ++trial) {
        const int b = rng.uniform_int(1, 3), cinf = rng.uniform_int(2, 5), coutf = rng.uniform_int(2, 6);
        const int h = rng.uniform_int(1, 7), w = rng.uniform_int(1, 9);
        const int cin = rng.uniform_int(1, cinf), cout = rng.uniform_int(1, coutf);
        auto x = random_tensor({b, cin, h, w}, rng);
        auto weight = random_tensor({coutf, cinf, 3, 3}, rng);
        auto y = conv2d(x, weight, cout, cin);
        REQUIRE(y->shape == std::vector<int>{b, cout, h, w});
        auto ref = oracle::conv2d_naive(x->data, b, cin, h, w, weight->data, cout, cinf);
        for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y->data[i] - ref[i]) < 1e-5f);
    }
}

TEST_CASE("conv2d with all-zero weight annihilates any input") {
    Rng rng(3);
    auto x = random_tensor({2, 3, 5, 5}, rng, -10.0f, 10.0f);
    auto w = Tensor::zeros({4, 3, 3, 3});
    auto y = conv2d(x, w);
    for (float v : y->data) CHECK(v == 0.0f);
}

TEST_CASE("conv2d rejects channel mismatch") {
    auto x = Tensor::zeros({1, 2, 4, 4});
    auto w = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w), DimError);
}

TEST_CASE("conv2d is linear in its input") {
    Rng rng(23);
    auto x1 = random_tensor({1, 2, 6, 6}, rng);
    auto x2 = random_tensor({1, 2, 6, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    const float a = 1.7f, b = -0.4f;
    auto mix = Tensor::zeros({1, 2, 6, 6});
    for (size_t i = 0; i < mix->data.size(); ++i) mix->data[i] = a * x1->data[i] + b * x2->data[i];
    auto lhs = conv2d(mix, w);
    auto y1 = conv2d(x1, w);
    auto y2 = conv2d(x2, w);
    for (size_t i = 0; i < lhs->data.size(); ++i)
        CHECK(std::abs(lhs->data[i] - (a * y1->data[i] + b * y2->data[i])) < 1e-5f);
}

TEST_CASE("avg_pool_2x2 basics") {
    auto x = Tensor::from_data({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    CHECK(avg_pool_2x2(x)->data[0] == doctest::Approx(2.5f));

    auto c = Tensor::full({2, 3, 4, 6}, 0.75f);
    auto yc = avg_pool_2x2(c);
    for (float v : yc->data) CHECK(v == doctest::Approx(0.75f));
}

TEST_CASE("avg_pool_2x2 matches the window-mean oracle including odd dims") {
    Rng rng(5);
    for (auto [h, w] : {std::pair{4, 4}, std::pair{5, 4}, std::pair{4, 7}, std::pair{3, 3}, std::pair{1, 1}}) {
        auto x = random_tensor({1, 2, h, w}, rng);
        auto y = avg_pool_2x2(x);
        auto ref = oracle::avg_pool_naive(x->data, 1, 2, h, w);
        REQUIRE(y->data.size() == ref.size());
        for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y->data[i] - ref[i]) < 1e-7f);
    }
}

TEST_CASE("batch_norm2d train mode normalizes per channel") {
    Rng rng(13);
    auto x = random_tensor({4, 3, 5, 5}, rng, -3.0f, 5.0f);
    auto gamma = Tensor::full({3}, 1.0f);
    auto beta = Tensor::zeros({3});
    auto rmean = Tensor::zeros({3});
    auto rvar = Tensor::full({3}, 1.0f);
    auto y = batch_norm2d(x, gamma, beta, rmean, rvar, BnMode::kTrain);
    const int64_t count = 4 * 5 * 5;
    for (int c = 0; c < 3; ++c) {
        double s = 0.0, sq = 0.0;
        for (int b = 0; b < 4; ++b)
            for (int i = 0; i < 25; ++i) {
                const float v = y->data[((static_cast<size_t>(b) * 3 + c) * 25) + i];
                s += v;
                sq += static_cast<double>(v) * v;
            }
        const double mean = s / count;
        const double var = sq / count - mean * mean;
        CHECK(std::abs(mean) < 1e-4);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
    // running stats moved off their init toward the batch stats
    CHECK(rmean->data[0] != 0.0f);
}

TEST_CASE("batch_norm2d eval mode with identity statistics is the identity") {
    Rng rng(17);
    auto x = random_tensor({2, 2, 3, 3}, rng);
    auto gamma = Tensor::full({2}, 1.0f);
    auto beta = Tensor::zeros({2});
    auto rmean = Tensor::zeros({2});
    auto rvar = Tensor::full({2}, 1.0f);
    auto y = batch_norm2d(x, gamma, beta, rmean, rvar, BnMode::kEval);
    for (size_t i = 0; i < x->data.size(); ++i)
        CHECK(std::abs(y->data[i] - x->data[i] / std::sqrt(1.0f + 1e-5f)) < 1e-6f);
}

TEST_CASE("batch_norm2d tolerates zero variance") {
    auto x = Tensor::full({2, 1, 2, 2}, 3.0f);
    auto gamma = Tensor::full({1}, 1.0f);
    auto beta = Tensor::zeros({1});
    auto rmean = Tensor::zeros({1});
    auto rvar = Tensor::full({1}, 1.0f);
    auto y = batch_norm2d(x, gamma, beta, rmean, rvar, BnMode::kTrain);
    CHECK(all_finite(y->data));
}

TEST_CASE("elementwise and head primitives") {
    auto z = Tensor::from_data({1, 1}, {0.0f});
    CHECK(sigmoid(z)->data[0] == doctest::Approx(0.5f));

    auto neg = Tensor::from_data({2, 2}, {-1.0f, 2.0f, 0.0f, -3.0f});
    auto r = relu(neg);
    CHECK(r->data == std::vector<float>{0.0f, 2.0f, 0.0f, 0.0f});

    auto cmap = Tensor::full({2, 3, 4, 5}, 1.25f);
    auto g = global_avg_pool(cmap);
    REQUIRE(g->shape == std::vector<int>{2, 3});
    for (float v : g->data) CHECK(v == doctest::Approx(1.25f));

    // identity weight, zero bias
    auto x = Tensor::from_data({2, 3}, {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f});
    auto w = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) w->data[static_cast<size_t>(i) * 3 + i] = 1.0f;
    auto b = Tensor::zeros({3});
    auto y = linear(x, w, b);
    for (size_t i = 0; i < x->data.size(); ++i) CHECK(y->data[i] == doctest::Approx(x->data[i]));
}

TEST_CASE("bce_soft analytic values and oracle agreement") {
    auto half = Tensor::full({2, 3}, 0.5f);
    CHECK(bce_soft(half, half)->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    auto ones = Tensor::full({1, 1}, 1.0f);
    auto p = Tensor::full({1, 1}, 0.5f);
    CHECK(bce_soft(p, ones)->data[0] == doctest::Approx(-std::log(0.5)).epsilon(1e-6));

    Rng rng(29);
    auto pred = random_tensor({2, 3}, rng, 0.05f, 0.95f);
    auto target = random_tensor({2, 3}, rng, 0.0f, 1.0f);
    const double ref = oracle::bce_naive(pred->data, target->data);
    CHECK(bce_soft(pred, target)->data[0] == doctest::Approx(ref).epsilon(1e-6));

    auto bad = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(bce_soft(pred, bad), DimError);
}

TEST_CASE("adam zero gradient leaves parameters untouched") {
    auto p = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
    Adam opt({p});
    opt.step();
    CHECK(p->data == std::vector<float>{1.0f, -2.0f, 0.5f});
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam first step from fresh state moves by the learning rate") {
    auto p = Tensor::from_data({1}, {0.4f}, true);
    p->grad[0] = 1.0f;
    AdamConfig cfg;
    Adam opt({p}, cfg);
    opt.step();
    // bias-corrected moments give a step of lr/(1+eps); slack is fp32 ulps at 0.4
    CHECK(std::abs((0.4f - p->data[0]) - cfg.learning_rate) < 5e-8f);
    CHECK(p->grad[0] == 0.0f);  // gradients zeroed after the update
}

TEST_CASE("adam descends on f(w) = w^2") {
    auto p = Tensor::from_data({1}, {1.0f}, true);
    AdamConfig cfg;
    cfg.learning_rate = 0.1f;
    Adam opt({p}, cfg);
    for (int i = 0; i < 100; ++i) {
        p->grad[0] = 2.0f * p->data[0];
        opt.step();
    }
    CHECK(std::abs(p->data[0]) < 1.0f);
}

TEST_CASE("adam rejects parameters without gradient buffers") {
    auto p = std::make_shared<Tensor>();
    p->shape = {2};
    p->data = {1.0f, 2.0f};
    p->requires_grad = true;  // grad buffer deliberately absent
    Adam opt({p});
    CHECK_THROWS_AS(opt.step(), StateError);
}

TEST_CASE("forward passes are bit-deterministic for a fixed seed") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        auto x = random_tensor({2, 3, 8, 10}, rng, -2.0f, 2.0f);
        auto w = random_tensor({4, 3, 3, 3}, rng);
        auto gamma = Tensor::full({4}, 1.0f);
        auto beta = Tensor::zeros({4});
        auto rm = Tensor::zeros({4});
        auto rv = Tensor::full({4}, 1.0f);
        auto y = batch_norm2d(conv2d(x, w), gamma, beta, rm, rv, BnMode::kTrain);
        return global_avg_pool(relu(y))->data;
    };
    CHECK(run(42) == run(42));
    CHECK(run(42) != run(43));
}

TEST_CASE("no NaN or Inf in forward/backward over random trials") {
    Rng rng(1234);
    for (int trial = 0; trial < 1000; ++trial) {
        const int b = rng.uniform_int(1, 2), c = rng.uniform_int(1, 3);
        const int h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5);
        auto x = random_tensor({b, c, h, w}, rng, -10.0f, 10.0f, true);
        auto wt = random_tensor({2, c, 3, 3}, rng, -10.0f, 10.0f, true);
        auto gamma = Tensor::full({2}, 1.0f, true);
        auto beta = Tensor::zeros({2}, true);
        auto rm = Tensor::zeros({2});
        auto rv = Tensor::full({2}, 1.0f);
        GradTape tape;
        auto hcur = relu(batch_norm2d(conv2d(x, wt), gamma, beta, rm, rv, BnMode::kTrain));
        auto pooled = global_avg_pool(avg_pool_2x2(hcur));
        auto probs = sigmoid(pooled);
        auto target = Tensor::full({b, 2}, 0.5f);
        auto loss = bce_soft(probs, target);
        tape.backward(loss);
        CHECK(all_finite(loss->data));
        CHECK(all_finite(x->grad));
        CHECK(all_finite(wt->grad));
        x->zero_grad();
        wt->zero_grad();
        gamma->zero_grad();
        beta->zero_grad();
    }
}

TEST_CASE("tape accumulates gradients through shared tensors") {
    auto x = Tensor::from_data({1, 2}, {0.3f, -0.6f}, true);
    GradTape tape;
    auto y = add(x, x);
    auto loss = bce_soft(sigmoid(y), Tensor::full({1, 2}, 1.0f));
    tape.backward(loss);
    REQUIRE(x->has_grad());
    // d/dx of bce(sigmoid(2x), 1) = 2 * (sigmoid(2x) - 1) / n
    for (int i = 0; i < 2; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-2.0 * x->data[i]));
        CHECK(x->grad[i] == doctest::Approx(2.0 * (s - 1.0) / 2.0).epsilon(1e-4));
    }
}
