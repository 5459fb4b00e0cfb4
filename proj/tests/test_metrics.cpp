#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ofa/metrics.h"
#include "oracles.h"

using namespace ofa;

namespace {

ScoreMatrix random_matrix(int n, int c, Rng& rng, double positive_rate) {
    ScoreMatrix m;
    m.num_examples = n;
    m.num_classes = c;
    m.scores.resize(static_cast<size_t>(n) * c);
    m.labels.resize(static_cast<size_t>(n) * c);
    for (size_t i = 0; i < m.scores.size(); ++i) {
        m.scores[i] = static_cast<float>(rng.uniform());
        m.labels[i] = rng.uniform() < positive_rate ? 1 : 0;
    }
    return m;
}

}  // namespace

TEST_CASE("hand-computed ranking case") {
    auto ap = average_precision({0.9f, 0.8f, 0.1f}, {1, 0, 1});
    REQUIRE(ap.has_value());
    CHECK(*ap == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("perfect ranking and degenerate list") {
    auto perfect = average_precision({0.9f, 0.8f, 0.7f, 0.2f, 0.1f}, {1, 1, 1, 0, 0});
    CHECK(*perfect == doctest::Approx(1.0));
    CHECK(*average_precision({0.5f}, {1}) == doctest::Approx(1.0));
}

TEST_CASE("zero positives yields the absent marker, never 0") {
    CHECK_FALSE(average_precision({0.4f, 0.2f}, {0, 0}).has_value());
}

TEST_CASE("mAP is the mean over classes with positives") {
    // class 0: perfect (AP 1.0); class 1: positive ranked second (AP 0.5); class 2: no positives
    ScoreMatrix m;
    m.num_examples = 2;
    m.num_classes = 3;
    m.scores = {0.9f, 0.8f, 0.3f, 0.1f, 0.2f, 0.4f};
    m.labels = {1, 0, 0, 0, 1, 0};
    CHECK(mean_average_precision(m) == doctest::Approx(0.75));

    ScoreMatrix empty = m;
    empty.labels = {0, 0, 0, 0, 0, 0};
    CHECK_THROWS_AS(mean_average_precision(empty), InputError);
}

TEST_CASE("permuting example order leaves mAP unchanged") {
    Rng rng(41);
    auto m = random_matrix(40, 5, rng, 0.3);
    for (int c = 0; c < 5; ++c) m.labels[static_cast<size_t>(c)] = 1;  // ensure positives
    const double base = mean_average_precision(m);

    // reverse the example order
    ScoreMatrix rev = m;
    for (int i = 0; i < m.num_examples; ++i)
        for (int c = 0; c < m.num_classes; ++c) {
            rev.scores[static_cast<size_t>(i) * 5 + c] =
                m.scores[static_cast<size_t>(m.num_examples - 1 - i) * 5 + c];
            rev.labels[static_cast<size_t>(i) * 5 + c] =
                m.labels[static_cast<size_t>(m.num_examples - 1 - i) * 5 + c];
        }
    CHECK(mean_average_precision(rev) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("agreement with the brute-force rank-counting oracle") {
    Rng rng(43);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = rng.uniform_int(1, 12);
        std::vector<float> scores(static_cast<size_t>(n));
        std::vector<uint8_t> labels(static_cast<size_t>(n));
        std::vector<int> labels_int(static_cast<size_t>(n));
        bool any = false;
        for (int i = 0; i < n; ++i) {
            // coarse grid forces plenty of score ties
            scores[static_cast<size_t>(i)] = static_cast<float>(rng.uniform_int(0, 4)) / 4.0f;
            labels[static_cast<size_t>(i)] = rng.uniform() < 0.4 ? 1 : 0;
            labels_int[static_cast<size_t>(i)] = labels[static_cast<size_t>(i)];
            any = any || labels[static_cast<size_t>(i)];
        }
        const auto got = average_precision(scores, labels);
        const double want = oracle::ap_naive(scores, labels_int);
        if (!any) {
            CHECK_FALSE(got.has_value());
        } else {
            REQUIRE(got.has_value());
            CHECK(std::abs(*got - want) < 1e-9);
        }
    }
}

TEST_CASE("random scores score near class prevalence") {
    Rng rng(47);
    const int n = 10000;
    const double q = 0.3;
    auto m = random_matrix(n, 4, rng, q);
    const double map = mean_average_precision(m);
    CHECK(map > q - 0.05);
    CHECK(map < q + 0.05);
}

TEST_CASE("raising a positive's score never decreases its class AP") {
    Rng rng(53);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = rng.uniform_int(3, 10);
        std::vector<float> scores(static_cast<size_t>(n));
        std::vector<uint8_t> labels(static_cast<size_t>(n));
        int pos = -1;
        for (int i = 0; i < n; ++i) {
            scores[static_cast<size_t>(i)] = static_cast<float>(rng.uniform());
            labels[static_cast<size_t>(i)] = rng.uniform() < 0.4 ? 1 : 0;
            if (labels[static_cast<size_t>(i)]) pos = i;
        }
        if (pos < 0) continue;
        const double before = *average_precision(scores, labels);
        scores[static_cast<size_t>(pos)] += static_cast<float>(rng.uniform(0.0, 1.0));
        const double after = *average_precision(scores, labels);
        CHECK(after >= before - 1e-12);
    }
}
