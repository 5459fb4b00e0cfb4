#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ofa/features.h"

using namespace ofa;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& stem) {
    static int counter = 0;
    return fs::temp_directory_path() / (stem + "_" + std::to_string(getpid()) + "_" + std::to_string(counter++));
}

WaveClip sine_clip(double hz, double seconds, double amp = 0.5) {
    WaveClip clip;
    clip.samples.resize(static_cast<size_t>(seconds * kSampleRate));
    for (size_t i = 0; i < clip.samples.size(); ++i)
        clip.samples[i] = static_cast<float>(amp * std::sin(2.0 * M_PI * hz * i / kSampleRate));
    return clip;
}

// Independent HTK mel-center computation for the filter-center oracle.
int nearest_filter_center(double hz) {
    const auto hz_to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
    const auto mel_to_hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    const double mel_max = hz_to_mel(16000.0);
    int best = 0;
    double best_d = 1e18;
    for (int k = 0; k < 64; ++k) {
        const double center = mel_to_hz(mel_max * (k + 1) / 65.0);
        if (std::abs(center - hz) < best_d) {
            best_d = std::abs(center - hz);
            best = k;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("10 s clip yields exactly 64x1000, 2 s yields 64x200") {
    WaveClip ten;
    ten.samples.assign(10 * kSampleRate, 0.0f);
    auto f = log_mel(ten);
    CHECK(f.mel == 64);
    CHECK(f.frames == 1000);

    WaveClip two;
    two.samples.assign(2 * kSampleRate, 0.0f);
    auto g = log_mel(two);
    CHECK(g.mel == 64);
    CHECK(g.frames == 200);
}

TEST_CASE("frame count follows 1 + floor((padded - window)/hop)") {
    for (int64_t len : {320LL, 321LL, 5000LL, 64000LL, 320000LL, 12345LL}) {
        const int64_t padded = len + 2 * (kStftWindow - kStftHop) / 2;
        const int expect = padded >= kStftWindow
                               ? static_cast<int>(1 + (padded - kStftWindow) / kStftHop)
                               : 0;
        CHECK(log_mel_frames(len) == expect);
    }
}

TEST_CASE("silence maps to the log floor everywhere") {
    WaveClip clip;
    clip.samples.assign(kSampleRate / 2, 0.0f);
    auto f = log_mel(clip);
    for (float v : f.values) CHECK(v == doctest::Approx(std::log(1e-10)).epsilon(1e-6));
}

TEST_CASE("a pure tone peaks at the filter whose center is nearest") {
    for (double hz : {1000.0, 440.0, 3000.0}) {
        auto f = log_mel(sine_clip(hz, 1.0));
        // average across frames, then argmax over mel bins
        std::vector<double> band(64, 0.0);
        for (int m = 0; m < 64; ++m)
            for (int t = 0; t < f.frames; ++t) band[static_cast<size_t>(m)] += f.at(m, t);
        const int got = static_cast<int>(std::max_element(band.begin(), band.end()) - band.begin());
        CHECK(got == nearest_filter_center(hz));
    }
}

TEST_CASE("log_mel input validation") {
    WaveClip empty;
    CHECK_THROWS_AS(log_mel(empty), InputError);

    WaveClip wrong_rate = sine_clip(500.0, 0.1);
    wrong_rate.sample_rate = 16000;
    CHECK_THROWS_AS(log_mel(wrong_rate), InputError);
}

TEST_CASE("feature files round-trip bit-exactly and reject corruption") {
    auto f = log_mel(sine_clip(700.0, 0.2));
    const auto path = temp_file("feat").string() + ".ofaf";
    write_feature_file(path, f);
    auto back = read_feature_file(path);
    CHECK(back.mel == f.mel);
    CHECK(back.frames == f.frames);
    CHECK(back.values == f.values);

    // wrong magic
    {
        std::FILE* fp = std::fopen(path.c_str(), "r+b");
        std::fputs("NOPE", fp);
        std::fclose(fp);
    }
    CHECK_THROWS_AS(read_feature_file(path), FormatError);
    fs::remove(path);
}

TEST_CASE("wav io round trip at 32 kHz PCM16 mono") {
    auto clip = sine_clip(333.0, 0.05, 0.8);
    const auto path = temp_file("clip").string() + ".wav";
    write_wav(path, clip);
    auto back = read_wav(path);
    REQUIRE(back.samples.size() == clip.samples.size());
    CHECK(back.sample_rate == kSampleRate);
    for (size_t i = 0; i < clip.samples.size(); ++i)
        CHECK(std::abs(back.samples[i] - clip.samples[i]) <= 0.5f / 32768.0f + 1e-7f);
    fs::remove(path);
}
