#include "ofa/features.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace ofa {

namespace {

constexpr int kFftBins = kStftWindow / 2 + 1;
constexpr int kPad = (kStftWindow - kStftHop) / 2;  // 352

// Iterative radix-2 complex FFT, in place over interleaved (re, im).
void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    const size_t n = re.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (size_t k = 0; k < len / 2; ++k) {
                const double ur = re[i + k], ui = im[i + k];
                const double vr = re[i + k + len / 2] * cr - im[i + k + len / 2] * ci;
                const double vi = re[i + k + len / 2] * ci + im[i + k + len / 2] * cr;
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular HTK filters over the power-spectrum bins.
std::vector<double> mel_filterbank() {
    const double fmax = kSampleRate / 2.0;
    std::vector<double> edges_hz(kMelBins + 2);
    const double mel_max = hz_to_mel(fmax);
    for (int i = 0; i < kMelBins + 2; ++i)
        edges_hz[static_cast<size_t>(i)] = mel_to_hz(mel_max * i / (kMelBins + 1));

    const double hz_per_bin = static_cast<double>(kSampleRate) / kStftWindow;
    std::vector<double> weights(static_cast<size_t>(kMelBins) * kFftBins, 0.0);
    for (int m = 0; m < kMelBins; ++m) {
        const double lo = edges_hz[static_cast<size_t>(m)];
        const double center = edges_hz[static_cast<size_t>(m) + 1];
        const double hi = edges_hz[static_cast<size_t>(m) + 2];
        for (int k = 0; k < kFftBins; ++k) {
            const double hz = k * hz_per_bin;
            double w = 0.0;
            if (hz >= lo && hz <= center && center > lo)
                w = (hz - lo) / (center - lo);
            else if (hz > center && hz <= hi && hi > center)
                w = (hi - hz) / (hi - center);
            weights[static_cast<size_t>(m) * kFftBins + k] = std::max(0.0, w);
        }
    }
    return weights;
}

template <typename T>
void write_raw(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

int log_mel_frames(int64_t num_samples) {
    const int64_t padded = num_samples + 2 * kPad;
    if (padded < kStftWindow) return 0;
    return static_cast<int>(1 + (padded - kStftWindow) / kStftHop);
}

FeatureMatrix log_mel(const WaveClip& clip) {
    if (clip.samples.empty()) throw InputError("log_mel on an empty clip");
    if (clip.sample_rate != kSampleRate)
        throw InputError("log_mel expects " + std::to_string(kSampleRate) + " Hz, got " +
                         std::to_string(clip.sample_rate));
    const int frames = log_mel_frames(static_cast<int64_t>(clip.samples.size()));
    if (frames < 1) throw InputError("clip too short for one analysis frame");

    static const std::vector<double> filters = mel_filterbank();
    static const std::vector<double> hann = [] {
        std::vector<double> w(kStftWindow);
        for (int i = 0; i < kStftWindow; ++i)
            w[static_cast<size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / kStftWindow));
        return w;
    }();

    std::vector<float> padded(clip.samples.size() + 2 * kPad, 0.0f);
    std::copy(clip.samples.begin(), clip.samples.end(), padded.begin() + kPad);

    FeatureMatrix out;
    out.mel = kMelBins;
    out.frames = frames;
    out.values.assign(static_cast<size_t>(kMelBins) * frames, 0.0f);

#pragma omp parallel
    {
        std::vector<double> re(kStftWindow), im(kStftWindow), power(kFftBins);
#pragma omp for schedule(static)
        for (int t = 0; t < frames; ++t) {
            const size_t start = static_cast<size_t>(t) * kStftHop;
            for (int i = 0; i < kStftWindow; ++i) {
                re[static_cast<size_t>(i)] = padded[start + static_cast<size_t>(i)] * hann[static_cast<size_t>(i)];
                im[static_cast<size_t>(i)] = 0.0;
            }
            fft_radix2(re, im);
            for (int k = 0; k < kFftBins; ++k)
                power[static_cast<size_t>(k)] = re[static_cast<size_t>(k)] * re[static_cast<size_t>(k)] +
                                                im[static_cast<size_t>(k)] * im[static_cast<size_t>(k)];
            for (int m = 0; m < kMelBins; ++m) {
                double e = 0.0;
                const double* w = filters.data() + static_cast<size_t>(m) * kFftBins;
                for (int k = 0; k < kFftBins; ++k) e += w[k] * power[static_cast<size_t>(k)];
                out.values[static_cast<size_t>(m) * frames + t] =
                    std::log(std::max(static_cast<double>(kLogFloor), e));
            }
        }
    }
    return out;
}

void write_feature_file(const std::string& path, const FeatureMatrix& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open feature file for writing: " + path);
    os.write("OFAF", 4);
    write_raw<uint32_t>(os, 1u);
    write_raw<uint32_t>(os, static_cast<uint32_t>(f.mel));
    write_raw<uint32_t>(os, static_cast<uint32_t>(f.frames));
    os.write(reinterpret_cast<const char*>(f.values.data()),
             static_cast<std::streamsize>(f.values.size() * sizeof(float)));
    if (!os) throw InputError("short write on feature file: " + path);
}

FeatureMatrix read_feature_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open feature file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "OFAF", 4) != 0) throw FormatError("bad feature-file magic in " + path);
    const auto version = read_raw<uint32_t>(is);
    if (version != 1) throw FormatError("unsupported feature-file version in " + path);
    FeatureMatrix f;
    f.mel = static_cast<int>(read_raw<uint32_t>(is));
    f.frames = static_cast<int>(read_raw<uint32_t>(is));
    if (!is || f.mel <= 0 || f.frames <= 0) throw FormatError("bad feature-file header in " + path);
    f.values.resize(static_cast<size_t>(f.mel) * f.frames);
    is.read(reinterpret_cast<char*>(f.values.data()),
            static_cast<std::streamsize>(f.values.size() * sizeof(float)));
    if (!is) throw CorruptionError("truncated feature payload in " + path);
    return f;
}

WaveClip read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open wav file: " + path);
    char tag[4];
    is.read(tag, 4);
    if (!is || std::memcmp(tag, "RIFF", 4) != 0) throw FormatError("not a RIFF file: " + path);
    read_raw<uint32_t>(is);  // riff size
    is.read(tag, 4);
    if (!is || std::memcmp(tag, "WAVE", 4) != 0) throw FormatError("not a WAVE file: " + path);

    uint16_t channels = 0, bits = 0;
    uint32_t rate = 0;
    std::vector<int16_t> pcm;
    while (is.read(tag, 4)) {
        const auto chunk_size = read_raw<uint32_t>(is);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            const auto fmt = read_raw<uint16_t>(is);
            channels = read_raw<uint16_t>(is);
            rate = read_raw<uint32_t>(is);
            read_raw<uint32_t>(is);  // byte rate
            read_raw<uint16_t>(is);  // block align
            bits = read_raw<uint16_t>(is);
            if (chunk_size > 16) is.seekg(chunk_size - 16, std::ios::cur);
            if (fmt != 1) throw FormatError("only PCM wav supported: " + path);
        } else if (std::memcmp(tag, "data", 4) == 0) {
            pcm.resize(chunk_size / 2);
            is.read(reinterpret_cast<char*>(pcm.data()), chunk_size);
            if (!is) throw CorruptionError("truncated wav data in " + path);
            break;
        } else {
            is.seekg(chunk_size + (chunk_size & 1u), std::ios::cur);
        }
    }
    if (bits != 16 || channels != 1)
        throw FormatError("wav must be 16-bit mono PCM: " + path);
    if (rate != kSampleRate)
        throw InputError("wav must be " + std::to_string(kSampleRate) + " Hz, got " + std::to_string(rate));
    WaveClip clip;
    clip.sample_rate = static_cast<int>(rate);
    clip.samples.resize(pcm.size());
    for (size_t i = 0; i < pcm.size(); ++i) clip.samples[i] = static_cast<float>(pcm[i]) / 32768.0f;
    return clip;
}

void write_wav(const std::string& path, const WaveClip& clip) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot open wav file for writing: " + path);
    const uint32_t data_bytes = static_cast<uint32_t>(clip.samples.size() * 2);
    os.write("RIFF", 4);
    write_raw<uint32_t>(os, 36 + data_bytes);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    write_raw<uint32_t>(os, 16);
    write_raw<uint16_t>(os, 1);  // PCM
    write_raw<uint16_t>(os, 1);  // mono
    write_raw<uint32_t>(os, static_cast<uint32_t>(clip.sample_rate));
    write_raw<uint32_t>(os, static_cast<uint32_t>(clip.sample_rate) * 2);
    write_raw<uint16_t>(os, 2);
    write_raw<uint16_t>(os, 16);
    os.write("data", 4);
    write_raw<uint32_t>(os, data_bytes);
    for (float v : clip.samples) {
        const long q = std::lrint(std::min(1.0f, std::max(-1.0f, v)) * 32768.0f);
        write_raw<int16_t>(os, static_cast<int16_t>(std::min(32767L, std::max(-32768L, q))));
    }
}

}  // namespace ofa
