#pragma once

// Image datasets: a seeded synthetic generator and the CIFAR-10 binary format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedconv/tensor.hpp"

namespace fedconv {

enum class Split { Train, Test };

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Unsigned 8-bit images stored channel-major (C,H,W) back to back.
struct Dataset {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t num_classes = 10;
    Split split = Split::Train;
    std::vector<std::uint8_t> images;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t image_bytes() const noexcept { return channels * height * width; }
    std::span<const std::uint8_t> image(std::size_t i) const {
        return {images.data() + i * image_bytes(), image_bytes()};
    }

    void validate() const {
        if (images.size() != labels.size() * image_bytes()) {
            throw DataError("dataset has " + std::to_string(labels.size()) + " labels but " +
                            std::to_string(images.size()) + " image bytes");
        }
        for (int y : labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
                throw DataError("label " + std::to_string(y) + " outside [0," + std::to_string(num_classes) + ")");
            }
        }
    }
};

/// Per-class label counts over a subset of indices.
inline std::vector<std::size_t> class_histogram(const Dataset& d, std::span<const std::size_t> indices) {
    std::vector<std::size_t> h(d.num_classes, 0);
    for (std::size_t i : indices) ++h[static_cast<std::size_t>(d.labels[i])];
    return h;
}

inline constexpr double kPixelMean = 127.5;
inline constexpr double kPixelScale = 64.0;

/// Gathers images into a normalized [B,C,H,W] tensor plus labels.
template <typename T>
Tensor<T> make_batch(const Dataset& d, std::span<const std::size_t> indices, std::vector<int>& labels) {
    Tensor<T> x({indices.size(), d.channels, d.height, d.width});
    labels.resize(indices.size());
    const std::size_t bytes = d.image_bytes();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto img = d.image(indices[b]);
        T* dst = x.data().data() + b * bytes;
        for (std::size_t j = 0; j < bytes; ++j) {
            dst[j] = static_cast<T>((static_cast<double>(img[j]) - kPixelMean) / kPixelScale);
        }
        labels[b] = d.labels[indices[b]];
    }
    return x;
}

// --- synthetic -------------------------------------------------------------

/// Class-conditional images: each class owns an oriented sinusoidal grating
/// (orientation and spatial frequency), a colour gain pattern and a small
/// colour offset. Phase, amplitude and orientation jitter plus Gaussian
/// pixel noise vary per sample. Labels cycle 0..K-1, so histograms are uniform.
inline Dataset synth_dataset(std::uint64_t seed, std::size_t num_classes, std::size_t per_class,
                             std::size_t resolution, Split split = Split::Train) {
    if (num_classes < 1 || resolution < 1) throw DataError("synthetic dataset needs classes and resolution >= 1");
    Dataset d;
    d.channels = 3;
    d.height = d.width = resolution;
    d.num_classes = num_classes;
    d.split = split;
    const std::size_t n = num_classes * per_class;
    d.labels.resize(n);
    d.images.resize(n * d.image_bytes());

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    constexpr double kTwoPi = 2.0 * std::numbers::pi;
    constexpr double kNoise = 24.0;
    const double res = static_cast<double>(resolution);

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % num_classes;
        d.labels[i] = static_cast<int>(c);
        const double frac = static_cast<double>(c) / static_cast<double>(num_classes);
        const double theta = std::numbers::pi * static_cast<double>(c % 5) / 5.0 + 0.08 * (unit(rng) - 0.5);
        const double cycles = (c / 5) % 2 == 0 ? 3.0 : 6.0;
        const double phase = kTwoPi * unit(rng);
        const double amp = 48.0 * (0.8 + 0.4 * unit(rng));
        const double ct = std::cos(theta), st = std::sin(theta);
        std::uint8_t* img = d.images.data() + i * d.image_bytes();
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const double angle = kTwoPi * frac + kTwoPi * static_cast<double>(ch) / 3.0;
            const double gain = 0.6 + 0.4 * std::cos(angle);
            const double offset = 10.0 * std::sin(angle);
            for (std::size_t y = 0; y < resolution; ++y) {
                for (std::size_t x = 0; x < resolution; ++x) {
                    const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) / res;
                    double v = 128.0 + offset + amp * gain * std::sin(kTwoPi * cycles * u + phase) + kNoise * noise(rng);
                    v = std::clamp(std::round(v), 0.0, 255.0);
                    img[(ch * resolution + y) * resolution + x] = static_cast<std::uint8_t>(v);
                }
            }
        }
    }
    return d;
}

// --- CIFAR-10 binary -------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

/// One CIFAR-10 binary batch: 10,000 records of a label byte followed by
/// 3072 pixel bytes (R plane, G plane, B plane, each 32x32 row-major).
inline Dataset load_cifar10_binary(const std::filesystem::path& path, Split split = Split::Train) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t expected = kCifarRecordBytes * kCifarRecordsPerFile;
    if (bytes.size() != expected) {
        throw DataError(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                        std::to_string(bytes.size()));
    }
    Dataset d;
    d.channels = 3;
    d.height = d.width = 32;
    d.num_classes = 10;
    d.split = split;
    d.labels.resize(kCifarRecordsPerFile);
    d.images.resize(kCifarRecordsPerFile * d.image_bytes());
    for (std::size_t r = 0; r < kCifarRecordsPerFile; ++r) {
        const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
        if (rec[0] >= 10) {
            throw DataError(path.string() + ": record " + std::to_string(r) + " has label byte " +
                            std::to_string(rec[0]));
        }
        d.labels[r] = rec[0];
        std::copy(rec + 1, rec + kCifarRecordBytes, d.images.begin() + static_cast<std::ptrdiff_t>(r * d.image_bytes()));
    }
    return d;
}

inline void append_dataset(Dataset& dst, const Dataset& src) {
    if (dst.labels.empty()) {
        dst = src;
        return;
    }
    if (dst.image_bytes() != src.image_bytes() || dst.num_classes != src.num_classes) {
        throw DataError("cannot concatenate datasets with different geometry");
    }
    dst.images.insert(dst.images.end(), src.images.begin(), src.images.end());
    dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

/// data_batch_1..5.bin for the train split, test_batch.bin for the test split.
inline Dataset load_cifar10_dir(const std::filesystem::path& dir, Split split) {
    Dataset out;
    if (split == Split::Train) {
        for (int i = 1; i <= 5; ++i) {
            append_dataset(out, load_cifar10_binary(dir / ("data_batch_" + std::to_string(i) + ".bin"), split));
        }
    } else {
        out = load_cifar10_binary(dir / "test_batch.bin", split);
    }
    out.split = split;
    return out;
}

}  // namespace fedconv
