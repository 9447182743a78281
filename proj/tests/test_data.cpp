#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"

using namespace fedconv;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("fedconv_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Record r: label r % 10, pixel j = (r + j) mod 256.
std::vector<std::uint8_t> fake_cifar_bytes(std::size_t records) {
    std::vector<std::uint8_t> bytes;
    for (std::size_t r = 0; r < records; ++r) {
        bytes.push_back(static_cast<std::uint8_t>(r % 10));
        for (std::size_t j = 0; j < 3072; ++j) bytes.push_back(static_cast<std::uint8_t>((r + j) % 256));
    }
    return bytes;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Synthetic, DeterministicUnderSeed) {
    const auto a = synth_dataset(5, 4, 10, 16);
    const auto b = synth_dataset(5, 4, 10, 16);
    const auto c = synth_dataset(6, 4, 10, 16);
    EXPECT_EQ(a.images, b.images);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(a.images, c.images);
    a.validate();
}

TEST(Synthetic, UniformLabelHistogram) {
    const auto d = synth_dataset(1, 7, 13, 8);
    std::vector<std::size_t> all(d.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (auto count : class_histogram(d, all)) EXPECT_EQ(count, 13u);
}

TEST(Synthetic, NearestCentroidBeatsChance) {
    const auto train = synth_dataset(2, 10, 40, 16);
    const auto test = synth_dataset(3, 10, 20, 16, Split::Test);
    const std::size_t dim = train.image_bytes();
    // Centroids of raw pixels; a grating's phase varies per sample, so the
    // colour offsets and gains carry most of the signal here.
    std::vector<std::vector<double>> centroid(10, std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto img = train.image(i);
        for (std::size_t j = 0; j < dim; ++j) centroid[train.labels[i]][j] += img[j] / 40.0;
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto img = test.image(i);
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t c = 0; c < 10; ++c) {
            double d = 0;
            for (std::size_t j = 0; j < dim; ++j) d += std::pow(img[j] - centroid[c][j], 2);
            if (d < best_d) best_d = d, best = c;
        }
        correct += best == static_cast<std::size_t>(test.labels[i]);
    }
    EXPECT_GT(static_cast<double>(correct) / static_cast<double>(test.size()), 0.2);
}

TEST(Batches, NormalizePixels) {
    Dataset d;
    d.channels = 1;
    d.height = d.width = 1;
    d.num_classes = 2;
    d.images = {0, 255, 128};
    d.labels = {0, 1, 1};
    std::vector<int> labels;
    const std::vector<std::size_t> idx{2, 0};
    const auto x = make_batch<double>(d, idx, labels);
    EXPECT_EQ(x.shape(), (Shape{2, 1, 1, 1}));
    EXPECT_EQ(x[0], (128.0 - 127.5) / 64.0);
    EXPECT_EQ(x[1], -127.5 / 64.0);
    EXPECT_EQ(labels, (std::vector<int>{1, 0}));
}

TEST(Cifar, LoadsValidBatchBitExact) {
    const auto dir = temp_dir("cifar_ok");
    write_bytes(dir / "b.bin", fake_cifar_bytes(10000));
    const auto d = load_cifar10_binary(dir / "b.bin");
    EXPECT_EQ(d.size(), 10000u);
    EXPECT_EQ(d.labels[0], 0);
    EXPECT_EQ(d.labels[13], 3);
    // record 13: R plane first, then G, then B
    EXPECT_EQ(d.image(13)[0], 13);
    EXPECT_EQ(d.image(13)[1024], static_cast<std::uint8_t>((13 + 1024) % 256));
    EXPECT_EQ(d.image(13)[3071], static_cast<std::uint8_t>((13 + 3071) % 256));
}

TEST(Cifar, RejectsTruncatedFile) {
    const auto dir = temp_dir("cifar_short");
    auto bytes = fake_cifar_bytes(10000);
    bytes.pop_back();
    write_bytes(dir / "b.bin", bytes);
    EXPECT_THROW(load_cifar10_binary(dir / "b.bin"), DataError);
    EXPECT_THROW(load_cifar10_binary(dir / "missing.bin"), DataError);
}

TEST(Cifar, RejectsBadLabelByte) {
    const auto dir = temp_dir("cifar_label");
    auto bytes = fake_cifar_bytes(10000);
    bytes[3073 * 5] = 10;
    write_bytes(dir / "b.bin", bytes);
    EXPECT_THROW(load_cifar10_binary(dir / "b.bin"), DataError);
}

TEST(Cifar, DirectoryLayout) {
    const auto dir = temp_dir("cifar_dir");
    const auto bytes = fake_cifar_bytes(10000);
    for (int i = 1; i <= 5; ++i) write_bytes(dir / ("data_batch_" + std::to_string(i) + ".bin"), bytes);
    write_bytes(dir / "test_batch.bin", bytes);
    EXPECT_EQ(load_cifar10_dir(dir, Split::Train).size(), 50000u);
    const auto test = load_cifar10_dir(dir, Split::Test);
    EXPECT_EQ(test.size(), 10000u);
    EXPECT_EQ(test.split, Split::Test);
}

TEST(Dataset, ValidateCatchesInconsistency) {
    Dataset d;
    d.channels = 1;
    d.height = d.width = 2;
    d.num_classes = 3;
    d.images.assign(8, 0);
    d.labels = {0, 3};
    EXPECT_THROW(d.validate(), DataError);
    d.labels = {0};
    EXPECT_THROW(d.validate(), DataError);
}
