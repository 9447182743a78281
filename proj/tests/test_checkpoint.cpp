#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"

using namespace fedconv;
using fedconv::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

fs::path temp_prefix(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "fedconv_test_ckpt";
    fs::create_directories(dir);
    fs::remove(dir / (name + ".manifest"));
    fs::remove(dir / (name + ".bin"));
    return dir / name;
}

ArchConfig bn_config() {
    ArchConfig c = tiny_config(4, 32);
    c.norm_kind = NormKind::BatchNorm;
    c.norm_placement = NormPlacement::Norm1;
    return c;
}

template <typename T>
void train_steps(Model<T>& m, OptimizerState<T>& opt, int steps) {
    const auto d = synth_dataset(1, 4, 2, 32);
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<int> labels;
    const Tensor<T> x = make_batch<T>(d, idx, labels);
    for (int s = 0; s < steps; ++s) {
        m.zero_grad();
        backward(softmax_cross_entropy(m.forward(x, NormMode::Train), labels));
        optimizer_step(opt, m.params(), 1e-3);
    }
}

template <typename T>
void expect_same_state(const Model<T>& a, const Model<T>& b) {
    const auto sa = a.state(), sb = b.state();
    ASSERT_EQ(sa.size(), sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
        EXPECT_EQ(sa[i].name, sb[i].name);
        EXPECT_TRUE(bitwise_equal(sa[i].value, sb[i].value)) << sa[i].name;
    }
}

template <typename T>
void round_trip_case(OptimizerKind kind, const std::string& name) {
    OptimizerConfig cfg;
    cfg.kind = kind;
    cfg.sgd.momentum = 0.9;
    Model<T> m(bn_config(), 3);
    auto opt = make_optimizer<T>(cfg);
    train_steps(m, opt, 2);
    const auto prefix = temp_prefix(name);
    save_checkpoint(prefix, m, &opt);

    Model<T> restored(bn_config(), 99);
    OptimizerState<T> ropt;
    ASSERT_TRUE(load_checkpoint(prefix, restored, &ropt));
    expect_same_state(m, restored);
    EXPECT_EQ(optimizer_steps(ropt), 2);

    // Continuing from the checkpoint matches continuing in memory.
    train_steps(m, opt, 1);
    train_steps(restored, ropt, 1);
    expect_same_state(m, restored);
}

}  // namespace

TEST(Checkpoint, RoundTripF32AdamW) { round_trip_case<float>(OptimizerKind::AdamW, "f32_adamw"); }
TEST(Checkpoint, RoundTripF64AdamW) { round_trip_case<double>(OptimizerKind::AdamW, "f64_adamw"); }
TEST(Checkpoint, RoundTripF32Sgd) { round_trip_case<float>(OptimizerKind::SGD, "f32_sgd"); }

TEST(Checkpoint, RunningStatsAreSaved) {
    Model<float> m(bn_config(), 3);
    auto opt = make_optimizer<float>(OptimizerConfig{});
    train_steps(m, opt, 1);
    ASSERT_FALSE(m.buffers().empty());
    const auto prefix = temp_prefix("stats");
    save_checkpoint(prefix, m);
    Model<float> other(bn_config(), 3);
    EXPECT_FALSE(load_checkpoint(prefix, other));
    for (std::size_t i = 0; i < m.buffers().size(); ++i) {
        EXPECT_TRUE(bitwise_equal(m.buffers()[i].value, other.buffers()[i].value)) << m.buffers()[i].name;
    }
}

TEST(Checkpoint, LittleEndianBytes) {
    const auto prefix = temp_prefix("bytes");
    save_tensors(prefix, {{"a", Tensor<float>({1}, 1.0f)}, {"b", Tensor<double>({1}, -2.0)}});
    std::ifstream in(fs::path(prefix.string() + ".bin"), std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    // 1.0f = 0x3F800000, -2.0 = 0xC000000000000000
    const std::vector<unsigned char> want{0x00, 0x00, 0x80, 0x3F, 0, 0, 0, 0, 0, 0, 0, 0xC0};
    EXPECT_EQ(bytes, want);
    const auto back = load_tensors(prefix);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(std::get<Tensor<double>>(back[1].tensor)[0], -2.0);
}

TEST(Checkpoint, RejectsCorruptFiles) {
    const auto prefix = temp_prefix("corrupt");
    save_tensors(prefix, {{"a", Tensor<float>({2, 2}, 1.0f)}});
    const fs::path bin = prefix.string() + ".bin";
    const fs::path manifest = prefix.string() + ".manifest";
    fs::resize_file(bin, 15);
    EXPECT_THROW(load_tensors(prefix), CheckpointError);
    fs::resize_file(bin, 17);
    EXPECT_THROW(load_tensors(prefix), CheckpointError);
    fs::resize_file(bin, 16);
    EXPECT_NO_THROW(load_tensors(prefix));

    {
        std::ofstream m(manifest);
        m << "fedconv-checkpoint 1\na\tf16\t0\t2,2\n";
    }
    EXPECT_THROW(load_tensors(prefix), CheckpointError);
    {
        std::ofstream m(manifest);
        m << "something else\n";
    }
    EXPECT_THROW(load_tensors(prefix), CheckpointError);
    EXPECT_THROW(load_tensors(temp_prefix("missing")), CheckpointError);
}

TEST(Checkpoint, WrongArchitectureRejected) {
    Model<float> m(tiny_config(4, 32), 0);
    const auto prefix = temp_prefix("arch");
    save_checkpoint(prefix, m);
    Model<float> other(tiny_config(5, 32), 0);
    EXPECT_ANY_THROW(load_checkpoint(prefix, other));
    Model<double> wrong_dtype(tiny_config(4, 32), 0);
    EXPECT_THROW(load_checkpoint(prefix, wrong_dtype), CheckpointError);
}
