#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"

using namespace fedconv;
using nlohmann::json;

namespace {

std::vector<std::string> errors_of(const json& j) {
    try {
        parse_config(j);
    } catch (const ConfigErrors& e) {
        return e.errors();
    }
    return {};
}

bool has_prefix(const std::vector<std::string>& errors, const std::string& prefix) {
    return std::any_of(errors.begin(), errors.end(), [&](const std::string& e) { return e.rfind(prefix, 0) == 0; });
}

}  // namespace

TEST(Config, EmptyObjectGivesDefaults) {
    const auto c = parse_config(json::object());
    EXPECT_EQ(c.rounds, 100u);
    EXPECT_EQ(c.batch_size, 64u);
    EXPECT_TRUE(std::holds_alternative<FedAvg>(c.method));
    EXPECT_TRUE(c.agc.has_value());
    EXPECT_EQ(c.dtype, "f32");
    EXPECT_EQ(c.threads, 1u);
}

TEST(Config, ReadsNestedSections) {
    const json j = {{"arch", {{"block", "normal"}, {"kernel_size", 5}, {"depths", {1, 1, 1, 1}}}},
                    {"fl", {{"method", {{"kind", "fedyogi"}, {"tau", 0.05}}}, {"rounds", 7}}},
                    {"optimizer", {{"kind", "sgd"}, {"momentum", 0.9}, {"agc", nullptr}}},
                    {"data", {{"num_clients", 3}, {"partition", {{"kind", "label_skew"}, {"target_ks", 0.8}}}}},
                    {"seed", 42},
                    {"target_accuracy", 90}};
    const auto c = parse_config(j);
    EXPECT_EQ(c.arch.block, BlockKind::Normal);
    EXPECT_EQ(c.arch.kernel_size, 5u);
    ASSERT_TRUE(std::holds_alternative<FedYogi>(c.method));
    EXPECT_EQ(std::get<FedYogi>(c.method).tau, 0.05);
    EXPECT_EQ(c.rounds, 7u);
    EXPECT_EQ(c.optimizer.kind, OptimizerKind::SGD);
    EXPECT_FALSE(c.agc.has_value());
    EXPECT_EQ(c.data.partition.kind, PartitionKind::LabelSkew);
    EXPECT_EQ(c.data.partition.target_ks, 0.8);
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.target_accuracy, 90.0);
}

TEST(Config, UnknownKeysAreErrorsWithPaths) {
    const auto errors = errors_of({{"fl", {{"roundz", 3}}}, {"bogus", 1}});
    EXPECT_TRUE(has_prefix(errors, "fl.roundz: unknown key"));
    EXPECT_TRUE(has_prefix(errors, "bogus: unknown key"));
}

TEST(Config, TypeAndEnumErrorsNameTheField) {
    const auto errors = errors_of({{"arch", {{"activation", "tanh"}, {"channels", {1, 2}}}},
                                   {"optimizer", {{"base_lr", "fast"}}},
                                   {"fl", {{"method", {{"kind", "fedsgd"}}}}},
                                   {"seed", -1}});
    EXPECT_TRUE(has_prefix(errors, "arch.activation:"));
    EXPECT_TRUE(has_prefix(errors, "arch.channels:"));
    EXPECT_TRUE(has_prefix(errors, "optimizer.base_lr:"));
    EXPECT_TRUE(has_prefix(errors, "fl.method.kind:"));
    EXPECT_TRUE(has_prefix(errors, "seed:"));
    EXPECT_EQ(errors.size(), 5u);
}

TEST(Config, SemanticValidation) {
    EXPECT_TRUE(has_prefix(errors_of({{"arch", {{"kernel_size", 4}}}}), "arch.kernel_size:"));
    EXPECT_TRUE(has_prefix(errors_of({{"fl", {{"method", {{"kind", "fedprox"}, {"mu", -1}}}}}}), "fl.method.mu:"));
    EXPECT_TRUE(has_prefix(errors_of({{"threads", 0}}), "threads:"));
    EXPECT_TRUE(has_prefix(errors_of({{"target_accuracy", 101}}), "target_accuracy:"));
    EXPECT_TRUE(
        has_prefix(errors_of({{"fl", {{"clients_per_round", 9}}}, {"data", {{"num_clients", 3}}}}), "fl.clients_per_round:"));
}

TEST(Config, JsonRoundTrip) {
    const json j = {{"arch", {{"block", "invert"}, {"activation", "gelu"}, {"norm_kind", "ln_c"}, {"norm_placement", "all"}}},
                    {"fl", {{"method", {{"kind", "share"}, {"fraction", 0.1}}}, {"early_stop", true}}},
                    {"optimizer", {{"agc", {{"clipping", 0.02}, {"eps", 1e-3}}}}},
                    {"threads", 2},
                    {"output_dir", "somewhere"}};
    const auto c = parse_config(j);
    const json full = config_to_json(c);
    EXPECT_EQ(config_to_json(parse_config(full)), full);
    const json snapshot = config_to_json(c, false);
    EXPECT_FALSE(snapshot.contains("threads"));
    EXPECT_FALSE(snapshot.contains("output_dir"));
    EXPECT_EQ(config_to_json(parse_config(snapshot), false), snapshot);
}

TEST(Config, LoadFromFile) {
    const auto dir = std::filesystem::temp_directory_path() / "fedconv_test_config";
    std::filesystem::create_directories(dir);
    {
        std::ofstream(dir / "ok.json") << R"({"seed": 3})";
        std::ofstream(dir / "bad.json") << "{ not json";
    }
    EXPECT_EQ(load_config(dir / "ok.json").seed, 3u);
    EXPECT_THROW(load_config(dir / "bad.json"), ConfigErrors);
    EXPECT_THROW(load_config(dir / "missing.json"), ConfigErrors);
}

TEST(Config, ShippedExampleConfigsParse) {
    const std::filesystem::path dir = std::filesystem::path(FEDCONV_SOURCE_DIR) / "configs";
    std::size_t n = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() != ".json") continue;
        EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
        ++n;
    }
    EXPECT_GT(n, 0u);
}
