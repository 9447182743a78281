#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"

using namespace fedconv;
using fedconv::testing::linear_probe_plan;

namespace {

// Probe with zero weights and the given biases, so logits equal the biases.
Model<double> constant_probe(std::vector<double> bias) {
    Model<double> m(linear_probe_plan(3, bias.size(), 2), 0);
    for (auto& p : m.params()) {
        if (p.name == "head.fc.weight") p.var.mutable_value().fill(0.0);
        if (p.name == "head.fc.bias") p.var.mutable_value() = Tensor<double>({bias.size()}, bias);
    }
    return m;
}

}  // namespace

TEST(Evaluate, ConstantPredictorScoresOneOverK) {
    auto m = constant_probe({0.0, 0.0, 1.0, 0.0});
    const auto d = synth_dataset(0, 4, 5, 2);
    const auto r = evaluate(m, d, 7);
    EXPECT_EQ(r.samples, 20u);
    EXPECT_DOUBLE_EQ(r.accuracy, 25.0);
    const double lse = std::log(3.0 + std::exp(1.0));
    // 5 samples of class 2 with loss lse - 1, 15 with loss lse
    EXPECT_NEAR(r.loss, (5.0 * (lse - 1.0) + 15.0 * lse) / 20.0, 1e-12);
}

TEST(Evaluate, SubsetOfIndices) {
    auto m = constant_probe({2.0, 0.0});
    const auto d = synth_dataset(0, 2, 3, 2);  // labels 0,1,0,1,0,1
    const std::vector<std::size_t> idx{0, 1, 2};
    const auto r = evaluate(m, d, std::span<const std::size_t>(idx));
    EXPECT_EQ(r.samples, 3u);
    EXPECT_NEAR(r.accuracy, 200.0 / 3.0, 1e-12);
    const double lse = std::log(std::exp(2.0) + 1.0);
    EXPECT_NEAR(r.loss, (2.0 * (lse - 2.0) + lse) / 3.0, 1e-12);
    EXPECT_EQ(evaluate(m, d, std::span<const std::size_t>()).samples, 0u);
}

TEST(Convergence, RoundsToTargetAndTms) {
    std::vector<RoundRecord> recs(3);
    recs[0] = {0, 10.0, 0.0, {}, 0.0};
    recs[1] = {1, 80.0, 0.0, {}, 0.0};
    recs[2] = {2, 91.0, 0.0, {}, 0.0};
    EXPECT_EQ(rounds_to_target(recs, 90.0), 2u);
    EXPECT_EQ(rounds_to_target(recs, 80.0), 1u);
    EXPECT_FALSE(rounds_to_target(recs, 95.0).has_value());
    EXPECT_EQ(tms(1000, 2), 2000);

    ExperimentReport rep;
    rep.rounds = recs;
    rep.params = 1000;
    rep.target_accuracy = 90.0;
    finalize_report(rep);
    EXPECT_EQ(rep.rounds_to_target, 2u);
    EXPECT_EQ(rep.tms, 2000);
    EXPECT_EQ(rep.final_accuracy, 91.0);
    rep.target_accuracy = 99.0;
    finalize_report(rep);
    EXPECT_FALSE(rep.tms.has_value());
}

TEST(Csv, RoundTripsExactly) {
    std::vector<RoundRecord> recs;
    for (std::size_t r = 0; r < 5; ++r) {
        recs.push_back({r, 100.0 / 3.0 * static_cast<double>(r) / 7.0, std::exp(-0.3 * static_cast<double>(r)) + 1e-17,
                        {}, 0.123456789 * static_cast<double>(r)});
    }
    const auto back = rounds_from_csv(rounds_to_csv(recs));
    ASSERT_EQ(back.size(), recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        EXPECT_EQ(back[i].round, recs[i].round);
        EXPECT_EQ(back[i].accuracy, recs[i].accuracy);
        EXPECT_EQ(back[i].loss, recs[i].loss);
        EXPECT_EQ(back[i].seconds, recs[i].seconds);
    }
    EXPECT_THROW(rounds_from_csv("r,a\n"), std::runtime_error);
    EXPECT_THROW(rounds_from_csv("round,accuracy,loss,seconds\n1,x,2,3\n"), std::runtime_error);
}

TEST(Report, JsonFieldsAndFiles) {
    ExperimentReport rep;
    rep.config = {{"seed", 1}};
    rep.rounds = {{0, 50.0, 1.5, {10, 20}, 3.0}, {1, 75.0, 1.0, {10, 20}, 4.0}};
    rep.params = 12;
    rep.target_accuracy = 70.0;
    finalize_report(rep);
    const auto j = report_to_json(rep);
    EXPECT_EQ(j["rounds_to_target"], 1);
    EXPECT_EQ(j["tms"], 12);
    EXPECT_EQ(j["rounds"][1]["client_samples"], (std::vector<std::size_t>{10, 20}));
    EXPECT_FALSE(j["rounds"][0].contains("seconds"));

    const auto dir = std::filesystem::temp_directory_path() / "fedconv_test_report";
    std::filesystem::remove_all(dir);
    write_report(rep, dir);
    std::ifstream in(dir / "report.json");
    std::stringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(nlohmann::json::parse(ss.str()), j);
    std::ifstream csv(dir / "rounds.csv");
    std::stringstream cs;
    cs << csv.rdbuf();
    EXPECT_EQ(rounds_from_csv(cs.str()).size(), 2u);
}
