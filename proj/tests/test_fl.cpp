#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_support.hpp"

using namespace fedconv;
using fedconv::testing::flatten_state;
using fedconv::testing::linear_probe_plan;
using fedconv::testing::tiny_config;

namespace {

template <typename T>
LocalResult<T> result_with(std::size_t id, std::size_t n, std::vector<std::pair<std::string, std::vector<T>>> entries) {
    LocalResult<T> r;
    r.client_id = id;
    r.num_samples = n;
    for (auto& [name, values] : entries) {
        const Shape s{values.size()};
        r.state.push_back({name, Tensor<T>(s, std::move(values)), name.find("running") == std::string::npos});
    }
    return r;
}

FLOptions small_options(FLMethod method, std::size_t rounds) {
    FLOptions o;
    o.method = method;
    o.rounds = rounds;
    o.train.batch_size = 16;
    o.train.seed = 7;
    o.train.optimizer.schedule = {2e-3, 1, 3};
    return o;
}

struct SmallData {
    Dataset train = synth_dataset(11, 4, 8, 32);
    Dataset test = synth_dataset(12, 4, 4, 32, Split::Test);
    Partition partition = partition_iid(train, 2, 1);
};

template <typename T>
StateDict<T> run_and_capture(const ArchConfig& arch, const FLOptions& o, const SmallData& d, ExperimentReport* rep = nullptr) {
    StateDict<T> last;
    auto r = run_federated<T>(arch, o, d.train, d.partition, d.test,
                              [&](const RoundRecord&, const Model<T>& m) { last = m.state(); });
    if (rep) *rep = std::move(r);
    return last;
}

}  // namespace

TEST(Prox, GradientTermByHand) {
    std::vector<ParamEntry<double>> p{{"w", Var<double>::leaf(Tensor<double>({2}, std::vector<double>{1.0, -1.0}), true)}};
    p[0].var.mutable_grad() = Tensor<double>({2}, std::vector<double>{0.5, 0.0});
    StateDict<double> anchor{{"w", Tensor<double>({2}, std::vector<double>{0.0, 1.0}), true}};
    add_proximal_grad(p, anchor, 0.1);
    EXPECT_NEAR(p[0].var.grad()[0], 0.6, 1e-15);
    EXPECT_NEAR(p[0].var.grad()[1], -0.2, 1e-15);
    // one plain SGD step of lr 1 lands on w - g
    SgdState<double> s;
    sgd_step(s, p, 1.0);
    EXPECT_NEAR(p[0].var.value()[0], 0.4, 1e-15);
}

TEST(Prox, ZeroMuMatchesFedAvgBitwise) {
    const SmallData d;
    const auto arch = tiny_config(4, 32);
    ExperimentReport a, b;
    const auto sa = run_and_capture<float>(arch, small_options(FedAvg{}, 2), d, &a);
    const auto sb = run_and_capture<float>(arch, small_options(FedProx{0.0}, 2), d, &b);
    EXPECT_EQ(flatten_state(sa), flatten_state(sb));
    EXPECT_EQ(report_to_json(a)["rounds"], report_to_json(b)["rounds"]);
}

TEST(FedAvg, WeightedMeanByHand) {
    std::vector<LocalResult<double>> locals{result_with<double>(0, 1, {{"w", {1.0}}}),
                                            result_with<double>(1, 1, {{"w", {3.0}}})};
    EXPECT_EQ(aggregate_fedavg(locals)[0].value[0], 2.0);
    locals = {result_with<double>(0, 1, {{"w", {0.0}}}), result_with<double>(1, 3, {{"w", {4.0}}})};
    EXPECT_EQ(aggregate_fedavg(locals)[0].value[0], 3.0);
}

TEST(FedAvg, IdenticalClientsAreFixedPoint) {
    std::mt19937_64 rng(4);
    const auto t = fedconv::testing::random_tensor<float>({17}, rng);
    std::vector<LocalResult<float>> locals;
    for (std::size_t k = 0; k < 3; ++k) {
        locals.push_back(result_with<float>(k, 5 + k * 7, {{"w", {t.data().begin(), t.data().end()}}}));
    }
    EXPECT_TRUE(bitwise_equal(aggregate_fedavg(locals)[0].value, t));
}

TEST(FedAvg, PermutationInvariantBitwise) {
    std::mt19937_64 rng(5);
    std::vector<LocalResult<double>> locals;
    for (std::size_t k = 0; k < 6; ++k) {
        const auto t = fedconv::testing::random_tensor({9}, rng);
        locals.push_back(result_with<double>(k, 1 + k * 3, {{"w", {t.data().begin(), t.data().end()}}}));
    }
    const auto ref = aggregate_fedavg(locals)[0].value;
    for (int trial = 0; trial < 10; ++trial) {
        std::shuffle(locals.begin(), locals.end(), rng);
        EXPECT_TRUE(bitwise_equal(aggregate_fedavg(locals)[0].value, ref));
    }
}

TEST(FedAvg, MismatchedRegistriesThrow) {
    std::vector<LocalResult<double>> locals{result_with<double>(0, 1, {{"w", {1.0}}}),
                                            result_with<double>(1, 1, {{"v", {3.0}}})};
    EXPECT_THROW(aggregate_fedavg(locals), ShapeError);
    EXPECT_THROW(aggregate_fedavg(std::vector<LocalResult<double>>{}), std::invalid_argument);
}

TEST(FedBN, KeepsBatchNormEntries) {
    const StateDict<double> global{{"conv.weight", Tensor<double>({1}, 9.0), true},
                                   {"s.bn1.gamma", Tensor<double>({1}, 9.0), true},
                                   {"s.bn1.running_mean", Tensor<double>({1}, 9.0), false}};
    std::vector<LocalResult<double>> locals{
        result_with<double>(0, 1, {{"conv.weight", {1.0}}, {"s.bn1.gamma", {1.0}}, {"s.bn1.running_mean", {1.0}}}),
        result_with<double>(1, 1, {{"conv.weight", {3.0}}, {"s.bn1.gamma", {3.0}}, {"s.bn1.running_mean", {3.0}}})};
    const auto out = aggregate_fedbn(locals, global);
    EXPECT_EQ(out[0].value[0], 2.0);
    EXPECT_EQ(out[1].value[0], 9.0);
    EXPECT_EQ(out[2].value[0], 9.0);
}

TEST(FedBN, EqualsFedAvgWithoutBatchNorm) {
    const SmallData d;
    const auto arch = tiny_config(4, 32);
    const auto a = run_and_capture<float>(arch, small_options(FedAvg{}, 1), d);
    const auto b = run_and_capture<float>(arch, small_options(FedBN{}, 1), d);
    EXPECT_EQ(flatten_state(a), flatten_state(b));
}

TEST(Yogi, ZeroDeltaLeavesWeights) {
    ServerState<double> server;
    server.global = {{"w", Tensor<double>({2}, std::vector<double>{0.5, -1.0}), true}};
    std::vector<LocalResult<double>> locals{result_with<double>(0, 3, {{"w", {0.5, -1.0}}})};
    FedYogi cfg;
    yogi_server_step(server, locals, cfg);
    EXPECT_EQ(server.global[0].value[0], 0.5);
    EXPECT_EQ(server.global[0].value[1], -1.0);
    EXPECT_EQ(server.v[0][0], cfg.tau * cfg.tau);
}

TEST(Yogi, FirstStepHandValue) {
    // delta 1, tau 0.05: m = 0.1, v = 0.0025 + 0.01, step = 0.1 / (sqrt(0.0125) + 0.05)
    ServerState<double> server;
    server.global = {{"w", Tensor<double>({1}, 0.0), true}};
    std::vector<LocalResult<double>> locals{result_with<double>(0, 1, {{"w", {1.0}}})};
    FedYogi cfg;
    cfg.tau = 0.05;
    yogi_server_step(server, locals, cfg);
    EXPECT_NEAR(server.m[0][0], 0.1, 1e-15);
    EXPECT_NEAR(server.v[0][0], 0.0125, 1e-15);
    EXPECT_NEAR(server.global[0].value[0], 0.1 / (std::sqrt(0.0125) + 0.05), 1e-15);
    EXPECT_NEAR(server.global[0].value[0], (std::sqrt(5.0) - 1.0) / 2.0, 1e-12);
}

TEST(Yogi, SecondMomentStaysPositive) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 3.0);
    ServerState<double> server;
    server.global = {{"w", Tensor<double>({4}, 0.0), true}, {"b.running_mean", Tensor<double>({1}, 0.0), false}};
    for (int round = 0; round < 200; ++round) {
        std::vector<LocalResult<double>> locals;
        for (std::size_t k = 0; k < 3; ++k) {
            std::vector<double> w(4);
            for (std::size_t j = 0; j < 4; ++j) w[j] = server.global[0].value[j] + n(rng);
            locals.push_back(result_with<double>(k, 1 + k, {{"w", w}, {"b.running_mean", {static_cast<double>(round)}}}));
        }
        yogi_server_step(server, locals, FedYogi{});
        for (double v : server.v[0].data()) ASSERT_GT(v, 0.0);
        EXPECT_EQ(server.global[1].value[0], static_cast<double>(round));
    }
    EXPECT_EQ(server.m.size(), 1u);
}

TEST(Linearity, OneStepFedAvgEqualsPooledFullBatchStep) {
    // One full-batch SGD step per client averages to one step on the pooled
    // gradient because the loss is a per-sample mean.
    const auto data = synth_dataset(3, 5, 12, 8);
    const auto partition = partition_label_skew(data, 4, 0.5, 0.1, 2).partition;
    const auto plan = linear_probe_plan(3, 5, 8);
    const double lr = 0.3;

    TrainOptions options;
    options.batch_size = 1000;
    options.agc.reset();
    options.optimizer.kind = OptimizerKind::SGD;
    const LrSchedule schedule{lr, 0, 1};

    Model<double> global(plan, 4);
    const auto w0 = global.state();
    std::vector<LocalResult<double>> locals;
    for (std::size_t k = 0; k < 4; ++k) {
        ClientState<double> c{k, partition.clients[k], Model<double>(plan, 0), make_optimizer<double>(options.optimizer), 0};
        locals.push_back(local_update(c, w0, 1, FLMethod{FedAvg{}}, options, schedule, data));
    }
    const auto averaged = aggregate_fedavg(locals);

    // Independent pooled gradient.
    std::vector<std::size_t> pooled;
    for (const auto& c : partition.clients) pooled.insert(pooled.end(), c.begin(), c.end());
    std::vector<int> labels;
    const auto x = make_batch<double>(data, pooled, labels);
    global.zero_grad();
    backward(softmax_cross_entropy(global.forward(x, NormMode::Train), labels));
    for (std::size_t i = 0; i < averaged.size(); ++i) {
        const auto& w = w0[i].value;
        const auto& g = global.params()[i].var.grad();
        for (std::size_t j = 0; j < w.numel(); ++j) {
            EXPECT_NEAR(averaged[i].value[j], w[j] - lr * g[j], 1e-12) << averaged[i].name << "[" << j << "]";
        }
    }
}

TEST(Rounds, ZeroRoundsRecordsOnlyInitialEvaluation) {
    const SmallData d;
    ExperimentReport rep;
    run_and_capture<float>(tiny_config(4, 32), small_options(FedAvg{}, 0), d, &rep);
    ASSERT_EQ(rep.rounds.size(), 1u);
    EXPECT_EQ(rep.rounds[0].round, 0u);
    EXPECT_GT(rep.rounds[0].loss, 0.0);
}

TEST(Rounds, OptimizerStepCountsPersistAcrossRounds) {
    const SmallData d;
    FederatedRun<float> run(tiny_config(4, 32), small_options(FedAvg{}, 3), d.train, d.partition, d.test);
    std::int64_t prev = 0;
    for (int r = 0; r < 2; ++r) {
        run.run_round();
        const std::int64_t steps = optimizer_steps(run.clients()[0].optimizer);
        EXPECT_EQ(steps, prev + steps_per_epoch(d.partition.clients[0].size(), 16));
        prev = steps;
    }
    EXPECT_EQ(run.server().round, 2u);
}

TEST(Rounds, ThreadCountDoesNotChangeResults) {
    const SmallData d;
    auto o = small_options(FedYogi{}, 2);
    ExperimentReport a, b;
    const auto sa = run_and_capture<float>(tiny_config(4, 32), o, d, &a);
    o.threads = 3;
    const auto sb = run_and_capture<float>(tiny_config(4, 32), o, d, &b);
    EXPECT_EQ(flatten_state(sa), flatten_state(sb));
    EXPECT_EQ(report_to_json(a).dump(), report_to_json(b).dump());
}

TEST(Rounds, CentralEqualsSingleClientFedAvg) {
    SmallData d;
    std::vector<std::size_t> all(d.train.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    d.partition.clients = {all};
    const auto o = small_options(FedAvg{}, 2);
    const auto fed = run_and_capture<float>(tiny_config(4, 32), o, d);
    StateDict<float> central;
    run_central<float>(tiny_config(4, 32), o, d.train, all, d.test,
                       [&](const RoundRecord&, const Model<float>& m) { central = m.state(); });
    EXPECT_EQ(flatten_state(fed), flatten_state(central));
}

TEST(Sampling, ClientsPerRound) {
    const auto ids = select_clients(10, 3, 5, 1);
    EXPECT_EQ(ids.size(), 3u);
    EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
    EXPECT_EQ(ids, select_clients(10, 3, 5, 1));
    EXPECT_EQ(select_clients(4, 0, 5, 1), (std::vector<std::size_t>{0, 1, 2, 3}));

    SmallData d;
    d.partition = partition_iid(d.train, 4, 1);
    auto o = small_options(FedAvg{}, 1);
    o.clients_per_round = 2;
    ExperimentReport rep;
    run_and_capture<float>(tiny_config(4, 32), o, d, &rep);
    const auto& cs = rep.rounds[1].client_samples;
    EXPECT_EQ(std::count(cs.begin(), cs.end(), std::size_t{0}), 2);
}

TEST(Parallel, RethrowsLowestFailingIndex) {
    for (std::size_t threads : {1u, 4u}) {
        std::vector<int> ran(8, 0);
        try {
            parallel_for(8, threads, [&](std::size_t i) {
                ran[i] = 1;
                if (i == 5 || i == 2) throw std::runtime_error("fail " + std::to_string(i));
            });
            FAIL() << "expected a throw";
        } catch (const std::runtime_error& e) {
            EXPECT_STREQ(e.what(), "fail 2");
        }
        EXPECT_EQ(std::count(ran.begin(), ran.end(), 1), 8);
    }
}

TEST(Methods, ValidationAndNames) {
    EXPECT_EQ(method_name(FedYogi{}), "fedyogi");
    EXPECT_FALSE(validate(FLMethod{FedProx{-1.0}}).empty());
    EXPECT_FALSE(validate(FLMethod{Share{1.0}}).empty());
    EXPECT_TRUE(validate(FLMethod{FedYogi{}}).empty());
}
