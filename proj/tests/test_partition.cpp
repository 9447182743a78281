#include <gtest/gtest.h>

#include <random>
#include <set>

#include "test_support.hpp"

using namespace fedconv;

namespace {

Dataset labels_only(std::size_t classes, std::size_t per_class) {
    Dataset d;
    d.channels = d.height = d.width = 1;
    d.num_classes = classes;
    for (std::size_t i = 0; i < classes * per_class; ++i) d.labels.push_back(static_cast<int>(i % classes));
    d.images.assign(d.labels.size(), 0);
    return d;
}

// Every index appears exactly once across clients.
void expect_disjoint_cover(const Partition& p, std::size_t n) {
    std::vector<int> seen(n, 0);
    for (const auto& c : p.clients)
        for (std::size_t i : c) ++seen.at(i);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(seen[i], 1) << "index " << i;
}

}  // namespace

TEST(Ks, TwoPointExample) {
    EXPECT_NEAR(ks_two({0.7, 0.3}, {0.3, 0.7}), 0.4, 1e-15);
    EXPECT_EQ(ks_two({1.0, 0.0}, {0.0, 1.0}), 1.0);
    EXPECT_EQ(ks_two({0.2, 0.8}, {0.2, 0.8}), 0.0);
    EXPECT_THROW(ks_two({1.0}, {0.5, 0.5}), std::invalid_argument);
}

TEST(Ks, SymmetricAndBoundedOnRandomDistributions) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        LabelDistribution p(6), q(6);
        double sp = 0, sq = 0;
        for (std::size_t k = 0; k < 6; ++k) sp += p[k] = u(rng), sq += q[k] = u(rng);
        for (std::size_t k = 0; k < 6; ++k) p[k] /= sp, q[k] /= sq;
        const double d = ks_two(p, q);
        EXPECT_EQ(d, ks_two(q, p));
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
        EXPECT_EQ(ks_two(p, p), 0.0);
    }
}

TEST(Ks, ThreeClientHandCase) {
    // labels 0,0,1,1,2,2 split {0,1} {2,3} {4,5}: pure clients of classes 0, 1, 2.
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};
    Partition p;
    p.clients = {{0, 1}, {2, 3}, {4, 5}};
    EXPECT_DOUBLE_EQ(mean_pairwise_ks(p, labels, 3), 1.0);
    // {0,2} {1,4} {3,5}: (0.5,0.5,0) (0.5,0,0.5) (0,0.5,0.5)
    p.clients = {{0, 2}, {1, 4}, {3, 5}};
    // cdfs: (0.5,1,1) (0.5,0.5,1) (0,0.5,1); pairwise 0.5, 0.5, 0.5
    EXPECT_DOUBLE_EQ(mean_pairwise_ks(p, labels, 3), 0.5);
    Partition single;
    single.clients = {{0, 1, 2}};
    EXPECT_EQ(mean_pairwise_ks(single, labels, 3), 0.0);
}

TEST(Iid, ZeroKsAndBalancedSizes) {
    const auto d = labels_only(10, 50);
    for (std::size_t k : {1u, 2u, 5u, 7u}) {
        const auto p = partition_iid(d, k, 11);
        expect_disjoint_cover(p, d.size());
        std::size_t lo = d.size(), hi = 0;
        for (const auto& c : p.clients) lo = std::min(lo, c.size()), hi = std::max(hi, c.size());
        EXPECT_LE(hi - lo, 1u);
        if (k == 5) {
            EXPECT_EQ(mean_pairwise_ks(p, d.labels, 10), 0.0);
        }
    }
}

TEST(LabelSkew, HitsTargetsWithinTolerance) {
    const auto d = labels_only(10, 100);
    for (double target : {0.3, 0.49, 0.57, 0.8}) {
        const auto r = partition_label_skew(d, 5, target, 0.05, 7);
        EXPECT_NEAR(r.mean_ks, target, 0.05) << target;
        EXPECT_DOUBLE_EQ(r.mean_ks, mean_pairwise_ks(r.partition, d.labels, 10));
        expect_disjoint_cover(r.partition, d.size());
    }
}

TEST(LabelSkew, ZeroTargetIsIid) {
    const auto d = labels_only(10, 20);
    const auto r = partition_label_skew(d, 5, 0.0, 0.05, 1);
    EXPECT_EQ(r.mean_ks, 0.0);
    EXPECT_TRUE(std::isinf(r.concentration));
}

TEST(LabelSkew, UnreachableTargetThrows) {
    // One class: every client has the same distribution.
    const auto d = labels_only(1, 100);
    EXPECT_THROW(partition_label_skew(d, 4, 0.5, 0.05, 1), std::invalid_argument);
    EXPECT_THROW(partition_label_skew(labels_only(4, 10), 2, 1.5, 0.05, 1), std::invalid_argument);
}

TEST(LabelSkew, DeterministicUnderSeed) {
    const auto d = labels_only(10, 40);
    const auto a = partition_label_skew(d, 5, 0.5, 0.05, 3);
    const auto b = partition_label_skew(d, 5, 0.5, 0.05, 3);
    const auto c = partition_label_skew(d, 5, 0.5, 0.05, 4);
    EXPECT_EQ(a.partition.clients, b.partition.clients);
    EXPECT_NE(a.partition.clients, c.partition.clients);
}

TEST(LargestRemainder, SumsExactly) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> w(1 + trial % 7);
        for (auto& v : w) v = u(rng);
        const std::size_t total = static_cast<std::size_t>(trial * 13 % 97);
        const auto counts = largest_remainder(total, w);
        EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), std::size_t{0}), total);
    }
}

TEST(SharedPool, CountsAndMembership) {
    Partition p;
    p.clients.resize(2);
    for (std::size_t i = 0; i < 100; ++i) p.clients[0].push_back(i), p.clients[1].push_back(100 + i);
    const auto s = build_shared_pool(p, 0.05, 9);
    EXPECT_EQ(s.pool.size(), 10u);
    EXPECT_EQ(s.augmented.clients[0].size(), 110u);
    EXPECT_EQ(s.augmented.clients[1].size(), 110u);
    std::size_t from0 = 0;
    for (std::size_t i : s.pool) from0 += i < 100;
    EXPECT_EQ(from0, 5u);
    EXPECT_EQ(std::set<std::size_t>(s.pool.begin(), s.pool.end()).size(), 10u);
    EXPECT_THROW(build_shared_pool(p, 1.0, 9), std::invalid_argument);
}

TEST(PartitionJson, RoundTripAndValidation) {
    const auto d = labels_only(4, 10);
    const auto r = partition_label_skew(d, 3, 0.5, 0.1, 2);
    const auto j = partition_to_json(r.partition, r.mean_ks);
    EXPECT_EQ(partition_from_json(nlohmann::json::parse(j.dump()), d.size()).clients, r.partition.clients);
    EXPECT_THROW(partition_from_json(j, 5), std::invalid_argument);
    auto dup = j;
    dup["clients"]["1"].push_back(dup["clients"]["0"][0]);
    EXPECT_THROW(partition_from_json(dup, d.size()), std::invalid_argument);
}

TEST(DeriveSeed, StreamsDiffer) {
    std::set<std::uint64_t> seen;
    for (std::uint64_t a = 0; a < 4; ++a)
        for (std::uint64_t b = 0; b < 4; ++b) seen.insert(derive_seed(1, a, b));
    EXPECT_EQ(seen.size(), 16u);
    EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
}
