#pragma once

// Client partitions of a training set and their label heterogeneity.

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedconv/data.hpp"
#include "json.hpp"

namespace fedconv {

/// client_id -> ordered list of dataset indices.
struct Partition {
    std::vector<std::vector<std::size_t>> clients;

    std::size_t num_clients() const noexcept { return clients.size(); }
    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& c : clients) n += c.size();
        return n;
    }
};

using LabelDistribution = std::vector<double>;

/// Seed for an independent stream keyed by (seed, a, b, c).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                      static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline LabelDistribution label_distribution(std::span<const int> labels, std::span<const std::size_t> indices,
                                            std::size_t num_classes) {
    LabelDistribution p(num_classes, 0.0);
    if (indices.empty()) return p;
    for (std::size_t i : indices) p[static_cast<std::size_t>(labels[i])] += 1.0;
    for (auto& v : p) v /= static_cast<double>(indices.size());
    return p;
}

/// Kolmogorov-Smirnov distance between two label distributions, with
/// classes ordered by index.
inline double ks_two(const LabelDistribution& p, const LabelDistribution& q) {
    if (p.size() != q.size()) throw std::invalid_argument("ks_two: distributions differ in length");
    double cp = 0.0, cq = 0.0, best = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        cp += p[k];
        cq += q[k];
        best = std::max(best, std::abs(cp - cq));
    }
    return std::min(best, 1.0);
}

/// Mean KS over all unordered client pairs (0 with fewer than two clients).
inline double mean_pairwise_ks(const Partition& partition, std::span<const int> labels, std::size_t num_classes) {
    std::vector<LabelDistribution> dists;
    for (const auto& c : partition.clients) dists.push_back(label_distribution(labels, c, num_classes));
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < dists.size(); ++i)
        for (std::size_t j = i + 1; j < dists.size(); ++j) {
            total += ks_two(dists[i], dists[j]);
            ++pairs;
        }
    return pairs ? total / static_cast<double>(pairs) : 0.0;
}

namespace detail {
inline std::vector<std::vector<std::size_t>> shuffled_class_members(const Dataset& d, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_class(d.num_classes);
    for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        std::mt19937_64 rng(derive_seed(seed, 0x9a27, c));
        std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    }
    return by_class;
}

inline void sort_clients(Partition& p) {
    for (auto& c : p.clients) std::sort(c.begin(), c.end());
}

inline void require_clients(std::size_t num_clients) {
    if (num_clients < 1) throw std::invalid_argument("partition needs at least one client");
}
}  // namespace detail

/// Per-class round-robin dealing after a seeded shuffle. The dealer position
/// carries across classes, so client sizes differ by at most one.
inline Partition partition_iid(const Dataset& d, std::size_t num_clients, std::uint64_t seed) {
    detail::require_clients(num_clients);
    Partition p;
    p.clients.resize(num_clients);
    std::size_t next = 0;
    for (const auto& members : detail::shuffled_class_members(d, seed)) {
        for (std::size_t i : members) {
            p.clients[next].push_back(i);
            next = (next + 1) % num_clients;
        }
    }
    detail::sort_clients(p);
    return p;
}

/// Largest-remainder rounding of `total` items over non-negative weights.
inline std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> counts(weights.size(), 0);
    if (weights.empty() || wsum <= 0.0) return counts;
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        const double exact = static_cast<double>(total) * weights[k] / wsum;
        counts[k] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[k];
        rema.emplace_back(exact - std::floor(exact), k);
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++counts[rema[r % rema.size()].second];
    return counts;
}

/// Home distribution of client k: the classes whose share of [0,1) overlaps
/// the client's share, weighted by overlap. Averaged over clients this is uniform.
inline LabelDistribution home_distribution(std::size_t client, std::size_t num_clients, std::size_t num_classes) {
    LabelDistribution q(num_classes, 0.0);
    const double lo = static_cast<double>(client) / static_cast<double>(num_clients);
    const double hi = static_cast<double>(client + 1) / static_cast<double>(num_clients);
    for (std::size_t c = 0; c < num_classes; ++c) {
        const double clo = static_cast<double>(c) / static_cast<double>(num_classes);
        const double chi = static_cast<double>(c + 1) / static_cast<double>(num_classes);
        q[c] = std::max(0.0, std::min(hi, chi) - std::max(lo, clo)) * static_cast<double>(num_clients);
    }
    return q;
}

/// Partition whose client label mix is (1 - skew) * uniform + skew * home.
/// skew = 1 / (1 + concentration).
inline Partition partition_with_skew(const Dataset& d, std::size_t num_clients, double skew, std::uint64_t seed) {
    detail::require_clients(num_clients);
    Partition p;
    p.clients.resize(num_clients);
    std::vector<LabelDistribution> home;
    for (std::size_t k = 0; k < num_clients; ++k) home.push_back(home_distribution(k, num_clients, d.num_classes));
    const double uniform = 1.0 / static_cast<double>(d.num_classes);
    const auto members = detail::shuffled_class_members(d, seed);
    std::vector<double> weights(num_clients);
    for (std::size_t c = 0; c < d.num_classes; ++c) {
        for (std::size_t k = 0; k < num_clients; ++k) weights[k] = (1.0 - skew) * uniform + skew * home[k][c];
        const auto counts = largest_remainder(members[c].size(), weights);
        std::size_t pos = 0;
        for (std::size_t k = 0; k < num_clients; ++k) {
            for (std::size_t j = 0; j < counts[k]; ++j) p.clients[k].push_back(members[c][pos++]);
        }
    }
    detail::sort_clients(p);
    return p;
}

struct SkewPartition {
    Partition partition;
    double concentration = 0.0;  // +inf for the IID branch
    double mean_ks = 0.0;
};

/// Bisects the skew of partition_with_skew until the realised mean pairwise
/// KS lies within `tolerance` of `target_ks`.
inline SkewPartition partition_label_skew(const Dataset& d, std::size_t num_clients, double target_ks,
                                          double tolerance, std::uint64_t seed, int max_iterations = 60) {
    detail::require_clients(num_clients);
    if (target_ks < 0.0 || target_ks > 1.0) throw std::invalid_argument("target KS must lie in [0,1]");
    if (target_ks == 0.0) {
        Partition p = partition_iid(d, num_clients, seed);
        const double ks = mean_pairwise_ks(p, d.labels, d.num_classes);
        return {std::move(p), std::numeric_limits<double>::infinity(), ks};
    }
    auto realised = [&](double skew) {
        Partition p = partition_with_skew(d, num_clients, skew, seed);
        const double ks = mean_pairwise_ks(p, d.labels, d.num_classes);
        return std::make_pair(std::move(p), ks);
    };
    double lo = 0.0, hi = 1.0;
    auto [best_p, best_ks] = realised(hi);
    double best_skew = hi;
    if (best_ks < target_ks - tolerance) {
        throw std::invalid_argument("target KS " + std::to_string(target_ks) + " unreachable: maximum is " +
                                    std::to_string(best_ks) + " for " + std::to_string(num_clients) + " clients and " +
                                    std::to_string(d.num_classes) + " classes");
    }
    for (int it = 0; it < max_iterations && std::abs(best_ks - target_ks) > 1e-9; ++it) {
        const double mid = 0.5 * (lo + hi);
        auto [p, ks] = realised(mid);
        if (std::abs(ks - target_ks) < std::abs(best_ks - target_ks)) {
            best_p = p;
            best_ks = ks;
            best_skew = mid;
        }
        (ks < target_ks ? lo : hi) = mid;
    }
    if (std::abs(best_ks - target_ks) > tolerance) {
        throw std::invalid_argument("target KS " + std::to_string(target_ks) + " not reached within tolerance " +
                                    std::to_string(tolerance) + " (closest " + std::to_string(best_ks) + ")");
    }
    const double conc = best_skew > 0.0 ? (1.0 - best_skew) / best_skew : std::numeric_limits<double>::infinity();
    return {std::move(best_p), conc, best_ks};
}

struct SharedPool {
    Partition augmented;
    std::vector<std::size_t> pool;
};

/// Draws ceil(fraction * n_k) indices from every client without replacement
/// and appends the union to every client's list.
inline SharedPool build_shared_pool(const Partition& partition, double fraction, std::uint64_t seed) {
    if (fraction < 0.0 || fraction >= 1.0) throw std::invalid_argument("shared fraction must lie in [0,1)");
    SharedPool out;
    for (std::size_t k = 0; k < partition.num_clients(); ++k) {
        std::vector<std::size_t> own = partition.clients[k];
        std::mt19937_64 rng(derive_seed(seed, 0x5a4e, k));
        std::shuffle(own.begin(), own.end(), rng);
        const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(own.size())));
        out.pool.insert(out.pool.end(), own.begin(), own.begin() + static_cast<std::ptrdiff_t>(take));
    }
    std::sort(out.pool.begin(), out.pool.end());
    out.augmented = partition;
    for (auto& c : out.augmented.clients) c.insert(c.end(), out.pool.begin(), out.pool.end());
    return out;
}

// --- JSON ------------------------------------------------------------------

inline nlohmann::json partition_to_json(const Partition& p, double mean_ks) {
    nlohmann::json clients = nlohmann::json::object();
    for (std::size_t k = 0; k < p.num_clients(); ++k) clients[std::to_string(k)] = p.clients[k];
    return {{"num_clients", p.num_clients()}, {"mean_ks", mean_ks}, {"clients", clients}};
}

inline Partition partition_from_json(const nlohmann::json& j, std::size_t dataset_size) {
    Partition p;
    const std::size_t n = j.at("num_clients").get<std::size_t>();
    p.clients.resize(n);
    std::vector<bool> used(dataset_size, false);
    for (std::size_t k = 0; k < n; ++k) {
        p.clients[k] = j.at("clients").at(std::to_string(k)).get<std::vector<std::size_t>>();
        for (std::size_t i : p.clients[k]) {
            if (i >= dataset_size) throw std::invalid_argument("partition index " + std::to_string(i) + " out of range");
            if (used[i]) throw std::invalid_argument("partition index " + std::to_string(i) + " assigned twice");
            used[i] = true;
        }
    }
    return p;
}

}  // namespace fedconv
