#pragma once

// Binds an ExperimentConfig to data, partitioning and the training loops.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "fedconv/checkpoint.hpp"
#include "fedconv/config.hpp"
#include "fedconv/data.hpp"
#include "fedconv/fl.hpp"
#include "fedconv/metrics.hpp"
#include "fedconv/partition.hpp"

namespace fedconv {

inline constexpr std::uint64_t kDataStream = 6;

struct DataBundle {
    Dataset train;
    Dataset test;
};

inline DataBundle load_data(const ExperimentConfig& c) {
    DataBundle b;
    if (c.data.source == DataSource::Cifar10) {
        b.train = load_cifar10_dir(c.data.cifar10_dir, Split::Train);
        b.test = load_cifar10_dir(c.data.cifar10_dir, Split::Test);
    } else {
        b.train = synth_dataset(derive_seed(c.seed, kDataStream, 0), c.arch.num_classes, c.data.per_class,
                                c.arch.input_resolution, Split::Train);
        b.test = synth_dataset(derive_seed(c.seed, kDataStream, 1), c.arch.num_classes, c.data.test_per_class,
                               c.arch.input_resolution, Split::Test);
    }
    return b;
}

struct PartitionResult {
    Partition partition;
    double mean_ks = 0.0;
};

inline PartitionResult make_partition(const ExperimentConfig& c, const Dataset& train) {
    const auto& spec = c.data.partition;
    const std::uint64_t seed = derive_seed(c.seed, kPartitionStream);
    PartitionResult r;
    switch (spec.kind) {
        case PartitionKind::Iid:
            r.partition = partition_iid(train, c.data.num_clients, seed);
            break;
        case PartitionKind::LabelSkew:
            r.partition = partition_label_skew(train, c.data.num_clients, spec.target_ks, spec.tolerance, seed).partition;
            break;
        case PartitionKind::File: {
            std::ifstream in(spec.path);
            if (!in) throw std::runtime_error("cannot open partition file " + spec.path);
            r.partition = partition_from_json(nlohmann::json::parse(in), train.size());
            break;
        }
    }
    r.mean_ks = mean_pairwise_ks(r.partition, train.labels, train.num_classes);
    return r;
}

inline FLOptions fl_options(const ExperimentConfig& c) {
    FLOptions o;
    o.method = c.method;
    o.rounds = c.rounds;
    o.local_epochs = c.local_epochs;
    o.clients_per_round = c.clients_per_round;
    o.threads = c.threads;
    o.early_stop = c.early_stop;
    o.target_accuracy = c.target_accuracy;
    o.train.batch_size = c.batch_size;
    o.train.optimizer = c.optimizer;
    o.train.agc = c.agc;
    o.train.seed = c.seed;
    return o;
}

enum class RunMode { Federated, Central };

using ProgressFn = std::function<void(const RoundRecord&)>;

/// Runs one experiment, writes rounds.csv, report.json and a checkpoint of
/// the final global model into `out_dir`, and returns the report.
template <typename T>
ExperimentReport run_experiment_typed(const ExperimentConfig& c, RunMode mode, const DataBundle& data,
                                      const PartitionResult& part, const std::filesystem::path& out_dir,
                                      const ProgressFn& progress = {}) {
    const FLOptions options = fl_options(c);
    std::optional<Model<T>> final_model;
    auto keep_last = [&](const RoundRecord& r, const Model<T>& m) {
        if (progress) progress(r);
        if (!final_model) final_model.emplace(m.config(), 0);
        final_model->load_state(m.state());
    };
    ExperimentReport report;
    if (mode == RunMode::Federated) {
        report = run_federated<T>(c.arch, options, data.train, part.partition, data.test, keep_last);
    } else {
        std::vector<std::size_t> pooled;
        for (const auto& client : part.partition.clients) pooled.insert(pooled.end(), client.begin(), client.end());
        report = run_central<T>(c.arch, options, data.train, pooled, data.test, keep_last);
    }
    report.partition_mean_ks = part.mean_ks;
    report.config = config_to_json(c, false);
    write_report(report, out_dir);
    if (final_model) save_checkpoint(out_dir / "model", *final_model);
    return report;
}

inline ExperimentReport run_experiment(const ExperimentConfig& c, RunMode mode, const std::filesystem::path& out_dir,
                                       const ProgressFn& progress = {}) {
    const DataBundle data = load_data(c);
    const PartitionResult part = make_partition(c, data.train);
    if (c.dtype == "f64") return run_experiment_typed<double>(c, mode, data, part, out_dir, progress);
    return run_experiment_typed<float>(c, mode, data, part, out_dir, progress);
}

}  // namespace fedconv
