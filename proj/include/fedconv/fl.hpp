#pragma once

// Federated orchestration: local client updates, server aggregation and the
// round loop, plus centralized training on the same schedule.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <thread>
#include <variant>
#include <vector>

#include "fedconv/data.hpp"
#include "fedconv/metrics.hpp"
#include "fedconv/model.hpp"
#include "fedconv/optim.hpp"
#include "fedconv/partition.hpp"

namespace fedconv {

// --- methods -------------------------------------------------------------------

struct FedAvg {};
struct FedProx {
    double mu = 5e-4;
};
struct Share {
    double fraction = 0.05;
};
struct FedYogi {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double tau = 4e-3;
    double eta_client = 0.01;  // replaces the client base learning rate
    double eta_server = 1.0;
};
struct FedBN {};

using FLMethod = std::variant<FedAvg, FedProx, Share, FedYogi, FedBN>;

inline std::string_view method_name(const FLMethod& m) {
    static constexpr std::array<std::string_view, 5> names{"fedavg", "fedprox", "share", "fedyogi", "fedbn"};
    return names[m.index()];
}

inline std::vector<std::string> validate(const FLMethod& m) {
    std::vector<std::string> errors;
    if (const auto* p = std::get_if<FedProx>(&m); p && !(p->mu >= 0)) errors.push_back("mu: must be >= 0");
    if (const auto* s = std::get_if<Share>(&m); s && !(s->fraction > 0 && s->fraction < 1)) {
        errors.push_back("fraction: must lie in (0, 1)");
    }
    if (const auto* y = std::get_if<FedYogi>(&m)) {
        if (!(y->tau > 0)) errors.push_back("tau: must be > 0");
        if (!(y->beta1 >= 0 && y->beta1 < 1)) errors.push_back("beta1: must lie in [0, 1)");
        if (!(y->beta2 >= 0 && y->beta2 < 1)) errors.push_back("beta2: must lie in [0, 1)");
        if (!(y->eta_client > 0)) errors.push_back("eta_client: must be > 0");
        if (!(y->eta_server > 0)) errors.push_back("eta_server: must be > 0");
    }
    return errors;
}

/// Seed streams for derive_seed.
enum SeedStream : std::uint64_t {
    kInitStream = 1,
    kPartitionStream = 2,
    kShuffleStream = 3,
    kSampleStream = 4,
    kShareStream = 5,
};

// --- local training --------------------------------------------------------------

struct TrainOptions {
    std::size_t batch_size = 64;
    OptimizerConfig optimizer;
    std::optional<AGCConfig> agc = AGCConfig{};
    std::uint64_t seed = 0;
};

struct EpochStats {
    double loss_sum = 0.0;  // per-sample loss summed over the epoch
    std::size_t samples = 0;
};

/// Adds mu * (w - anchor) to every parameter gradient.
template <typename T>
void add_proximal_grad(std::vector<ParamEntry<T>>& params, const StateDict<T>& anchor, double mu) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (anchor[i].name != params[i].name) throw ShapeError("proximal anchor does not match parameters");
        auto g = params[i].var.mutable_grad().data();
        const auto w = params[i].var.value().data();
        const auto a = anchor[i].value.data();
        for (std::size_t j = 0; j < g.size(); ++j) {
            g[j] += static_cast<T>(mu * (static_cast<double>(w[j]) - static_cast<double>(a[j])));
        }
    }
}

inline std::int64_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
    return static_cast<std::int64_t>((samples + batch_size - 1) / batch_size);
}

/// One pass over `indices` in a seeded order. The learning rate follows
/// `schedule` indexed by the optimizer's own step count.
template <typename T>
EpochStats train_epoch(Model<T>& model, OptimizerState<T>& opt, const Dataset& data,
                       std::span<const std::size_t> indices, const TrainOptions& options, const LrSchedule& schedule,
                       std::uint64_t client_id, std::uint64_t epoch_counter, const StateDict<T>* prox_anchor = nullptr,
                       double mu = 0.0) {
    if (indices.empty()) throw std::invalid_argument("client " + std::to_string(client_id) + " has no data");
    std::vector<std::size_t> order(indices.begin(), indices.end());
    std::mt19937_64 rng(derive_seed(options.seed, kShuffleStream, client_id, epoch_counter));
    std::shuffle(order.begin(), order.end(), rng);
    const std::int64_t spe = steps_per_epoch(order.size(), options.batch_size);

    EpochStats stats;
    std::vector<int> labels;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
        const std::size_t len = std::min(options.batch_size, order.size() - start);
        const Tensor<T> x = make_batch<T>(data, std::span(order).subspan(start, len), labels);
        model.zero_grad();
        const Var<T> loss = softmax_cross_entropy(model.forward(x, NormMode::Train), labels);
        backward(loss);
        if (prox_anchor && mu != 0.0) add_proximal_grad(model.params(), *prox_anchor, mu);
        if (options.agc) agc_clip(model.params(), *options.agc);
        optimizer_step(opt, model.params(), lr_at(schedule, optimizer_steps(opt), spe));
        stats.loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(len);
        stats.samples += len;
    }
    return stats;
}

template <typename T>
struct ClientState {
    std::size_t id = 0;
    std::vector<std::size_t> indices;
    Model<T> model;
    OptimizerState<T> optimizer;
    std::uint64_t epochs_done = 0;

    std::size_t num_samples() const noexcept { return indices.size(); }
};

template <typename T>
struct LocalResult {
    std::size_t client_id = 0;
    StateDict<T> state;
    std::size_t num_samples = 0;
    EpochStats stats;
};

/// Loads the global state (keeping local BN entries under FedBN), then runs
/// `epochs` passes with the client's persistent optimizer.
template <typename T>
LocalResult<T> local_update(ClientState<T>& client, const StateDict<T>& global, std::size_t epochs,
                            const FLMethod& method, const TrainOptions& options, const LrSchedule& schedule,
                            const Dataset& data) {
    if (client.indices.empty()) throw std::invalid_argument("client " + std::to_string(client.id) + " has no data");
    if (std::holds_alternative<FedBN>(method)) {
        client.model.load_state(global, [](const std::string& n) { return is_batch_norm_entry(n); });
    } else {
        client.model.load_state(global);
    }
    const auto* prox = std::get_if<FedProx>(&method);
    LocalResult<T> r;
    r.client_id = client.id;
    r.num_samples = client.num_samples();
    for (std::size_t e = 0; e < epochs; ++e) {
        const EpochStats s = train_epoch(client.model, client.optimizer, data, client.indices, options, schedule,
                                         client.id, client.epochs_done++, prox ? &global : nullptr,
                                         prox ? prox->mu : 0.0);
        r.stats.loss_sum += s.loss_sum;
        r.stats.samples += s.samples;
    }
    r.state = client.model.state();
    return r;
}

// --- aggregation ------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<const LocalResult<T>*> sorted_by_id(const std::vector<LocalResult<T>>& locals) {
    if (locals.empty()) throw std::invalid_argument("aggregation needs at least one client");
    std::vector<const LocalResult<T>*> out;
    for (const auto& l : locals) out.push_back(&l);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
    const std::size_t n = out.front()->state.size();
    for (const auto* l : out) {
        if (l->state.size() != n) throw ShapeError("client registries differ in length");
        for (std::size_t i = 0; i < n; ++i) {
            const auto& a = out.front()->state[i];
            const auto& b = l->state[i];
            if (a.name != b.name || a.value.shape() != b.value.shape()) {
                throw ShapeError("client registries differ at entry '" + b.name + "'");
            }
        }
    }
    return out;
}

template <typename T>
std::vector<double> sample_weights(const std::vector<const LocalResult<T>*>& sorted) {
    double total = 0.0;
    for (const auto* l : sorted) total += static_cast<double>(l->num_samples);
    if (total <= 0) throw std::invalid_argument("aggregation needs a positive sample count");
    std::vector<double> w;
    for (const auto* l : sorted) w.push_back(static_cast<double>(l->num_samples) / total);
    return w;
}

/// Weighted mean of entry i over clients, accumulated in double in id order.
template <typename T>
Tensor<double> weighted_entry(const std::vector<const LocalResult<T>*>& sorted, const std::vector<double>& w,
                              std::size_t i) {
    const auto first = sorted[0]->state[i].value.data();
    Tensor<double> acc(sorted[0]->state[i].value.shape());
    auto a = acc.data();
    for (std::size_t j = 0; j < a.size(); ++j) a[j] = w[0] * static_cast<double>(first[j]);
    for (std::size_t k = 1; k < sorted.size(); ++k) {
        const auto x = sorted[k]->state[i].value.data();
        for (std::size_t j = 0; j < a.size(); ++j) a[j] += w[k] * static_cast<double>(x[j]);
    }
    return acc;
}

}  // namespace detail

/// Sample-count weighted mean of every entry. Entries selected by `keep`
/// are copied from `previous` instead.
template <typename T>
StateDict<T> aggregate_fedavg(const std::vector<LocalResult<T>>& locals,
                              const std::function<bool(const std::string&)>& keep = {},
                              const StateDict<T>* previous = nullptr) {
    const auto sorted = detail::sorted_by_id(locals);
    const auto w = detail::sample_weights(sorted);
    StateDict<T> out;
    for (std::size_t i = 0; i < sorted[0]->state.size(); ++i) {
        const auto& ref = sorted[0]->state[i];
        if (keep && keep(ref.name)) {
            if (!previous || (*previous)[i].name != ref.name) {
                throw ShapeError("no previous global value for '" + ref.name + "'");
            }
            out.push_back((*previous)[i]);
            continue;
        }
        out.push_back({ref.name, tensor_cast<T>(detail::weighted_entry(sorted, w, i)), ref.trainable});
    }
    return out;
}

/// FedAVG over every entry except batch-norm parameters and statistics,
/// which keep the previous global values.
template <typename T>
StateDict<T> aggregate_fedbn(const std::vector<LocalResult<T>>& locals, const StateDict<T>& global) {
    return aggregate_fedavg(locals, [](const std::string& n) { return is_batch_norm_entry(n); }, &global);
}

template <typename T>
struct ServerState {
    StateDict<T> global;
    std::vector<Tensor<double>> m, v;  // Yogi moments, one per trainable entry
    std::size_t round = 0;
};

/// Yogi moments on the weighted mean client delta; buffers are averaged.
template <typename T>
void yogi_server_step(ServerState<T>& server, const std::vector<LocalResult<T>>& locals, const FedYogi& cfg) {
    const auto sorted = detail::sorted_by_id(locals);
    const auto w = detail::sample_weights(sorted);
    auto& g = server.global;
    if (g.size() != sorted[0]->state.size()) throw ShapeError("server and client registries differ in length");
    if (server.m.empty()) {
        for (const auto& e : g) {
            if (!e.trainable) continue;
            server.m.emplace_back(e.value.shape());
            server.v.emplace_back(e.value.shape(), cfg.tau * cfg.tau);
        }
    }
    std::size_t slot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (g[i].name != sorted[0]->state[i].name) throw ShapeError("server registry differs at '" + g[i].name + "'");
        const Tensor<double> mean = detail::weighted_entry(sorted, w, i);
        auto gv = g[i].value.data();
        if (!g[i].trainable) {
            for (std::size_t j = 0; j < gv.size(); ++j) gv[j] = static_cast<T>(mean[j]);
            continue;
        }
        auto m = server.m[slot].data();
        auto v = server.v[slot].data();
        ++slot;
        for (std::size_t j = 0; j < gv.size(); ++j) {
            const double delta = mean[j] - static_cast<double>(gv[j]);
            const double d2 = delta * delta;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * delta;
            const double diff = v[j] - d2;
            const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
            v[j] = v[j] - (1.0 - cfg.beta2) * d2 * sign;
            gv[j] = static_cast<T>(static_cast<double>(gv[j]) + cfg.eta_server * m[j] / (std::sqrt(v[j]) + cfg.tau));
        }
    }
}

/// Applies the method's server rule to server.global.
template <typename T>
void aggregate(ServerState<T>& server, const std::vector<LocalResult<T>>& locals, const FLMethod& method) {
    if (const auto* y = std::get_if<FedYogi>(&method)) {
        yogi_server_step(server, locals, *y);
    } else if (std::holds_alternative<FedBN>(method)) {
        server.global = aggregate_fedbn(locals, server.global);
    } else {
        server.global = aggregate_fedavg(locals);
    }
}

// --- round loop ------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are
/// captured per index and the lowest-index one is rethrown after joining.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(n);
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < workers; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct FLOptions {
    FLMethod method = FedAvg{};
    std::size_t rounds = 100;
    std::size_t local_epochs = 1;
    std::size_t clients_per_round = 0;  // 0: every client, every round
    std::size_t threads = 1;
    bool early_stop = false;
    std::optional<double> target_accuracy;
    TrainOptions train;
};

/// Client learning-rate schedule: epochs counted in local passes over all rounds.
inline LrSchedule client_schedule(const FLOptions& o) {
    LrSchedule s = o.train.optimizer.schedule;
    s.total_epochs = static_cast<double>(o.rounds * o.local_epochs);
    if (const auto* y = std::get_if<FedYogi>(&o.method)) s.base_lr = y->eta_client;
    return s;
}

/// Sorted ids of the clients that train in `round`.
inline std::vector<std::size_t> select_clients(std::size_t num_clients, std::size_t per_round, std::uint64_t seed,
                                               std::size_t round) {
    std::vector<std::size_t> ids(num_clients);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    if (per_round == 0 || per_round >= num_clients) return ids;
    std::mt19937_64 rng(derive_seed(seed, kSampleStream, round));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(per_round);
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// Called after every round (or epoch) with the record and the global model.
template <typename T>
using RoundCallback = std::function<void(const RoundRecord&, const Model<T>&)>;

template <typename T>
class FederatedRun {
public:
    FederatedRun(const ArchConfig& arch, FLOptions options, const Dataset& train, const Partition& partition,
                 const Dataset& test)
        : options_(std::move(options)), train_(train), test_(test), global_model_(arch, init_seed(options_)) {
        if (auto errs = validate(options_.method); !errs.empty()) throw ConfigError("fl.method." + errs.front());
        if (partition.num_clients() == 0) throw std::invalid_argument("partition has no clients");
        server_.global = global_model_.state();
        for (std::size_t k = 0; k < partition.num_clients(); ++k) {
            if (partition.clients[k].empty()) throw std::invalid_argument("client " + std::to_string(k) + " has no data");
            clients_.push_back(ClientState<T>{k, partition.clients[k], Model<T>(arch, init_seed(options_)),
                                              make_optimizer<T>(options_.train.optimizer), 0});
        }
        for (const auto& c : clients_) pooled_.insert(pooled_.end(), c.indices.begin(), c.indices.end());
        std::sort(pooled_.begin(), pooled_.end());
        pooled_.erase(std::unique(pooled_.begin(), pooled_.end()), pooled_.end());
    }

    static std::uint64_t init_seed(const FLOptions& o) { return derive_seed(o.train.seed, kInitStream); }

    Model<T>& global_model() { return global_model_; }
    const ServerState<T>& server() const { return server_; }
    std::vector<ClientState<T>>& clients() { return clients_; }

    /// Accuracy of the initial model and its loss over the pooled training data.
    RoundRecord evaluate_initial() {
        const auto t0 = std::chrono::steady_clock::now();
        RoundRecord r;
        r.round = 0;
        r.accuracy = evaluate(global_model_, test_).accuracy;
        r.loss = evaluate(global_model_, train_, pooled_).loss;
        for (const auto& c : clients_) r.client_samples.push_back(c.num_samples());
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return r;
    }

    RoundRecord run_round() {
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t round = ++server_.round;
        const auto ids = select_clients(clients_.size(), options_.clients_per_round, options_.train.seed, round);
        const LrSchedule schedule = client_schedule(options_);
        std::vector<LocalResult<T>> locals(ids.size());
        parallel_for(ids.size(), options_.threads, [&](std::size_t i) {
            locals[i] = local_update(clients_[ids[i]], server_.global, options_.local_epochs, options_.method,
                                     options_.train, schedule, train_);
        });
        aggregate(server_, locals, options_.method);
        global_model_.load_state(server_.global);

        RoundRecord r;
        r.round = round;
        double loss_sum = 0.0;
        std::size_t seen = 0;
        r.client_samples.assign(clients_.size(), 0);
        for (const auto& l : locals) {
            loss_sum += l.stats.loss_sum;
            seen += l.stats.samples;
            r.client_samples[l.client_id] = l.num_samples;
        }
        r.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
        r.accuracy = evaluate(global_model_, test_).accuracy;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return r;
    }

private:
    FLOptions options_;
    const Dataset& train_;
    const Dataset& test_;
    Model<T> global_model_;
    ServerState<T> server_;
    std::vector<ClientState<T>> clients_;
    std::vector<std::size_t> pooled_;
};

namespace detail {
inline bool should_stop(const FLOptions& o, const RoundRecord& r) {
    return o.early_stop && o.target_accuracy && r.accuracy >= *o.target_accuracy;
}
}  // namespace detail

/// Round 0 evaluation followed by up to `rounds` rounds. Under Share the
/// partition is first augmented with the shared pool.
template <typename T>
ExperimentReport run_federated(const ArchConfig& arch, const FLOptions& options, const Dataset& train,
                               const Partition& partition, const Dataset& test, const RoundCallback<T>& on_round = {}) {
    Partition effective = partition;
    if (const auto* s = std::get_if<Share>(&options.method)) {
        effective = build_shared_pool(partition, s->fraction, derive_seed(options.train.seed, kShareStream)).augmented;
    }
    FederatedRun<T> run(arch, options, train, effective, test);
    ExperimentReport report;
    report.mode = "federated";
    report.params = run.global_model().num_trainable();
    report.target_accuracy = options.target_accuracy;
    report.partition_mean_ks = mean_pairwise_ks(partition, train.labels, train.num_classes);
    report.rounds.push_back(run.evaluate_initial());
    if (on_round) on_round(report.rounds.back(), run.global_model());
    for (std::size_t r = 0; r < options.rounds && !detail::should_stop(options, report.rounds.back()); ++r) {
        report.rounds.push_back(run.run_round());
        if (on_round) on_round(report.rounds.back(), run.global_model());
    }
    finalize_report(report);
    return report;
}

/// One model trained on `indices` for rounds * local_epochs epochs with the
/// same optimizer, schedule and shuffling as a single client with id 0.
template <typename T>
ExperimentReport run_central(const ArchConfig& arch, const FLOptions& options, const Dataset& train,
                             std::vector<std::size_t> indices, const Dataset& test,
                             const RoundCallback<T>& on_epoch = {}) {
    std::sort(indices.begin(), indices.end());
    Model<T> model(arch, FederatedRun<T>::init_seed(options));
    OptimizerState<T> opt = make_optimizer<T>(options.train.optimizer);
    FLOptions central = options;
    central.method = FedAvg{};
    const LrSchedule schedule = client_schedule(central);
    const std::size_t epochs = options.rounds * options.local_epochs;

    ExperimentReport report;
    report.mode = "central";
    report.params = model.num_trainable();
    report.target_accuracy = options.target_accuracy;
    {
        const auto t0 = std::chrono::steady_clock::now();
        RoundRecord r;
        r.accuracy = evaluate(model, test).accuracy;
        r.loss = evaluate(model, train, indices).loss;
        r.client_samples = {indices.size()};
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.rounds.push_back(r);
        if (on_epoch) on_epoch(report.rounds.back(), model);
    }
    for (std::size_t e = 0; e < epochs && !detail::should_stop(options, report.rounds.back()); ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        const EpochStats s = train_epoch(model, opt, train, indices, options.train, schedule, 0, e);
        RoundRecord r;
        r.round = e + 1;
        r.loss = s.loss_sum / static_cast<double>(s.samples);
        r.accuracy = evaluate(model, test).accuracy;
        r.client_samples = {indices.size()};
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.rounds.push_back(r);
        if (on_epoch) on_epoch(report.rounds.back(), model);
    }
    finalize_report(report);
    return report;
}

}  // namespace fedconv
