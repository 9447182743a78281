#pragma once

// Experiment configuration: a JSON document with a fixed schema. Missing
// keys take the documented defaults; unknown keys and bad values are errors,
// each reported as "<path>: <reason>".

#include <concepts>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedconv/arch.hpp"
#include "fedconv/fl.hpp"
#include "fedconv/optim.hpp"
#include "json.hpp"

namespace fedconv {

enum class DataSource { Synthetic, Cifar10 };
enum class PartitionKind { Iid, LabelSkew, File };

struct PartitionSpec {
    PartitionKind kind = PartitionKind::Iid;
    double target_ks = 0.5;
    double tolerance = 0.05;
    std::string path;  // kind == File
};

struct DataConfig {
    DataSource source = DataSource::Synthetic;
    std::string cifar10_dir;
    std::size_t per_class = 256;      // synthetic train images per class
    std::size_t test_per_class = 64;  // synthetic test images per class
    std::size_t num_clients = 5;
    PartitionSpec partition;
};

struct ExperimentConfig {
    ArchConfig arch;
    FLMethod method = FedAvg{};
    std::size_t rounds = 100;
    std::size_t local_epochs = 1;
    std::size_t clients_per_round = 0;
    bool early_stop = false;
    OptimizerConfig optimizer;
    std::size_t batch_size = 64;
    std::optional<AGCConfig> agc = AGCConfig{};
    DataConfig data;
    std::uint64_t seed = 0;
    std::string dtype = "f32";
    std::string output_dir = "out";
    std::optional<double> target_accuracy;
    std::size_t threads = 1;
};

class ConfigErrors : public std::runtime_error {
public:
    explicit ConfigErrors(std::vector<std::string> errors)
        : std::runtime_error(errors.empty() ? "invalid config" : errors.front()), errors_(std::move(errors)) {}
    const std::vector<std::string>& errors() const noexcept { return errors_; }

private:
    std::vector<std::string> errors_;
};

namespace detail {

/// Reads fields of one JSON object, recording errors under `path`.
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) error("", "must be an object");
    }

    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    void error(const std::string& key, const std::string& reason) const {
        errors_.push_back((key.empty() ? path_ : child(key)) + ": " + reason);
    }

    const nlohmann::json* find(const std::string& key) {
        seen_.insert(key);
        if (!j_.is_object()) return nullptr;
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void read(const std::string& key, bool& dst) {
        if (const auto* v = find(key)) {
            if (v->is_boolean()) dst = v->get<bool>();
            else error(key, "must be a boolean");
        }
    }
    void read(const std::string& key, double& dst) {
        if (const auto* v = find(key)) {
            if (v->is_number()) dst = v->get<double>();
            else error(key, "must be a number");
        }
    }
    static bool non_negative_integer(const nlohmann::json& v) {
        return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    }

    template <std::unsigned_integral U>
    void read(const std::string& key, U& dst) {
        if (const auto* v = find(key)) {
            if (non_negative_integer(*v)) dst = v->get<U>();
            else error(key, "must be a non-negative integer");
        }
    }
    void read(const std::string& key, std::string& dst) {
        if (const auto* v = find(key)) {
            if (v->is_string()) dst = v->get<std::string>();
            else error(key, "must be a string");
        }
    }
    void read(const std::string& key, std::optional<double>& dst) {
        if (const auto* v = find(key)) {
            if (v->is_null()) dst.reset();
            else if (v->is_number()) dst = v->get<double>();
            else error(key, "must be a number or null");
        }
    }
    void read(const std::string& key, std::array<std::size_t, 4>& dst) {
        if (const auto* v = find(key)) {
            if (!v->is_array() || v->size() != 4) {
                error(key, "must be an array of 4 non-negative integers");
                return;
            }
            for (std::size_t i = 0; i < 4; ++i) {
                if (!non_negative_integer((*v)[i])) {
                    error(key, "must be an array of 4 non-negative integers");
                    return;
                }
                dst[i] = (*v)[i].get<std::size_t>();
            }
        }
    }
    template <typename E>
    void read_enum(const std::string& key, E& dst, std::optional<E> (*parse)(std::string_view), const char* allowed) {
        if (const auto* v = find(key)) {
            if (!v->is_string()) {
                error(key, std::string("must be one of ") + allowed);
                return;
            }
            if (auto e = parse(v->get<std::string>())) dst = *e;
            else error(key, "unknown value '" + v->get<std::string>() + "' (expected one of " + allowed + ")");
        }
    }

    /// Reports keys that were never looked up.
    void finish() {
        if (!j_.is_object()) return;
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.contains(key)) error(key, "unknown key");
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

inline std::optional<DataSource> parse_data_source(std::string_view s) {
    if (s == "synthetic") return DataSource::Synthetic;
    if (s == "cifar10") return DataSource::Cifar10;
    return std::nullopt;
}
inline std::optional<PartitionKind> parse_partition_kind(std::string_view s) {
    if (s == "iid") return PartitionKind::Iid;
    if (s == "label_skew") return PartitionKind::LabelSkew;
    if (s == "file") return PartitionKind::File;
    return std::nullopt;
}

inline void read_arch(ObjectReader& r, ArchConfig& a) {
    r.read_enum("stem", a.stem, &parse_stem_kind, "resnet_stem|swin_stem|conv_stem|swin_stem_k5|resnet_stem_no_pool");
    r.read_enum("block", a.block, &parse_block_kind, "normal|invert|invert_up");
    r.read("channels", a.channels);
    r.read("depths", a.depths);
    r.read("kernel_size", a.kernel_size);
    r.read_enum("activation", a.activation, &parse_activation, "relu|lrelu|prelu|softplus|gelu|silu|elu");
    r.read_enum("act_placement", a.act_placement, &parse_act_placement, "all|act1|act2|act3");
    r.read_enum("norm_placement", a.norm_placement, &parse_norm_placement, "all|norm1|norm2|norm3|no_norm");
    r.read_enum("norm_kind", a.norm_kind, &parse_norm_kind, "ln_c|bn|none");
    r.read("num_classes", a.num_classes);
    r.read("input_resolution", a.input_resolution);
}

inline FLMethod read_method(ObjectReader& r) {
    std::string kind = "fedavg";
    r.read("kind", kind);
    if (kind == "fedavg") return FedAvg{};
    if (kind == "fedbn") return FedBN{};
    if (kind == "fedprox") {
        FedProx m;
        r.read("mu", m.mu);
        return m;
    }
    if (kind == "share") {
        Share m;
        r.read("fraction", m.fraction);
        return m;
    }
    if (kind == "fedyogi") {
        FedYogi m;
        r.read("beta1", m.beta1);
        r.read("beta2", m.beta2);
        r.read("tau", m.tau);
        r.read("eta_client", m.eta_client);
        r.read("eta_server", m.eta_server);
        return m;
    }
    r.error("kind", "unknown value '" + kind + "' (expected one of fedavg|fedprox|share|fedyogi|fedbn)");
    return FedAvg{};
}

}  // namespace detail

/// Range and consistency checks on a parsed config.
inline std::vector<std::string> validate(const ExperimentConfig& c) {
    std::vector<std::string> errors;
    for (const auto& e : validate(c.arch)) errors.push_back("arch." + e);
    for (const auto& e : validate(c.method)) errors.push_back("fl.method." + e);
    if (c.local_epochs == 0) errors.push_back("fl.local_epochs: must be >= 1");
    if (c.clients_per_round > c.data.num_clients) errors.push_back("fl.clients_per_round: exceeds data.num_clients");
    if (c.batch_size == 0) errors.push_back("optimizer.batch_size: must be >= 1");
    const auto& s = c.optimizer.schedule;
    if (!(s.base_lr >= 0)) errors.push_back("optimizer.base_lr: must be >= 0");
    if (!(s.warmup_epochs >= 0)) errors.push_back("optimizer.warmup_epochs: must be >= 0");
    const auto& h = c.optimizer.adamw;
    if (!(h.beta1 >= 0 && h.beta1 < 1)) errors.push_back("optimizer.beta1: must lie in [0, 1)");
    if (!(h.beta2 >= 0 && h.beta2 < 1)) errors.push_back("optimizer.beta2: must lie in [0, 1)");
    if (!(h.eps > 0)) errors.push_back("optimizer.eps: must be > 0");
    if (!(h.weight_decay >= 0)) errors.push_back("optimizer.weight_decay: must be >= 0");
    if (!(c.optimizer.sgd.momentum >= 0 && c.optimizer.sgd.momentum < 1)) {
        errors.push_back("optimizer.momentum: must lie in [0, 1)");
    }
    if (c.agc) {
        if (!(c.agc->clipping > 0)) errors.push_back("optimizer.agc.clipping: must be > 0");
        if (!(c.agc->eps > 0)) errors.push_back("optimizer.agc.eps: must be > 0");
    }
    if (c.data.num_clients == 0) errors.push_back("data.num_clients: must be >= 1");
    if (c.data.source == DataSource::Synthetic) {
        if (c.data.per_class == 0) errors.push_back("data.per_class: must be >= 1");
        if (c.data.test_per_class == 0) errors.push_back("data.test_per_class: must be >= 1");
    } else {
        if (c.data.cifar10_dir.empty()) errors.push_back("data.cifar10_dir: required when source is cifar10");
        if (c.arch.num_classes != 10) errors.push_back("arch.num_classes: must be 10 for cifar10");
        if (c.arch.input_resolution != 32) errors.push_back("arch.input_resolution: must be 32 for cifar10");
    }
    const auto& p = c.data.partition;
    if (p.kind == PartitionKind::LabelSkew) {
        if (!(p.target_ks >= 0 && p.target_ks <= 1)) errors.push_back("data.partition.target_ks: must lie in [0, 1]");
        if (!(p.tolerance > 0)) errors.push_back("data.partition.tolerance: must be > 0");
    }
    if (p.kind == PartitionKind::File && p.path.empty()) errors.push_back("data.partition.path: required for kind file");
    if (c.dtype != "f32" && c.dtype != "f64") errors.push_back("dtype: must be f32 or f64");
    if (c.target_accuracy && !(*c.target_accuracy >= 0 && *c.target_accuracy <= 100)) {
        errors.push_back("target_accuracy: must lie in [0, 100]");
    }
    if (c.threads == 0) errors.push_back("threads: must be >= 1");
    return errors;
}

/// Parses and validates; throws ConfigErrors listing every problem.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
    std::vector<std::string> errors;
    ExperimentConfig c;
    detail::ObjectReader root(j, "", errors);
    if (const auto* a = root.find("arch")) {
        detail::ObjectReader r(*a, "arch", errors);
        detail::read_arch(r, c.arch);
        r.finish();
    }
    if (const auto* f = root.find("fl")) {
        detail::ObjectReader r(*f, "fl", errors);
        if (const auto* m = r.find("method")) {
            detail::ObjectReader mr(*m, "fl.method", errors);
            c.method = detail::read_method(mr);
            mr.finish();
        }
        r.read("rounds", c.rounds);
        r.read("local_epochs", c.local_epochs);
        r.read("clients_per_round", c.clients_per_round);
        r.read("early_stop", c.early_stop);
        r.finish();
    }
    if (const auto* o = root.find("optimizer")) {
        detail::ObjectReader r(*o, "optimizer", errors);
        r.read_enum("kind", c.optimizer.kind, &parse_optimizer_kind, "adamw|sgd");
        r.read("base_lr", c.optimizer.schedule.base_lr);
        r.read("warmup_epochs", c.optimizer.schedule.warmup_epochs);
        r.read("weight_decay", c.optimizer.adamw.weight_decay);
        r.read("beta1", c.optimizer.adamw.beta1);
        r.read("beta2", c.optimizer.adamw.beta2);
        r.read("eps", c.optimizer.adamw.eps);
        r.read("momentum", c.optimizer.sgd.momentum);
        r.read("batch_size", c.batch_size);
        if (const auto* g = r.find("agc")) {
            if (g->is_null()) {
                c.agc.reset();
            } else {
                detail::ObjectReader gr(*g, "optimizer.agc", errors);
                AGCConfig agc;
                gr.read("clipping", agc.clipping);
                gr.read("eps", agc.eps);
                gr.finish();
                c.agc = agc;
            }
        }
        r.finish();
    }
    if (const auto* d = root.find("data")) {
        detail::ObjectReader r(*d, "data", errors);
        r.read_enum("source", c.data.source, &detail::parse_data_source, "synthetic|cifar10");
        r.read("cifar10_dir", c.data.cifar10_dir);
        r.read("per_class", c.data.per_class);
        r.read("test_per_class", c.data.test_per_class);
        r.read("num_clients", c.data.num_clients);
        if (const auto* p = r.find("partition")) {
            detail::ObjectReader pr(*p, "data.partition", errors);
            pr.read_enum("kind", c.data.partition.kind, &detail::parse_partition_kind, "iid|label_skew|file");
            pr.read("target_ks", c.data.partition.target_ks);
            pr.read("tolerance", c.data.partition.tolerance);
            pr.read("path", c.data.partition.path);
            pr.finish();
        }
        r.finish();
    }
    root.read("seed", c.seed);
    root.read("dtype", c.dtype);
    root.read("output_dir", c.output_dir);
    root.read("target_accuracy", c.target_accuracy);
    root.read("threads", c.threads);
    root.finish();
    if (errors.empty()) errors = validate(c);
    if (!errors.empty()) throw ConfigErrors(std::move(errors));
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigErrors({path.string() + ": cannot open"});
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigErrors({path.string() + ": " + e.what()});
    }
    return parse_config(j);
}

inline nlohmann::json method_to_json(const FLMethod& m) {
    nlohmann::json j{{"kind", method_name(m)}};
    if (const auto* p = std::get_if<FedProx>(&m)) j["mu"] = p->mu;
    if (const auto* s = std::get_if<Share>(&m)) j["fraction"] = s->fraction;
    if (const auto* y = std::get_if<FedYogi>(&m)) {
        j["beta1"] = y->beta1;
        j["beta2"] = y->beta2;
        j["tau"] = y->tau;
        j["eta_client"] = y->eta_client;
        j["eta_server"] = y->eta_server;
    }
    return j;
}

/// Full config with every default made explicit. `include_runtime` adds the
/// fields that do not affect results (threads, output_dir).
inline nlohmann::json config_to_json(const ExperimentConfig& c, bool include_runtime = true) {
    const auto& a = c.arch;
    nlohmann::json j;
    j["arch"] = {{"stem", to_string(a.stem)},
                 {"block", to_string(a.block)},
                 {"channels", a.channels},
                 {"depths", a.depths},
                 {"kernel_size", a.kernel_size},
                 {"activation", to_string(a.activation)},
                 {"act_placement", to_string(a.act_placement)},
                 {"norm_placement", to_string(a.norm_placement)},
                 {"norm_kind", to_string(a.norm_kind)},
                 {"num_classes", a.num_classes},
                 {"input_resolution", a.input_resolution}};
    j["fl"] = {{"method", method_to_json(c.method)},
               {"rounds", c.rounds},
               {"local_epochs", c.local_epochs},
               {"clients_per_round", c.clients_per_round},
               {"early_stop", c.early_stop}};
    j["optimizer"] = {{"kind", to_string(c.optimizer.kind)},
                      {"base_lr", c.optimizer.schedule.base_lr},
                      {"warmup_epochs", c.optimizer.schedule.warmup_epochs},
                      {"weight_decay", c.optimizer.adamw.weight_decay},
                      {"beta1", c.optimizer.adamw.beta1},
                      {"beta2", c.optimizer.adamw.beta2},
                      {"eps", c.optimizer.adamw.eps},
                      {"momentum", c.optimizer.sgd.momentum},
                      {"batch_size", c.batch_size},
                      {"agc", c.agc ? nlohmann::json{{"clipping", c.agc->clipping}, {"eps", c.agc->eps}}
                                    : nlohmann::json(nullptr)}};
    static constexpr std::array<const char*, 3> partition_kinds{"iid", "label_skew", "file"};
    j["data"] = {{"source", c.data.source == DataSource::Synthetic ? "synthetic" : "cifar10"},
                 {"cifar10_dir", c.data.cifar10_dir},
                 {"per_class", c.data.per_class},
                 {"test_per_class", c.data.test_per_class},
                 {"num_clients", c.data.num_clients},
                 {"partition",
                  {{"kind", partition_kinds[static_cast<std::size_t>(c.data.partition.kind)]},
                   {"target_ks", c.data.partition.target_ks},
                   {"tolerance", c.data.partition.tolerance},
                   {"path", c.data.partition.path}}}};
    j["seed"] = c.seed;
    j["dtype"] = c.dtype;
    j["target_accuracy"] = c.target_accuracy ? nlohmann::json(*c.target_accuracy) : nlohmann::json(nullptr);
    if (include_runtime) {
        j["output_dir"] = c.output_dir;
        j["threads"] = c.threads;
    }
    return j;
}

}  // namespace fedconv
