// fedconv: command-line runner for federated and centralized experiments.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedconv/fedconv.hpp"

namespace fs = std::filesystem;
using namespace fedconv;

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_threads = true) {
    cmd->add_option("--config", f.config, "experiment config (JSON)")->required();
    cmd->add_option("--seed", f.seed, "override the config seed");
    if (with_threads) cmd->add_option("--threads", f.threads, "cap on parallel clients");
    cmd->add_option("--out", f.out, "output directory (default: config output_dir)");
}

ExperimentConfig load_with_overrides(const CommonFlags& f) {
    ExperimentConfig c = load_config(f.config);
    if (f.seed) c.seed = *f.seed;
    if (f.threads) c.threads = *f.threads;
    if (!f.out.empty()) c.output_dir = f.out;
    if (auto errs = validate(c); !errs.empty()) throw ConfigErrors(std::move(errs));
    return c;
}

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), pattern, v);
    return buf;
}

void print_round(const RoundRecord& r) {
    std::cout << "round " << r.round << "  accuracy " << fmt("%.2f", r.accuracy) << "  loss " << fmt("%.4f", r.loss)
              << "  seconds " << fmt("%.2f", r.seconds) << std::endl;
}

void print_summary(const ExperimentReport& r, const fs::path& out) {
    std::cout << "params " << r.params << "\nfinal_accuracy " << fmt("%.2f", r.final_accuracy) << "\n";
    if (r.target_accuracy) {
        std::cout << "rounds_to_target " << (r.rounds_to_target ? std::to_string(*r.rounds_to_target) : "unreachable")
                  << "\ntms " << (r.tms ? std::to_string(*r.tms) : "unreachable") << "\n";
    }
    std::cout << "wrote " << (out / "report.json").string() << "\n";
}

int cmd_run(const CommonFlags& f, RunMode mode) {
    const ExperimentConfig c = load_with_overrides(f);
    const fs::path out = c.output_dir;
    const auto report = run_experiment(c, mode, out, print_round);
    print_summary(report, out);
    return 0;
}

int cmd_partition(const CommonFlags& f) {
    const ExperimentConfig c = load_with_overrides(f);
    const DataBundle data = load_data(c);
    const PartitionResult part = make_partition(c, data.train);
    for (std::size_t k = 0; k < part.partition.num_clients(); ++k) {
        const auto h = class_histogram(data.train, part.partition.clients[k]);
        std::cout << "client " << k << " n=" << part.partition.clients[k].size() << " classes";
        for (auto v : h) std::cout << ' ' << v;
        std::cout << "\n";
    }
    std::cout << "mean_ks " << fmt("%.4f", part.mean_ks) << "\n";
    const fs::path out = c.output_dir;
    fs::create_directories(out);
    write_text_file(out / "partition.json", partition_to_json(part.partition, part.mean_ks).dump() + "\n");
    std::cout << "wrote " << (out / "partition.json").string() << "\n";
    return 0;
}

int cmd_flops(const std::string& config, std::optional<double> calibrate, double tolerance) {
    ExperimentConfig c = load_config(config);
    std::cout << "params " << count_params(c.arch) << "\nflops " << count_flops(c.arch) << "\nresolution "
              << c.arch.input_resolution << "\n";
    if (calibrate) {
        const auto depths = calibrate_depths(c.arch, *calibrate, tolerance);
        c.arch.depths = depths;
        std::cout << "calibrated_depths " << depths[0] << ',' << depths[1] << ',' << depths[2] << ',' << depths[3]
                  << "\ncalibrated_params " << count_params(c.arch) << "\ncalibrated_flops " << count_flops(c.arch)
                  << "\n";
    }
    return 0;
}

void apply_axis(ArchConfig& a, const std::string& axis, const std::string& value) {
    auto bad = [&] { return ConfigErrors({"sweep." + axis + ": bad value '" + value + "'"}); };
    if (axis == "kernel_size") {
        std::size_t pos = 0;
        unsigned long k = 0;
        try {
            k = std::stoul(value, &pos);
        } catch (const std::exception&) {
            throw bad();
        }
        if (pos != value.size()) throw bad();
        a.kernel_size = k;
    } else if (axis == "activation") {
        if (auto v = parse_activation(value)) a.activation = *v;
        else throw bad();
    } else if (axis == "stem") {
        if (auto v = parse_stem_kind(value)) a.stem = *v;
        else throw bad();
    } else if (axis == "act_placement") {
        if (auto v = parse_act_placement(value)) a.act_placement = *v;
        else throw bad();
    } else if (axis == "norm_placement") {
        if (auto v = parse_norm_placement(value)) a.norm_placement = *v;
        else throw bad();
    } else {
        throw ConfigErrors({"sweep.axis: unknown axis '" + axis +
                            "' (expected kernel_size|activation|stem|act_placement|norm_placement)"});
    }
}

int cmd_sweep(const CommonFlags& f, const std::string& axis, const std::vector<std::string>& values) {
    const ExperimentConfig base = load_with_overrides(f);
    std::vector<ExperimentConfig> configs;
    for (const auto& v : values) {
        ExperimentConfig c = base;
        apply_axis(c.arch, axis, v);
        if (auto errs = validate(c); !errs.empty()) throw ConfigErrors(std::move(errs));
        configs.push_back(std::move(c));
    }
    const fs::path out = base.output_dir;
    const DataBundle data = load_data(base);
    const PartitionResult part = make_partition(base, data.train);
    std::string csv = "axis,value,params,flops,final_accuracy,rounds_to_target,tms\n";
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto& c = configs[i];
        std::cout << "== " << axis << "=" << values[i] << "\n";
        const fs::path dir = out / (axis + "-" + values[i]);
        const auto r = c.dtype == "f64" ? run_experiment_typed<double>(c, RunMode::Federated, data, part, dir, print_round)
                                        : run_experiment_typed<float>(c, RunMode::Federated, data, part, dir, print_round);
        csv += axis + "," + values[i] + "," + std::to_string(r.params) + "," + std::to_string(count_flops(c.arch)) + "," +
               format_double(r.final_accuracy) + "," + (r.rounds_to_target ? std::to_string(*r.rounds_to_target) : "") +
               "," + (r.tms ? std::to_string(*r.tms) : "") + "\n";
    }
    fs::create_directories(out);
    write_text_file(out / "sweep.csv", csv);
    std::cout << csv << "wrote " << (out / "sweep.csv").string() << "\n";
    return 0;
}

template <typename T>
double eval_checkpoint(const ExperimentConfig& c, const std::string& checkpoint) {
    const DataBundle data = load_data(c);
    Model<T> model(c.arch, 0);
    load_checkpoint(checkpoint, model);
    return evaluate(model, data.test).accuracy;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint) {
    const ExperimentConfig c = load_with_overrides(f);
    const double acc = c.dtype == "f64" ? eval_checkpoint<double>(c, checkpoint) : eval_checkpoint<float>(c, checkpoint);
    std::cout << "accuracy " << fmt("%.2f", acc) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator for normalization-free CNNs"};
    app.require_subcommand(1);

    CommonFlags train_f, central_f, part_f, sweep_f, eval_f;
    auto* train = app.add_subcommand("train", "federated training");
    add_common(train, train_f);
    auto* central = app.add_subcommand("central", "centralized training on the pooled data");
    add_common(central, central_f);
    auto* partition = app.add_subcommand("partition", "build and describe the client partition");
    add_common(partition, part_f, false);

    std::string flops_config;
    std::optional<double> calibrate;
    double tolerance = 0.15;
    auto* flops = app.add_subcommand("flops", "count parameters and FLOPs");
    flops->add_option("--config", flops_config, "experiment config (JSON)")->required();
    flops->add_option("--calibrate", calibrate, "target FLOPs for depth calibration");
    flops->add_option("--tolerance", tolerance, "relative tolerance for --calibrate")->capture_default_str();

    std::string axis;
    std::vector<std::string> values;
    auto* sweep = app.add_subcommand("sweep", "one federated run per value of an architecture axis");
    add_common(sweep, sweep_f);
    sweep->add_option("--axis", axis, "kernel_size|activation|stem|act_placement|norm_placement")->required();
    sweep->add_option("values", values, "axis values")->required();

    std::string checkpoint;
    auto* eval = app.add_subcommand("eval", "test accuracy of a saved model");
    add_common(eval, eval_f, false);
    eval->add_option("--checkpoint", checkpoint, "checkpoint prefix (without .manifest/.bin)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*train) return cmd_run(train_f, RunMode::Federated);
        if (*central) return cmd_run(central_f, RunMode::Central);
        if (*partition) return cmd_partition(part_f);
        if (*flops) return cmd_flops(flops_config, calibrate, tolerance);
        if (*sweep) return cmd_sweep(sweep_f, axis, values);
        if (*eval) return cmd_eval(eval_f, checkpoint);
    } catch (const ConfigErrors& e) {
        for (const auto& msg : e.errors()) std::cerr << "error: " << msg << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '\n') ch = ' ';
        std::cerr << "error: " << msg << "\n";
        return 1;
    }
    return 1;
}
