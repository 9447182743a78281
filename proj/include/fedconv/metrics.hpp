#pragma once

// Evaluation, convergence/communication accounting and report files.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedconv/data.hpp"
#include "fedconv/model.hpp"
#include "json.hpp"

namespace fedconv {

struct EvalResult {
    double accuracy = 0.0;  // percent
    double loss = 0.0;      // mean cross-entropy
    std::size_t samples = 0;
};

/// Argmax accuracy and mean loss with normalizers in eval mode.
template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t batch_size = 256) {
    NoGradGuard no_grad;
    EvalResult r;
    std::size_t correct = 0;
    double loss_sum = 0.0;
    std::vector<int> labels;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const auto batch = indices.subspan(start, std::min(batch_size, indices.size() - start));
        const Tensor<T> x = make_batch<T>(data, batch, labels);
        const Var<T> logits = model.forward(x, NormMode::Eval);
        loss_sum += static_cast<double>(softmax_cross_entropy(logits, labels).value()[0]) *
                    static_cast<double>(batch.size());
        const std::size_t k = logits.shape()[1];
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const T* row = logits.value().data().data() + i * k;
            const std::size_t pred = static_cast<std::size_t>(std::max_element(row, row + k) - row);
            if (pred == static_cast<std::size_t>(labels[i])) ++correct;
        }
    }
    r.samples = indices.size();
    if (r.samples > 0) {
        r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(r.samples);
        r.loss = loss_sum / static_cast<double>(r.samples);
    }
    return r;
}

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size = 256) {
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return evaluate(model, data, all, batch_size);
}

struct RoundRecord {
    std::size_t round = 0;
    double accuracy = 0.0;  // global test accuracy, percent
    double loss = 0.0;      // mean training loss over the round
    std::vector<std::size_t> client_samples;
    double seconds = 0.0;
};

/// First record whose accuracy reaches the target; nullopt when never reached.
inline std::optional<std::size_t> rounds_to_target(const std::vector<RoundRecord>& records, double target_pct) {
    for (const auto& r : records)
        if (r.accuracy >= target_pct) return r.round;
    return std::nullopt;
}

/// Transmitted message size: parameters times rounds.
inline std::int64_t tms(std::int64_t params, std::int64_t rounds) { return params * rounds; }

struct ExperimentReport {
    nlohmann::json config;
    std::string mode = "federated";
    std::vector<RoundRecord> rounds;
    std::optional<double> target_accuracy;
    std::optional<std::size_t> rounds_to_target;
    std::int64_t params = 0;
    std::optional<std::int64_t> tms;
    double final_accuracy = 0.0;
    double partition_mean_ks = 0.0;
};

/// Fills rounds_to_target, TMS and final accuracy from the round list.
inline void finalize_report(ExperimentReport& r) {
    r.final_accuracy = r.rounds.empty() ? 0.0 : r.rounds.back().accuracy;
    r.rounds_to_target.reset();
    r.tms.reset();
    if (r.target_accuracy) {
        r.rounds_to_target = rounds_to_target(r.rounds, *r.target_accuracy);
        if (r.rounds_to_target) r.tms = tms(r.params, static_cast<std::int64_t>(*r.rounds_to_target));
    }
}

/// Deterministic JSON form. Wall-clock time is left out so identical runs
/// serialize identically; it is kept in rounds.csv.
inline nlohmann::json report_to_json(const ExperimentReport& r) {
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& rec : r.rounds) {
        rounds.push_back({{"round", rec.round},
                          {"accuracy", rec.accuracy},
                          {"loss", rec.loss},
                          {"client_samples", rec.client_samples}});
    }
    nlohmann::json j;
    j["config"] = r.config;
    j["mode"] = r.mode;
    j["rounds"] = rounds;
    j["target_accuracy"] = r.target_accuracy ? nlohmann::json(*r.target_accuracy) : nlohmann::json(nullptr);
    j["rounds_to_target"] = r.rounds_to_target ? nlohmann::json(*r.rounds_to_target) : nlohmann::json(nullptr);
    j["params"] = r.params;
    j["tms"] = r.tms ? nlohmann::json(*r.tms) : nlohmann::json(nullptr);
    j["final_accuracy"] = r.final_accuracy;
    j["partition_mean_ks"] = r.partition_mean_ks;
    return j;
}

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string rounds_to_csv(const std::vector<RoundRecord>& records) {
    std::string out = "round,accuracy,loss,seconds\n";
    for (const auto& r : records) {
        out += std::to_string(r.round) + "," + format_double(r.accuracy) + "," + format_double(r.loss) + "," +
               format_double(r.seconds) + "\n";
    }
    return out;
}

/// Parses rounds.csv back into records (client_samples is not stored there).
inline std::vector<RoundRecord> rounds_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "round,accuracy,loss,seconds") {
        throw std::runtime_error("rounds.csv: unexpected header");
    }
    std::vector<RoundRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        RoundRecord r;
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 4) throw std::runtime_error("rounds.csv: malformed line '" + line + "'");
        auto parse = [&](const std::string& s, auto& dst) {
            const auto res = std::from_chars(s.data(), s.data() + s.size(), dst);
            if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
                throw std::runtime_error("rounds.csv: bad number '" + s + "'");
            }
        };
        parse(f[0], r.round);
        parse(f[1], r.accuracy);
        parse(f[2], r.loss);
        parse(f[3], r.seconds);
        out.push_back(std::move(r));
    }
    return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

/// Writes rounds.csv and report.json into `dir`.
inline void write_report(const ExperimentReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text_file(dir / "rounds.csv", rounds_to_csv(report.rounds));
    write_text_file(dir / "report.json", report_to_json(report).dump(2) + "\n");
}

}  // namespace fedconv
