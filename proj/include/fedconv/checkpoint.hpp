#pragma once

// Checkpoints: `<prefix>.manifest` (UTF-8 text) plus `<prefix>.bin`
// (little-endian IEEE-754 blob).
//
// Manifest layout:
//   fedconv-checkpoint 1
//   <name>\t<f32|f64>\t<byte offset>\t<d0,d1,...>
// Tensors are stored back to back in manifest order.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedconv/model.hpp"
#include "fedconv/optim.hpp"

namespace fedconv {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct NamedTensor {
    std::string name;
    AnyTensor tensor;
};

inline constexpr std::string_view kCheckpointMagic = "fedconv-checkpoint 1";

template <typename T>
constexpr std::string_view dtype_tag() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

namespace detail {

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T value) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

template <typename T>
T read_le(const std::uint8_t* p) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(p[b]) << (8 * b);
    return std::bit_cast<T>(bits);
}

inline std::string join_shape(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out;
}

inline Shape parse_shape(const std::string& text, const std::string& context) {
    Shape s;
    if (text.empty()) return s;
    std::stringstream in(text);
    for (std::string tok; std::getline(in, tok, ',');) {
        if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
            throw CheckpointError(context + ": bad shape '" + text + "'");
        }
        s.push_back(std::stoull(tok));
    }
    return s;
}

inline std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* suffix) {
    return std::filesystem::path(prefix.string() + suffix);
}

}  // namespace detail

/// Little-endian bytes of one tensor, as stored in the blob.
template <typename T>
std::vector<std::uint8_t> tensor_bytes(const Tensor<T>& t) {
    std::vector<std::uint8_t> out;
    out.reserve(t.numel() * sizeof(T));
    for (T v : t.data()) detail::append_le(out, v);
    return out;
}

inline void save_tensors(const std::filesystem::path& prefix, const std::vector<NamedTensor>& tensors) {
    if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
    std::string manifest = std::string(kCheckpointMagic) + "\n";
    std::vector<std::uint8_t> blob;
    for (const auto& nt : tensors) {
        if (nt.name.find_first_of("\t\n") != std::string::npos) {
            throw CheckpointError("tensor name '" + nt.name + "' contains a tab or newline");
        }
        std::visit(
            [&](const auto& t) {
                using T = typename std::decay_t<decltype(t)>::value_type;
                manifest += nt.name + "\t" + std::string(dtype_tag<T>()) + "\t" + std::to_string(blob.size()) + "\t" +
                            detail::join_shape(t.shape()) + "\n";
                const auto bytes = tensor_bytes(t);
                blob.insert(blob.end(), bytes.begin(), bytes.end());
            },
            nt.tensor);
    }
    std::ofstream m(detail::with_suffix(prefix, ".manifest"), std::ios::binary);
    std::ofstream b(detail::with_suffix(prefix, ".bin"), std::ios::binary);
    if (!m || !b) throw CheckpointError("cannot write checkpoint at " + prefix.string());
    m << manifest;
    b.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!m || !b) throw CheckpointError("short write for checkpoint at " + prefix.string());
}

inline std::vector<NamedTensor> load_tensors(const std::filesystem::path& prefix) {
    const auto mpath = detail::with_suffix(prefix, ".manifest");
    const auto bpath = detail::with_suffix(prefix, ".bin");
    std::ifstream m(mpath, std::ios::binary);
    std::ifstream b(bpath, std::ios::binary);
    if (!m) throw CheckpointError("cannot open " + mpath.string());
    if (!b) throw CheckpointError("cannot open " + bpath.string());
    const std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());

    std::string line;
    if (!std::getline(m, line) || line != kCheckpointMagic) {
        throw CheckpointError(mpath.string() + ": missing header '" + std::string(kCheckpointMagic) + "'");
    }
    std::vector<NamedTensor> out;
    std::size_t expected_offset = 0;
    for (std::size_t lineno = 2; std::getline(m, line); ++lineno) {
        if (line.empty()) continue;
        const std::string ctx = mpath.string() + ":" + std::to_string(lineno);
        std::vector<std::string> f;
        std::size_t start = 0;
        for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
            f.push_back(line.substr(start, tab - start));
        }
        f.push_back(line.substr(start));
        if (f.size() != 4) throw CheckpointError(ctx + ": expected 4 tab-separated fields");
        if (f[2].empty() || f[2].find_first_not_of("0123456789") != std::string::npos) {
            throw CheckpointError(ctx + ": bad offset '" + f[2] + "'");
        }
        const std::size_t offset = std::stoull(f[2]);
        if (offset != expected_offset) {
            throw CheckpointError(ctx + ": offset " + f[2] + " does not follow previous tensor (expected " +
                                  std::to_string(expected_offset) + ")");
        }
        const Shape shape = detail::parse_shape(f[3], ctx);
        const std::size_t n = shape_numel(shape);
        auto read = [&]<typename T>(std::type_identity<T>) {
            const std::size_t bytes = n * sizeof(T);
            if (offset + bytes > blob.size()) {
                throw CheckpointError(ctx + ": tensor '" + f[0] + "' runs past the end of " + bpath.string());
            }
            Tensor<T> t(shape);
            for (std::size_t i = 0; i < n; ++i) t[i] = detail::read_le<T>(blob.data() + offset + i * sizeof(T));
            out.push_back({f[0], std::move(t)});
            expected_offset = offset + bytes;
        };
        if (f[1] == "f32") read(std::type_identity<float>{});
        else if (f[1] == "f64") read(std::type_identity<double>{});
        else throw CheckpointError(ctx + ": unknown dtype '" + f[1] + "'");
    }
    if (expected_offset != blob.size()) {
        throw CheckpointError(bpath.string() + ": blob has " + std::to_string(blob.size()) + " bytes, manifest covers " +
                              std::to_string(expected_offset));
    }
    return out;
}

// --- model + optimizer state ---------------------------------------------------

template <typename T>
std::vector<NamedTensor> checkpoint_entries(const Model<T>& model, const OptimizerState<T>* opt = nullptr) {
    std::vector<NamedTensor> out;
    for (auto& e : model.state()) out.push_back({e.name, std::move(e.value)});
    if (!opt) return out;
    const auto& params = model.params();
    auto scalar = [](double v) { return Tensor<double>({1}, v); };
    if (const auto* a = std::get_if<AdamWState<T>>(opt)) {
        out.push_back({"opt.adamw.step", scalar(static_cast<double>(a->step))});
        Tensor<double> hyper({4});
        hyper[0] = a->hyper.beta1;
        hyper[1] = a->hyper.beta2;
        hyper[2] = a->hyper.eps;
        hyper[3] = a->hyper.weight_decay;
        out.push_back({"opt.adamw.hyper", std::move(hyper)});
        for (std::size_t i = 0; i < a->m.size(); ++i) {
            out.push_back({"opt.adamw.m." + params[i].name, a->m[i]});
            out.push_back({"opt.adamw.v." + params[i].name, a->v[i]});
        }
    } else {
        const auto& s = std::get<SgdState<T>>(*opt);
        out.push_back({"opt.sgd.step", scalar(static_cast<double>(s.step))});
        out.push_back({"opt.sgd.hyper", scalar(s.hyper.momentum)});
        for (std::size_t i = 0; i < s.momentum_buffer.size(); ++i) {
            out.push_back({"opt.sgd.buf." + params[i].name, s.momentum_buffer[i]});
        }
    }
    return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& prefix, const Model<T>& model, const OptimizerState<T>* opt = nullptr) {
    save_tensors(prefix, checkpoint_entries(model, opt));
}

namespace detail {
template <typename T>
const Tensor<T>& expect_tensor(const NamedTensor& nt, const std::string& name) {
    if (nt.name != name) throw CheckpointError("checkpoint entry '" + nt.name + "' where '" + name + "' was expected");
    const auto* t = std::get_if<Tensor<T>>(&nt.tensor);
    if (!t) throw CheckpointError("checkpoint entry '" + name + "' has dtype other than " + std::string(dtype_tag<T>()));
    return *t;
}
}  // namespace detail

/// Restores model state and, when `opt` is given and the checkpoint has one,
/// the optimizer state. Returns true when an optimizer state was restored.
template <typename T>
bool restore_checkpoint(const std::vector<NamedTensor>& entries, Model<T>& model, OptimizerState<T>* opt = nullptr) {
    const StateDict<T> current = model.state();
    if (entries.size() < current.size()) {
        throw CheckpointError("checkpoint has " + std::to_string(entries.size()) + " entries, model needs " +
                              std::to_string(current.size()));
    }
    StateDict<T> state;
    for (std::size_t i = 0; i < current.size(); ++i) {
        state.push_back({current[i].name, detail::expect_tensor<T>(entries[i], current[i].name), current[i].trainable});
    }
    model.load_state(state);

    std::size_t pos = current.size();
    if (pos == entries.size() || !opt) {
        if (pos != entries.size() && entries[pos].name.rfind("opt.", 0) != 0) {
            throw CheckpointError("unexpected checkpoint entry '" + entries[pos].name + "'");
        }
        return false;
    }
    const auto& params = model.params();
    auto next = [&](const std::string& name) -> const NamedTensor& {
        if (pos >= entries.size()) throw CheckpointError("checkpoint ends before '" + name + "'");
        return entries[pos++];
    };
    auto scalar = [&](const std::string& name) { return detail::expect_tensor<double>(next(name), name)[0]; };
    auto slot = [&](const std::string& name, const Shape& shape) {
        const Tensor<T>& t = detail::expect_tensor<T>(next(name), name);
        if (t.shape() != shape) throw CheckpointError("checkpoint entry '" + name + "' has wrong shape");
        return t;
    };

    if (entries[pos].name == "opt.adamw.step") {
        AdamWState<T> a;
        a.step = static_cast<std::int64_t>(scalar("opt.adamw.step"));
        const Tensor<double>& h = detail::expect_tensor<double>(next("opt.adamw.hyper"), "opt.adamw.hyper");
        if (h.numel() != 4) throw CheckpointError("opt.adamw.hyper must hold 4 values");
        a.hyper = {h[0], h[1], h[2], h[3]};
        if (pos < entries.size()) {
            for (const auto& p : params) {
                a.m.push_back(slot("opt.adamw.m." + p.name, p.var.shape()));
                a.v.push_back(slot("opt.adamw.v." + p.name, p.var.shape()));
            }
        }
        *opt = std::move(a);
    } else if (entries[pos].name == "opt.sgd.step") {
        SgdState<T> s;
        s.step = static_cast<std::int64_t>(scalar("opt.sgd.step"));
        s.hyper.momentum = scalar("opt.sgd.hyper");
        if (pos < entries.size()) {
            for (const auto& p : params) s.momentum_buffer.push_back(slot("opt.sgd.buf." + p.name, p.var.shape()));
        }
        *opt = std::move(s);
    } else {
        throw CheckpointError("unexpected checkpoint entry '" + entries[pos].name + "'");
    }
    if (pos != entries.size()) throw CheckpointError("trailing checkpoint entry '" + entries[pos].name + "'");
    return true;
}

template <typename T>
bool load_checkpoint(const std::filesystem::path& prefix, Model<T>& model, OptimizerState<T>* opt = nullptr) {
    return restore_checkpoint(load_tensors(prefix), model, opt);
}

}  // namespace fedconv
