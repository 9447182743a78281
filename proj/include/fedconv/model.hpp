#pragma once

// A built network: the layer plan plus its parameters and normalizer buffers.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fedconv/arch.hpp"

namespace fedconv {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// One named tensor of model state. Trainable entries are parameters;
/// the rest are normalizer running statistics.
template <typename T>
struct StateEntry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
};

template <typename T>
using StateDict = std::vector<StateEntry<T>>;

/// True for batch-norm affine parameters and running statistics.
inline bool is_batch_norm_entry(std::string_view name) {
    std::size_t start = 0;
    while (start <= name.size()) {
        const std::size_t dot = name.find('.', start);
        const std::string_view seg = name.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start);
        if (seg.size() >= 2 && seg.substr(0, 2) == "bn") {
            bool digits = true;
            for (char ch : seg.substr(2)) digits = digits && (ch >= '0' && ch <= '9');
            if (digits) return true;
        }
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    return false;
}

inline bool is_head_entry(std::string_view name) { return name.substr(0, 5) == "head."; }

template <typename T>
struct ParamEntry {
    std::string name;
    Var<T> var;
};

template <typename T>
struct BufferEntry {
    std::string name;
    Tensor<T> value;
};

/// Called with (layer name, activation output) during forward.
template <typename T>
using ActivationObserver = std::function<void(const std::string&, const Tensor<T>&)>;

namespace detail {
template <typename T>
Tensor<T> trunc_normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) {
        double z = dist(rng);
        while (std::abs(z) > 2.0) z = dist(rng);
        v = static_cast<T>(z * stddev);
    }
    return t;
}
}  // namespace detail

template <typename T>
class Model {
public:
    explicit Model(const ArchConfig& config, std::uint64_t seed = 0) : Model(plan_model(config), seed) {}

    Model(ModelPlan plan, std::uint64_t seed) : plan_(std::move(plan)) {
        std::mt19937_64 rng(seed);
        for (const auto& unit : plan_.units) {
            auto& slots = slots_.emplace_back();
            for (const auto& layer : unit.layers) slots.push_back(create_layer(unit.name + "." + layer.name, layer, rng));
        }
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    const ModelPlan& plan() const noexcept { return plan_; }
    const ArchConfig& config() const noexcept { return plan_.config; }
    std::vector<ParamEntry<T>>& params() noexcept { return params_; }
    const std::vector<ParamEntry<T>>& params() const noexcept { return params_; }
    std::vector<BufferEntry<T>>& buffers() noexcept { return buffers_; }
    const std::vector<BufferEntry<T>>& buffers() const noexcept { return buffers_; }

    std::int64_t num_trainable() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += static_cast<std::int64_t>(p.var.value().numel());
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    /// images [N,3,R,R] -> logits [N,num_classes]
    Var<T> forward(const Tensor<T>& images, NormMode mode, const ActivationObserver<T>& observer = {}) {
        Var<T> x = Var<T>::leaf(images, false, "input");
        for (std::size_t u = 0; u < plan_.units.size(); ++u) {
            const UnitSpec& unit = plan_.units[u];
            Var<T> skip = x;
            for (std::size_t l = 0; l < unit.layers.size(); ++l) {
                x = apply(unit.layers[l], slots_[u][l], x, mode);
                if (observer && unit.layers[l].kind == LayerKind::Act) {
                    observer(unit.name + "." + unit.layers[l].name, x.value());
                }
            }
            if (unit.residual) x = add(skip, x);
        }
        return x;
    }

    /// Parameters followed by buffers, in registration order.
    StateDict<T> state() const {
        StateDict<T> out;
        out.reserve(params_.size() + buffers_.size());
        for (const auto& p : params_) out.push_back({p.name, p.var.value(), true});
        for (const auto& b : buffers_) out.push_back({b.name, b.value, false});
        return out;
    }

    /// Copies matching entries into the model. Entries for which `skip`
    /// returns true are left untouched. Every non-skipped entry of the model
    /// must be present with the same shape.
    void load_state(const StateDict<T>& state, const std::function<bool(const std::string&)>& skip = {}) {
        const std::size_t expected = params_.size() + buffers_.size();
        if (state.size() != expected) {
            throw ShapeError("state has " + std::to_string(state.size()) + " entries, model expects " +
                             std::to_string(expected));
        }
        for (std::size_t i = 0; i < expected; ++i) {
            const auto& e = state[i];
            const bool is_param = i < params_.size();
            const std::string& name = is_param ? params_[i].name : buffers_[i - params_.size()].name;
            if (e.name != name) throw ShapeError("state entry '" + e.name + "' does not match '" + name + "'");
            if (skip && skip(name)) continue;
            Tensor<T>& dst = is_param ? params_[i].var.mutable_value() : buffers_[i - params_.size()].value;
            if (dst.shape() != e.value.shape()) {
                throw ShapeError("state entry '" + name + "' has shape " + shape_str(e.value.shape()) +
                                 ", expected " + shape_str(dst.shape()));
            }
            dst = e.value;
        }
    }

private:
    struct Slot {
        int weight = -1, bias = -1, gamma = -1, beta = -1, slope = -1;
        int running_mean = -1, running_var = -1;
    };

    int add_param(std::string name, Tensor<T> value) {
        params_.push_back({name, Var<T>::leaf(std::move(value), true, name)});
        return static_cast<int>(params_.size() - 1);
    }
    int add_buffer(std::string name, Tensor<T> value) {
        buffers_.push_back({std::move(name), std::move(value)});
        return static_cast<int>(buffers_.size() - 1);
    }

    Slot create_layer(const std::string& prefix, const LayerSpec& l, std::mt19937_64& rng) {
        Slot s;
        switch (l.kind) {
            case LayerKind::Conv: {
                const std::size_t cin_g = l.in_channels / l.groups;
                const double fan_in = static_cast<double>(cin_g * l.kernel * l.kernel);
                s.weight = add_param(prefix + ".weight",
                                     detail::trunc_normal<T>({l.out_channels, cin_g, l.kernel, l.kernel},
                                                             std::sqrt(2.0 / fan_in), rng));
                s.bias = add_param(prefix + ".bias", Tensor<T>({l.out_channels}));
                break;
            }
            case LayerKind::Linear:
                s.weight = add_param(prefix + ".weight",
                                     detail::trunc_normal<T>({l.out_channels, l.in_channels},
                                                             std::sqrt(1.0 / static_cast<double>(l.in_channels)), rng));
                s.bias = add_param(prefix + ".bias", Tensor<T>({l.out_channels}));
                break;
            case LayerKind::Norm:
                s.gamma = add_param(prefix + ".gamma", Tensor<T>({l.out_channels}, T(1)));
                s.beta = add_param(prefix + ".beta", Tensor<T>({l.out_channels}));
                if (l.norm == NormKind::BatchNorm) {
                    s.running_mean = add_buffer(prefix + ".running_mean", Tensor<T>({l.out_channels}));
                    s.running_var = add_buffer(prefix + ".running_var", Tensor<T>({l.out_channels}, T(1)));
                }
                break;
            case LayerKind::Act:
                if (l.act == Activation::PReLU) {
                    s.slope = add_param(prefix + ".slope", Tensor<T>({l.out_channels}, static_cast<T>(kPReluInit)));
                }
                break;
            default:
                break;
        }
        return s;
    }

    Var<T> param(int idx) const { return idx < 0 ? Var<T>() : params_[static_cast<std::size_t>(idx)].var; }

    Var<T> apply(const LayerSpec& l, const Slot& s, const Var<T>& x, NormMode mode) {
        switch (l.kind) {
            case LayerKind::Conv:
                return conv2d(x, param(s.weight), param(s.bias), Conv2dOptions{l.stride, l.padding, l.groups});
            case LayerKind::Linear:
                return linear(x, param(s.weight), param(s.bias));
            case LayerKind::Norm:
                if (l.norm == NormKind::BatchNorm) {
                    return batch_norm(x, param(s.gamma), param(s.beta),
                                      buffers_[static_cast<std::size_t>(s.running_mean)].value,
                                      buffers_[static_cast<std::size_t>(s.running_var)].value,
                                      static_cast<T>(kBatchNormMomentum), static_cast<T>(kNormEps), mode);
                }
                return layer_norm_c(x, param(s.gamma), param(s.beta), static_cast<T>(kNormEps));
            case LayerKind::Act:
                return activation(l.act, x, param(s.slope));
            case LayerKind::MaxPool:
                return max_pool2d(x, l.kernel, l.stride, l.padding);
            case LayerKind::GlobalAvgPool:
                return global_avg_pool(x);
        }
        throw std::logic_error("unknown layer kind");
    }

    ModelPlan plan_;
    std::vector<std::vector<Slot>> slots_;
    std::vector<ParamEntry<T>> params_;
    std::vector<BufferEntry<T>> buffers_;
};

/// Per-activation-layer output means and their uniform average.
struct ActivationStats {
    std::vector<std::pair<std::string, double>> layer_means;
    double global_mean = 0.0;
};

template <typename T>
ActivationStats mean_activation_stat(Model<T>& model, const Tensor<T>& batch) {
    ActivationStats stats;
    NoGradGuard no_grad;
    model.forward(batch, NormMode::Eval, [&](const std::string& name, const Tensor<T>& out) {
        double acc = 0.0;
        for (T v : out.data()) acc += static_cast<double>(v);
        stats.layer_means.emplace_back(name, acc / static_cast<double>(out.numel()));
    });
    double total = 0.0;
    for (const auto& [name, m] : stats.layer_means) total += m;
    if (!stats.layer_means.empty()) stats.global_mean = total / static_cast<double>(stats.layer_means.size());
    return stats;
}

}  // namespace fedconv
