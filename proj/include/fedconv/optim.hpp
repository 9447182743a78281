#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedconv/model.hpp"

namespace fedconv {

struct LrSchedule {
    double base_lr = 1.75e-4;
    double warmup_epochs = 5;
    double total_epochs = 100;
};

/// Linear warmup from 0 to base_lr, then cosine decay to 0 at total_epochs.
inline double lr_at(const LrSchedule& s, std::int64_t global_step, std::int64_t steps_per_epoch) {
    const double step = static_cast<double>(global_step);
    const double spe = static_cast<double>(steps_per_epoch);
    const double warmup = s.warmup_epochs * spe;
    const double total = s.total_epochs * spe;
    if (warmup > 0 && step < warmup) return s.base_lr * step / warmup;
    if (total <= warmup) return s.base_lr;
    const double progress = std::min(1.0, (step - warmup) / (total - warmup));
    return 0.5 * s.base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

template <typename T>
struct AdamWState {
    AdamWHyper hyper;
    std::vector<Tensor<T>> m, v;
    std::int64_t step = 0;
};

struct SgdHyper {
    double momentum = 0.0;
};

template <typename T>
struct SgdState {
    SgdHyper hyper;
    std::vector<Tensor<T>> momentum_buffer;
    std::int64_t step = 0;
};

namespace detail {
template <typename T>
void require_grads(const std::vector<ParamEntry<T>>& params) {
    for (const auto& p : params) {
        if (!p.var.has_grad()) throw std::logic_error("missing gradient for parameter '" + p.name + "'");
    }
}
template <typename T>
void ensure_slots(std::vector<Tensor<T>>& slots, const std::vector<ParamEntry<T>>& params) {
    if (slots.empty()) {
        for (const auto& p : params) slots.emplace_back(p.var.shape());
    }
    if (slots.size() != params.size()) throw std::logic_error("optimizer state does not match parameter list");
}
}  // namespace detail

/// Decoupled weight decay, then the bias-corrected Adam update.
template <typename T>
void adamw_step(AdamWState<T>& state, std::vector<ParamEntry<T>>& params, double lr) {
    detail::require_grads(params);
    detail::ensure_slots(state.m, params);
    detail::ensure_slots(state.v, params);
    ++state.step;
    const auto& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    const T decay = static_cast<T>(1.0 - lr * h.weight_decay);
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].var.mutable_value().data();
        auto g = params[i].var.grad().data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            const double mhat = static_cast<double>(m[j]) / bc1;
            const double vhat = static_cast<double>(v[j]) / bc2;
            w[j] = w[j] * decay - static_cast<T>(lr * mhat / (std::sqrt(vhat) + h.eps));
        }
    }
}

/// buf <- momentum * buf + g; w <- w - lr * buf (plain gradient step when momentum is 0).
template <typename T>
void sgd_step(SgdState<T>& state, std::vector<ParamEntry<T>>& params, double lr) {
    detail::require_grads(params);
    ++state.step;
    const T lr_t = static_cast<T>(lr);
    if (state.hyper.momentum == 0.0) {
        for (auto& p : params) {
            auto w = p.var.mutable_value().data();
            auto g = p.var.grad().data();
            for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr_t * g[j];
        }
        return;
    }
    detail::ensure_slots(state.momentum_buffer, params);
    const T mu = static_cast<T>(state.hyper.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].var.mutable_value().data();
        auto g = params[i].var.grad().data();
        auto b = state.momentum_buffer[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            b[j] = mu * b[j] + g[j];
            w[j] -= lr_t * b[j];
        }
    }
}

enum class OptimizerKind { AdamW, SGD };

template <typename T>
using OptimizerState = std::variant<AdamWState<T>, SgdState<T>>;

template <typename T>
void optimizer_step(OptimizerState<T>& state, std::vector<ParamEntry<T>>& params, double lr) {
    std::visit(
        [&](auto& s) {
            if constexpr (std::is_same_v<std::decay_t<decltype(s)>, AdamWState<T>>) {
                adamw_step(s, params, lr);
            } else {
                sgd_step(s, params, lr);
            }
        },
        state);
}

template <typename T>
std::int64_t optimizer_steps(const OptimizerState<T>& state) {
    return std::visit([](const auto& s) { return s.step; }, state);
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::AdamW;
    LrSchedule schedule;
    AdamWHyper adamw;
    SgdHyper sgd;
};

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd"; }

inline std::optional<OptimizerKind> parse_optimizer_kind(std::string_view s) {
    if (s == "adamw") return OptimizerKind::AdamW;
    if (s == "sgd") return OptimizerKind::SGD;
    return std::nullopt;
}

/// Fresh optimizer state; moment slots are allocated on the first step.
template <typename T>
OptimizerState<T> make_optimizer(const OptimizerConfig& cfg) {
    if (cfg.kind == OptimizerKind::AdamW) return AdamWState<T>{cfg.adamw, {}, {}, 0};
    return SgdState<T>{cfg.sgd, {}, 0};
}

// --- adaptive gradient clipping ---------------------------------------------

struct AGCConfig {
    double clipping = 0.01;
    double eps = 1e-3;
};

namespace detail {
// Units: rows of the leading dimension for rank >= 2, whole tensor otherwise.
inline std::size_t agc_units(const Shape& s) { return s.size() >= 2 ? s[0] : 1; }
}  // namespace detail

/// Unit-wise clipping of one gradient against its parameter.
template <typename T>
void agc_clip_tensor(const Tensor<T>& weight, Tensor<T>& grad, const AGCConfig& cfg) {
    const std::size_t units = detail::agc_units(weight.shape());
    const std::size_t unit_size = weight.numel() / units;
    // Slack keeps the rule bitwise idempotent: a unit rescaled to ratio
    // lambda (up to rounding) is not touched again.
    const double slack = cfg.clipping * 1024.0 * std::numeric_limits<T>::epsilon();
    for (std::size_t u = 0; u < units; ++u) {
        double wn = 0.0, gn = 0.0;
        for (std::size_t j = u * unit_size; j < (u + 1) * unit_size; ++j) {
            wn += static_cast<double>(weight[j]) * static_cast<double>(weight[j]);
            gn += static_cast<double>(grad[j]) * static_cast<double>(grad[j]);
        }
        const double denom = std::max(std::sqrt(wn), cfg.eps);
        const double gnorm = std::sqrt(gn);
        if (gnorm / denom > cfg.clipping + slack) {
            const double factor = cfg.clipping * denom / gnorm;
            for (std::size_t j = u * unit_size; j < (u + 1) * unit_size; ++j) {
                grad[j] = static_cast<T>(static_cast<double>(grad[j]) * factor);
            }
        }
    }
}

/// Clips every parameter gradient except those selected by `exclude`.
template <typename T>
void agc_clip(std::vector<ParamEntry<T>>& params, const AGCConfig& cfg,
              const std::function<bool(const std::string&)>& exclude = [](const std::string& n) { return is_head_entry(n); }) {
    for (auto& p : params) {
        if (exclude && exclude(p.name)) continue;
        agc_clip_tensor(p.var.value(), p.var.mutable_grad(), cfg);
    }
}

/// Largest unit ratio ||g|| / max(||w||, eps) over a tensor.
template <typename T>
double agc_max_ratio(const Tensor<T>& weight, const Tensor<T>& grad, double eps) {
    const std::size_t units = detail::agc_units(weight.shape());
    const std::size_t unit_size = weight.numel() / units;
    double worst = 0.0;
    for (std::size_t u = 0; u < units; ++u) {
        double wn = 0.0, gn = 0.0;
        for (std::size_t j = u * unit_size; j < (u + 1) * unit_size; ++j) {
            wn += static_cast<double>(weight[j]) * static_cast<double>(weight[j]);
            gn += static_cast<double>(grad[j]) * static_cast<double>(grad[j]);
        }
        worst = std::max(worst, std::sqrt(gn) / std::max(std::sqrt(wn), eps));
    }
    return worst;
}

}  // namespace fedconv
