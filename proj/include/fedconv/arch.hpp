#pragma once

// Declarative CNN description: stems, block instantiations, activation and
// normalization placement, plus parameter/MAC accounting on the layer plan.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fedconv/ops.hpp"

namespace fedconv {

enum class BlockKind { Normal, Invert, InvertUp };
enum class ActPlacement { All, Act1, Act2, Act3 };
enum class NormPlacement { All, Norm1, Norm2, Norm3, NoNorm };
enum class StemKind { ResNetStem, SwinStem, ConvStem, SwinStemK5, ResNetStemNoPool };
enum class NormKind { LayerNormC, BatchNorm, None };

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// --- enum <-> string -------------------------------------------------------

namespace detail {
template <typename E, std::size_t N>
std::optional<E> lookup(const std::array<std::pair<std::string_view, E>, N>& table, std::string_view s) {
    for (const auto& [name, value] : table)
        if (name == s) return value;
    return std::nullopt;
}
template <typename E, std::size_t N>
std::string_view reverse_lookup(const std::array<std::pair<std::string_view, E>, N>& table, E e) {
    for (const auto& [name, value] : table)
        if (value == e) return name;
    return "?";
}

inline constexpr std::array<std::pair<std::string_view, BlockKind>, 3> kBlockNames{{
    {"normal", BlockKind::Normal}, {"invert", BlockKind::Invert}, {"invert_up", BlockKind::InvertUp}}};
inline constexpr std::array<std::pair<std::string_view, ActPlacement>, 4> kActPlacementNames{{
    {"all", ActPlacement::All}, {"act1", ActPlacement::Act1}, {"act2", ActPlacement::Act2}, {"act3", ActPlacement::Act3}}};
inline constexpr std::array<std::pair<std::string_view, NormPlacement>, 5> kNormPlacementNames{{
    {"all", NormPlacement::All}, {"norm1", NormPlacement::Norm1}, {"norm2", NormPlacement::Norm2},
    {"norm3", NormPlacement::Norm3}, {"no_norm", NormPlacement::NoNorm}}};
inline constexpr std::array<std::pair<std::string_view, StemKind>, 5> kStemNames{{
    {"resnet_stem", StemKind::ResNetStem}, {"swin_stem", StemKind::SwinStem}, {"conv_stem", StemKind::ConvStem},
    {"swin_stem_k5", StemKind::SwinStemK5}, {"resnet_stem_no_pool", StemKind::ResNetStemNoPool}}};
inline constexpr std::array<std::pair<std::string_view, NormKind>, 3> kNormKindNames{{
    {"ln_c", NormKind::LayerNormC}, {"bn", NormKind::BatchNorm}, {"none", NormKind::None}}};
inline constexpr std::array<std::pair<std::string_view, Activation>, 7> kActivationNames{{
    {"relu", Activation::ReLU}, {"lrelu", Activation::LReLU}, {"prelu", Activation::PReLU},
    {"softplus", Activation::SoftPlus}, {"gelu", Activation::GELU}, {"silu", Activation::SiLU},
    {"elu", Activation::ELU}}};
}  // namespace detail

inline std::string_view to_string(BlockKind v) { return detail::reverse_lookup(detail::kBlockNames, v); }
inline std::string_view to_string(ActPlacement v) { return detail::reverse_lookup(detail::kActPlacementNames, v); }
inline std::string_view to_string(NormPlacement v) { return detail::reverse_lookup(detail::kNormPlacementNames, v); }
inline std::string_view to_string(StemKind v) { return detail::reverse_lookup(detail::kStemNames, v); }
inline std::string_view to_string(NormKind v) { return detail::reverse_lookup(detail::kNormKindNames, v); }
inline std::string_view to_string(Activation v) { return detail::reverse_lookup(detail::kActivationNames, v); }

inline std::optional<BlockKind> parse_block_kind(std::string_view s) { return detail::lookup(detail::kBlockNames, s); }
inline std::optional<ActPlacement> parse_act_placement(std::string_view s) { return detail::lookup(detail::kActPlacementNames, s); }
inline std::optional<NormPlacement> parse_norm_placement(std::string_view s) { return detail::lookup(detail::kNormPlacementNames, s); }
inline std::optional<StemKind> parse_stem_kind(std::string_view s) { return detail::lookup(detail::kStemNames, s); }
inline std::optional<NormKind> parse_norm_kind(std::string_view s) { return detail::lookup(detail::kNormKindNames, s); }
inline std::optional<Activation> parse_activation(std::string_view s) { return detail::lookup(detail::kActivationNames, s); }

/// ActX from a convolution index; 0 means All.
inline ActPlacement act_placement_from_index(int index) {
    switch (index) {
        case 0: return ActPlacement::All;
        case 1: return ActPlacement::Act1;
        case 2: return ActPlacement::Act2;
        case 3: return ActPlacement::Act3;
        default: throw ConfigError("activation placement index " + std::to_string(index) + " exceeds 3");
    }
}

// --- configuration ---------------------------------------------------------

struct ArchConfig {
    StemKind stem = StemKind::ConvStem;
    BlockKind block = BlockKind::InvertUp;
    std::array<std::size_t, 4> channels{96, 192, 384, 768};
    std::array<std::size_t, 4> depths{3, 3, 9, 3};
    std::size_t kernel_size = 9;
    Activation activation = Activation::SiLU;
    ActPlacement act_placement = ActPlacement::Act2;
    NormPlacement norm_placement = NormPlacement::NoNorm;
    NormKind norm_kind = NormKind::None;
    std::size_t num_classes = 1000;
    std::size_t input_resolution = 224;

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

inline constexpr std::size_t kInputChannels = 3;
inline constexpr std::array<std::size_t, 4> kBaseDepthRatio{1, 1, 3, 1};

/// Single-activation position that follows the channel-expanding convolution.
inline ActPlacement expanding_act_placement(BlockKind kind) {
    switch (kind) {
        case BlockKind::Normal: return ActPlacement::Act3;
        case BlockKind::Invert: return ActPlacement::Act1;
        case BlockKind::InvertUp: return ActPlacement::Act2;
    }
    return ActPlacement::All;
}

/// SiLU, one activation per block, no normalization, ConvStem, kernel 9.
inline ArchConfig fedconv_config(BlockKind kind) {
    ArchConfig c;
    c.stem = StemKind::ConvStem;
    c.block = kind;
    c.kernel_size = 9;
    c.activation = Activation::SiLU;
    c.act_placement = expanding_act_placement(kind);
    c.norm_placement = NormPlacement::NoNorm;
    c.norm_kind = NormKind::None;
    return c;
}

/// Depth-wise ResNet bottleneck with LN-C and GELU.
inline ArchConfig resnet_m_config() {
    ArchConfig c;
    c.stem = StemKind::ResNetStem;
    c.block = BlockKind::Normal;
    c.kernel_size = 3;
    c.activation = Activation::GELU;
    c.act_placement = ActPlacement::All;
    c.norm_placement = NormPlacement::All;
    c.norm_kind = NormKind::LayerNormC;
    return c;
}

/// Violations as "field: reason" strings; empty when valid.
inline std::vector<std::string> validate(const ArchConfig& c) {
    std::vector<std::string> errors;
    if (c.kernel_size < 3 || c.kernel_size % 2 == 0) errors.push_back("kernel_size: must be odd and >= 3");
    for (std::size_t i = 0; i < 4; ++i) {
        if (c.depths[i] < 1) errors.push_back("depths[" + std::to_string(i) + "]: must be >= 1");
        if (c.channels[i] < 1) errors.push_back("channels[" + std::to_string(i) + "]: must be >= 1");
        if (c.block == BlockKind::Normal && c.channels[i] % 4 != 0)
            errors.push_back("channels[" + std::to_string(i) + "]: normal block requires a multiple of 4");
    }
    if (c.stem == StemKind::ConvStem && c.channels[0] % 2 != 0)
        errors.push_back("channels[0]: conv_stem requires an even width");
    if (c.norm_kind == NormKind::None && c.norm_placement != NormPlacement::NoNorm)
        errors.push_back("norm_placement: norm_kind none requires no_norm");
    if (c.num_classes < 1) errors.push_back("num_classes: must be >= 1");
    if (c.input_resolution == 0 || c.input_resolution % 32 != 0)
        errors.push_back("input_resolution: must be a positive multiple of 32");
    return errors;
}

inline void require_valid(const ArchConfig& c) {
    const auto errors = validate(c);
    if (!errors.empty()) {
        std::string msg = "invalid architecture: ";
        for (std::size_t i = 0; i < errors.size(); ++i) msg += (i ? "; " : "") + errors[i];
        throw ConfigError(msg);
    }
}

// --- layer plan ------------------------------------------------------------

enum class LayerKind { Conv, Norm, Act, MaxPool, GlobalAvgPool, Linear };

struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    std::string name;
    std::size_t in_channels = 0, out_channels = 0;
    std::size_t in_h = 1, in_w = 1, out_h = 1, out_w = 1;
    std::size_t kernel = 1, stride = 1, padding = 0, groups = 1;
    NormKind norm = NormKind::None;
    Activation act = Activation::ReLU;
};

enum class UnitRole { Stem, Block, Downsample, Head };

struct UnitSpec {
    UnitRole role = UnitRole::Block;
    std::string name;
    bool residual = false;
    std::vector<LayerSpec> layers;
};

struct ModelPlan {
    ArchConfig config;
    std::vector<UnitSpec> units;
};

namespace detail {

class UnitBuilder {
public:
    UnitBuilder(UnitRole role, std::string name, std::size_t c, std::size_t h, std::size_t w)
        : c_(c), h_(h), w_(w) {
        unit_.role = role;
        unit_.name = std::move(name);
    }

    void conv(const std::string& name, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad,
              std::size_t groups = 1) {
        LayerSpec l;
        l.kind = LayerKind::Conv;
        l.name = name;
        l.in_channels = c_;
        l.out_channels = out;
        l.in_h = h_;
        l.in_w = w_;
        l.kernel = k;
        l.stride = stride;
        l.padding = pad;
        l.groups = groups;
        l.out_h = conv_output_size(h_, k, stride, pad);
        l.out_w = conv_output_size(w_, k, stride, pad);
        push(std::move(l));
    }

    void norm(NormKind kind, const std::string& suffix) {
        if (kind == NormKind::None) return;
        LayerSpec l = same_shape(LayerKind::Norm, (kind == NormKind::BatchNorm ? "bn" : "ln") + suffix);
        l.norm = kind;
        push(std::move(l));
    }

    void act(Activation a, const std::string& suffix) {
        LayerSpec l = same_shape(LayerKind::Act, "act" + suffix);
        l.act = a;
        push(std::move(l));
    }

    void max_pool(std::size_t k, std::size_t stride, std::size_t pad) {
        LayerSpec l = same_shape(LayerKind::MaxPool, "pool");
        l.kernel = k;
        l.stride = stride;
        l.padding = pad;
        l.out_h = conv_output_size(h_, k, stride, pad);
        l.out_w = conv_output_size(w_, k, stride, pad);
        push(std::move(l));
    }

    void global_pool() {
        LayerSpec l = same_shape(LayerKind::GlobalAvgPool, "pool");
        l.out_h = l.out_w = 1;
        push(std::move(l));
    }

    void linear(const std::string& name, std::size_t out) {
        LayerSpec l = same_shape(LayerKind::Linear, name);
        l.out_channels = out;
        push(std::move(l));
    }

    void set_residual() { unit_.residual = true; }
    std::size_t channels() const { return c_; }
    std::size_t height() const { return h_; }
    std::size_t width() const { return w_; }
    UnitSpec take() { return std::move(unit_); }

private:
    LayerSpec same_shape(LayerKind kind, std::string name) const {
        LayerSpec l;
        l.kind = kind;
        l.name = std::move(name);
        l.in_channels = l.out_channels = c_;
        l.in_h = l.out_h = h_;
        l.in_w = l.out_w = w_;
        return l;
    }
    void push(LayerSpec l) {
        c_ = l.out_channels;
        h_ = l.out_h;
        w_ = l.out_w;
        unit_.layers.push_back(std::move(l));
    }

    UnitSpec unit_;
    std::size_t c_, h_, w_;
};

inline bool keeps_act(ActPlacement p, int conv_index) {
    return p == ActPlacement::All || static_cast<int>(p) == conv_index;
}
inline bool keeps_norm(NormPlacement p, int conv_index) {
    return p == NormPlacement::All || (p != NormPlacement::NoNorm && static_cast<int>(p) == conv_index);
}

}  // namespace detail

struct BlockOptions {
    std::size_t kernel_size = 9;
    Activation activation = Activation::SiLU;
    ActPlacement act_placement = ActPlacement::Act2;
    NormPlacement norm_placement = NormPlacement::NoNorm;
    NormKind norm_kind = NormKind::None;
};

/// Residual block at constant width. Conv order per kind:
///   Normal:   1x1 w->w/4, kxk depth-wise, 1x1 w/4->w
///   Invert:   1x1 w->4w,  kxk depth-wise, 1x1 4w->w
///   InvertUp: kxk depth-wise, 1x1 w->4w,  1x1 4w->w
/// After conv X: the normalizer (if kept), then the activation (if kept).
inline UnitSpec build_block(BlockKind kind, std::size_t width, const BlockOptions& opt, std::string name = "block",
                            std::size_t height = 1, std::size_t spatial_width = 1) {
    if (kind == BlockKind::Normal && width % 4 != 0) {
        throw ConfigError("normal block width " + std::to_string(width) + " is not divisible by 4");
    }
    const std::size_t k = opt.kernel_size;
    const std::size_t pad = k / 2;
    detail::UnitBuilder b(UnitRole::Block, std::move(name), width, height, spatial_width);
    auto finish_conv = [&](int index) {
        const std::string suffix = std::to_string(index);
        if (opt.norm_kind != NormKind::None && detail::keeps_norm(opt.norm_placement, index)) b.norm(opt.norm_kind, suffix);
        if (detail::keeps_act(opt.act_placement, index)) b.act(opt.activation, suffix);
    };
    switch (kind) {
        case BlockKind::Normal:
            b.conv("conv1", width / 4, 1, 1, 0);
            finish_conv(1);
            b.conv("conv2", width / 4, k, 1, pad, width / 4);
            finish_conv(2);
            b.conv("conv3", width, 1, 1, 0);
            finish_conv(3);
            break;
        case BlockKind::Invert:
            b.conv("conv1", 4 * width, 1, 1, 0);
            finish_conv(1);
            b.conv("conv2", 4 * width, k, 1, pad, 4 * width);
            finish_conv(2);
            b.conv("conv3", width, 1, 1, 0);
            finish_conv(3);
            break;
        case BlockKind::InvertUp:
            b.conv("conv1", width, k, 1, pad, width);
            finish_conv(1);
            b.conv("conv2", 4 * width, 1, 1, 0);
            finish_conv(2);
            b.conv("conv3", width, 1, 1, 0);
            finish_conv(3);
            break;
    }
    b.set_residual();
    return b.take();
}

/// Stem mapping 3 input channels to `out_width` at 1/4 resolution.
inline UnitSpec build_stem(StemKind kind, std::size_t out_width, Activation act, NormKind norm,
                           std::size_t resolution) {
    detail::UnitBuilder b(UnitRole::Stem, "stem", kInputChannels, resolution, resolution);
    switch (kind) {
        case StemKind::ResNetStem:
            b.conv("conv1", out_width, 7, 2, 3);
            b.norm(norm, "1");
            b.act(act, "1");
            b.max_pool(3, 2, 1);
            break;
        case StemKind::ResNetStemNoPool:
            b.conv("conv1", out_width, 7, 4, 3);
            b.norm(norm, "1");
            b.act(act, "1");
            break;
        case StemKind::SwinStem:
            b.conv("conv1", out_width, 4, 4, 0);
            b.norm(norm, "1");
            break;
        case StemKind::SwinStemK5:
            b.conv("conv1", out_width, 5, 4, 2);
            b.norm(norm, "1");
            break;
        case StemKind::ConvStem:
            if (out_width % 2 != 0) throw ConfigError("conv_stem width must be even");
            b.conv("conv1", out_width / 2, 3, 2, 1);
            b.norm(norm, "1");
            b.act(act, "1");
            b.conv("conv2", out_width, 3, 2, 1);
            b.norm(norm, "2");
            break;
    }
    return b.take();
}

/// Full layer plan: stem, four stages separated by 2x2 stride-2 convolutions,
/// global average pooling, optional final normalizer, linear classifier.
inline ModelPlan plan_model(const ArchConfig& config) {
    require_valid(config);
    ModelPlan plan;
    plan.config = config;
    plan.units.push_back(build_stem(config.stem, config.channels[0], config.activation, config.norm_kind,
                                    config.input_resolution));
    std::size_t h = plan.units.back().layers.back().out_h;
    std::size_t w = plan.units.back().layers.back().out_w;
    const BlockOptions opt{config.kernel_size, config.activation, config.act_placement, config.norm_placement,
                           config.norm_kind};
    for (std::size_t s = 0; s < 4; ++s) {
        const std::string stage = "stages." + std::to_string(s);
        if (s > 0) {
            detail::UnitBuilder d(UnitRole::Downsample, stage + ".down", config.channels[s - 1], h, w);
            d.norm(config.norm_kind, "");
            d.conv("conv", config.channels[s], 2, 2, 0);
            h = d.height();
            w = d.width();
            plan.units.push_back(d.take());
        }
        for (std::size_t i = 0; i < config.depths[s]; ++i) {
            plan.units.push_back(build_block(config.block, config.channels[s], opt,
                                             stage + ".blocks." + std::to_string(i), h, w));
        }
    }
    detail::UnitBuilder head(UnitRole::Head, "head", config.channels[3], h, w);
    head.global_pool();
    head.norm(config.norm_kind, "");
    head.linear("fc", config.num_classes);
    plan.units.push_back(head.take());
    return plan;
}

// --- accounting ------------------------------------------------------------

/// Trainable parameters of one layer (normalizer running statistics excluded).
inline std::int64_t layer_params(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::Conv:
            return static_cast<std::int64_t>(l.out_channels * (l.in_channels / l.groups) * l.kernel * l.kernel +
                                             l.out_channels);
        case LayerKind::Linear:
            return static_cast<std::int64_t>(l.in_channels * l.out_channels + l.out_channels);
        case LayerKind::Norm:
            return static_cast<std::int64_t>(2 * l.out_channels);
        case LayerKind::Act:
            return l.act == Activation::PReLU ? static_cast<std::int64_t>(l.out_channels) : 0;
        default:
            return 0;
    }
}

/// Multiply-accumulates of one layer for a single image.
inline std::int64_t layer_macs(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::Conv:
            return static_cast<std::int64_t>(l.out_channels * l.out_h * l.out_w * (l.in_channels / l.groups) *
                                             l.kernel * l.kernel);
        case LayerKind::Linear:
            return static_cast<std::int64_t>(l.in_channels * l.out_channels);
        default:
            return 0;
    }
}

inline std::int64_t count_params(const UnitSpec& unit) {
    std::int64_t total = 0;
    for (const auto& l : unit.layers) total += layer_params(l);
    return total;
}

inline std::int64_t count_params(const ModelPlan& plan) {
    std::int64_t total = 0;
    for (const auto& u : plan.units) total += count_params(u);
    return total;
}

inline std::int64_t count_flops(const ModelPlan& plan) {
    std::int64_t total = 0;
    for (const auto& u : plan.units)
        for (const auto& l : u.layers) total += layer_macs(l);
    return total;
}

inline std::int64_t count_params(const ArchConfig& c) { return count_params(plan_model(c)); }
/// One FLOP is one multiply-accumulate over conv and linear layers.
inline std::int64_t count_flops(const ArchConfig& c) { return count_flops(plan_model(c)); }

/// Smallest multiple m * (1,1,3,1), m in [1, max_multiplier], whose FLOPs lie
/// within `tolerance` (relative) of `target_flops`.
inline std::array<std::size_t, 4> calibrate_depths(const ArchConfig& config, double target_flops, double tolerance,
                                                   std::size_t max_multiplier = 8) {
    if (target_flops <= 0) throw ConfigError("calibration target must be positive");
    ArchConfig c = config;
    for (std::size_t m = 1; m <= max_multiplier; ++m) {
        for (std::size_t s = 0; s < 4; ++s) c.depths[s] = m * kBaseDepthRatio[s];
        const double flops = static_cast<double>(count_flops(c));
        if (std::abs(flops - target_flops) <= tolerance * target_flops) return c.depths;
    }
    throw ConfigError("no depth multiplier in [1," + std::to_string(max_multiplier) + "] reaches " +
                      std::to_string(target_flops) + " FLOPs within tolerance " + std::to_string(tolerance));
}

}  // namespace fedconv
