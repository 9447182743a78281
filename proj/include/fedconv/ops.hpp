#pragma once

// Differentiable tensor operations used by the CNN builder.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fedconv/autodiff.hpp"

namespace fedconv {

template <typename T>
using NodeList = std::vector<std::shared_ptr<Node<T>>>;

// ---------------------------------------------------------------------------
// Elementwise structure
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> out = a.value();
    auto od = out.data();
    auto bd = b.value().data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
    return make_result<T>("add", std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node<T>& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            auto g = in->grad.data();
            auto sg = self.grad.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sg[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v *= factor;
    return make_result<T>("scale", std::move(out), {a.node_ptr()}, [factor](Node<T>& self) {
        auto g = self.inputs[0]->grad.data();
        auto sg = self.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * sg[i];
    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T acc = 0;
    for (T v : a.value().data()) acc += v;
    return make_result<T>("sum", Tensor<T>({1}, std::vector<T>{acc}), {a.node_ptr()}, [](Node<T>& self) {
        const T sg = self.grad[0];
        for (auto& g : self.inputs[0]->grad.data()) g += sg;
    });
}

/// Sum of elementwise product with a constant tensor; turns any output into a
/// scalar with a non-trivial gradient.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& weights) {
    if (a.shape() != weights.shape()) {
        throw ShapeError("weighted_sum: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(weights.shape()));
    }
    T acc = 0;
    auto ad = a.value().data();
    auto wd = weights.data();
    for (std::size_t i = 0; i < ad.size(); ++i) acc += ad[i] * wd[i];
    return make_result<T>("weighted_sum", Tensor<T>({1}, std::vector<T>{acc}), {a.node_ptr()},
                          [weights](Node<T>& self) {
                              const T sg = self.grad[0];
                              auto g = self.inputs[0]->grad.data();
                              auto wd = weights.data();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += sg * wd[i];
                          });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
};

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                    std::size_t padding) {
    if (kernel == 0 || stride == 0) throw ShapeError("kernel and stride must be >= 1");
    if (in + 2 * padding < kernel) {
        throw ShapeError("kernel " + std::to_string(kernel) + " larger than padded input " +
                         std::to_string(in + 2 * padding));
    }
    return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

// Output columns ox such that ix = ox*stride + kx - pad lies in [0, width).
inline void valid_range(std::ptrdiff_t width, std::ptrdiff_t out_width, std::ptrdiff_t stride,
                        std::ptrdiff_t offset, std::ptrdiff_t& lo, std::ptrdiff_t& hi) {
    // offset = kx - pad
    lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
    const std::ptrdiff_t last = width - 1 - offset;
    hi = last < 0 ? 0 : std::min(out_width, last / stride + 1);
    if (hi < lo) hi = lo;
}

struct ConvGeometry {
    std::ptrdiff_t n, cin, h, w, cout, k, ho, wo, stride, pad, groups, cin_g, cout_g;
};

template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* wt, const T* bias, T* y) {
    const std::ptrdiff_t in_plane = g.h * g.w;
    const std::ptrdiff_t out_plane = g.ho * g.wo;
    for (std::ptrdiff_t n = 0; n < g.n; ++n) {
        for (std::ptrdiff_t oc = 0; oc < g.cout; ++oc) {
            const std::ptrdiff_t grp = oc / g.cout_g;
            T* out = y + (n * g.cout + oc) * out_plane;
            const T b = bias ? bias[oc] : T(0);
            for (std::ptrdiff_t i = 0; i < out_plane; ++i) out[i] = b;
            for (std::ptrdiff_t icl = 0; icl < g.cin_g; ++icl) {
                const std::ptrdiff_t ic = grp * g.cin_g + icl;
                const T* in = x + (n * g.cin + ic) * in_plane;
                const T* wk = wt + (oc * g.cin_g + icl) * g.k * g.k;
                for (std::ptrdiff_t ky = 0; ky < g.k; ++ky) {
                    std::ptrdiff_t oy_lo, oy_hi;
                    valid_range(g.h, g.ho, g.stride, ky - g.pad, oy_lo, oy_hi);
                    for (std::ptrdiff_t kx = 0; kx < g.k; ++kx) {
                        const T wv = wk[ky * g.k + kx];
                        std::ptrdiff_t ox_lo, ox_hi;
                        valid_range(g.w, g.wo, g.stride, kx - g.pad, ox_lo, ox_hi);
                        for (std::ptrdiff_t oy = oy_lo; oy < oy_hi; ++oy) {
                            const T* row = in + (oy * g.stride + ky - g.pad) * g.w;
                            T* orow = out + oy * g.wo;
                            const std::ptrdiff_t shift = kx - g.pad;
                            for (std::ptrdiff_t ox = ox_lo; ox < ox_hi; ++ox) {
                                orow[ox] += wv * row[ox * g.stride + shift];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv_backward(const ConvGeometry& g, const T* x, const T* wt, const T* gy, T* gx, T* gw, T* gb) {
    const std::ptrdiff_t in_plane = g.h * g.w;
    const std::ptrdiff_t out_plane = g.ho * g.wo;
    for (std::ptrdiff_t n = 0; n < g.n; ++n) {
        for (std::ptrdiff_t oc = 0; oc < g.cout; ++oc) {
            const std::ptrdiff_t grp = oc / g.cout_g;
            const T* gout = gy + (n * g.cout + oc) * out_plane;
            if (gb) {
                T acc = 0;
                for (std::ptrdiff_t i = 0; i < out_plane; ++i) acc += gout[i];
                gb[oc] += acc;
            }
            for (std::ptrdiff_t icl = 0; icl < g.cin_g; ++icl) {
                const std::ptrdiff_t ic = grp * g.cin_g + icl;
                const T* in = x + (n * g.cin + ic) * in_plane;
                T* gin = gx ? gx + (n * g.cin + ic) * in_plane : nullptr;
                const T* wk = wt + (oc * g.cin_g + icl) * g.k * g.k;
                T* gwk = gw ? gw + (oc * g.cin_g + icl) * g.k * g.k : nullptr;
                for (std::ptrdiff_t ky = 0; ky < g.k; ++ky) {
                    std::ptrdiff_t oy_lo, oy_hi;
                    valid_range(g.h, g.ho, g.stride, ky - g.pad, oy_lo, oy_hi);
                    for (std::ptrdiff_t kx = 0; kx < g.k; ++kx) {
                        const T wv = wk[ky * g.k + kx];
                        std::ptrdiff_t ox_lo, ox_hi;
                        valid_range(g.w, g.wo, g.stride, kx - g.pad, ox_lo, ox_hi);
                        T wacc = 0;
                        for (std::ptrdiff_t oy = oy_lo; oy < oy_hi; ++oy) {
                            const std::ptrdiff_t base = (oy * g.stride + ky - g.pad) * g.w;
                            const std::ptrdiff_t shift = kx - g.pad;
                            const T* grow = gout + oy * g.wo;
                            const T* row = in + base;
                            for (std::ptrdiff_t ox = ox_lo; ox < ox_hi; ++ox) {
                                wacc += row[ox * g.stride + shift] * grow[ox];
                            }
                            if (gin) {
                                T* girow = gin + base;
                                for (std::ptrdiff_t ox = ox_lo; ox < ox_hi; ++ox) {
                                    girow[ox * g.stride + shift] += wv * grow[ox];
                                }
                            }
                        }
                        if (gwk) gwk[ky * g.k + kx] += wacc;
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding and channel groups.
/// input [N,Cin,H,W], weight [Cout,Cin/groups,k,k], bias [Cout] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, Conv2dOptions opt) {
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 4 || ws.size() != 4) {
        throw ShapeError("conv2d: expected rank-4 input and weight, got " + shape_str(xs) + " and " + shape_str(ws));
    }
    if (opt.groups == 0 || xs[1] % opt.groups != 0 || ws[0] % opt.groups != 0) {
        throw ShapeError("conv2d: groups " + std::to_string(opt.groups) + " must divide Cin " +
                         std::to_string(xs[1]) + " and Cout " + std::to_string(ws[0]));
    }
    if (ws[1] != xs[1] / opt.groups || ws[2] != ws[3]) {
        throw ShapeError("conv2d: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs) +
                         " and groups " + std::to_string(opt.groups));
    }
    if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != ws[0])) {
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match Cout");
    }
    const std::size_t ho = conv_output_size(xs[2], ws[2], opt.stride, opt.padding);
    const std::size_t wo = conv_output_size(xs[3], ws[3], opt.stride, opt.padding);

    detail::ConvGeometry g{};
    g.n = static_cast<std::ptrdiff_t>(xs[0]);
    g.cin = static_cast<std::ptrdiff_t>(xs[1]);
    g.h = static_cast<std::ptrdiff_t>(xs[2]);
    g.w = static_cast<std::ptrdiff_t>(xs[3]);
    g.cout = static_cast<std::ptrdiff_t>(ws[0]);
    g.k = static_cast<std::ptrdiff_t>(ws[2]);
    g.ho = static_cast<std::ptrdiff_t>(ho);
    g.wo = static_cast<std::ptrdiff_t>(wo);
    g.stride = static_cast<std::ptrdiff_t>(opt.stride);
    g.pad = static_cast<std::ptrdiff_t>(opt.padding);
    g.groups = static_cast<std::ptrdiff_t>(opt.groups);
    g.cin_g = g.cin / g.groups;
    g.cout_g = g.cout / g.groups;

    Tensor<T> out({xs[0], ws[0], ho, wo});
    detail::conv_forward(g, input.value().data().data(), weight.value().data().data(),
                         bias.defined() ? bias.value().data().data() : nullptr, out.data().data());

    NodeList<T> inputs{input.node_ptr(), weight.node_ptr()};
    if (bias.defined()) inputs.push_back(bias.node_ptr());
    return make_result<T>("conv2d", std::move(out), std::move(inputs), [g](Node<T>& self) {
        auto& x = self.inputs[0];
        auto& w = self.inputs[1];
        T* gb = (self.inputs.size() > 2 && self.inputs[2]->requires_grad) ? self.inputs[2]->grad.data().data() : nullptr;
        detail::conv_backward(g, x->value.data().data(), w->value.data().data(), self.grad.data().data(),
                              x->requires_grad ? x->grad.data().data() : nullptr,
                              w->requires_grad ? w->grad.data().data() : nullptr, gb);
    });
}

/// Affine map: input [N,Cin], weight [Cout,Cin], bias [Cout] or undefined.
template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1]) {
        throw ShapeError("linear: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
    }
    if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != ws[0])) {
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match Cout");
    }
    const std::size_t n = xs[0], cin = xs[1], cout = ws[0];
    Tensor<T> out({n, cout});
    const T* x = input.value().data().data();
    const T* w = weight.value().data().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < cout; ++o) {
            T acc = bias.defined() ? bias.value()[o] : T(0);
            for (std::size_t c = 0; c < cin; ++c) acc += x[i * cin + c] * w[o * cin + c];
            out[i * cout + o] = acc;
        }
    }
    NodeList<T> inputs{input.node_ptr(), weight.node_ptr()};
    if (bias.defined()) inputs.push_back(bias.node_ptr());
    return make_result<T>("linear", std::move(out), std::move(inputs), [n, cin, cout](Node<T>& self) {
        auto& xi = self.inputs[0];
        auto& wi = self.inputs[1];
        const T* gy = self.grad.data().data();
        const T* x = xi->value.data().data();
        const T* w = wi->value.data().data();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t o = 0; o < cout; ++o) {
                const T g = gy[i * cout + o];
                if (xi->requires_grad) {
                    T* gx = xi->grad.data().data() + i * cin;
                    for (std::size_t c = 0; c < cin; ++c) gx[c] += g * w[o * cin + c];
                }
                if (wi->requires_grad) {
                    T* gw = wi->grad.data().data() + o * cin;
                    for (std::size_t c = 0; c < cin; ++c) gw[c] += g * x[i * cin + c];
                }
            }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            T* gb = self.inputs[2]->grad.data().data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t o = 0; o < cout; ++o) gb[o] += gy[i * cout + o];
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Max pooling with implicit -inf padding. Ties resolve to the lowest input index.
template <typename T>
Var<T> max_pool2d(const Var<T>& input, std::size_t kernel, std::size_t stride, std::size_t padding = 0) {
    const Shape& xs = input.shape();
    if (xs.size() != 4) throw ShapeError("max_pool2d: expected rank-4 input, got " + shape_str(xs));
    if (padding >= kernel && kernel > 0) throw ShapeError("max_pool2d: padding must be smaller than kernel");
    const std::size_t ho = conv_output_size(xs[2], kernel, stride, padding);
    const std::size_t wo = conv_output_size(xs[3], kernel, stride, padding);
    const std::size_t planes = xs[0] * xs[1];
    const auto h = static_cast<std::ptrdiff_t>(xs[2]);
    const auto w = static_cast<std::ptrdiff_t>(xs[3]);
    Tensor<T> out({xs[0], xs[1], ho, wo});
    std::vector<std::size_t> argmax(out.numel());
    const T* x = input.value().data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_idx = 0;
                bool found = false;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= h) continue;
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= w) continue;
                        const std::size_t idx = p * xs[2] * xs[3] + static_cast<std::size_t>(iy * w + ix);
                        if (!found || x[idx] > best) {
                            best = x[idx];
                            best_idx = idx;
                            found = true;
                        }
                    }
                }
                const std::size_t o = (p * ho + oy) * wo + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    return make_result<T>("max_pool2d", std::move(out), {input.node_ptr()},
                          [argmax = std::move(argmax)](Node<T>& self) {
                              T* gx = self.inputs[0]->grad.data().data();
                              const T* gy = self.grad.data().data();
                              for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += gy[o];
                          });
}

/// [N,C,H,W] -> [N,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& input) {
    const Shape& xs = input.shape();
    if (xs.size() != 4) throw ShapeError("global_avg_pool: expected rank-4 input, got " + shape_str(xs));
    const std::size_t planes = xs[0] * xs[1];
    const std::size_t area = xs[2] * xs[3];
    Tensor<T> out({xs[0], xs[1]});
    const T* x = input.value().data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        T acc = 0;
        for (std::size_t i = 0; i < area; ++i) acc += x[p * area + i];
        out[p] = acc / static_cast<T>(area);
    }
    return make_result<T>("global_avg_pool", std::move(out), {input.node_ptr()}, [planes, area](Node<T>& self) {
        T* gx = self.inputs[0]->grad.data().data();
        const T inv = T(1) / static_cast<T>(area);
        for (std::size_t p = 0; p < planes; ++p) {
            const T g = self.grad[p] * inv;
            for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization. Inputs are [N,C] or [N,C,H,W], viewed as [N,C,S].
// ---------------------------------------------------------------------------

namespace detail {
struct NcsView {
    std::size_t n, c, s;
};
inline NcsView ncs_view(const Shape& xs, const char* op) {
    if (xs.size() == 2) return {xs[0], xs[1], 1};
    if (xs.size() == 4) return {xs[0], xs[1], xs[2] * xs[3]};
    throw ShapeError(std::string(op) + ": expected rank 2 or 4 input, got " + shape_str(xs));
}
}  // namespace detail

/// Layer normalization across channels, independently at each (n, position).
template <typename T>
Var<T> layer_norm_c(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, T eps) {
    const auto v = detail::ncs_view(input.shape(), "layer_norm_c");
    if (v.c == 0) throw ShapeError("layer_norm_c: zero channels");
    if (gamma.shape() != Shape{v.c} || beta.shape() != Shape{v.c}) {
        throw ShapeError("layer_norm_c: affine parameters must have shape [" + std::to_string(v.c) + "]");
    }
    Tensor<T> out(input.shape());
    Tensor<T> xhat(input.shape());
    std::vector<T> inv_std(v.n * v.s);
    const T* x = input.value().data().data();
    const T* ga = gamma.value().data().data();
    const T* be = beta.value().data().data();
    for (std::size_t n = 0; n < v.n; ++n) {
        for (std::size_t s = 0; s < v.s; ++s) {
            const std::size_t base = n * v.c * v.s + s;
            T mean = 0;
            for (std::size_t c = 0; c < v.c; ++c) mean += x[base + c * v.s];
            mean /= static_cast<T>(v.c);
            T var = 0;
            for (std::size_t c = 0; c < v.c; ++c) {
                const T d = x[base + c * v.s] - mean;
                var += d * d;
            }
            var /= static_cast<T>(v.c);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[n * v.s + s] = is;
            for (std::size_t c = 0; c < v.c; ++c) {
                const std::size_t i = base + c * v.s;
                xhat[i] = (x[i] - mean) * is;
                out[i] = ga[c] * xhat[i] + be[c];
            }
        }
    }
    return make_result<T>(
        "layer_norm_c", std::move(out), {input.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
        [v, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            auto& xi = self.inputs[0];
            auto& gi = self.inputs[1];
            auto& bi = self.inputs[2];
            const T* gy = self.grad.data().data();
            const T* ga = gi->value.data().data();
            const T cf = static_cast<T>(v.c);
            for (std::size_t n = 0; n < v.n; ++n) {
                for (std::size_t s = 0; s < v.s; ++s) {
                    const std::size_t base = n * v.c * v.s + s;
                    T sum_d = 0, sum_dx = 0;
                    for (std::size_t c = 0; c < v.c; ++c) {
                        const std::size_t i = base + c * v.s;
                        const T d = gy[i] * ga[c];
                        sum_d += d;
                        sum_dx += d * xhat[i];
                        if (gi->requires_grad) gi->grad[c] += gy[i] * xhat[i];
                        if (bi->requires_grad) bi->grad[c] += gy[i];
                    }
                    if (xi->requires_grad) {
                        const T is = inv_std[n * v.s + s];
                        for (std::size_t c = 0; c < v.c; ++c) {
                            const std::size_t i = base + c * v.s;
                            const T d = gy[i] * ga[c];
                            xi->grad[i] += is * (d - sum_d / cf - xhat[i] * sum_dx / cf);
                        }
                    }
                }
            }
        });
}

enum class NormMode { Train, Eval };

/// Batch normalization with per-channel statistics over (N, spatial).
/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running estimates by EMA, using the unbiased variance when the
/// reduction has more than one element. Eval mode uses the running estimates.
template <typename T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, T momentum, T eps, NormMode mode) {
    const auto v = detail::ncs_view(input.shape(), "batch_norm");
    const Shape cs{v.c};
    if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs || running_var.shape() != cs) {
        throw ShapeError("batch_norm: parameters and statistics must have shape [" + std::to_string(v.c) + "]");
    }
    const std::size_t m = v.n * v.s;
    if (m == 0) throw ShapeError("batch_norm: empty batch");
    const T* x = input.value().data().data();
    std::vector<T> mean(v.c), inv_std(v.c);
    if (mode == NormMode::Train) {
        for (std::size_t c = 0; c < v.c; ++c) {
            T acc = 0;
            for (std::size_t n = 0; n < v.n; ++n)
                for (std::size_t s = 0; s < v.s; ++s) acc += x[(n * v.c + c) * v.s + s];
            const T mu = acc / static_cast<T>(m);
            T sq = 0;
            for (std::size_t n = 0; n < v.n; ++n)
                for (std::size_t s = 0; s < v.s; ++s) {
                    const T d = x[(n * v.c + c) * v.s + s] - mu;
                    sq += d * d;
                }
            const T var = sq / static_cast<T>(m);
            const T unbiased = m > 1 ? sq / static_cast<T>(m - 1) : var;
            mean[c] = mu;
            inv_std[c] = T(1) / std::sqrt(var + eps);
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < v.c; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }
    Tensor<T> out(input.shape());
    Tensor<T> xhat(input.shape());
    for (std::size_t n = 0; n < v.n; ++n)
        for (std::size_t c = 0; c < v.c; ++c)
            for (std::size_t s = 0; s < v.s; ++s) {
                const std::size_t i = (n * v.c + c) * v.s + s;
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                out[i] = gamma.value()[c] * xhat[i] + beta.value()[c];
            }
    const bool train = mode == NormMode::Train;
    return make_result<T>(
        "batch_norm", std::move(out), {input.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
        [v, m, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            auto& xi = self.inputs[0];
            auto& gi = self.inputs[1];
            auto& bi = self.inputs[2];
            const T* gy = self.grad.data().data();
            for (std::size_t c = 0; c < v.c; ++c) {
                T sum_g = 0, sum_gx = 0;
                for (std::size_t n = 0; n < v.n; ++n)
                    for (std::size_t s = 0; s < v.s; ++s) {
                        const std::size_t i = (n * v.c + c) * v.s + s;
                        sum_g += gy[i];
                        sum_gx += gy[i] * xhat[i];
                    }
                if (gi->requires_grad) gi->grad[c] += sum_gx;
                if (bi->requires_grad) bi->grad[c] += sum_g;
                if (!xi->requires_grad) continue;
                const T scale = gi->value[c] * inv_std[c];
                const T mf = static_cast<T>(m);
                for (std::size_t n = 0; n < v.n; ++n)
                    for (std::size_t s = 0; s < v.s; ++s) {
                        const std::size_t i = (n * v.c + c) * v.s + s;
                        if (train) {
                            xi->grad[i] += scale * (gy[i] - sum_g / mf - xhat[i] * sum_gx / mf);
                        } else {
                            xi->grad[i] += scale * gy[i];
                        }
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { ReLU, LReLU, PReLU, SoftPlus, GELU, SiLU, ELU };

inline constexpr double kLeakyReluSlope = 0.01;
inline constexpr double kEluAlpha = 1.0;
inline constexpr double kPReluInit = 0.25;

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::ReLU: return "relu";
        case Activation::LReLU: return "lrelu";
        case Activation::PReLU: return "prelu";
        case Activation::SoftPlus: return "softplus";
        case Activation::GELU: return "gelu";
        case Activation::SiLU: return "silu";
        case Activation::ELU: return "elu";
    }
    return "?";
}

namespace detail {
template <typename T>
T sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

// Value and derivative for the parameter-free activations.
template <typename T>
void activation_eval(Activation kind, T x, T& y, T& dy) {
    switch (kind) {
        case Activation::ReLU:
            y = x > 0 ? x : T(0);
            dy = x > 0 ? T(1) : T(0);
            return;
        case Activation::LReLU: {
            const T a = static_cast<T>(kLeakyReluSlope);
            y = x > 0 ? x : a * x;
            dy = x > 0 ? T(1) : a;
            return;
        }
        case Activation::SoftPlus:
            y = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
            dy = sigmoid(x);
            return;
        case Activation::GELU: {
            const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
            y = x * cdf;
            dy = cdf + x * pdf;
            return;
        }
        case Activation::SiLU: {
            const T s = sigmoid(x);
            y = x * s;
            dy = s * (T(1) + x * (T(1) - s));
            return;
        }
        case Activation::ELU: {
            const T a = static_cast<T>(kEluAlpha);
            if (x > 0) {
                y = x;
                dy = T(1);
            } else {
                y = a * std::expm1(x);
                dy = a * std::exp(x);
            }
            return;
        }
        case Activation::PReLU:
            break;
    }
    throw std::logic_error("activation_eval: PReLU needs a slope parameter");
}
}  // namespace detail

/// Scalar evaluation of a parameter-free activation (PReLU uses the given slope).
template <typename T>
T activation_value(Activation kind, T x, T prelu_slope = static_cast<T>(kPReluInit)) {
    if (kind == Activation::PReLU) return x > 0 ? x : prelu_slope * x;
    T y, dy;
    detail::activation_eval(kind, x, y, dy);
    return y;
}

/// Elementwise activation. PReLU takes a per-channel slope [C] (channel axis 1).
template <typename T>
Var<T> activation(Activation kind, const Var<T>& input, const Var<T>& prelu_slope = Var<T>()) {
    const Shape& xs = input.shape();
    Tensor<T> out(xs);
    const T* x = input.value().data().data();
    if (kind == Activation::PReLU) {
        if (!prelu_slope.defined() || xs.size() < 2 || prelu_slope.shape() != Shape{xs[1]}) {
            throw ShapeError("prelu: slope must have shape [C] for input " + shape_str(xs));
        }
        const std::size_t c_dim = xs[1];
        const std::size_t inner = input.value().numel() / (xs[0] * c_dim);
        const T* a = prelu_slope.value().data().data();
        for (std::size_t i = 0; i < out.numel(); ++i) {
            const std::size_t c = (i / inner) % c_dim;
            out[i] = x[i] > 0 ? x[i] : a[c] * x[i];
        }
        return make_result<T>("prelu", std::move(out), {input.node_ptr(), prelu_slope.node_ptr()},
                              [c_dim, inner](Node<T>& self) {
                                  auto& xi = self.inputs[0];
                                  auto& ai = self.inputs[1];
                                  const T* xv = xi->value.data().data();
                                  const T* av = ai->value.data().data();
                                  const T* gy = self.grad.data().data();
                                  for (std::size_t i = 0; i < xi->value.numel(); ++i) {
                                      const std::size_t c = (i / inner) % c_dim;
                                      if (xi->requires_grad) xi->grad[i] += gy[i] * (xv[i] > 0 ? T(1) : av[c]);
                                      if (ai->requires_grad && !(xv[i] > 0)) ai->grad[c] += gy[i] * xv[i];
                                  }
                              });
    }
    Tensor<T> deriv(xs);
    for (std::size_t i = 0; i < out.numel(); ++i) detail::activation_eval(kind, x[i], out[i], deriv[i]);
    return make_result<T>(activation_name(kind), std::move(out), {input.node_ptr()},
                          [deriv = std::move(deriv)](Node<T>& self) {
                              auto g = self.inputs[0]->grad.data();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv[i];
                          });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the batch. logits [N,K], labels in [0,K).
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    const Shape& ls = logits.shape();
    if (ls.size() != 2 || ls[0] != labels.size() || ls[0] == 0) {
        throw ShapeError("softmax_cross_entropy: logits " + shape_str(ls) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = ls[0], k = ls[1];
    const T* z = logits.value().data().data();
    Tensor<T> probs({n, k});
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                                    std::to_string(k) + ")");
        }
        T mx = z[i * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[i * k + j]);
        T denom = 0;
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[i * k + j] - mx);
        const T log_denom = std::log(denom);
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(z[i * k + j] - mx - log_denom);
        total += -(z[i * k + static_cast<std::size_t>(y)] - mx - log_denom);
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result<T>("softmax_cross_entropy", Tensor<T>({1}, std::vector<T>{total / static_cast<T>(n)}),
                          {logits.node_ptr()},
                          [n, k, probs = std::move(probs), lab = std::move(lab)](Node<T>& self) {
                              const T scale = self.grad[0] / static_cast<T>(n);
                              auto g = self.inputs[0]->grad.data();
                              for (std::size_t i = 0; i < n; ++i) {
                                  for (std::size_t j = 0; j < k; ++j) {
                                      const T onehot = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
                                      g[i * k + j] += scale * (probs[i * k + j] - onehot);
                                  }
                              }
                          });
}

}  // namespace fedconv
