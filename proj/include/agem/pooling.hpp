#pragma once

// SPoC / MAC / GeM global pooling of (n, K, h, w) feature maps into (n, K, 1, 1).

#include <agem/ops.hpp>

#include <algorithm>

namespace agem {

enum class PoolingKind { spoc, mac, gem };
enum class ExponentMode { shared, per_channel };

inline constexpr real kGemInitialP = real(2.92);
inline constexpr real kGemClampEps = real(1e-6);
inline constexpr real kMinP = 1;
inline constexpr real kMaxP = 10;

struct PoolingSpec {
    PoolingKind kind = PoolingKind::gem;
    /// One value when shared, one per channel otherwise.
    std::vector<real> p{kGemInitialP};
    ExponentMode p_mode = ExponentMode::shared;
    real eps = kGemClampEps;

    static PoolingSpec gem(real p = kGemInitialP) { return {PoolingKind::gem, {p}, ExponentMode::shared, kGemClampEps}; }
    static PoolingSpec spoc() { return {PoolingKind::spoc, {1}, ExponentMode::shared, kGemClampEps}; }
    static PoolingSpec mac() { return {PoolingKind::mac, {1}, ExponentMode::shared, kGemClampEps}; }

    /// p as a tensor: (1,1,1,1) shared or (1,K,1,1) per channel.
    Tensor p_tensor() const {
        return p_mode == ExponentMode::shared ? Tensor::scalar(p.at(0)) : Tensor::vector(p);
    }
};

inline const char* to_string(PoolingKind k) {
    switch (k) {
        case PoolingKind::spoc: return "spoc";
        case PoolingKind::mac: return "mac";
        case PoolingKind::gem: return "gem";
    }
    return "?";
}

inline PoolingKind parse_pooling_kind(std::string_view s) {
    if (s == "spoc") return PoolingKind::spoc;
    if (s == "mac") return PoolingKind::mac;
    if (s == "gem") return PoolingKind::gem;
    throw FormatError("unknown pooling kind '" + std::string(s) + "'");
}

namespace detail {

inline void require_spatial(const Shape& s, const char* op) {
    require_shape(s.spatial() > 0, std::string(op) + ": empty spatial extent");
}

inline real exponent_for(const Tensor& p, std::size_t channel) { return p.size() == 1 ? p[0] : p[channel]; }

} // namespace detail

/// F_k = (mean_{x in X_k} max(x, eps)^p_k)^(1/p_k), differentiable in X and p.
inline Var gem_pool(Tape& tape, Var input, Var exponent, real eps = kGemClampEps) {
    const Tensor& x = tape.value(input);
    const Tensor& p = tape.value(exponent);
    const Shape s = x.shape();
    detail::require_spatial(s, "gem_pool");
    require_shape(p.size() == 1 || p.size() == s.c, "gem_pool: p must be shared or per-channel");
    for (real v : p.data()) require_shape(v > 0, "gem_pool: p must be positive");

    const std::size_t area = s.spatial();
    Tensor y(Shape{s.n, s.c, 1, 1});
    Tensor means(Shape{s.n, s.c, 1, 1});
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const real pk = detail::exponent_for(p, c);
            real acc = 0;
            for (std::size_t i = 0; i < area; ++i) acc += std::pow(std::max(x[(n * s.c + c) * area + i], eps), pk);
            const real m = acc / static_cast<real>(area);
            means[n * s.c + c] = m;
            y[n * s.c + c] = std::pow(m, real(1) / pk);
        }
    }

    auto backward = [x, p, y, means, eps](const Tensor& g, std::span<Tensor* const> grads) {
        const Shape s = x.shape();
        const std::size_t area = s.spatial();
        Tensor& gx = *grads[0];
        Tensor& gp = *grads[1];
        for (std::size_t n = 0; n < s.n; ++n) {
            for (std::size_t c = 0; c < s.c; ++c) {
                const std::size_t k = n * s.c + c;
                const real go = g[k];
                if (go == 0) continue;
                const real pk = detail::exponent_for(p, c);
                const real f = y[k];
                const real m = means[k];
                // dF/dx = F / (m * |X|) * x^(p-1);  dF/dp = F * (E[x^p ln x] / (p m) - ln m / p^2)
                real weighted_log = 0;
                for (std::size_t i = 0; i < area; ++i) {
                    const real raw = x[k * area + i];
                    const real xc = std::max(raw, eps);
                    const real xp = std::pow(xc, pk);
                    weighted_log += xp * std::log(xc);
                    if (raw > eps) gx[k * area + i] += go * f / (m * static_cast<real>(area)) * xp / xc;
                }
                weighted_log /= static_cast<real>(area);
                const real dfdp = f * (weighted_log / (pk * m) - std::log(m) / (pk * pk));
                gp[p.size() == 1 ? 0 : c] += go * dfdp;
            }
        }
    };
    return tape.record(OpKind::gem_pool, {input, exponent}, std::move(y), std::move(backward));
}

inline Var spoc_pool(Tape& tape, Var input) {
    const Tensor& x = tape.value(input);
    const Shape s = x.shape();
    detail::require_spatial(s, "spoc_pool");
    const std::size_t area = s.spatial();
    Tensor y(Shape{s.n, s.c, 1, 1});
    for (std::size_t k = 0; k < s.n * s.c; ++k) {
        real acc = 0;
        for (std::size_t i = 0; i < area; ++i) acc += x[k * area + i];
        y[k] = acc / static_cast<real>(area);
    }
    return tape.record(OpKind::spoc_pool, {input}, std::move(y), [area](const Tensor& g, std::span<Tensor* const> grads) {
        for (std::size_t k = 0; k < g.size(); ++k)
            for (std::size_t i = 0; i < area; ++i) (*grads[0])[k * area + i] += g[k] / static_cast<real>(area);
    });
}

/// Spatial max per channel; gradient flows to the first maximal position.
inline Var mac_pool(Tape& tape, Var input) {
    const Tensor& x = tape.value(input);
    const Shape s = x.shape();
    detail::require_spatial(s, "mac_pool");
    const std::size_t area = s.spatial();
    Tensor y(Shape{s.n, s.c, 1, 1});
    std::vector<std::size_t> argmax(s.n * s.c);
    for (std::size_t k = 0; k < s.n * s.c; ++k) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < area; ++i)
            if (x[k * area + i] > x[k * area + best]) best = i;
        argmax[k] = k * area + best;
        y[k] = x[argmax[k]];
    }
    return tape.record(OpKind::mac_pool, {input}, std::move(y), [argmax](const Tensor& g, std::span<Tensor* const> grads) {
        for (std::size_t k = 0; k < argmax.size(); ++k) (*grads[0])[argmax[k]] += g[k];
    });
}

/// Pools according to `spec`; `exponent` is required for GeM.
inline Var pool(Tape& tape, Var input, const PoolingSpec& spec, std::optional<Var> exponent) {
    switch (spec.kind) {
        case PoolingKind::spoc: return spoc_pool(tape, input);
        case PoolingKind::mac: return mac_pool(tape, input);
        case PoolingKind::gem:
            require_shape(exponent.has_value(), "gem pooling needs an exponent node");
            return gem_pool(tape, input, *exponent, spec.eps);
    }
    throw ShapeError("unknown pooling kind");
}

// Non-differentiable conveniences over a single (1, K, h, w) map.

inline std::vector<real> gem_pool(const Tensor& x, const PoolingSpec& spec) {
    require_shape(spec.kind == PoolingKind::gem, "gem_pool called with non-gem spec");
    Tape tape;
    const Var out = gem_pool(tape, tape.leaf(x), tape.leaf(spec.p_tensor()), spec.eps);
    return tape.value(out).values();
}

inline std::vector<real> spoc_pool(const Tensor& x) {
    Tape tape;
    return tape.value(spoc_pool(tape, tape.leaf(x))).values();
}

inline std::vector<real> mac_pool(const Tensor& x) {
    Tape tape;
    return tape.value(mac_pool(tape, tape.leaf(x))).values();
}

inline std::vector<real> pool(const Tensor& x, const PoolingSpec& spec) {
    switch (spec.kind) {
        case PoolingKind::spoc: return spoc_pool(x);
        case PoolingKind::mac: return mac_pool(x);
        case PoolingKind::gem: return gem_pool(x, spec);
    }
    throw ShapeError("unknown pooling kind");
}

} // namespace agem
