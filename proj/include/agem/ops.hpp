#pragma once

// Differentiable tensor operations recorded on a Tape.

#include <agem/tape.hpp>

#include <cmath>
#include <numeric>
#include <optional>

namespace agem {

// ---------------------------------------------------------------------------
// Plain vector helpers (descriptors are flat spans of reals).

inline real dot(std::span<const real> u, std::span<const real> v) {
    require_shape(u.size() == v.size(), "dot of vectors with lengths " + std::to_string(u.size()) + " and " +
                                            std::to_string(v.size()));
    real s = 0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline real norm(std::span<const real> v) { return std::sqrt(dot(v, v)); }

inline std::vector<real> l2_normalize(std::span<const real> v) {
    const real n = norm(v);
    if (!(n > 0)) throw NumericalError("l2_normalize of a zero vector");
    std::vector<real> out(v.begin(), v.end());
    for (auto& x : out) x /= n;
    check_finite(out, "l2_normalize");
    return out;
}

// ---------------------------------------------------------------------------
// Convolution

inline std::size_t conv_out_dim(std::size_t dim, std::size_t k, std::size_t stride, std::size_t padding) {
    const auto padded = static_cast<long long>(dim + 2 * padding) - static_cast<long long>(k);
    require_shape(padded >= 0, "conv2d output dimension < 1");
    return static_cast<std::size_t>(padded) / stride + 1;
}

/// 2-D cross-correlation. Weights are (out_c, in_c, kh, kw) stored as a Tensor
/// shape; bias is (1, out_c, 1, 1).
inline Var conv2d(Tape& tape, Var input, Var weights, std::optional<Var> bias, std::size_t stride,
                  std::size_t padding) {
    const Tensor& x = tape.value(input);
    const Tensor& w = tape.value(weights);
    const Shape xs = x.shape();
    const Shape ws = w.shape();
    require_shape(ws.c == xs.c, "conv2d: weight in_c " + std::to_string(ws.c) + " != input channels " +
                                    std::to_string(xs.c));
    require_shape((ws.h == 1 || ws.h == 3) && (ws.w == 1 || ws.w == 3), "conv2d: kernel must be 1x1 or 3x3");
    require_shape(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
    if (bias) {
        require_shape(tape.value(*bias).size() == ws.n, "conv2d: bias length != out channels");
    }
    const Shape ys{xs.n, ws.n, conv_out_dim(xs.h, ws.h, stride, padding), conv_out_dim(xs.w, ws.w, stride, padding)};

    // Index of input pixel for output y and kernel offset k; -1 when in padding.
    auto src = [&](std::size_t out, std::size_t k, std::size_t limit) -> long long {
        const long long pos = static_cast<long long>(out * stride + k) - static_cast<long long>(padding);
        return (pos < 0 || pos >= static_cast<long long>(limit)) ? -1 : pos;
    };

    Tensor y(ys);
    for (std::size_t n = 0; n < ys.n; ++n) {
        for (std::size_t o = 0; o < ys.c; ++o) {
            const real b = bias ? tape.value(*bias)[o] : real(0);
            for (std::size_t oy = 0; oy < ys.h; ++oy) {
                for (std::size_t ox = 0; ox < ys.w; ++ox) {
                    real acc = b;
                    for (std::size_t i = 0; i < xs.c; ++i) {
                        for (std::size_t ky = 0; ky < ws.h; ++ky) {
                            const auto iy = src(oy, ky, xs.h);
                            if (iy < 0) continue;
                            for (std::size_t kx = 0; kx < ws.w; ++kx) {
                                const auto ix = src(ox, kx, xs.w);
                                if (ix < 0) continue;
                                acc += w.at(o, i, ky, kx) * x.at(n, i, static_cast<std::size_t>(iy),
                                                                 static_cast<std::size_t>(ix));
                            }
                        }
                    }
                    y.at(n, o, oy, ox) = acc;
                }
            }
        }
    }

    auto backward = [x, w, ys, stride, padding, has_bias = bias.has_value()](const Tensor& g,
                                                                          std::span<Tensor* const> grads) {
        const Shape xs = x.shape();
        const Shape ws = w.shape();
        Tensor& gx = *grads[0];
        Tensor& gw = *grads[1];
        auto src = [&](std::size_t out, std::size_t k, std::size_t limit) -> long long {
            const long long pos = static_cast<long long>(out * stride + k) - static_cast<long long>(padding);
            return (pos < 0 || pos >= static_cast<long long>(limit)) ? -1 : pos;
        };
        for (std::size_t n = 0; n < ys.n; ++n) {
            for (std::size_t o = 0; o < ys.c; ++o) {
                for (std::size_t oy = 0; oy < ys.h; ++oy) {
                    for (std::size_t ox = 0; ox < ys.w; ++ox) {
                        const real go = g.at(n, o, oy, ox);
                        if (go == 0) continue;
                        if (has_bias) (*grads[2])[o] += go;
                        for (std::size_t i = 0; i < xs.c; ++i) {
                            for (std::size_t ky = 0; ky < ws.h; ++ky) {
                                const auto iy = src(oy, ky, xs.h);
                                if (iy < 0) continue;
                                for (std::size_t kx = 0; kx < ws.w; ++kx) {
                                    const auto ix = src(ox, kx, xs.w);
                                    if (ix < 0) continue;
                                    const auto uy = static_cast<std::size_t>(iy);
                                    const auto ux = static_cast<std::size_t>(ix);
                                    gx.at(n, i, uy, ux) += go * w.at(o, i, ky, kx);
                                    gw.at(o, i, ky, kx) += go * x.at(n, i, uy, ux);
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if (bias) return tape.record(OpKind::conv2d, {input, weights, *bias}, std::move(y), std::move(backward));
    return tape.record(OpKind::conv2d, {input, weights}, std::move(y), std::move(backward));
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class BatchNormMode { train, eval };

/// Per-channel batch moments observed in train mode; variance is unbiased.
struct BatchMoments {
    std::vector<real> mean;
    std::vector<real> var;
};

/// Normalizes each channel over (batch, height, width). In eval mode the
/// supplied running mean/variance are used instead of batch moments.
inline Var batchnorm(Tape& tape, Var input, Var gamma, Var beta, real eps, BatchNormMode mode,
                     std::span<const real> running_mean = {}, std::span<const real> running_var = {},
                     BatchMoments* observed = nullptr) {
    const Tensor& x = tape.value(input);
    const Shape s = x.shape();
    require_shape(s.n * s.spatial() > 0, "batchnorm: zero-size spatial extent");
    require_shape(tape.value(gamma).size() == s.c && tape.value(beta).size() == s.c,
                  "batchnorm: gamma/beta length != channels");
    const std::size_t count = s.n * s.spatial();

    std::vector<real> mean(s.c), var(s.c);
    if (mode == BatchNormMode::train) {
        for (std::size_t c = 0; c < s.c; ++c) {
            real m = 0;
            for (std::size_t n = 0; n < s.n; ++n)
                for (std::size_t i = 0; i < s.spatial(); ++i) m += x[(n * s.c + c) * s.spatial() + i];
            m /= static_cast<real>(count);
            real v = 0;
            for (std::size_t n = 0; n < s.n; ++n)
                for (std::size_t i = 0; i < s.spatial(); ++i) {
                    const real d = x[(n * s.c + c) * s.spatial() + i] - m;
                    v += d * d;
                }
            mean[c] = m;
            var[c] = v / static_cast<real>(count);
        }
        if (observed) {
            observed->mean = mean;
            observed->var = var;
            if (count > 1) {
                for (auto& v : observed->var) v *= static_cast<real>(count) / static_cast<real>(count - 1);
            }
        }
    } else {
        require_shape(running_mean.size() == s.c && running_var.size() == s.c,
                      "batchnorm: running statistics length != channels");
        mean.assign(running_mean.begin(), running_mean.end());
        var.assign(running_var.begin(), running_var.end());
    }

    std::vector<real> inv_std(s.c);
    for (std::size_t c = 0; c < s.c; ++c) inv_std[c] = real(1) / std::sqrt(var[c] + eps);

    Tensor xhat(s);
    Tensor y(s);
    const Tensor& g = tape.value(gamma);
    const Tensor& b = tape.value(beta);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < s.spatial(); ++i) {
                const std::size_t k = (n * s.c + c) * s.spatial() + i;
                xhat[k] = (x[k] - mean[c]) * inv_std[c];
                y[k] = g[c] * xhat[k] + b[c];
            }

    auto backward = [xhat, gvals = g, inv_std, mode, count](const Tensor& go, std::span<Tensor* const> grads) {
        const Shape s = xhat.shape();
        Tensor& gx = *grads[0];
        Tensor& ggamma = *grads[1];
        Tensor& gbeta = *grads[2];
        for (std::size_t c = 0; c < s.c; ++c) {
            real sum_g = 0, sum_gx = 0;
            for (std::size_t n = 0; n < s.n; ++n)
                for (std::size_t i = 0; i < s.spatial(); ++i) {
                    const std::size_t k = (n * s.c + c) * s.spatial() + i;
                    sum_g += go[k];
                    sum_gx += go[k] * xhat[k];
                }
            ggamma[c] += sum_gx;
            gbeta[c] += sum_g;
            const real scale = gvals[c] * inv_std[c];
            const real m = static_cast<real>(count);
            for (std::size_t n = 0; n < s.n; ++n)
                for (std::size_t i = 0; i < s.spatial(); ++i) {
                    const std::size_t k = (n * s.c + c) * s.spatial() + i;
                    if (mode == BatchNormMode::train) {
                        gx[k] += scale * (go[k] - sum_g / m - xhat[k] * sum_gx / m);
                    } else {
                        gx[k] += scale * go[k];
                    }
                }
        }
    };
    return tape.record(OpKind::batchnorm, {input, gamma, beta}, std::move(y), std::move(backward));
}

// ---------------------------------------------------------------------------
// Elementwise

/// max(0, x); the subgradient at 0 is 0.
inline Var relu(Tape& tape, Var input) {
    const Tensor& x = tape.value(input);
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : real(0);
    return tape.record(OpKind::relu, {input}, std::move(y), [x](const Tensor& g, std::span<Tensor* const> grads) {
        for (std::size_t i = 0; i < x.size(); ++i)
            if (x[i] > 0) (*grads[0])[i] += g[i];
    });
}

inline real sigmoid(real x) {
    // Split by sign so exp never overflows.
    if (x >= 0) return real(1) / (real(1) + std::exp(-x));
    const real e = std::exp(x);
    return e / (real(1) + e);
}

inline Var sigmoid(Tape& tape, Var input) {
    const Tensor& x = tape.value(input);
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
    return tape.record(OpKind::sigmoid, {input}, y, [y](const Tensor& g, std::span<Tensor* const> grads) {
        for (std::size_t i = 0; i < y.size(); ++i) (*grads[0])[i] += g[i] * y[i] * (1 - y[i]);
    });
}

inline Var hadamard(Tape& tape, Var a, Var b) {
    const Tensor& x = tape.value(a);
    const Tensor& z = tape.value(b);
    require_shape(x.shape() == z.shape(), "hadamard shape mismatch " + x.shape().str() + " vs " + z.shape().str());
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * z[i];
    return tape.record(OpKind::hadamard, {a, b}, std::move(y),
                       [x, z](const Tensor& g, std::span<Tensor* const> grads) {
                           for (std::size_t i = 0; i < x.size(); ++i) {
                               (*grads[0])[i] += g[i] * z[i];
                               (*grads[1])[i] += g[i] * x[i];
                           }
                       });
}

inline Var add(Tape& tape, Var a, Var b) {
    const Tensor& x = tape.value(a);
    const Tensor& z = tape.value(b);
    require_shape(x.shape() == z.shape(), "add shape mismatch " + x.shape().str() + " vs " + z.shape().str());
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + z[i];
    return tape.record(OpKind::add, {a, b}, std::move(y), [](const Tensor& g, std::span<Tensor* const> grads) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            (*grads[0])[i] += g[i];
            (*grads[1])[i] += g[i];
        }
    });
}

inline Var scale(Tape& tape, Var a, real factor) {
    const Tensor& x = tape.value(a);
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = factor * x[i];
    return tape.record(OpKind::scale, {a}, std::move(y), [factor](const Tensor& g, std::span<Tensor* const> grads) {
        for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += factor * g[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Tape& tape, Var a) {
    const Tensor& x = tape.value(a);
    const real s = std::accumulate(x.data().begin(), x.data().end(), real(0));
    return tape.record(OpKind::sum, {a}, Tensor::scalar(s), [](const Tensor& g, std::span<Tensor* const> grads) {
        for (auto& v : grads[0]->data()) v += g[0];
    });
}

inline Var dot(Tape& tape, Var a, Var b) {
    const Tensor& x = tape.value(a);
    const Tensor& z = tape.value(b);
    require_shape(x.shape() == z.shape(), "dot shape mismatch " + x.shape().str() + " vs " + z.shape().str());
    return tape.record(OpKind::dot, {a, b}, Tensor::scalar(dot(x.data(), z.data())),
                       [x, z](const Tensor& g, std::span<Tensor* const> grads) {
                           for (std::size_t i = 0; i < x.size(); ++i) {
                               (*grads[0])[i] += g[0] * z[i];
                               (*grads[1])[i] += g[0] * x[i];
                           }
                       });
}

/// Normalizes every batch item (its c*h*w block) to unit L2 norm.
inline Var l2_normalize(Tape& tape, Var a) {
    const Tensor& x = tape.value(a);
    const Shape s = x.shape();
    const std::size_t len = s.per_item();
    Tensor y(s);
    std::vector<real> norms(s.n);
    for (std::size_t n = 0; n < s.n; ++n) {
        const auto row = x.data().subspan(n * len, len);
        norms[n] = norm(row);
        if (!(norms[n] > 0)) throw NumericalError("l2_normalize of a zero vector");
        for (std::size_t i = 0; i < len; ++i) y[n * len + i] = row[i] / norms[n];
    }
    return tape.record(OpKind::l2_normalize, {a}, y, [y, norms, len](const Tensor& g, std::span<Tensor* const> grads) {
        for (std::size_t n = 0; n < norms.size(); ++n) {
            const auto yr = y.data().subspan(n * len, len);
            const auto gr = g.data().subspan(n * len, len);
            const real proj = dot(yr, gr);
            for (std::size_t i = 0; i < len; ++i) (*grads[0])[n * len + i] += (gr[i] - yr[i] * proj) / norms[n];
        }
    });
}

/// Batch item `index` as a (1, c, h, w) tensor.
inline Var select_row(Tape& tape, Var a, std::size_t index) {
    const Tensor& x = tape.value(a);
    const Shape s = x.shape();
    require_shape(index < s.n, "select_row index out of range");
    const std::size_t len = s.per_item();
    Shape out = s;
    out.n = 1;
    std::vector<real> data(x.data().begin() + static_cast<std::ptrdiff_t>(index * len),
                           x.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * len));
    return tape.record(OpKind::select_row, {a}, Tensor(out, std::move(data)),
                       [index, len](const Tensor& g, std::span<Tensor* const> grads) {
                           for (std::size_t i = 0; i < len; ++i) (*grads[0])[index * len + i] += g[i];
                       });
}

} // namespace agem
