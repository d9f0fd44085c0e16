#pragma once

// Attention branch: Att1 on the B4 tap, Att2_1 / Att2_2 on the B5 taps, and
// the residual composition X = X_5_3 + A_5_2 * X_5_3.

#include <agem/parameters.hpp>

#include <array>
#include <random>

namespace agem {

struct ConvLayer {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

struct BatchNormLayer {
    std::size_t gamma = 0;
    std::size_t beta = 0;
    std::size_t running_mean = 0;
    std::size_t running_var = 0;
};

/// State shared by one forward pass: the tape, the bound parameters, and the
/// batch moments observed by train-mode batch norms.
struct Forward {
    Tape& tape;
    const ParameterStore& params;
    std::vector<Var> vars;
    BatchNormMode mode = BatchNormMode::eval;
    real bn_eps = real(1e-5);
    std::vector<std::pair<BatchNormLayer, BatchMoments>> observed{};

    Forward(Tape& t, const ParameterStore& p, BatchNormMode m, real eps = real(1e-5))
        : tape(t), params(p), vars(p.bind(t)), mode(m), bn_eps(eps) {}

    Var param(std::size_t index) const { return vars.at(index); }
};

/// Adds a conv layer's weight and bias to `store`. `gain` is the variance
/// numerator of the N(0, gain / fan_in) initialization; 0 gives zero weights.
template <class Rng>
ConvLayer add_conv(ParameterStore& store, const std::string& prefix, std::size_t in_c, std::size_t out_c,
                   std::size_t kernel, std::size_t stride, ParamGroup group, real gain, Rng& rng) {
    const Shape ws{out_c, in_c, kernel, kernel};
    const real fan_in = static_cast<real>(in_c * kernel * kernel);
    Tensor w = gain > 0 ? random_normal(ws, rng, 0, std::sqrt(gain / fan_in)) : Tensor(ws);
    ConvLayer layer;
    layer.weight = store.add(prefix + ".weight", std::move(w), group, true);
    layer.bias = store.add(prefix + ".bias", Tensor(Shape{1, out_c, 1, 1}), group, true);
    layer.stride = stride;
    layer.padding = kernel / 2;
    return layer;
}

inline ConvLayer find_conv(const ParameterStore& store, const std::string& prefix, std::size_t stride) {
    ConvLayer layer;
    layer.weight = store.index_of(prefix + ".weight");
    layer.bias = store.index_of(prefix + ".bias");
    layer.stride = stride;
    layer.padding = store[layer.weight].value.shape().h / 2;
    return layer;
}

inline BatchNormLayer add_batchnorm(ParameterStore& store, const std::string& prefix, std::size_t channels,
                                    ParamGroup group) {
    const Shape s{1, channels, 1, 1};
    BatchNormLayer bn;
    bn.gamma = store.add(prefix + ".gamma", Tensor(s, real(1)), group, false);
    bn.beta = store.add(prefix + ".beta", Tensor(s, real(0)), group, false);
    bn.running_mean = store.add(prefix + ".running_mean", Tensor(s, real(0)), ParamGroup::buffer, false);
    bn.running_var = store.add(prefix + ".running_var", Tensor(s, real(1)), ParamGroup::buffer, false);
    return bn;
}

inline BatchNormLayer find_batchnorm(const ParameterStore& store, const std::string& prefix) {
    return {store.index_of(prefix + ".gamma"), store.index_of(prefix + ".beta"),
            store.index_of(prefix + ".running_mean"), store.index_of(prefix + ".running_var")};
}

inline Var apply_conv(Forward& fw, const ConvLayer& layer, Var x) {
    return conv2d(fw.tape, x, fw.param(layer.weight), fw.param(layer.bias), layer.stride, layer.padding);
}

inline Var apply_batchnorm(Forward& fw, const BatchNormLayer& bn, Var x) {
    BatchMoments moments;
    const Var y = batchnorm(fw.tape, x, fw.param(bn.gamma), fw.param(bn.beta), fw.bn_eps, fw.mode,
                            fw.params[bn.running_mean].value.data(), fw.params[bn.running_var].value.data(),
                            fw.mode == BatchNormMode::train ? &moments : nullptr);
    if (fw.mode == BatchNormMode::train) fw.observed.emplace_back(bn, std::move(moments));
    return y;
}

/// Exponential moving average of running statistics (PyTorch convention).
inline void update_running_stats(ParameterStore& store, const std::vector<std::pair<BatchNormLayer, BatchMoments>>& observed,
                                 real momentum = real(0.1)) {
    for (const auto& [bn, m] : observed) {
        auto& rm = store[bn.running_mean].value;
        auto& rv = store[bn.running_var].value;
        for (std::size_t c = 0; c < rm.size(); ++c) {
            rm[c] = (1 - momentum) * rm[c] + momentum * m.mean[c];
            rv[c] = (1 - momentum) * rv[c] + momentum * m.var[c];
        }
    }
}

// ---------------------------------------------------------------------------

struct AttentionConfig {
    /// Channels of the B4 tap fed to Att1.
    std::size_t in_channels = 1024;
    /// Output channels of Att1's four layers; the last equals the B5 channel count.
    std::array<std::size_t, 4> att1_channels{1024, 512, 512, 2048};

    std::size_t out_channels() const { return att1_channels[3]; }
    friend bool operator==(const AttentionConfig&, const AttentionConfig&) = default;
};

/// Handles into a ParameterStore for the three attention units.
struct AttentionNet {
    AttentionConfig config;
    std::array<ConvLayer, 4> att1{};
    std::array<BatchNormLayer, 3> att1_bn{};
    ConvLayer att2_1{};
    ConvLayer att2_2{};

    /// Registers parameters under "att1.*", "att2_1.*", "att2_2.*". With
    /// `zero_weights` every conv weight starts at 0.
    template <class Rng>
    static AttentionNet create(ParameterStore& store, const AttentionConfig& cfg, Rng& rng, bool zero_weights = false) {
        AttentionNet net;
        net.config = cfg;
        const auto g = ParamGroup::attention;
        const real relu_gain = zero_weights ? 0 : 2;
        const real sigmoid_gain = zero_weights ? 0 : 1;
        const std::array<std::size_t, 4> kernels{3, 3, 1, 1};
        std::size_t in_c = cfg.in_channels;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string prefix = "att1.conv" + std::to_string(i + 1);
            net.att1[i] = add_conv(store, prefix, in_c, cfg.att1_channels[i], kernels[i], i == 0 ? 2 : 1, g,
                                   i < 3 ? relu_gain : sigmoid_gain, rng);
            if (i < 3) net.att1_bn[i] = add_batchnorm(store, "att1.bn" + std::to_string(i + 1), cfg.att1_channels[i], g);
            in_c = cfg.att1_channels[i];
        }
        const std::size_t c5 = cfg.out_channels();
        net.att2_1 = add_conv(store, "att2_1.conv", c5, c5, 1, 1, g, sigmoid_gain, rng);
        net.att2_2 = add_conv(store, "att2_2.conv", c5, c5, 1, 1, g, sigmoid_gain, rng);
        return net;
    }

    /// Re-attaches to parameters previously registered by create().
    static AttentionNet find(const ParameterStore& store) {
        AttentionNet net;
        for (std::size_t i = 0; i < 4; ++i) {
            net.att1[i] = find_conv(store, "att1.conv" + std::to_string(i + 1), i == 0 ? 2 : 1);
            if (i < 3) net.att1_bn[i] = find_batchnorm(store, "att1.bn" + std::to_string(i + 1));
            net.config.att1_channels[i] = store[net.att1[i].weight].value.shape().n;
        }
        net.config.in_channels = store[net.att1[0].weight].value.shape().c;
        net.att2_1 = find_conv(store, "att2_1.conv", 1);
        net.att2_2 = find_conv(store, "att2_2.conv", 1);
        return net;
    }
};

/// The four tap points of the main branch.
struct StageMaps {
    Tensor x_4_23;
    Tensor x_5_1;
    Tensor x_5_2;
    Tensor x_5_3;
};

/// Tape handles for the four tap points.
struct StageVars {
    Var x_4_23;
    Var x_5_1;
    Var x_5_2;
    Var x_5_3;
};

inline StageVars bind_stages(Tape& tape, const StageMaps& maps) {
    return {tape.leaf(maps.x_4_23), tape.leaf(maps.x_5_1), tape.leaf(maps.x_5_2), tape.leaf(maps.x_5_3)};
}

/// Att1 output spatial size for a B4 input of size `dim` (3x3, stride 2, pad 1).
inline std::size_t att1_output_dim(std::size_t dim) { return conv_out_dim(dim, 3, 2, 1); }

inline void validate_stage_shapes(const Shape& b4, const Shape& b5_1, const Shape& b5_2, const Shape& b5_3,
                                  const AttentionConfig& cfg) {
    require_shape(b5_1 == b5_2 && b5_2 == b5_3,
                  "B5 tap shapes differ: " + b5_1.str() + ", " + b5_2.str() + ", " + b5_3.str());
    require_shape(b4.n == b5_1.n, "B4 and B5 taps have different batch sizes");
    require_shape(b4.c == cfg.in_channels, "B4 tap has " + std::to_string(b4.c) + " channels, Att1 expects " +
                                               std::to_string(cfg.in_channels));
    require_shape(b5_1.c == cfg.out_channels(), "B5 taps have " + std::to_string(b5_1.c) +
                                                    " channels, attention output has " +
                                                    std::to_string(cfg.out_channels()));
    require_shape(b4.h > 0 && b4.w > 0 && att1_output_dim(b4.h) == b5_1.h && att1_output_dim(b4.w) == b5_1.w,
                  "B4 tap " + b4.str() + " does not reduce to B5 spatial size " + b5_1.str() + " under stride 2");
}

/// Att1: conv3x3/s2 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv1x1 -> BN -> ReLU -> conv1x1 -> sigmoid.
inline Var att1_forward(Forward& fw, const AttentionNet& net, Var x_4_23) {
    require_shape(fw.tape.value(x_4_23).shape().c == net.config.in_channels, "Att1 input channel mismatch");
    Var h = x_4_23;
    for (std::size_t i = 0; i < 3; ++i) {
        h = apply_conv(fw, net.att1[i], h);
        h = apply_batchnorm(fw, net.att1_bn[i], h);
        h = relu(fw.tape, h);
    }
    return sigmoid(fw.tape, apply_conv(fw, net.att1[3], h));
}

/// Att2 unit: 1x1 conv preserving channels, then sigmoid.
inline Var att2_forward(Forward& fw, const ConvLayer& unit, Var x) {
    const auto in_c = fw.tape.value(x).shape().c;
    require_shape(fw.params[unit.weight].value.shape().c == in_c, "Att2 input channel mismatch");
    return sigmoid(fw.tape, apply_conv(fw, unit, x));
}

inline Var attention_compose(Forward& fw, const AttentionNet& net, const StageVars& s) {
    auto& t = fw.tape;
    validate_stage_shapes(t.value(s.x_4_23).shape(), t.value(s.x_5_1).shape(), t.value(s.x_5_2).shape(),
                          t.value(s.x_5_3).shape(), net.config);
    const Var a_4_23 = att1_forward(fw, net, s.x_4_23);
    const Var a_5_1 = att2_forward(fw, net.att2_1, hadamard(t, a_4_23, s.x_5_1));
    const Var a_5_2 = att2_forward(fw, net.att2_2, hadamard(t, a_5_1, s.x_5_2));
    return add(t, s.x_5_3, hadamard(t, a_5_2, s.x_5_3));
}

} // namespace agem
