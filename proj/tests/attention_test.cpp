#include <agem/model.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace agem {
namespace {

const AttentionConfig kToy{8, {16, 8, 8, 16}};

StageMaps random_stages(std::mt19937_64& rng, std::size_t n = 2, std::size_t b4 = 6) {
    const std::size_t b5 = att1_output_dim(b4);
    return {test::positive(Shape{n, kToy.in_channels, b4, b4}, rng),
            test::positive(Shape{n, kToy.out_channels(), b5, b5}, rng),
            test::positive(Shape{n, kToy.out_channels(), b5, b5}, rng),
            test::positive(Shape{n, kToy.out_channels(), b5, b5}, rng)};
}

// Zero biases can leave a pre-ReLU value at exactly 0 when every input
// channel of a pixel is 0; finite differences would then straddle the kink.
void jitter_offsets(ParameterStore& store, std::mt19937_64& rng) {
    std::normal_distribution<real> d(0, 0.1);
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& name = store[i].name;
        if (name.ends_with(".bias") || name.ends_with(".beta")) {
            for (auto& v : store[i].value.data()) v = d(rng);
        }
    }
}

Var compose(Forward& fw, const AttentionNet& net, const StageMaps& maps) {
    return attention_compose(fw, net, bind_stages(fw.tape, maps));
}

TEST(Attention, OutputMatchesX53Shape) {
    std::mt19937_64 rng(1);
    ParameterStore store;
    const auto net = AttentionNet::create(store, kToy, rng);
    for (std::size_t b4 : {4u, 5u, 7u}) {
        const auto maps = random_stages(rng, 3, b4);
        Tape tape;
        Forward fw(tape, store, BatchNormMode::eval);
        EXPECT_EQ(tape.value(compose(fw, net, maps)).shape(), maps.x_5_3.shape());
    }
}

TEST(Attention, ZeroWeightsScaleX53ByThreeHalves) {
    // Zero conv weights and biases make every sigmoid output 0.5, so
    // X = X53 + 0.5 * X53.
    std::mt19937_64 rng(2);
    ParameterStore store;
    const auto net = AttentionNet::create(store, kToy, rng, true);
    const auto maps = random_stages(rng);
    Tape tape;
    Forward fw(tape, store, BatchNormMode::eval);
    const Tensor& x = tape.value(compose(fw, net, maps));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x[i], 1.5 * maps.x_5_3[i]);
}

TEST(Attention, ZeroWeightAgemEqualsGem) {
    std::mt19937_64 rng(3);
    const auto model = make_model(kToy, PoolingSpec::gem(), rng, std::nullopt, true, true);
    const auto maps = random_stages(rng, 1);
    const auto a = describe(model, maps, DescriptorKind::agem);
    const auto g = describe(model, maps, DescriptorKind::gem);
    ASSERT_EQ(a.size(), g.size());
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], g[k], 1e-12);
}

TEST(Attention, CompositionMatchesManualChain) {
    // Recompute A_4_23 -> A_5_1 -> A_5_2 -> X with separate tapes.
    std::mt19937_64 rng(4);
    ParameterStore store;
    const auto net = AttentionNet::create(store, kToy, rng);
    const auto maps = random_stages(rng);
    auto run = [&](auto&& fn) {
        Tape t;
        Forward fw(t, store, BatchNormMode::eval);
        return t.value(fn(fw)).values();
    };
    const auto a4 = run([&](Forward& fw) { return att1_forward(fw, net, fw.tape.leaf(maps.x_4_23)); });
    std::vector<real> m1(a4.size()), m2(a4.size()), expected(a4.size());
    for (std::size_t i = 0; i < a4.size(); ++i) m1[i] = a4[i] * maps.x_5_1[i];
    const auto a51 = run([&](Forward& fw) {
        return att2_forward(fw, net.att2_1, fw.tape.leaf(Tensor(maps.x_5_1.shape(), m1)));
    });
    for (std::size_t i = 0; i < a4.size(); ++i) m2[i] = a51[i] * maps.x_5_2[i];
    const auto a52 = run([&](Forward& fw) {
        return att2_forward(fw, net.att2_2, fw.tape.leaf(Tensor(maps.x_5_2.shape(), m2)));
    });
    for (std::size_t i = 0; i < a4.size(); ++i) expected[i] = maps.x_5_3[i] * (1 + a52[i]);
    const auto got = run([&](Forward& fw) { return compose(fw, net, maps); });
    ASSERT_EQ(got.size(), expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
}

TEST(Attention, AttentionMapsLieInUnitInterval) {
    std::mt19937_64 rng(5);
    ParameterStore store;
    const auto net = AttentionNet::create(store, kToy, rng);
    const auto maps = random_stages(rng);
    Tape tape;
    Forward fw(tape, store, BatchNormMode::eval);
    for (real v : tape.value(att1_forward(fw, net, tape.leaf(maps.x_4_23))).data()) {
        EXPECT_GT(v, 0);
        EXPECT_LT(v, 1);
    }
}

TEST(Attention, RejectsMismatchedTaps) {
    std::mt19937_64 rng(6);
    ParameterStore store;
    const auto net = AttentionNet::create(store, kToy, rng);
    auto maps = random_stages(rng);
    auto expect_rejected = [&](const StageMaps& m) {
        Tape tape;
        Forward fw(tape, store, BatchNormMode::eval);
        EXPECT_THROW(compose(fw, net, m), ShapeError);
    };
    auto bad = maps;
    bad.x_5_2 = Tensor(Shape{2, 16, 4, 4});
    expect_rejected(bad);
    bad = maps;
    bad.x_4_23 = Tensor(Shape{2, 4, 6, 6});
    expect_rejected(bad);
    bad = maps;
    bad.x_4_23 = Tensor(Shape{2, 8, 12, 12});
    expect_rejected(bad);
    bad = maps;
    bad.x_5_1 = Tensor(Shape{2, 8, 3, 3});
    bad.x_5_2 = bad.x_5_1;
    bad.x_5_3 = bad.x_5_1;
    expect_rejected(bad);
}

TEST(Attention, InitializationVariance) {
    std::mt19937_64 rng(7);
    ParameterStore store;
    AttentionNet::create(store, AttentionConfig{64, {64, 32, 32, 64}}, rng);
    auto sample_var = [&](const std::string& name) {
        const auto& t = store[store.index_of(name)].value;
        real s = 0, s2 = 0;
        for (real v : t.data()) s += v, s2 += v * v;
        const real n = static_cast<real>(t.size());
        return s2 / n - (s / n) * (s / n);
    };
    EXPECT_NEAR(sample_var("att1.conv1.weight") / (2.0 / (64 * 9)), 1, 0.05);
    EXPECT_NEAR(sample_var("att1.conv3.weight") / (2.0 / 32), 1, 0.1);
    EXPECT_NEAR(sample_var("att1.conv4.weight") / (1.0 / 32), 1, 0.1);
    EXPECT_NEAR(sample_var("att2_1.conv.weight") / (1.0 / 64), 1, 0.1);
    for (real v : store[store.index_of("att1.conv2.bias")].value.data()) EXPECT_EQ(v, 0);
    EXPECT_EQ(store[store.index_of("att1.bn1.gamma")].value[0], 1);
    EXPECT_EQ(store[store.index_of("att1.bn1.running_var")].group, ParamGroup::buffer);
}

TEST(Attention, FindRecoversLayout) {
    std::mt19937_64 rng(8);
    ParameterStore store;
    const auto made = AttentionNet::create(store, kToy, rng);
    const auto found = AttentionNet::find(store);
    EXPECT_EQ(found.config, made.config);
    EXPECT_EQ(found.att1[0].stride, 2u);
    EXPECT_EQ(found.att1[0].padding, 1u);
    EXPECT_EQ(found.att1[2].padding, 0u);
    EXPECT_EQ(found.att2_2.weight, made.att2_2.weight);
}

TEST(Attention, GradientWrtTapsEvalAndTrain) {
    std::mt19937_64 rng(9);
    ParameterStore store;
    const auto net = AttentionNet::create(store, kToy, rng);
    jitter_offsets(store, rng);
    const auto maps = random_stages(rng, 2, 5);
    const Tensor mix = random_normal(maps.x_5_3.shape(), rng);
    for (auto mode : {BatchNormMode::eval, BatchNormMode::train}) {
        const real err = grad_check(
            [&](Tape& t, std::span<const Var> in) {
                Forward fw(t, store, mode);
                return dot(t, attention_compose(fw, net, {in[0], in[1], in[2], in[3]}), t.leaf(mix));
            },
            {maps.x_4_23, maps.x_5_1, maps.x_5_2, maps.x_5_3});
        EXPECT_LT(err, 1e-4) << (mode == BatchNormMode::train ? "train" : "eval");
    }
}

TEST(Attention, GradientWrtParameters) {
    std::mt19937_64 rng(10);
    ParameterStore store;
    const auto net = AttentionNet::create(store, kToy, rng);
    jitter_offsets(store, rng);
    const auto maps = random_stages(rng, 2, 5);
    const Tensor mix = random_normal(maps.x_5_3.shape(), rng);
    for (auto mode : {BatchNormMode::eval, BatchNormMode::train}) {
        const real err = test::param_grad_error(
            store, [&](Forward& fw) { return dot(fw.tape, compose(fw, net, maps), fw.tape.leaf(mix)); }, mode);
        EXPECT_LT(err, 1e-4);
    }
}

TEST(Attention, AgemDescriptorGradientIncludesExponent) {
    std::mt19937_64 rng(11);
    auto model = make_model(kToy, PoolingSpec::gem(), rng);
    jitter_offsets(model.params, rng);
    const auto maps = random_stages(rng, 1, 5);
    const Tensor mix = random_normal(Shape{1, 16, 1, 1}, rng);
    const real err = test::param_grad_error(
        model.params,
        [&](Forward& fw) {
            const auto s = bind_stages(fw.tape, maps);
            return dot(fw.tape, descriptor_from_stages(fw, model, s, DescriptorKind::agem), fw.tape.leaf(mix));
        },
        BatchNormMode::train);
    EXPECT_LT(err, 1e-4);
}

TEST(BatchNormStats, RunningAverageUpdate) {
    std::mt19937_64 rng(12);
    ParameterStore store;
    const auto net = AttentionNet::create(store, kToy, rng);
    const auto maps = random_stages(rng, 3, 6);
    Tape tape;
    Forward fw(tape, store, BatchNormMode::train);
    compose(fw, net, maps);
    ASSERT_EQ(fw.observed.size(), 3u);
    const auto& [bn, m] = fw.observed[0];
    update_running_stats(store, fw.observed, 0.1);
    for (std::size_t c = 0; c < m.mean.size(); ++c) {
        EXPECT_DOUBLE_EQ(store[bn.running_mean].value[c], 0.1 * m.mean[c]);
        EXPECT_DOUBLE_EQ(store[bn.running_var].value[c], 0.9 + 0.1 * m.var[c]);
    }
}

TEST(ToyBackbone, TapShapes) {
    std::mt19937_64 rng(13);
    const auto model = make_model(kToy, PoolingSpec::gem(), rng, ToyBackboneConfig{});
    const auto s = backbone_stages(model, random_normal(Shape{2, 3, 12, 12}, rng));
    EXPECT_EQ(s.x_4_23.shape(), (Shape{2, 8, 12, 12}));
    EXPECT_EQ(s.x_5_1.shape(), (Shape{2, 16, 6, 6}));
    EXPECT_EQ(s.x_5_3.shape(), (Shape{2, 16, 6, 6}));
    const auto d = describe_images(model, random_normal(Shape{1, 3, 12, 12}, rng), DescriptorKind::agem);
    EXPECT_EQ(d.size(), 16u);
    EXPECT_NEAR(norm(d), 1, 1e-12);
}

TEST(ModelIo, SaveLoadRoundTrip) {
    std::mt19937_64 rng(14);
    const auto model = make_model(kToy, PoolingSpec::gem(), rng, ToyBackboneConfig{});
    const auto dir = std::filesystem::temp_directory_path() / "agem_attention_test_model";
    std::filesystem::remove_all(dir);
    save_model(dir, model);
    const auto loaded = load_model(dir);
    ASSERT_EQ(loaded.params.size(), model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        EXPECT_EQ(loaded.params[i].name, model.params[i].name);
        EXPECT_EQ(loaded.params[i].value, model.params[i].value);
        EXPECT_EQ(loaded.params[i].group, model.params[i].group);
    }
    const Tensor img = random_normal(Shape{1, 3, 12, 12}, rng);
    EXPECT_EQ(describe_images(loaded, img, DescriptorKind::agem), describe_images(model, img, DescriptorKind::agem));
    std::filesystem::remove_all(dir);
}

} // namespace
} // namespace agem
