#include <agem/training.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace agem {
namespace {

const AttentionConfig kToy{8, {16, 8, 8, 16}};

TEST(ContrastiveLoss, Examples) {
    const std::vector<real> a{0, 0}, b{0.3, 0.4};  // distance 0.5
    EXPECT_NEAR(contrastive_loss(a, b, true, 0.85), 0.125, 1e-15);
    EXPECT_NEAR(contrastive_loss(a, b, false, 0.85), 0.5 * 0.35 * 0.35, 1e-15);
    EXPECT_EQ(contrastive_loss(a, b, false, 0.5), 0);
    EXPECT_EQ(contrastive_loss(a, b, false, 0.3), 0);
    EXPECT_EQ(contrastive_loss(a, a, true, 0.85), 0);
    EXPECT_NEAR(contrastive_loss(a, a, false, 0.85), 0.5 * 0.85 * 0.85, 1e-15);
    EXPECT_THROW(contrastive_loss(a, std::vector<real>{1}, true, 0.85), ShapeError);
}

TEST(ContrastiveLoss, GradientAwayFromKinks) {
    std::mt19937_64 rng(1);
    for (bool matching : {true, false}) {
        const Tensor a = random_normal(Shape{1, 4, 1, 1}, rng, 0, 0.1);
        const Tensor b = random_normal(Shape{1, 4, 1, 1}, rng, 0, 0.1);
        const real err = grad_check(
            [&](Tape& t, std::span<const Var> in) { return contrastive_loss(t, in[0], in[1], matching, 0.85); },
            {a, b});
        EXPECT_LT(err, 1e-6);
    }
}

TEST(ContrastiveLoss, NoGradientBeyondMarginOrAtZeroDistance) {
    Tape tape;
    const Var a = tape.leaf(Tensor::vector({1, 0}));
    const Var b = tape.leaf(Tensor::vector({0, 1}));
    auto g = tape.backward(contrastive_loss(tape, a, b, false, 0.85));
    for (real v : g[a].data()) EXPECT_EQ(v, 0);
    Tape t2;
    const Var c = t2.leaf(Tensor::vector({0.6, 0.8}));
    const Var d = t2.leaf(Tensor::vector({0.6, 0.8}));
    g = t2.backward(contrastive_loss(t2, c, d, false, 0.85));
    for (real v : g[c].data()) EXPECT_EQ(v, 0);
}

TEST(Schedule, ExponentialDecayPerGroup) {
    const TrainConfig cfg;
    EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, ParamGroup::base, 0), 1e-6);
    EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, ParamGroup::p, 0), 1e-5);
    EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, ParamGroup::attention, 0), 1e-3);
    EXPECT_NEAR(lr_at_epoch(cfg, ParamGroup::attention, 10), 1e-3 * std::exp(-0.1), 1e-18);
    EXPECT_NEAR(lr_at_epoch(cfg, ParamGroup::base, 59), 1e-6 * std::exp(-0.59), 1e-20);
    EXPECT_EQ(lr_at_epoch(cfg, ParamGroup::buffer, 0), 0);
}

TEST(Defaults, MatchReferenceHyperparameters) {
    const TrainConfig cfg;
    EXPECT_DOUBLE_EQ(cfg.margin, 0.85);
    EXPECT_DOUBLE_EQ(cfg.weight_decay, 1e-4);
    EXPECT_EQ(cfg.epochs, 60u);
    EXPECT_EQ(cfg.tuples_per_epoch, 2000u);
    EXPECT_EQ(cfg.batch_size, 10u);
    EXPECT_EQ(cfg.negatives, 5u);
    EXPECT_EQ(cfg.pool_size, 20000u);
    const auto round = train_config_from_json(to_json(cfg));
    EXPECT_EQ(to_json(round), to_json(cfg));
}

ParameterStore scalar_store() {
    ParameterStore s;
    s.add("w", Tensor::vector({0.5, -2.0}), ParamGroup::attention, true);
    s.add("pool.p", Tensor::scalar(3), ParamGroup::p, false);
    s.add("bn.gamma", Tensor::scalar(1), ParamGroup::attention, false);
    s.add("bn.running_mean", Tensor::scalar(0.25), ParamGroup::buffer, false);
    return s;
}

TEST(Adam, FirstStepMatchesHandComputation) {
    auto params = scalar_store();
    auto state = AdamState::for_params(params);
    TrainConfig cfg;
    cfg.lr_attention = 0.01;
    cfg.lr_p = 0.1;
    const std::vector<Tensor> grads{Tensor::vector({0.2, -4.0}), Tensor::scalar(0.5), Tensor::scalar(-1),
                                    Tensor::scalar(7)};
    adam_step(state, params, grads, cfg, 0);
    // After one step m_hat = g and v_hat = g^2, so the step is g / (|g| + eps).
    auto expected = [&](real theta, real g, real lr, real wd) {
        return theta - lr * g / (std::abs(g) + cfg.adam_eps) - lr * wd * theta;
    };
    EXPECT_NEAR(params[0].value[0], expected(0.5, 0.2, 0.01, 1e-4), 1e-15);
    EXPECT_NEAR(params[0].value[1], expected(-2.0, -4.0, 0.01, 1e-4), 1e-15);
    EXPECT_NEAR(params[1].value[0], expected(3, 0.5, 0.1, 0), 1e-15);
    EXPECT_NEAR(params[2].value[0], expected(1, -1, 0.01, 0), 1e-15);
    EXPECT_EQ(params[3].value[0], 0.25);
    EXPECT_EQ(state.step, 1u);
}

TEST(Adam, SecondStepUsesBiasCorrectedMoments) {
    auto params = scalar_store();
    auto state = AdamState::for_params(params);
    TrainConfig cfg;
    cfg.lr_attention = 0.01;
    cfg.weight_decay = 0;
    const real g1 = 0.2, g2 = -0.6;
    adam_step(state, params, std::vector<Tensor>{Tensor::vector({g1, 0}), Tensor::scalar(0), Tensor::scalar(0),
                                                 Tensor::scalar(0)},
              cfg, 3);
    const real after1 = params[0].value[0];
    adam_step(state, params, std::vector<Tensor>{Tensor::vector({g2, 0}), Tensor::scalar(0), Tensor::scalar(0),
                                                 Tensor::scalar(0)},
              cfg, 3);
    const real m = 0.9 * 0.1 * g1 + 0.1 * g2;
    const real v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
    const real mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
    const real lr = 0.01 * std::exp(-0.03);
    EXPECT_NEAR(params[0].value[0], after1 - lr * mh / (std::sqrt(vh) + 1e-8), 1e-14);
}

TEST(Adam, ExponentIsClamped) {
    auto params = scalar_store();
    auto state = AdamState::for_params(params);
    TrainConfig cfg;
    cfg.lr_p = 50;
    std::vector<Tensor> grads{Tensor::vector({0, 0}), Tensor::scalar(1), Tensor::scalar(0), Tensor::scalar(0)};
    adam_step(state, params, grads, cfg, 0);
    EXPECT_EQ(params[1].value[0], kMinP);
    grads[1] = Tensor::scalar(-1);
    for (int i = 0; i < 5; ++i) adam_step(state, params, grads, cfg, 0);
    EXPECT_EQ(params[1].value[0], kMaxP);
}

TEST(Adam, NonFiniteGradientAbortsWithoutMutation) {
    auto params = scalar_store();
    auto state = AdamState::for_params(params);
    const auto before = params[0].value;
    std::vector<Tensor> grads{Tensor::vector({0.1, 0.1}), Tensor::scalar(std::nan("")), Tensor::scalar(0),
                              Tensor::scalar(0)};
    try {
        adam_step(state, params, grads, TrainConfig{}, 0);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("pool.p"), std::string::npos);
    }
    EXPECT_EQ(params[0].value, before);
    EXPECT_EQ(state.step, 0u);
}

DescriptorSet mining_pool() {
    DescriptorSet pool;
    pool.add("a1", std::vector<real>{1, 0});
    pool.add("a2", std::vector<real>{0.9, 0.1});
    pool.add("b1", std::vector<real>{0.8, 0.6});
    pool.add("b2", std::vector<real>{0.6, 0.8});
    pool.add("c1", std::vector<real>{0, 1});
    pool.add("d1", std::vector<real>{0.8, 0.6});
    return pool;
}

TEST(Mining, TopSimilarityOnePerClusterTiesById) {
    const auto pool = mining_pool();
    const std::vector<int> labels{0, 0, 1, 1, 2, 3};
    const std::vector<real> q{1, 0};
    EXPECT_EQ(mine_hard_negatives(q, pool, labels, 0, 1), (std::vector<std::string>{"b1"}));
    EXPECT_EQ(mine_hard_negatives(q, pool, labels, 0, 2), (std::vector<std::string>{"b1", "d1"}));
    EXPECT_EQ(mine_hard_negatives(q, pool, labels, 0, 3), (std::vector<std::string>{"b1", "d1", "c1"}));
    EXPECT_EQ(mine_hard_negatives(q, pool, labels, 1, 2), (std::vector<std::string>{"a1", "d1"}));
    EXPECT_TRUE(mine_hard_negatives(q, pool, labels, 0, 0).empty());
}

TEST(Mining, TooFewClustersIsDataError) {
    const auto pool = mining_pool();
    const std::vector<int> labels{0, 0, 1, 1, 2, 3};
    EXPECT_THROW(mine_hard_negatives(std::vector<real>{1, 0}, pool, labels, 0, 4), DataError);
    EXPECT_THROW(mine_hard_negatives(std::vector<real>{1, 0}, pool, std::vector<int>{0, 1}, 0, 1), ShapeError);
}

TEST(ToyData, DeterministicAndLabelled) {
    std::mt19937_64 r1(5), r2(5);
    ToyDataConfig cfg;
    cfg.clusters = 3;
    cfg.images_per_cluster = 4;
    const auto a = make_toy_dataset(cfg, 3, r1);
    const auto b = make_toy_dataset(cfg, 3, r2);
    ASSERT_EQ(a.ids.size(), 12u);
    EXPECT_EQ(a.ids, b.ids);
    for (std::size_t i = 0; i < a.images.size(); ++i) EXPECT_EQ(a.images[i], b.images[i]);
    EXPECT_EQ(a.labels[0], 0);
    EXPECT_EQ(a.labels[11], 2);
    EXPECT_EQ(a.images[0].shape(), (Shape{1, 3, 12, 12}));
    EXPECT_THROW(a.image("nope"), DataError);
}

struct ToySetup {
    std::mt19937_64 rng{7};
    ToyDataset data;
    DescriptorModel model;
    TrainConfig cfg;

    ToySetup() {
        ToyDataConfig dc;
        dc.images_per_cluster = 5;
        dc.height = dc.width = 8;
        data = make_toy_dataset(dc, 3, rng);
        model = make_model(kToy, PoolingSpec::gem(), rng, ToyBackboneConfig{});
        cfg.negatives = 1;
        cfg.batch_size = 2;
        cfg.lr_base = 1e-3;
        cfg.lr_p = 1e-2;
        cfg.lr_attention = 1e-2;
    }
};

TEST(Training, TupleLossMatchesScalarOracle) {
    ToySetup s;
    const auto pool = describe_dataset(s.model, s.data);
    std::mt19937_64 rng(8);
    const auto tuples = make_tuples(s.data, pool, 3, 1, rng);
    for (const auto& t : tuples) {
        EXPECT_NE(s.data.label(t.query), s.data.label(t.negatives[0]));
        EXPECT_EQ(s.data.label(t.query), s.data.label(t.positive));
        EXPECT_NE(t.query, t.positive);
        // In eval mode each image's descriptor is independent of the batch.
        Tape tape;
        Forward fw(tape, s.model.params, BatchNormMode::eval);
        const auto tl = tuple_loss(fw, s.model, s.data, t, s.cfg.margin);
        const real expected = contrastive_loss(pool.row(t.query), pool.row(t.positive), true, s.cfg.margin) +
                              contrastive_loss(pool.row(t.query), pool.row(t.negatives[0]), false, s.cfg.margin);
        EXPECT_NEAR(tape.value(tl.loss).item(), expected, 1e-12);
    }
}

TEST(Training, TupleLossGradientMatchesFiniteDifferences) {
    ToySetup s;
    const auto pool = describe_dataset(s.model, s.data);
    std::mt19937_64 rng(9);
    const auto tuple = make_tuples(s.data, pool, 1, 1, rng).front();
    const real err = test::param_grad_error(
        s.model.params, [&](Forward& fw) { return tuple_loss(fw, s.model, s.data, tuple, 2.0).loss; },
        BatchNormMode::train, 3);
    EXPECT_LT(err, 1e-4);
}

TEST(Training, EpochsReduceLossAndKeepPInRange) {
    ToySetup s;
    std::mt19937_64 rng(10);
    auto adam = AdamState::for_params(s.model.params);
    const auto eval_tuples = make_tuples(s.data, describe_dataset(s.model, s.data), 8, 1, rng);
    const real before = evaluate_tuples(s.model, s.data, eval_tuples, s.cfg.margin).mean_loss;
    for (std::size_t epoch = 0; epoch < 4; ++epoch) {
        const auto tuples = make_tuples(s.data, describe_dataset(s.model, s.data), 8, 1, rng);
        const auto stats = train_epoch(s.model, s.data, tuples, s.cfg, adam, epoch);
        EXPECT_TRUE(std::isfinite(stats.mean_loss));
        EXPECT_GE(stats.p, kMinP);
        EXPECT_LE(stats.p, kMaxP);
    }
    const real after = evaluate_tuples(s.model, s.data, eval_tuples, s.cfg.margin).mean_loss;
    EXPECT_LT(after, before);
}

TEST(Training, CheckpointRoundTrip) {
    ToySetup s;
    std::mt19937_64 rng(11);
    auto adam = AdamState::for_params(s.model.params);
    const auto tuples = make_tuples(s.data, describe_dataset(s.model, s.data), 4, 1, rng);
    train_epoch(s.model, s.data, tuples, s.cfg, adam, 0);
    const auto dir = std::filesystem::temp_directory_path() / "agem_training_test_ckpt";
    std::filesystem::remove_all(dir);
    save_checkpoint(dir, s.model, adam, 1, s.cfg, 42);
    const auto ck = load_checkpoint(dir);
    EXPECT_EQ(ck.epoch, 1u);
    EXPECT_EQ(ck.adam.step, adam.step);
    for (std::size_t i = 0; i < adam.m.size(); ++i) {
        EXPECT_EQ(ck.adam.m[i], adam.m[i]);
        EXPECT_EQ(ck.adam.v[i], adam.v[i]);
        EXPECT_EQ(ck.model.params[i].value, s.model.params[i].value);
    }
    EXPECT_EQ(to_json(ck.config), to_json(s.cfg));
    EXPECT_EQ(read_manifest(dir).at("seed"), 42);
    std::filesystem::remove_all(dir);
}

TEST(Training, StatsCsvLayout) {
    const std::string csv = stats_csv({{0, 0.5, 0.25, 0.75, 2.92}, {1, 0.125, 0.2, 0.8, 3.0}}, 99);
    EXPECT_EQ(csv,
              "# seed=99\n"
              "epoch,mean_loss,mean_pos_dist,mean_neg_dist,p\n"
              "0,0.500000,0.250000,0.750000,2.920000\n"
              "1,0.125000,0.200000,0.800000,3.000000\n");
}

TEST(Adam, ConstantGradientStepsApproachLearningRate) {
    ParameterStore params;
    params.add("w", Tensor::scalar(0), ParamGroup::attention, false);
    auto state = AdamState::for_params(params);
    TrainConfig cfg;
    cfg.lr_attention = 1e-3;
    real prev = 0;
    for (int i = 0; i < 200; ++i) {
        prev = params[0].value[0];
        adam_step(state, params, std::vector<Tensor>{Tensor::scalar(-0.3)}, cfg, 0);
    }
    EXPECT_NEAR(params[0].value[0] - prev, 1e-3, 1e-9);
}

TEST(Adam, ZeroGradientsAndNoDecayLeaveParametersUnchanged) {
    auto params = scalar_store();
    const auto before = params;
    auto state = AdamState::for_params(params);
    TrainConfig cfg;
    cfg.weight_decay = 0;
    std::vector<Tensor> zeros;
    for (const auto& p : params) zeros.push_back(zeros_like(p.value));
    adam_step(state, params, zeros, cfg, 0);
    for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i].value, before[i].value);
}

TEST(Training, ZeroLearningRateKeepsParameters) {
    ToySetup s;
    s.cfg.lr_base = s.cfg.lr_p = s.cfg.lr_attention = 0;
    const auto before = s.model.params;
    std::mt19937_64 rng(12);
    auto adam = AdamState::for_params(s.model.params);
    const auto tuples = make_tuples(s.data, describe_dataset(s.model, s.data), 4, 1, rng);
    const auto stats = train_epoch(s.model, s.data, tuples, s.cfg, adam, 0);
    EXPECT_GT(stats.mean_loss, 0);
    for (std::size_t i = 0; i < before.size(); ++i) {
        if (before[i].group == ParamGroup::buffer) continue;
        EXPECT_EQ(s.model.params[i].value, before[i].value) << before[i].name;
    }
}

TEST(Training, FrozenAttentionGroupIsBitwiseUnchanged) {
    ToySetup s;
    s.cfg.lr_attention = 0;
    const auto before = s.model.params;
    std::mt19937_64 rng(13);
    auto adam = AdamState::for_params(s.model.params);
    const auto tuples = make_tuples(s.data, describe_dataset(s.model, s.data), 4, 1, rng);
    train_epoch(s.model, s.data, tuples, s.cfg, adam, 0);
    bool base_moved = false;
    for (std::size_t i = 0; i < before.size(); ++i) {
        if (before[i].group == ParamGroup::attention) {
            EXPECT_EQ(s.model.params[i].value, before[i].value);
        }
        if (before[i].group == ParamGroup::base) base_moved |= !(s.model.params[i].value == before[i].value);
    }
    EXPECT_TRUE(base_moved);
}

TEST(Training, SingleStepDescendsOnItsTuple) {
    ToySetup s;
    s.cfg.lr_base = s.cfg.lr_attention = 1e-4;
    s.cfg.lr_p = 1e-4;
    s.cfg.batch_size = 1;
    std::mt19937_64 rng(14);
    auto adam = AdamState::for_params(s.model.params);
    const auto tuples = make_tuples(s.data, describe_dataset(s.model, s.data), 1, 1, rng);
    const real before = evaluate_tuples(s.model, s.data, tuples, s.cfg.margin, BatchNormMode::train).mean_loss;
    train_epoch(s.model, s.data, tuples, s.cfg, adam, 0);
    const real after = evaluate_tuples(s.model, s.data, tuples, s.cfg.margin, BatchNormMode::train).mean_loss;
    EXPECT_LT(after, before);
}

TEST(ToyRun, DeterministicForFixedSeed) {
    ToyRunConfig cfg;
    cfg.train.epochs = 2;
    cfg.train.tuples_per_epoch = 8;
    cfg.eval_tuples = 4;
    const auto a = run_toy_training(cfg, 5);
    const auto b = run_toy_training(cfg, 5);
    EXPECT_EQ(stats_csv(a.epochs, 5), stats_csv(b.epochs, 5));
    EXPECT_EQ(a.steps, 4u);
    for (std::size_t i = 0; i < a.model.params.size(); ++i) EXPECT_EQ(a.model.params[i].value, b.model.params[i].value);
    const auto c = run_toy_training(cfg, 6);
    EXPECT_NE(stats_csv(a.epochs, 5), stats_csv(c.epochs, 5));
}

TEST(ToyRun, ConfigJsonRoundTripAndValidation) {
    ToyRunConfig cfg;
    cfg.train.epochs = 3;
    cfg.data.noise = 0.25;
    const auto back = toy_run_config_from_json(to_json(cfg));
    EXPECT_EQ(to_json(back), to_json(cfg));
    auto bad = to_json(cfg);
    bad["backbone"]["b5_channels"] = 12;
    EXPECT_THROW(toy_run_config_from_json(bad), DataError);
    bad = to_json(cfg);
    bad["train"]["epochs"] = "many";
    EXPECT_THROW(toy_run_config_from_json(bad), FormatError);
}

} // namespace
} // namespace agem
