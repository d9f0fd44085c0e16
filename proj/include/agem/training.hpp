#pragma once

// Contrastive fine-tuning: loss, Adam with per-group learning rates and
// exponential decay, hard-negative mining, and the epoch loop over a
// synthetic clustered image set pushed through the toy backbone.

#include <agem/descriptors.hpp>
#include <agem/model.hpp>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace agem {

// ---------------------------------------------------------------------------
// Contrastive loss

/// Matching: 0.5 |a-b|^2. Non-matching: 0.5 max(0, tau - |a-b|)^2.
inline real contrastive_loss(std::span<const real> a, std::span<const real> b, bool matching, real tau) {
    require_shape(a.size() == b.size(), "contrastive_loss dimension mismatch");
    real d2 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    if (matching) return d2 / 2;
    const real gap = std::max(real(0), tau - std::sqrt(d2));
    return gap * gap / 2;
}

inline Var contrastive_loss(Tape& tape, Var a, Var b, bool matching, real tau) {
    const Tensor& x = tape.value(a);
    const Tensor& z = tape.value(b);
    require_shape(x.shape() == z.shape(), "contrastive_loss shape mismatch");
    std::vector<real> diff(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) diff[i] = x[i] - z[i];
    const real dist = norm(diff);
    const real loss = contrastive_loss(x.data(), z.data(), matching, tau);
    // d loss / d a = coeff * (a - b)
    real coeff = 0;
    if (matching) {
        coeff = 1;
    } else if (dist < tau && dist > 0) {
        coeff = -(tau - dist) / dist;
    }
    return tape.record(OpKind::contrastive_loss, {a, b}, Tensor::scalar(loss),
                       [diff = std::move(diff), coeff](const Tensor& g, std::span<Tensor* const> grads) {
                           if (coeff == 0) return;
                           for (std::size_t i = 0; i < diff.size(); ++i) {
                               (*grads[0])[i] += g[0] * coeff * diff[i];
                               (*grads[1])[i] -= g[0] * coeff * diff[i];
                           }
                       });
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    real margin = real(0.85);
    real lr_base = real(1e-6);
    real lr_p = real(1e-5);
    real lr_attention = real(1e-3);
    real lr_decay = real(0.01);
    real weight_decay = real(1e-4);
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real adam_eps = real(1e-8);
    std::size_t epochs = 60;
    std::size_t tuples_per_epoch = 2000;
    std::size_t batch_size = 10;
    std::size_t negatives = 5;
    std::size_t pool_size = 20000;
    real bn_momentum = real(0.1);

    void validate() const {
        if (!(margin > 0 && margin <= 2)) throw DataError("margin must lie in (0, 2]");
        for (real v : {lr_base, lr_p, lr_attention, lr_decay, weight_decay}) {
            if (v < 0) throw DataError("learning rates and decays must be non-negative");
        }
        if (batch_size == 0) throw DataError("batch size must be positive");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"margin", c.margin},           {"lr_base", c.lr_base},
            {"lr_p", c.lr_p},               {"lr_attention", c.lr_attention},
            {"lr_decay", c.lr_decay},       {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},             {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},       {"epochs", c.epochs},
            {"tuples_per_epoch", c.tuples_per_epoch}, {"batch_size", c.batch_size},
            {"negatives", c.negatives},     {"pool_size", c.pool_size},
            {"bn_momentum", c.bn_momentum}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    c.margin = j.value("margin", c.margin);
    c.lr_base = j.value("lr_base", c.lr_base);
    c.lr_p = j.value("lr_p", c.lr_p);
    c.lr_attention = j.value("lr_attention", c.lr_attention);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.epochs = j.value("epochs", c.epochs);
    c.tuples_per_epoch = j.value("tuples_per_epoch", c.tuples_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.negatives = j.value("negatives", c.negatives);
    c.pool_size = j.value("pool_size", c.pool_size);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    return c;
}

/// group learning rate * exp(-decay * epoch).
inline real lr_at_epoch(const TrainConfig& cfg, ParamGroup group, std::size_t epoch) {
    real base = 0;
    switch (group) {
        case ParamGroup::base: base = cfg.lr_base; break;
        case ParamGroup::p: base = cfg.lr_p; break;
        case ParamGroup::attention: base = cfg.lr_attention; break;
        case ParamGroup::buffer: return 0;
    }
    return base * std::exp(-cfg.lr_decay * static_cast<real>(epoch));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;

    static AdamState for_params(const ParameterStore& params) {
        AdamState s;
        for (const auto& p : params) {
            s.m.push_back(zeros_like(p.value));
            s.v.push_back(zeros_like(p.value));
        }
        return s;
    }
};

/// One Adam update with bias correction, decoupled weight decay lr*wd*theta
/// on decay-enabled parameters, then p clamped to [1, 10]. `grads` is
/// aligned with `params`. Non-finite gradients abort before any mutation.
inline void adam_step(AdamState& state, ParameterStore& params, std::span<const Tensor> grads, const TrainConfig& cfg,
                      std::size_t epoch) {
    require_shape(grads.size() == params.size() && state.m.size() == params.size(),
                  "adam_step: gradient/state count does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].group == ParamGroup::buffer) continue;
        for (real g : grads[i].data()) {
            if (!std::isfinite(g)) throw NumericalError("non-finite gradient for parameter " + params[i].name);
        }
    }
    ++state.step;
    const real t = static_cast<real>(state.step);
    const real c1 = 1 - std::pow(cfg.beta1, t);
    const real c2 = 1 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (p.group == ParamGroup::buffer) continue;
        const real lr = lr_at_epoch(cfg, p.group, epoch);
        const real wd = p.weight_decay ? cfg.weight_decay : 0;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const real g = grads[i][k];
            m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g;
            const real update = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.adam_eps);
            p.value[k] -= lr * update + lr * wd * p.value[k];
        }
        if (p.group == ParamGroup::p) {
            for (auto& x : p.value.data()) x = std::clamp(x, kMinP, kMaxP);
        }
    }
}

// ---------------------------------------------------------------------------
// Tuples and hard-negative mining

struct TrainingTuple {
    std::string query;
    std::string positive;
    std::vector<std::string> negatives;
};

/// The k most similar pool items whose cluster differs from the query's, at
/// most one per cluster; ties broken by id. `labels` is aligned with `pool`.
inline std::vector<std::string> mine_hard_negatives(std::span<const real> query, const DescriptorSet& pool,
                                                    std::span<const int> labels, int query_label, std::size_t k) {
    require_shape(labels.size() == pool.size(), "mine_hard_negatives: labels do not match pool");
    if (k == 0) return {};
    std::vector<std::pair<real, std::size_t>> scored;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (labels[i] != query_label) scored.emplace_back(dot(query, pool.row(i)), i);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return pool.id(a.second) < pool.id(b.second);
    });
    std::vector<std::string> out;
    std::vector<int> used;
    for (const auto& [sim, i] : scored) {
        if (std::find(used.begin(), used.end(), labels[i]) != used.end()) continue;
        used.push_back(labels[i]);
        out.push_back(pool.id(i));
        if (out.size() == k) return out;
    }
    throw DataError("negative pool has only " + std::to_string(out.size()) + " eligible clusters, need " +
                    std::to_string(k));
}

// ---------------------------------------------------------------------------
// Synthetic data

struct ToyDataConfig {
    std::size_t clusters = 2;
    std::size_t images_per_cluster = 12;
    std::size_t height = 12;
    std::size_t width = 12;
    /// Per-pixel noise around each cluster prototype.
    real noise = real(0.6);
};

/// Images drawn from Gaussian clusters: each cluster has a random prototype
/// and members are prototype + noise. Labels are cluster indices.
struct ToyDataset {
    std::vector<std::string> ids;
    std::vector<Tensor> images;
    std::vector<int> labels;

    std::size_t index_of(const std::string& id) const {
        auto it = std::find(ids.begin(), ids.end(), id);
        if (it == ids.end()) throw DataError("missing training record " + id);
        return static_cast<std::size_t>(it - ids.begin());
    }
    const Tensor& image(const std::string& id) const { return images[index_of(id)]; }
    int label(const std::string& id) const { return labels[index_of(id)]; }
};

template <class Rng>
ToyDataset make_toy_dataset(const ToyDataConfig& cfg, std::size_t channels, Rng& rng) {
    ToyDataset ds;
    for (std::size_t c = 0; c < cfg.clusters; ++c) {
        const Tensor proto = random_normal(Shape{1, channels, cfg.height, cfg.width}, rng);
        for (std::size_t i = 0; i < cfg.images_per_cluster; ++i) {
            Tensor img = proto;
            std::normal_distribution<real> noise(0, cfg.noise);
            for (auto& v : img.data()) v += noise(rng);
            char id[32];
            std::snprintf(id, sizeof id, "c%02zu_i%03zu", c, i);
            ds.ids.emplace_back(id);
            ds.images.push_back(std::move(img));
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    return ds;
}

/// AGeM when the model has attention, plain GeM otherwise.
inline DescriptorKind training_kind(const DescriptorModel& model) {
    return model.attention ? DescriptorKind::agem : DescriptorKind::gem;
}

/// Eval-mode descriptors of every dataset image under the current model.
inline DescriptorSet describe_dataset(const DescriptorModel& model, const ToyDataset& ds) {
    DescriptorSet set;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        set.add(ds.ids[i], describe_images(model, ds.images[i], training_kind(model)));
    }
    return set;
}

/// Random queries with a random same-cluster positive and hard negatives
/// mined against `pool` (descriptors of the dataset under the current model).
template <class Rng>
std::vector<TrainingTuple> make_tuples(const ToyDataset& ds, const DescriptorSet& pool, std::size_t count,
                                       std::size_t negatives, Rng& rng) {
    std::vector<TrainingTuple> tuples;
    std::uniform_int_distribution<std::size_t> pick(0, ds.ids.size() - 1);
    for (std::size_t t = 0; t < count; ++t) {
        const std::size_t q = pick(rng);
        std::vector<std::size_t> same;
        for (std::size_t i = 0; i < ds.ids.size(); ++i)
            if (i != q && ds.labels[i] == ds.labels[q]) same.push_back(i);
        if (same.empty()) throw DataError("cluster of " + ds.ids[q] + " has no positive");
        std::uniform_int_distribution<std::size_t> pos(0, same.size() - 1);
        TrainingTuple tuple;
        tuple.query = ds.ids[q];
        tuple.positive = ds.ids[same[pos(rng)]];
        tuple.negatives = mine_hard_negatives(pool.row(ds.ids[q]), pool, ds.labels, ds.labels[q], negatives);
        tuples.push_back(std::move(tuple));
    }
    return tuples;
}

// ---------------------------------------------------------------------------
// Epoch loop

struct TupleLoss {
    Var loss;
    std::vector<real> pos_dist;
    std::vector<real> neg_dist;
};

/// Sum of the contrastive terms (query, positive) and (query, negative_i).
inline TupleLoss tuple_loss(Forward& fw, const DescriptorModel& model, const ToyDataset& ds, const TrainingTuple& tuple,
                            real margin) {
    require_shape(model.backbone.has_value(), "training needs a toy backbone");
    std::vector<Tensor> members{ds.image(tuple.query), ds.image(tuple.positive)};
    for (const auto& n : tuple.negatives) members.push_back(ds.image(n));
    const Var images = fw.tape.leaf(stack_batch(members));
    const StageVars stages = backbone_forward(fw, *model.backbone, images);
    const Var desc = descriptor_from_stages(fw, model, stages, training_kind(model));

    auto& tape = fw.tape;
    const Var q = select_row(tape, desc, 0);
    auto distance = [&](Var other) {
        const Tensor& a = tape.value(q);
        const Tensor& b = tape.value(other);
        real d2 = 0;
        for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(d2);
    };
    TupleLoss out;
    const Var p = select_row(tape, desc, 1);
    out.pos_dist.push_back(distance(p));
    out.loss = contrastive_loss(tape, q, p, true, margin);
    for (std::size_t i = 0; i < tuple.negatives.size(); ++i) {
        const Var n = select_row(tape, desc, 2 + i);
        out.neg_dist.push_back(distance(n));
        out.loss = add(tape, out.loss, contrastive_loss(tape, q, n, false, margin));
    }
    return out;
}

struct EpochStats {
    std::size_t epoch = 0;
    real mean_loss = 0;
    real mean_pos_dist = 0;
    real mean_neg_dist = 0;
    real p = 0;
};

inline real mean_p(const DescriptorModel& model) {
    const auto p = model.current_pooling().p;
    return std::accumulate(p.begin(), p.end(), real(0)) / static_cast<real>(p.size());
}

namespace detail {

struct StatsAccumulator {
    real loss = 0, pos = 0, neg = 0;
    std::size_t tuples = 0, pos_count = 0, neg_count = 0;

    void add(real tuple_loss, const TupleLoss& t) {
        loss += tuple_loss;
        ++tuples;
        for (real d : t.pos_dist) pos += d, ++pos_count;
        for (real d : t.neg_dist) neg += d, ++neg_count;
    }
    EpochStats finish(std::size_t epoch, real p) const {
        return {epoch, tuples ? loss / static_cast<real>(tuples) : 0, pos_count ? pos / static_cast<real>(pos_count) : 0,
                neg_count ? neg / static_cast<real>(neg_count) : 0, p};
    }
};

} // namespace detail

/// One pass over `tuples` in batches: per batch the tuple losses are averaged,
/// back-propagated, and applied with one Adam step. Returns the pre-update
/// statistics of every tuple.
inline EpochStats train_epoch(DescriptorModel& model, const ToyDataset& ds, std::span<const TrainingTuple> tuples,
                              const TrainConfig& cfg, AdamState& adam, std::size_t epoch) {
    detail::StatsAccumulator acc;
    for (std::size_t start = 0; start < tuples.size(); start += cfg.batch_size) {
        const std::size_t stop = std::min(tuples.size(), start + cfg.batch_size);
        Tape tape;
        Forward fw(tape, model.params, BatchNormMode::train);
        std::optional<Var> total;
        for (std::size_t t = start; t < stop; ++t) {
            TupleLoss tl = tuple_loss(fw, model, ds, tuples[t], cfg.margin);
            acc.add(tape.value(tl.loss).item(), tl);
            total = total ? add(tape, *total, tl.loss) : tl.loss;
        }
        const Var batch_loss = scale(tape, *total, real(1) / static_cast<real>(stop - start));
        const Gradients g = tape.backward(batch_loss);
        std::vector<Tensor> grads;
        grads.reserve(fw.vars.size());
        for (Var v : fw.vars) grads.push_back(g[v]);
        adam_step(adam, model.params, grads, cfg, epoch);
        update_running_stats(model.params, fw.observed, cfg.bn_momentum);
    }
    return acc.finish(epoch, mean_p(model));
}

/// Mean tuple loss and distances without updating anything. Batch norm runs in
/// `mode`; train mode uses each tuple's own batch moments.
inline EpochStats evaluate_tuples(const DescriptorModel& model, const ToyDataset& ds,
                                  std::span<const TrainingTuple> tuples, real margin,
                                  BatchNormMode mode = BatchNormMode::eval) {
    detail::StatsAccumulator acc;
    for (const auto& tuple : tuples) {
        Tape tape;
        Forward fw(tape, model.params, mode);
        TupleLoss tl = tuple_loss(fw, model, ds, tuple, margin);
        acc.add(tape.value(tl.loss).item(), tl);
    }
    return acc.finish(0, mean_p(model));
}

// ---------------------------------------------------------------------------
// Stats CSV and checkpoints

inline std::string format_fixed(real v, int decimals = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, static_cast<double>(v));
    return buf;
}

inline std::string stats_csv(const std::vector<EpochStats>& stats, std::uint64_t seed) {
    std::ostringstream out;
    out << "# seed=" << seed << "\n";
    out << "epoch,mean_loss,mean_pos_dist,mean_neg_dist,p\n";
    for (const auto& s : stats) {
        out << s.epoch << ',' << format_fixed(s.mean_loss) << ',' << format_fixed(s.mean_pos_dist) << ','
            << format_fixed(s.mean_neg_dist) << ',' << format_fixed(s.p) << '\n';
    }
    return out.str();
}

/// Model manifest + parameters, Adam moments, epoch counter and config echo.
inline void save_checkpoint(const std::filesystem::path& dir, const DescriptorModel& model, const AdamState& adam,
                            std::size_t epoch, const TrainConfig& cfg, std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    nlohmann::json moments = nlohmann::json::array();
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& name = model.params[i].name;
        save_tensor(dir / ("adam.m." + name + ".agtf"), adam.m.at(i));
        save_tensor(dir / ("adam.v." + name + ".agtf"), adam.v.at(i));
        moments.push_back({{"name", name}, {"m", "adam.m." + name + ".agtf"}, {"v", "adam.v." + name + ".agtf"}});
    }
    nlohmann::json extra = {{"epoch", epoch},
                            {"seed", seed},
                            {"train_config", to_json(cfg)},
                            {"adam", {{"step", adam.step}, {"moments", moments}}}};
    save_model(dir, model, extra);
}

struct Checkpoint {
    DescriptorModel model;
    AdamState adam;
    std::size_t epoch = 0;
    TrainConfig config;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    Checkpoint ck;
    ck.model = load_model(dir);
    const auto manifest = read_manifest(dir);
    try {
        ck.epoch = manifest.at("epoch").get<std::size_t>();
        ck.config = train_config_from_json(manifest.at("train_config"));
        ck.adam = AdamState::for_params(ck.model.params);
        ck.adam.step = manifest.at("adam").at("step").get<std::size_t>();
        for (const auto& e : manifest.at("adam").at("moments")) {
            const auto i = ck.model.params.index_of(e.at("name").get<std::string>());
            ck.adam.m[i] = load_tensor(dir / e.at("m").get<std::string>());
            ck.adam.v[i] = load_tensor(dir / e.at("v").get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Toy end-to-end run

/// Synthetic run: toy backbone + attention + GeM on a clustered image set.
/// The defaults give 20 epochs of 10 batches, i.e. 200 optimizer steps.
struct ToyRunConfig {
    ToyDataConfig data{};
    ToyBackboneConfig backbone{};
    AttentionConfig attention{8, {16, 8, 8, 16}};
    TrainConfig train = [] {
        TrainConfig c;
        c.epochs = 20;
        c.tuples_per_epoch = 40;
        c.batch_size = 4;
        c.negatives = 1;
        c.lr_base = real(1e-3);
        c.lr_p = real(1e-2);
        c.lr_attention = real(1e-3);
        return c;
    }();
    /// Size of the fixed tuple set used to measure loss before and after.
    std::size_t eval_tuples = 40;
};

inline nlohmann::json to_json(const ToyRunConfig& c) {
    return {{"data",
             {{"clusters", c.data.clusters},
              {"images_per_cluster", c.data.images_per_cluster},
              {"height", c.data.height},
              {"width", c.data.width},
              {"noise", c.data.noise}}},
            {"backbone",
             {{"in_channels", c.backbone.in_channels},
              {"b4_channels", c.backbone.b4_channels},
              {"b5_channels", c.backbone.b5_channels}}},
            {"attention", {{"in_channels", c.attention.in_channels}, {"att1_channels", c.attention.att1_channels}}},
            {"train", to_json(c.train)},
            {"eval_tuples", c.eval_tuples}};
}

inline ToyRunConfig toy_run_config_from_json(const nlohmann::json& j) {
    ToyRunConfig c;
    try {
        if (j.contains("data")) {
            const auto& d = j["data"];
            c.data.clusters = d.value("clusters", c.data.clusters);
            c.data.images_per_cluster = d.value("images_per_cluster", c.data.images_per_cluster);
            c.data.height = d.value("height", c.data.height);
            c.data.width = d.value("width", c.data.width);
            c.data.noise = d.value("noise", c.data.noise);
        }
        if (j.contains("backbone")) {
            const auto& b = j["backbone"];
            c.backbone.in_channels = b.value("in_channels", c.backbone.in_channels);
            c.backbone.b4_channels = b.value("b4_channels", c.backbone.b4_channels);
            c.backbone.b5_channels = b.value("b5_channels", c.backbone.b5_channels);
        }
        if (j.contains("attention")) {
            const auto& a = j["attention"];
            c.attention.att1_channels = a.value("att1_channels", c.attention.att1_channels);
        }
        if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
        c.eval_tuples = j.value("eval_tuples", c.eval_tuples);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed toy training config: ") + e.what());
    }
    // Att1 reads the B4 tap and its output multiplies the B5 taps.
    c.attention.in_channels = c.backbone.b4_channels;
    if (c.attention.out_channels() != c.backbone.b5_channels) {
        throw DataError("attention output channels must equal the backbone B5 channels");
    }
    if (c.data.clusters < 2 || c.data.images_per_cluster < 2) {
        throw DataError("toy data needs at least 2 clusters of at least 2 images");
    }
    c.train.validate();
    return c;
}

struct ToyRunResult {
    ToyDataset data;
    DescriptorModel model;
    AdamState adam;
    std::vector<EpochStats> epochs;
    /// Fixed evaluation tuples before the first and after the last step.
    EpochStats initial;
    EpochStats final;
    std::size_t steps = 0;
};

/// Everything is drawn from one generator seeded with `seed`, so equal seeds
/// give bit-identical results.
inline ToyRunResult run_toy_training(const ToyRunConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ToyRunResult r;
    r.data = make_toy_dataset(cfg.data, cfg.backbone.in_channels, rng);
    const ToyDataset& data = r.data;
    r.model = make_model(cfg.attention, PoolingSpec::gem(), rng, cfg.backbone);
    r.adam = AdamState::for_params(r.model.params);
    const auto eval_set = make_tuples(data, describe_dataset(r.model, data), cfg.eval_tuples, cfg.train.negatives, rng);
    r.initial = evaluate_tuples(r.model, data, eval_set, cfg.train.margin);
    for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        const auto pool = describe_dataset(r.model, data);
        const auto tuples = make_tuples(data, pool, cfg.train.tuples_per_epoch, cfg.train.negatives, rng);
        EpochStats stats = train_epoch(r.model, data, tuples, cfg.train, r.adam, epoch);
        if (!std::isfinite(stats.mean_loss)) {
            throw NumericalError("non-finite training loss in epoch " + std::to_string(epoch));
        }
        r.epochs.push_back(stats);
    }
    r.steps = r.adam.step;
    r.final = evaluate_tuples(r.model, data, eval_set, cfg.train.margin);
    r.final.epoch = cfg.train.epochs;
    return r;
}

} // namespace agem
