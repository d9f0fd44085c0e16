#pragma once

// Descriptor networks: an optional toy backbone producing the four tap
// points, the attention branch, and the pooling head.

#include <agem/attention.hpp>
#include <agem/pooling.hpp>
#include <agem/tensor_io.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>

namespace agem {

enum class DescriptorKind { agem, gem, spoc, mac };

inline const char* to_string(DescriptorKind k) {
    switch (k) {
        case DescriptorKind::agem: return "agem";
        case DescriptorKind::gem: return "gem";
        case DescriptorKind::spoc: return "spoc";
        case DescriptorKind::mac: return "mac";
    }
    return "?";
}

inline DescriptorKind parse_descriptor_kind(std::string_view s) {
    if (s == "agem") return DescriptorKind::agem;
    if (s == "gem") return DescriptorKind::gem;
    if (s == "spoc") return DescriptorKind::spoc;
    if (s == "mac") return DescriptorKind::mac;
    throw FormatError("unknown descriptor kind '" + std::string(s) + "'");
}

/// Two-block CNN standing in for ResNet-101 B4/B5: one 3x3 conv for the B4
/// tap, then a stride-2 conv and two more convs for the three B5 taps.
struct ToyBackboneConfig {
    std::size_t in_channels = 3;
    std::size_t b4_channels = 8;
    std::size_t b5_channels = 16;
    friend bool operator==(const ToyBackboneConfig&, const ToyBackboneConfig&) = default;
};

struct ToyBackbone {
    ToyBackboneConfig config;
    ConvLayer b4{};
    ConvLayer b5_1{};
    ConvLayer b5_2{};
    ConvLayer b5_3{};

    template <class Rng>
    static ToyBackbone create(ParameterStore& store, const ToyBackboneConfig& cfg, Rng& rng) {
        ToyBackbone bb;
        bb.config = cfg;
        const auto g = ParamGroup::base;
        bb.b4 = add_conv(store, "backbone.b4", cfg.in_channels, cfg.b4_channels, 3, 1, g, 2, rng);
        bb.b5_1 = add_conv(store, "backbone.b5_1", cfg.b4_channels, cfg.b5_channels, 3, 2, g, 2, rng);
        bb.b5_2 = add_conv(store, "backbone.b5_2", cfg.b5_channels, cfg.b5_channels, 3, 1, g, 2, rng);
        bb.b5_3 = add_conv(store, "backbone.b5_3", cfg.b5_channels, cfg.b5_channels, 3, 1, g, 2, rng);
        return bb;
    }

    static ToyBackbone find(const ParameterStore& store) {
        ToyBackbone bb;
        bb.b4 = find_conv(store, "backbone.b4", 1);
        bb.b5_1 = find_conv(store, "backbone.b5_1", 2);
        bb.b5_2 = find_conv(store, "backbone.b5_2", 1);
        bb.b5_3 = find_conv(store, "backbone.b5_3", 1);
        const auto& w4 = store[bb.b4.weight].value.shape();
        bb.config = {w4.c, w4.n, store[bb.b5_1.weight].value.shape().n};
        return bb;
    }
};

inline StageVars backbone_forward(Forward& fw, const ToyBackbone& bb, Var images) {
    StageVars s;
    s.x_4_23 = relu(fw.tape, apply_conv(fw, bb.b4, images));
    s.x_5_1 = relu(fw.tape, apply_conv(fw, bb.b5_1, s.x_4_23));
    s.x_5_2 = relu(fw.tape, apply_conv(fw, bb.b5_2, s.x_5_1));
    s.x_5_3 = relu(fw.tape, apply_conv(fw, bb.b5_3, s.x_5_2));
    return s;
}

/// Parameters plus the handles needed to compute descriptors.
struct DescriptorModel {
    ParameterStore params;
    std::optional<ToyBackbone> backbone;
    std::optional<AttentionNet> attention;
    /// Kind, exponent mode and clamp; when a "pool.p" parameter exists it
    /// overrides `pooling.p`.
    PoolingSpec pooling = PoolingSpec::gem();
    std::optional<std::size_t> p_index;

    PoolingSpec current_pooling() const {
        PoolingSpec spec = pooling;
        if (p_index) spec.p = params[*p_index].value.values();
        return spec;
    }
};

/// Builds a model with attention (unless `with_attention` is false), a learnable
/// GeM exponent, and optionally a toy backbone.
template <class Rng>
DescriptorModel make_model(const AttentionConfig& att_cfg, const PoolingSpec& pooling, Rng& rng,
                           std::optional<ToyBackboneConfig> backbone = std::nullopt, bool with_attention = true,
                           bool zero_attention = false) {
    DescriptorModel m;
    m.pooling = pooling;
    if (backbone) m.backbone = ToyBackbone::create(m.params, *backbone, rng);
    if (with_attention) m.attention = AttentionNet::create(m.params, att_cfg, rng, zero_attention);
    if (pooling.kind == PoolingKind::gem) {
        Tensor p = pooling.p_mode == ExponentMode::shared
                       ? Tensor::scalar(pooling.p.at(0))
                       : (pooling.p.size() == att_cfg.out_channels()
                              ? Tensor::vector(pooling.p)
                              : Tensor(Shape{1, att_cfg.out_channels(), 1, 1}, pooling.p.at(0)));
        m.p_index = m.params.add("pool.p", std::move(p), ParamGroup::p, false);
    }
    return m;
}

/// Pooled, L2-normalized descriptors (n, K, 1, 1) from tap points.
inline Var descriptor_from_stages(Forward& fw, const DescriptorModel& m, const StageVars& s, DescriptorKind kind) {
    Var features = s.x_5_3;
    if (kind == DescriptorKind::agem) {
        require_shape(m.attention.has_value(), "AGeM descriptor requested from a model without attention");
        features = attention_compose(fw, *m.attention, s);
    }
    PoolingSpec spec = m.current_pooling();
    std::optional<Var> exponent;
    switch (kind) {
        case DescriptorKind::spoc: spec.kind = PoolingKind::spoc; break;
        case DescriptorKind::mac: spec.kind = PoolingKind::mac; break;
        case DescriptorKind::agem:
        case DescriptorKind::gem:
            spec.kind = PoolingKind::gem;
            exponent = m.p_index ? fw.param(*m.p_index) : fw.tape.leaf(spec.p_tensor());
            break;
    }
    return l2_normalize(fw.tape, pool(fw.tape, features, spec, exponent));
}

/// Eval-mode single-scale descriptor for precomputed tap points.
inline std::vector<real> describe(const DescriptorModel& m, const StageMaps& maps, DescriptorKind kind) {
    Tape tape;
    Forward fw(tape, m.params, BatchNormMode::eval);
    const auto s = kind == DescriptorKind::agem
                       ? bind_stages(tape, maps)
                       : StageVars{Var{}, Var{}, Var{}, tape.leaf(maps.x_5_3)};
    return tape.value(descriptor_from_stages(fw, m, s, kind)).values();
}

/// Eval-mode descriptor of images pushed through the toy backbone.
inline std::vector<real> describe_images(const DescriptorModel& m, const Tensor& images, DescriptorKind kind) {
    require_shape(m.backbone.has_value(), "describe_images needs a backbone");
    Tape tape;
    Forward fw(tape, m.params, BatchNormMode::eval);
    const auto s = backbone_forward(fw, *m.backbone, tape.leaf(images));
    return tape.value(descriptor_from_stages(fw, m, s, kind)).values();
}

/// Tap points of the toy backbone for one or more images (eval mode).
inline StageMaps backbone_stages(const DescriptorModel& m, const Tensor& images) {
    require_shape(m.backbone.has_value(), "backbone_stages needs a backbone");
    Tape tape;
    Forward fw(tape, m.params, BatchNormMode::eval);
    const auto s = backbone_forward(fw, *m.backbone, tape.leaf(images));
    return {tape.value(s.x_4_23), tape.value(s.x_5_1), tape.value(s.x_5_2), tape.value(s.x_5_3)};
}

// ---------------------------------------------------------------------------
// Serialization: a manifest.json (ordered parameter names, shapes, groups,
// pooling spec) next to one AGTF file per parameter.

inline nlohmann::json pooling_to_json(const PoolingSpec& spec) {
    return {{"kind", to_string(spec.kind)},
            {"p", spec.p},
            {"p_mode", spec.p_mode == ExponentMode::shared ? "shared" : "per_channel"},
            {"eps", spec.eps}};
}

inline PoolingSpec pooling_from_json(const nlohmann::json& j) {
    PoolingSpec spec;
    spec.kind = parse_pooling_kind(j.at("kind").get<std::string>());
    spec.p = j.at("p").get<std::vector<real>>();
    const auto mode = j.value("p_mode", std::string("shared"));
    if (mode != "shared" && mode != "per_channel") throw FormatError("unknown p_mode '" + mode + "'");
    spec.p_mode = mode == "shared" ? ExponentMode::shared : ExponentMode::per_channel;
    spec.eps = j.value("eps", kGemClampEps);
    return spec;
}

inline std::string parameter_file_name(const std::string& name) { return name + ".agtf"; }

inline nlohmann::json save_parameters(const std::filesystem::path& dir, const ParameterStore& params) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& p : params) {
        const auto& s = p.value.shape();
        const std::string file = parameter_file_name(p.name);
        save_tensor(dir / file, p.value);
        list.push_back({{"name", p.name},
                        {"shape", {s.n, s.c, s.h, s.w}},
                        {"group", to_string(p.group)},
                        {"weight_decay", p.weight_decay},
                        {"file", file}});
    }
    return list;
}

inline ParameterStore load_parameters(const std::filesystem::path& dir, const nlohmann::json& list) {
    ParameterStore store;
    for (const auto& e : list) {
        const auto name = e.at("name").get<std::string>();
        Tensor t = load_tensor(dir / e.at("file").get<std::string>());
        const auto dims = e.at("shape").get<std::vector<std::size_t>>();
        if (dims.size() != 4 || !(Shape{dims[0], dims[1], dims[2], dims[3]} == t.shape())) {
            throw FormatError("parameter " + name + " shape does not match its manifest entry");
        }
        store.add(name, std::move(t), parse_param_group(e.at("group").get<std::string>()),
                  e.value("weight_decay", false));
    }
    return store;
}

/// Writes `dir/manifest.json` plus parameter tensors; `extra` keys are merged
/// into the manifest.
inline void save_model(const std::filesystem::path& dir, const DescriptorModel& m,
                       const nlohmann::json& extra = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = extra;
    manifest["format"] = "agem-model";
    manifest["version"] = 1;
    manifest["pooling"] = pooling_to_json(m.current_pooling());
    manifest["has_attention"] = m.attention.has_value();
    manifest["has_backbone"] = m.backbone.has_value();
    manifest["parameters"] = save_parameters(dir, m.params);
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
    try {
        return nlohmann::json::parse(read_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
    }
}

inline DescriptorModel load_model(const std::filesystem::path& dir) {
    const auto manifest = read_manifest(dir);
    try {
        if (manifest.at("format") != "agem-model") throw FormatError(dir.string() + " is not a model directory");
        if (manifest.at("version") != 1) throw FormatError("unsupported model version in " + dir.string());
        DescriptorModel m;
        m.params = load_parameters(dir, manifest.at("parameters"));
        m.pooling = pooling_from_json(manifest.at("pooling"));
        if (manifest.value("has_backbone", false)) m.backbone = ToyBackbone::find(m.params);
        if (manifest.value("has_attention", false)) m.attention = AttentionNet::find(m.params);
        if (m.params.contains("pool.p")) m.p_index = m.params.index_of("pool.p");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed model manifest in " + dir.string() + ": " + e.what());
    }
}

} // namespace agem
