#pragma once

// Feature-map manifests: per image, per scale, one AGTF tensor per tap point.
// This is the hand-off format from an external backbone exporter, and the
// toy backbone can write it too. Extraction turns a manifest into a
// DescriptorSet.
//
//   {"format": "agem-feature-maps", "version": 1, "backbone": "...",
//    "longer_side": 1024,
//    "images": [{"id": "...", "scales": [{"scale": 1.0,
//                 "taps": {"B4_23": "a.agtf", "B5_1": ..., "B5_2": ..., "B5_3": ...}}]}]}
//
// Tensor paths are relative to the manifest's directory. Each tensor is
// (1, C, H, W), or (C, H, W) which is read as a batch of one.

#include <agem/model.hpp>
#include <agem/postprocess.hpp>

#include <array>
#include <map>

namespace agem {

inline constexpr std::array<const char*, 4> kTapNames{"B4_23", "B5_1", "B5_2", "B5_3"};
inline constexpr const char* kFinalTap = "B5_3";

struct ScaleEntry {
    real scale = 1;
    std::map<std::string, std::string> taps;

    bool has_all_taps() const {
        return std::all_of(kTapNames.begin(), kTapNames.end(), [&](const char* t) { return taps.count(t) > 0; });
    }
};

struct FeatureImage {
    std::string id;
    std::vector<ScaleEntry> scales;
};

struct FeatureManifest {
    std::string backbone;
    std::size_t longer_side = 0;
    std::vector<FeatureImage> images;
    /// Directory that tap paths are resolved against.
    std::filesystem::path root;
};

inline nlohmann::json to_json(const FeatureManifest& m) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& img : m.images) {
        nlohmann::json scales = nlohmann::json::array();
        for (const auto& s : img.scales) scales.push_back({{"scale", s.scale}, {"taps", s.taps}});
        images.push_back({{"id", img.id}, {"scales", scales}});
    }
    return {{"format", "agem-feature-maps"},
            {"version", 1},
            {"backbone", m.backbone},
            {"longer_side", m.longer_side},
            {"images", images}};
}

/// Checks the tap set of every scale entry ({B5_3} alone or all four), that
/// ids are unique, and that each image's scales are positive and distinct.
inline void validate_feature_manifest(const FeatureManifest& m) {
    std::set<std::string> ids;
    for (const auto& img : m.images) {
        if (!ids.insert(img.id).second) throw FormatError("feature manifest lists image " + img.id + " twice");
        if (img.scales.empty()) throw FormatError("image " + img.id + " has no feature maps");
        std::set<real> seen;
        for (const auto& s : img.scales) {
            if (!(s.scale > 0)) throw FormatError("image " + img.id + " has a non-positive scale");
            if (!seen.insert(s.scale).second) throw FormatError("image " + img.id + " repeats scale " + std::to_string(s.scale));
            for (const auto& [tap, file] : s.taps) {
                if (std::find_if(kTapNames.begin(), kTapNames.end(), [&](const char* t) { return tap == t; }) ==
                    kTapNames.end()) {
                    throw FormatError("image " + img.id + " has unknown tap point '" + tap + "'");
                }
            }
            const bool final_only = s.taps.size() == 1 && s.taps.count(kFinalTap);
            if (!final_only && !s.has_all_taps()) {
                throw FormatError("image " + img.id + " must provide either B5_3 alone or all of B4_23, B5_1, B5_2, B5_3");
            }
        }
    }
}

inline FeatureManifest load_feature_manifest(const std::filesystem::path& path) {
    FeatureManifest m;
    m.root = path.parent_path();
    try {
        const auto j = nlohmann::json::parse(read_file(path));
        if (j.at("format") != "agem-feature-maps") throw FormatError(path.string() + " is not a feature-map manifest");
        if (j.at("version") != 1) throw FormatError("unsupported feature-map manifest version in " + path.string());
        m.backbone = j.value("backbone", std::string());
        m.longer_side = j.value("longer_side", std::size_t{0});
        for (const auto& img : j.at("images")) {
            FeatureImage fi;
            fi.id = img.at("id").get<std::string>();
            for (const auto& s : img.at("scales")) {
                fi.scales.push_back({s.at("scale").get<real>(), s.at("taps").get<std::map<std::string, std::string>>()});
            }
            m.images.push_back(std::move(fi));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed feature-map manifest " + path.string() + ": " + e.what());
    }
    validate_feature_manifest(m);
    return m;
}

inline void save_feature_manifest(const std::filesystem::path& path, const FeatureManifest& m) {
    validate_feature_manifest(m);
    write_file_atomic(path, to_json(m).dump(1) + "\n");
}

inline Tensor load_tap(const FeatureManifest& m, const FeatureImage& img, const ScaleEntry& s, const char* tap) {
    auto it = s.taps.find(tap);
    if (it == s.taps.end()) {
        throw DataError("image " + img.id + " at scale " + std::to_string(s.scale) + " is missing tap point " + tap +
                        " (AGeM extraction needs B4_23, B5_1, B5_2 and B5_3)");
    }
    Tensor t = load_tensor(m.root / it->second);
    if (t.shape().n != 1) {
        throw FormatError("tap " + std::string(tap) + " of image " + img.id + " holds " + std::to_string(t.shape().n) +
                          " maps, expected 1");
    }
    return t;
}

inline StageMaps load_stage_maps(const FeatureManifest& m, const FeatureImage& img, const ScaleEntry& s,
                                 bool all_taps) {
    StageMaps maps;
    maps.x_5_3 = load_tap(m, img, s, kFinalTap);
    if (all_taps) {
        maps.x_4_23 = load_tap(m, img, s, "B4_23");
        maps.x_5_1 = load_tap(m, img, s, "B5_1");
        maps.x_5_2 = load_tap(m, img, s, "B5_2");
    }
    return maps;
}

/// Descriptors for every image in the manifest. Per image, each scale entry
/// present is described, in descending scale order, and the per-scale
/// descriptors are combined with `multiscale` (its aggregator and p; its scale
/// list is not consulted). A single scale is used as-is.
inline DescriptorSet extract_descriptors(const FeatureManifest& m, const DescriptorModel& model, DescriptorKind kind,
                                         const MultiScaleSpec& multiscale) {
    const bool all_taps = kind == DescriptorKind::agem;
    if (all_taps && !model.attention) throw DataError("AGeM extraction needs a model with an attention branch");
    DescriptorSet out;
    for (const auto& img : m.images) {
        auto scales = img.scales;
        std::sort(scales.begin(), scales.end(), [](const auto& a, const auto& b) { return a.scale > b.scale; });
        std::vector<std::vector<real>> per_scale;
        for (const auto& s : scales) per_scale.push_back(describe(model, load_stage_maps(m, img, s, all_taps), kind));
        out.add(img.id, per_scale.size() == 1 ? per_scale[0] : aggregate_scales(per_scale, multiscale));
    }
    return out;
}

/// A head with only a fixed pooling exponent, for GeM/SPoC/MAC extraction
/// when no trained model is supplied.
inline DescriptorModel pooling_only_model(const PoolingSpec& pooling) {
    DescriptorModel m;
    m.pooling = pooling;
    return m;
}

/// Runs `images` through the model's toy backbone at every scale and writes
/// one tensor per tap point plus the manifest at `manifest_path`.
inline FeatureManifest export_toy_feature_maps(const std::filesystem::path& manifest_path, const DescriptorModel& model,
                                               std::span<const std::string> ids, std::span<const Tensor> images,
                                               std::span<const real> scales, bool all_taps = true) {
    require_shape(model.backbone.has_value(), "feature export needs a model with a toy backbone");
    require_shape(ids.size() == images.size(), "feature export needs one id per image");
    const auto dir = manifest_path.parent_path();
    const auto maps_dir = manifest_path.stem().string() + "_maps";
    std::filesystem::create_directories(dir / maps_dir);
    FeatureManifest m;
    m.backbone = "toy";
    m.root = dir;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& s = images[i].shape();
        m.longer_side = std::max({m.longer_side, s.h, s.w});
        FeatureImage fi{ids[i], {}};
        for (std::size_t k = 0; k < scales.size(); ++k) {
            const StageMaps maps = backbone_stages(model, rescale_images(images[i], scales[k]));
            ScaleEntry entry{scales[k], {}};
            const std::array<const Tensor*, 4> tensors{&maps.x_4_23, &maps.x_5_1, &maps.x_5_2, &maps.x_5_3};
            for (std::size_t t = 0; t < kTapNames.size(); ++t) {
                if (!all_taps && std::string(kTapNames[t]) != kFinalTap) continue;
                const std::string file = maps_dir + "/" + ids[i] + ".s" + std::to_string(k) + "." + kTapNames[t] + ".agtf";
                save_tensor(dir / file, *tensors[t]);
                entry.taps[kTapNames[t]] = file;
            }
            fi.scales.push_back(std::move(entry));
        }
        m.images.push_back(std::move(fi));
    }
    save_feature_manifest(manifest_path, m);
    return m;
}

} // namespace agem
