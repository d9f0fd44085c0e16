#pragma once

// Descriptor finalization: discriminative whitening learned from matching
// pairs, and multi-scale aggregation.

#include <agem/descriptors.hpp>
#include <agem/pooling.hpp>

#include <Eigen/Dense>

#include <functional>

namespace agem {

using Matrix = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic>;
using VectorX = Eigen::Matrix<real, Eigen::Dynamic, 1>;

inline constexpr real kEigenvalueFloor = real(1e-8);

struct WhiteningTransform {
    VectorX mean;
    /// (output_dim x input_dim), rows are output coordinates.
    Matrix projection;

    std::size_t input_dim() const { return static_cast<std::size_t>(projection.cols()); }
    std::size_t output_dim() const { return static_cast<std::size_t>(projection.rows()); }

    static WhiteningTransform identity(std::size_t dim) {
        const auto d = static_cast<Eigen::Index>(dim);
        return {VectorX::Zero(d), Matrix::Identity(d, d)};
    }
};

using MatchingPair = std::pair<std::string, std::string>;

/// Mean outer product of matched-pair differences.
inline Matrix pair_difference_covariance(const DescriptorSet& set, std::span<const MatchingPair> pairs) {
    if (pairs.empty()) throw DataError("whitening needs at least one matching pair");
    const auto d = static_cast<Eigen::Index>(set.dim());
    Matrix c = Matrix::Zero(d, d);
    VectorX diff(d);
    for (const auto& [a, b] : pairs) {
        const auto fa = set.row(a);
        const auto fb = set.row(b);
        for (Eigen::Index k = 0; k < d; ++k) diff[k] = fa[k] - fb[k];
        c.selfadjointView<Eigen::Lower>().rankUpdate(diff);
    }
    c = c.selfadjointView<Eigen::Lower>();
    return c / static_cast<real>(pairs.size());
}

/// C^{-1/2} for symmetric positive definite C. Eigenvalues below
/// kEigenvalueFloor * max eigenvalue make C rank-deficient and raise.
inline Matrix inverse_sqrt(const Matrix& c) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(c);
    if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition of pair covariance failed");
    const VectorX& lambda = eig.eigenvalues();
    const real top = lambda.maxCoeff();
    if (!(top > 0)) throw NumericalError("pair covariance is zero: all matching pairs are identical");
    const real floor = kEigenvalueFloor * top;
    const auto deficient = (lambda.array() < floor).count();
    if (deficient > 0) {
        throw NumericalError("pair covariance is rank-deficient: " + std::to_string(deficient) + " of " +
                             std::to_string(lambda.size()) + " eigenvalues below 1e-8 x max; supply more pairs with "
                             "linearly independent differences");
    }
    const VectorX inv = lambda.array().rsqrt();
    return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

/// Projection = R * C_S^{-1/2}, where C_S is the matched-pair difference
/// covariance and R's rows are the principal axes (descending variance) of the
/// whitened, centred descriptors. `output_dim` 0 keeps all D dimensions.
inline WhiteningTransform learn_whitening(const DescriptorSet& set, std::span<const MatchingPair> pairs,
                                          std::size_t output_dim = 0) {
    const std::size_t dim = set.dim();
    if (set.size() < 2) throw DataError("whitening needs at least two descriptors");
    if (output_dim == 0) output_dim = dim;
    if (output_dim > dim) {
        throw DataError("whitening output dimension " + std::to_string(output_dim) + " exceeds input " +
                        std::to_string(dim));
    }
    const auto d = static_cast<Eigen::Index>(dim);
    const auto n = static_cast<Eigen::Index>(set.size());
    const Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(set.data().data(),
                                                                                                   n, d);
    WhiteningTransform t;
    t.mean = x.colwise().mean().transpose();
    const Matrix w = inverse_sqrt(pair_difference_covariance(set, pairs));

    const Matrix centred = (x.rowwise() - t.mean.transpose()) * w;  // rows are whitened descriptors
    const Matrix scatter = centred.transpose() * centred / static_cast<real>(n);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(scatter);
    if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition of whitened scatter failed");
    // Eigen sorts ascending; take the last output_dim columns in reverse.
    const auto k = static_cast<Eigen::Index>(output_dim);
    Matrix r(k, d);
    for (Eigen::Index i = 0; i < k; ++i) r.row(i) = eig.eigenvectors().col(d - 1 - i).transpose();
    t.projection = r * w;
    if (!t.projection.allFinite()) throw NumericalError("whitening projection is not finite");
    return t;
}

/// projection * (d - mean), without normalization.
inline std::vector<real> project(const WhiteningTransform& t, std::span<const real> d) {
    if (d.size() != t.input_dim()) {
        throw ShapeError("descriptor dimension " + std::to_string(d.size()) + " does not match whitening input " +
                         std::to_string(t.input_dim()));
    }
    const Eigen::Map<const VectorX> v(d.data(), static_cast<Eigen::Index>(d.size()));
    const VectorX y = t.projection * (v - t.mean);
    return {y.data(), y.data() + y.size()};
}

inline std::vector<real> apply_whitening(const WhiteningTransform& t, std::span<const real> d) {
    return l2_normalize(project(t, d));
}

inline DescriptorSet apply_whitening(const WhiteningTransform& t, const DescriptorSet& set) {
    DescriptorSet out(t.output_dim());
    for (std::size_t i = 0; i < set.size(); ++i) out.add(set.id(i), apply_whitening(t, set.row(i)));
    return out;
}

/// Manifest JSON next to "<stem>.mean.agtf" and "<stem>.projection.agtf".
inline void save_whitening(const std::filesystem::path& manifest_path, const WhiteningTransform& t,
                           const nlohmann::json& extra = nlohmann::json::object()) {
    const auto stem = manifest_path.stem().string();
    const auto dir = manifest_path.parent_path();
    const std::string mean_file = stem + ".mean.agtf";
    const std::string proj_file = stem + ".projection.agtf";
    const std::size_t in = t.input_dim(), out = t.output_dim();
    save_tensor(dir / mean_file, Tensor(Shape{in, 1, 1, 1}, std::vector<real>(t.mean.data(), t.mean.data() + in)),
                {in}, DType::f64);
    // Row-major (out, in).
    std::vector<real> rows(out * in);
    for (std::size_t r = 0; r < out; ++r)
        for (std::size_t c = 0; c < in; ++c)
            rows[r * in + c] = t.projection(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    save_tensor(dir / proj_file, Tensor(Shape{out, in, 1, 1}, std::move(rows)), {out, in}, DType::f64);
    nlohmann::json manifest = extra;
    manifest["format"] = "agem-whitening";
    manifest["version"] = 1;
    manifest["input_dim"] = in;
    manifest["output_dim"] = out;
    manifest["mean"] = mean_file;
    manifest["projection"] = proj_file;
    write_file_atomic(manifest_path, manifest.dump(1) + "\n");
}

inline WhiteningTransform load_whitening(const std::filesystem::path& manifest_path) {
    try {
        const auto manifest = nlohmann::json::parse(read_file(manifest_path));
        if (manifest.at("format") != "agem-whitening") {
            throw FormatError(manifest_path.string() + " is not a whitening transform");
        }
        if (manifest.at("version") != 1) throw FormatError("unsupported whitening version in " + manifest_path.string());
        const auto in = manifest.at("input_dim").get<std::size_t>();
        const auto out = manifest.at("output_dim").get<std::size_t>();
        const auto dir = manifest_path.parent_path();
        const Tensor mean = load_tensor(dir / manifest.at("mean").get<std::string>());
        const Tensor proj = load_tensor(dir / manifest.at("projection").get<std::string>());
        if (mean.size() != in || proj.shape().n != out || proj.shape().per_item() != in) {
            throw FormatError("whitening tensors in " + manifest_path.string() + " disagree with the manifest");
        }
        WhiteningTransform t;
        t.mean = Eigen::Map<const VectorX>(mean.data().data(), static_cast<Eigen::Index>(in));
        t.projection = Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            proj.data().data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed whitening manifest " + manifest_path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Multi-scale aggregation

enum class ScaleAggregator { average, gem };

struct MultiScaleSpec {
    std::vector<real> scales{real(1), real(1) / std::sqrt(real(2)), real(0.5)};
    ScaleAggregator aggregator = ScaleAggregator::average;
    real p = 1;

    static MultiScaleSpec single() { return {{real(1)}, ScaleAggregator::average, 1}; }

    void validate() const {
        if (scales.empty()) throw DataError("multi-scale spec needs at least one scale");
        for (std::size_t i = 0; i < scales.size(); ++i) {
            if (!(scales[i] > 0)) throw DataError("scales must be positive");
            if (i > 0 && !(scales[i] < scales[i - 1])) throw DataError("scales must be strictly descending");
        }
        if (aggregator == ScaleAggregator::gem && !(p >= 1)) throw DataError("scale aggregation exponent must be >= 1");
    }
};

inline nlohmann::json to_json(const MultiScaleSpec& s) {
    return {{"scales", s.scales}, {"aggregator", s.aggregator == ScaleAggregator::gem ? "gem" : "average"}, {"p", s.p}};
}

inline MultiScaleSpec multiscale_from_json(const nlohmann::json& j) {
    MultiScaleSpec s;
    try {
        s.scales = j.value("scales", s.scales);
        const auto agg = j.value("aggregator", std::string("average"));
        if (agg != "average" && agg != "gem") throw FormatError("unknown scale aggregator '" + agg + "'");
        s.aggregator = agg == "gem" ? ScaleAggregator::gem : ScaleAggregator::average;
        s.p = j.value("p", s.p);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed multi-scale spec: ") + e.what());
    }
    s.validate();
    return s;
}

/// Elementwise mean (arithmetic or generalized) of per-scale descriptors.
/// The generalized mean needs nonnegative entries.
inline std::vector<real> combine_scales(std::span<const std::vector<real>> per_scale, const MultiScaleSpec& spec) {
    if (per_scale.empty()) throw DataError("no per-scale descriptors to aggregate");
    const std::size_t dim = per_scale[0].size();
    for (const auto& d : per_scale) require_shape(d.size() == dim, "per-scale descriptors differ in dimension");
    const real n = static_cast<real>(per_scale.size());
    std::vector<real> out(dim, 0);
    if (spec.aggregator == ScaleAggregator::average) {
        for (const auto& d : per_scale)
            for (std::size_t k = 0; k < dim; ++k) out[k] += d[k] / n;
    } else {
        for (const auto& d : per_scale) {
            for (std::size_t k = 0; k < dim; ++k) {
                if (d[k] < 0) throw DataError("generalized-mean scale aggregation of a negative entry");
                out[k] += std::pow(d[k], spec.p) / n;
            }
        }
        for (auto& v : out) v = std::pow(v, 1 / spec.p);
    }
    return out;
}

inline std::vector<real> aggregate_scales(std::span<const std::vector<real>> per_scale, const MultiScaleSpec& spec) {
    return l2_normalize(combine_scales(per_scale, spec));
}

/// Extracts at every scale in order, then aggregates. An extractor failure
/// propagates before anything is combined.
inline std::vector<real> multiscale_descriptor(const std::function<std::vector<real>(real)>& extract,
                                               const MultiScaleSpec& spec) {
    spec.validate();
    std::vector<std::vector<real>> per_scale;
    per_scale.reserve(spec.scales.size());
    for (real s : spec.scales) per_scale.push_back(extract(s));
    return aggregate_scales(per_scale, spec);
}

/// Bilinear resize of every image in the batch by `scale` (half-pixel
/// centres, edge clamped). Output extent is round(scale * extent), at least 1.
inline Tensor rescale_images(const Tensor& images, real scale) {
    if (!(scale > 0)) throw DataError("image scale must be positive");
    const Shape s = images.shape();
    if (scale == 1) return images;
    const auto resized = [&](std::size_t n) {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * static_cast<real>(n))));
    };
    const Shape o{s.n, s.c, resized(s.h), resized(s.w)};
    Tensor out(o);
    const real fy = static_cast<real>(s.h) / static_cast<real>(o.h);
    const real fx = static_cast<real>(s.w) / static_cast<real>(o.w);
    auto coord = [](std::size_t i, real f, std::size_t limit, std::size_t& lo, std::size_t& hi) {
        const real src = std::clamp((static_cast<real>(i) + real(0.5)) * f - real(0.5), real(0),
                                    static_cast<real>(limit - 1));
        lo = static_cast<std::size_t>(std::floor(src));
        hi = std::min(lo + 1, limit - 1);
        return src - static_cast<real>(lo);
    };
    for (std::size_t n = 0; n < o.n; ++n)
        for (std::size_t c = 0; c < o.c; ++c)
            for (std::size_t y = 0; y < o.h; ++y) {
                std::size_t y0, y1;
                const real wy = coord(y, fy, s.h, y0, y1);
                for (std::size_t x = 0; x < o.w; ++x) {
                    std::size_t x0, x1;
                    const real wx = coord(x, fx, s.w, x0, x1);
                    const real top = (1 - wx) * images.at(n, c, y0, x0) + wx * images.at(n, c, y0, x1);
                    const real bottom = (1 - wx) * images.at(n, c, y1, x0) + wx * images.at(n, c, y1, x1);
                    out.at(n, c, y, x) = (1 - wy) * top + wy * bottom;
                }
            }
    return out;
}

} // namespace agem
