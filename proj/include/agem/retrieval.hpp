#pragma once

// Dot-product retrieval over unit-norm descriptors: search, query expansion
// (average and alpha-weighted), database-side augmentation (plain and
// beta-weighted), and kNN-graph diffusion solved by conjugate gradient.

#include <agem/descriptors.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

namespace agem {

inline constexpr real kUnitNormTolerance = real(1e-6);

/// Immutable unit-norm descriptor collection.
class Index {
public:
    Index() = default;

    /// Validates unit norms; rows are not renormalized.
    explicit Index(DescriptorSet set) : set_(std::move(set)) {
        for (std::size_t i = 0; i < set_.size(); ++i) {
            const real n = norm(set_.row(i));
            if (std::abs(n - 1) > kUnitNormTolerance) {
                throw DataError("index row " + set_.id(i) + " has norm " + std::to_string(n) + ", expected 1");
            }
        }
    }

    std::size_t size() const { return set_.size(); }
    std::size_t dim() const { return set_.dim(); }
    const std::string& id(std::size_t i) const { return set_.id(i); }
    std::span<const real> row(std::size_t i) const { return set_.row(i); }
    const DescriptorSet& descriptors() const { return set_; }

    /// Dot product of `q` with every row.
    std::vector<real> similarities(std::span<const real> q) const {
        if (q.size() != dim()) {
            throw ShapeError("query dimension " + std::to_string(q.size()) + " does not match index dimension " +
                             std::to_string(dim()));
        }
        std::vector<real> s(size());
        for (std::size_t i = 0; i < size(); ++i) s[i] = dot(q, row(i));
        return s;
    }

private:
    DescriptorSet set_;
};

struct RankedItem {
    std::string id;
    real score = 0;
    friend bool operator==(const RankedItem&, const RankedItem&) = default;
};

struct RankedList {
    std::string query;
    std::vector<RankedItem> items;

    std::size_t size() const { return items.size(); }
    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        out.reserve(items.size());
        for (const auto& it : items) out.push_back(it.id);
        return out;
    }
    friend bool operator==(const RankedList&, const RankedList&) = default;
};

/// Positions 0..n-1 ordered by descending score, ties by id ascending; only
/// the first k are sorted.
inline std::vector<std::size_t> rank_order(std::span<const real> scores, const Index& index, std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return index.id(a) < index.id(b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
    order.resize(k);
    return order;
}

inline RankedList make_ranked_list(std::string query, std::span<const real> scores, const Index& index, std::size_t k) {
    RankedList out{std::move(query), {}};
    for (std::size_t i : rank_order(scores, index, k)) out.items.push_back({index.id(i), scores[i]});
    return out;
}

/// Top-k rows by dot product. k = 0 returns the whole index ranked.
inline RankedList search(const Index& index, std::span<const real> q, std::size_t k = 0, std::string query_id = {}) {
    if (k == 0) k = index.size();
    if (k > index.size()) {
        throw DataError("search depth " + std::to_string(k) + " exceeds index size " + std::to_string(index.size()));
    }
    const auto s = index.similarities(q);
    return make_ranked_list(std::move(query_id), s, index, k);
}

// ---------------------------------------------------------------------------
// Query expansion

namespace detail {

inline void require_depth(const RankedList& ranked, std::size_t n) {
    if (n > ranked.size()) {
        throw DataError("expansion depth " + std::to_string(n) + " exceeds ranked list length " +
                        std::to_string(ranked.size()));
    }
}

inline real clamp_unit(real s) { return std::clamp(s, real(0), real(1)); }

} // namespace detail

/// l2_normalize((q + sum of the top-n descriptors) / (n + 1)). The 1 / (n + 1)
/// factor cancels in the normalization and is not applied, which keeps the
/// result bit-identical to alpha_qe with alpha = 0.
inline std::vector<real> average_qe(std::span<const real> q, const RankedList& ranked, const Index& index,
                                    std::size_t n) {
    detail::require_depth(ranked, n);
    require_shape(q.size() == index.dim(), "query dimension does not match index");
    std::vector<real> acc(q.begin(), q.end());
    for (std::size_t i = 0; i < n; ++i) {
        const auto f = index.descriptors().row(ranked.items[i].id);
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += f[k];
    }
    return l2_normalize(acc);
}

/// l2_normalize(q + sum_i clamp(q.F_i, 0, 1)^alpha F_i) over the top-n items.
inline std::vector<real> alpha_qe(std::span<const real> q, const RankedList& ranked, const Index& index, std::size_t n,
                                  real alpha) {
    detail::require_depth(ranked, n);
    require_shape(q.size() == index.dim(), "query dimension does not match index");
    if (!(alpha >= 0)) throw DataError("alpha must be non-negative");
    std::vector<real> acc(q.begin(), q.end());
    for (std::size_t i = 0; i < n; ++i) {
        const auto f = index.descriptors().row(ranked.items[i].id);
        const real w = std::pow(detail::clamp_unit(dot(q, f)), alpha);
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += w * f[k];
    }
    return l2_normalize(acc);
}

// ---------------------------------------------------------------------------
// Database-side augmentation

/// Every row replaced by a combination of itself and its top-n neighbours
/// (self excluded), computed from the original rows. Without beta the
/// combination is the plain average; with beta neighbour j has weight
/// clamp(d.F_j, 0, 1)^beta and the row itself weight 1. The plain average is
/// left unscaled before normalization so that beta = 0 reproduces it exactly.
inline Index dba(const Index& index, std::size_t n, std::optional<real> beta = std::nullopt) {
    if (n == 0) return index;
    if (n >= index.size()) {
        throw DataError("DBA depth " + std::to_string(n) + " must be below index size " + std::to_string(index.size()));
    }
    if (beta && !(*beta >= 0)) throw DataError("beta must be non-negative");
    DescriptorSet out(index.dim());
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto d = index.row(i);
        auto s = index.similarities(d);
        // Exclude self by position so duplicate descriptors still count as neighbours.
        s[i] = -std::numeric_limits<real>::infinity();
        const auto order = rank_order(s, index, n);
        std::vector<real> acc(d.begin(), d.end());
        for (std::size_t j : order) {
            const real w = beta ? std::pow(detail::clamp_unit(dot(d, index.row(j))), *beta) : real(1);
            const auto f = index.row(j);
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += w * f[k];
        }
        out.add(index.id(i), l2_normalize(acc));
    }
    return Index(std::move(out));
}

// ---------------------------------------------------------------------------
// Diffusion

struct DiffusionParams {
    std::size_t k_nn = 50;
    real alpha = real(0.99);
    real exponent = 3;
    real tolerance = real(1e-6);
    std::size_t max_iterations = 200;
    /// Diffuse only over the top-T items of the query's dot-product ranking.
    std::optional<std::size_t> truncation;

    void validate() const {
        if (k_nn < 1) throw DataError("diffusion k_nn must be at least 1");
        if (!(alpha >= 0 && alpha < 1)) throw DataError("diffusion alpha must lie in [0, 1)");
        if (!(exponent > 0)) throw DataError("similarity exponent must be positive");
        if (!(tolerance > 0)) throw DataError("solver tolerance must be positive");
        if (truncation && *truncation == 0) throw DataError("truncation size must be positive");
    }
};

/// Symmetric sparse matrix in CSR form, columns sorted within each row.
struct SparseSymmetric {
    std::size_t n = 0;
    std::vector<std::size_t> row_start{0};
    std::vector<std::size_t> col;
    std::vector<real> value;

    std::vector<real> multiply(std::span<const real> x) const {
        require_shape(x.size() == n, "sparse multiply dimension mismatch");
        std::vector<real> y(n, 0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t e = row_start[r]; e < row_start[r + 1]; ++e) y[r] += value[e] * x[col[e]];
        return y;
    }

    real at(std::size_t r, std::size_t c) const {
        const auto first = col.begin() + static_cast<std::ptrdiff_t>(row_start[r]);
        const auto last = col.begin() + static_cast<std::ptrdiff_t>(row_start[r + 1]);
        const auto it = std::lower_bound(first, last, c);
        return it != last && *it == c ? value[static_cast<std::size_t>(it - col.begin())] : real(0);
    }

    std::size_t nonzeros() const { return col.size(); }
};

/// Builds CSR from (row, col, value) triplets given for both triangles.
inline SparseSymmetric sparse_from_triplets(std::size_t n, std::vector<std::tuple<std::size_t, std::size_t, real>> t) {
    std::sort(t.begin(), t.end(), [](const auto& a, const auto& b) {
        return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
    });
    SparseSymmetric m;
    m.n = n;
    m.row_start.assign(n + 1, 0);
    for (const auto& [r, c, v] : t) {
        if (r >= n || c >= n) throw FormatError("graph entry outside node range");
        ++m.row_start[r + 1];
        m.col.push_back(c);
        m.value.push_back(v);
    }
    for (std::size_t r = 0; r < n; ++r) m.row_start[r + 1] += m.row_start[r];
    return m;
}

struct KnnGraph {
    std::size_t k = 0;
    real exponent = 0;
    /// A: clamp(sim, 0, 1)^exponent on the symmetrized kNN relation, zero diagonal.
    SparseSymmetric affinity;
    /// S = D^{-1/2} A D^{-1/2}.
    SparseSymmetric normalized;
    std::vector<real> degree;

    std::size_t size() const { return affinity.n; }
};

inline constexpr real kDegreeFloor = real(1e-12);

/// Derives degrees and S from the affinity matrix.
inline KnnGraph finish_graph(SparseSymmetric affinity, std::size_t k, real exponent) {
    KnnGraph g;
    g.k = k;
    g.exponent = exponent;
    g.degree.assign(affinity.n, 0);
    for (std::size_t r = 0; r < affinity.n; ++r)
        for (std::size_t e = affinity.row_start[r]; e < affinity.row_start[r + 1]; ++e) g.degree[r] += affinity.value[e];
    g.normalized = affinity;
    for (std::size_t r = 0; r < affinity.n; ++r) {
        for (std::size_t e = affinity.row_start[r]; e < affinity.row_start[r + 1]; ++e) {
            const std::size_t c = affinity.col[e];
            g.normalized.value[e] = affinity.value[e] / std::sqrt(std::max(g.degree[r], kDegreeFloor) *
                                                                  std::max(g.degree[c], kDegreeFloor));
        }
    }
    g.affinity = std::move(affinity);
    return g;
}

inline KnnGraph build_knn_graph(const Index& index, const DiffusionParams& params) {
    params.validate();
    const std::size_t n = index.size();
    if (n == 0) throw DataError("cannot build a graph over an empty index");
    const std::size_t k = std::min(params.k_nn, n - 1);
    // Mark j in kNN(i); union with the transpose gives the symmetric relation.
    std::vector<std::vector<std::size_t>> neighbours(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto s = index.similarities(index.row(i));
        s[i] = -std::numeric_limits<real>::infinity();
        neighbours[i] = rank_order(s, index, k);
    }
    std::vector<std::vector<std::size_t>> linked(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j : neighbours[i]) {
            linked[i].push_back(j);
            linked[j].push_back(i);
        }
    }
    std::vector<std::tuple<std::size_t, std::size_t, real>> triplets;
    for (std::size_t i = 0; i < n; ++i) {
        auto& l = linked[i];
        std::sort(l.begin(), l.end());
        l.erase(std::unique(l.begin(), l.end()), l.end());
        for (std::size_t j : l) {
            const real a = std::pow(detail::clamp_unit(dot(index.row(i), index.row(j))), params.exponent);
            if (a > 0) triplets.emplace_back(i, j, a);
        }
    }
    return finish_graph(sparse_from_triplets(n, std::move(triplets)), k, params.exponent);
}

/// Triplet cache: header line "agem-knn-graph <nodes> <k> <exponent>", then
/// one "row col value" line per stored affinity entry (both triangles).
inline void save_knn_graph(const std::filesystem::path& path, const KnnGraph& g) {
    std::ostringstream out;
    char buf[96];
    std::snprintf(buf, sizeof buf, "agem-knn-graph %zu %zu %.17g\n", g.size(), g.k, static_cast<double>(g.exponent));
    out << buf;
    const auto& a = g.affinity;
    for (std::size_t r = 0; r < a.n; ++r) {
        for (std::size_t e = a.row_start[r]; e < a.row_start[r + 1]; ++e) {
            std::snprintf(buf, sizeof buf, "%zu %zu %.17g\n", r, a.col[e], static_cast<double>(a.value[e]));
            out << buf;
        }
    }
    write_file_atomic(path, out.str());
}

inline KnnGraph load_knn_graph(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::string magic;
    std::size_t n = 0, k = 0;
    double exponent = 0;
    if (!(in >> magic >> n >> k >> exponent) || magic != "agem-knn-graph") {
        throw FormatError(path.string() + " is not a kNN graph cache");
    }
    std::vector<std::tuple<std::size_t, std::size_t, real>> triplets;
    std::size_t r = 0, c = 0;
    double v = 0;
    while (in >> r >> c >> v) triplets.emplace_back(r, c, static_cast<real>(v));
    if (!in.eof()) throw FormatError("malformed entry in kNN graph cache " + path.string());
    auto a = sparse_from_triplets(n, std::move(triplets));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t e = a.row_start[i]; e < a.row_start[i + 1]; ++e) {
            if (a.col[e] == i || a.at(a.col[e], i) != a.value[e]) {
                throw FormatError("kNN graph cache " + path.string() + " is not symmetric with zero diagonal");
            }
        }
    }
    return finish_graph(std::move(a), k, static_cast<real>(exponent));
}

/// y_j = clamp(sim_j, 0, 1)^exponent for the k_nn most similar items, 0 elsewhere.
inline std::vector<real> diffusion_seed(const Index& index, std::span<const real> q, const DiffusionParams& params) {
    const auto s = index.similarities(q);
    std::vector<real> y(s.size(), 0);
    for (std::size_t j : rank_order(s, index, std::min(params.k_nn, index.size()))) {
        y[j] = std::pow(detail::clamp_unit(s[j]), params.exponent);
    }
    return y;
}

struct DiffusionResult {
    std::vector<real> scores;
    std::size_t iterations = 0;
    /// Final relative residual ||y - (I - alpha S) f|| / ||y||.
    real residual = 0;
    bool converged = true;
};

/// Solves (I - alpha S) f = y by conjugate gradient, stopping when the
/// relative residual reaches params.tolerance. On non-convergence the iterate
/// with the smallest residual is returned and flagged.
inline DiffusionResult diffuse(const SparseSymmetric& s, std::span<const real> y, const DiffusionParams& params) {
    params.validate();
    require_shape(y.size() == s.n, "diffusion seed has " + std::to_string(y.size()) + " entries, graph has " +
                                       std::to_string(s.n) + " nodes");
    DiffusionResult out;
    out.scores.assign(y.begin(), y.end());
    if (params.alpha == 0) return out;
    const real y_norm = norm(y);
    if (y_norm == 0) {
        std::fill(out.scores.begin(), out.scores.end(), real(0));
        return out;
    }
    auto apply = [&](std::span<const real> x) {
        auto sx = s.multiply(x);
        for (std::size_t i = 0; i < sx.size(); ++i) sx[i] = x[i] - params.alpha * sx[i];
        return sx;
    };
    std::vector<real> x(s.n, 0), r(y.begin(), y.end()), p = r;
    real rr = dot(r, r);
    std::vector<real> best = x;
    real best_res = std::sqrt(rr) / y_norm;
    std::size_t it = 0;
    while (best_res > params.tolerance && it < params.max_iterations) {
        const auto mp = apply(p);
        const real step = rr / dot(p, mp);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += step * p[i];
            r[i] -= step * mp[i];
        }
        const real rr_next = dot(r, r);
        ++it;
        const real res = std::sqrt(rr_next) / y_norm;
        if (res < best_res) {
            best_res = res;
            best = x;
        }
        const real ratio = rr_next / rr;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + ratio * p[i];
        rr = rr_next;
    }
    check_finite(best, "diffuse");
    out.scores = std::move(best);
    out.iterations = it;
    out.residual = best_res;
    out.converged = best_res <= params.tolerance;
    return out;
}

/// S restricted to `nodes` and renormalized by the subgraph's own degrees.
inline SparseSymmetric subgraph(const KnnGraph& g, std::span<const std::size_t> nodes) {
    std::vector<std::ptrdiff_t> local(g.size(), -1);
    for (std::size_t i = 0; i < nodes.size(); ++i) local[nodes[i]] = static_cast<std::ptrdiff_t>(i);
    std::vector<std::tuple<std::size_t, std::size_t, real>> t;
    const auto& a = g.affinity;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const std::size_t r = nodes[i];
        for (std::size_t e = a.row_start[r]; e < a.row_start[r + 1]; ++e) {
            if (local[a.col[e]] >= 0) t.emplace_back(i, static_cast<std::size_t>(local[a.col[e]]), a.value[e]);
        }
    }
    return finish_graph(sparse_from_triplets(nodes.size(), std::move(t)), g.k, g.exponent).normalized;
}

/// Diffusion ranking for one query. With truncation T only the top-T items of
/// the dot-product ranking are diffused and ranked first; the rest follow in
/// dot-product order.
inline RankedList diffusion_search(const Index& index, const KnnGraph& graph, std::span<const real> q,
                                   const DiffusionParams& params, std::string query_id = {},
                                   DiffusionResult* report = nullptr) {
    require_shape(graph.size() == index.size(), "graph and index sizes differ");
    const auto seed = diffusion_seed(index, q, params);
    if (!params.truncation || *params.truncation >= index.size()) {
        auto result = diffuse(graph.normalized, seed, params);
        auto ranked = make_ranked_list(std::move(query_id), result.scores, index, index.size());
        if (report) *report = std::move(result);
        return ranked;
    }
    const auto sims = index.similarities(q);
    const auto order = rank_order(sims, index, index.size());
    const std::size_t t = *params.truncation;
    const std::vector<std::size_t> top(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(t));
    std::vector<real> local_seed(t);
    for (std::size_t i = 0; i < t; ++i) local_seed[i] = seed[top[i]];
    auto result = diffuse(subgraph(graph, top), local_seed, params);
    std::vector<std::size_t> local(t);
    std::iota(local.begin(), local.end(), std::size_t{0});
    std::sort(local.begin(), local.end(), [&](std::size_t a, std::size_t b) {
        if (result.scores[a] != result.scores[b]) return result.scores[a] > result.scores[b];
        return index.id(top[a]) < index.id(top[b]);
    });
    RankedList out{std::move(query_id), {}};
    for (std::size_t i : local) out.items.push_back({index.id(top[i]), result.scores[i]});
    for (std::size_t i = t; i < order.size(); ++i) out.items.push_back({index.id(order[i]), sims[order[i]]});
    if (report) *report = std::move(result);
    return out;
}

// ---------------------------------------------------------------------------
// Combined pipeline

struct RetrievalParams {
    /// DBA neighbours; 0 disables.
    std::size_t dba_n = 0;
    /// Set for beta-weighted DBA.
    std::optional<real> dba_beta;
    /// QE neighbours; 0 disables.
    std::size_t qe_n = 0;
    /// Set for alpha-weighted QE, unset for average QE.
    std::optional<real> qe_alpha;
    bool diffusion = false;
    DiffusionParams diffusion_params{};
};

inline nlohmann::json to_json(const RetrievalParams& p) {
    nlohmann::json j = {{"dba_n", p.dba_n},
                        {"qe_n", p.qe_n},
                        {"diffusion", p.diffusion},
                        {"k_nn", p.diffusion_params.k_nn},
                        {"diffusion_alpha", p.diffusion_params.alpha},
                        {"exponent", p.diffusion_params.exponent},
                        {"tolerance", p.diffusion_params.tolerance},
                        {"max_iterations", p.diffusion_params.max_iterations}};
    j["dba_beta"] = p.dba_beta ? nlohmann::json(*p.dba_beta) : nlohmann::json(nullptr);
    j["qe_alpha"] = p.qe_alpha ? nlohmann::json(*p.qe_alpha) : nlohmann::json(nullptr);
    j["truncation"] = p.diffusion_params.truncation ? nlohmann::json(*p.diffusion_params.truncation) : nlohmann::json(nullptr);
    return j;
}

inline RetrievalParams retrieval_params_from_json(const nlohmann::json& j, RetrievalParams p = {}) {
    auto optional_real = [&](const char* key, std::optional<real>& dst) {
        if (!j.contains(key)) return;
        if (j[key].is_null()) dst.reset();
        else dst = j[key].get<real>();
    };
    try {
        p.dba_n = j.value("dba_n", p.dba_n);
        p.qe_n = j.value("qe_n", p.qe_n);
        p.diffusion = j.value("diffusion", p.diffusion);
        auto& d = p.diffusion_params;
        d.k_nn = j.value("k_nn", d.k_nn);
        d.alpha = j.value("diffusion_alpha", d.alpha);
        d.exponent = j.value("exponent", d.exponent);
        d.tolerance = j.value("tolerance", d.tolerance);
        d.max_iterations = j.value("max_iterations", d.max_iterations);
        optional_real("dba_beta", p.dba_beta);
        optional_real("qe_alpha", p.qe_alpha);
        if (j.contains("truncation")) {
            if (j["truncation"].is_null()) d.truncation.reset();
            else d.truncation = j["truncation"].get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed retrieval parameters: ") + e.what());
    }
    p.diffusion_params.validate();
    return p;
}

/// Query side of the pipeline against an already augmented index: QE, then
/// either dot-product ranking or diffusion over `graph` when one is given.
/// Every list covers the whole index. Diffusion reports are appended to
/// `reports` when it is non-null.
inline std::vector<RankedList> query_retrieval(const Index& augmented, const KnnGraph* graph,
                                               const DescriptorSet& queries, const RetrievalParams& params,
                                               std::vector<DiffusionResult>* reports = nullptr) {
    if (queries.dim() != augmented.dim() && !queries.empty()) {
        throw ShapeError("query dimension " + std::to_string(queries.dim()) + " does not match index dimension " +
                         std::to_string(augmented.dim()));
    }
    std::vector<RankedList> out;
    out.reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        std::vector<real> q(queries.row(i).begin(), queries.row(i).end());
        if (params.qe_n > 0) {
            const auto first = search(augmented, q);
            q = params.qe_alpha ? alpha_qe(q, first, augmented, params.qe_n, *params.qe_alpha)
                                : average_qe(q, first, augmented, params.qe_n);
        }
        if (graph) {
            DiffusionResult report;
            out.push_back(diffusion_search(augmented, *graph, q, params.diffusion_params, queries.id(i), &report));
            if (reports) reports->push_back(std::move(report));
        } else {
            out.push_back(search(augmented, q, 0, queries.id(i)));
        }
    }
    return out;
}

/// DBA on the index, then per query: QE against the augmented index, then
/// either dot-product ranking or diffusion seeded from the expanded query.
inline std::vector<RankedList> run_retrieval(const Index& index, const DescriptorSet& queries,
                                             const RetrievalParams& params,
                                             std::vector<DiffusionResult>* reports = nullptr) {
    if (queries.dim() != index.dim() && !queries.empty()) {
        throw ShapeError("query dimension " + std::to_string(queries.dim()) + " does not match index dimension " +
                         std::to_string(index.dim()));
    }
    const Index augmented = dba(index, params.dba_n, params.dba_beta);
    std::optional<KnnGraph> graph;
    if (params.diffusion) graph = build_knn_graph(augmented, params.diffusion_params);
    return query_retrieval(augmented, graph ? &*graph : nullptr, queries, params, reports);
}

/// CSV: query,rank,id,score with 1-based ranks and 6-decimal scores.
inline std::string ranked_lists_csv(const std::vector<RankedList>& lists, std::size_t top = 0,
                                    const std::string& header_comment = {}) {
    std::ostringstream out;
    if (!header_comment.empty()) out << "# " << header_comment << "\n";
    out << "query,rank,id,score\n";
    char buf[64];
    for (const auto& l : lists) {
        const std::size_t n = top == 0 ? l.size() : std::min(top, l.size());
        for (std::size_t r = 0; r < n; ++r) {
            std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(l.items[r].score));
            out << l.query << ',' << r + 1 << ',' << l.items[r].id << ',' << buf << '\n';
        }
    }
    return out.str();
}

} // namespace agem
