#pragma once

// mAP under the Medium and Hard protocols, and the (dba, qe) and
// (alpha, beta) sweep grids.

#include <agem/retrieval.hpp>
#include <agem/tensor_io.hpp>

#include <nlohmann/json.hpp>

#include <map>
#include <set>
#include <unordered_set>

namespace agem {

struct QueryLabels {
    std::vector<std::string> easy;
    std::vector<std::string> hard;
    std::vector<std::string> unclear;
};

struct GroundTruth {
    /// Ordered by query id, which fixes the aggregation order.
    std::map<std::string, QueryLabels> queries;

    const QueryLabels& at(const std::string& query) const {
        auto it = queries.find(query);
        if (it == queries.end()) throw DataError("no ground truth for query " + query);
        return it->second;
    }

    /// Label sets must be pairwise disjoint and free of duplicates. When
    /// `database` is given, every label must name one of its ids.
    void validate(const DescriptorSet* database = nullptr) const {
        for (const auto& [q, labels] : queries) {
            std::unordered_set<std::string> seen;
            for (const auto* group : {&labels.easy, &labels.hard, &labels.unclear}) {
                for (const auto& id : *group) {
                    if (!seen.insert(id).second) {
                        throw DataError("ground truth for query " + q + " lists " + id + " more than once");
                    }
                    if (database && !database->find(id)) {
                        throw DataError("ground truth for query " + q + " references unknown database id " + id);
                    }
                }
            }
        }
    }
};

inline nlohmann::json to_json(const GroundTruth& gt) {
    nlohmann::json queries = nlohmann::json::object();
    for (const auto& [q, l] : gt.queries) {
        queries[q] = {{"easy", l.easy}, {"hard", l.hard}, {"unclear", l.unclear}};
    }
    return {{"queries", queries}};
}

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
    GroundTruth gt;
    try {
        for (const auto& [q, entry] : j.at("queries").items()) {
            QueryLabels l;
            // A missing category is an empty one.
            l.easy = entry.value("easy", std::vector<std::string>{});
            l.hard = entry.value("hard", std::vector<std::string>{});
            l.unclear = entry.value("unclear", std::vector<std::string>{});
            gt.queries.emplace(q, std::move(l));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed ground truth: ") + e.what());
    }
    gt.validate();
    return gt;
}

inline GroundTruth load_ground_truth(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("ground truth " + path.string() + " is not valid JSON: " + e.what());
    }
    return ground_truth_from_json(j);
}

inline void save_ground_truth(const std::filesystem::path& path, const GroundTruth& gt) {
    write_file_atomic(path, to_json(gt).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Protocols

enum class Protocol { medium, hard };

inline std::string protocol_name(Protocol p) { return p == Protocol::medium ? "medium" : "hard"; }

inline Protocol parse_protocol(const std::string& name) {
    if (name == "medium" || name == "M") return Protocol::medium;
    if (name == "hard" || name == "H") return Protocol::hard;
    throw DataError("unknown protocol '" + name + "' (expected medium or hard)");
}

using IdSet = std::unordered_set<std::string>;

struct ProtocolSpec {
    Protocol protocol = Protocol::medium;

    std::string name() const { return protocol_name(protocol); }

    IdSet positives(const QueryLabels& l) const {
        IdSet out(l.hard.begin(), l.hard.end());
        if (protocol == Protocol::medium) out.insert(l.easy.begin(), l.easy.end());
        return out;
    }

    IdSet junk(const QueryLabels& l) const {
        IdSet out(l.unclear.begin(), l.unclear.end());
        if (protocol == Protocol::hard) out.insert(l.easy.begin(), l.easy.end());
        return out;
    }
};

// ---------------------------------------------------------------------------
// Average precision

/// Trapezoidal AP over `ranked` with junk ids deleted. The j-th positive hit
/// (0-based) at post-removal rank r (0-based) contributes
/// (j / r + (j + 1) / (r + 1)) / 2, with j / r read as 1 at r = 0, and the sum
/// is divided by |positives|. Returns nullopt for an empty positive set.
inline std::optional<real> average_precision(std::span<const std::string> ranked, const IdSet& positives,
                                             const IdSet& junk) {
    if (positives.empty()) return std::nullopt;
    double sum = 0;
    std::size_t hits = 0;
    std::size_t rank = 0;
    for (const auto& id : ranked) {
        if (junk.count(id)) continue;
        if (positives.count(id)) {
            const double j = static_cast<double>(hits);
            const double r = static_cast<double>(rank);
            const double before = rank == 0 ? 1.0 : j / r;
            const double after = (j + 1) / (r + 1);
            sum += (before + after) / 2;
            ++hits;
        }
        ++rank;
    }
    return static_cast<real>(sum / static_cast<double>(positives.size()));
}

inline std::optional<real> average_precision(const RankedList& ranked, const IdSet& positives, const IdSet& junk) {
    const auto ids = ranked.ids();
    return average_precision(std::span<const std::string>(ids), positives, junk);
}

struct QueryAp {
    std::string query;
    real ap = 0;
};

struct EvaluationResult {
    Protocol protocol = Protocol::medium;
    real map = 0;
    /// Evaluated queries, sorted by id.
    std::vector<QueryAp> per_query;
    /// Queries with no positives under the protocol, sorted by id.
    std::vector<std::string> skipped;
};

/// AP of each list against its query's labels, averaged over the queries
/// that have positives.
inline EvaluationResult evaluate_rankings(const std::vector<RankedList>& lists, const GroundTruth& gt,
                                          const ProtocolSpec& protocol) {
    EvaluationResult out;
    out.protocol = protocol.protocol;
    std::vector<const RankedList*> sorted;
    sorted.reserve(lists.size());
    for (const auto& l : lists) sorted.push_back(&l);
    std::sort(sorted.begin(), sorted.end(), [](const RankedList* a, const RankedList* b) { return a->query < b->query; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i]->query == sorted[i - 1]->query) throw DataError("query " + sorted[i]->query + " ranked twice");
    }
    double total = 0;
    for (const RankedList* l : sorted) {
        const auto& labels = gt.at(l->query);
        const auto ap = average_precision(*l, protocol.positives(labels), protocol.junk(labels));
        if (!ap) {
            out.skipped.push_back(l->query);
            continue;
        }
        out.per_query.push_back({l->query, *ap});
        total += static_cast<double>(*ap);
    }
    if (out.per_query.empty()) {
        throw DataError("no query has positives under the " + protocol.name() + " protocol");
    }
    out.map = static_cast<real>(total / static_cast<double>(out.per_query.size()));
    return out;
}

/// Every query must have a ground-truth entry; checked before any search runs.
inline void require_ground_truth(const DescriptorSet& queries, const GroundTruth& gt) {
    for (const auto& q : queries.ids()) gt.at(q);
}

inline EvaluationResult evaluate(const Index& index, const DescriptorSet& queries, const GroundTruth& gt,
                                 const ProtocolSpec& protocol, const RetrievalParams& params = {}) {
    require_ground_truth(queries, gt);
    return evaluate_rankings(run_retrieval(index, queries, params), gt, protocol);
}

// ---------------------------------------------------------------------------
// Sweeps

struct DbaQeCell {
    std::size_t dba_n = 0;
    std::size_t qe_n = 0;
    real map = 0;
};

struct AlphaBetaCell {
    real alpha = 0;
    real beta = 0;
    real map = 0;
};

namespace detail {

inline std::vector<RankedList> expanded_search(const Index& augmented, const DescriptorSet& queries, std::size_t qe_n,
                                               std::optional<real> qe_alpha) {
    RetrievalParams params;
    params.qe_n = qe_n;
    params.qe_alpha = qe_alpha;
    return query_retrieval(augmented, nullptr, queries, params);
}

} // namespace detail

/// Plain DBA times average QE. DBA is recomputed from `index` for each depth.
inline std::vector<DbaQeCell> sweep_dba_qe(const Index& index, const DescriptorSet& queries, const GroundTruth& gt,
                                           std::span<const std::size_t> dba_counts,
                                           std::span<const std::size_t> qe_counts, const ProtocolSpec& protocol) {
    require_ground_truth(queries, gt);
    std::vector<DbaQeCell> out;
    out.reserve(dba_counts.size() * qe_counts.size());
    for (std::size_t d : dba_counts) {
        const Index augmented = dba(index, d);
        for (std::size_t n : qe_counts) {
            const auto lists = detail::expanded_search(augmented, queries, n, std::nullopt);
            out.push_back({d, n, evaluate_rankings(lists, gt, protocol).map});
        }
    }
    return out;
}

/// beta-weighted DBA of depth n_dba times alpha-weighted QE of depth n_qe.
inline std::vector<AlphaBetaCell> sweep_alpha_beta(const Index& index, const DescriptorSet& queries,
                                                   const GroundTruth& gt, std::span<const real> alphas,
                                                   std::span<const real> betas, std::size_t n_dba, std::size_t n_qe,
                                                   const ProtocolSpec& protocol) {
    require_ground_truth(queries, gt);
    std::vector<AlphaBetaCell> out;
    out.reserve(alphas.size() * betas.size());
    for (real b : betas) {
        const Index augmented = dba(index, n_dba, b);
        for (real a : alphas) {
            const auto lists = detail::expanded_search(augmented, queries, n_qe, a);
            out.push_back({a, b, evaluate_rankings(lists, gt, protocol).map});
        }
    }
    return out;
}

inline std::string format_real(real v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(v));
    return buf;
}

inline std::string sweep_csv(const std::vector<DbaQeCell>& cells, Protocol protocol) {
    std::ostringstream out;
    out << "# protocol=" << protocol_name(protocol) << "\n";
    out << "dba_n,qe_n,map\n";
    for (const auto& c : cells) out << c.dba_n << ',' << c.qe_n << ',' << format_real(c.map) << '\n';
    return out.str();
}

inline std::string sweep_csv(const std::vector<AlphaBetaCell>& cells, Protocol protocol, std::size_t n_dba,
                             std::size_t n_qe) {
    std::ostringstream out;
    out << "# protocol=" << protocol_name(protocol) << " n_dba=" << n_dba << " n_qe=" << n_qe << "\n";
    out << "alpha,beta,map\n";
    for (const auto& c : cells) out << format_real(c.alpha) << ',' << format_real(c.beta) << ',' << format_real(c.map) << '\n';
    return out.str();
}

/// query,ap rows for evaluated queries, then the mean.
inline std::string per_query_csv(const EvaluationResult& r) {
    std::ostringstream out;
    out << "# protocol=" << protocol_name(r.protocol) << " skipped=" << r.skipped.size() << "\n";
    out << "query,ap\n";
    for (const auto& q : r.per_query) out << q.query << ',' << format_real(q.ap) << '\n';
    out << "mean," << format_real(r.map) << '\n';
    return out.str();
}

} // namespace agem
