#pragma once

// Command implementations behind the `agem` executable. Each command reads
// its inputs from a PipelineConfig, calls into the library, and writes its
// artifacts under the output directory. Argument parsing lives in the tool.

#include <agem/evaluation.hpp>
#include <agem/features.hpp>
#include <agem/training.hpp>

#include <iomanip>
#include <iostream>

namespace agem {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInputError = 2;
inline constexpr int kExitNumericalError = 3;

struct PipelinePaths {
    std::optional<std::filesystem::path> features;
    std::optional<std::filesystem::path> model;
    std::optional<std::filesystem::path> descriptors;
    std::optional<std::filesystem::path> queries;
    std::optional<std::filesystem::path> pairs;
    std::optional<std::filesystem::path> whitening;
    std::optional<std::filesystem::path> index;
    std::optional<std::filesystem::path> ground_truth;
};

struct SweepConfig {
    std::vector<std::size_t> dba_counts{0, 1, 2, 3, 5, 7, 10};
    std::vector<std::size_t> qe_counts{0, 1, 2, 3, 5, 7, 10};
    std::vector<real> alphas{0, 1, 2, 3, 4, 5};
    std::vector<real> betas{0, 1, 2, 3, 4, 5};
    std::size_t n_dba = 2;
    std::size_t n_qe = 2;
};

struct PipelineConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = ".";
    PipelinePaths paths;
    DescriptorKind descriptor = DescriptorKind::gem;
    /// Used for GeM/SPoC/MAC extraction when no model is given.
    PoolingSpec pooling = PoolingSpec::gem();
    MultiScaleSpec multiscale{};
    /// Output name (without extension) of `extract`.
    std::string name = "descriptors";
    /// 0 keeps the input dimension.
    std::size_t whitening_dim = 0;
    RetrievalParams retrieval{};
    std::vector<Protocol> protocols{Protocol::medium, Protocol::hard};
    /// Ranked items written per query by `search`; 0 writes every item.
    std::size_t search_k = 10;
    SweepConfig sweep{};
    ToyRunConfig toy{};
    /// train-toy also writes a small benchmark (feature maps, pairs, ground truth).
    bool export_toy_benchmark = false;
};

namespace detail {

inline std::optional<std::filesystem::path> config_path(const nlohmann::json& j, const char* key,
                                                        const std::filesystem::path& base) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    std::filesystem::path p = j[key].get<std::string>();
    return p.is_relative() ? base / p : p;
}

inline std::vector<Protocol> parse_protocols(const nlohmann::json& j) {
    std::vector<Protocol> out;
    if (j.is_string()) {
        out.push_back(parse_protocol(j.get<std::string>()));
    } else {
        for (const auto& p : j) out.push_back(parse_protocol(p.get<std::string>()));
    }
    if (out.empty()) throw DataError("at least one protocol is required");
    return out;
}

} // namespace detail

/// Relative paths inside the config are resolved against `base`, normally
/// the directory holding the config file.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
    PipelineConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        if (auto out = detail::config_path(j, "output_dir", base)) c.output_dir = *out;
        if (j.contains("paths")) {
            const auto& p = j["paths"];
            c.paths.features = detail::config_path(p, "features", base);
            c.paths.model = detail::config_path(p, "model", base);
            c.paths.descriptors = detail::config_path(p, "descriptors", base);
            c.paths.queries = detail::config_path(p, "queries", base);
            c.paths.pairs = detail::config_path(p, "pairs", base);
            c.paths.whitening = detail::config_path(p, "whitening", base);
            c.paths.index = detail::config_path(p, "index", base);
            c.paths.ground_truth = detail::config_path(p, "ground_truth", base);
        }
        if (j.contains("descriptor")) c.descriptor = parse_descriptor_kind(j["descriptor"].get<std::string>());
        if (j.contains("pooling")) c.pooling = pooling_from_json(j["pooling"]);
        if (j.contains("multiscale")) c.multiscale = multiscale_from_json(j["multiscale"]);
        c.name = j.value("name", c.name);
        c.whitening_dim = j.value("whitening_dim", c.whitening_dim);
        if (j.contains("retrieval")) c.retrieval = retrieval_params_from_json(j["retrieval"]);
        if (j.contains("protocol")) c.protocols = detail::parse_protocols(j["protocol"]);
        c.search_k = j.value("search_k", c.search_k);
        if (j.contains("sweep")) {
            const auto& s = j["sweep"];
            c.sweep.dba_counts = s.value("dba_counts", c.sweep.dba_counts);
            c.sweep.qe_counts = s.value("qe_counts", c.sweep.qe_counts);
            c.sweep.alphas = s.value("alphas", c.sweep.alphas);
            c.sweep.betas = s.value("betas", c.sweep.betas);
            c.sweep.n_dba = s.value("n_dba", c.sweep.n_dba);
            c.sweep.n_qe = s.value("n_qe", c.sweep.n_qe);
        }
        if (j.contains("toy")) c.toy = toy_run_config_from_json(j["toy"]);
        c.export_toy_benchmark = j.value("export_toy_benchmark", c.export_toy_benchmark);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed pipeline config: ") + e.what());
    }
    return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    if (!std::filesystem::is_regular_file(path)) throw DataError("config file " + path.string() + " does not exist");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return pipeline_config_from_json(j, path.parent_path());
}

/// Command-line values; every set field replaces the config value.
struct ConfigOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> output_dir;
    std::optional<std::string> protocol;
    std::optional<std::string> descriptor;
    PipelinePaths paths;
    std::optional<std::string> name;
    std::optional<std::size_t> search_k;
    std::optional<std::size_t> dba_n;
    std::optional<std::size_t> qe_n;
    std::optional<real> qe_alpha;
    std::optional<real> dba_beta;
    std::optional<bool> diffusion;
    std::optional<std::size_t> epochs;
    std::optional<bool> export_toy_benchmark;
};

inline void apply_overrides(PipelineConfig& c, const ConfigOverrides& o) {
    if (o.seed) c.seed = *o.seed;
    if (o.output_dir) c.output_dir = *o.output_dir;
    if (o.protocol) {
        c.protocols = *o.protocol == "both" ? std::vector<Protocol>{Protocol::medium, Protocol::hard}
                                            : std::vector<Protocol>{parse_protocol(*o.protocol)};
    }
    if (o.descriptor) c.descriptor = parse_descriptor_kind(*o.descriptor);
    auto take = [](auto& dst, const auto& src) {
        if (src) dst = src;
    };
    take(c.paths.features, o.paths.features);
    take(c.paths.model, o.paths.model);
    take(c.paths.descriptors, o.paths.descriptors);
    take(c.paths.queries, o.paths.queries);
    take(c.paths.pairs, o.paths.pairs);
    take(c.paths.whitening, o.paths.whitening);
    take(c.paths.index, o.paths.index);
    take(c.paths.ground_truth, o.paths.ground_truth);
    if (o.name) c.name = *o.name;
    if (o.search_k) c.search_k = *o.search_k;
    if (o.dba_n) c.retrieval.dba_n = *o.dba_n;
    if (o.qe_n) c.retrieval.qe_n = *o.qe_n;
    if (o.qe_alpha) c.retrieval.qe_alpha = *o.qe_alpha;
    if (o.dba_beta) c.retrieval.dba_beta = *o.dba_beta;
    if (o.diffusion) c.retrieval.diffusion = *o.diffusion;
    if (o.epochs) c.toy.train.epochs = *o.epochs;
    if (o.export_toy_benchmark) c.export_toy_benchmark = *o.export_toy_benchmark;
}

// ---------------------------------------------------------------------------
// Shared helpers

/// The path, after checking it was supplied and exists.
inline std::filesystem::path require_input(const std::optional<std::filesystem::path>& p, const char* flag,
                                           const char* what) {
    if (!p) throw DataError(std::string("missing ") + what + ": pass " + flag + " or set it in the config");
    if (!std::filesystem::exists(*p)) throw DataError(std::string(what) + " " + p->string() + " does not exist (" + flag + ")");
    return *p;
}

inline std::string seed_comment(std::uint64_t seed) { return "# seed=" + std::to_string(seed) + "\n"; }

inline std::vector<MatchingPair> load_pairs(const std::filesystem::path& path) {
    std::vector<MatchingPair> out;
    try {
        const auto j = nlohmann::json::parse(read_file(path));
        for (const auto& p : j.at("pairs")) {
            if (p.size() != 2) throw FormatError("pairs file " + path.string() + " has an entry without two ids");
            out.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed pairs file " + path.string() + ": " + e.what());
    }
    return out;
}

inline void save_pairs(const std::filesystem::path& path, std::span<const MatchingPair> pairs) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& [a, b] : pairs) list.push_back({a, b});
    write_file_atomic(path, nlohmann::json{{"pairs", list}}.dump(1) + "\n");
}

/// The database as stored by `index`: unit-norm descriptors after optional
/// whitening and DBA, the whitening to apply to queries, and an optional
/// cached kNN graph built on the stored descriptors.
struct IndexBundle {
    Index index;
    std::optional<WhiteningTransform> whitening;
    std::optional<KnnGraph> graph;
    std::size_t dba_n = 0;
    std::optional<real> dba_beta;
};

inline void save_index_bundle(const std::filesystem::path& dir, const IndexBundle& b, std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = {{"format", "agem-index"},
                               {"version", 1},
                               {"seed", seed},
                               {"dba_n", b.dba_n},
                               {"dba_beta", b.dba_beta ? nlohmann::json(*b.dba_beta) : nlohmann::json(nullptr)},
                               {"descriptors", "descriptors.json"}};
    save_descriptor_set(dir / "descriptors.json", b.index.descriptors(), {{"seed", seed}});
    manifest["whitening"] = nullptr;
    if (b.whitening) {
        save_whitening(dir / "whitening.json", *b.whitening, {{"seed", seed}});
        manifest["whitening"] = "whitening.json";
    }
    manifest["graph"] = nullptr;
    if (b.graph) {
        save_knn_graph(dir / "knn_graph.txt", *b.graph);
        manifest["graph"] = "knn_graph.txt";
    }
    write_file_atomic(dir / "index.json", manifest.dump(1) + "\n");
}

inline IndexBundle load_index_bundle(const std::filesystem::path& dir) {
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_file(dir / "index.json"));
        if (m.at("format") != "agem-index") throw FormatError(dir.string() + " is not an index directory");
        if (m.at("version") != 1) throw FormatError("unsupported index version in " + dir.string());
        IndexBundle b{Index(load_descriptor_set(dir / m.at("descriptors").get<std::string>())), {}, {}, 0, {}};
        b.dba_n = m.at("dba_n").get<std::size_t>();
        if (!m.at("dba_beta").is_null()) b.dba_beta = m["dba_beta"].get<real>();
        if (!m.at("whitening").is_null()) b.whitening = load_whitening(dir / m["whitening"].get<std::string>());
        if (!m.at("graph").is_null()) {
            b.graph = load_knn_graph(dir / m["graph"].get<std::string>());
            if (b.graph->size() != b.index.size()) throw FormatError("kNN graph in " + dir.string() + " does not match the index size");
        }
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed index manifest in " + dir.string() + ": " + e.what());
    }
}

/// Database descriptors -> optional whitening -> DBA -> optional graph.
inline IndexBundle build_index_bundle(const DescriptorSet& database, std::optional<WhiteningTransform> whitening,
                                      const RetrievalParams& params) {
    const DescriptorSet base = whitening ? apply_whitening(*whitening, database) : database;
    IndexBundle b{dba(Index(base), params.dba_n, params.dba_beta), std::move(whitening), {}, params.dba_n, params.dba_beta};
    if (params.diffusion) b.graph = build_knn_graph(b.index, params.diffusion_params);
    return b;
}

inline DescriptorSet prepare_queries(const IndexBundle& b, const DescriptorSet& queries) {
    return b.whitening ? apply_whitening(*b.whitening, queries) : queries;
}

/// QE and search or diffusion against the bundle. Diffusion that fails to
/// reach its tolerance is a numerical failure here.
inline std::vector<RankedList> bundle_retrieval(const IndexBundle& b, const DescriptorSet& queries,
                                                const RetrievalParams& params) {
    std::optional<KnnGraph> built;
    const KnnGraph* graph = nullptr;
    if (params.diffusion) {
        if (!b.graph) built = build_knn_graph(b.index, params.diffusion_params);
        graph = b.graph ? &*b.graph : &*built;
    }
    std::vector<DiffusionResult> reports;
    auto lists = query_retrieval(b.index, graph, prepare_queries(b, queries), params, &reports);
    for (std::size_t i = 0; i < reports.size(); ++i) {
        if (!reports[i].converged) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.3g", static_cast<double>(reports[i].residual));
            throw NumericalError("diffusion did not converge for query " + queries.id(i) + ": residual " + buf +
                                 " after " + std::to_string(reports[i].iterations) +
                                 " iterations (raise max_iterations or tolerance)");
        }
    }
    return lists;
}

/// Fixed-width table of mAP per protocol.
inline std::string format_map_table(const std::vector<EvaluationResult>& results) {
    std::ostringstream out;
    out << std::left << std::setw(10) << "protocol" << std::setw(12) << "mAP" << std::setw(10) << "queries"
        << "skipped\n";
    for (const auto& r : results) {
        out << std::left << std::setw(10) << protocol_name(r.protocol) << std::setw(12) << format_real(r.map)
            << std::setw(10) << r.per_query.size() << r.skipped.size() << '\n';
    }
    return out.str();
}

struct CommandIo {
    std::ostream& out = std::cout;
    std::ostream& err = std::cerr;
};

// ---------------------------------------------------------------------------
// Commands

/// Queries are image 0 of each toy cluster, the rest form the database.
/// Ground truth alternates the remaining same-cluster images between easy
/// and hard; whitening pairs are every same-cluster database pair.
inline void export_toy_benchmark(const std::filesystem::path& dir, const DescriptorModel& model, const ToyDataset& ds,
                                 std::span<const real> scales) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> qids, dids;
    std::vector<Tensor> qimgs, dimgs;
    std::map<int, std::vector<std::string>> members;
    for (std::size_t i = 0; i < ds.ids.size(); ++i) {
        const bool first = members.find(ds.labels[i]) == members.end();
        members[ds.labels[i]];
        if (first) {
            qids.push_back(ds.ids[i]);
            qimgs.push_back(ds.images[i]);
        } else {
            dids.push_back(ds.ids[i]);
            dimgs.push_back(ds.images[i]);
            members[ds.labels[i]].push_back(ds.ids[i]);
        }
    }
    export_toy_feature_maps(dir / "db_features.json", model, dids, dimgs, scales);
    export_toy_feature_maps(dir / "query_features.json", model, qids, qimgs, scales);
    GroundTruth gt;
    for (const auto& q : qids) {
        QueryLabels l;
        const auto& m = members.at(ds.label(q));
        for (std::size_t k = 0; k < m.size(); ++k) (k % 2 == 0 ? l.easy : l.hard).push_back(m[k]);
        gt.queries[q] = std::move(l);
    }
    save_ground_truth(dir / "gt.json", gt);
    std::vector<MatchingPair> pairs;
    for (const auto& [label, m] : members) {
        for (std::size_t a = 0; a < m.size(); ++a)
            for (std::size_t b = a + 1; b < m.size(); ++b) pairs.emplace_back(m[a], m[b]);
    }
    save_pairs(dir / "pairs.json", pairs);
}

/// Writes <out>/checkpoint/ and <out>/train_stats.csv, and with
/// export_toy_benchmark also <out>/toy_bench/.
inline void cmd_train_toy(const PipelineConfig& c, CommandIo io = {}) {
    const auto r = run_toy_training(c.toy, c.seed);
    std::filesystem::create_directories(c.output_dir);
    save_checkpoint(c.output_dir / "checkpoint", r.model, r.adam, c.toy.train.epochs, c.toy.train, c.seed);
    write_file_atomic(c.output_dir / "train_stats.csv", stats_csv(r.epochs, c.seed));
    if (c.export_toy_benchmark) export_toy_benchmark(c.output_dir / "toy_bench", r.model, r.data, c.multiscale.scales);
    io.out << "steps " << r.steps << "  loss " << format_real(r.initial.mean_loss) << " -> "
           << format_real(r.final.mean_loss) << "  pos/neg distance " << format_real(r.final.mean_pos_dist) << " / "
           << format_real(r.final.mean_neg_dist) << "\n";
}

inline DescriptorSet extract_with_config(const PipelineConfig& c) {
    const auto manifest = load_feature_manifest(require_input(c.paths.features, "--features", "feature-map manifest"));
    DescriptorModel model;
    if (c.paths.model) {
        model = load_model(require_input(c.paths.model, "--model", "model directory"));
    } else if (c.descriptor == DescriptorKind::agem) {
        throw DataError("AGeM extraction needs a trained model: pass --model");
    } else {
        model = pooling_only_model(c.pooling);
    }
    return extract_descriptors(manifest, model, c.descriptor, c.multiscale);
}

/// Writes <out>/<name>.json and its tensor.
inline void cmd_extract(const PipelineConfig& c, CommandIo io = {}) {
    const auto set = extract_with_config(c);
    std::filesystem::create_directories(c.output_dir);
    save_descriptor_set(c.output_dir / (c.name + ".json"), set,
                        {{"seed", c.seed}, {"descriptor", to_string(c.descriptor)}});
    io.out << "extracted " << set.size() << " " << to_string(c.descriptor) << " descriptors of dimension " << set.dim()
           << "\n";
}

/// Writes <out>/whitening.json and its tensors.
inline void cmd_whiten(const PipelineConfig& c, CommandIo io = {}) {
    const auto set = load_descriptor_set(require_input(c.paths.descriptors, "--descriptors", "descriptor set"));
    const auto pairs = load_pairs(require_input(c.paths.pairs, "--pairs", "matching-pairs file"));
    const auto t = learn_whitening(set, pairs, c.whitening_dim);
    std::filesystem::create_directories(c.output_dir);
    save_whitening(c.output_dir / "whitening.json", t, {{"seed", c.seed}});
    io.out << "learned whitening " << t.input_dim() << " -> " << t.output_dim() << " from " << pairs.size()
           << " pairs\n";
}

inline IndexBundle index_with_config(const PipelineConfig& c) {
    const auto set = load_descriptor_set(require_input(c.paths.descriptors, "--descriptors", "descriptor set"));
    std::optional<WhiteningTransform> w;
    if (c.paths.whitening) w = load_whitening(require_input(c.paths.whitening, "--whitening", "whitening transform"));
    return build_index_bundle(set, std::move(w), c.retrieval);
}

/// Writes <out>/index/.
inline void cmd_index(const PipelineConfig& c, CommandIo io = {}) {
    const auto b = index_with_config(c);
    save_index_bundle(c.output_dir / "index", b, c.seed);
    io.out << "indexed " << b.index.size() << " items (dba_n " << b.dba_n << (b.graph ? ", kNN graph cached" : "")
           << ")\n";
}

inline IndexBundle load_index_from_config(const PipelineConfig& c) {
    return load_index_bundle(require_input(c.paths.index, "--index", "index directory"));
}

/// Writes <out>/ranked.csv with the top search_k items per query.
inline void cmd_search(const PipelineConfig& c, CommandIo io = {}) {
    const auto b = load_index_from_config(c);
    const auto queries = load_descriptor_set(require_input(c.paths.queries, "--queries", "query descriptor set"));
    const auto lists = bundle_retrieval(b, queries, c.retrieval);
    std::filesystem::create_directories(c.output_dir);
    write_file_atomic(c.output_dir / "ranked.csv", ranked_lists_csv(lists, c.search_k, "seed=" + std::to_string(c.seed)));
    io.out << "ranked " << lists.size() << " queries against " << b.index.size() << " items\n";
}

inline std::vector<EvaluationResult> evaluate_bundle(const IndexBundle& b, const DescriptorSet& queries,
                                                     const GroundTruth& gt, const PipelineConfig& c) {
    gt.validate(&b.index.descriptors());
    require_ground_truth(queries, gt);
    const auto lists = bundle_retrieval(b, queries, c.retrieval);
    std::vector<EvaluationResult> out;
    for (Protocol p : c.protocols) out.push_back(evaluate_rankings(lists, gt, ProtocolSpec{p}));
    return out;
}

/// Prints the mAP table and writes <out>/evaluation.csv plus per-query APs
/// in <out>/evaluation_<protocol>.csv.
inline std::vector<EvaluationResult> cmd_evaluate(const PipelineConfig& c, CommandIo io = {}) {
    const auto b = load_index_from_config(c);
    const auto queries = load_descriptor_set(require_input(c.paths.queries, "--queries", "query descriptor set"));
    const auto gt = load_ground_truth(require_input(c.paths.ground_truth, "--gt", "ground truth"));
    const auto results = evaluate_bundle(b, queries, gt, c);
    std::filesystem::create_directories(c.output_dir);
    std::ostringstream summary;
    summary << seed_comment(c.seed) << "protocol,map,queries,skipped\n";
    for (const auto& r : results) {
        for (const auto& q : r.skipped) {
            io.err << "warning: query " << q << " has no positives under the " << protocol_name(r.protocol)
                   << " protocol and is skipped\n";
        }
        summary << protocol_name(r.protocol) << ',' << format_real(r.map) << ',' << r.per_query.size() << ','
                << r.skipped.size() << '\n';
        write_file_atomic(c.output_dir / ("evaluation_" + protocol_name(r.protocol) + ".csv"),
                          seed_comment(c.seed) + per_query_csv(r));
    }
    write_file_atomic(c.output_dir / "evaluation.csv", summary.str());
    io.out << format_map_table(results);
    return results;
}

namespace detail {

/// Sweeps start from the database before DBA.
inline IndexBundle sweep_base(const PipelineConfig& c) {
    auto b = load_index_from_config(c);
    if (b.dba_n != 0) {
        throw DataError("sweeps recompute DBA themselves: rebuild the index with dba_n = 0");
    }
    return b;
}

} // namespace detail

/// Writes <out>/sweep_dba_qe_<protocol>.csv per protocol.
inline void cmd_sweep_dba_qe(const PipelineConfig& c, CommandIo io = {}) {
    const auto b = detail::sweep_base(c);
    const auto queries = prepare_queries(
        b, load_descriptor_set(require_input(c.paths.queries, "--queries", "query descriptor set")));
    const auto gt = load_ground_truth(require_input(c.paths.ground_truth, "--gt", "ground truth"));
    gt.validate(&b.index.descriptors());
    std::filesystem::create_directories(c.output_dir);
    for (Protocol p : c.protocols) {
        const auto cells = sweep_dba_qe(b.index, queries, gt, c.sweep.dba_counts, c.sweep.qe_counts, ProtocolSpec{p});
        const auto file = c.output_dir / ("sweep_dba_qe_" + protocol_name(p) + ".csv");
        write_file_atomic(file, seed_comment(c.seed) + sweep_csv(cells, p));
        io.out << "wrote " << cells.size() << " cells to " << file.string() << "\n";
    }
}

/// Writes <out>/sweep_alpha_beta_<protocol>.csv per protocol.
inline void cmd_sweep_alpha_beta(const PipelineConfig& c, CommandIo io = {}) {
    const auto b = detail::sweep_base(c);
    const auto queries = prepare_queries(
        b, load_descriptor_set(require_input(c.paths.queries, "--queries", "query descriptor set")));
    const auto gt = load_ground_truth(require_input(c.paths.ground_truth, "--gt", "ground truth"));
    gt.validate(&b.index.descriptors());
    std::filesystem::create_directories(c.output_dir);
    for (Protocol p : c.protocols) {
        const auto cells = sweep_alpha_beta(b.index, queries, gt, c.sweep.alphas, c.sweep.betas, c.sweep.n_dba,
                                            c.sweep.n_qe, ProtocolSpec{p});
        const auto file = c.output_dir / ("sweep_alpha_beta_" + protocol_name(p) + ".csv");
        write_file_atomic(file, seed_comment(c.seed) + sweep_csv(cells, p, c.sweep.n_dba, c.sweep.n_qe));
        io.out << "wrote " << cells.size() << " cells to " << file.string() << "\n";
    }
}

/// Runs `fn`, reporting errors on `err`. Returns the process exit code.
template <class Fn>
int run_guarded(Fn&& fn, std::ostream& err = std::cerr) {
    try {
        fn();
        return kExitOk;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kExitNumericalError;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const DataError& e) {
        err << "input error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const ShapeError& e) {
        err << "shape error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "file error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const nlohmann::json::exception& e) {
        err << "format error: " << e.what() << "\n";
        return kExitInputError;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace agem
