#include <agem/commands.hpp>

#include <CLI11.hpp>

#include <functional>
#include <map>

namespace {

using agem::ConfigOverrides;
using agem::PipelineConfig;

struct Options {
    std::string config;
    // CLI11 binds plain values; these are copied into the optionals after parsing.
    std::uint64_t seed = 0;
    std::string output_dir, protocol, descriptor, name;
    std::string features, model, descriptors, queries, pairs, whitening, index, gt;
    std::size_t k = 0, dba_n = 0, qe_n = 0, epochs = 0;
    double qe_alpha = 0, dba_beta = 0;
    bool diffusion = false, no_diffusion = false, export_bench = false;
};

void add_common(CLI::App* cmd, Options& opt) {
    cmd->add_option("--config", opt.config, "JSON pipeline config; flags override its values");
    cmd->add_option("--seed", opt.seed, "Random seed, recorded in every output");
    cmd->add_option("--output-dir", opt.output_dir, "Directory for outputs");
    cmd->add_option("--protocol", opt.protocol, "Evaluation protocol")->check(CLI::IsMember({"medium", "hard", "both"}));
    cmd->add_option("--descriptor", opt.descriptor, "Descriptor kind")->check(CLI::IsMember({"agem", "gem", "spoc", "mac"}));
}

void add_retrieval(CLI::App* cmd, Options& opt) {
    cmd->add_option("--dba", opt.dba_n, "DBA neighbours (0 disables)");
    cmd->add_option("--dba-beta", opt.dba_beta, "Weighted DBA exponent beta");
    cmd->add_option("--qe", opt.qe_n, "QE neighbours (0 disables)");
    cmd->add_option("--qe-alpha", opt.qe_alpha, "Weighted QE exponent alpha");
    cmd->add_flag("--diffusion", opt.diffusion, "Rank by graph diffusion");
    cmd->add_flag("--no-diffusion", opt.no_diffusion, "Rank by dot product");
}

bool given(CLI::App* app, const char* flag) {
    const CLI::Option* o = app->get_option_no_throw(flag);
    return o != nullptr && o->count() > 0;
}

template <class T>
void copy_if_set(CLI::App* app, const char* flag, const T& value, std::optional<T>& dst) {
    if (given(app, flag)) dst = value;
}

void copy_path(CLI::App* app, const char* flag, const std::string& value, std::optional<std::filesystem::path>& dst) {
    if (given(app, flag)) dst = std::filesystem::path(value);
}

ConfigOverrides collect(CLI::App* app, Options& opt) {
    ConfigOverrides o;
    copy_if_set(app, "--seed", opt.seed, o.seed);
    copy_path(app, "--output-dir", opt.output_dir, o.output_dir);
    copy_if_set(app, "--protocol", opt.protocol, o.protocol);
    copy_if_set(app, "--descriptor", opt.descriptor, o.descriptor);
    copy_path(app, "--features", opt.features, o.paths.features);
    copy_path(app, "--model", opt.model, o.paths.model);
    copy_path(app, "--descriptors", opt.descriptors, o.paths.descriptors);
    copy_path(app, "--queries", opt.queries, o.paths.queries);
    copy_path(app, "--pairs", opt.pairs, o.paths.pairs);
    copy_path(app, "--whitening", opt.whitening, o.paths.whitening);
    copy_path(app, "--index", opt.index, o.paths.index);
    copy_path(app, "--gt", opt.gt, o.paths.ground_truth);
    copy_if_set(app, "--name", opt.name, o.name);
    copy_if_set(app, "-k", opt.k, o.search_k);
    copy_if_set(app, "--dba", opt.dba_n, o.dba_n);
    copy_if_set(app, "--qe", opt.qe_n, o.qe_n);
    copy_if_set(app, "--epochs", opt.epochs, o.epochs);
    if (given(app, "--qe-alpha")) o.qe_alpha = static_cast<agem::real>(opt.qe_alpha);
    if (given(app, "--dba-beta")) o.dba_beta = static_cast<agem::real>(opt.dba_beta);
    if (opt.diffusion) o.diffusion = true;
    if (opt.no_diffusion) o.diffusion = false;
    if (opt.export_bench) o.export_toy_benchmark = true;
    return o;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention-weighted GeM descriptors: toy training, extraction, whitening, retrieval and evaluation"};
    app.require_subcommand(1);
    Options opt;
    std::map<CLI::App*, std::function<void(const PipelineConfig&)>> commands;

    auto* train = app.add_subcommand("train-toy", "Train the toy backbone and attention branch on synthetic data");
    add_common(train, opt);
    train->add_option("--epochs", opt.epochs, "Training epochs (0 writes the initial model)");
    train->add_flag("--export-benchmark", opt.export_bench, "Also write a toy benchmark under <output-dir>/toy_bench");
    commands[train] = [](const PipelineConfig& c) { agem::cmd_train_toy(c); };

    auto* extract = app.add_subcommand("extract", "Pool feature maps into a descriptor set");
    add_common(extract, opt);
    extract->add_option("--features", opt.features, "Feature-map manifest");
    extract->add_option("--model", opt.model, "Model or checkpoint directory (required for agem)");
    extract->add_option("--name", opt.name, "Output name, written as <output-dir>/<name>.json");
    commands[extract] = [](const PipelineConfig& c) { agem::cmd_extract(c); };

    auto* whiten = app.add_subcommand("whiten", "Learn a whitening transform from matching pairs");
    add_common(whiten, opt);
    whiten->add_option("--descriptors", opt.descriptors, "Descriptor set");
    whiten->add_option("--pairs", opt.pairs, "Matching-pairs JSON");
    commands[whiten] = [](const PipelineConfig& c) { agem::cmd_whiten(c); };

    auto* index = app.add_subcommand("index", "Whiten, augment and store the database");
    add_common(index, opt);
    index->add_option("--descriptors", opt.descriptors, "Database descriptor set");
    index->add_option("--whitening", opt.whitening, "Whitening transform to apply");
    add_retrieval(index, opt);
    commands[index] = [](const PipelineConfig& c) { agem::cmd_index(c); };

    auto* search = app.add_subcommand("search", "Rank the index for each query");
    add_common(search, opt);
    search->add_option("--index", opt.index, "Index directory");
    search->add_option("--queries", opt.queries, "Query descriptor set");
    search->add_option("-k", opt.k, "Items written per query (0 = all)");
    add_retrieval(search, opt);
    commands[search] = [](const PipelineConfig& c) { agem::cmd_search(c); };

    auto* evaluate = app.add_subcommand("evaluate", "mAP of the configured pipeline");
    auto* sweep_dq = app.add_subcommand("sweep-dba-qe", "mAP over DBA and QE neighbour counts");
    auto* sweep_ab = app.add_subcommand("sweep-alpha-beta", "mAP over QE alpha and DBA beta");
    for (auto* cmd : {evaluate, sweep_dq, sweep_ab}) {
        add_common(cmd, opt);
        cmd->add_option("--index", opt.index, "Index directory");
        cmd->add_option("--queries", opt.queries, "Query descriptor set");
        cmd->add_option("--gt", opt.gt, "Ground-truth JSON");
    }
    add_retrieval(evaluate, opt);
    commands[evaluate] = [](const PipelineConfig& c) { agem::cmd_evaluate(c); };
    commands[sweep_dq] = [](const PipelineConfig& c) { agem::cmd_sweep_dba_qe(c); };
    commands[sweep_ab] = [](const PipelineConfig& c) { agem::cmd_sweep_alpha_beta(c); };

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? agem::kExitOk : agem::kExitInputError;
    }

    CLI::App* chosen = app.get_subcommands().front();
    return agem::run_guarded([&] {
        PipelineConfig cfg = opt.config.empty() ? PipelineConfig{} : agem::load_pipeline_config(opt.config);
        agem::apply_overrides(cfg, collect(chosen, opt));
        commands.at(chosen)(cfg);
    });
}
