#include "dirmag/errors.hpp"
#include "dirmag/experiment.hpp"
#include "dirmag/toy.hpp"
#include "dirmag/weights_io.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>

namespace {

constexpr int kExitConfig = 2;

struct Common {
    std::string config;
    std::string output;
    std::vector<std::uint64_t> seeds;
    bool dry_run = false;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
    auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--output", c.output, "output directory (overrides the config)");
    cmd->add_option("--seed-override", c.seeds, "comma-separated seeds replacing the config's")->delimiter(',');
    cmd->add_flag("--dry-run", c.dry_run, "validate and print the plan without computing");
}

dirmag::ExperimentConfig load(const Common& c) {
    dirmag::ExperimentConfig config = dirmag::load_experiment_config(c.config);
    if (!c.output.empty()) config.output_dir = c.output;
    if (!c.seeds.empty()) config.seeds = c.seeds;
    config.validate();
    return config;
}

int report(const dirmag::RunReport& r) {
    if (!r.summary_path.empty()) std::cout << "summary: " << r.summary_path.string() << '\n';
    if (!r.failures.empty()) {
        std::cerr << r.failures.size() << " work unit(s) failed; see failures.jsonl\n";
    }
    return r.exit_code();
}

int run(const Common& c, std::set<dirmag::RecordType> types) {
    const auto config = load(c);
    dirmag::RunOptions options;
    options.types = std::move(types);
    options.dry_run = c.dry_run;
    options.log = &std::cerr;
    return report(dirmag::run_experiment(config, options));
}

int summarize(const Common& c, const std::string& records) {
    std::filesystem::path out_dir = c.output;
    dirmag::SummaryOptions options;
    if (!c.config.empty()) {
        const auto config = load(c);
        out_dir = config.output_dir;
        options.bonferroni_m = config.bonferroni_m;
    }
    if (out_dir.empty()) throw dirmag::ConfigError("summarize needs --config or --output");
    const std::filesystem::path records_path = records.empty() ? out_dir / "records.jsonl" : std::filesystem::path(records);
    if (c.dry_run) {
        std::cout << "would summarize " << records_path.string() << " into " << out_dir.string() << '\n';
        return 0;
    }
    std::cout << "summary: " << dirmag::summarize(records_path, out_dir, options).string() << '\n';
    return 0;
}

int verify(const Common& c) {
    const auto config = load(c);
    if (c.dry_run) {
        std::cout << "would verify " << config.delta_grid.size() * config.kinds.size() << " (delta, kind) rows\n";
        return 0;
    }
    const auto table = dirmag::verification_table(dirmag::verify_matching(config));
    const std::string md = dirmag::render_markdown({table});
    std::cout << md;
    std::filesystem::create_directories(config.output_dir);
    std::ofstream(config.output_dir / "verification.md", std::ios::trunc) << md;
    std::ofstream(config.output_dir / "verification.csv", std::ios::trunc) << dirmag::render_csv(table);
    return 0;
}

struct ToyArgs {
    std::string output = "toy";
    std::uint64_t seed = 7;
    std::size_t sentences = 8;
    std::size_t pairs = 16;
    std::size_t probe_sentences = 40;
};

int toy(const ToyArgs& a) {
    namespace fs = std::filesystem;
    const fs::path dir = a.output;
    fs::create_directories(dir);
    const dirmag::ModelConfig mc = dirmag::desk_config();
    const dirmag::Model model = dirmag::random_toy_model(mc, a.seed);
    dirmag::save_model(dir / "model.gptc", model);
    dirmag::save_dataset(dir / "lm.jsonl", dirmag::sample_corpus(model, a.sentences, 8, 16, a.seed + 1, false));
    dirmag::save_dataset(dir / "pairs.jsonl", dirmag::sample_pairs(model, a.pairs, 6, a.seed + 2));
    dirmag::save_dataset(dir / "probe.jsonl",
                         dirmag::sample_corpus(model, a.probe_sentences, 8, 16, a.seed + 3, true));
    nlohmann::json config = {{"model", "model.gptc"},
                             {"datasets", {{"lm", "lm.jsonl"}, {"pairs", "pairs.jsonl"}, {"probe", "probe.jsonl"}}},
                             {"perturb_layers", {0, 1}},
                             {"arms", {"none", "attention", "layernorm"}},
                             {"output_dir", "results"}};
    std::ofstream(dir / "config.json", std::ios::trunc) << config.dump(2) << '\n';
    std::cout << "wrote toy model, datasets and config.json to " << dir.string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"L2-matched angular vs magnitude perturbation experiments"};
    app.require_subcommand(1);

    Common run_args, summarize_args, verify_args, probe_args;
    std::string records;
    ToyArgs toy_args;

    auto* run_cmd = app.add_subcommand("run", "sweep the grid and write records plus summary tables");
    add_common(run_cmd, run_args, true);
    auto* summarize_cmd = app.add_subcommand("summarize", "rebuild summary tables from a records file");
    add_common(summarize_cmd, summarize_args, false);
    summarize_cmd->add_option("--records", records, "records file (default: <output>/records.jsonl)");
    auto* verify_cmd = app.add_subcommand("verify", "check achieved displacement against each target delta");
    add_common(verify_cmd, verify_args, true);
    auto* probe_cmd = app.add_subcommand("probe", "train direction/magnitude/full linear probes");
    add_common(probe_cmd, probe_args, true);
    auto* toy_cmd = app.add_subcommand("toy", "write a random toy model, datasets and a config");
    toy_cmd->add_option("--output", toy_args.output, "output directory");
    toy_cmd->add_option("--seed", toy_args.seed, "weight and data seed");
    toy_cmd->add_option("--sentences", toy_args.sentences, "lm sentences");
    toy_cmd->add_option("--pairs", toy_args.pairs, "minimal pairs");
    toy_cmd->add_option("--probe-sentences", toy_args.probe_sentences, "annotated probe sentences");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        using dirmag::RecordType;
        if (*run_cmd) {
            return run(run_args, {RecordType::lm, RecordType::pairs, RecordType::parse_depth, RecordType::probe});
        }
        if (*summarize_cmd) return summarize(summarize_args, records);
        if (*verify_cmd) return verify(verify_args);
        if (*probe_cmd) return run(probe_args, {RecordType::probe});
        if (*toy_cmd) return toy(toy_args);
    } catch (const dirmag::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
