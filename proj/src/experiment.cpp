#include "dirmag/experiment.hpp"

#include "dirmag/errors.hpp"
#include "dirmag/stats.hpp"
#include "dirmag/weights_io.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <thread>
#include <unordered_set>

namespace dirmag {

using nlohmann::json;

namespace {

struct Inputs {
    Model model;
    TokenizedDataset lm;
    std::optional<TokenizedDataset> pairs;
    std::optional<TokenizedDataset> probe;
};

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Seed for one sentence or pair: every (seed, item) draws its own directions.
std::uint64_t item_seed(std::uint64_t seed, const std::string& id) { return derive_seed(seed, fnv1a(id), 0); }

void require_file(const std::filesystem::path& p, const std::string& what) {
    if (!std::filesystem::is_regular_file(p)) throw ConfigError(what + " not found: " + p.string());
}

void require_layer(std::size_t layer, std::size_t n_layers, const std::string& what) {
    if (layer >= n_layers) {
        throw ConfigError(what + " " + std::to_string(layer) + " is outside a model with " +
                          std::to_string(n_layers) + " layers");
    }
}

bool wants(const RunOptions& o, RecordType t) { return o.types.count(t) != 0; }

bool pairs_enabled(const ExperimentConfig& c, const RunOptions& o) {
    return wants(o, RecordType::pairs) && c.metrics.pairs && c.pairs_dataset.has_value();
}
bool parse_depth_enabled(const ExperimentConfig& c, const RunOptions& o) {
    return wants(o, RecordType::parse_depth) && c.metrics.parse_depth && c.probe_dataset.has_value();
}
bool probe_enabled(const ExperimentConfig& c, const RunOptions& o) {
    return wants(o, RecordType::probe) && c.metrics.probe && c.probe_dataset.has_value();
}

TokenizedDataset load_checked(const std::filesystem::path& p, const std::string& what, std::size_t vocab) {
    require_file(p, what);
    TokenizedDataset ds;
    try {
        ds = load_dataset(p);
        ds.validate_vocab(vocab);
    } catch (const Error& e) {
        throw ConfigError(what + " " + p.string() + ": " + e.what());
    }
    return ds;
}

Inputs load_inputs(const ExperimentConfig& c, const RunOptions& o) {
    c.validate();
    require_file(c.model_path, "model");
    require_file(c.lm_dataset, "lm dataset");
    if (pairs_enabled(c, o)) require_file(*c.pairs_dataset, "pairs dataset");
    if (parse_depth_enabled(c, o) || probe_enabled(c, o)) require_file(*c.probe_dataset, "probe dataset");

    std::optional<Model> model;
    try {
        model.emplace(load_model(c.model_path));
    } catch (const Error& e) {
        throw ConfigError("model " + c.model_path.string() + ": " + e.what());
    }
    const ModelConfig& mc = model->config;
    for (auto l : c.perturb_layers) require_layer(l, mc.n_layers, "perturb layer");
    for (auto l : c.effective_repair_layers()) require_layer(l, mc.n_layers, "repair layer");
    if (parse_depth_enabled(c, o)) require_layer(c.effective_parse_depth_layer(), mc.n_layers, "parse_depth_layer");
    if (probe_enabled(c, o)) {
        for (auto l : c.probe.layers) require_layer(l, mc.n_layers, "probe layer");
    }

    Inputs in{std::move(*model), load_checked(c.lm_dataset, "lm dataset", mc.vocab_size), std::nullopt,
              std::nullopt};
    std::unordered_set<std::string> ids;
    for (const auto& r : in.lm.records) {
        if (r.is_pair()) throw ConfigError("lm dataset record '" + r.id + "' is a minimal pair");
        if (r.tokens.size() < 2 || r.tokens.size() > mc.max_seq_len) {
            throw ConfigError("lm dataset record '" + r.id + "' needs 2.." + std::to_string(mc.max_seq_len) +
                              " tokens");
        }
        if (!ids.insert(r.id).second) throw ConfigError("lm dataset has duplicate id '" + r.id + "'");
    }
    if (in.lm.records.empty()) throw ConfigError("lm dataset is empty");
    if (pairs_enabled(c, o)) {
        in.pairs = load_checked(*c.pairs_dataset, "pairs dataset", mc.vocab_size);
        if (in.pairs->records.empty()) throw ConfigError("pairs dataset is empty");
        for (const auto& r : in.pairs->records) {
            if (!r.is_pair()) throw ConfigError("pairs dataset record '" + r.id + "' is not a minimal pair");
        }
    }
    if (parse_depth_enabled(c, o) || probe_enabled(c, o)) {
        in.probe = load_checked(*c.probe_dataset, "probe dataset", mc.vocab_size);
        for (const auto& r : in.probe->records) {
            if (r.is_pair()) throw ConfigError("probe dataset record '" + r.id + "' is a minimal pair");
            if (parse_depth_enabled(c, o) && !r.depth) {
                throw ConfigError("probe dataset record '" + r.id + "' lacks depth annotations");
            }
            if (probe_enabled(c, o) && !r.pos) {
                throw ConfigError("probe dataset record '" + r.id + "' lacks pos annotations");
            }
        }
    }
    return in;
}

std::vector<double> row_as_double(const Tensor& t, std::size_t r) {
    auto row = t.row(r);
    return {row.begin(), row.end()};
}

struct Unit {
    std::string name;
    std::vector<Cell> cells;
    std::function<std::vector<MetricRecord>(const std::vector<Cell>&)> compute;
};

MetricRecord base_record(const std::string& hash, const Cell& cell) {
    MetricRecord r;
    r.config_hash = hash;
    r.type = cell.type;
    r.sentence = cell.sentence;
    r.seed = cell.seed;
    r.delta = cell.delta;
    r.kind = cell.kind;
    r.arm = cell.arm;
    r.layer = cell.layer;
    r.probe_mode = cell.probe_mode;
    return r;
}

std::vector<MetricRecord> compute_lm(const Inputs& in, const ExperimentConfig& c, const std::string& hash,
                                     const DatasetRecord& sentence, const std::vector<Cell>& cells) {
    const CleanRun clean = run_clean(in.model, sentence.tokens);
    std::vector<MetricRecord> out;
    for (const Cell& cell : cells) {
        const std::uint64_t seed = item_seed(cell.seed, sentence.id);
        const InterventionPlan plan = c.plan(cell.delta, cell.kind, cell.arm);
        const RunResult run = cell.arm == RepairKind::none
                                  ? run_perturbed(in.model, sentence.tokens, plan, seed, clean.cache)
                                  : run_repair(in.model, sentence.tokens, plan, seed, clean.cache);
        MetricRecord r = base_record(hash, cell);
        r.loss = run.loss;
        r.baseline_loss = run.baseline_loss;
        r.damage = run.damage;
        r.entropy_per_layer = run.entropy_per_layer;
        r.baseline_entropy_per_layer = clean.result.entropy_per_layer;
        r.mean_entropy = run.mean_entropy;
        r.baseline_mean_entropy = clean.result.mean_entropy;
        for (const auto& [layer, v] : run.per_layer_displacement) r.displacement_per_layer.push_back(v);
        r.achieved_delta = run.achieved_delta;
        r.skipped_tokens = run.skipped_tokens;
        r.perturbed_tokens = run.events.size() - run.skipped_tokens;
        out.push_back(std::move(r));
    }
    return out;
}

double pair_set_accuracy(const Model& model, const TokenizedDataset& pairs, const InterventionPlan* plan,
                         std::uint64_t seed, ScoreMode mode) {
    std::vector<PairScore> scores;
    for (const auto& rec : pairs.records) {
        const MinimalPair& p = *rec.pair;
        const auto s = score_pairs(model, std::span<const MinimalPair>(&p, 1), plan, item_seed(seed, rec.id), mode);
        scores.push_back(s.front());
    }
    return pair_accuracy(scores);
}

std::vector<MetricRecord> compute_pairs(const Inputs& in, const ExperimentConfig& c, const std::string& hash,
                                        const std::vector<Cell>& cells) {
    const double baseline = pair_set_accuracy(in.model, *in.pairs, nullptr, 0, c.score_mode);
    std::vector<MetricRecord> out;
    for (const Cell& cell : cells) {
        const InterventionPlan plan = c.plan(cell.delta, cell.kind, cell.arm);
        MetricRecord r = base_record(hash, cell);
        r.blimp_accuracy = pair_set_accuracy(in.model, *in.pairs, &plan, cell.seed, c.score_mode);
        r.baseline_accuracy = baseline;
        r.n_pairs = in.pairs->records.size();
        out.push_back(std::move(r));
    }
    return out;
}

// Pools (|h|, depth) over every token of every annotated sentence at `layer`.
Correlation norm_depth_correlation(const Inputs& in, std::size_t layer, const InterventionPlan* plan,
                                   std::uint64_t seed) {
    std::vector<double> norms, depths;
    for (const auto& rec : in.probe->records) {
        const ForwardResult fr =
            forward_with_plan(in.model, rec.tokens, plan, item_seed(seed, rec.id), {Site::resid_post});
        const Tensor& h = fr.trace.at(layer, Site::resid_post);
        for (std::size_t t = 0; t < rec.tokens.size(); ++t) {
            norms.push_back(l2_norm(h.row(t)));
            depths.push_back(static_cast<double>((*rec.depth)[t]));
        }
    }
    return pearson_r(norms, depths);
}

std::vector<MetricRecord> compute_parse_depth(const Inputs& in, const ExperimentConfig& c, const std::string& hash,
                                              const std::vector<Cell>& cells) {
    const std::size_t layer = c.effective_parse_depth_layer();
    const Correlation baseline = norm_depth_correlation(in, layer, nullptr, 0);
    std::vector<MetricRecord> out;
    for (const Cell& cell : cells) {
        const InterventionPlan plan = c.plan(cell.delta, cell.kind, RepairKind::none);
        const Correlation corr = norm_depth_correlation(in, layer, &plan, cell.seed);
        MetricRecord r = base_record(hash, cell);
        r.pearson_r = corr.r;
        r.pearson_p = corr.p;
        r.baseline_r = baseline.r;
        r.baseline_p = baseline.p;
        r.n_tokens = corr.n;
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<MetricRecord> compute_probe(const Inputs& in, const ExperimentConfig& c, const std::string& hash,
                                        const std::vector<Cell>& cells) {
    std::vector<ForwardResult> clean;
    for (const auto& rec : in.probe->records) clean.push_back(forward(in.model, rec.tokens, {}, {Site::resid_post}));
    std::vector<MetricRecord> out;
    for (const Cell& cell : cells) {
        std::vector<std::vector<std::vector<double>>> vectors;
        std::vector<std::vector<int>> labels;
        for (std::size_t s = 0; s < clean.size(); ++s) {
            const Tensor& h = clean[s].trace.at(cell.layer, Site::resid_post);
            std::vector<std::vector<double>> rows;
            for (std::size_t t = 0; t < h.rows(); ++t) rows.push_back(row_as_double(h, t));
            vectors.push_back(std::move(rows));
            labels.push_back(*in.probe->records[s].pos);
        }
        const ProbeEvaluation ev = evaluate_probe_by_sentence(vectors, labels, cell.probe_mode, c.probe.hyper,
                                                              c.probe.split_seed, c.probe.train_fraction, cell.layer);
        MetricRecord r = base_record(hash, cell);
        r.probe_accuracy = ev.test_accuracy;
        r.train_accuracy = ev.train_accuracy;
        r.n_train = ev.n_train;
        r.n_test = ev.n_test;
        r.n_classes = kPosClasses;
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<std::size_t> probe_layers(const ExperimentConfig& c, std::size_t n_layers) {
    if (!c.probe.layers.empty()) {
        auto layers = c.probe.layers;
        std::sort(layers.begin(), layers.end());
        return layers;
    }
    std::vector<std::size_t> all(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) all[l] = l;
    return all;
}

// Drops a partially written final line left by an interrupted run.
void trim_partial_tail(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto last = text.find_last_of('\n');
    const std::size_t keep = last == std::string::npos ? 0 : last + 1;
    if (keep != text.size()) std::filesystem::resize_file(path, keep);
}

} // namespace

std::vector<Cell> plan_cells(const ExperimentConfig& c, const TokenizedDataset& lm,
                             const std::optional<TokenizedDataset>& probe, std::size_t n_layers,
                             const std::set<RecordType>& types) {
    std::vector<Cell> cells;
    auto sweep = [&](RecordType type, const std::string& sentence, std::uint64_t seed, bool with_arms) {
        for (double delta : c.delta_grid) {
            for (auto kind : c.kinds) {
                if (!with_arms) {
                    cells.push_back({type, sentence, seed, delta, kind, RepairKind::none, 0, FeatureMode::full});
                    continue;
                }
                for (auto arm : c.arms) cells.push_back({type, sentence, seed, delta, kind, arm, 0, FeatureMode::full});
            }
        }
    };
    if (types.count(RecordType::lm)) {
        for (const auto& rec : lm.records) {
            for (auto seed : c.seeds) sweep(RecordType::lm, rec.id, seed, true);
        }
    }
    if (types.count(RecordType::pairs) && c.metrics.pairs && c.pairs_dataset) {
        for (auto seed : c.seeds) sweep(RecordType::pairs, "", seed, true);
    }
    if (types.count(RecordType::parse_depth) && c.metrics.parse_depth && probe) {
        for (auto seed : c.seeds) sweep(RecordType::parse_depth, "", seed, false);
    }
    if (types.count(RecordType::probe) && c.metrics.probe && probe) {
        for (auto layer : probe_layers(c, n_layers)) {
            for (auto mode : c.probe.modes) {
                Cell cell;
                cell.type = RecordType::probe;
                cell.layer = layer;
                cell.probe_mode = mode;
                cells.push_back(cell);
            }
        }
    }
    return cells;
}

RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    std::ostream null_stream(nullptr);
    std::ostream& log = options.log ? *options.log : null_stream;

    const Inputs in = load_inputs(config, options);
    const std::string hash = config_hash(config);
    RunReport report;
    report.records_path = config.output_dir / "records.jsonl";
    if (config.seeds.size() < 5) {
        report.warnings.push_back("only " + std::to_string(config.seeds.size()) +
                                  " seeds; fewer than 5 gives limited statistical power");
    }
    for (const auto& w : report.warnings) log << "warning: " << w << '\n';

    const std::vector<Cell> planned = plan_cells(config, in.lm, in.probe, in.model.config.n_layers, options.types);
    report.planned_cells = planned.size();

    std::unordered_set<std::string> existing;
    if (std::filesystem::exists(report.records_path)) {
        for (const auto& r : read_records(report.records_path)) {
            if (r.config_hash != hash) {
                throw ConfigError("records file " + report.records_path.string() +
                                  " was written under a different config (hash " + r.config_hash + ", expected " +
                                  hash + ")");
            }
            existing.insert(r.key());
        }
    }
    std::vector<Cell> missing;
    for (const auto& cell : planned) {
        if (existing.count(cell.key())) ++report.existing_cells;
        else missing.push_back(cell);
    }
    log << "cells: " << report.planned_cells << " planned, " << report.existing_cells << " already recorded, "
        << missing.size() << " to run\n";
    if (options.dry_run) return report;

    // Group missing cells into work units, preserving plan order.
    std::vector<Unit> units;
    std::map<std::string, std::size_t> unit_index;
    std::map<std::string, const DatasetRecord*> sentences;
    for (const auto& rec : in.lm.records) sentences[rec.id] = &rec;
    for (const auto& cell : missing) {
        std::string name;
        switch (cell.type) {
        case RecordType::lm: name = "lm sentence " + cell.sentence + " seed " + std::to_string(cell.seed); break;
        case RecordType::pairs: name = "pairs seed " + std::to_string(cell.seed); break;
        case RecordType::parse_depth: name = "parse_depth seed " + std::to_string(cell.seed); break;
        case RecordType::probe: name = "probe"; break;
        }
        auto [it, inserted] = unit_index.emplace(name, units.size());
        if (inserted) {
            Unit u;
            u.name = name;
            switch (cell.type) {
            case RecordType::lm: {
                const DatasetRecord* s = sentences.at(cell.sentence);
                u.compute = [&in, &config, &hash, s](const std::vector<Cell>& cs) {
                    return compute_lm(in, config, hash, *s, cs);
                };
                break;
            }
            case RecordType::pairs:
                u.compute = [&](const std::vector<Cell>& cs) { return compute_pairs(in, config, hash, cs); };
                break;
            case RecordType::parse_depth:
                u.compute = [&](const std::vector<Cell>& cs) { return compute_parse_depth(in, config, hash, cs); };
                break;
            case RecordType::probe:
                u.compute = [&](const std::vector<Cell>& cs) { return compute_probe(in, config, hash, cs); };
                break;
            }
            units.push_back(std::move(u));
        }
        units[it->second].cells.push_back(cell);
    }

    std::filesystem::create_directories(config.output_dir);
    if (std::filesystem::exists(report.records_path)) trim_partial_tail(report.records_path);
    std::ofstream records(report.records_path, std::ios::app | std::ios::binary);
    if (!records) throw InputError("cannot open " + report.records_path.string() + " for appending");

    struct Slot {
        bool done = false;
        std::vector<MetricRecord> records;
        std::optional<std::string> error;
    };
    std::vector<Slot> slots(units.size());
    std::mutex mu;
    std::condition_variable ready;
    std::size_t next = 0;

    auto worker = [&]() {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= units.size()) return;
                i = next++;
            }
            Slot slot;
            try {
                slot.records = units[i].compute(units[i].cells);
            } catch (const std::exception& e) {
                slot.error = e.what();
            }
            slot.done = true;
            {
                std::lock_guard<std::mutex> lock(mu);
                slots[i] = std::move(slot);
            }
            ready.notify_all();
        }
    };

    std::size_t n_workers = config.workers ? config.workers : std::max(1u, std::thread::hardware_concurrency());
    n_workers = std::min(n_workers, std::max<std::size_t>(units.size(), 1));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);

    // Single writer: commit units in plan order so the file is deterministic.
    for (std::size_t i = 0; i < units.size(); ++i) {
        Slot slot;
        {
            std::unique_lock<std::mutex> lock(mu);
            ready.wait(lock, [&] { return slots[i].done; });
            slot = std::move(slots[i]);
        }
        if (slot.error) {
            Failure f{units[i].name, *slot.error, {}};
            for (const auto& cell : units[i].cells) f.cells.push_back(cell.key());
            log << "failed: " << f.unit << ": " << f.message << '\n';
            report.failures.push_back(std::move(f));
            continue;
        }
        for (const auto& r : slot.records) records << record_to_json(r).dump() << '\n';
        records.flush();
        report.written_cells += slot.records.size();
    }
    for (auto& t : pool) t.join();
    records.close();

    const auto failures_path = config.output_dir / "failures.jsonl";
    if (!report.failures.empty()) {
        std::ofstream f(failures_path, std::ios::trunc);
        for (const auto& fail : report.failures) {
            f << json{{"unit", fail.unit}, {"error", fail.message}, {"cells", fail.cells}}.dump() << '\n';
        }
    } else if (std::filesystem::exists(failures_path)) {
        std::filesystem::remove(failures_path);
    }

    if (options.write_summary && std::filesystem::exists(report.records_path)) {
        report.summary_path = summarize(report.records_path, config.output_dir, {config.bonferroni_m});
    }
    log << "wrote " << report.written_cells << " records to " << report.records_path.string() << '\n';
    return report;
}

std::vector<VerificationRow> verify_matching(const ExperimentConfig& config, double tolerance) {
    RunOptions only_lm;
    only_lm.types = {RecordType::lm};
    const Inputs in = load_inputs(config, only_lm);
    std::vector<CleanRun> clean;
    for (const auto& rec : in.lm.records) clean.push_back(run_clean(in.model, rec.tokens));

    std::vector<VerificationRow> rows;
    for (double delta : config.delta_grid) {
        for (auto kind : config.kinds) {
            VerificationRow row;
            row.target = delta;
            row.kind = kind;
            std::vector<double> achieved;
            const InterventionPlan plan = config.plan(delta, kind, RepairKind::none);
            for (auto seed : config.seeds) {
                for (std::size_t s = 0; s < in.lm.records.size(); ++s) {
                    const auto& rec = in.lm.records[s];
                    const RunResult run =
                        run_perturbed(in.model, rec.tokens, plan, item_seed(seed, rec.id), clean[s].cache);
                    for (const auto& ev : run.events) {
                        if (ev.skipped) {
                            ++row.skipped;
                            continue;
                        }
                        achieved.push_back(ev.achieved_delta);
                        row.max_abs_error = std::max(row.max_abs_error, std::fabs(ev.achieved_delta - delta));
                    }
                }
            }
            row.n = achieved.size();
            if (row.n >= 2) {
                const MeanSe ms = mean_se(achieved);
                row.mean = ms.mean;
                row.se = ms.se;
            } else if (row.n == 1) {
                row.mean = achieved.front();
            }
            row.pass = row.n > 0 && row.max_abs_error <= tolerance;
            rows.push_back(row);
        }
    }
    return rows;
}

SummaryTable verification_table(const std::vector<VerificationRow>& rows, double tolerance) {
    SummaryTable t;
    t.name = "verification";
    t.title = "Achieved displacement at intervention layers";
    t.columns = {"target_delta", "kind", "achieved_mean", "achieved_se", "max_abs_error", "n_tokens",
                 "skipped_precondition", "status"};
    for (const auto& r : rows) {
        std::string status = r.n == 0 ? "skipped-precondition" : (r.pass ? "pass" : "fail");
        if (r.n > 0 && r.skipped > 0) status += " (skipped-precondition)";
        char err[32];
        std::snprintf(err, sizeof err, "%.2e", r.max_abs_error);
        t.rows.push_back({format_fixed(r.target, 1), to_string(r.kind), r.n ? format_fixed(r.mean, 3) : "",
                          r.n >= 2 ? format_fixed(r.se, 3) : "", r.n ? err : "", std::to_string(r.n),
                          std::to_string(r.skipped), status});
    }
    t.footnotes.push_back("A row passes when every perturbed token lands within " + format_fixed(tolerance, 2) +
                          " of the target. Tokens whose norm is too small for the requested delta are left "
                          "unperturbed and counted as skipped-precondition.");
    return t;
}

} // namespace dirmag
