#include "dirmag/experiment.hpp"

#include "dirmag/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

namespace dirmag {

using nlohmann::json;

namespace {

template <typename T>
bool has_duplicates(std::vector<T> v) {
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) != v.end();
}

std::string score_mode_string(ScoreMode m) { return m == ScoreMode::sum ? "sum" : "mean"; }

ScoreMode parse_score_mode(const std::string& s) {
    if (s == "sum") return ScoreMode::sum;
    if (s == "mean") return ScoreMode::mean;
    throw ConfigError("unknown score_mode '" + s + "'");
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [k, _] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
            throw ConfigError("unknown key '" + k + "' in " + where);
        }
    }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

template <typename T, typename Parse>
std::vector<T> parse_list(const json& j, const char* key, Parse parse) {
    if (!j.is_array()) throw ConfigError(std::string(key) + " must be a list");
    std::vector<T> out;
    for (const auto& v : j) out.push_back(parse(v.get<std::string>()));
    return out;
}

std::string format_delta(double d) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

std::string make_key(RecordType type, const std::string& sentence, std::uint64_t seed, double delta,
                     PerturbationKind kind, RepairKind arm, std::size_t layer, FeatureMode mode) {
    const std::string sep = "|";
    switch (type) {
    case RecordType::lm:
        return "lm|" + sentence + sep + std::to_string(seed) + sep + format_delta(delta) + sep + to_string(kind) +
               sep + to_string(arm);
    case RecordType::pairs:
        return "pairs|" + std::to_string(seed) + sep + format_delta(delta) + sep + to_string(kind) + sep +
               to_string(arm);
    case RecordType::parse_depth:
        return "parse_depth|" + std::to_string(seed) + sep + format_delta(delta) + sep + to_string(kind);
    case RecordType::probe: return "probe|" + std::to_string(layer) + sep + to_string(mode);
    }
    return {};
}

} // namespace

void ExperimentConfig::validate() const {
    if (model_path.empty()) throw ConfigError("model path is required");
    if (lm_dataset.empty()) throw ConfigError("datasets.lm is required");
    if (delta_grid.empty()) throw ConfigError("delta_grid is empty");
    for (std::size_t i = 0; i < delta_grid.size(); ++i) {
        if (!std::isfinite(delta_grid[i]) || !(delta_grid[i] > 0.0)) {
            throw ConfigError("delta_grid values must be finite and positive");
        }
        if (i > 0 && !(delta_grid[i] > delta_grid[i - 1])) {
            throw ConfigError("delta_grid must be sorted strictly ascending");
        }
    }
    if (perturb_layers.empty()) throw ConfigError("perturb_layers is empty");
    if (has_duplicates(perturb_layers)) throw ConfigError("perturb_layers has duplicates");
    if (repair_layers && has_duplicates(*repair_layers)) throw ConfigError("repair_layers has duplicates");
    if (kinds.empty()) throw ConfigError("kinds is empty");
    if (has_duplicates(kinds)) throw ConfigError("kinds has duplicates");
    if (arms.empty()) throw ConfigError("arms is empty");
    if (has_duplicates(arms)) throw ConfigError("arms has duplicates");
    if (seeds.empty()) throw ConfigError("seeds is empty");
    if (has_duplicates(seeds)) throw ConfigError("seeds must be distinct");
    if (hidden_site != Site::resid_pre && hidden_site != Site::resid_post) {
        throw ConfigError("hidden_site must be resid_pre or resid_post");
    }
    if (bonferroni_m && *bonferroni_m == 0) throw ConfigError("bonferroni_m must be at least 1");
    if (probe.modes.empty()) throw ConfigError("probe.modes is empty");
    if (has_duplicates(probe.modes)) throw ConfigError("probe.modes has duplicates");
    if (has_duplicates(probe.layers)) throw ConfigError("probe.layers has duplicates");
    if (!(probe.train_fraction > 0.0 && probe.train_fraction < 1.0)) {
        throw ConfigError("probe.train_fraction must lie in (0, 1)");
    }
    if (!(probe.hyper.l2 >= 0.0)) throw ConfigError("probe.l2 must be nonnegative");
    if (probe.hyper.max_epochs == 0) throw ConfigError("probe.max_epochs must be positive");
    if (!(probe.hyper.grad_tol > 0.0)) throw ConfigError("probe.grad_tol must be positive");
}

std::vector<std::size_t> ExperimentConfig::effective_repair_layers() const {
    auto layers = repair_layers ? *repair_layers : perturb_layers;
    std::sort(layers.begin(), layers.end());
    return layers;
}

std::size_t ExperimentConfig::effective_parse_depth_layer() const {
    if (parse_depth_layer) return *parse_depth_layer;
    const auto [lo, hi] = std::minmax_element(perturb_layers.begin(), perturb_layers.end());
    return (*lo + *hi + 1) / 2;
}

InterventionPlan ExperimentConfig::plan(double delta, PerturbationKind kind, RepairKind arm) const {
    InterventionPlan p;
    p.perturb.kind = kind;
    p.perturb.delta = delta;
    p.perturb.branch = branch;
    p.perturb_layers = {perturb_layers.begin(), perturb_layers.end()};
    p.repair = arm;
    if (arm != RepairKind::none) {
        const auto layers = effective_repair_layers();
        p.repair_layers = {layers.begin(), layers.end()};
    }
    p.hidden_site = hidden_site;
    p.direction_mode = direction_mode;
    return p;
}

ExperimentConfig experiment_config_from_json(const json& j, const std::filesystem::path& base_dir) {
    ExperimentConfig c;
    try {
        reject_unknown(j,
                       {"model", "datasets", "delta_grid", "perturb_layers", "repair_layers", "kinds", "arms",
                        "seeds", "hidden_site", "direction_mode", "branch", "score_mode", "parse_depth_layer",
                        "metrics", "probe", "output_dir", "bonferroni_m", "workers"},
                       "config");
        if (!j.contains("model")) throw ConfigError("config needs 'model'");
        c.model_path = resolve(base_dir, j.at("model").get<std::string>());
        if (!j.contains("datasets")) throw ConfigError("config needs 'datasets'");
        const json& ds = j.at("datasets");
        reject_unknown(ds, {"lm", "pairs", "probe"}, "datasets");
        if (!ds.contains("lm")) throw ConfigError("datasets needs 'lm'");
        c.lm_dataset = resolve(base_dir, ds.at("lm").get<std::string>());
        if (ds.contains("pairs")) c.pairs_dataset = resolve(base_dir, ds.at("pairs").get<std::string>());
        if (ds.contains("probe")) c.probe_dataset = resolve(base_dir, ds.at("probe").get<std::string>());

        if (j.contains("delta_grid")) c.delta_grid = j.at("delta_grid").get<std::vector<double>>();
        if (j.contains("perturb_layers")) c.perturb_layers = j.at("perturb_layers").get<std::vector<std::size_t>>();
        if (j.contains("repair_layers")) c.repair_layers = j.at("repair_layers").get<std::vector<std::size_t>>();
        if (j.contains("kinds")) {
            c.kinds = parse_list<PerturbationKind>(j.at("kinds"), "kinds", parse_perturbation_kind);
        }
        if (j.contains("arms")) c.arms = parse_list<RepairKind>(j.at("arms"), "arms", parse_repair_kind);
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("hidden_site")) c.hidden_site = parse_site(j.at("hidden_site").get<std::string>());
        if (j.contains("direction_mode")) {
            c.direction_mode = parse_direction_mode(j.at("direction_mode").get<std::string>());
        }
        if (j.contains("branch")) c.branch = parse_branch_policy(j.at("branch").get<std::string>());
        if (j.contains("score_mode")) c.score_mode = parse_score_mode(j.at("score_mode").get<std::string>());
        if (j.contains("parse_depth_layer")) c.parse_depth_layer = j.at("parse_depth_layer").get<std::size_t>();
        if (j.contains("metrics")) {
            const json& m = j.at("metrics");
            reject_unknown(m, {"pairs", "parse_depth", "probe"}, "metrics");
            c.metrics.pairs = m.value("pairs", c.metrics.pairs);
            c.metrics.parse_depth = m.value("parse_depth", c.metrics.parse_depth);
            c.metrics.probe = m.value("probe", c.metrics.probe);
        }
        if (j.contains("probe")) {
            const json& p = j.at("probe");
            reject_unknown(p, {"layers", "modes", "split_seed", "train_fraction", "l2", "max_epochs", "grad_tol"},
                           "probe");
            if (p.contains("layers")) c.probe.layers = p.at("layers").get<std::vector<std::size_t>>();
            if (p.contains("modes")) {
                c.probe.modes = parse_list<FeatureMode>(p.at("modes"), "probe.modes", parse_feature_mode);
            }
            c.probe.split_seed = p.value("split_seed", c.probe.split_seed);
            c.probe.train_fraction = p.value("train_fraction", c.probe.train_fraction);
            c.probe.hyper.l2 = p.value("l2", c.probe.hyper.l2);
            c.probe.hyper.max_epochs = p.value("max_epochs", c.probe.hyper.max_epochs);
            c.probe.hyper.grad_tol = p.value("grad_tol", c.probe.hyper.grad_tol);
        }
        if (j.contains("output_dir")) c.output_dir = resolve(base_dir, j.at("output_dir").get<std::string>());
        else c.output_dir = resolve(base_dir, c.output_dir.string());
        if (j.contains("bonferroni_m")) c.bonferroni_m = j.at("bonferroni_m").get<std::size_t>();
        if (j.contains("workers")) c.workers = j.at("workers").get<std::size_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

json experiment_config_to_json(const ExperimentConfig& c) {
    json j;
    j["model"] = c.model_path.string();
    j["datasets"]["lm"] = c.lm_dataset.string();
    if (c.pairs_dataset) j["datasets"]["pairs"] = c.pairs_dataset->string();
    if (c.probe_dataset) j["datasets"]["probe"] = c.probe_dataset->string();
    j["delta_grid"] = c.delta_grid;
    j["perturb_layers"] = c.perturb_layers;
    if (c.repair_layers) j["repair_layers"] = *c.repair_layers;
    j["kinds"] = json::array();
    for (auto k : c.kinds) j["kinds"].push_back(to_string(k));
    j["arms"] = json::array();
    for (auto a : c.arms) j["arms"].push_back(to_string(a));
    j["seeds"] = c.seeds;
    j["hidden_site"] = to_string(c.hidden_site);
    j["direction_mode"] = to_string(c.direction_mode);
    j["branch"] = to_string(c.branch);
    j["score_mode"] = score_mode_string(c.score_mode);
    if (c.parse_depth_layer) j["parse_depth_layer"] = *c.parse_depth_layer;
    j["metrics"] = {{"pairs", c.metrics.pairs}, {"parse_depth", c.metrics.parse_depth}, {"probe", c.metrics.probe}};
    json modes = json::array();
    for (auto m : c.probe.modes) modes.push_back(to_string(m));
    j["probe"] = {{"layers", c.probe.layers},
                  {"modes", modes},
                  {"split_seed", c.probe.split_seed},
                  {"train_fraction", c.probe.train_fraction},
                  {"l2", c.probe.hyper.l2},
                  {"max_epochs", c.probe.hyper.max_epochs},
                  {"grad_tol", c.probe.hyper.grad_tol}};
    j["output_dir"] = c.output_dir.string();
    if (c.bonferroni_m) j["bonferroni_m"] = *c.bonferroni_m;
    j["workers"] = c.workers;
    return j;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return experiment_config_from_json(j, path.parent_path());
}

std::string config_hash(const ExperimentConfig& c) {
    json j;
    j["model"] = c.model_path.filename().string();
    j["lm"] = c.lm_dataset.filename().string();
    j["pairs"] = c.pairs_dataset ? json(c.pairs_dataset->filename().string()) : json(nullptr);
    j["probe_dataset"] = c.probe_dataset ? json(c.probe_dataset->filename().string()) : json(nullptr);
    auto perturb = c.perturb_layers;
    std::sort(perturb.begin(), perturb.end());
    j["perturb_layers"] = perturb;
    j["repair_layers"] = c.effective_repair_layers();
    j["hidden_site"] = to_string(c.hidden_site);
    j["direction_mode"] = to_string(c.direction_mode);
    j["branch"] = to_string(c.branch);
    j["score_mode"] = score_mode_string(c.score_mode);
    j["parse_depth_layer"] = c.effective_parse_depth_layer();
    j["probe"] = experiment_config_to_json(c)["probe"];
    const std::string text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string to_string(RecordType t) {
    switch (t) {
    case RecordType::lm: return "lm";
    case RecordType::pairs: return "pairs";
    case RecordType::parse_depth: return "parse_depth";
    case RecordType::probe: return "probe";
    }
    return "?";
}

RecordType parse_record_type(const std::string& s) {
    if (s == "lm") return RecordType::lm;
    if (s == "pairs") return RecordType::pairs;
    if (s == "parse_depth") return RecordType::parse_depth;
    if (s == "probe") return RecordType::probe;
    throw FormatError("unknown record type '" + s + "'");
}

std::string MetricRecord::key() const {
    return make_key(type, sentence, seed, delta, kind, arm, layer, probe_mode);
}

std::string Cell::key() const { return make_key(type, sentence, seed, delta, kind, arm, layer, probe_mode); }

json record_to_json(const MetricRecord& r) {
    json j;
    j["schema_version"] = r.schema_version;
    j["config_hash"] = r.config_hash;
    j["type"] = to_string(r.type);
    switch (r.type) {
    case RecordType::lm: {
        j["sentence"] = r.sentence;
        j["seed"] = r.seed;
        j["delta"] = r.delta;
        j["kind"] = to_string(r.kind);
        j["arm"] = to_string(r.arm);
        j["loss"] = r.loss;
        j["baseline_loss"] = r.baseline_loss;
        j["damage"] = r.damage;
        j["entropy_per_layer"] = r.entropy_per_layer;
        j["baseline_entropy_per_layer"] = r.baseline_entropy_per_layer;
        j["mean_entropy"] = r.mean_entropy;
        j["baseline_mean_entropy"] = r.baseline_mean_entropy;
        j["displacement_per_layer"] = r.displacement_per_layer;
        json achieved = json::object();
        for (const auto& [layer, v] : r.achieved_delta) achieved[std::to_string(layer)] = v;
        j["achieved_delta"] = achieved;
        j["perturbed_tokens"] = r.perturbed_tokens;
        j["skipped_tokens"] = r.skipped_tokens;
        break;
    }
    case RecordType::pairs:
        j["seed"] = r.seed;
        j["delta"] = r.delta;
        j["kind"] = to_string(r.kind);
        j["arm"] = to_string(r.arm);
        j["blimp_accuracy"] = r.blimp_accuracy;
        j["baseline_accuracy"] = r.baseline_accuracy;
        j["n_pairs"] = r.n_pairs;
        break;
    case RecordType::parse_depth:
        j["seed"] = r.seed;
        j["delta"] = r.delta;
        j["kind"] = to_string(r.kind);
        j["layer"] = r.layer;
        j["pearson_r"] = r.pearson_r;
        j["pearson_p"] = r.pearson_p;
        j["baseline_r"] = r.baseline_r;
        j["baseline_p"] = r.baseline_p;
        j["n_tokens"] = r.n_tokens;
        break;
    case RecordType::probe:
        j["layer"] = r.layer;
        j["mode"] = to_string(r.probe_mode);
        j["probe_accuracy"] = r.probe_accuracy;
        j["train_accuracy"] = r.train_accuracy;
        j["n_train"] = r.n_train;
        j["n_test"] = r.n_test;
        j["n_classes"] = r.n_classes;
        break;
    }
    return j;
}

MetricRecord record_from_json(const json& j) {
    MetricRecord r;
    try {
        r.schema_version = j.at("schema_version").get<int>();
        if (r.schema_version != kRecordSchemaVersion) {
            throw FormatError("record schema version " + std::to_string(r.schema_version) + " differs from " +
                              std::to_string(kRecordSchemaVersion));
        }
        r.config_hash = j.at("config_hash").get<std::string>();
        r.type = parse_record_type(j.at("type").get<std::string>());
        switch (r.type) {
        case RecordType::lm:
            r.sentence = j.at("sentence").get<std::string>();
            r.seed = j.at("seed").get<std::uint64_t>();
            r.delta = j.at("delta").get<double>();
            r.kind = parse_perturbation_kind(j.at("kind").get<std::string>());
            r.arm = parse_repair_kind(j.at("arm").get<std::string>());
            r.loss = j.at("loss").get<double>();
            r.baseline_loss = j.at("baseline_loss").get<double>();
            r.damage = j.at("damage").get<double>();
            r.entropy_per_layer = j.at("entropy_per_layer").get<std::vector<double>>();
            r.baseline_entropy_per_layer = j.at("baseline_entropy_per_layer").get<std::vector<double>>();
            r.mean_entropy = j.at("mean_entropy").get<double>();
            r.baseline_mean_entropy = j.at("baseline_mean_entropy").get<double>();
            r.displacement_per_layer = j.at("displacement_per_layer").get<std::vector<double>>();
            for (const auto& [layer, v] : j.at("achieved_delta").items()) {
                r.achieved_delta[std::stoul(layer)] = v.get<double>();
            }
            r.perturbed_tokens = j.at("perturbed_tokens").get<std::size_t>();
            r.skipped_tokens = j.at("skipped_tokens").get<std::size_t>();
            break;
        case RecordType::pairs:
            r.seed = j.at("seed").get<std::uint64_t>();
            r.delta = j.at("delta").get<double>();
            r.kind = parse_perturbation_kind(j.at("kind").get<std::string>());
            r.arm = parse_repair_kind(j.at("arm").get<std::string>());
            r.blimp_accuracy = j.at("blimp_accuracy").get<double>();
            r.baseline_accuracy = j.at("baseline_accuracy").get<double>();
            r.n_pairs = j.at("n_pairs").get<std::size_t>();
            break;
        case RecordType::parse_depth:
            r.seed = j.at("seed").get<std::uint64_t>();
            r.delta = j.at("delta").get<double>();
            r.kind = parse_perturbation_kind(j.at("kind").get<std::string>());
            r.layer = j.at("layer").get<std::size_t>();
            r.pearson_r = j.at("pearson_r").get<double>();
            r.pearson_p = j.at("pearson_p").get<double>();
            r.baseline_r = j.at("baseline_r").get<double>();
            r.baseline_p = j.at("baseline_p").get<double>();
            r.n_tokens = j.at("n_tokens").get<std::size_t>();
            break;
        case RecordType::probe:
            r.layer = j.at("layer").get<std::size_t>();
            r.probe_mode = parse_feature_mode(j.at("mode").get<std::string>());
            r.probe_accuracy = j.at("probe_accuracy").get<double>();
            r.train_accuracy = j.at("train_accuracy").get<double>();
            r.n_train = j.at("n_train").get<std::size_t>();
            r.n_test = j.at("n_test").get<std::size_t>();
            r.n_classes = j.at("n_classes").get<std::size_t>();
            break;
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed record: ") + e.what());
    } catch (const FormatError&) {
        throw;
    } catch (const Error& e) {
        throw FormatError(std::string("malformed record: ") + e.what());
    }
    return r;
}

std::vector<MetricRecord> read_records(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open records file " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto last_newline = text.find_last_of('\n');
    text.resize(last_newline == std::string::npos ? 0 : last_newline + 1);

    std::vector<MetricRecord> out;
    std::istringstream lines(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(lines, line)) {
        ++number;
        try {
            out.push_back(record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + " line " + std::to_string(number) + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError(path.string() + " line " + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

} // namespace dirmag
