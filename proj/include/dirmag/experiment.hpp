#pragma once

#include "dirmag/intervention.hpp"
#include "dirmag/metrics.hpp"
#include "dirmag/probe.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace dirmag {

inline constexpr int kRecordSchemaVersion = 1;

struct MetricToggles {
    bool pairs = true;
    bool parse_depth = true;
    bool probe = true;
};

struct ProbeSettings {
    std::vector<std::size_t> layers;  // empty: every layer
    std::vector<FeatureMode> modes = {FeatureMode::full, FeatureMode::direction_only, FeatureMode::magnitude_only};
    std::uint64_t split_seed = 1234;
    double train_fraction = 0.8;
    ProbeHyper hyper;
};

struct ExperimentConfig {
    std::filesystem::path model_path;
    std::filesystem::path lm_dataset;
    std::optional<std::filesystem::path> pairs_dataset;
    std::optional<std::filesystem::path> probe_dataset;  // needs pos and/or depth annotations

    std::vector<double> delta_grid = {1.0, 2.0, 5.0, 10.0, 15.0, 20.0};
    std::vector<std::size_t> perturb_layers = {8, 9, 10, 11, 12, 13, 14, 15};
    std::optional<std::vector<std::size_t>> repair_layers;  // unset: same as perturb_layers
    std::vector<PerturbationKind> kinds = {PerturbationKind::angular, PerturbationKind::magnitude};
    std::vector<RepairKind> arms = {RepairKind::none};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    Site hidden_site = Site::resid_pre;
    DirectionMode direction_mode = DirectionMode::per_token;
    BranchPolicy branch = BranchPolicy::random;
    ScoreMode score_mode = ScoreMode::sum;
    std::optional<std::size_t> parse_depth_layer;  // unset: midpoint of perturb_layers
    MetricToggles metrics;
    ProbeSettings probe;
    std::filesystem::path output_dir = "results";
    std::optional<std::size_t> bonferroni_m;  // unset: number of comparisons in each table
    std::size_t workers = 0;                  // 0: hardware concurrency

    // Structural checks that need no files. Throws ConfigError.
    void validate() const;
    std::vector<std::size_t> effective_repair_layers() const;
    std::size_t effective_parse_depth_layer() const;
    InterventionPlan plan(double delta, PerturbationKind kind, RepairKind arm) const;
};

// Relative paths resolve against `base_dir`. Unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json experiment_config_to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// FNV-1a over the settings that affect a record's values. The sweep axes
// (deltas, kinds, arms, seeds) are part of each record's key instead, and
// output location and worker count do not affect results.
std::string config_hash(const ExperimentConfig& c);

enum class RecordType { lm, pairs, parse_depth, probe };
std::string to_string(RecordType t);
RecordType parse_record_type(const std::string& s);

// One line of the records file. Which fields are meaningful depends on type:
//   lm           one (sentence, seed, delta, kind, arm) cell
//   pairs        minimal-pair accuracy for one (seed, delta, kind, arm) cell
//   parse_depth  |h| vs depth correlation for one (seed, delta, kind) cell
//   probe        held-out probe accuracy for one (layer, feature mode)
struct MetricRecord {
    int schema_version = kRecordSchemaVersion;
    std::string config_hash;
    RecordType type = RecordType::lm;

    std::string sentence;
    std::uint64_t seed = 0;
    double delta = 0.0;
    PerturbationKind kind = PerturbationKind::angular;
    RepairKind arm = RepairKind::none;

    double loss = 0.0;
    double baseline_loss = 0.0;
    double damage = 0.0;
    std::vector<double> entropy_per_layer;
    std::vector<double> baseline_entropy_per_layer;
    double mean_entropy = 0.0;
    double baseline_mean_entropy = 0.0;
    std::vector<double> displacement_per_layer;
    std::map<std::size_t, double> achieved_delta;
    std::size_t perturbed_tokens = 0;
    std::size_t skipped_tokens = 0;

    double blimp_accuracy = 0.0;
    double baseline_accuracy = 0.0;
    std::size_t n_pairs = 0;

    double pearson_r = 0.0;
    double pearson_p = 1.0;
    double baseline_r = 0.0;
    double baseline_p = 1.0;
    std::size_t n_tokens = 0;

    std::size_t layer = 0;
    FeatureMode probe_mode = FeatureMode::full;
    double probe_accuracy = 0.0;
    double train_accuracy = 0.0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::size_t n_classes = 0;

    std::string key() const;
};

nlohmann::json record_to_json(const MetricRecord& r);
MetricRecord record_from_json(const nlohmann::json& j);

// Reads a records file. A trailing line without a newline (an interrupted
// append) is ignored; any other malformed line throws FormatError.
std::vector<MetricRecord> read_records(const std::filesystem::path& path);

struct Cell {
    RecordType type = RecordType::lm;
    std::string sentence;
    std::uint64_t seed = 0;
    double delta = 0.0;
    PerturbationKind kind = PerturbationKind::angular;
    RepairKind arm = RepairKind::none;
    std::size_t layer = 0;
    FeatureMode probe_mode = FeatureMode::full;

    std::string key() const;
};

struct Failure {
    std::string unit;
    std::string message;
    std::vector<std::string> cells;
};

struct RunOptions {
    std::set<RecordType> types = {RecordType::lm, RecordType::pairs, RecordType::parse_depth, RecordType::probe};
    bool dry_run = false;
    bool write_summary = true;
    std::ostream* log = nullptr;
};

struct RunReport {
    std::filesystem::path records_path;
    std::filesystem::path summary_path;
    std::size_t planned_cells = 0;
    std::size_t existing_cells = 0;
    std::size_t written_cells = 0;
    std::vector<Failure> failures;
    std::vector<std::string> warnings;

    int exit_code() const { return failures.empty() ? 0 : 3; }
};

// Every cell the config asks for, in records-file order.
std::vector<Cell> plan_cells(const ExperimentConfig& config, const TokenizedDataset& lm,
                             const std::optional<TokenizedDataset>& probe, std::size_t n_layers,
                             const std::set<RecordType>& types);

// Loads model and datasets, checks them against the config (ConfigError on
// mismatch, before any compute), then fills missing cells of
// <output_dir>/records.jsonl and regenerates the summary.
RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

struct SummaryTable {
    std::string name;   // file stem
    std::string title;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> footnotes;
};

struct SummaryOptions {
    std::optional<std::size_t> bonferroni_m;
};

std::vector<SummaryTable> build_summary(const std::vector<MetricRecord>& records, const SummaryOptions& options = {});
std::string render_markdown(const std::vector<SummaryTable>& tables);
std::string render_csv(const SummaryTable& table);

// Reads <dir>/records.jsonl, writes <dir>/summary.md and one CSV per table.
// Returns the path of summary.md.
std::filesystem::path summarize(const std::filesystem::path& records_path, const std::filesystem::path& out_dir,
                                const SummaryOptions& options = {});

struct VerificationRow {
    double target = 0.0;
    PerturbationKind kind = PerturbationKind::angular;
    std::size_t n = 0;
    double mean = 0.0;
    double se = 0.0;
    double max_abs_error = 0.0;
    std::size_t skipped = 0;
    bool pass = false;
};

// Runs every (delta, kind, seed, sentence) perturbation and gathers the
// achieved displacement of each perturbed token at the intervention layers.
std::vector<VerificationRow> verify_matching(const ExperimentConfig& config, double tolerance = kMatchTolerance);
SummaryTable verification_table(const std::vector<VerificationRow>& rows, double tolerance = kMatchTolerance);

// Display helpers shared by the summary tables. Units live in column names,
// so cells are bare numbers.
std::string format_fixed(double v, int decimals);
std::string format_damage(double loss, double baseline);                        // "3.608"
std::string format_recovery(double damage_unrepaired, double damage_repaired);  // "28.4", "" if undefined
std::string format_ratio(double numerator, double denominator);                 // "5.4"
std::string format_p(double p);

} // namespace dirmag
