#pragma once

#include "dirmag/model.hpp"
#include "dirmag/perturbation.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace dirmag {

enum class RepairKind { none, attention, layernorm };
// per_token: a fresh orthogonal draw per (seed, layer, token).
// shared: one Gaussian draw per (seed, layer), projected off each token's h.
enum class DirectionMode { per_token, shared };

std::string to_string(RepairKind r);
std::string to_string(DirectionMode m);
RepairKind parse_repair_kind(const std::string& s);
DirectionMode parse_direction_mode(const std::string& s);

std::set<std::size_t> layer_range(std::size_t first, std::size_t last_inclusive);

struct InterventionPlan {
    PerturbationSpec perturb;
    std::set<std::size_t> perturb_layers = layer_range(8, 15);
    RepairKind repair = RepairKind::none;
    std::set<std::size_t> repair_layers;
    Site hidden_site = Site::resid_pre;  // resid_pre or resid_post
    DirectionMode direction_mode = DirectionMode::per_token;

    void validate(std::size_t n_layers) const;
};

// One per (layer, token) at an intervention layer. Every perturbation re-matches
// delta against the stream as it arrives, which already carries the effects of
// earlier intervention layers.
struct PerturbationEvent {
    std::size_t layer = 0;
    std::size_t token = 0;
    bool skipped = false;
    std::string skip_reason;
    double hidden_norm = 0.0;
    double applied_parameter = 0.0;
    double achieved_delta = 0.0;  // measured on the stored float32 row
    int branch = 0;
};

struct RunResult {
    double loss = 0.0;
    double baseline_loss = 0.0;
    double damage = 0.0;
    // Mean over tokens of |perturbed - clean| at the plan's hidden site.
    std::map<std::size_t, double> per_layer_displacement;
    // Mean achieved delta over perturbed tokens, intervention layers only.
    std::map<std::size_t, double> achieved_delta;
    std::vector<double> entropy_per_layer;
    double mean_entropy = 0.0;
    std::vector<PerturbationEvent> events;
    std::size_t skipped_tokens = 0;
    Tensor logits;
    ForwardTrace trace;
};

// Clean activations of one sentence, every site at every layer.
struct CleanCache {
    std::vector<int> tokens;
    ForwardTrace trace;
    Tensor logits;
    double loss = 0.0;
};

struct CleanRun {
    RunResult result;
    CleanCache cache;
};

CleanRun run_clean(const Model& model, std::span<const int> tokens);

RunResult run_perturbed(const Model& model, std::span<const int> tokens, const InterventionPlan& plan,
                        std::uint64_t seed, const CleanCache& clean);
RunResult run_perturbed(const Model& model, std::span<const int> tokens, const InterventionPlan& plan,
                        std::uint64_t seed);

RunResult run_repair(const Model& model, std::span<const int> tokens, const InterventionPlan& plan,
                     std::uint64_t seed, const CleanCache& cache);

// Hooks that apply the plan's perturbation at every intervention layer and log
// one event per token into `events` (which must outlive the forward pass).
HookSet perturbation_hooks(const InterventionPlan& plan, std::uint64_t seed, std::vector<PerturbationEvent>* events);

// Hooks that inject cached activations at the plan's repair layers.
HookSet repair_hooks(const InterventionPlan& plan, const CleanCache& cache);

// Forward pass under a plan with no bookkeeping; used for pair scoring.
ForwardResult forward_with_plan(const Model& model, std::span<const int> tokens, const InterventionPlan* plan,
                                std::uint64_t seed, const CaptureSet& capture = {});

// 100 * (unrepaired - repaired) / unrepaired; nullopt when unrepaired <= 0.
std::optional<double> recovery_pct(double damage_unrepaired, double damage_repaired);

} // namespace dirmag
