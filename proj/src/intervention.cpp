#include "dirmag/intervention.hpp"

#include "dirmag/errors.hpp"
#include "dirmag/metrics.hpp"

#include <cmath>
#include <limits>

namespace dirmag {

std::string to_string(RepairKind r) {
    switch (r) {
    case RepairKind::none: return "none";
    case RepairKind::attention: return "attention";
    case RepairKind::layernorm: return "layernorm";
    }
    return "?";
}

std::string to_string(DirectionMode m) { return m == DirectionMode::per_token ? "per_token" : "shared"; }

RepairKind parse_repair_kind(const std::string& s) {
    if (s == "none") return RepairKind::none;
    if (s == "attention") return RepairKind::attention;
    if (s == "layernorm") return RepairKind::layernorm;
    throw ConfigError("unknown repair arm '" + s + "'");
}

DirectionMode parse_direction_mode(const std::string& s) {
    if (s == "per_token") return DirectionMode::per_token;
    if (s == "shared") return DirectionMode::shared;
    throw ConfigError("unknown direction mode '" + s + "'");
}

std::set<std::size_t> layer_range(std::size_t first, std::size_t last_inclusive) {
    std::set<std::size_t> out;
    for (std::size_t l = first; l <= last_inclusive; ++l) out.insert(l);
    return out;
}

void InterventionPlan::validate(std::size_t n_layers) const {
    perturb.validate();
    for (auto l : perturb_layers) {
        if (l >= n_layers) throw PlanError("perturb layer " + std::to_string(l) + " outside model depth");
    }
    for (auto l : repair_layers) {
        if (l >= n_layers) throw PlanError("repair layer " + std::to_string(l) + " outside model depth");
    }
    if (hidden_site != Site::resid_pre && hidden_site != Site::resid_post) {
        throw PlanError("hidden_site must be resid_pre or resid_post");
    }
}

namespace {

constexpr std::uint64_t kSharedToken = std::numeric_limits<std::uint64_t>::max();

Tensor perturb_rows(Tensor x, const HookContext& ctx, const InterventionPlan& plan, std::uint64_t seed,
                    std::vector<PerturbationEvent>* events) {
    const std::size_t d = x.cols();
    std::vector<double> shared_raw;
    if (plan.direction_mode == DirectionMode::shared && plan.perturb.kind == PerturbationKind::angular) {
        Rng rng(derive_seed(seed, ctx.layer, kSharedToken));
        std::normal_distribution<double> gauss(0.0, 1.0);
        shared_raw.resize(d);
        for (double& v : shared_raw) v = gauss(rng);
    }

    std::vector<double> h(d);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto row = x.row(t);
        std::copy(row.begin(), row.end(), h.begin());
        PerturbationEvent ev;
        ev.layer = ctx.layer;
        ev.token = t;
        ev.hidden_norm = l2_norm(std::span<const double>(h));
        Rng rng(derive_seed(seed, ctx.layer, t));
        try {
            PerturbationOutcome out;
            if (!shared_raw.empty()) {
                out = rotate_toward(h, orthogonalize(h, shared_raw), plan.perturb.delta);
            } else {
                out = perturb(h, plan.perturb, rng);
            }
            for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<float>(out.perturbed[i]);
            std::vector<float> original(h.begin(), h.end());
            ev.achieved_delta = verify_displacement(std::span<const float>(original), row, plan.perturb.delta).achieved;
            ev.applied_parameter = out.applied_parameter;
            ev.branch = out.branch;
        } catch (const PreconditionError& e) {
            ev.skipped = true;
            ev.skip_reason = e.what();
        } catch (const DegenerateInputError& e) {
            ev.skipped = true;
            ev.skip_reason = e.what();
        }
        if (events) events->push_back(std::move(ev));
    }
    return x;
}

void check_cache(const InterventionPlan& plan, const CleanCache& cache, std::span<const int> tokens) {
    if (!std::equal(tokens.begin(), tokens.end(), cache.tokens.begin(), cache.tokens.end())) {
        throw PlanError("clean cache was recorded for a different sentence");
    }
    for (auto l : plan.repair_layers) {
        if (l >= cache.trace.layers.size()) throw PlanError("repair layer " + std::to_string(l) + " not in cache");
    }
    if (plan.repair == RepairKind::attention && !cache.trace.has(Site::attn_out)) {
        throw PlanError("cache lacks attention outputs");
    }
    if (plan.repair == RepairKind::layernorm &&
        (!cache.trace.has(Site::norm1_out) || !cache.trace.has(Site::norm2_out))) {
        throw PlanError("cache lacks normalization outputs");
    }
}

const CaptureSet kAllSites = {Site::resid_pre, Site::attn_probs, Site::attn_out,
                              Site::norm1_out, Site::norm2_out, Site::resid_post};

void summarize_trace(RunResult& r, const Tensor& logits, std::span<const int> tokens) {
    r.loss = next_token_loss(logits, tokens);
    r.entropy_per_layer.clear();
    double total = 0.0;
    for (const auto& lt : r.trace.layers) {
        r.entropy_per_layer.push_back(attention_entropy(lt.attn_probs));
        total += r.entropy_per_layer.back();
    }
    r.mean_entropy = r.entropy_per_layer.empty() ? 0.0 : total / static_cast<double>(r.entropy_per_layer.size());
}

RunResult run_intervened(const Model& model, std::span<const int> tokens, const InterventionPlan& plan,
                         std::uint64_t seed, const CleanCache& clean, bool with_repair) {
    plan.validate(model.config.n_layers);
    if (with_repair) check_cache(plan, clean, tokens);
    if (!std::equal(tokens.begin(), tokens.end(), clean.tokens.begin(), clean.tokens.end())) {
        throw PlanError("clean cache was recorded for a different sentence");
    }

    RunResult r;
    HookSet hooks = perturbation_hooks(plan, seed, &r.events);
    if (with_repair) {
        HookSet repair = repair_hooks(plan, clean);
        hooks.insert(hooks.end(), repair.begin(), repair.end());
    }
    CaptureSet capture = {Site::attn_probs, Site::resid_pre, Site::resid_post};
    ForwardResult fr = forward(model, tokens, hooks, capture);
    r.trace = std::move(fr.trace);
    r.logits = std::move(fr.logits);
    summarize_trace(r, r.logits, tokens);
    r.baseline_loss = clean.loss;
    r.damage = r.loss - r.baseline_loss;
    r.per_layer_displacement = propagation_profile(clean.trace, r.trace, plan.hidden_site);

    std::map<std::size_t, std::pair<double, std::size_t>> sums;
    for (const auto& ev : r.events) {
        if (ev.skipped) {
            ++r.skipped_tokens;
            continue;
        }
        auto& s = sums[ev.layer];
        s.first += ev.achieved_delta;
        s.second += 1;
    }
    for (const auto& [layer, s] : sums) r.achieved_delta[layer] = s.first / static_cast<double>(s.second);
    return r;
}

} // namespace

HookSet perturbation_hooks(const InterventionPlan& plan, std::uint64_t seed, std::vector<PerturbationEvent>* events) {
    HookSet hooks;
    for (auto layer : plan.perturb_layers) {
        hooks.push_back(Hook{layer, plan.hidden_site, [plan, seed, events](Tensor x, const HookContext& ctx) {
                                 return perturb_rows(std::move(x), ctx, plan, seed, events);
                             }});
    }
    return hooks;
}

HookSet repair_hooks(const InterventionPlan& plan, const CleanCache& cache) {
    HookSet hooks;
    if (plan.repair == RepairKind::none) return hooks;
    const std::vector<Site> sites = plan.repair == RepairKind::attention
                                        ? std::vector<Site>{Site::attn_out}
                                        : std::vector<Site>{Site::norm1_out, Site::norm2_out};
    for (auto layer : plan.repair_layers) {
        for (Site site : sites) {
            const Tensor* clean = &cache.trace.at(layer, site);
            hooks.push_back(Hook{layer, site, [clean](Tensor, const HookContext&) { return *clean; }});
        }
    }
    return hooks;
}

CleanRun run_clean(const Model& model, std::span<const int> tokens) {
    CleanRun out;
    ForwardResult fr = forward(model, tokens, {}, kAllSites);
    out.cache.tokens.assign(tokens.begin(), tokens.end());
    out.cache.trace = fr.trace;
    out.cache.logits = fr.logits;

    RunResult& r = out.result;
    r.trace = std::move(fr.trace);
    r.logits = std::move(fr.logits);
    summarize_trace(r, r.logits, tokens);
    r.baseline_loss = r.loss;
    r.damage = 0.0;
    for (std::size_t l = 0; l < model.config.n_layers; ++l) r.per_layer_displacement[l] = 0.0;
    out.cache.loss = r.loss;
    return out;
}

RunResult run_perturbed(const Model& model, std::span<const int> tokens, const InterventionPlan& plan,
                        std::uint64_t seed, const CleanCache& clean) {
    if (plan.repair != RepairKind::none) throw PlanError("run_perturbed expects repair = none");
    return run_intervened(model, tokens, plan, seed, clean, false);
}

RunResult run_perturbed(const Model& model, std::span<const int> tokens, const InterventionPlan& plan,
                        std::uint64_t seed) {
    const CleanRun clean = run_clean(model, tokens);
    return run_perturbed(model, tokens, plan, seed, clean.cache);
}

RunResult run_repair(const Model& model, std::span<const int> tokens, const InterventionPlan& plan,
                     std::uint64_t seed, const CleanCache& cache) {
    if (plan.repair == RepairKind::none) throw PlanError("run_repair needs repair = attention or layernorm");
    return run_intervened(model, tokens, plan, seed, cache, true);
}

ForwardResult forward_with_plan(const Model& model, std::span<const int> tokens, const InterventionPlan* plan,
                                std::uint64_t seed, const CaptureSet& capture) {
    if (!plan) return forward(model, tokens, {}, capture);
    plan->validate(model.config.n_layers);
    HookSet hooks = perturbation_hooks(*plan, seed, nullptr);
    if (plan->repair != RepairKind::none) {
        const CleanRun clean = run_clean(model, tokens);
        HookSet repair = repair_hooks(*plan, clean.cache);
        // The cache dies with this scope, so the hooks need their own copies.
        for (auto& h : repair) {
            Tensor copy = clean.cache.trace.at(h.layer, h.site);
            h.fn = [copy = std::move(copy)](Tensor, const HookContext&) { return copy; };
        }
        hooks.insert(hooks.end(), repair.begin(), repair.end());
        return forward(model, tokens, hooks, capture);
    }
    return forward(model, tokens, hooks, capture);
}

std::optional<double> recovery_pct(double damage_unrepaired, double damage_repaired) {
    if (!(damage_unrepaired > 0.0)) return std::nullopt;
    return 100.0 * (damage_unrepaired - damage_repaired) / damage_unrepaired;
}

} // namespace dirmag
