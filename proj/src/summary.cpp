#include "dirmag/experiment.hpp"

#include "dirmag/errors.hpp"
#include "dirmag/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <tuple>

namespace dirmag {

std::string format_fixed(double v, int decimals) {
    if (!std::isfinite(v)) return "";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
    return s;
}

std::string format_damage(double loss, double baseline) { return format_fixed(loss - baseline, 3); }

std::string format_recovery(double damage_unrepaired, double damage_repaired) {
    const auto r = recovery_pct(damage_unrepaired, damage_repaired);
    return r ? format_fixed(*r, 1) : "";
}

std::string format_ratio(double numerator, double denominator) {
    if (!(denominator > 0.0) || !std::isfinite(numerator)) return "";
    return format_fixed(numerator / denominator, 1);
}

std::string format_p(double p) {
    if (!std::isfinite(p)) return "";
    if (p < 0.001) return "<0.001";
    return format_fixed(p, 3);
}

namespace {

using SeedMeans = std::map<std::uint64_t, double>;
using Pred = std::function<bool(const MetricRecord&)>;
using Get = std::function<double(const MetricRecord&)>;

// Per-seed mean of `get` over the records matching `pred`. Seeds are the unit
// of replication for standard errors and paired tests.
SeedMeans seed_means(const std::vector<MetricRecord>& records, const Pred& pred, const Get& get) {
    std::map<std::uint64_t, std::pair<double, std::size_t>> acc;
    for (const auto& r : records) {
        if (!pred(r)) continue;
        auto& a = acc[r.seed];
        a.first += get(r);
        ++a.second;
    }
    SeedMeans out;
    for (const auto& [seed, a] : acc) out[seed] = a.first / static_cast<double>(a.second);
    return out;
}

struct Stat {
    double mean = std::nan("");
    double se = std::nan("");
    std::size_t n = 0;
};

Stat stat_of(const SeedMeans& m) {
    Stat s;
    s.n = m.size();
    if (m.empty()) return s;
    std::vector<double> v;
    for (const auto& [_, x] : m) v.push_back(x);
    if (v.size() >= 2) {
        const MeanSe ms = mean_se(v);
        s.mean = ms.mean;
        s.se = ms.se;
    } else {
        s.mean = v.front();
    }
    return s;
}

std::optional<TTest> paired(const SeedMeans& a, const SeedMeans& b) {
    std::vector<double> xa, xb;
    for (const auto& [seed, v] : a) {
        auto it = b.find(seed);
        if (it == b.end()) continue;
        xa.push_back(v);
        xb.push_back(it->second);
    }
    if (xa.size() < 2) return std::nullopt;
    try {
        return paired_t_test(xa, xb);
    } catch (const DegenerateInputError&) {
        return std::nullopt;
    }
}

struct Tests {
    std::vector<std::optional<TTest>> tests;
    std::size_t m(const SummaryOptions& o) const {
        if (o.bonferroni_m) return *o.bonferroni_m;
        return std::max<std::size_t>(1, std::count_if(tests.begin(), tests.end(), [](const auto& t) {
                                            return t.has_value();
                                        }));
    }
};

void add_test_cells(std::vector<std::string>& row, const std::optional<TTest>& t, std::size_t m) {
    if (!t) {
        row.insert(row.end(), {"", "", ""});
        return;
    }
    row.push_back(format_fixed(t->t, 2));
    row.push_back(format_p(t->p));
    row.push_back(format_p(bonferroni(t->p, m)));
}

std::string bonferroni_note(std::size_t m, const SummaryOptions& o) {
    return "p is a two-sided paired t-test across seeds; p_corrected is Bonferroni-corrected with m = " +
           std::to_string(m) + (o.bonferroni_m ? " (from config)." : " (number of tests in this table).");
}

const std::vector<PerturbationKind> kKindOrder = {PerturbationKind::magnitude, PerturbationKind::angular};

std::vector<PerturbationKind> kinds_present(const std::vector<MetricRecord>& rs, const Pred& pred) {
    std::vector<PerturbationKind> out;
    for (auto k : kKindOrder) {
        if (std::any_of(rs.begin(), rs.end(), [&](const MetricRecord& r) { return pred(r) && r.kind == k; })) {
            out.push_back(k);
        }
    }
    return out;
}

std::vector<double> deltas_present(const std::vector<MetricRecord>& rs, const Pred& pred) {
    std::vector<double> out;
    for (const auto& r : rs) {
        if (pred(r)) out.push_back(r.delta);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

Pred lm_cell(double delta, PerturbationKind kind, RepairKind arm) {
    return [=](const MetricRecord& r) {
        return r.type == RecordType::lm && r.delta == delta && r.kind == kind && r.arm == arm;
    };
}

SummaryTable loss_table(const std::vector<MetricRecord>& rs, const SummaryOptions& o) {
    SummaryTable t;
    t.name = "loss";
    t.title = "Loss damage by perturbation kind";
    const Pred base = [](const MetricRecord& r) { return r.type == RecordType::lm && r.arm == RepairKind::none; };
    const auto kinds = kinds_present(rs, base);
    const bool both = kinds.size() == 2;
    t.columns = {"delta"};
    for (auto k : kinds) {
        t.columns.push_back(to_string(k) + "_damage");
        t.columns.push_back(to_string(k) + "_se");
    }
    if (both) t.columns.insert(t.columns.end(), {"ratio_angular_over_magnitude", "t", "p", "p_corrected"});

    const auto deltas = deltas_present(rs, base);
    Tests tests;
    std::vector<std::map<PerturbationKind, SeedMeans>> per_delta;
    for (double d : deltas) {
        std::map<PerturbationKind, SeedMeans> m;
        for (auto k : kinds) m[k] = seed_means(rs, lm_cell(d, k, RepairKind::none), [](auto& r) { return r.damage; });
        tests.tests.push_back(both ? paired(m[PerturbationKind::angular], m[PerturbationKind::magnitude])
                                   : std::nullopt);
        per_delta.push_back(std::move(m));
    }
    const std::size_t m = tests.m(o);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        std::vector<std::string> row = {format_fixed(deltas[i], 1)};
        std::map<PerturbationKind, Stat> st;
        for (auto k : kinds) {
            st[k] = stat_of(per_delta[i][k]);
            row.push_back(format_fixed(st[k].mean, 3));
            row.push_back(format_fixed(st[k].se, 3));
        }
        if (both) {
            const bool have = st[PerturbationKind::angular].n && st[PerturbationKind::magnitude].n;
            row.push_back(have ? format_ratio(st[PerturbationKind::angular].mean, st[PerturbationKind::magnitude].mean)
                               : "");
            add_test_cells(row, tests.tests[i], m);
        }
        t.rows.push_back(std::move(row));
    }

    std::map<std::string, double> baselines;
    std::size_t skipped = 0, perturbed = 0;
    for (const auto& r : rs) {
        if (!base(r)) continue;
        baselines[r.sentence] = r.baseline_loss;
        skipped += r.skipped_tokens;
        perturbed += r.perturbed_tokens;
    }
    double baseline = 0.0;
    for (const auto& [_, v] : baselines) baseline += v;
    if (!baselines.empty()) baseline /= static_cast<double>(baselines.size());
    t.footnotes.push_back("Damage = loss - baseline loss, averaged over sentences within each seed; se is across "
                          "seeds. Baseline loss: " + format_fixed(baseline, 3) + ".");
    if (both) t.footnotes.push_back(bonferroni_note(m, o));
    if (skipped) {
        t.footnotes.push_back(std::to_string(skipped) + " of " + std::to_string(skipped + perturbed) +
                              " token perturbations were skipped because the hidden norm was too small for delta.");
    }
    return t;
}

SummaryTable accuracy_table(const std::vector<MetricRecord>& rs, const SummaryOptions& o) {
    SummaryTable t;
    t.name = "accuracy";
    t.title = "Minimal-pair accuracy";
    const Pred base = [](const MetricRecord& r) { return r.type == RecordType::pairs && r.arm == RepairKind::none; };
    const auto kinds = kinds_present(rs, base);
    const bool both = kinds.size() == 2;
    double baseline = 0.0;
    for (const auto& r : rs) {
        if (base(r)) baseline = r.baseline_accuracy;
    }
    t.columns = {"delta"};
    for (auto k : kinds) {
        t.columns.push_back(to_string(k) + "_accuracy_pct");
        t.columns.push_back(to_string(k) + "_se");
        t.columns.push_back(to_string(k) + "_drop_pct");
    }
    if (both) t.columns.insert(t.columns.end(), {"t", "p", "p_corrected"});
    const auto deltas = deltas_present(rs, base);
    Tests tests;
    std::vector<std::map<PerturbationKind, SeedMeans>> per_delta;
    for (double d : deltas) {
        std::map<PerturbationKind, SeedMeans> m;
        for (auto k : kinds) {
            m[k] = seed_means(
                rs, [&](const MetricRecord& r) { return base(r) && r.delta == d && r.kind == k; },
                [](const MetricRecord& r) { return 100.0 * r.blimp_accuracy; });
        }
        tests.tests.push_back(both ? paired(m[PerturbationKind::magnitude], m[PerturbationKind::angular])
                                   : std::nullopt);
        per_delta.push_back(std::move(m));
    }
    const std::size_t m = tests.m(o);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        std::vector<std::string> row = {format_fixed(deltas[i], 1)};
        for (auto k : kinds) {
            const Stat s = stat_of(per_delta[i][k]);
            row.push_back(format_fixed(s.mean, 1));
            row.push_back(format_fixed(s.se, 1));
            row.push_back(format_fixed(100.0 * baseline - s.mean, 1));
        }
        if (both) add_test_cells(row, tests.tests[i], m);
        t.rows.push_back(std::move(row));
    }
    t.footnotes.push_back("Baseline accuracy: " + format_fixed(100.0 * baseline, 1) +
                          "%. Drop is in percentage points. A pair counts when the grammatical member scores "
                          "strictly higher.");
    if (both) t.footnotes.push_back(bonferroni_note(m, o));
    return t;
}

// Intervention layers, from the layers that reported achieved deltas.
std::pair<std::size_t, std::size_t> intervention_span(const std::vector<MetricRecord>& rs) {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& r : rs) {
        for (const auto& [layer, _] : r.achieved_delta) {
            lo = std::min(lo, layer);
            hi = std::max(hi, layer);
        }
    }
    return {lo, hi};
}

SummaryTable propagation_table(const std::vector<MetricRecord>& rs) {
    SummaryTable t;
    t.name = "propagation";
    t.title = "Displacement from the clean stream by layer";
    const Pred base = [](const MetricRecord& r) { return r.type == RecordType::lm && r.arm == RepairKind::none; };
    const auto kinds = kinds_present(rs, base);
    const bool both = kinds.size() == 2;
    t.columns = {"delta", "layer", "note"};
    for (auto k : kinds) t.columns.push_back(to_string(k) + "_l2");
    if (both) t.columns.push_back("ratio_angular_over_magnitude");
    const auto [start, end] = intervention_span(rs);
    std::size_t n_layers = 0;
    for (const auto& r : rs) {
        if (base(r)) n_layers = std::max(n_layers, r.displacement_per_layer.size());
    }
    for (double d : deltas_present(rs, base)) {
        for (std::size_t l = 0; l < n_layers; ++l) {
            std::string note;
            if (l == start) note = "intervention start";
            else if (l == end) note = "intervention end";
            else if (l + 1 == n_layers) note = "final";
            std::vector<std::string> row = {format_fixed(d, 1), std::to_string(l), note};
            std::map<PerturbationKind, Stat> st;
            for (auto k : kinds) {
                st[k] = stat_of(seed_means(
                    rs,
                    [&](const MetricRecord& r) {
                        return lm_cell(d, k, RepairKind::none)(r) && r.displacement_per_layer.size() > l;
                    },
                    [l](const MetricRecord& r) { return r.displacement_per_layer[l]; }));
                row.push_back(format_fixed(st[k].mean, 3));
            }
            if (both) {
                row.push_back(st[PerturbationKind::magnitude].mean > 0.0
                                  ? format_fixed(st[PerturbationKind::angular].mean /
                                                     st[PerturbationKind::magnitude].mean,
                                                 2)
                                  : "");
            }
            t.rows.push_back(std::move(row));
        }
    }
    t.footnotes.push_back("Mean over tokens of |perturbed - clean| at the perturbed site of each layer, averaged "
                          "over sentences and seeds. Downstream values are reported as observed; growth is not "
                          "assumed.");
    return t;
}

SummaryTable entropy_table(const std::vector<MetricRecord>& rs, const SummaryOptions& o) {
    SummaryTable t;
    t.name = "entropy";
    t.title = "Attention entropy";
    const Pred base = [](const MetricRecord& r) { return r.type == RecordType::lm && r.arm == RepairKind::none; };
    const auto kinds = kinds_present(rs, base);
    const bool both = kinds.size() == 2;
    t.columns = {"delta", "condition", "entropy", "entropy_se", "change", "change_se"};
    const auto deltas = deltas_present(rs, base);
    Tests tests;
    std::vector<std::string> test_notes;
    for (double d : deltas) {
        const Pred at = [&](const MetricRecord& r) { return base(r) && r.delta == d; };
        const Stat b = stat_of(seed_means(rs, at, [](auto& r) { return r.baseline_mean_entropy; }));
        t.rows.push_back({format_fixed(d, 1), "baseline", format_fixed(b.mean, 3), format_fixed(b.se, 3), "", ""});
        std::map<PerturbationKind, SeedMeans> change;
        for (auto k : kinds) {
            const Pred cell = lm_cell(d, k, RepairKind::none);
            const Stat e = stat_of(seed_means(rs, cell, [](auto& r) { return r.mean_entropy; }));
            change[k] = seed_means(rs, cell, [](auto& r) { return r.mean_entropy - r.baseline_mean_entropy; });
            const Stat c = stat_of(change[k]);
            t.rows.push_back({format_fixed(d, 1), to_string(k), format_fixed(e.mean, 3), format_fixed(e.se, 3),
                              format_fixed(c.mean, 3), format_fixed(c.se, 3)});
        }
        tests.tests.push_back(both ? paired(change[PerturbationKind::angular], change[PerturbationKind::magnitude])
                                   : std::nullopt);
    }
    t.footnotes.push_back("Entropy in nats, averaged over heads, query positions (causal support only) and layers.");
    if (both) {
        const std::size_t m = tests.m(o);
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            if (!tests.tests[i]) continue;
            const TTest& tt = *tests.tests[i];
            t.footnotes.push_back("delta " + format_fixed(deltas[i], 1) + ": angular vs magnitude change t = " +
                                  format_fixed(tt.t, 2) + ", p = " + format_p(tt.p) +
                                  ", p_corrected = " + format_p(bonferroni(tt.p, m)) + ".");
        }
        t.footnotes.push_back(bonferroni_note(m, o));
    }
    return t;
}

SummaryTable entropy_layers_table(const std::vector<MetricRecord>& rs) {
    SummaryTable t;
    t.name = "entropy_layers";
    t.title = "Attention entropy change by layer";
    const Pred base = [](const MetricRecord& r) { return r.type == RecordType::lm && r.arm == RepairKind::none; };
    const auto kinds = kinds_present(rs, base);
    const bool both = kinds.size() == 2;
    t.columns = {"delta", "layer"};
    for (auto k : kinds) t.columns.push_back(to_string(k) + "_change");
    if (both) t.columns.push_back("ratio_angular_over_magnitude");
    std::size_t n_layers = 0;
    for (const auto& r : rs) {
        if (base(r)) n_layers = std::max(n_layers, r.entropy_per_layer.size());
    }
    for (double d : deltas_present(rs, base)) {
        for (std::size_t l = 0; l < n_layers; ++l) {
            std::vector<std::string> row = {format_fixed(d, 1), std::to_string(l)};
            std::map<PerturbationKind, double> mean;
            for (auto k : kinds) {
                mean[k] = stat_of(seed_means(
                                      rs,
                                      [&](const MetricRecord& r) {
                                          return lm_cell(d, k, RepairKind::none)(r) &&
                                                 r.entropy_per_layer.size() > l &&
                                                 r.baseline_entropy_per_layer.size() > l;
                                      },
                                      [l](const MetricRecord& r) {
                                          return r.entropy_per_layer[l] - r.baseline_entropy_per_layer[l];
                                      }))
                              .mean;
                row.push_back(format_fixed(mean[k], 3));
            }
            // Ratios of changes near zero are noise, so they are left blank.
            if (both) {
                const double a = mean[PerturbationKind::angular], m = mean[PerturbationKind::magnitude];
                row.push_back(std::fabs(m) >= 0.0005 && std::fabs(a) >= 0.0005 ? format_fixed(a / m, 1) : "");
            }
            t.rows.push_back(std::move(row));
        }
    }
    return t;
}

std::vector<SummaryTable> repair_tables(const std::vector<MetricRecord>& rs, const SummaryOptions& o) {
    SummaryTable t;
    t.name = "repair";
    t.title = "Causal repair";
    t.columns = {"arm", "delta", "condition", "loss", "loss_se", "damage", "recovery_pct"};
    SummaryTable tests_table;
    tests_table.name = "repair_tests";
    tests_table.title = "Repair recovery: angular vs magnitude";
    tests_table.columns = {"arm", "delta", "angular_recovery_pct", "magnitude_recovery_pct", "t", "p",
                           "p_corrected"};
    Tests tests;
    std::vector<std::vector<std::string>> pending;

    for (auto arm : {RepairKind::attention, RepairKind::layernorm}) {
        const Pred repaired = [arm](const MetricRecord& r) { return r.type == RecordType::lm && r.arm == arm; };
        const auto kinds = kinds_present(rs, repaired);
        for (double d : deltas_present(rs, repaired)) {
            const Stat b = stat_of(seed_means(
                rs, [&](const MetricRecord& r) { return repaired(r) && r.delta == d; },
                [](auto& r) { return r.baseline_loss; }));
            t.rows.push_back({to_string(arm), format_fixed(d, 1), "baseline", format_fixed(b.mean, 3), "", "", ""});
            std::map<PerturbationKind, SeedMeans> per_seed_recovery;
            std::map<PerturbationKind, std::string> recovery_cell;
            for (auto k : kinds) {
                const SeedMeans un_damage = seed_means(rs, lm_cell(d, k, RepairKind::none), [](auto& r) {
                    return r.damage;
                });
                const SeedMeans re_damage = seed_means(rs, lm_cell(d, k, arm), [](auto& r) { return r.damage; });
                const Stat un_loss = stat_of(seed_means(rs, lm_cell(d, k, RepairKind::none), [](auto& r) {
                    return r.loss;
                }));
                const Stat re_loss = stat_of(seed_means(rs, lm_cell(d, k, arm), [](auto& r) { return r.loss; }));
                const Stat un = stat_of(un_damage), re = stat_of(re_damage);
                if (un.n) {
                    t.rows.push_back({to_string(arm), format_fixed(d, 1), to_string(k) + " (unrepaired)",
                                      format_fixed(un_loss.mean, 3), format_fixed(un_loss.se, 3),
                                      format_fixed(un.mean, 3), ""});
                }
                recovery_cell[k] = un.n ? format_recovery(un.mean, re.mean) : "";
                t.rows.push_back({to_string(arm), format_fixed(d, 1), to_string(k) + " (repaired)",
                                  format_fixed(re_loss.mean, 3), format_fixed(re_loss.se, 3),
                                  format_fixed(re.mean, 3), recovery_cell[k]});
                for (const auto& [seed, u] : un_damage) {
                    auto it = re_damage.find(seed);
                    if (it == re_damage.end()) continue;
                    if (auto rec = recovery_pct(u, it->second)) per_seed_recovery[k][seed] = *rec;
                }
            }
            if (kinds.size() == 2) {
                tests.tests.push_back(
                    paired(per_seed_recovery[PerturbationKind::angular], per_seed_recovery[PerturbationKind::magnitude]));
                pending.push_back({to_string(arm), format_fixed(d, 1), recovery_cell[PerturbationKind::angular],
                                   recovery_cell[PerturbationKind::magnitude]});
            }
        }
    }
    const std::size_t m = tests.m(o);
    for (std::size_t i = 0; i < pending.size(); ++i) {
        auto row = pending[i];
        add_test_cells(row, tests.tests[i], m);
        tests_table.rows.push_back(std::move(row));
    }
    t.footnotes.push_back("Recovery = 100 * (unrepaired damage - repaired damage) / unrepaired damage, computed "
                          "from unrounded mean damages; recomputing it from the rounded damage column can differ "
                          "in the last digit. Recovery is blank when the unrepaired damage is not positive.");
    tests_table.footnotes.push_back("Tests pair per-seed recoveries of the two kinds. " + bonferroni_note(m, o));
    std::vector<SummaryTable> out;
    if (!t.rows.empty()) out.push_back(std::move(t));
    if (!tests_table.rows.empty()) out.push_back(std::move(tests_table));
    return out;
}

SummaryTable parse_depth_table(const std::vector<MetricRecord>& rs) {
    SummaryTable t;
    t.name = "parse_depth";
    t.title = "Hidden-state norm vs parse depth";
    t.columns = {"delta", "condition", "pearson_r", "r_se", "p", "change_pct"};
    const Pred base = [](const MetricRecord& r) { return r.type == RecordType::parse_depth; };
    const MetricRecord* first = nullptr;
    for (const auto& r : rs) {
        if (base(r)) {
            first = &r;
            break;
        }
    }
    if (!first) return t;
    const double r0 = first->baseline_r;
    t.rows.push_back({"", "baseline", format_fixed(r0, 3), "", format_p(first->baseline_p), ""});
    for (double d : deltas_present(rs, base)) {
        for (auto k : kinds_present(rs, base)) {
            const Stat s = stat_of(seed_means(
                rs, [&](const MetricRecord& r) { return base(r) && r.delta == d && r.kind == k; },
                [](auto& r) { return r.pearson_r; }));
            const std::string change = r0 != 0.0 ? format_fixed(100.0 * (s.mean - r0) / std::fabs(r0), 0) : "";
            t.rows.push_back({format_fixed(d, 1), to_string(k), format_fixed(s.mean, 3), format_fixed(s.se, 3), "",
                              change});
        }
    }
    t.footnotes.push_back("Pearson r between |h| and dependency depth, pooled over all tokens at layer " +
                          std::to_string(first->layer) + " (" + std::to_string(first->n_tokens) + " tokens).");
    return t;
}

SummaryTable probe_table(const std::vector<MetricRecord>& rs) {
    SummaryTable t;
    t.name = "probe";
    t.title = "Linear probe accuracy (held-out)";
    t.columns = {"layer", "representation", "accuracy_pct", "vs_chance_pct", "n_test"};
    std::vector<const MetricRecord*> probes;
    for (const auto& r : rs) {
        if (r.type == RecordType::probe) probes.push_back(&r);
    }
    std::sort(probes.begin(), probes.end(), [](const MetricRecord* a, const MetricRecord* b) {
        return std::tie(a->layer, a->probe_mode) < std::tie(b->layer, b->probe_mode);
    });
    std::map<FeatureMode, std::pair<double, std::size_t>> means;
    std::size_t classes = kPosClasses;
    for (const auto* r : probes) {
        const double chance = 100.0 / static_cast<double>(r->n_classes);
        classes = r->n_classes;
        t.rows.push_back({std::to_string(r->layer), to_string(r->probe_mode), format_fixed(100.0 * r->probe_accuracy, 1),
                          format_fixed(100.0 * r->probe_accuracy - chance, 1), std::to_string(r->n_test)});
        means[r->probe_mode].first += r->probe_accuracy;
        ++means[r->probe_mode].second;
    }
    for (const auto& [mode, acc] : means) {
        const double mean = 100.0 * acc.first / static_cast<double>(acc.second);
        t.rows.push_back({"mean", to_string(mode), format_fixed(mean, 1),
                          format_fixed(mean - 100.0 / static_cast<double>(classes), 1), ""});
    }
    t.footnotes.push_back("Multinomial logistic regression on the residual stream after each layer; sentences are "
                          "split 80/20 with a fixed seed. Chance is " +
                          format_fixed(100.0 / static_cast<double>(classes), 1) + "%.");
    return t;
}

std::string csv_cell(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

} // namespace

std::vector<SummaryTable> build_summary(const std::vector<MetricRecord>& records, const SummaryOptions& options) {
    std::vector<SummaryTable> out;
    auto add = [&](SummaryTable t) {
        if (!t.rows.empty()) out.push_back(std::move(t));
    };
    add(loss_table(records, options));
    add(accuracy_table(records, options));
    add(propagation_table(records));
    add(entropy_table(records, options));
    add(entropy_layers_table(records));
    for (auto& t : repair_tables(records, options)) add(std::move(t));
    add(parse_depth_table(records));
    add(probe_table(records));
    return out;
}

std::string render_csv(const SummaryTable& table) {
    std::ostringstream out;
    for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << csv_cell(table.columns[i]);
    out << '\n';
    for (const auto& row : table.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_cell(row[i]);
        out << '\n';
    }
    return out.str();
}

std::string render_markdown(const std::vector<SummaryTable>& tables) {
    std::ostringstream out;
    for (const auto& t : tables) {
        out << "## " << t.title << "\n\n|";
        for (const auto& c : t.columns) out << ' ' << c << " |";
        out << "\n|";
        for (std::size_t i = 0; i < t.columns.size(); ++i) out << " --- |";
        out << '\n';
        for (const auto& row : t.rows) {
            out << '|';
            for (const auto& cell : row) out << ' ' << (cell.empty() ? "-" : cell) << " |";
            out << '\n';
        }
        out << '\n';
        for (const auto& f : t.footnotes) out << "- " << f << '\n';
        if (!t.footnotes.empty()) out << '\n';
    }
    return out.str();
}

std::filesystem::path summarize(const std::filesystem::path& records_path, const std::filesystem::path& out_dir,
                                const SummaryOptions& options) {
    const auto records = read_records(records_path);
    std::set<std::string> hashes;
    for (const auto& r : records) hashes.insert(r.config_hash);
    if (hashes.size() > 1) throw FormatError("records file mixes results from " + std::to_string(hashes.size()) +
                                             " different configs");
    const auto tables = build_summary(records, options);

    std::filesystem::create_directories(out_dir);
    const auto md_path = out_dir / "summary.md";
    std::ofstream md(md_path, std::ios::trunc | std::ios::binary);
    if (!md) throw InputError("cannot write " + md_path.string());
    md << "# Summary\n\n"
       << records.size() << " records, schema version " << kRecordSchemaVersion;
    if (!hashes.empty()) md << ", config " << *hashes.begin();
    md << ".\n\n" << render_markdown(tables);
    for (const auto& t : tables) {
        std::ofstream csv(out_dir / (t.name + ".csv"), std::ios::trunc | std::ios::binary);
        if (!csv) throw InputError("cannot write " + (out_dir / (t.name + ".csv")).string());
        csv << render_csv(t);
    }
    return md_path;
}

} // namespace dirmag
