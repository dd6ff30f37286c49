#include "dirmag/metrics.hpp"

#include "dirmag/errors.hpp"
#include "dirmag/stats.hpp"

#include <algorithm>
#include <cmath>

namespace dirmag {

std::vector<double> token_logprobs(const Tensor& logits, std::span<const int> tokens) {
    require_matrix(logits, "logits");
    if (tokens.size() < 2) throw InputError("next-token scoring needs at least 2 tokens");
    if (logits.rows() != tokens.size()) throw DimensionError("logits rows differ from token count");
    std::vector<double> out;
    out.reserve(tokens.size() - 1);
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        auto row = logits.row(t - 1);
        const int target = tokens[t];
        if (target < 0 || static_cast<std::size_t>(target) >= row.size()) throw InputError("token id outside vocab");
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (float v : row) z += std::exp(static_cast<double>(v) - mx);
        out.push_back(static_cast<double>(row[static_cast<std::size_t>(target)]) - mx - std::log(z));
    }
    return out;
}

double next_token_loss(const Tensor& logits, std::span<const int> tokens) {
    const auto lp = token_logprobs(logits, tokens);
    double total = 0.0;
    for (double v : lp) total -= v;
    return total / static_cast<double>(lp.size());
}

double sequence_logprob(const Tensor& logits, std::span<const int> tokens, ScoreMode mode) {
    const auto lp = token_logprobs(logits, tokens);
    double total = 0.0;
    for (double v : lp) total += v;
    return mode == ScoreMode::sum ? total : total / static_cast<double>(lp.size());
}

double attention_entropy(const Tensor& probs) {
    if (probs.rank() != 3 || probs.dim(1) != probs.dim(2)) {
        throw DimensionError("attention probabilities must be [heads x seq x seq]");
    }
    const std::size_t heads = probs.dim(0), seq = probs.dim(1);
    auto data = probs.data();
    double total = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < seq; ++t) {
            auto row = data.subspan((h * seq + t) * seq, t + 1);
            double mass = 0.0, entropy = 0.0;
            for (float a : row) {
                mass += a;
                if (a > 0.0f) entropy -= static_cast<double>(a) * std::log(static_cast<double>(a));
            }
            if (std::fabs(mass - 1.0) > 1e-4) {
                throw InputError("attention row does not sum to 1 over its causal support");
            }
            total += entropy;
        }
    }
    return total / static_cast<double>(heads * seq);
}

double pair_accuracy(std::span<const PairScore> scores) {
    if (scores.empty()) throw InputError("no minimal pairs to score");
    std::size_t wins = 0;
    for (const auto& s : scores) wins += s.good > s.bad ? 1 : 0;
    return static_cast<double>(wins) / static_cast<double>(scores.size());
}

std::vector<MinimalPair> minimal_pairs(const TokenizedDataset& dataset) {
    std::vector<MinimalPair> out;
    for (const auto& r : dataset.records) {
        if (!r.pair) throw InputError("record '" + r.id + "' is not a minimal pair");
        out.push_back(*r.pair);
    }
    return out;
}

std::vector<PairScore> score_pairs(const Model& model, std::span<const MinimalPair> pairs,
                                   const InterventionPlan* plan, std::uint64_t seed, ScoreMode mode) {
    if (pairs.empty()) throw InputError("no minimal pairs to score");
    std::vector<PairScore> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        const auto good = forward_with_plan(model, p.good_tokens, plan, seed);
        const auto bad = forward_with_plan(model, p.bad_tokens, plan, seed);
        out.push_back({sequence_logprob(good.logits, p.good_tokens, mode),
                       sequence_logprob(bad.logits, p.bad_tokens, mode)});
    }
    return out;
}

double minimal_pair_accuracy(const Model& model, std::span<const MinimalPair> pairs, const InterventionPlan* plan,
                             std::uint64_t seed, ScoreMode mode) {
    const auto scores = score_pairs(model, pairs, plan, seed, mode);
    return pair_accuracy(scores);
}

std::map<std::size_t, double> propagation_profile(const ForwardTrace& clean, const ForwardTrace& perturbed,
                                                  Site site) {
    if (clean.layers.size() != perturbed.layers.size()) throw InputError("traces have different depths");
    std::map<std::size_t, double> out;
    for (std::size_t l = 0; l < clean.layers.size(); ++l) {
        const Tensor& a = clean.at(l, site);
        const Tensor& b = perturbed.at(l, site);
        if (!a.same_shape(b)) throw InputError("trace shapes differ at layer " + std::to_string(l));
        double total = 0.0;
        for (std::size_t t = 0; t < a.rows(); ++t) {
            auto ra = a.row(t);
            auto rb = b.row(t);
            double s = 0.0;
            for (std::size_t i = 0; i < ra.size(); ++i) {
                const double diff = static_cast<double>(rb[i]) - ra[i];
                s += diff * diff;
            }
            total += std::sqrt(s);
        }
        out[l] = total / static_cast<double>(a.rows());
    }
    return out;
}

Correlation pearson_r(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw InputError("pearson_r: lengths differ");
    const std::size_t n = x.size();
    if (n < 3) throw InputError("pearson_r needs at least 3 points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateInputError("correlation undefined for constant input");
    Correlation c;
    c.n = n;
    c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    const double df = static_cast<double>(n - 2);
    if (std::fabs(c.r) >= 1.0) {
        c.p = 0.0;
    } else {
        const double t = c.r * std::sqrt(df / (1.0 - c.r * c.r));
        c.p = student_t_two_sided_p(t, df);
    }
    return c;
}

} // namespace dirmag
