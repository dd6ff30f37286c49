#pragma once

#include "dirmag/intervention.hpp"
#include "dirmag/model.hpp"
#include "dirmag/weights_io.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace dirmag {

// Mean over positions 1..seq-1 of -log p(token_t | tokens_<t).
double next_token_loss(const Tensor& logits, std::span<const int> tokens);
// log p(token_t | tokens_<t) for t = 1..seq-1.
std::vector<double> token_logprobs(const Tensor& logits, std::span<const int> tokens);

enum class ScoreMode { sum, mean };
double sequence_logprob(const Tensor& logits, std::span<const int> tokens, ScoreMode mode = ScoreMode::sum);

// Shannon entropy (nats) of each causal row of a [heads x seq x seq] tensor,
// averaged over heads and query positions. Row t is supported on 0..t.
double attention_entropy(const Tensor& probs);

struct PairScore {
    double good = 0.0;
    double bad = 0.0;
};

// Fraction of pairs with good > bad; ties count as failures.
double pair_accuracy(std::span<const PairScore> scores);

std::vector<MinimalPair> minimal_pairs(const TokenizedDataset& dataset);

// Scores both members of each pair under the same plan and seed. A null plan
// means no intervention.
std::vector<PairScore> score_pairs(const Model& model, std::span<const MinimalPair> pairs,
                                   const InterventionPlan* plan, std::uint64_t seed,
                                   ScoreMode mode = ScoreMode::sum);
double minimal_pair_accuracy(const Model& model, std::span<const MinimalPair> pairs, const InterventionPlan* plan,
                             std::uint64_t seed, ScoreMode mode = ScoreMode::sum);

// Per layer: mean over tokens of |perturbed - clean| at `site`.
std::map<std::size_t, double> propagation_profile(const ForwardTrace& clean, const ForwardTrace& perturbed,
                                                  Site site = Site::resid_post);

struct Correlation {
    double r = 0.0;
    double p = 1.0;  // two-sided, t-transform with n-2 df
    std::size_t n = 0;
};

Correlation pearson_r(std::span<const double> x, std::span<const double> y);

} // namespace dirmag
