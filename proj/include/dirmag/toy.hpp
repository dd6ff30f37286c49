#pragma once

#include "dirmag/model.hpp"
#include "dirmag/weights_io.hpp"

#include <cstdint>
#include <vector>

namespace dirmag {

// 2 layers, d_model 32, 4 heads, vocab 64: small enough for desk-scale sweeps.
ModelConfig desk_config();

// Gaussian weights with embedding rows of norm ~embed_norm (between 0.8x and
// 1.2x), so residual norms stay well above the largest grid delta.
Model random_toy_model(const ModelConfig& config, std::uint64_t seed, double embed_norm = 60.0);

// Every weight zero, norm gains one: logits are uniform for any input.
Model zero_toy_model(const ModelConfig& config);

// A one-layer bigram model over an 8-token vocabulary whose attention and MLP
// contribute nothing. Token 0 is a determiner, 1-2 singular nouns, 3-4 plural
// nouns, 5-6 singular verbs, 7 a plural verb. Each pair is
// (det, noun, agreeing verb) vs (det, noun, disagreeing verb), and the model
// scores the agreeing verb strictly higher after every noun.
struct AgreementToy {
    Model model;
    std::vector<MinimalPair> pairs;
};

AgreementToy agreement_toy();

// Random sentences over [0, vocab). POS class is token % 6; depth follows a
// bounded random walk starting at 0.
TokenizedDataset toy_corpus(std::size_t n_sentences, std::size_t min_len, std::size_t max_len,
                            std::size_t vocab_size, std::uint64_t seed, bool annotate = true);

// Sentences sampled from the model itself (first token uniform), so the model's
// clean loss on them is its own entropy and any change to its predictive
// distribution raises the expected loss. Annotations as in toy_corpus.
TokenizedDataset sample_corpus(const Model& model, std::size_t n_sentences, std::size_t min_len,
                               std::size_t max_len, std::uint64_t seed, bool annotate = true);

// Minimal pairs whose good member is sampled from the model and whose bad
// member swaps the last token for the one the model ranks lowest there.
TokenizedDataset sample_pairs(const Model& model, std::size_t n_pairs, std::size_t length, std::uint64_t seed);

// Random minimal pairs: equal-length sequences differing in their last token.
TokenizedDataset toy_pairs(std::size_t n_pairs, std::size_t length, std::size_t vocab_size, std::uint64_t seed);

TokenizedDataset pairs_dataset(const std::vector<MinimalPair>& pairs);

} // namespace dirmag
