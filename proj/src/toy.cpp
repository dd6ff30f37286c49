#include "dirmag/toy.hpp"

#include "dirmag/errors.hpp"
#include "dirmag/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dirmag {

ModelConfig desk_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_mlp = 64;
    c.vocab_size = 64;
    c.max_seq_len = 64;
    return c;
}

namespace {

Tensor gaussian(std::vector<std::size_t> shape, double sd, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, sd);
    for (float& v : t.data()) v = static_cast<float>(dist(rng));
    return t;
}

Tensor filled(std::vector<std::size_t> shape, float value) {
    Tensor t(std::move(shape));
    for (float& v : t.data()) v = value;
    return t;
}

bool is_norm_gain(const std::string& name) {
    return name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == param::final_norm_weight;
}

} // namespace

Model random_toy_model(const ModelConfig& config, std::uint64_t seed, double embed_norm) {
    config.validate();
    if (!(embed_norm > 0.0)) throw InputError("embedding norm must be positive");
    std::mt19937_64 rng(seed);
    ModelWeights w;
    for (const auto& [name, shape] : required_parameters(config)) {
        if (is_norm_gain(name)) {
            w.set(name, filled(shape, 1.0f));
        } else if (name == param::embed) {
            Tensor e = gaussian(shape, 1.0, rng);
            std::uniform_real_distribution<double> scale(0.8 * embed_norm, 1.2 * embed_norm);
            for (std::size_t r = 0; r < e.rows(); ++r) {
                auto row = e.row(r);
                const double n = l2_norm(std::span<const float>(row.data(), row.size()));
                const double target = scale(rng);
                for (float& v : row) v = static_cast<float>(v * target / n);
            }
            w.set(name, std::move(e));
        } else if (shape.size() == 1) {
            w.set(name, gaussian(shape, 0.02, rng));
        } else {
            w.set(name, gaussian(shape, 1.0 / std::sqrt(static_cast<double>(shape[0])), rng));
        }
    }
    return Model(config, std::move(w));
}

Model zero_toy_model(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    for (const auto& [name, shape] : required_parameters(config)) {
        w.set(name, is_norm_gain(name) ? filled(shape, 1.0f) : Tensor::zeros(shape));
    }
    return Model(config, std::move(w));
}

AgreementToy agreement_toy() {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 1;
    c.d_mlp = 8;
    c.vocab_size = 8;
    c.max_seq_len = 16;
    Model zero = zero_toy_model(c);
    ModelWeights w = zero.weights;

    Tensor& embed = w.get_mut(param::embed);
    for (std::size_t i = 0; i < c.vocab_size; ++i) embed(i, i) = 10.0f;

    const std::vector<int> singular_nouns = {1, 2}, plural_nouns = {3, 4};
    const std::vector<int> singular_verbs = {5, 6}, plural_verbs = {7};
    Tensor& unembed = w.get_mut(param::unembed);
    for (int n : singular_nouns) unembed(0, static_cast<std::size_t>(n)) = 2.0f;
    for (int n : plural_nouns) unembed(0, static_cast<std::size_t>(n)) = 2.0f;
    for (int n : singular_nouns) {
        for (int v : singular_verbs) unembed(static_cast<std::size_t>(n), static_cast<std::size_t>(v)) = 4.0f;
    }
    for (int n : plural_nouns) {
        for (int v : plural_verbs) unembed(static_cast<std::size_t>(n), static_cast<std::size_t>(v)) = 4.0f;
    }

    AgreementToy toy{Model(c, std::move(w)), {}};
    for (int n : singular_nouns) {
        for (int v : singular_verbs) toy.pairs.push_back({{0, n, v}, {0, n, plural_verbs[0]}});
    }
    for (int n : plural_nouns) {
        for (int v : singular_verbs) toy.pairs.push_back({{0, n, plural_verbs[0]}, {0, n, v}});
    }
    return toy;
}

namespace {

void annotate_record(DatasetRecord& r, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> step(-1, 1);
    std::vector<int> pos, depth;
    int d = 0;
    for (int tok : r.tokens) {
        pos.push_back(tok % static_cast<int>(kPosClasses));
        depth.push_back(d);
        d = std::clamp(d + step(rng), 0, 6);
    }
    r.pos = std::move(pos);
    r.depth = std::move(depth);
}

void check_lengths(std::size_t min_len, std::size_t max_len) {
    if (min_len < 2 || max_len < min_len) throw InputError("toy corpus needs 2 <= min_len <= max_len");
}

// Draws the next token from softmax(logits of the last position).
int sample_next(const Model& model, const std::vector<int>& prefix, std::mt19937_64& rng) {
    const Tensor logits = forward(model, prefix).logits;
    auto last = logits.row(logits.rows() - 1);
    std::vector<double> p(last.begin(), last.end());
    const double mx = *std::max_element(p.begin(), p.end());
    for (double& v : p) v = std::exp(v - mx);
    std::discrete_distribution<int> dist(p.begin(), p.end());
    return dist(rng);
}

} // namespace

TokenizedDataset toy_corpus(std::size_t n_sentences, std::size_t min_len, std::size_t max_len,
                            std::size_t vocab_size, std::uint64_t seed, bool annotate) {
    check_lengths(min_len, max_len);
    if (vocab_size == 0) throw InputError("toy corpus needs a nonempty vocabulary");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> len_dist(min_len, max_len);
    std::uniform_int_distribution<int> tok_dist(0, static_cast<int>(vocab_size) - 1);
    TokenizedDataset ds;
    for (std::size_t s = 0; s < n_sentences; ++s) {
        DatasetRecord r;
        r.id = "s" + std::to_string(s);
        const std::size_t n = len_dist(rng);
        for (std::size_t t = 0; t < n; ++t) r.tokens.push_back(tok_dist(rng));
        if (annotate) annotate_record(r, rng);
        ds.records.push_back(std::move(r));
    }
    return ds;
}

TokenizedDataset sample_corpus(const Model& model, std::size_t n_sentences, std::size_t min_len,
                               std::size_t max_len, std::uint64_t seed, bool annotate) {
    check_lengths(min_len, max_len);
    if (max_len > model.config.max_seq_len) throw InputError("toy corpus sentences exceed max_seq_len");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> len_dist(min_len, max_len);
    std::uniform_int_distribution<int> first(0, static_cast<int>(model.config.vocab_size) - 1);
    TokenizedDataset ds;
    for (std::size_t s = 0; s < n_sentences; ++s) {
        DatasetRecord r;
        r.id = "s" + std::to_string(s);
        const std::size_t n = len_dist(rng);
        r.tokens.push_back(first(rng));
        while (r.tokens.size() < n) r.tokens.push_back(sample_next(model, r.tokens, rng));
        if (annotate) annotate_record(r, rng);
        ds.records.push_back(std::move(r));
    }
    return ds;
}

TokenizedDataset sample_pairs(const Model& model, std::size_t n_pairs, std::size_t length, std::uint64_t seed) {
    if (length < 2) throw InputError("toy pairs need at least 2 tokens");
    if (length > model.config.max_seq_len) throw InputError("toy pairs exceed max_seq_len");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> first(0, static_cast<int>(model.config.vocab_size) - 1);
    std::vector<MinimalPair> pairs;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        MinimalPair p;
        p.good_tokens.push_back(first(rng));
        while (p.good_tokens.size() < length) p.good_tokens.push_back(sample_next(model, p.good_tokens, rng));
        const std::vector<int> prefix(p.good_tokens.begin(), p.good_tokens.end() - 1);
        const Tensor logits = forward(model, prefix).logits;
        auto last = logits.row(logits.rows() - 1);
        const int worst = static_cast<int>(std::min_element(last.begin(), last.end()) - last.begin());
        const int good = p.good_tokens.back();
        p.bad_tokens = p.good_tokens;
        // Ties with the sampled token would make the pair unscorable; pick the next-worst instead.
        if (worst != good) {
            p.bad_tokens.back() = worst;
        } else {
            int alt = -1;
            for (std::size_t v = 0; v < last.size(); ++v) {
                if (static_cast<int>(v) == good) continue;
                if (alt < 0 || last[v] < last[static_cast<std::size_t>(alt)]) alt = static_cast<int>(v);
            }
            p.bad_tokens.back() = alt;
        }
        pairs.push_back(std::move(p));
    }
    return pairs_dataset(pairs);
}

TokenizedDataset toy_pairs(std::size_t n_pairs, std::size_t length, std::size_t vocab_size, std::uint64_t seed) {
    if (length < 2) throw InputError("toy pairs need at least 2 tokens");
    if (vocab_size < 2) throw InputError("toy pairs need at least 2 vocabulary entries");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> tok_dist(0, static_cast<int>(vocab_size) - 1);
    std::uniform_int_distribution<int> shift(1, static_cast<int>(vocab_size) - 1);
    std::vector<MinimalPair> pairs;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        MinimalPair p;
        for (std::size_t t = 0; t < length; ++t) p.good_tokens.push_back(tok_dist(rng));
        p.bad_tokens = p.good_tokens;
        p.bad_tokens.back() = (p.good_tokens.back() + shift(rng)) % static_cast<int>(vocab_size);
        pairs.push_back(std::move(p));
    }
    return pairs_dataset(pairs);
}

TokenizedDataset pairs_dataset(const std::vector<MinimalPair>& pairs) {
    TokenizedDataset ds;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        DatasetRecord r;
        r.id = "p" + std::to_string(i);
        r.pair = pairs[i];
        ds.records.push_back(std::move(r));
    }
    return ds;
}

} // namespace dirmag
