#pragma once

#include "dirmag/model.hpp"
#include "dirmag/tensor.hpp"
#include "dirmag/toy.hpp"
#include "dirmag/weights_io.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

namespace testutil {

class TempDir {
public:
    explicit TempDir(const std::string& tag = "dirmag") {
        static std::atomic<unsigned> counter{0};
        const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<double> gaussian_vector(std::size_t d, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(d);
    for (double& x : v) x = n(rng);
    return v;
}

inline double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline double max_abs_diff(const dirmag::Tensor& a, const dirmag::Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
    return m;
}

// The fixed integer-weight decoder mirrored by tests/oracles/forward_oracle.py.
inline dirmag::Model oracle_model() {
    using dirmag::Tensor;
    dirmag::ModelConfig c;
    c.n_layers = 1;
    c.d_model = 4;
    c.n_heads = 1;
    c.d_mlp = 4;
    c.vocab_size = 5;
    c.norm_type = dirmag::NormType::layernorm;
    c.topology = dirmag::ResidualTopology::parallel;
    c.rotary_fraction = 0.5;
    c.rotary_base = 10000.0;
    c.max_seq_len = 8;
    c.norm_eps = 1e-5;

    auto mat = [](int p, std::size_t rows, std::size_t cols) {
        Tensor t({rows, cols});
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                const int ii = static_cast<int>(i), jj = static_cast<int>(j);
                t(i, j) = static_cast<float>(((2 * ii * ii + 3 * jj + 5 * p + ii * jj) % 5) - 2);
            }
        }
        return t;
    };
    auto small = [](int p, std::size_t rows, std::size_t cols) {
        Tensor t({rows, cols});
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                t(i, j) = static_cast<float>(((static_cast<int>(i) + 2 * static_cast<int>(j) + p) % 3) - 1);
            }
        }
        return t;
    };
    auto flat = [](Tensor t) { return Tensor({t.size()}, t.values()); };
    auto gain = [](int p, std::size_t n) {
        Tensor t({n});
        for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<float>(1 + ((static_cast<int>(i) + p) % 2));
        return t;
    };
    auto bias = [](int p, std::size_t n) {
        Tensor t({n});
        for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<float>(((static_cast<int>(i) + p) % 3) - 1);
        return t;
    };

    dirmag::ModelWeights w;
    w.set(dirmag::param::embed, mat(0, 5, 4));
    w.set(dirmag::param::layer(0, "norm1.weight"), gain(1, 4));
    w.set(dirmag::param::layer(0, "norm1.bias"), bias(2, 4));
    w.set(dirmag::param::layer(0, "norm2.weight"), gain(3, 4));
    w.set(dirmag::param::layer(0, "norm2.bias"), bias(4, 4));
    w.set(dirmag::param::layer(0, "attn.qkv.weight"), small(5, 4, 12));
    w.set(dirmag::param::layer(0, "attn.qkv.bias"), flat(small(6, 1, 12)));
    w.set(dirmag::param::layer(0, "attn.out.weight"), mat(7, 4, 4));
    w.set(dirmag::param::layer(0, "attn.out.bias"), flat(mat(8, 1, 4)));
    w.set(dirmag::param::layer(0, "mlp.up.weight"), mat(9, 4, 4));
    w.set(dirmag::param::layer(0, "mlp.up.bias"), flat(mat(10, 1, 4)));
    w.set(dirmag::param::layer(0, "mlp.down.weight"), mat(11, 4, 4));
    w.set(dirmag::param::layer(0, "mlp.down.bias"), flat(mat(12, 1, 4)));
    w.set(dirmag::param::final_norm_weight, gain(13, 4));
    w.set(dirmag::param::final_norm_bias, bias(14, 4));
    w.set(dirmag::param::unembed, mat(15, 4, 5));
    return dirmag::Model(c, std::move(w));
}

inline const std::vector<int>& oracle_tokens() {
    static const std::vector<int> tokens = {3, 1, 2};
    return tokens;
}

// Frozen output of tests/oracles/forward_oracle.py.
inline const std::vector<std::vector<double>>& oracle_probs() {
    static const std::vector<std::vector<double>> p = {
        {1.000000000, 0.000000000, 0.000000000},
        {0.991164322, 0.008835678, 0.000000000},
        {0.135320512, 0.007481126, 0.857198363},
    };
    return p;
}

inline const std::vector<std::vector<double>>& oracle_logits() {
    static const std::vector<std::vector<double>> l = {
        {-9.720650643, 4.106017055, -3.430249010, 5.219723597, -2.250463523},
        {0.702502194, 9.004440073, 2.770217804, -2.268577772, -0.783037789},
        {-6.079692088, 4.876930885, -7.022313034, -2.527241536, -4.303466812},
    };
    return l;
}

// Small random decoder for property tests: 2 layers, d_model 8, 2 heads.
inline dirmag::Model tiny_random_model(std::uint64_t seed, dirmag::NormType norm = dirmag::NormType::layernorm,
                                       dirmag::ResidualTopology topology = dirmag::ResidualTopology::parallel) {
    dirmag::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 16;
    c.vocab_size = 11;
    c.norm_type = norm;
    c.topology = topology;
    c.rotary_fraction = 0.5;
    c.max_seq_len = 16;
    return dirmag::random_toy_model(c, seed, 4.0);
}

// Writes a desk model (seed 7), sampled lm/pairs/probe datasets and returns a
// config with layers 0-1 perturbed; callers adjust it and pass it to
// write_config.
inline nlohmann::json desk_workspace(const std::filesystem::path& dir, std::size_t n_sentences,
                                     double embed_norm = 60.0) {
    const dirmag::Model m = dirmag::random_toy_model(dirmag::desk_config(), 7, embed_norm);
    dirmag::save_model(dir / "model.gptc", m);
    dirmag::save_dataset(dir / "lm.jsonl", dirmag::sample_corpus(m, n_sentences, 8, 16, 8, false));
    dirmag::save_dataset(dir / "pairs.jsonl", dirmag::sample_pairs(m, 12, 6, 9));
    dirmag::save_dataset(dir / "probe.jsonl", dirmag::sample_corpus(m, 30, 8, 16, 10, true));
    return {{"model", "model.gptc"},
            {"datasets", {{"lm", "lm.jsonl"}, {"pairs", "pairs.jsonl"}, {"probe", "probe.jsonl"}}},
            {"perturb_layers", {0, 1}},
            {"output_dir", "results"}};
}

inline std::filesystem::path write_config(const std::filesystem::path& dir, const nlohmann::json& j,
                                          const std::string& name = "config.json") {
    const auto path = dir / name;
    std::ofstream(path, std::ios::trunc) << j.dump(2) << '\n';
    return path;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace testutil
