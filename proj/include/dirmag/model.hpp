#pragma once

#include "dirmag/tensor.hpp"

#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dirmag {

enum class NormType { layernorm, rmsnorm };
enum class ResidualTopology { parallel, sequential };

std::string to_string(NormType t);
std::string to_string(ResidualTopology t);
NormType parse_norm_type(const std::string& s);
ResidualTopology parse_topology(const std::string& s);

struct ModelConfig {
    std::size_t n_layers = 1;
    std::size_t d_model = 4;
    std::size_t n_heads = 1;
    std::size_t d_mlp = 16;
    std::size_t vocab_size = 8;
    NormType norm_type = NormType::layernorm;
    ResidualTopology topology = ResidualTopology::parallel;
    double rotary_fraction = 0.25;  // share of each head's dims that are rotated
    double rotary_base = 10000.0;
    std::size_t max_seq_len = 2048;
    double norm_eps = 1e-5;

    std::size_t d_head() const { return d_model / n_heads; }
    // Number of rotated dims per head (even).
    std::size_t rotary_dims() const;
    void validate() const;
};

// Parameter names used by the container format.
namespace param {
inline constexpr const char* embed = "embed.weight";
inline constexpr const char* unembed = "unembed.weight";
inline constexpr const char* final_norm_weight = "final_norm.weight";
inline constexpr const char* final_norm_bias = "final_norm.bias";
std::string layer(std::size_t index, const char* suffix);
} // namespace param

// Named parameter tensors. Every tensor the config requires must be present
// with exactly its expected shape; validate() enforces that.
class ModelWeights {
public:
    ModelWeights() = default;
    explicit ModelWeights(std::map<std::string, Tensor> tensors) : tensors_(std::move(tensors)) {}

    const Tensor& get(const std::string& name) const;
    Tensor& get_mut(const std::string& name);
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }
    const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }

    void validate(const ModelConfig& config) const;

private:
    std::map<std::string, Tensor> tensors_;
};

// Expected (name, shape) pairs for a config.
std::vector<std::pair<std::string, std::vector<std::size_t>>> required_parameters(const ModelConfig& config);

// A config plus weights that have been checked against it.
struct Model {
    ModelConfig config;
    ModelWeights weights;

    Model(ModelConfig c, ModelWeights w);
};

enum class Site { resid_pre, attn_probs, attn_out, norm1_out, norm2_out, resid_post, final_logits };

std::string to_string(Site s);
Site parse_site(const std::string& s);

struct HookContext {
    std::size_t layer = 0;
    Site site = Site::resid_pre;
    std::size_t n_tokens = 0;
};

// A hook receives the activation at its site and returns a replacement of the
// same shape. final_logits hooks ignore `layer`.
using HookFn = std::function<Tensor(Tensor, const HookContext&)>;

struct Hook {
    std::size_t layer = 0;
    Site site = Site::resid_pre;
    HookFn fn;
};

using HookSet = std::vector<Hook>;
using CaptureSet = std::set<Site>;

struct LayerTrace {
    Tensor resid_pre;    // [seq x d_model]
    Tensor attn_probs;   // [heads x seq x seq]
    Tensor attn_out;     // [seq x d_model]
    Tensor norm1_out;    // [seq x d_model]
    Tensor norm2_out;    // [seq x d_model]
    Tensor resid_post;   // [seq x d_model]

    const Tensor& at(Site s) const;
};

// Captured activations. Tensors for sites outside the capture set stay empty.
struct ForwardTrace {
    std::vector<LayerTrace> layers;
    CaptureSet captured;

    bool has(Site s) const { return captured.count(s) != 0; }
    const Tensor& at(std::size_t layer, Site s) const;
};

struct ForwardResult {
    Tensor logits;  // [seq x vocab]
    ForwardTrace trace;
};

ForwardResult forward(const ModelWeights& weights, const ModelConfig& config, std::span<const int> tokens,
                      const HookSet& hooks = {}, const CaptureSet& capture = {});
ForwardResult forward(const Model& model, std::span<const int> tokens, const HookSet& hooks = {},
                      const CaptureSet& capture = {});

// Non-owning view of one layer's parameters.
struct LayerWeights {
    const Tensor* norm1_weight = nullptr;
    const Tensor* norm1_bias = nullptr;
    const Tensor* norm2_weight = nullptr;
    const Tensor* norm2_bias = nullptr;
    const Tensor* qkv_weight = nullptr;  // [d_model x 3*d_model], columns q | k | v
    const Tensor* qkv_bias = nullptr;
    const Tensor* out_weight = nullptr;  // [d_model x d_model]
    const Tensor* out_bias = nullptr;
    const Tensor* up_weight = nullptr;   // [d_model x d_mlp]
    const Tensor* up_bias = nullptr;
    const Tensor* down_weight = nullptr; // [d_mlp x d_model]
    const Tensor* down_bias = nullptr;
};

LayerWeights layer_weights(const ModelWeights& weights, const ModelConfig& config, std::size_t layer);

using SiteTransform = std::function<Tensor(Tensor)>;

// Causal multi-head attention over normalized input rows at absolute positions
// position_offset .. position_offset + seq - 1. `probs_hook` sees the
// [heads x seq x seq] probabilities before value mixing; `out_hook` sees the
// projected output.
Tensor attention_block(const Tensor& x_normed, const LayerWeights& lw, const ModelConfig& config,
                       std::size_t position_offset = 0, const SiteTransform& probs_hook = {},
                       const SiteTransform& out_hook = {}, Tensor* probs_out = nullptr);

Tensor mlp_block(const Tensor& x_normed, const LayerWeights& lw);

// Applies the configured norm to every row of x.
Tensor normalize_rows(const Tensor& x, const Tensor& gain, const Tensor* bias, const ModelConfig& config);

// Rotates (x0, x1) by position * base^(-2 * dim_index / rotary_dims).
std::pair<double, double> rotary_apply(std::pair<double, double> pair, std::size_t position,
                                       std::size_t dim_index, std::size_t rotary_dims, double base);
std::pair<double, double> rotary_apply(std::pair<double, double> pair, std::size_t position,
                                       std::size_t dim_index, const ModelConfig& config);

} // namespace dirmag
