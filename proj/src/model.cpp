#include "dirmag/model.hpp"

#include "dirmag/errors.hpp"

#include <cmath>
#include <limits>

namespace dirmag {

std::string to_string(NormType t) { return t == NormType::layernorm ? "layernorm" : "rmsnorm"; }

std::string to_string(ResidualTopology t) { return t == ResidualTopology::parallel ? "parallel" : "sequential"; }

NormType parse_norm_type(const std::string& s) {
    if (s == "layernorm") return NormType::layernorm;
    if (s == "rmsnorm") return NormType::rmsnorm;
    throw ConfigError("unknown norm_type '" + s + "'");
}

ResidualTopology parse_topology(const std::string& s) {
    if (s == "parallel") return ResidualTopology::parallel;
    if (s == "sequential") return ResidualTopology::sequential;
    throw ConfigError("unknown residual_topology '" + s + "'");
}

std::string to_string(Site s) {
    switch (s) {
    case Site::resid_pre: return "resid_pre";
    case Site::attn_probs: return "attn_probs";
    case Site::attn_out: return "attn_out";
    case Site::norm1_out: return "norm1_out";
    case Site::norm2_out: return "norm2_out";
    case Site::resid_post: return "resid_post";
    case Site::final_logits: return "final_logits";
    }
    return "?";
}

Site parse_site(const std::string& s) {
    for (Site site : {Site::resid_pre, Site::attn_probs, Site::attn_out, Site::norm1_out, Site::norm2_out,
                      Site::resid_post, Site::final_logits}) {
        if (to_string(site) == s) return site;
    }
    throw ConfigError("unknown hook site '" + s + "'");
}

std::size_t ModelConfig::rotary_dims() const {
    const double raw = rotary_fraction * static_cast<double>(d_head());
    return static_cast<std::size_t>(std::llround(raw));
}

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || vocab_size == 0 || max_seq_len == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (!(rotary_fraction > 0.0 && rotary_fraction <= 1.0)) throw ConfigError("rotary_fraction must lie in (0, 1]");
    const double raw = rotary_fraction * static_cast<double>(d_head());
    const auto rot = rotary_dims();
    if (std::fabs(raw - static_cast<double>(rot)) > 1e-9 || rot % 2 != 0 || rot == 0) {
        throw ConfigError("rotary_fraction * d_head must be a positive even integer");
    }
    if (!(rotary_base > 0.0)) throw ConfigError("rotary_base must be positive");
    if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
    if (norm_type == NormType::layernorm && d_model < 2) throw ConfigError("layernorm needs d_model >= 2");
}

std::string param::layer(std::size_t index, const char* suffix) {
    return "layers." + std::to_string(index) + "." + suffix;
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> required_parameters(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    const bool ln = c.norm_type == NormType::layernorm;
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    out.push_back({param::embed, {c.vocab_size, d}});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        out.push_back({param::layer(l, "norm1.weight"), {d}});
        if (ln) out.push_back({param::layer(l, "norm1.bias"), {d}});
        out.push_back({param::layer(l, "norm2.weight"), {d}});
        if (ln) out.push_back({param::layer(l, "norm2.bias"), {d}});
        out.push_back({param::layer(l, "attn.qkv.weight"), {d, 3 * d}});
        out.push_back({param::layer(l, "attn.qkv.bias"), {3 * d}});
        out.push_back({param::layer(l, "attn.out.weight"), {d, d}});
        out.push_back({param::layer(l, "attn.out.bias"), {d}});
        out.push_back({param::layer(l, "mlp.up.weight"), {d, c.d_mlp}});
        out.push_back({param::layer(l, "mlp.up.bias"), {c.d_mlp}});
        out.push_back({param::layer(l, "mlp.down.weight"), {c.d_mlp, d}});
        out.push_back({param::layer(l, "mlp.down.bias"), {d}});
    }
    out.push_back({param::final_norm_weight, {d}});
    if (ln) out.push_back({param::final_norm_bias, {d}});
    out.push_back({param::unembed, {d, c.vocab_size}});
    return out;
}

const Tensor& ModelWeights::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw InputError("missing weight '" + name + "'");
    return it->second;
}

Tensor& ModelWeights::get_mut(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw InputError("missing weight '" + name + "'");
    return it->second;
}

void ModelWeights::validate(const ModelConfig& config) const {
    config.validate();
    for (const auto& [name, shape] : required_parameters(config)) {
        const Tensor& t = get(name);
        if (t.shape() != shape) {
            throw DimensionError("weight '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                                 shape_string(shape));
        }
        if (!all_finite(t.data())) throw InputError("weight '" + name + "' contains non-finite values");
    }
}

Model::Model(ModelConfig c, ModelWeights w) : config(std::move(c)), weights(std::move(w)) {
    weights.validate(config);
}

const Tensor& LayerTrace::at(Site s) const {
    switch (s) {
    case Site::resid_pre: return resid_pre;
    case Site::attn_probs: return attn_probs;
    case Site::attn_out: return attn_out;
    case Site::norm1_out: return norm1_out;
    case Site::norm2_out: return norm2_out;
    case Site::resid_post: return resid_post;
    case Site::final_logits: break;
    }
    throw InputError("final_logits is not a per-layer site");
}

const Tensor& ForwardTrace::at(std::size_t layer, Site s) const {
    if (!has(s)) throw InputError("site " + to_string(s) + " was not captured");
    if (layer >= layers.size()) throw InputError("layer " + std::to_string(layer) + " out of range");
    return layers[layer].at(s);
}

LayerWeights layer_weights(const ModelWeights& w, const ModelConfig& c, std::size_t l) {
    LayerWeights lw;
    const bool ln = c.norm_type == NormType::layernorm;
    lw.norm1_weight = &w.get(param::layer(l, "norm1.weight"));
    lw.norm1_bias = ln ? &w.get(param::layer(l, "norm1.bias")) : nullptr;
    lw.norm2_weight = &w.get(param::layer(l, "norm2.weight"));
    lw.norm2_bias = ln ? &w.get(param::layer(l, "norm2.bias")) : nullptr;
    lw.qkv_weight = &w.get(param::layer(l, "attn.qkv.weight"));
    lw.qkv_bias = &w.get(param::layer(l, "attn.qkv.bias"));
    lw.out_weight = &w.get(param::layer(l, "attn.out.weight"));
    lw.out_bias = &w.get(param::layer(l, "attn.out.bias"));
    lw.up_weight = &w.get(param::layer(l, "mlp.up.weight"));
    lw.up_bias = &w.get(param::layer(l, "mlp.up.bias"));
    lw.down_weight = &w.get(param::layer(l, "mlp.down.weight"));
    lw.down_bias = &w.get(param::layer(l, "mlp.down.bias"));
    return lw;
}

Tensor normalize_rows(const Tensor& x, const Tensor& gain, const Tensor* bias, const ModelConfig& config) {
    Tensor out(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::vector<float> normed = config.norm_type == NormType::layernorm
                                        ? layer_norm(x.row(r), gain.data(), bias->data(), config.norm_eps)
                                        : rms_norm(x.row(r), gain.data(), config.norm_eps);
        std::copy(normed.begin(), normed.end(), out.row(r).begin());
    }
    return out;
}

std::pair<double, double> rotary_apply(std::pair<double, double> pair, std::size_t position,
                                       std::size_t dim_index, std::size_t rotary_dims, double base) {
    const double inv_freq =
        std::pow(base, -2.0 * static_cast<double>(dim_index) / static_cast<double>(rotary_dims));
    const double angle = static_cast<double>(position) * inv_freq;
    const double c = std::cos(angle), s = std::sin(angle);
    return {pair.first * c - pair.second * s, pair.first * s + pair.second * c};
}

std::pair<double, double> rotary_apply(std::pair<double, double> pair, std::size_t position,
                                       std::size_t dim_index, const ModelConfig& config) {
    const std::size_t rot = config.rotary_dims();
    if (dim_index >= rot / 2) throw DimensionError("rotary dim_index outside the rotary range");
    return rotary_apply(pair, position, dim_index, rot, config.rotary_base);
}

namespace {

// NeoX-style rotate-half: element i pairs with i + rot/2 inside the first
// `rot` dims of the head.
void rotate_head(std::span<float> head, std::size_t position, std::size_t rot, double base) {
    const std::size_t half = rot / 2;
    for (std::size_t i = 0; i < half; ++i) {
        auto [a, b] = rotary_apply({head[i], head[i + half]}, position, i, rot, base);
        head[i] = static_cast<float>(a);
        head[i + half] = static_cast<float>(b);
    }
}

Tensor apply_transform(const SiteTransform& fn, Tensor t) {
    if (!fn) return t;
    const auto shape = t.shape();
    Tensor replaced = fn(std::move(t));
    if (replaced.shape() != shape) {
        throw InterventionError("hook returned shape " + shape_string(replaced.shape()) + ", expected " +
                                shape_string(shape));
    }
    return replaced;
}

} // namespace

Tensor attention_block(const Tensor& x_normed, const LayerWeights& lw, const ModelConfig& config,
                       std::size_t position_offset, const SiteTransform& probs_hook, const SiteTransform& out_hook,
                       Tensor* probs_out) {
    const std::size_t seq = x_normed.rows();
    const std::size_t d = config.d_model;
    const std::size_t heads = config.n_heads;
    const std::size_t dh = config.d_head();
    const std::size_t rot = config.rotary_dims();
    if (x_normed.cols() != d) throw DimensionError("attention input width differs from d_model");

    Tensor qkv = matmul(x_normed, *lw.qkv_weight);
    add_row_bias(qkv, lw.qkv_bias->data());

    // Split into per-head q and k copies and rotate their leading dims.
    std::vector<float> q(seq * d), k(seq * d);
    for (std::size_t t = 0; t < seq; ++t) {
        auto row = qkv.row(t);
        std::copy(row.begin(), row.begin() + d, q.begin() + t * d);
        std::copy(row.begin() + d, row.begin() + 2 * d, k.begin() + t * d);
        for (std::size_t h = 0; h < heads; ++h) {
            rotate_head(std::span<float>(q).subspan(t * d + h * dh, dh), position_offset + t, rot, config.rotary_base);
            rotate_head(std::span<float>(k).subspan(t * d + h * dh, dh), position_offset + t, rot, config.rotary_base);
        }
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor probs({heads, seq, seq});
    auto pd = probs.data();
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < seq; ++t) {
            auto prow = pd.subspan((h * seq + t) * seq, seq);
            for (std::size_t j = 0; j <= t; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < dh; ++i) {
                    s += static_cast<double>(q[t * d + h * dh + i]) * k[j * d + h * dh + i];
                }
                prow[j] = static_cast<float>(s * scale);
            }
            softmax_inplace(prow.subspan(0, t + 1));
            for (std::size_t j = t + 1; j < seq; ++j) prow[j] = 0.0f;
        }
    }
    probs = apply_transform(probs_hook, std::move(probs));
    if (probs_out) *probs_out = probs;

    Tensor mixed({seq, d});
    pd = probs.data();
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < seq; ++t) {
            auto prow = pd.subspan((h * seq + t) * seq, seq);
            for (std::size_t i = 0; i < dh; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < seq; ++j) {
                    if (prow[j] == 0.0f) continue;
                    acc += static_cast<double>(prow[j]) * qkv(j, 2 * d + h * dh + i);
                }
                mixed(t, h * dh + i) = static_cast<float>(acc);
            }
        }
    }

    Tensor out = matmul(mixed, *lw.out_weight);
    add_row_bias(out, lw.out_bias->data());
    return apply_transform(out_hook, std::move(out));
}

Tensor mlp_block(const Tensor& x_normed, const LayerWeights& lw) {
    Tensor hidden = matmul(x_normed, *lw.up_weight);
    add_row_bias(hidden, lw.up_bias->data());
    for (float& v : hidden.data()) v = gelu(v);
    Tensor out = matmul(hidden, *lw.down_weight);
    add_row_bias(out, lw.down_bias->data());
    return out;
}

namespace {

class HookTable {
public:
    HookTable(const HookSet& hooks, std::size_t n_layers) : per_layer_(n_layers) {
        for (const Hook& h : hooks) {
            if (!h.fn) continue;
            if (h.site == Site::final_logits) {
                final_.push_back(&h);
                continue;
            }
            if (h.layer >= n_layers) {
                throw InterventionError("hook layer " + std::to_string(h.layer) + " out of range");
            }
            per_layer_[h.layer].push_back(&h);
        }
    }

    bool any(std::size_t layer, Site site) const {
        if (site == Site::final_logits) return !final_.empty();
        for (const Hook* h : per_layer_[layer]) {
            if (h->site == site) return true;
        }
        return false;
    }

    // Runs matching hooks in declaration order.
    Tensor apply(std::size_t layer, Site site, Tensor t) const {
        const auto& list = site == Site::final_logits ? final_ : per_layer_[layer];
        for (const Hook* h : list) {
            if (h->site != site) continue;
            const auto shape = t.shape();
            // attn_probs is [heads x seq x seq]; everything else is [seq x width].
            HookContext ctx{layer, site, t.rank() == 3 ? shape[1] : shape[0]};
            Tensor replaced = h->fn(std::move(t), ctx);
            if (replaced.shape() != shape) {
                throw InterventionError("hook at layer " + std::to_string(layer) + " site " + to_string(site) +
                                        " returned shape " + shape_string(replaced.shape()) + ", expected " +
                                        shape_string(shape));
            }
            if (!all_finite(replaced.data())) {
                throw InterventionError("hook at " + to_string(site) + " produced non-finite values");
            }
            t = std::move(replaced);
        }
        return t;
    }

    SiteTransform transform(std::size_t layer, Site site) const {
        if (!any(layer, site)) return {};
        return [this, layer, site](Tensor t) { return apply(layer, site, std::move(t)); };
    }

private:
    std::vector<std::vector<const Hook*>> per_layer_;
    std::vector<const Hook*> final_;
};

} // namespace

ForwardResult forward(const ModelWeights& weights, const ModelConfig& config, std::span<const int> tokens,
                      const HookSet& hooks, const CaptureSet& capture) {
    const std::size_t seq = tokens.size();
    if (seq == 0) throw InputError("empty token sequence");
    if (seq > config.max_seq_len) {
        throw InputError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
    }
    for (int tok : tokens) {
        if (tok < 0 || static_cast<std::size_t>(tok) >= config.vocab_size) {
            throw InputError("token id " + std::to_string(tok) + " outside vocabulary of " +
                             std::to_string(config.vocab_size));
        }
    }

    const HookTable table(hooks, config.n_layers);
    const std::size_t d = config.d_model;
    const Tensor& embed = weights.get(param::embed);

    Tensor x({seq, d});
    for (std::size_t t = 0; t < seq; ++t) {
        auto src = embed.row(static_cast<std::size_t>(tokens[t]));
        std::copy(src.begin(), src.end(), x.row(t).begin());
    }

    ForwardResult result;
    result.trace.captured = capture;
    result.trace.layers.resize(config.n_layers);
    auto keep = [&](Site s) { return capture.count(s) != 0; };

    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const LayerWeights lw = layer_weights(weights, config, l);
        LayerTrace& lt = result.trace.layers[l];

        Tensor resid = table.apply(l, Site::resid_pre, std::move(x));
        if (keep(Site::resid_pre)) lt.resid_pre = resid;

        Tensor n1 = table.apply(l, Site::norm1_out, normalize_rows(resid, *lw.norm1_weight, lw.norm1_bias, config));
        if (keep(Site::norm1_out)) lt.norm1_out = n1;

        Tensor probs;
        Tensor attn = attention_block(n1, lw, config, 0, table.transform(l, Site::attn_probs),
                                      table.transform(l, Site::attn_out),
                                      keep(Site::attn_probs) ? &probs : nullptr);
        if (keep(Site::attn_probs)) lt.attn_probs = std::move(probs);
        if (keep(Site::attn_out)) lt.attn_out = attn;

        if (config.topology == ResidualTopology::parallel) {
            Tensor n2 =
                table.apply(l, Site::norm2_out, normalize_rows(resid, *lw.norm2_weight, lw.norm2_bias, config));
            if (keep(Site::norm2_out)) lt.norm2_out = n2;
            Tensor mlp = mlp_block(n2, lw);
            x = std::move(resid);
            add_inplace(x, attn);
            add_inplace(x, mlp);
        } else {
            Tensor mid = std::move(resid);
            add_inplace(mid, attn);
            Tensor n2 = table.apply(l, Site::norm2_out, normalize_rows(mid, *lw.norm2_weight, lw.norm2_bias, config));
            if (keep(Site::norm2_out)) lt.norm2_out = n2;
            Tensor mlp = mlp_block(n2, lw);
            x = std::move(mid);
            add_inplace(x, mlp);
        }

        x = table.apply(l, Site::resid_post, std::move(x));
        if (keep(Site::resid_post)) lt.resid_post = x;
    }

    const Tensor* final_bias = config.norm_type == NormType::layernorm ? &weights.get(param::final_norm_bias) : nullptr;
    Tensor normed = normalize_rows(x, weights.get(param::final_norm_weight), final_bias, config);
    result.logits = table.apply(0, Site::final_logits, matmul(normed, weights.get(param::unembed)));
    if (!all_finite(result.logits.data())) throw InputError("forward produced non-finite logits");
    return result;
}

ForwardResult forward(const Model& model, std::span<const int> tokens, const HookSet& hooks,
                      const CaptureSet& capture) {
    return forward(model.weights, model.config, tokens, hooks, capture);
}

} // namespace dirmag
