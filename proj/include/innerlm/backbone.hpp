#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "innerlm/kvcache.hpp"
#include "innerlm/tensor.hpp"

namespace innerlm {

struct BackboneConfig {
    int vocab_size = 512;
    int d_model = 128;
    int n_layers = 8;
    int n_heads = 4;
    int ffn_hidden = 512;
    int max_seq_len = 256;
    uint64_t seed = 20240901;
    float rope_base = 10000.0f;

    void validate() const {
        if (n_layers < 1) throw ValueError("backbone config: n_layers must be >= 1");
        if (d_model % n_heads != 0) throw ValueError("backbone config: d_model not divisible by n_heads");
        if (vocab_size < 2 || d_model < 2 || ffn_hidden < 1 || max_seq_len < 2)
            throw ValueError("backbone config: sizes out of range");
    }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                       {"n_layers", c.n_layers},    {"n_heads", c.n_heads},
                       {"ffn_hidden", c.ffn_hidden}, {"max_seq_len", c.max_seq_len},
                       {"seed", c.seed},            {"rope_base", c.rope_base}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("d_model").get_to(c.d_model);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("ffn_hidden").get_to(c.ffn_hidden);
    j.at("max_seq_len").get_to(c.max_seq_len);
    j.at("seed").get_to(c.seed);
    j.at("rope_base").get_to(c.rope_base);
}

// Pre-norm decoder layer: RMS-normed causal attention and SwiGLU feed-forward,
// each with a residual add.
template <typename S>
struct DecoderLayer {
    Tensor<S> attn_norm;            // [d]
    Tensor<S> wq, wk, wv, wo;       // [d x d]
    Tensor<S> ffn_norm;             // [d]
    Tensor<S> w_gate, w_up;         // [d x f]
    Tensor<S> w_down;               // [f x d]
};

template <typename S, typename Fn>
void visit_layer_params(DecoderLayer<S>& layer, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".attn_norm", layer.attn_norm);
    fn(prefix + ".wq", layer.wq);
    fn(prefix + ".wk", layer.wk);
    fn(prefix + ".wv", layer.wv);
    fn(prefix + ".wo", layer.wo);
    fn(prefix + ".ffn_norm", layer.ffn_norm);
    fn(prefix + ".w_gate", layer.w_gate);
    fn(prefix + ".w_up", layer.w_up);
    fn(prefix + ".w_down", layer.w_down);
}

template <typename S>
DecoderLayer<S> clone_layer(const DecoderLayer<S>& src) {
    DecoderLayer<S> out;
    out.attn_norm = src.attn_norm.clone();
    out.wq = src.wq.clone();
    out.wk = src.wk.clone();
    out.wv = src.wv.clone();
    out.wo = src.wo.clone();
    out.ffn_norm = src.ffn_norm.clone();
    out.w_gate = src.w_gate.clone();
    out.w_up = src.w_up.clone();
    out.w_down = src.w_down.clone();
    return out;
}

inline int64_t layer_param_count(const BackboneConfig& cfg) {
    const int64_t d = cfg.d_model, f = cfg.ffn_hidden;
    return 4 * d * d + 3 * d * f + 2 * d;
}

inline int64_t backbone_param_count(const BackboneConfig& cfg) {
    const int64_t v = cfg.vocab_size, d = cfg.d_model;
    return v * d + cfg.n_layers * layer_param_count(cfg) + d + d * v;
}

// The frozen language model: text embedding, decoder stack, text head.
template <typename S>
struct Backbone {
    BackboneConfig cfg;
    Tensor<S> el_text;                   // [V x d]
    std::vector<DecoderLayer<S>> layers;
    Tensor<S> final_norm;                // [d]
    Tensor<S> lh_text;                   // [d x V]

    int head_dim() const { return cfg.d_model / cfg.n_heads; }
};

template <typename S, typename Fn>
void visit_params(Backbone<S>& b, Fn&& fn) {
    fn("backbone.el_text", b.el_text);
    for (size_t i = 0; i < b.layers.size(); ++i)
        visit_layer_params(b.layers[i], "backbone.layer" + std::to_string(i), fn);
    fn("backbone.final_norm", b.final_norm);
    fn("backbone.lh_text", b.lh_text);
}

template <typename S>
DecoderLayer<S> build_layer(const BackboneConfig& cfg, Rng& rng) {
    const int d = cfg.d_model, f = cfg.ffn_hidden;
    const double wsigma = 1.0 / std::sqrt(static_cast<double>(d));
    DecoderLayer<S> layer;
    layer.attn_norm = Tensor<S>::full({d}, S(1));
    layer.wq = Tensor<S>::randn({d, d}, rng, wsigma);
    layer.wk = Tensor<S>::randn({d, d}, rng, wsigma);
    layer.wv = Tensor<S>::randn({d, d}, rng, wsigma);
    layer.wo = Tensor<S>::randn({d, d}, rng, wsigma);
    layer.ffn_norm = Tensor<S>::full({d}, S(1));
    layer.w_gate = Tensor<S>::randn({d, f}, rng, wsigma);
    layer.w_up = Tensor<S>::randn({d, f}, rng, wsigma);
    layer.w_down = Tensor<S>::randn({f, d}, rng, 1.0 / std::sqrt(static_cast<double>(f)));
    return layer;
}

template <typename S>
Backbone<S> build_backbone(const BackboneConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Backbone<S> b;
    b.cfg = cfg;
    b.el_text = Tensor<S>::randn({cfg.vocab_size, cfg.d_model}, rng, 0.05);
    b.layers.reserve(static_cast<size_t>(cfg.n_layers));
    for (int i = 0; i < cfg.n_layers; ++i) b.layers.push_back(build_layer<S>(cfg, rng));
    b.final_norm = Tensor<S>::full({cfg.d_model}, S(1));
    b.lh_text = Tensor<S>::randn({cfg.d_model, cfg.vocab_size}, rng,
                                 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    return b;
}

// One decoder layer over [T x d] hidden rows. With a cache the call appends T
// new positions and attends over everything cached; caching is inference-only.
template <typename S>
Tensor<S> layer_forward(Tape<S>* tape, const DecoderLayer<S>& layer, const Tensor<S>& hidden,
                        const BackboneConfig& cfg, LayerKV<S>* cache) {
    const int t = hidden.dim(0);
    const int d = cfg.d_model;
    if (hidden.rank() != 2 || hidden.dim(1) != d)
        throw DimensionError("layer_forward: hidden shape " + shape_str(hidden.shape()) +
                             " does not match d_model " + std::to_string(d));
    const int pos0 = cache ? cache->len : 0;
    if (pos0 + t > cfg.max_seq_len)
        throw ValueError("layer_forward: sequence length " + std::to_string(pos0 + t) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    if (cache != nullptr && tape != nullptr)
        throw ValueError("layer_forward: kv cache is inference-only");

    Tensor<S> a_in = ops::rms_norm(tape, hidden, layer.attn_norm);
    Tensor<S> q = ops::matmul(tape, a_in, layer.wq);
    Tensor<S> k = ops::matmul(tape, a_in, layer.wk);
    Tensor<S> v = ops::matmul(tape, a_in, layer.wv);

    Tensor<S> attn;
    if (cache == nullptr) {
        attn = ops::causal_self_attention(tape, q, k, v, cfg.n_heads, S(cfg.rope_base));
    } else {
        const int hd = d / cfg.n_heads;
        std::vector<S> qr = q.values();
        std::vector<S> kr = k.values();
        kernels::rope_rows(qr.data(), t, cfg.n_heads, hd, pos0, S(cfg.rope_base));
        kernels::rope_rows(kr.data(), t, cfg.n_heads, hd, pos0, S(cfg.rope_base));
        cache->append(kr.data(), v.data(), t, d);
        attn = Tensor<S>::zeros({t, d});
        kernels::attention<S>(qr.data(), cache->k.data(), cache->v.data(), attn.data(), nullptr, t,
                              cache->len, cfg.n_heads, hd, pos0);
    }
    Tensor<S> attn_out = ops::matmul(tape, attn, layer.wo);
    Tensor<S> h1 = ops::add(tape, hidden, attn_out);

    Tensor<S> f_in = ops::rms_norm(tape, h1, layer.ffn_norm);
    Tensor<S> gate = ops::silu(tape, ops::matmul(tape, f_in, layer.w_gate));
    Tensor<S> up = ops::matmul(tape, f_in, layer.w_up);
    Tensor<S> ffn = ops::matmul(tape, ops::mul(tape, gate, up), layer.w_down);
    return ops::add(tape, h1, ffn);
}

// Text-only workflow: embedding, decoder stack, final norm, text head. Never
// touches any multimodal component.
template <typename S>
Tensor<S> text_forward(Tape<S>* tape, const Backbone<S>& b, const std::vector<int>& tokens,
                       KVCache<S>* cache) {
    if (tokens.empty()) throw ValueError("text_forward: empty prompt");
    Tensor<S> x = ops::embedding(tape, b.el_text, tokens);
    for (size_t i = 0; i < b.layers.size(); ++i) {
        LayerKV<S>* slot = cache ? &cache->backbone[i] : nullptr;
        x = layer_forward(tape, b.layers[i], x, b.cfg, slot);
    }
    x = ops::rms_norm(tape, x, b.final_norm);
    return ops::matmul(tape, x, b.lh_text);
}

}  // namespace innerlm
