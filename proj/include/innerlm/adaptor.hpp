#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "innerlm/backbone.hpp"
#include "innerlm/data.hpp"

namespace innerlm {

// Structural variants of the adaptor wiring:
//   A - gated residual taps fed by a propagated adaptor stream
//   B - gated residual, each insertion layer reading its LM layer's output
//   C - insertion layer applied in series after its LM layer, no gates
enum class Variant { A, B, C };

enum class GateMode { PerChannel, Scalar };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::A: return "A";
        case Variant::B: return "B";
        default: return "C";
    }
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "A") return Variant::A;
    if (s == "B") return Variant::B;
    if (s == "C") return Variant::C;
    throw FormatError("unknown variant '" + s + "'");
}

struct AdaptorConfig {
    Variant variant = Variant::C;
    std::vector<int> depths = {4, 8};  // 1-based attach depths, strictly increasing
    std::optional<GateMode> gate_mode;  // must stay unset for variant C
    int patch = 4;
    int feat_width = 64;
    uint64_t seed = 20240902;
};

inline void to_json(nlohmann::json& j, const AdaptorConfig& c) {
    j = nlohmann::json{{"variant", variant_name(c.variant)},
                       {"depths", c.depths},
                       {"gate_mode", nullptr},
                       {"patch", c.patch},
                       {"feat_width", c.feat_width},
                       {"seed", c.seed}};
    if (c.gate_mode) j["gate_mode"] = *c.gate_mode == GateMode::PerChannel ? "per_channel" : "scalar";
}

inline void from_json(const nlohmann::json& j, AdaptorConfig& c) {
    c.variant = variant_from_name(j.at("variant").get<std::string>());
    j.at("depths").get_to(c.depths);
    if (j.contains("gate_mode") && !j.at("gate_mode").is_null()) {
        const std::string g = j.at("gate_mode").get<std::string>();
        if (g == "per_channel") c.gate_mode = GateMode::PerChannel;
        else if (g == "scalar") c.gate_mode = GateMode::Scalar;
        else throw FormatError("unknown gate_mode '" + g + "'");
    } else {
        c.gate_mode.reset();
    }
    j.at("patch").get_to(c.patch);
    j.at("feat_width").get_to(c.feat_width);
    j.at("seed").get_to(c.seed);
}

// Evenly spaced attach depths ending at the final layer, e.g. N=2, M=8 -> {4, 8}.
inline std::vector<int> evenly_spaced_depths(int n, int m) {
    if (n < 1 || n > m) throw ValueError("depth spacing: need 1 <= N <= M");
    std::vector<int> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 1; i <= n; ++i) out.push_back(i * m / n);
    return out;
}

// Frozen toy vision front end: non-overlapping patches flattened and passed
// through a fixed linear projection. No bias, so a zero image maps to zero
// features.
template <typename S>
struct ToyImageEncoder {
    int patch = 4;
    Tensor<S> proj;  // [patch*patch x feat_width], never trainable
};

template <typename S>
Tensor<S> encode_image(const ToyImageEncoder<S>& enc, const GridImage& img) {
    const int p = enc.patch;
    if (img.width % p != 0 || img.height % p != 0)
        throw DimensionError("encode_image: image " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + " not divisible by patch " + std::to_string(p));
    const int px = img.width / p, py = img.height / p;
    const int n_patches = px * py;
    Tensor<S> patches = Tensor<S>::zeros({n_patches, p * p});
    for (int gy = 0; gy < py; ++gy) {
        for (int gx = 0; gx < px; ++gx) {
            S* row = patches.data() + static_cast<size_t>(gy * px + gx) * p * p;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    row[dy * p + dx] = static_cast<S>(img.at(gy * p + dy, gx * p + dx));
        }
    }
    return ops::matmul<S>(nullptr, patches, enc.proj);
}

// One insertion layer: a decoder-layer-shaped parameter set attached at a
// backbone depth, plus its gate for variants A/B.
template <typename S>
struct InsertionLayer {
    DecoderLayer<S> layer;
    int attach_depth = 0;  // 1-based; operates at backbone layer attach_depth
    Tensor<S> gate;        // undefined for variant C
};

template <typename S>
struct AdaptorStack {
    AdaptorConfig cfg;
    std::vector<InsertionLayer<S>> insertions;
    Tensor<S> el_mm;  // [V x d]
    Tensor<S> lh_mm;  // [d x V]
    Tensor<S> proj_w1, proj_b1;  // [f x d], [d]
    Tensor<S> proj_w2, proj_b2;  // [d x d], [d]
    ToyImageEncoder<S> encoder;
};

template <typename S, typename Fn>
void visit_params(AdaptorStack<S>& a, Fn&& fn) {
    for (size_t i = 0; i < a.insertions.size(); ++i) {
        visit_layer_params(a.insertions[i].layer, "adaptor.insertion" + std::to_string(i), fn);
        if (a.insertions[i].gate.defined())
            fn("adaptor.insertion" + std::to_string(i) + ".gate", a.insertions[i].gate);
    }
    fn("adaptor.el_mm", a.el_mm);
    fn("adaptor.lh_mm", a.lh_mm);
    fn("adaptor.proj_w1", a.proj_w1);
    fn("adaptor.proj_b1", a.proj_b1);
    fn("adaptor.proj_w2", a.proj_w2);
    fn("adaptor.proj_b2", a.proj_b2);
    fn("adaptor.encoder_proj", a.encoder.proj);
}

// Builds the adaptor stack around a backbone: insertion layers copy their
// attach-depth layer, gates start at exactly zero, EL_mm/LH_mm copy the text
// embedding and head, the projector is freshly initialized.
template <typename S>
AdaptorStack<S> init_adaptor(const Backbone<S>& b, const AdaptorConfig& cfg) {
    const int m = b.cfg.n_layers;
    if (cfg.depths.empty()) throw ValueError("init_adaptor: need at least one insertion depth");
    int prev = 0;
    for (int k : cfg.depths) {
        if (k < 1 || k > m)
            throw ValueError("init_adaptor: depth " + std::to_string(k) + " out of range [1, " +
                             std::to_string(m) + "]");
        if (k <= prev) throw ValueError("init_adaptor: depths must be strictly increasing");
        prev = k;
    }
    if (cfg.variant == Variant::C && cfg.gate_mode.has_value())
        throw ValueError("init_adaptor: variant C has no gates; gate_mode must be unset");

    AdaptorStack<S> a;
    a.cfg = cfg;
    const int d = b.cfg.d_model;
    for (int k : cfg.depths) {
        InsertionLayer<S> ins;
        ins.layer = clone_layer(b.layers[static_cast<size_t>(k - 1)]);
        ins.attach_depth = k;
        if (cfg.variant != Variant::C) {
            const GateMode gm = cfg.gate_mode.value_or(GateMode::PerChannel);
            ins.gate = gm == GateMode::PerChannel ? Tensor<S>::zeros({d}) : Tensor<S>::zeros({1});
        }
        a.insertions.push_back(std::move(ins));
    }
    a.el_mm = b.el_text.clone();
    a.lh_mm = b.lh_text.clone();

    Rng root(cfg.seed);
    Rng enc_rng = root.fork(1);
    Rng proj_rng = root.fork(2);
    a.encoder.patch = cfg.patch;
    a.encoder.proj = Tensor<S>::randn({cfg.patch * cfg.patch, cfg.feat_width}, enc_rng,
                                      1.0 / std::sqrt(static_cast<double>(cfg.patch * cfg.patch)));
    a.encoder.proj.set_trainable(false);
    const int f = cfg.feat_width;
    a.proj_w1 = Tensor<S>::randn({f, d}, proj_rng, 1.0 / std::sqrt(static_cast<double>(f)));
    a.proj_b1 = Tensor<S>::zeros({d});
    a.proj_w2 = Tensor<S>::randn({d, d}, proj_rng, 1.0 / std::sqrt(static_cast<double>(d)));
    a.proj_b2 = Tensor<S>::zeros({d});
    return a;
}

// Two-layer MLP from encoder features to image tokens: linear, SiLU, linear.
template <typename S>
Tensor<S> project(Tape<S>* tape, const AdaptorStack<S>& a, const Tensor<S>& features) {
    Tensor<S> h = ops::add(tape, ops::matmul(tape, features, a.proj_w1), a.proj_b1);
    h = ops::silu(tape, h);
    return ops::add(tape, ops::matmul(tape, h, a.proj_w2), a.proj_b2);
}

struct MMForwardOptions {
    bool use_insertions = true;
    bool use_mm_embed_head = true;  // EL_mm/LH_mm when true, frozen EL_text/LH_text when false
};

// Runs embedded rows through the decoder stack with insertion layers applied
// per the configured variant. `x` covers new positions only when a cache is
// present.
template <typename S>
Tensor<S> adaptor_stack_forward(Tape<S>* tape, const Backbone<S>& b, const AdaptorStack<S>& a, Tensor<S> x,
                                const MMForwardOptions& opt, KVCache<S>* cache) {
    size_t ins_idx = 0;
    Tensor<S> stream;  // variant A running adaptor stream
    const int m = b.cfg.n_layers;
    for (int k = 1; k <= m; ++k) {
        LayerKV<S>* bb_slot = cache ? &cache->backbone[static_cast<size_t>(k - 1)] : nullptr;
        Tensor<S> fl_out = layer_forward(tape, b.layers[static_cast<size_t>(k - 1)], x, b.cfg, bb_slot);
        const bool has_ins = opt.use_insertions && ins_idx < a.insertions.size() &&
                             a.insertions[ins_idx].attach_depth == k;
        if (!has_ins) {
            x = fl_out;
            continue;
        }
        const InsertionLayer<S>& ins = a.insertions[ins_idx];
        LayerKV<S>* in_slot = cache ? &cache->insertion[ins_idx] : nullptr;
        switch (a.cfg.variant) {
            case Variant::C:
                x = layer_forward(tape, ins.layer, fl_out, b.cfg, in_slot);
                break;
            case Variant::B: {
                Tensor<S> il_out = layer_forward(tape, ins.layer, fl_out, b.cfg, in_slot);
                x = ops::add(tape, fl_out, ops::mul(tape, il_out, ins.gate));
                break;
            }
            case Variant::A: {
                Tensor<S> z_in = ins_idx == 0 ? x : stream;
                stream = layer_forward(tape, ins.layer, z_in, b.cfg, in_slot);
                x = ops::add(tape, fl_out, ops::mul(tape, stream, ins.gate));
                break;
            }
        }
        ++ins_idx;
    }
    return x;
}

// Multimodal workflow prompt pass: projected image tokens concatenated before
// embedded text tokens, decoder stack with insertions, final norm, mm head.
template <typename S>
Tensor<S> mm_forward(Tape<S>* tape, const Backbone<S>& b, const AdaptorStack<S>& a, const GridImage& image,
                     const std::vector<int>& text_tokens, const MMForwardOptions& opt = {},
                     KVCache<S>* cache = nullptr) {
    Tensor<S> feats = encode_image(a.encoder, image);
    Tensor<S> img_tokens = project(tape, a, feats);
    const int p = img_tokens.dim(0);
    const int t = static_cast<int>(text_tokens.size());
    const int start = cache ? cache->length() : 0;
    if (start + p + t > b.cfg.max_seq_len)
        throw ValueError("mm_forward: sequence length " + std::to_string(start + p + t) +
                         " exceeds max_seq_len " + std::to_string(b.cfg.max_seq_len));
    Tensor<S> x;
    if (t > 0) {
        Tensor<S> text_emb = ops::embedding(tape, opt.use_mm_embed_head ? a.el_mm : b.el_text, text_tokens);
        x = ops::concat_rows(tape, img_tokens, text_emb);
    } else {
        x = img_tokens;
    }
    x = adaptor_stack_forward(tape, b, a, x, opt, cache);
    x = ops::rms_norm(tape, x, b.final_norm);
    return ops::matmul(tape, x, opt.use_mm_embed_head ? a.lh_mm : b.lh_text);
}

// Decode step in the multimodal workflow: embeds the next text tokens and runs
// them through the cached stack.
template <typename S>
Tensor<S> mm_decode_step(const Backbone<S>& b, const AdaptorStack<S>& a, const std::vector<int>& tokens,
                         const MMForwardOptions& opt, KVCache<S>& cache) {
    Tensor<S> x = ops::embedding<S>(nullptr, opt.use_mm_embed_head ? a.el_mm : b.el_text, tokens);
    x = adaptor_stack_forward<S>(nullptr, b, a, x, opt, &cache);
    x = ops::rms_norm<S>(nullptr, x, b.final_norm);
    return ops::matmul<S>(nullptr, x, opt.use_mm_embed_head ? a.lh_mm : b.lh_text);
}

// ---------------------------------------------------------------------------
// Accounting.
// ---------------------------------------------------------------------------

inline int64_t gate_param_count(const AdaptorConfig& cfg, const BackboneConfig& bcfg) {
    if (cfg.variant == Variant::C) return 0;
    const int64_t per = cfg.gate_mode.value_or(GateMode::PerChannel) == GateMode::PerChannel
                            ? bcfg.d_model
                            : 1;
    return static_cast<int64_t>(cfg.depths.size()) * per;
}

inline int64_t projector_param_count(const AdaptorConfig& cfg, const BackboneConfig& bcfg) {
    const int64_t f = cfg.feat_width, d = bcfg.d_model;
    return f * d + d + d * d + d;
}

inline int64_t encoder_param_count(const AdaptorConfig& cfg) {
    return static_cast<int64_t>(cfg.patch) * cfg.patch * cfg.feat_width;
}

// Trainable parameters of the stack: insertion layers + gates + EL_mm + LH_mm
// + projector. The frozen encoder is excluded.
inline int64_t adaptor_trainable_param_count(const AdaptorConfig& cfg, const BackboneConfig& bcfg) {
    const int64_t n = static_cast<int64_t>(cfg.depths.size());
    const int64_t v = bcfg.vocab_size, d = bcfg.d_model;
    return n * layer_param_count(bcfg) + gate_param_count(cfg, bcfg) + v * d + d * v +
           projector_param_count(cfg, bcfg);
}

inline int64_t adaptor_total_param_count(const AdaptorConfig& cfg, const BackboneConfig& bcfg) {
    return adaptor_trainable_param_count(cfg, bcfg) + encoder_param_count(cfg);
}

struct FlopsReport {
    int seq_len = 0;
    int image_patches = 0;
    int64_t per_layer_macs = 0;
    int64_t backbone_stack_macs = 0;
    int64_t insertion_stack_macs = 0;
    int64_t projector_macs = 0;
    int64_t encoder_macs = 0;
    int64_t head_macs = 0;
    double layer_stack_ratio = 0.0;  // (M + N) / M
};

// Exact multiply-accumulate counts for one full-causal pass over seq_len
// positions, of which image_patches positions are projected image tokens.
inline FlopsReport flops_report(const BackboneConfig& bcfg, const AdaptorConfig& acfg, int seq_len,
                                int image_patches = 0) {
    FlopsReport r;
    const int64_t t = seq_len, d = bcfg.d_model, f = bcfg.ffn_hidden, v = bcfg.vocab_size;
    const int64_t m = bcfg.n_layers, n = static_cast<int64_t>(acfg.depths.size());
    const int64_t p = image_patches;
    r.seq_len = seq_len;
    r.image_patches = image_patches;
    r.per_layer_macs = 4 * t * d * d + d * t * (t + 1) + 3 * t * d * f;
    r.backbone_stack_macs = m * r.per_layer_macs;
    r.insertion_stack_macs = n * r.per_layer_macs;
    r.projector_macs = p * (static_cast<int64_t>(acfg.feat_width) * d + d * d);
    r.encoder_macs = p * static_cast<int64_t>(acfg.patch) * acfg.patch * acfg.feat_width;
    r.head_macs = t * d * v;
    r.layer_stack_ratio = static_cast<double>(m + n) / static_cast<double>(m);
    return r;
}

struct MemoryReport {
    int64_t backbone_params = 0;
    int64_t stack_params = 0;
    int64_t backbone_bytes = 0;
    int64_t stack_bytes = 0;
    int64_t shared_deployment_bytes = 0;  // backbone + stack (dual workflows, one backbone)
    int64_t naive_deployment_bytes = 0;   // backbone + standalone multimodal copy
    int64_t savings_bytes = 0;            // exactly one backbone
};

inline MemoryReport memory_report(const BackboneConfig& bcfg, const AdaptorConfig& acfg) {
    MemoryReport r;
    constexpr int64_t bytes_per_param = 4;
    r.backbone_params = backbone_param_count(bcfg);
    r.stack_params = adaptor_total_param_count(acfg, bcfg);
    r.backbone_bytes = r.backbone_params * bytes_per_param;
    r.stack_bytes = r.stack_params * bytes_per_param;
    r.shared_deployment_bytes = r.backbone_bytes + r.stack_bytes;
    r.naive_deployment_bytes = 2 * r.backbone_bytes + r.stack_bytes;
    r.savings_bytes = r.naive_deployment_bytes - r.shared_deployment_bytes;
    return r;
}

}  // namespace innerlm
