#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "innerlm/adaptor.hpp"
#include "innerlm/backbone.hpp"
#include "innerlm/sha256.hpp"

namespace innerlm {

// Module identity of a parameter, used to select per-stage trainable sets and
// to verify the gradient partition.
enum class Module {
    BackboneEmbed,
    BackboneLayers,
    BackboneNorm,
    BackboneHead,
    Projector,
    InsertionLayers,
    Gates,
    MMEmbed,
    MMHead,
    Encoder,
};

inline Module module_of_param(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    if (starts("backbone.el_text")) return Module::BackboneEmbed;
    if (starts("backbone.final_norm")) return Module::BackboneNorm;
    if (starts("backbone.lh_text")) return Module::BackboneHead;
    if (starts("backbone.layer")) return Module::BackboneLayers;
    if (starts("adaptor.proj_")) return Module::Projector;
    if (starts("adaptor.el_mm")) return Module::MMEmbed;
    if (starts("adaptor.lh_mm")) return Module::MMHead;
    if (starts("adaptor.encoder_proj")) return Module::Encoder;
    if (starts("adaptor.insertion")) {
        return name.find(".gate") != std::string::npos ? Module::Gates : Module::InsertionLayers;
    }
    throw ValueError("unknown parameter name '" + name + "'");
}

inline bool is_backbone_module(Module m) {
    return m == Module::BackboneEmbed || m == Module::BackboneLayers || m == Module::BackboneNorm ||
           m == Module::BackboneHead;
}

// The frozen backbone plus, once multimodal work begins, the adaptor stack.
template <typename S>
struct Model {
    Backbone<S> backbone;
    std::optional<AdaptorStack<S>> adaptor;
};

template <typename S, typename Fn>
void visit_params(Model<S>& m, Fn&& fn) {
    visit_params(m.backbone, fn);
    if (m.adaptor) visit_params(*m.adaptor, fn);
}

// Sets trainable flags over the whole model to exactly `trainable_modules`.
// The encoder never trains.
template <typename S>
void apply_trainable_set(Model<S>& m, const std::set<Module>& trainable_modules) {
    visit_params(m, [&](const std::string& name, Tensor<S>& t) {
        const Module mod = module_of_param(name);
        const bool on = mod != Module::Encoder && trainable_modules.count(mod) > 0;
        t.set_trainable(on);
    });
}

template <typename S>
void zero_all_grads(Model<S>& m) {
    visit_params(m, [](const std::string&, Tensor<S>& t) { t.zero_grad(); });
}

// SHA-256 over the raw little-endian float bytes of all backbone tensors in
// visit order; the NLP-preservation check compares this before and after the
// multimodal stages.
inline std::string backbone_hash(Backbone<float>& b) {
    Sha256 h;
    visit_params(b, [&](const std::string&, Tensor<float>& t) {
        h.update(t.data(), static_cast<size_t>(t.numel()) * sizeof(float));
    });
    return Sha256::hex(h.finish());
}

// float -> double copy of a whole model, used by the gradient-check oracle.
inline Tensor<double> widen(const Tensor<float>& t) {
    if (!t.defined()) return {};
    std::vector<double> v(t.values().begin(), t.values().end());
    Tensor<double> out = Tensor<double>::from(t.shape(), std::move(v));
    out.set_trainable(t.trainable());
    return out;
}

inline DecoderLayer<double> widen_layer(const DecoderLayer<float>& l) {
    DecoderLayer<double> out;
    out.attn_norm = widen(l.attn_norm);
    out.wq = widen(l.wq);
    out.wk = widen(l.wk);
    out.wv = widen(l.wv);
    out.wo = widen(l.wo);
    out.ffn_norm = widen(l.ffn_norm);
    out.w_gate = widen(l.w_gate);
    out.w_up = widen(l.w_up);
    out.w_down = widen(l.w_down);
    return out;
}

inline Model<double> widen_model(const Model<float>& m) {
    Model<double> out;
    out.backbone.cfg = m.backbone.cfg;
    out.backbone.el_text = widen(m.backbone.el_text);
    for (const auto& l : m.backbone.layers) out.backbone.layers.push_back(widen_layer(l));
    out.backbone.final_norm = widen(m.backbone.final_norm);
    out.backbone.lh_text = widen(m.backbone.lh_text);
    if (m.adaptor) {
        AdaptorStack<double> a;
        a.cfg = m.adaptor->cfg;
        for (const auto& ins : m.adaptor->insertions) {
            InsertionLayer<double> out_ins;
            out_ins.layer = widen_layer(ins.layer);
            out_ins.attach_depth = ins.attach_depth;
            out_ins.gate = widen(ins.gate);
            a.insertions.push_back(std::move(out_ins));
        }
        a.el_mm = widen(m.adaptor->el_mm);
        a.lh_mm = widen(m.adaptor->lh_mm);
        a.proj_w1 = widen(m.adaptor->proj_w1);
        a.proj_b1 = widen(m.adaptor->proj_b1);
        a.proj_w2 = widen(m.adaptor->proj_w2);
        a.proj_b2 = widen(m.adaptor->proj_b2);
        a.encoder.patch = m.adaptor->encoder.patch;
        a.encoder.proj = widen(m.adaptor->encoder.proj);
        out.adaptor = std::move(a);
    }
    return out;
}

}  // namespace innerlm
