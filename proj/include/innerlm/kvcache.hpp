#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "innerlm/errors.hpp"

namespace innerlm {

// Appended key/value rows for one attention layer. Keys are stored already
// rotated, so cached and full-recompute paths share identical arithmetic.
template <typename S>
struct LayerKV {
    std::vector<S> k;
    std::vector<S> v;
    int len = 0;
    int width = 0;

    void append(const S* krows, const S* vrows, int t, int d) {
        if (width == 0) width = d;
        if (width != d) throw DimensionError("kv cache: width changed from " + std::to_string(width) +
                                             " to " + std::to_string(d));
        k.insert(k.end(), krows, krows + static_cast<size_t>(t) * d);
        v.insert(v.end(), vrows, vrows + static_cast<size_t>(t) * d);
        len += t;
    }

    void clear() {
        k.clear();
        v.clear();
        len = 0;
    }
};

enum class LayerKind { Backbone, Insertion };

// Per-request cache covering the backbone layers and, when an adaptor stack is
// active, the insertion layers. Every position passes through every active
// layer, so all entries share one length.
template <typename S>
struct KVCache {
    std::vector<LayerKV<S>> backbone;
    std::vector<LayerKV<S>> insertion;

    KVCache(int n_backbone, int n_insertion)
        : backbone(static_cast<size_t>(n_backbone)), insertion(static_cast<size_t>(n_insertion)) {}

    LayerKV<S>& slot(LayerKind kind, int index) {
        auto& vec = kind == LayerKind::Backbone ? backbone : insertion;
        if (index < 0 || index >= static_cast<int>(vec.size()))
            throw ValueError("kv cache: layer index " + std::to_string(index) + " out of range");
        return vec[static_cast<size_t>(index)];
    }

    int length() const { return backbone.empty() ? 0 : backbone.front().len; }

    // All entries must agree on length after every decode step.
    void check_coherent() const {
        const int l = length();
        for (const auto& e : backbone)
            if (e.len != l) throw ValueError("kv cache: backbone entry length mismatch");
        for (const auto& e : insertion)
            if (e.len != l) throw ValueError("kv cache: insertion entry length mismatch");
    }

    void clear() {
        for (auto& e : backbone) e.clear();
        for (auto& e : insertion) e.clear();
    }
};

}  // namespace innerlm
