#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "innerlm/adaptor.hpp"
#include "innerlm/backbone.hpp"
#include "innerlm/data.hpp"
#include "innerlm/model.hpp"

namespace innerlm {

enum class WorkflowMode { TextOnly, Multimodal };

struct WorkflowRequest {
    WorkflowMode mode = WorkflowMode::TextOnly;
    std::vector<int> prompt;
    std::optional<GridImage> image;  // exactly one image iff multimodal
    int max_new_tokens = 0;
    bool stop_at_eos = false;
};

struct WorkflowPlan {
    WorkflowMode mode;
    std::vector<std::string> components;
};

// Decides which components a request touches. The text-only plan never names
// an adaptor component; a malformed request fails before any computation.
inline WorkflowPlan route(const WorkflowRequest& req) {
    if (req.prompt.empty()) throw ValueError("route: empty prompt");
    if (req.mode == WorkflowMode::TextOnly) {
        if (req.image.has_value()) throw ValueError("route: text-only request must not carry an image");
        return {WorkflowMode::TextOnly, {"el_text", "backbone", "lh_text"}};
    }
    if (!req.image.has_value()) throw ValueError("route: multimodal request requires an image");
    return {WorkflowMode::Multimodal,
            {"encoder", "projector", "el_mm", "backbone", "insertion_layers", "lh_mm"}};
}

template <typename S>
struct GenerateResult {
    std::vector<int> tokens;                   // newly generated token ids
    Tensor<S> prompt_logits;                   // logits over the prompt pass
    std::vector<std::vector<S>> step_logits;   // last-row logits per generated token
};

template <typename S>
int argmax_row(const Tensor<S>& logits, int row) {
    const int v = logits.dim(1);
    const S* p = logits.data() + static_cast<size_t>(row) * v;
    int best = 0;
    for (int j = 1; j < v; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

// Greedy decoding with per-request KV caches covering the backbone and, in the
// multimodal workflow, the insertion layers. The prompt is processed once to
// fill the caches; each step appends one position to every cache entry.
template <typename S>
GenerateResult<S> generate(const Backbone<S>& b, const AdaptorStack<S>* a, const WorkflowRequest& req,
                           const MMForwardOptions& opt = {}) {
    const WorkflowPlan plan = route(req);
    GenerateResult<S> out;
    const int n_ins = (plan.mode == WorkflowMode::Multimodal && a != nullptr)
                          ? static_cast<int>(a->insertions.size())
                          : 0;
    KVCache<S> cache(b.cfg.n_layers, n_ins);

    Tensor<S> logits;
    if (plan.mode == WorkflowMode::TextOnly) {
        logits = text_forward<S>(nullptr, b, req.prompt, &cache);
    } else {
        if (a == nullptr) throw ValueError("generate: multimodal request but no adaptor stack loaded");
        const int patches = (req.image->width / a->encoder.patch) * (req.image->height / a->encoder.patch);
        if (patches + static_cast<int>(req.prompt.size()) + req.max_new_tokens > b.cfg.max_seq_len)
            throw ValueError("generate: prompt plus max_new_tokens exceeds max_seq_len");
        logits = mm_forward<S>(nullptr, b, *a, *req.image, req.prompt, opt, &cache);
    }
    out.prompt_logits = logits;
    cache.check_coherent();

    int next = argmax_row(logits, logits.dim(0) - 1);
    for (int step = 0; step < req.max_new_tokens; ++step) {
        out.tokens.push_back(next);
        const S* last = logits.data() + static_cast<size_t>(logits.dim(0) - 1) * logits.dim(1);
        out.step_logits.emplace_back(last, last + logits.dim(1));
        if (req.stop_at_eos && next == vocab::EOS) break;
        if (step + 1 == req.max_new_tokens) break;
        if (plan.mode == WorkflowMode::TextOnly) {
            logits = text_forward<S>(nullptr, b, {next}, &cache);
        } else {
            logits = mm_decode_step<S>(b, *a, {next}, opt, cache);
        }
        cache.check_coherent();
        next = argmax_row(logits, logits.dim(0) - 1);
    }
    return out;
}

// Full-recompute reference: the same greedy policy with no cache, re-running
// the whole prefix every step. Equivalence against generate() is the cache
// correctness oracle.
template <typename S>
GenerateResult<S> generate_nocache(const Backbone<S>& b, const AdaptorStack<S>* a,
                                   const WorkflowRequest& req, const MMForwardOptions& opt = {}) {
    const WorkflowPlan plan = route(req);
    GenerateResult<S> out;
    std::vector<int> text = req.prompt;
    Tensor<S> logits;
    auto full_pass = [&]() {
        if (plan.mode == WorkflowMode::TextOnly) return text_forward<S>(nullptr, b, text, nullptr);
        return mm_forward<S>(nullptr, b, *a, *req.image, text, opt, nullptr);
    };
    logits = full_pass();
    out.prompt_logits = logits;
    int next = argmax_row(logits, logits.dim(0) - 1);
    for (int step = 0; step < req.max_new_tokens; ++step) {
        out.tokens.push_back(next);
        const S* last = logits.data() + static_cast<size_t>(logits.dim(0) - 1) * logits.dim(1);
        out.step_logits.emplace_back(last, last + logits.dim(1));
        if (req.stop_at_eos && next == vocab::EOS) break;
        if (step + 1 == req.max_new_tokens) break;
        text.push_back(next);
        logits = full_pass();
        next = argmax_row(logits, logits.dim(0) - 1);
    }
    return out;
}

struct LatencyReport {
    double text_seconds = 0.0;
    double mm_seconds = 0.0;
    double measured_ratio = 0.0;
    double analytic_layer_ratio = 0.0;  // (M + N) / M
    int prompt_len = 0;
    int new_tokens = 0;
    int iterations = 0;
};

// Wall time per request for both workflows on equal decode lengths.
template <typename S>
LatencyReport bench_latency(const Backbone<S>& b, const AdaptorStack<S>* a, const GridImage& image,
                            int prompt_len, int new_tokens, int warmup, int iters) {
    using clock = std::chrono::steady_clock;
    WorkflowRequest text_req{WorkflowMode::TextOnly, {}, std::nullopt, new_tokens, false};
    for (int i = 0; i < prompt_len; ++i)
        text_req.prompt.push_back(vocab::WORD_BASE + (i * 7) % vocab::WORD_COUNT);
    WorkflowRequest mm_req{WorkflowMode::Multimodal, text_req.prompt, image, new_tokens, false};

    auto time_runs = [&](const WorkflowRequest& req) {
        for (int i = 0; i < warmup; ++i) (void)generate(b, a, req);
        const auto t0 = clock::now();
        for (int i = 0; i < iters; ++i) (void)generate(b, a, req);
        const auto t1 = clock::now();
        return std::chrono::duration<double>(t1 - t0).count() / iters;
    };

    LatencyReport r;
    r.prompt_len = prompt_len;
    r.new_tokens = new_tokens;
    r.iterations = iters;
    r.text_seconds = time_runs(text_req);
    r.mm_seconds = a != nullptr ? time_runs(mm_req) : 0.0;
    r.measured_ratio = r.text_seconds > 0 ? r.mm_seconds / r.text_seconds : 0.0;
    const int n = a != nullptr ? static_cast<int>(a->insertions.size()) : 0;
    r.analytic_layer_ratio = static_cast<double>(b.cfg.n_layers + n) / b.cfg.n_layers;
    return r;
}

}  // namespace innerlm
