#include "innerlm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace innerlm {

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::TextPretrain: return "TextPretrain";
        case Stage::Stage1PT: return "Stage1-PT";
        case Stage::Stage2PT: return "Stage2-PT";
        case Stage::InstructionFT: return "Instruction-FT";
        case Stage::GroundingFT: return "Grounding-FT";
        default: return "Unfrozen-Baseline";
    }
}

Stage stage_from_name(const std::string& name) {
    if (name == "TextPretrain") return Stage::TextPretrain;
    if (name == "Stage1-PT") return Stage::Stage1PT;
    if (name == "Stage2-PT") return Stage::Stage2PT;
    if (name == "Instruction-FT") return Stage::InstructionFT;
    if (name == "Grounding-FT") return Stage::GroundingFT;
    if (name == "Unfrozen-Baseline") return Stage::UnfrozenBaseline;
    throw FormatError("unknown stage '" + name + "'");
}

std::set<Module> stage_trainable_modules(Stage s) {
    switch (s) {
        case Stage::TextPretrain:
            return {Module::BackboneEmbed, Module::BackboneLayers, Module::BackboneNorm,
                    Module::BackboneHead};
        case Stage::Stage1PT:
            return {Module::Projector};
        case Stage::Stage2PT:
        case Stage::InstructionFT:
        case Stage::GroundingFT:
            return {Module::Projector, Module::InsertionLayers, Module::Gates, Module::MMEmbed,
                    Module::MMHead};
        default:
            return {Module::Projector, Module::InsertionLayers, Module::Gates, Module::MMEmbed,
                    Module::MMHead, Module::BackboneEmbed, Module::BackboneLayers,
                    Module::BackboneNorm, Module::BackboneHead};
    }
}

TrainStageConfig default_stage_config(Stage s) {
    TrainStageConfig c;
    c.stage = s;
    switch (s) {
        case Stage::TextPretrain:
            c.learning_rate = 1e-3;
            c.batch_size = 16;
            c.steps = 2000;
            c.seed = 101;
            break;
        case Stage::Stage1PT:
            // Projector alignment alone tolerates the high rate.
            c.learning_rate = 1e-3;
            c.batch_size = 32;
            c.steps = 500;
            c.seed = 102;
            c.use_insertions = false;
            c.use_mm_embed_head = false;
            break;
        case Stage::Stage2PT:
            c.learning_rate = 2e-5;
            c.batch_size = 32;
            c.steps = 500;
            c.seed = 103;
            break;
        case Stage::InstructionFT:
            c.learning_rate = 2e-5;
            c.batch_size = 32;
            c.steps = 1000;
            c.seed = 104;
            break;
        case Stage::GroundingFT:
            c.learning_rate = 2e-5;
            c.batch_size = 32;
            c.steps = 1500;
            c.seed = 105;
            break;
        default:
            c.learning_rate = 2e-5;
            c.batch_size = 32;
            c.steps = 1000;
            c.seed = 106;
            c.clip_grad_norm = 1.0;
            break;
    }
    return c;
}

void to_json(nlohmann::json& j, const TrainStageConfig& c) {
    j = nlohmann::json{{"stage", stage_name(c.stage)},
                       {"learning_rate", c.learning_rate},
                       {"batch_size", c.batch_size},
                       {"warmup_ratio", c.warmup_ratio},
                       {"steps", c.steps},
                       {"weight_decay", c.weight_decay},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"eps", c.eps},
                       {"seed", c.seed},
                       {"clip_grad_norm", c.clip_grad_norm},
                       {"use_insertions", c.use_insertions},
                       {"use_mm_embed_head", c.use_mm_embed_head}};
}

void from_json(const nlohmann::json& j, TrainStageConfig& c) {
    c.stage = stage_from_name(j.at("stage").get<std::string>());
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("batch_size").get_to(c.batch_size);
    j.at("warmup_ratio").get_to(c.warmup_ratio);
    j.at("steps").get_to(c.steps);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("eps").get_to(c.eps);
    j.at("seed").get_to(c.seed);
    j.at("clip_grad_norm").get_to(c.clip_grad_norm);
    j.at("use_insertions").get_to(c.use_insertions);
    j.at("use_mm_embed_head").get_to(c.use_mm_embed_head);
}

double lr_at(const TrainStageConfig& cfg, int step) {
    if (step < 0 || step > cfg.steps)
        throw ValueError("lr_at: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(cfg.steps) + "]");
    const int warmup = static_cast<int>(std::floor(cfg.warmup_ratio * cfg.steps));
    if (warmup > 0 && step < warmup)
        return cfg.learning_rate * static_cast<double>(step) / warmup;
    if (cfg.steps == warmup) return step == 0 ? 0.0 : cfg.learning_rate;
    const double progress = static_cast<double>(step - warmup) / (cfg.steps - warmup);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor<float>*>> params) : params_(std::move(params)) {
    for (const auto& [name, t] : params_) {
        if (!t->trainable())
            throw ValueError("optimizer: parameter '" + name + "' is frozen; state is only kept for "
                             "trainable tensors");
        m_.emplace_back(static_cast<size_t>(t->numel()), 0.0f);
        v_.emplace_back(static_cast<size_t>(t->numel()), 0.0f);
    }
}

void AdamW::step(double lr, const TrainStageConfig& hp) {
    ++t_;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        auto& [name, p] = params_[pi];
        const std::vector<float>& g = p->grad();
        const bool has_g = !g.empty();
        float* w = p->data();
        float* m = m_[pi].data();
        float* v = v_[pi].data();
        const size_t n = m_[pi].size();
        for (size_t i = 0; i < n; ++i) {
            const double gi = has_g ? static_cast<double>(g[i]) : 0.0;
            if (!std::isfinite(gi))
                throw TrainingOverflowError("optimizer: non-finite gradient in '" + name + "'");
            const double mi = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            const double vi = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double update = mhat / (std::sqrt(vhat) + hp.eps) + hp.weight_decay * w[i];
            w[i] = static_cast<float>(w[i] - lr * update);
        }
    }
}

double clip_global_grad_norm(const std::vector<std::pair<std::string, Tensor<float>*>>& params,
                             double max_norm) {
    double ss = 0.0;
    for (const auto& [name, p] : params) {
        if (!p->has_grad()) continue;
        for (float g : p->grad()) ss += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(ss);
    if (norm > max_norm && norm > 0.0) {
        const float scale = static_cast<float>(max_norm / norm);
        for (const auto& [name, p] : params) {
            if (!p->has_grad()) continue;
            for (float& g : p->grad_buffer()) g *= scale;
        }
    }
    return norm;
}

nlohmann::ordered_json metric_to_json(const MetricRecord& r) {
    return nlohmann::ordered_json{{"stage", r.stage}, {"step", r.step},   {"lr", r.lr},
                                  {"loss", r.loss},   {"split", r.split}, {"metric_name", r.metric_name},
                                  {"value", r.value}, {"seed", r.seed}};
}

namespace {

// Deterministic epoch shuffling over sample indices.
class BatchSampler {
public:
    BatchSampler(size_t n, uint64_t seed) : n_(n), seed_(seed) { reshuffle(); }

    size_t next() {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        return order_[cursor_++];
    }

private:
    void reshuffle() {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), size_t{0});
        Rng rng(seed_ ^ (0x5851f42d4c957f2dull * (epoch_ + 1)));
        rng.shuffle(order_);
        cursor_ = 0;
    }

    size_t n_;
    uint64_t seed_;
    uint64_t epoch_ = 0;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

std::vector<std::pair<std::string, Tensor<float>*>> trainable_params(Model<float>& model) {
    std::vector<std::pair<std::string, Tensor<float>*>> params;
    visit_params(model, [&](const std::string& name, Tensor<float>& t) {
        if (t.trainable()) params.emplace_back(name, &t);
    });
    return params;
}

}  // namespace

StageReport run_stage(Model<float>& model, const TrainStageConfig& cfg, const StageData& data) {
    if (data.train == nullptr || data.train->empty()) throw ValueError("run_stage: no training data");
    apply_trainable_set(model, stage_trainable_modules(cfg.stage));
    auto params = trainable_params(model);
    if (params.empty()) throw ValueError("run_stage: trainable set is empty");
    AdamW opt(params);
    const MMForwardOptions fopt = cfg.forward_options();
    const std::string name = stage_name(cfg.stage);

    StageReport report;
    report.stage = cfg.stage;
    BatchSampler sampler(data.train->size(), cfg.seed);
    const int log_every = std::max(1, cfg.steps / 20);

    for (int step = 0; step < cfg.steps; ++step) {
        for (auto& [pname, p] : params) p->zero_grad();
        double loss_sum = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const Sample& sample = (*data.train)[sampler.next()];
            Tape<float> tape;
            Tensor<float> loss = sample_loss(&tape, model, sample, fopt);
            const float lv = loss.item();
            if (!std::isfinite(lv))
                throw TrainingOverflowError(
                    name + ": training loss overflowed to non-finite at step " + std::to_string(step) +
                    "; joint training at a high learning rate is unstable - lower the stage rate or "
                    "split pre-training");
            loss_sum += lv;
            Tensor<float> scaled = ops::scale(&tape, loss, 1.0f / static_cast<float>(cfg.batch_size));
            tape.backward(scaled);
        }
        if (cfg.clip_grad_norm > 0.0) clip_global_grad_norm(params, cfg.clip_grad_norm);
        const double lr = lr_at(cfg, step);
        opt.step(lr, cfg);
        const double mean_loss = loss_sum / cfg.batch_size;
        report.loss_trajectory.push_back(mean_loss);
        if (step % log_every == 0 || step + 1 == cfg.steps) {
            report.records.push_back(
                {name, step, lr, mean_loss, "train", "loss", mean_loss, cfg.seed});
        }
    }

    const double final_loss =
        report.loss_trajectory.empty() ? 0.0 : report.loss_trajectory.back();
    report.final_metrics["train_loss"] = final_loss;
    if (data.heldout_text != nullptr) {
        const float tl = eval_text_loss(model, *data.heldout_text, data.eval_samples);
        report.final_metrics["text_loss"] = tl;
        report.records.push_back({name, cfg.steps, 0.0, final_loss, "heldout", "text_loss", tl, cfg.seed});
    }
    if (data.heldout_caption != nullptr && model.adaptor) {
        const double acc = eval_caption_exact_match(model, *data.heldout_caption, data.eval_samples, fopt);
        report.final_metrics["caption_exact_match"] = acc;
        report.records.push_back(
            {name, cfg.steps, 0.0, final_loss, "heldout", "caption_exact_match", acc, cfg.seed});
    }
    if (data.heldout_grounding != nullptr && model.adaptor) {
        const double iou = eval_grounding_iou(model, *data.heldout_grounding, data.eval_samples, fopt);
        report.final_metrics["grounding_iou"] = iou;
        report.records.push_back(
            {name, cfg.steps, 0.0, final_loss, "heldout", "grounding_iou", iou, cfg.seed});
    }
    return report;
}

float eval_text_loss(const Model<float>& model, const std::vector<Sample>& samples, int max_n) {
    const int n = std::min<int>(max_n, static_cast<int>(samples.size()));
    if (n == 0) throw ValueError("eval_text_loss: no samples");
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
        acc += sample_loss<float>(nullptr, model, samples[static_cast<size_t>(i)], {}).item();
    return static_cast<float>(acc / n);
}

double eval_caption_exact_match(const Model<float>& model, const std::vector<Sample>& samples, int max_n,
                                const MMForwardOptions& opt) {
    const int n = std::min<int>(max_n, static_cast<int>(samples.size()));
    if (n == 0) throw ValueError("eval_caption_exact_match: no samples");
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        const Sample& s = samples[static_cast<size_t>(i)];
        WorkflowRequest req{WorkflowMode::Multimodal, s.prompt_ids, s.image,
                            static_cast<int>(s.response_ids.size()) + 4, true};
        const auto gen = generate<float>(model.backbone, &*model.adaptor, req, opt);
        if (gen.tokens == s.response_ids) ++hits;
    }
    return static_cast<double>(hits) / n;
}

double eval_grounding_iou(const Model<float>& model, const std::vector<Sample>& samples, int max_n,
                          const MMForwardOptions& opt) {
    double iou_sum = 0.0;
    int n_single = 0;
    for (const auto& s : samples) {
        if (s.boxes.size() != 1 || s.prompt_ids.size() < 2 || s.prompt_ids[1] != vocab::LOCATE_Q)
            continue;
        if (n_single == max_n) break;
        ++n_single;
        WorkflowRequest req{WorkflowMode::Multimodal, s.prompt_ids, s.image,
                            static_cast<int>(s.response_ids.size()) + 4, true};
        const auto gen = generate<float>(model.backbone, &*model.adaptor, req, opt);
        const auto boxes = decode_all_boxes(gen.tokens);
        if (!boxes.empty()) iou_sum += box_iou(boxes.front(), s.boxes.front());
    }
    if (n_single == 0) throw ValueError("eval_grounding_iou: no single-target samples");
    return iou_sum / n_single;
}

std::vector<std::vector<int>> reference_prompts() {
    std::vector<std::vector<int>> prompts;
    for (int p = 0; p < 4; ++p) {
        std::vector<int> ids{vocab::BOS};
        for (int i = 0; i < 7; ++i)
            ids.push_back(vocab::WORD_BASE + (p * 37 + i * 11) % vocab::WORD_COUNT);
        prompts.push_back(std::move(ids));
    }
    return prompts;
}

std::vector<std::vector<int>> greedy_reference_outputs(const Model<float>& model, int new_tokens) {
    std::vector<std::vector<int>> outs;
    for (const auto& prompt : reference_prompts()) {
        WorkflowRequest req{WorkflowMode::TextOnly, prompt, std::nullopt, new_tokens, false};
        outs.push_back(generate<float>(model.backbone, nullptr, req).tokens);
    }
    return outs;
}

TextPretrainReport train_text_lm(Model<float>& model, const std::vector<Sample>& corpus, int steps,
                                 double lr, int batch_size, uint64_t seed) {
    if (corpus.empty()) throw ValueError("train_text_lm: empty corpus");
    TrainStageConfig cfg = default_stage_config(Stage::TextPretrain);
    cfg.steps = steps;
    cfg.learning_rate = lr;
    cfg.batch_size = batch_size;
    cfg.seed = seed;

    const std::vector<Sample> train = split_train(corpus);
    const std::vector<Sample> heldout = split_heldout(corpus);
    TextPretrainReport report;
    if (steps > 0) {
        StageData data;
        data.train = &train;
        StageReport stage = run_stage(model, cfg, data);
        report.loss_trajectory = std::move(stage.loss_trajectory);
    }
    report.heldout_loss = eval_text_loss(model, heldout, kTextEvalSamples);
    report.greedy_refs = greedy_reference_outputs(model);
    report.backbone_hash = backbone_hash(model.backbone);
    return report;
}

}  // namespace innerlm
