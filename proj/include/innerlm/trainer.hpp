#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "innerlm/data.hpp"
#include "innerlm/model.hpp"
#include "innerlm/runtime.hpp"

namespace innerlm {

enum class Stage { TextPretrain, Stage1PT, Stage2PT, InstructionFT, GroundingFT, UnfrozenBaseline };

// Held-out sample count used for the byte-identical text-loss reference; the
// pretrain-time value and any later recomputation must agree.
inline constexpr int kTextEvalSamples = 128;

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

// Which modules each stage trains. Stage 1 aligns the projector alone; the
// later stages add the inner adaptor (insertion layers, gates, EL_mm, LH_mm).
// The unfrozen baseline is the contrast harness: it also unfreezes the
// backbone.
std::set<Module> stage_trainable_modules(Stage s);

struct TrainStageConfig {
    Stage stage = Stage::Stage2PT;
    double learning_rate = 2e-5;
    int batch_size = 32;
    double warmup_ratio = 0.03;
    int steps = 500;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    uint64_t seed = 1;
    double clip_grad_norm = 0.0;  // 0 disables; enabled for the unfrozen baseline
    bool use_insertions = true;
    bool use_mm_embed_head = true;  // false reuses frozen EL_text/LH_text in the mm workflow

    MMForwardOptions forward_options() const { return {use_insertions, use_mm_embed_head}; }
};

void to_json(nlohmann::json& j, const TrainStageConfig& c);
void from_json(const nlohmann::json& j, TrainStageConfig& c);

// Stage defaults: trainable sets per stage, forward modes, and the learning
// rates / step counts of the training schedule.
TrainStageConfig default_stage_config(Stage s);

// Linear warmup from zero over floor(warmup_ratio * steps) steps, then cosine
// decay from the peak to zero at `steps`.
double lr_at(const TrainStageConfig& cfg, int step);

// Decoupled-weight-decay Adam with bias correction. Moment buffers exist only
// for the tensors handed in, which must all be trainable.
class AdamW {
public:
    explicit AdamW(std::vector<std::pair<std::string, Tensor<float>*>> params);

    void step(double lr, const TrainStageConfig& hp);
    int64_t step_count() const { return t_; }
    size_t param_count() const { return params_.size(); }

private:
    std::vector<std::pair<std::string, Tensor<float>*>> params_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    int64_t t_ = 0;
};

// Clips the global gradient norm over the given tensors; returns the pre-clip
// norm.
double clip_global_grad_norm(const std::vector<std::pair<std::string, Tensor<float>*>>& params,
                             double max_norm);

// Masked next-token loss for one sample. Text samples run the text workflow;
// image samples run the multimodal workflow. Shared between the float training
// loop and the double-precision gradient checks.
template <typename S>
Tensor<S> sample_loss(Tape<S>* tape, const Model<S>& model, const Sample& sample,
                      const MMForwardOptions& opt) {
    const std::vector<int> ids = sample.token_ids();
    const int t = static_cast<int>(ids.size());
    if (t < 2) throw ValueError("sample_loss: sample too short");
    Tensor<S> logits;
    int rows = 0;
    int text_offset = 0;  // row index that predicts ids[0]
    if (sample.kind == SampleKind::Text) {
        logits = text_forward<S>(tape, model.backbone, ids, nullptr);
        rows = t;
        text_offset = 0;
    } else {
        if (!sample.image || !model.adaptor) throw ValueError("sample_loss: image sample needs adaptor");
        logits = mm_forward<S>(tape, model.backbone, *model.adaptor, *sample.image, ids, opt, nullptr);
        rows = logits.dim(0);
        text_offset = rows - t;
    }
    std::vector<int> targets(static_cast<size_t>(rows), 0);
    std::vector<uint8_t> mask(static_cast<size_t>(rows), 0);
    for (int i = 0; i < rows; ++i) {
        const int next_text = i + 1 - text_offset;  // index into ids predicted by row i
        if (next_text >= 1 && next_text < t) {
            targets[static_cast<size_t>(i)] = ids[static_cast<size_t>(next_text)];
            mask[static_cast<size_t>(i)] = sample.loss_mask[static_cast<size_t>(next_text)];
        }
    }
    return ops::cross_entropy(tape, logits, targets, mask);
}

struct MetricRecord {
    std::string stage;
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::string split;
    std::string metric_name;
    double value = 0.0;
    uint64_t seed = 0;
};

nlohmann::ordered_json metric_to_json(const MetricRecord& r);

struct StageReport {
    Stage stage = Stage::Stage2PT;
    std::vector<double> loss_trajectory;
    std::vector<MetricRecord> records;
    std::map<std::string, double> final_metrics;
};

struct StageData {
    const std::vector<Sample>* train = nullptr;
    const std::vector<Sample>* heldout_caption = nullptr;
    const std::vector<Sample>* heldout_text = nullptr;
    const std::vector<Sample>* heldout_grounding = nullptr;
    int eval_samples = 128;
};

// Runs one training stage: sets trainable flags exactly per config, optimizes
// the masked next-token loss, evaluates held-out metrics at the end. Aborts on
// non-finite loss (joint training at too high a rate overflows; that is why
// the schedule splits pre-training into two stages).
StageReport run_stage(Model<float>& model, const TrainStageConfig& cfg, const StageData& data);

// Held-out metrics.
float eval_text_loss(const Model<float>& model, const std::vector<Sample>& samples, int max_n);
double eval_caption_exact_match(const Model<float>& model, const std::vector<Sample>& samples, int max_n,
                                const MMForwardOptions& opt = {});
double eval_grounding_iou(const Model<float>& model, const std::vector<Sample>& samples, int max_n,
                          const MMForwardOptions& opt = {});

// Language pretraining for the toy backbone; produces the frozen reference
// model plus the held-out loss and greedy continuations that the preservation
// check later compares bit-for-bit.
struct TextPretrainReport {
    std::vector<double> loss_trajectory;
    float heldout_loss = 0.0f;
    std::vector<std::vector<int>> greedy_refs;
    std::string backbone_hash;
};

TextPretrainReport train_text_lm(Model<float>& model, const std::vector<Sample>& corpus, int steps,
                                 double lr, int batch_size, uint64_t seed);

// Fixed prompts used for the byte-identical greedy-output reference.
std::vector<std::vector<int>> reference_prompts();
std::vector<std::vector<int>> greedy_reference_outputs(const Model<float>& model, int new_tokens = 32);

}  // namespace innerlm
