#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "innerlm/checkpoint.hpp"
#include "innerlm/config.hpp"
#include "innerlm/trainer.hpp"

namespace innerlm {

// All four datasets with their parity splits, generated from one DataConfig.
struct GeneratedData {
    std::vector<Sample> text_train, text_heldout;
    std::vector<Sample> caption_train, caption_heldout;
    std::vector<Sample> instruction_train, instruction_heldout;
    std::vector<Sample> grounding_train, grounding_heldout;
    std::vector<Sample> instruction_mix;  // instruction + caption, interleaved
};

GeneratedData generate_datasets(const DataConfig& cfg);

struct PipelineFlags {
    bool unfrozen_baseline = false;  // unfreeze the backbone in stages 2-4 (contrast harness)
    bool skip_stage1 = false;
    bool skip_stage2 = false;
    bool skip_grounding = false;
};

struct PipelineReport {
    std::string hash_before;
    std::string hash_after;
    bool hash_unchanged = false;
    uint32_t ref_text_loss_bits = 0;
    uint32_t post_text_loss_bits = 0;
    float ref_text_loss = 0.0f;
    float post_text_loss = 0.0f;
    bool text_loss_identical = false;
    bool greedy_identical = false;
    bool preservation_pass = false;  // hash + loss bits + greedy outputs all unchanged
    double caption_exact_after_instruction = 0.0;
    double grounding_iou = 0.0;
    std::vector<MetricRecord> records;
    std::vector<std::string> checkpoints;
};

// Executes Stage1-PT -> Stage2-PT -> Instruction-FT -> Grounding-FT starting
// from a pretrained-backbone checkpoint, chaining stages through checkpoint
// files, and emits the NLP-preservation verdict.
PipelineReport run_pipeline(const std::string& backbone_ckpt_path, const RunConfig& rc,
                            const PipelineFlags& flags, const std::string& out_dir, std::ostream* log);

// ---------------------------------------------------------------------------
// Ablation matrix.
// ---------------------------------------------------------------------------

struct AblationCell {
    Variant variant = Variant::C;
    bool duplicate_embed_head = true;  // EL_mm/LH_mm on, or frozen EL_text/LH_text reused
    int n_insertions = 2;
    std::string stage_mode = "full";  // full | skip1 | skip2
    uint64_t seed = 0;
    double caption_exact = 0.0;
    double caption_loss = 0.0;
};

struct AblationReport {
    std::vector<AblationCell> cells;           // one row per (cell, seed)
    std::vector<AblationCell> medians;         // seed field unused; 3-seed medians
    std::vector<std::string> trend_verdicts;   // soft: recorded, never asserted
};

AblationReport run_ablation_matrix(const std::string& backbone_ckpt_path, const RunConfig& rc,
                                   const std::vector<Variant>& variants,
                                   const std::vector<bool>& duplicate_modes,
                                   const std::vector<int>& n_insertions,
                                   const std::vector<std::string>& stage_modes, int n_seeds,
                                   double steps_scale, std::ostream* log);

nlohmann::ordered_json ablation_cell_to_json(const AblationCell& cell, bool is_median);

}  // namespace innerlm
