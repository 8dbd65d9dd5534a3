#include "innerlm/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <ostream>

namespace innerlm {

namespace {

std::vector<Sample> interleave(const std::vector<Sample>& a, const std::vector<Sample>& b) {
    std::vector<Sample> out;
    out.reserve(a.size() + b.size());
    const size_t n = std::max(a.size(), b.size());
    for (size_t i = 0; i < n; ++i) {
        if (i < a.size()) out.push_back(a[i]);
        if (i < b.size()) out.push_back(b[i]);
    }
    return out;
}

double eval_caption_loss(const Model<float>& model, const std::vector<Sample>& samples, int max_n,
                         const MMForwardOptions& opt) {
    const int n = std::min<int>(max_n, static_cast<int>(samples.size()));
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
        acc += sample_loss<float>(nullptr, model, samples[static_cast<size_t>(i)], opt).item();
    return acc / n;
}

}  // namespace

GeneratedData generate_datasets(const DataConfig& cfg) {
    GeneratedData d;
    const auto text = gen_text_corpus(cfg.seed, cfg.n_text, cfg.text_len);
    const auto caption = gen_caption_pairs(cfg.seed, cfg.n_caption, cfg.image_size);
    const auto instruction = gen_instruction_pairs(cfg.seed, cfg.n_instruction, cfg.image_size);
    const auto grounding = gen_grounding_pairs(cfg.seed, cfg.n_grounding, cfg.image_size);
    d.text_train = split_train(text);
    d.text_heldout = split_heldout(text);
    d.caption_train = split_train(caption);
    d.caption_heldout = split_heldout(caption);
    d.instruction_train = split_train(instruction);
    d.instruction_heldout = split_heldout(instruction);
    d.grounding_train = split_train(grounding);
    d.grounding_heldout = split_heldout(grounding);
    d.instruction_mix = interleave(d.instruction_train, d.caption_train);
    return d;
}

PipelineReport run_pipeline(const std::string& backbone_ckpt_path, const RunConfig& rc,
                            const PipelineFlags& flags, const std::string& out_dir, std::ostream* log) {
    Checkpoint ck = load_checkpoint(backbone_ckpt_path);
    Model<float>& model = ck.model;
    Provenance prov = ck.provenance;

    PipelineReport report;
    report.hash_before = backbone_hash(model.backbone);

    const GeneratedData data = generate_datasets(rc.data);

    // Reference values for the preservation verdict; normally written by the
    // pretraining step, recomputed here if the checkpoint predates them.
    if (prov.ref_text_loss_bits) {
        report.ref_text_loss_bits = *prov.ref_text_loss_bits;
    } else {
        const float loss = eval_text_loss(model, data.text_heldout, kTextEvalSamples);
        report.ref_text_loss_bits = std::bit_cast<uint32_t>(loss);
        prov.ref_text_loss_bits = report.ref_text_loss_bits;
    }
    report.ref_text_loss = std::bit_cast<float>(report.ref_text_loss_bits);
    if (prov.ref_greedy.empty()) prov.ref_greedy = greedy_reference_outputs(model);

    if (!model.adaptor) model.adaptor = init_adaptor(model.backbone, rc.adaptor);

    struct StagePlan {
        TrainStageConfig cfg;
        const std::vector<Sample>* train;
        bool enabled;
        std::string tag;
    };
    std::vector<StagePlan> plan = {
        {rc.stage1, &data.caption_train, !flags.skip_stage1, "stage1"},
        {rc.stage2, &data.caption_train, !flags.skip_stage2, "stage2"},
        {rc.instruction, &data.instruction_mix, true, "instruction"},
        {rc.grounding, &data.grounding_train, !flags.skip_grounding, "grounding"},
    };
    if (flags.unfrozen_baseline) {
        for (size_t i = 1; i < plan.size(); ++i) {
            plan[i].cfg.stage = Stage::UnfrozenBaseline;
            plan[i].cfg.clip_grad_norm = 1.0;
        }
    }

    for (auto& step : plan) {
        if (!step.enabled) continue;
        StageData sd;
        sd.train = step.train;
        sd.eval_samples = rc.eval.samples;
        sd.heldout_caption = &data.caption_heldout;
        if (step.tag == "grounding") sd.heldout_grounding = &data.grounding_heldout;
        if (log) *log << "[pipeline] running " << stage_name(step.cfg.stage) << " (" << step.tag
                      << "), steps=" << step.cfg.steps << "\n";
        StageReport sr = run_stage(model, step.cfg, sd);
        report.records.insert(report.records.end(), sr.records.begin(), sr.records.end());
        if (step.tag == "instruction")
            report.caption_exact_after_instruction = sr.final_metrics["caption_exact_match"];
        if (step.tag == "grounding") report.grounding_iou = sr.final_metrics["grounding_iou"];

        // Chain by file so every stage is independently resumable.
        Provenance stage_prov = prov;
        stage_prov.stage = stage_name(step.cfg.stage);
        stage_prov.seed = step.cfg.seed;
        stage_prov.step = step.cfg.steps;
        const std::string path = out_dir + "/after_" + step.tag + ".ckpt";
        save_checkpoint(model, stage_prov, path);
        report.checkpoints.push_back(path);
        Checkpoint reloaded = load_checkpoint(path);
        model = std::move(reloaded.model);
    }

    report.hash_after = backbone_hash(model.backbone);
    report.hash_unchanged = report.hash_before == report.hash_after;
    report.post_text_loss = eval_text_loss(model, data.text_heldout, kTextEvalSamples);
    report.post_text_loss_bits = std::bit_cast<uint32_t>(report.post_text_loss);
    report.text_loss_identical = report.post_text_loss_bits == report.ref_text_loss_bits;
    report.greedy_identical = greedy_reference_outputs(model) == prov.ref_greedy;
    report.preservation_pass =
        report.hash_unchanged && report.text_loss_identical && report.greedy_identical;
    return report;
}

nlohmann::ordered_json ablation_cell_to_json(const AblationCell& cell, bool is_median) {
    nlohmann::ordered_json j{{"variant", variant_name(cell.variant)},
                             {"duplicate_embed_head", cell.duplicate_embed_head},
                             {"n_insertions", cell.n_insertions},
                             {"stage_mode", cell.stage_mode},
                             {"caption_exact", cell.caption_exact},
                             {"caption_loss", cell.caption_loss}};
    if (is_median)
        j["aggregate"] = "median";
    else
        j["seed"] = cell.seed;
    return j;
}

AblationReport run_ablation_matrix(const std::string& backbone_ckpt_path, const RunConfig& rc,
                                   const std::vector<Variant>& variants,
                                   const std::vector<bool>& duplicate_modes,
                                   const std::vector<int>& n_insertions,
                                   const std::vector<std::string>& stage_modes, int n_seeds,
                                   double steps_scale, std::ostream* log) {
    for (const auto& mode : stage_modes)
        if (mode != "full" && mode != "skip1" && mode != "skip2")
            throw ValueError("ablation: unknown stage mode '" + mode + "'");
    if (n_seeds < 1) throw ValueError("ablation: need at least one seed");

    const GeneratedData data = generate_datasets(rc.data);
    AblationReport report;

    auto scaled = [&](TrainStageConfig cfg, uint64_t seed_offset) {
        cfg.steps = std::max(1, static_cast<int>(std::lround(cfg.steps * steps_scale)));
        cfg.seed += seed_offset;
        return cfg;
    };

    for (Variant variant : variants) {
        for (bool dup : duplicate_modes) {
            for (int n : n_insertions) {
                for (const auto& mode : stage_modes) {
                    for (int si = 0; si < n_seeds; ++si) {
                        const uint64_t seed_offset = 1000ull * static_cast<uint64_t>(si);
                        Checkpoint ck = load_checkpoint(backbone_ckpt_path);
                        Model<float> model = std::move(ck.model);
                        AdaptorConfig acfg = rc.adaptor;
                        acfg.variant = variant;
                        acfg.depths = evenly_spaced_depths(n, model.backbone.cfg.n_layers);
                        acfg.gate_mode.reset();
                        model.adaptor = init_adaptor(model.backbone, acfg);

                        auto run_one = [&](TrainStageConfig cfg, const std::vector<Sample>& train) {
                            cfg.use_mm_embed_head = cfg.use_mm_embed_head && dup;
                            StageData sd;
                            sd.train = &train;
                            sd.eval_samples = rc.eval.samples;
                            (void)run_stage(model, cfg, sd);
                        };
                        if (mode != "skip1") run_one(scaled(rc.stage1, seed_offset), data.caption_train);
                        if (mode != "skip2") run_one(scaled(rc.stage2, seed_offset), data.caption_train);
                        run_one(scaled(rc.instruction, seed_offset), data.instruction_mix);

                        MMForwardOptions eval_opt{true, dup};
                        AblationCell cell;
                        cell.variant = variant;
                        cell.duplicate_embed_head = dup;
                        cell.n_insertions = n;
                        cell.stage_mode = mode;
                        cell.seed = seed_offset;
                        cell.caption_exact = eval_caption_exact_match(model, data.caption_heldout,
                                                                      rc.eval.samples, eval_opt);
                        cell.caption_loss =
                            eval_caption_loss(model, data.caption_heldout, rc.eval.samples, eval_opt);
                        report.cells.push_back(cell);
                        if (log)
                            *log << "[ablate] variant=" << variant_name(variant) << " dup=" << dup
                                 << " n=" << n << " mode=" << mode << " seed=" << si
                                 << " exact=" << cell.caption_exact << " loss=" << cell.caption_loss
                                 << "\n";
                    }
                }
            }
        }
    }

    // 3-seed medians per cell.
    auto median_of = [&](Variant v, bool dup, int n, const std::string& mode, bool* found) {
        std::vector<double> exact, loss;
        for (const auto& c : report.cells)
            if (c.variant == v && c.duplicate_embed_head == dup && c.n_insertions == n &&
                c.stage_mode == mode) {
                exact.push_back(c.caption_exact);
                loss.push_back(c.caption_loss);
            }
        *found = !exact.empty();
        AblationCell m;
        m.variant = v;
        m.duplicate_embed_head = dup;
        m.n_insertions = n;
        m.stage_mode = mode;
        if (*found) {
            std::sort(exact.begin(), exact.end());
            std::sort(loss.begin(), loss.end());
            m.caption_exact = exact[exact.size() / 2];
            m.caption_loss = loss[loss.size() / 2];
        }
        return m;
    };
    for (Variant v : variants)
        for (bool dup : duplicate_modes)
            for (int n : n_insertions)
                for (const auto& mode : stage_modes) {
                    bool found = false;
                    AblationCell m = median_of(v, dup, n, mode, &found);
                    if (found) report.medians.push_back(m);
                }

    // Soft trend verdicts over medians at the base slice.
    const int base_n = std::find(n_insertions.begin(), n_insertions.end(), 2) != n_insertions.end()
                           ? 2
                           : n_insertions.front();
    auto lookup = [&](Variant v, bool dup, int n, const std::string& mode) -> const AblationCell* {
        for (const auto& m : report.medians)
            if (m.variant == v && m.duplicate_embed_head == dup && m.n_insertions == n &&
                m.stage_mode == mode)
                return &m;
        return nullptr;
    };
    auto verdict = [&](const std::string& name, const AblationCell* hi, const AblationCell* lo) {
        if (hi == nullptr || lo == nullptr) return;
        const bool ok = hi->caption_exact >= lo->caption_exact;
        report.trend_verdicts.push_back(name + ": " + (ok ? "CONFIRMED" : "REVERSED") + " (" +
                                        std::to_string(hi->caption_exact) + " vs " +
                                        std::to_string(lo->caption_exact) + ")");
    };
    verdict("C >= B (structure)", lookup(Variant::C, true, base_n, "full"),
            lookup(Variant::B, true, base_n, "full"));
    verdict("B >= A (structure)", lookup(Variant::B, true, base_n, "full"),
            lookup(Variant::A, true, base_n, "full"));
    verdict("EL/LH duplication on >= off", lookup(Variant::C, true, base_n, "full"),
            lookup(Variant::C, false, base_n, "full"));
    verdict("full schedule >= skip stage1", lookup(Variant::C, true, base_n, "full"),
            lookup(Variant::C, true, base_n, "skip1"));
    verdict("full schedule >= skip stage2", lookup(Variant::C, true, base_n, "full"),
            lookup(Variant::C, true, base_n, "skip2"));
    return report;
}

}  // namespace innerlm
