#include "innerlm/verify.hpp"

#include <bit>
#include <cmath>
#include <sstream>

#include "innerlm/gradcheck.hpp"
#include "innerlm/pipeline.hpp"
#include "innerlm/runtime.hpp"
#include "innerlm/trainer.hpp"

namespace innerlm {

namespace {

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    return m;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

GridImage random_test_image(uint64_t seed, int size) {
    Rng rng(seed);
    GridImage img;
    img.width = size;
    img.height = size;
    img.pixels.resize(static_cast<size_t>(size) * size);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
}

std::vector<int> random_test_tokens(uint64_t seed, int len, int vocab_size) {
    Rng rng(seed);
    const int lo = vocab_size > vocab::WORD_BASE + 1 ? vocab::WORD_BASE : 0;
    std::vector<int> ids{vocab::BOS % vocab_size};
    for (int i = 1; i < len; ++i) ids.push_back(rng.uniform_int(lo, vocab_size - 1));
    return ids;
}

CheckResult check_zero_gate_identity(Model<float>& model, int n_inputs, double tol) {
    double worst = 0.0;
    for (Variant variant : {Variant::A, Variant::B}) {
        AdaptorConfig acfg = model.adaptor ? model.adaptor->cfg : AdaptorConfig{};
        acfg.variant = variant;
        acfg.gate_mode.reset();
        AdaptorStack<float> fresh = init_adaptor(model.backbone, acfg);
        for (int i = 0; i < n_inputs; ++i) {
            const GridImage img = random_test_image(0xA11CE + static_cast<uint64_t>(i), 16);
            const auto tokens = random_test_tokens(0xB0B + static_cast<uint64_t>(i), 6, model.backbone.cfg.vocab_size);
            Tensor<float> with = mm_forward<float>(nullptr, model.backbone, fresh, img, tokens,
                                                   {true, true}, nullptr);
            Tensor<float> without = mm_forward<float>(nullptr, model.backbone, fresh, img, tokens,
                                                      {false, true}, nullptr);
            worst = std::max(worst, max_abs_diff(with, without));
        }
    }
    return {"zero_gate_identity", worst < tol, "max |diff| = " + fmt(worst) + " over variants A/B"};
}

CheckResult check_copy_init_identity(Model<float>& model, int n_inputs, double tol) {
    const int m = model.backbone.cfg.n_layers;
    double worst = 0.0;
    for (int i = 0; i < n_inputs; ++i) {
        const int depth = 1 + i % m;
        AdaptorConfig acfg = model.adaptor ? model.adaptor->cfg : AdaptorConfig{};
        acfg.variant = Variant::C;
        acfg.depths = {depth};
        acfg.gate_mode.reset();
        AdaptorStack<float> fresh = init_adaptor(model.backbone, acfg);
        const GridImage img = random_test_image(0xC0FFEE + static_cast<uint64_t>(i), 16);
        const auto tokens = random_test_tokens(0xD0D0 + static_cast<uint64_t>(i), 6, model.backbone.cfg.vocab_size);
        Tensor<float> logits = mm_forward<float>(nullptr, model.backbone, fresh, img, tokens,
                                                 {true, true}, nullptr);
        // Oracle: the same assembly with backbone layer `depth` applied twice.
        Tensor<float> feats = encode_image(fresh.encoder, img);
        Tensor<float> x = ops::concat_rows<float>(nullptr, project<float>(nullptr, fresh, feats),
                                                  ops::embedding<float>(nullptr, fresh.el_mm, tokens));
        for (int k = 1; k <= m; ++k) {
            x = layer_forward<float>(nullptr, model.backbone.layers[static_cast<size_t>(k - 1)], x,
                                     model.backbone.cfg, nullptr);
            if (k == depth)
                x = layer_forward<float>(nullptr, model.backbone.layers[static_cast<size_t>(k - 1)], x,
                                         model.backbone.cfg, nullptr);
        }
        x = ops::rms_norm<float>(nullptr, x, model.backbone.final_norm);
        Tensor<float> oracle = ops::matmul<float>(nullptr, x, fresh.lh_mm);
        worst = std::max(worst, max_abs_diff(logits, oracle));
    }
    return {"copy_init_identity", worst < tol, "max |diff| = " + fmt(worst) + " across depths"};
}

CheckResult check_parameter_parity(Model<float>& model) {
    const BackboneConfig& bcfg = model.backbone.cfg;
    int64_t counted_backbone = 0;
    visit_params(model.backbone,
                 [&](const std::string&, Tensor<float>& t) { counted_backbone += t.numel(); });
    bool ok = counted_backbone == backbone_param_count(bcfg);
    std::string detail = "backbone " + std::to_string(counted_backbone);
    if (model.adaptor) {
        int64_t per_layer_expected = layer_param_count(bcfg);
        for (auto& ins : model.adaptor->insertions) {
            int64_t n = 0;
            visit_layer_params(ins.layer, "x", [&](const std::string&, Tensor<float>& t) { n += t.numel(); });
            ok = ok && n == per_layer_expected;
        }
        int64_t counted_stack = 0;
        visit_params(*model.adaptor,
                     [&](const std::string&, Tensor<float>& t) { counted_stack += t.numel(); });
        ok = ok && counted_stack == adaptor_total_param_count(model.adaptor->cfg, bcfg);
        detail += ", stack " + std::to_string(counted_stack) + ", per-layer parity vs " +
                  std::to_string(per_layer_expected);
    }
    return {"parameter_parity", ok, detail};
}

CheckResult check_cache_equivalence(Model<float>& model, int decode_tokens, double tol) {
    double worst = 0.0;
    bool tokens_ok = true;
    auto compare = [&](const GenerateResult<float>& a, const GenerateResult<float>& b) {
        tokens_ok = tokens_ok && a.tokens == b.tokens;
        worst = std::max(worst, max_abs_diff(a.prompt_logits, b.prompt_logits));
        const size_t n = std::min(a.step_logits.size(), b.step_logits.size());
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < a.step_logits[i].size(); ++j)
                worst = std::max(worst, std::abs(static_cast<double>(a.step_logits[i][j]) -
                                                 b.step_logits[i][j]));
    };

    // Text workflow.
    WorkflowRequest treq{WorkflowMode::TextOnly,
                         random_test_tokens(0xFEED, 8, model.backbone.cfg.vocab_size), std::nullopt,
                         decode_tokens, false};
    compare(generate<float>(model.backbone, nullptr, treq),
            generate_nocache<float>(model.backbone, nullptr, treq));

    // Multimodal workflow for each structural variant, plus the loaded stack.
    std::vector<AdaptorStack<float>*> stacks;
    std::vector<AdaptorStack<float>> fresh;
    for (Variant v : {Variant::A, Variant::B, Variant::C}) {
        AdaptorConfig acfg = model.adaptor ? model.adaptor->cfg : AdaptorConfig{};
        acfg.variant = v;
        acfg.gate_mode.reset();
        fresh.push_back(init_adaptor(model.backbone, acfg));
    }
    for (auto& s : fresh) stacks.push_back(&s);
    if (model.adaptor) stacks.push_back(&*model.adaptor);
    const GridImage img = random_test_image(0xBEEF, 16);
    for (auto* stack : stacks) {
        WorkflowRequest mreq{WorkflowMode::Multimodal,
                             random_test_tokens(0xFACE, 6, model.backbone.cfg.vocab_size), img,
                             decode_tokens, false};
        compare(generate<float>(model.backbone, stack, mreq),
                generate_nocache<float>(model.backbone, stack, mreq));
    }
    return {"kv_cache_equivalence", tokens_ok && worst < tol,
            std::string(tokens_ok ? "tokens identical" : "TOKEN MISMATCH") +
                ", max |logit diff| = " + fmt(worst)};
}

std::vector<CheckResult> check_stage_gradients(Model<float>& model, int coords_per_stage) {
    std::vector<CheckResult> results;
    if (!model.adaptor) {
        results.push_back({"stage_gradients", false, "no adaptor stack in model"});
        return results;
    }
    const std::vector<Stage> stages = {Stage::TextPretrain, Stage::Stage1PT, Stage::Stage2PT,
                                       Stage::InstructionFT, Stage::GroundingFT,
                                       Stage::UnfrozenBaseline};
    for (Stage stage : stages) {
        Model<double> dm = widen_model(model);
        apply_trainable_set(dm, stage_trainable_modules(stage));

        Sample sample;
        if (stage == Stage::TextPretrain) {
            sample.kind = SampleKind::Text;
            sample.prompt_ids = {vocab::BOS};
            sample.response_ids = random_test_tokens(0x515, 9, model.backbone.cfg.vocab_size);
            sample.response_ids.erase(sample.response_ids.begin());  // drop BOS
        } else {
            sample.kind = SampleKind::Caption;
            sample.image = random_test_image(0x717, 8);  // 4 patches keeps FD affordable
            sample.prompt_ids = {vocab::BOS, vocab::CAPTION_Q, vocab::SEP};
            sample.response_ids = {vocab::SHAPE_BASE, vocab::INTENSITY_BASE, vocab::POS_BASE,
                                   vocab::EOS};
        }
        sample.loss_mask = make_loss_mask(sample.prompt_ids.size(), sample.response_ids.size());

        TrainStageConfig scfg = default_stage_config(stage);
        const MMForwardOptions fopt = scfg.forward_options();
        auto builder = [&](Tape<double>* tape) { return sample_loss<double>(tape, dm, sample, fopt); };

        Rng rng(0x9A9A + static_cast<uint64_t>(stage));
        auto coords = sample_trainable_coords(dm, coords_per_stage, rng);
        const GradCheckReport report = check_gradients(builder, coords, 1e-5);

        // Freezing contract: no frozen tensor may have accumulated gradient,
        // and the tensors that did receive gradient must be trainable.
        bool frozen_clean = true;
        std::string offender;
        visit_params(dm, [&](const std::string& name, Tensor<double>& t) {
            if (!t.trainable() && t.has_grad()) {
                frozen_clean = false;
                offender = name;
            }
        });
        const bool pass = report.pass(1e-4) && frozen_clean;
        results.push_back({"gradients_" + stage_name(stage), pass,
                           "max rel err = " + fmt(report.max_rel_err) + " over " +
                               std::to_string(report.entries.size()) + " coords" +
                               (frozen_clean ? "" : ", frozen tensor got gradient: " + offender)});
    }
    return results;
}

CheckResult check_freeze_hash(Model<float>& model, const Provenance& prov) {
    if (prov.backbone_hash.empty())
        return {"freeze_hash", true, "no reference hash in checkpoint (skipped)"};
    const std::string h = backbone_hash(model.backbone);
    return {"freeze_hash", h == prov.backbone_hash,
            h == prov.backbone_hash ? "backbone hash matches reference"
                                    : "hash " + h + " != reference " + prov.backbone_hash};
}

CheckResult check_text_reference(Model<float>& model, const Provenance& prov) {
    if (!prov.ref_text_loss_bits)
        return {"text_reference", true, "no reference loss in checkpoint (skipped)"};
    const auto corpus = gen_text_corpus(prov.data.seed, prov.data.n_text, prov.data.text_len);
    const auto heldout = split_heldout(corpus);
    const float loss = eval_text_loss(model, heldout, kTextEvalSamples);
    const bool loss_ok = std::bit_cast<uint32_t>(loss) == *prov.ref_text_loss_bits;
    bool greedy_ok = true;
    if (!prov.ref_greedy.empty()) greedy_ok = greedy_reference_outputs(model) == prov.ref_greedy;
    return {"text_reference", loss_ok && greedy_ok,
            "held-out loss " + fmt(loss) + (loss_ok ? " (bits match)" : " (BITS DIFFER)") +
                (greedy_ok ? ", greedy outputs match" : ", GREEDY OUTPUTS DIFFER")};
}

std::vector<CheckResult> verify_model(Model<float>& model, const Provenance& prov,
                                      const VerifyOptions& opt) {
    std::vector<CheckResult> results;
    results.push_back(check_zero_gate_identity(model, opt.identity_inputs, 1e-6));
    results.push_back(check_copy_init_identity(model, opt.identity_inputs, 1e-6));
    results.push_back(check_parameter_parity(model));
    results.push_back(check_cache_equivalence(model, opt.decode_tokens, 1e-5));
    if (opt.run_grad_checks) {
        auto grads = check_stage_gradients(model, opt.grad_coords);
        results.insert(results.end(), grads.begin(), grads.end());
    }
    if (opt.check_references) {
        results.push_back(check_freeze_hash(model, prov));
        results.push_back(check_text_reference(model, prov));
    }
    return results;
}

}  // namespace innerlm
