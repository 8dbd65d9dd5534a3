#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "innerlm/pipeline.hpp"
#include "innerlm/trainer.hpp"
#include "innerlm/verify.hpp"

using namespace innerlm;

namespace {

BackboneConfig small_cfg() {
    BackboneConfig cfg;
    cfg.vocab_size = 512;  // full vocabulary so generated datasets fit
    cfg.d_model = 32;
    cfg.n_layers = 3;
    cfg.n_heads = 2;
    cfg.ffn_hidden = 64;
    cfg.max_seq_len = 96;
    cfg.seed = 29;
    return cfg;
}

Model<float> small_model(Variant v = Variant::C) {
    Model<float> m;
    m.backbone = build_backbone<float>(small_cfg());
    AdaptorConfig a;
    a.variant = v;
    a.depths = {2, 3};
    a.gate_mode.reset();
    a.patch = 4;
    a.feat_width = 16;
    a.seed = 31;
    m.adaptor = init_adaptor(m.backbone, a);
    return m;
}

std::map<std::string, std::vector<float>> snapshot(Model<float>& m) {
    std::map<std::string, std::vector<float>> snap;
    visit_params(m, [&](const std::string& name, Tensor<float>& t) { snap[name] = t.values(); });
    return snap;
}

}  // namespace

TEST_CASE("lr schedule: warmup start, peak, cosine endpoint, continuity") {
    TrainStageConfig cfg = default_stage_config(Stage::Stage1PT);
    cfg.steps = 400;
    cfg.learning_rate = 1e-3;
    const int warmup = static_cast<int>(std::floor(cfg.warmup_ratio * cfg.steps));  // 12
    CHECK(lr_at(cfg, 0) == 0.0);
    CHECK(lr_at(cfg, warmup) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(lr_at(cfg, cfg.steps) == doctest::Approx(0.0).epsilon(1e-12));
    // Continuity at the junction and non-negativity everywhere.
    CHECK(std::abs(lr_at(cfg, warmup) - lr_at(cfg, warmup - 1)) < 1.2e-4);
    double prev = lr_at(cfg, warmup);
    for (int s = 0; s <= cfg.steps; ++s) {
        const double v = lr_at(cfg, s);
        CHECK(v >= 0.0);
        if (s > warmup) {
            CHECK(v <= prev);  // cosine decay is monotone after warmup
            prev = v;
        }
    }
    CHECK_THROWS_AS((void)lr_at(cfg, -1), ValueError);
    CHECK_THROWS_AS((void)lr_at(cfg, cfg.steps + 1), ValueError);
}

TEST_CASE("adamw single step matches an independent formula evaluation bit for bit") {
    Tensor<float> p = Tensor<float>::from({3}, {1.0f, -2.0f, 0.5f});
    p.set_trainable(true);
    p.grad_buffer() = {0.1f, -0.3f, 0.02f};
    const std::vector<float> w0 = p.values();
    const std::vector<float> g = p.grad();

    TrainStageConfig hp = default_stage_config(Stage::Stage2PT);
    AdamW opt({{"p", &p}});
    const double lr = 3e-4;
    opt.step(lr, hp);

    for (int i = 0; i < 3; ++i) {
        const double gi = g[static_cast<size_t>(i)];
        const double m = (1.0 - hp.beta1) * gi;
        const double v = (1.0 - hp.beta2) * gi * gi;
        const double mhat = m / (1.0 - hp.beta1);
        const double vhat = v / (1.0 - hp.beta2);
        const float mf = static_cast<float>(m);
        const float vf = static_cast<float>(v);
        (void)mf;
        (void)vf;
        const float expect = static_cast<float>(w0[static_cast<size_t>(i)] -
                                                lr * (mhat / (std::sqrt(vhat) + hp.eps) +
                                                      hp.weight_decay * w0[static_cast<size_t>(i)]));
        CHECK(p.values()[static_cast<size_t>(i)] == expect);
    }
}

TEST_CASE("adamw under constant gradient approaches a sign-like step of magnitude lr") {
    Tensor<float> p = Tensor<float>::from({2}, {0.0f, 0.0f});
    p.set_trainable(true);
    TrainStageConfig hp = default_stage_config(Stage::Stage2PT);
    AdamW opt({{"p", &p}});
    const double lr = 1e-3;
    float prev0 = 0.0f;
    float delta = 0.0f;
    for (int s = 0; s < 200; ++s) {
        p.grad_buffer()[0] = 0.37f;
        p.grad_buffer()[1] = -0.8f;
        prev0 = p.values()[0];
        opt.step(lr, hp);
        delta = p.values()[0] - prev0;
    }
    CHECK(std::abs(std::abs(delta) - lr) < 0.1 * lr);
    CHECK(delta < 0.0f);                  // moves against the gradient
    CHECK(p.values()[1] > 0.0f);          // opposite sign gradient moves up
}

TEST_CASE("adamw: zero gradient with zero weight decay leaves parameters unchanged") {
    Tensor<float> p = Tensor<float>::from({2}, {1.5f, -0.25f});
    p.set_trainable(true);
    TrainStageConfig hp = default_stage_config(Stage::Stage2PT);
    REQUIRE(hp.weight_decay == 0.0);
    AdamW opt({{"p", &p}});
    const std::vector<float> before = p.values();
    for (int s = 0; s < 5; ++s) opt.step(1e-3, hp);  // grads never populated
    CHECK(p.values() == before);
}

TEST_CASE("adamw refuses frozen parameters and non-finite gradients") {
    Tensor<float> frozen = Tensor<float>::from({1}, {1.0f});
    CHECK_THROWS_AS(AdamW({{"frozen", &frozen}}), ValueError);

    Tensor<float> p = Tensor<float>::from({1}, {1.0f});
    p.set_trainable(true);
    p.grad_buffer()[0] = std::numeric_limits<float>::infinity();
    AdamW opt({{"p", &p}});
    TrainStageConfig hp = default_stage_config(Stage::Stage2PT);
    CHECK_THROWS_AS(opt.step(1e-3, hp), TrainingOverflowError);
}

TEST_CASE("global gradient norm clipping") {
    Tensor<float> a = Tensor<float>::from({2}, {0.0f, 0.0f});
    Tensor<float> b = Tensor<float>::from({1}, {0.0f});
    a.set_trainable(true);
    b.set_trainable(true);
    a.grad_buffer() = {3.0f, 0.0f};
    b.grad_buffer() = {4.0f};
    std::vector<std::pair<std::string, Tensor<float>*>> params{{"a", &a}, {"b", &b}};
    const double norm = clip_global_grad_norm(params, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(b.grad()[0] == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("run_stage: only the stage's trainable modules change") {
    const auto caption = gen_caption_pairs(41, 64);
    const auto train = split_train(caption);

    Model<float> m = small_model();
    auto before = snapshot(m);

    TrainStageConfig cfg = default_stage_config(Stage::Stage1PT);
    cfg.steps = 3;
    cfg.batch_size = 4;
    StageData data;
    data.train = &train;
    (void)run_stage(m, cfg, data);

    bool projector_changed = false;
    visit_params(m, [&](const std::string& name, Tensor<float>& t) {
        const bool changed = before.at(name) != t.values();
        const Module mod = module_of_param(name);
        if (mod == Module::Projector) {
            projector_changed = projector_changed || changed;
        } else {
            CHECK_MESSAGE(!changed, name, " changed outside the stage-1 trainable set");
        }
    });
    CHECK(projector_changed);

    // Stage 2 widens the set to the inner adaptor; backbone must stay frozen.
    before = snapshot(m);
    TrainStageConfig cfg2 = default_stage_config(Stage::Stage2PT);
    cfg2.steps = 3;
    cfg2.batch_size = 4;
    cfg2.learning_rate = 1e-3;
    (void)run_stage(m, cfg2, data);
    const auto allowed = stage_trainable_modules(Stage::Stage2PT);
    visit_params(m, [&](const std::string& name, Tensor<float>& t) {
        const bool changed = before.at(name) != t.values();
        if (changed) CHECK(allowed.count(module_of_param(name)) == 1);
        if (is_backbone_module(module_of_param(name)))
            CHECK_MESSAGE(!changed, name, " (backbone) changed during stage 2");
    });
}

TEST_CASE("run_stage is deterministic given (seed, config, data)") {
    const auto caption = gen_caption_pairs(43, 64);
    const auto train = split_train(caption);
    TrainStageConfig cfg = default_stage_config(Stage::Stage2PT);
    cfg.steps = 4;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    StageData data;
    data.train = &train;

    Model<float> m1 = small_model();
    Model<float> m2 = small_model();
    StageReport r1 = run_stage(m1, cfg, data);
    StageReport r2 = run_stage(m2, cfg, data);
    CHECK(r1.loss_trajectory == r2.loss_trajectory);
    auto s1 = snapshot(m1), s2 = snapshot(m2);
    CHECK(s1 == s2);
}

TEST_CASE("train_text_lm: zero steps is a no-op; the backbone learns the corpus") {
    const auto corpus = gen_text_corpus(47, 256, 24);
    Model<float> m;
    m.backbone = build_backbone<float>(small_cfg());
    auto before = snapshot(m);
    TextPretrainReport r0 = train_text_lm(m, corpus, 0, 1e-3, 4, 1);
    CHECK(snapshot(m) == before);

    TextPretrainReport r = train_text_lm(m, corpus, 40, 1e-3, 8, 1);
    CHECK(r.loss_trajectory.front() > r.loss_trajectory.back());
    CHECK(r.heldout_loss < std::log(512.0));  // strictly below the uniform baseline
    CHECK(r.backbone_hash.size() == 64);
}

TEST_CASE("overflow aborts with a diagnostic") {
    const auto caption = gen_caption_pairs(53, 32);
    const auto train = split_train(caption);
    Model<float> m = small_model();
    TrainStageConfig cfg = default_stage_config(Stage::Stage2PT);
    cfg.steps = 40;
    cfg.batch_size = 2;
    cfg.learning_rate = 3e3;  // absurd on purpose
    cfg.warmup_ratio = 0.0;
    StageData data;
    data.train = &train;
    CHECK_THROWS_AS((void)run_stage(m, cfg, data), TrainingOverflowError);
}

TEST_CASE("stage trainable sets match the schedule table") {
    CHECK(stage_trainable_modules(Stage::Stage1PT) == std::set<Module>{Module::Projector});
    const std::set<Module> adaptor_set{Module::Projector, Module::InsertionLayers, Module::Gates,
                                       Module::MMEmbed, Module::MMHead};
    CHECK(stage_trainable_modules(Stage::Stage2PT) == adaptor_set);
    CHECK(stage_trainable_modules(Stage::InstructionFT) == adaptor_set);
    CHECK(stage_trainable_modules(Stage::GroundingFT) == adaptor_set);
    auto unfrozen = stage_trainable_modules(Stage::UnfrozenBaseline);
    CHECK(unfrozen.count(Module::BackboneLayers) == 1);
    CHECK(unfrozen.count(Module::Projector) == 1);
}

TEST_CASE("optimizer state exists only for the trainable set") {
    Model<float> m = small_model();
    apply_trainable_set(m, stage_trainable_modules(Stage::Stage1PT));
    std::vector<std::pair<std::string, Tensor<float>*>> params;
    visit_params(m, [&](const std::string& name, Tensor<float>& t) {
        if (t.trainable()) params.emplace_back(name, &t);
    });
    AdamW opt(params);
    CHECK(opt.param_count() == 4);  // projector: two matrices, two biases
}
