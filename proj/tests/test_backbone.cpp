#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "innerlm/backbone.hpp"
#include "innerlm/data.hpp"
#include "innerlm/kvcache.hpp"
#include "innerlm/model.hpp"

using namespace innerlm;

namespace {

// Small configuration to keep forward passes cheap.
BackboneConfig small_cfg() {
    BackboneConfig cfg;
    cfg.vocab_size = 96;
    cfg.d_model = 32;
    cfg.n_layers = 3;
    cfg.n_heads = 2;
    cfg.ffn_hidden = 64;
    cfg.max_seq_len = 64;
    cfg.seed = 7;
    return cfg;
}

std::vector<int> tokens_of(int n, uint64_t seed, int vocab) {
    Rng rng(seed);
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) ids.push_back(rng.uniform_int(0, vocab - 1));
    return ids;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("build_backbone is deterministic for a given seed") {
    Backbone<float> a = build_backbone<float>(small_cfg());
    Backbone<float> b = build_backbone<float>(small_cfg());
    bool equal = true;
    visit_params(a, [&](const std::string& name, Tensor<float>& t) {
        visit_params(b, [&](const std::string& name2, Tensor<float>& t2) {
            if (name == name2) equal = equal && t.equals(t2);
        });
    });
    CHECK(equal);
    CHECK(backbone_hash(a) == backbone_hash(b));

    BackboneConfig other = small_cfg();
    other.seed = 8;
    Backbone<float> c = build_backbone<float>(other);
    CHECK(backbone_hash(a) != backbone_hash(c));
}

TEST_CASE("every layer has the same parameter count, total matches closed form") {
    const BackboneConfig cfg = small_cfg();
    Backbone<float> b = build_backbone<float>(cfg);
    // Independent hand count: four attention mats, two norms, three ffn mats.
    const int64_t d = cfg.d_model, f = cfg.ffn_hidden, v = cfg.vocab_size;
    const int64_t per_layer = 4 * d * d + 2 * d + d * f + d * f + f * d;
    for (auto& layer : b.layers) {
        int64_t count = 0;
        visit_layer_params(layer, "x", [&](const std::string&, Tensor<float>& t) { count += t.numel(); });
        CHECK(count == per_layer);
        CHECK(count == layer_param_count(cfg));
    }
    int64_t total = 0;
    visit_params(b, [&](const std::string&, Tensor<float>& t) { total += t.numel(); });
    CHECK(total == v * d + cfg.n_layers * per_layer + d + d * v);
    CHECK(total == backbone_param_count(cfg));
}

TEST_CASE("config validation") {
    BackboneConfig cfg = small_cfg();
    cfg.n_heads = 5;  // 32 % 5 != 0
    CHECK_THROWS_AS((void)build_backbone<float>(cfg), ValueError);
    cfg = small_cfg();
    cfg.n_layers = 0;
    CHECK_THROWS_AS((void)build_backbone<float>(cfg), ValueError);
}

TEST_CASE("causality: changing a later token leaves earlier logits bit-identical") {
    Backbone<float> b = build_backbone<float>(small_cfg());
    auto ids = tokens_of(12, 3, b.cfg.vocab_size);
    Tensor<float> base = text_forward<float>(nullptr, b, ids, nullptr);
    auto mutated = ids;
    mutated[9] = (mutated[9] + 17) % b.cfg.vocab_size;
    Tensor<float> after = text_forward<float>(nullptr, b, mutated, nullptr);
    const int v = b.cfg.vocab_size;
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < v; ++j)
            CHECK(base.data()[i * v + j] == after.data()[i * v + j]);
    // And the mutated row does change.
    double diff = 0.0;
    for (int j = 0; j < v; ++j)
        diff = std::max(diff, std::abs(static_cast<double>(base.data()[9 * v + j]) - after.data()[9 * v + j]));
    CHECK(diff > 0.0);
}

TEST_CASE("single token with empty cache equals first row of full forward") {
    Backbone<float> b = build_backbone<float>(small_cfg());
    auto ids = tokens_of(6, 4, b.cfg.vocab_size);
    Tensor<float> full = text_forward<float>(nullptr, b, ids, nullptr);
    KVCache<float> cache(b.cfg.n_layers, 0);
    Tensor<float> one = text_forward<float>(nullptr, b, {ids[0]}, &cache);
    const int v = b.cfg.vocab_size;
    for (int j = 0; j < v; ++j) CHECK(one.data()[j] == full.data()[j]);
}

TEST_CASE("incremental forward with cache matches full recompute") {
    Backbone<float> b = build_backbone<float>(small_cfg());
    auto ids = tokens_of(10, 5, b.cfg.vocab_size);
    Tensor<float> full = text_forward<float>(nullptr, b, ids, nullptr);

    KVCache<float> cache(b.cfg.n_layers, 0);
    Tensor<float> last;
    for (size_t i = 0; i < ids.size(); ++i) {
        last = text_forward<float>(nullptr, b, {ids[i]}, &cache);
        cache.check_coherent();
    }
    CHECK(cache.length() == static_cast<int>(ids.size()));
    const int v = b.cfg.vocab_size;
    double diff = 0.0;
    for (int j = 0; j < v; ++j)
        diff = std::max(diff, std::abs(static_cast<double>(last.data()[j]) -
                                       full.data()[(ids.size() - 1) * v + j]));
    CHECK(diff < 1e-5);
}

TEST_CASE("sequence overflow beyond max_seq_len raises") {
    BackboneConfig cfg = small_cfg();
    cfg.max_seq_len = 8;
    Backbone<float> b = build_backbone<float>(cfg);
    CHECK_THROWS_AS((void)text_forward<float>(nullptr, b, tokens_of(9, 6, cfg.vocab_size), nullptr),
                    ValueError);
}

TEST_CASE("empty prompt raises") {
    Backbone<float> b = build_backbone<float>(small_cfg());
    CHECK_THROWS_AS((void)text_forward<float>(nullptr, b, {}, nullptr), ValueError);
}

TEST_CASE("token id out of vocabulary raises") {
    Backbone<float> b = build_backbone<float>(small_cfg());
    CHECK_THROWS_AS((void)text_forward<float>(nullptr, b, {b.cfg.vocab_size}, nullptr), ValueError);
}

TEST_CASE("kv cache is rejected during recorded (training) forwards") {
    Backbone<float> b = build_backbone<float>(small_cfg());
    visit_params(b, [](const std::string&, Tensor<float>& t) { t.set_trainable(true); });
    KVCache<float> cache(b.cfg.n_layers, 0);
    Tape<float> tape;
    CHECK_THROWS_AS((void)text_forward<float>(&tape, b, {1, 2, 3}, &cache), ValueError);
}

TEST_CASE("text workflow purity: graph never touches adaptor tensors") {
    Backbone<float> b = build_backbone<float>(small_cfg());
    visit_params(b, [](const std::string&, Tensor<float>& t) { t.set_trainable(true); });

    AdaptorConfig acfg;
    acfg.depths = {2, 3};
    acfg.variant = Variant::C;
    acfg.gate_mode.reset();
    AdaptorStack<float> stack = init_adaptor(b, acfg);
    std::set<uint64_t> adaptor_ids;
    visit_params(stack, [&](const std::string&, Tensor<float>& t) { adaptor_ids.insert(t.id()); });

    Tape<float> tape;
    (void)text_forward<float>(&tape, b, {1, 2, 3, 4}, nullptr);
    bool clean = true;
    tape.visit_tensor_ids([&](uint64_t id) { clean = clean && adaptor_ids.count(id) == 0; });
    CHECK(clean);
    CHECK(tape.size() > 0);
}
