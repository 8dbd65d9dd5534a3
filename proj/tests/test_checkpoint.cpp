#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "innerlm/checkpoint.hpp"

using namespace innerlm;

namespace {

Model<float> sample_model() {
    BackboneConfig cfg;
    cfg.vocab_size = 96;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_hidden = 48;
    cfg.max_seq_len = 64;
    cfg.seed = 71;
    Model<float> m;
    m.backbone = build_backbone<float>(cfg);
    AdaptorConfig a;
    a.variant = Variant::B;
    a.depths = {1, 2};
    a.gate_mode = GateMode::Scalar;
    a.patch = 4;
    a.feat_width = 8;
    a.seed = 73;
    m.adaptor = init_adaptor(m.backbone, a);
    // Perturb a few tensors so the file is not just the seeded init.
    m.backbone.el_text.data()[5] = 42.0f;
    m.adaptor->insertions[0].gate.data()[0] = 0.125f;
    return m;
}

Provenance sample_prov() {
    Provenance p;
    p.stage = "Stage2-PT";
    p.seed = 9;
    p.step = 123;
    p.data.seed = 77;
    p.backbone_hash = "abc";
    p.ref_text_loss_bits = 0x3f800000u;
    p.ref_greedy = {{1, 2, 3}, {4, 5}};
    return p;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct TempFile {
    explicit TempFile(std::string p) : path(std::move(p)) {}
    ~TempFile() { std::remove(path.c_str()); }
    std::string path;
};

}  // namespace

TEST_CASE("save then load reproduces every tensor byte for byte") {
    TempFile f("ckpt_roundtrip.bin");
    Model<float> m = sample_model();
    save_checkpoint(m, sample_prov(), f.path);
    Checkpoint back = load_checkpoint(f.path);

    std::map<std::string, std::vector<float>> orig, loaded;
    visit_params(m, [&](const std::string& n, Tensor<float>& t) { orig[n] = t.values(); });
    visit_params(back.model, [&](const std::string& n, Tensor<float>& t) { loaded[n] = t.values(); });
    CHECK(orig == loaded);

    CHECK(back.model.backbone.cfg.vocab_size == 96);
    REQUIRE(back.model.adaptor.has_value());
    CHECK(back.model.adaptor->cfg.variant == Variant::B);
    CHECK(back.model.adaptor->cfg.depths == std::vector<int>{1, 2});
    REQUIRE(back.model.adaptor->cfg.gate_mode.has_value());
    CHECK(*back.model.adaptor->cfg.gate_mode == GateMode::Scalar);

    CHECK(back.provenance.stage == "Stage2-PT");
    CHECK(back.provenance.step == 123);
    CHECK(back.provenance.data.seed == 77);
    REQUIRE(back.provenance.ref_text_loss_bits.has_value());
    CHECK(*back.provenance.ref_text_loss_bits == 0x3f800000u);
    CHECK(back.provenance.ref_greedy == sample_prov().ref_greedy);

    // Loaded checkpoints come back frozen.
    bool any_trainable = false;
    visit_params(back.model, [&](const std::string&, Tensor<float>& t) {
        any_trainable = any_trainable || t.trainable();
    });
    CHECK(!any_trainable);
}

TEST_CASE("truncating the file by one byte raises a truncation error") {
    TempFile f("ckpt_trunc.bin");
    Model<float> m = sample_model();
    save_checkpoint(m, sample_prov(), f.path);
    std::string bytes = slurp(f.path);
    bytes.pop_back();
    spit(f.path, bytes);
    CHECK_THROWS_AS((void)load_checkpoint(f.path), IoError);
}

TEST_CASE("editing the header raises a hash mismatch") {
    TempFile f("ckpt_edit.bin");
    Model<float> m = sample_model();
    save_checkpoint(m, sample_prov(), f.path);
    std::string bytes = slurp(f.path);
    // Flip a digit inside the header JSON (the provenance step value) while
    // keeping it valid JSON.
    const size_t pos = bytes.find("123");
    REQUIRE(pos != std::string::npos);
    bytes[pos] = '9';
    spit(f.path, bytes);
    try {
        (void)load_checkpoint(f.path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("hash mismatch") != std::string::npos);
    }
}

TEST_CASE("version and magic mismatches raise distinct format errors") {
    TempFile f("ckpt_version.bin");
    Model<float> m = sample_model();
    save_checkpoint(m, sample_prov(), f.path);
    std::string bytes = slurp(f.path);

    std::string wrong_version = bytes;
    wrong_version[8] = 9;  // little-endian u32 version after the 8-byte magic
    spit(f.path, wrong_version);
    try {
        (void)load_checkpoint(f.path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }

    std::string wrong_magic = bytes;
    wrong_magic[0] = 'X';
    spit(f.path, wrong_magic);
    try {
        (void)load_checkpoint(f.path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }
}

TEST_CASE("trailing bytes after the hash trailer are rejected") {
    TempFile f("ckpt_trailing.bin");
    Model<float> m = sample_model();
    save_checkpoint(m, sample_prov(), f.path);
    std::string bytes = slurp(f.path);
    bytes.push_back('\0');
    spit(f.path, bytes);
    CHECK_THROWS_AS((void)load_checkpoint(f.path), FormatError);
}

TEST_CASE("missing file raises an io error") {
    CHECK_THROWS_AS((void)load_checkpoint("no_such_checkpoint.bin"), IoError);
}
