#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "innerlm/gradcheck.hpp"
#include "innerlm/tensor.hpp"

using namespace innerlm;

namespace {

// Independent brute-force product, deliberately not the library kernel.
std::vector<double> triple_loop_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                       int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a[static_cast<size_t>(i) * k + p] * b[static_cast<size_t>(p) * n + j];
            c[static_cast<size_t>(i) * n + j] = acc;
        }
    return c;
}

Tensor<double> randt(Shape shape, uint64_t seed, bool trainable = false) {
    Rng rng(seed);
    Tensor<double> t = Tensor<double>::randn(std::move(shape), rng, 1.0);
    t.set_trainable(trainable);
    return t;
}

}  // namespace

TEST_CASE("matmul identity matrix is a no-op") {
    Tensor<float> eye = Tensor<float>::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0f;
    Tensor<float> b = Tensor<float>::from({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor<float> prod = ops::matmul<float>(nullptr, eye, b);
    CHECK(prod.equals(b));
}

TEST_CASE("matmul zero left operand gives zero output") {
    Tensor<float> z = Tensor<float>::zeros({2, 4});
    Rng rng(5);
    Tensor<float> b = Tensor<float>::randn({4, 3}, rng, 1.0);
    Tensor<float> c = ops::matmul<float>(nullptr, z, b);
    for (int64_t i = 0; i < c.numel(); ++i) CHECK(c.data()[i] == 0.0f);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Tensor<double> a = randt({3, 4}, 11);
    Tensor<double> b = randt({4, 2}, 12);
    Tensor<double> c = ops::matmul<double>(nullptr, a, b);
    const auto oracle = triple_loop_matmul(a.values(), b.values(), 3, 4, 2);
    for (size_t i = 0; i < oracle.size(); ++i)
        CHECK(std::abs(c.values()[i] - oracle[i]) < 1e-6);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor<float> a = Tensor<float>::zeros({2, 3});
    Tensor<float> b = Tensor<float>::zeros({4, 2});
    try {
        (void)ops::matmul<float>(nullptr, a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2 x 3]") != std::string::npos);
        CHECK(msg.find("[4 x 2]") != std::string::npos);
    }
}

TEST_CASE("softmax constant, saturated and random rows") {
    Tensor<float> c = Tensor<float>::full({4}, 3.25f);
    Tensor<float> sm = ops::softmax<float>(nullptr, c, 0);
    for (int i = 0; i < 4; ++i) CHECK(sm.data()[i] == doctest::Approx(0.25).epsilon(1e-6));

    Tensor<float> hot = Tensor<float>::from({3}, {1000.0f, 0.0f, 0.0f});
    Tensor<float> hsm = ops::softmax<float>(nullptr, hot, 0);
    CHECK(hsm.data()[0] == doctest::Approx(1.0));
    CHECK(std::isfinite(hsm.data()[0]));
    CHECK(hsm.data()[1] == doctest::Approx(0.0));

    Rng rng(7);
    Tensor<float> x = Tensor<float>::randn({5, 9}, rng, 2.0);
    Tensor<float> y = ops::softmax<float>(nullptr, x, 1);
    for (int i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 9; ++j) {
            CHECK(y.data()[i * 9 + j] >= 0.0f);
            sum += y.data()[i * 9 + j];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK_THROWS_AS((void)ops::softmax<float>(nullptr, x, 2), DimensionError);
}

TEST_CASE("rms_norm unit cases and unit-RMS property") {
    Tensor<float> ones = Tensor<float>::full({6}, 1.0f);
    Tensor<float> w = Tensor<float>::full({6}, 1.0f);
    Tensor<float> y = ops::rms_norm<float>(nullptr, ones, w);
    for (int i = 0; i < 6; ++i) CHECK(y.data()[i] == doctest::Approx(1.0).epsilon(1e-6));

    Tensor<float> pm = Tensor<float>::from({2}, {3.0f, -3.0f});
    Tensor<float> w2 = Tensor<float>::full({2}, 1.0f);
    Tensor<float> y2 = ops::rms_norm<float>(nullptr, pm, w2);
    CHECK(y2.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y2.data()[1] == doctest::Approx(-1.0).epsilon(1e-6));

    Rng rng(9);
    Tensor<float> x = Tensor<float>::randn({4, 16}, rng, 3.0);
    Tensor<float> w3 = Tensor<float>::full({16}, 1.0f);
    Tensor<float> y3 = ops::rms_norm<float>(nullptr, x, w3);
    for (int i = 0; i < 4; ++i) {
        double ss = 0.0;
        for (int j = 0; j < 16; ++j) ss += static_cast<double>(y3.data()[i * 16 + j]) * y3.data()[i * 16 + j];
        CHECK(std::sqrt(ss / 16.0) == doctest::Approx(1.0).epsilon(1e-6));
    }

    Tensor<float> empty = Tensor<float>::zeros({0});
    Tensor<float> we = Tensor<float>::zeros({0});
    CHECK_THROWS_AS((void)ops::rms_norm<float>(nullptr, empty, we), DimensionError);
}

TEST_CASE("cross_entropy analytic cases and log-sum-exp oracle") {
    const int v = 512;
    Tensor<float> uniform = Tensor<float>::zeros({1, v});
    Tensor<float> loss = ops::cross_entropy<float>(nullptr, uniform, {7}, {1});
    CHECK(loss.item() == doctest::Approx(std::log(512.0)).epsilon(1e-5));

    Tensor<float> hot = Tensor<float>::zeros({1, v});
    hot.data()[3] = 1e4f;
    Tensor<float> loss2 = ops::cross_entropy<float>(nullptr, hot, {3}, {1});
    CHECK(loss2.item() == doctest::Approx(0.0).epsilon(1e-6));

    Rng rng(21);
    Tensor<double> logits = Tensor<double>::randn({5, 32}, rng, 2.0);
    std::vector<int> targets = {0, 5, 31, 7, 2};
    std::vector<uint8_t> mask = {1, 0, 1, 1, 0};
    Tensor<double> loss3 = ops::cross_entropy<double>(nullptr, logits, targets, mask);
    double expect = 0.0;
    int count = 0;
    for (int i = 0; i < 5; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        double mx = logits.data()[i * 32];
        for (int j = 1; j < 32; ++j) mx = std::max(mx, logits.data()[i * 32 + j]);
        double lse = 0.0;
        for (int j = 0; j < 32; ++j) lse += std::exp(logits.data()[i * 32 + j] - mx);
        expect += mx + std::log(lse) - logits.data()[i * 32 + targets[static_cast<size_t>(i)]];
        ++count;
    }
    expect /= count;
    CHECK(loss3.item() == doctest::Approx(expect).epsilon(1e-5));

    CHECK_THROWS_AS((void)ops::cross_entropy<float>(nullptr, uniform, {7}, {0}), ValueError);
    CHECK_THROWS_AS((void)ops::cross_entropy<float>(nullptr, uniform, {512}, {1}), ValueError);
}

TEST_CASE("backward: linear loss gives all-ones gradient") {
    Tensor<float> w = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    w.set_trainable(true);
    Tape<float> tape;
    Tensor<float> loss = ops::sum(&tape, w);
    tape.backward(loss);
    REQUIRE(w.has_grad());
    for (float g : w.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward: frozen tensors receive no gradient, upstream still correct") {
    Tensor<double> frozen = randt({3, 3}, 31, false);
    const std::vector<double> frozen_bytes = frozen.values();
    Tensor<double> w = randt({3, 2}, 32, true);

    Tape<double> tape;
    Tensor<double> y = ops::matmul(&tape, frozen, w);
    Tensor<double> loss = ops::sum(&tape, y);
    tape.backward(loss);

    CHECK(!frozen.has_grad());
    CHECK(frozen.values() == frozen_bytes);  // freezing is absolute
    REQUIRE(w.has_grad());
    // d loss / d w[p][j] = sum_i frozen[i][p]
    for (int p = 0; p < 3; ++p) {
        double col = 0.0;
        for (int i = 0; i < 3; ++i) col += frozen.values()[static_cast<size_t>(i) * 3 + p];
        for (int j = 0; j < 2; ++j)
            CHECK(w.grad()[static_cast<size_t>(p) * 2 + j] == doctest::Approx(col).epsilon(1e-9));
    }
}

TEST_CASE("backward rejects non-scalar and unrecorded losses") {
    Tensor<float> w = Tensor<float>::from({2}, {1, 2});
    w.set_trainable(true);
    Tape<float> tape;
    Tensor<float> y = ops::scale(&tape, w, 2.0f);
    CHECK_THROWS_AS(tape.backward(y), DimensionError);
    Tensor<float> detached = Tensor<float>::from({1}, {1.0f});
    CHECK_THROWS_AS(tape.backward(detached), ValueError);
}

TEST_CASE("gradient accumulation adds; zero_grad clears") {
    Tensor<float> w = Tensor<float>::from({2}, {1, 2});
    w.set_trainable(true);
    for (int round = 0; round < 2; ++round) {
        Tape<float> tape;
        Tensor<float> loss = ops::sum(&tape, w);
        tape.backward(loss);
    }
    CHECK(w.grad()[0] == 2.0f);
    w.zero_grad();
    CHECK(w.grad()[0] == 0.0f);
}

TEST_CASE("embedding lookup and gradient scatter") {
    Tensor<float> table = Tensor<float>::from({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
    table.set_trainable(true);
    Tape<float> tape;
    Tensor<float> rows = ops::embedding(&tape, table, {1, 1, 2});
    CHECK(rows.data()[0] == 10.0f);
    CHECK(rows.data()[2] == 10.0f);
    CHECK(rows.data()[4] == 20.0f);
    Tensor<float> loss = ops::sum(&tape, rows);
    tape.backward(loss);
    const auto& g = table.grad();
    CHECK(g[0] == 0.0f);
    CHECK(g[2] == 2.0f);  // row 1 hit twice
    CHECK(g[4] == 1.0f);
    CHECK(g[6] == 0.0f);
    CHECK_THROWS_AS((void)ops::embedding<float>(nullptr, table, {4}), ValueError);
}

TEST_CASE("check_gradients: quadratic loss is exact to rounding") {
    Tensor<double> w = randt({4}, 41, true);
    auto builder = [&](Tape<double>* tape) {
        Tensor<double> sq = ops::mul(tape, w, w);
        return ops::sum(tape, sq);
    };
    std::vector<ParamCoordinate> coords;
    for (int i = 0; i < 4; ++i) coords.push_back({"w", &w, i});
    const auto report = check_gradients(builder, coords, 1e-4);
    CHECK(report.max_rel_err < 1e-8);
}

TEST_CASE("check_gradients rejects frozen coordinates and bad epsilon") {
    Tensor<double> w = randt({4}, 42, false);
    auto builder = [&](Tape<double>* tape) { return ops::sum(tape, w); };
    CHECK_THROWS_AS((void)check_gradients(builder, {{"w", &w, 0}}, 1e-5), ValueError);
    Tensor<double> t = randt({4}, 43, true);
    auto builder2 = [&](Tape<double>* tape) { return ops::sum(tape, t); };
    CHECK_THROWS_AS((void)check_gradients(builder2, {{"t", &t, 0}}, 1e-2), ValueError);
}

TEST_CASE("elementwise and shape ops pass finite-difference checks") {
    Tensor<double> a = randt({3, 4}, 51, true);
    Tensor<double> rowv = randt({4}, 52, true);
    Tensor<double> scalar = randt({1}, 53, true);
    Tensor<double> w = randt({4}, 54, true);
    Tensor<double> b = randt({3, 4}, 55, true);

    auto builder = [&](Tape<double>* tape) {
        Tensor<double> x = ops::add(tape, a, rowv);          // row-vector broadcast
        x = ops::mul(tape, x, scalar);                        // scalar broadcast
        x = ops::mul(tape, x, b);                             // same-shape
        x = ops::silu(tape, x);
        x = ops::rms_norm(tape, x, w);
        Tensor<double> t = ops::transpose(tape, x);           // [4 x 3]
        Tensor<double> cat = ops::concat_rows(tape, t, ops::slice_rows(tape, t, 1, 3));
        Tensor<double> sm = ops::softmax(tape, cat, 1);
        return ops::cross_entropy(tape, sm, {0, 1, 2, 0, 1, 2}, {1, 1, 0, 1, 1, 1});
    };
    Rng rng(56);
    std::vector<ParamCoordinate> coords;
    auto add_coords = [&](const char* name, Tensor<double>& t, int n) {
        for (int i = 0; i < n; ++i)
            coords.push_back({name, &t, rng.uniform_int(0, static_cast<int>(t.numel()) - 1)});
    };
    add_coords("a", a, 8);
    add_coords("rowv", rowv, 4);
    add_coords("scalar", scalar, 1);
    add_coords("w", w, 4);
    add_coords("b", b, 8);
    const auto report = check_gradients(builder, coords, 1e-5);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("causal self-attention passes finite-difference checks") {
    Tensor<double> q = randt({5, 8}, 61, true);
    Tensor<double> k = randt({5, 8}, 62, true);
    Tensor<double> v = randt({5, 8}, 63, true);
    Tensor<double> mixer = randt({8}, 64, true);
    auto builder = [&](Tape<double>* tape) {
        Tensor<double> attn = ops::causal_self_attention(tape, q, k, v, 2, 10000.0);
        Tensor<double> y = ops::mul(tape, attn, mixer);
        return ops::sum(tape, y);
    };
    Rng rng(65);
    std::vector<ParamCoordinate> coords;
    for (auto* t : {&q, &k, &v}) {
        for (int i = 0; i < 20; ++i)
            coords.push_back({"qkv", t, rng.uniform_int(0, static_cast<int>(t->numel()) - 1)});
    }
    const auto report = check_gradients(builder, coords, 1e-5);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("forward determinism: same seed gives byte-identical tensors") {
    Rng r1(99), r2(99);
    Tensor<float> a = Tensor<float>::randn({16, 16}, r1, 0.5);
    Tensor<float> b = Tensor<float>::randn({16, 16}, r2, 0.5);
    CHECK(a.equals(b));
}
