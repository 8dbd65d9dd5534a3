#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include <vector>

#include "innerlm/kernels.hpp"
#include "innerlm/rng.hpp"

using namespace innerlm;

namespace {

std::vector<float> rand_vec(size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

struct ParallelGuard {
    ParallelGuard() : saved(kernels::parallel_enabled()) {}
    ~ParallelGuard() { kernels::set_parallel(saved); }
    bool saved;
};

}  // namespace

// The OpenMP drivers must be bitwise identical to the serial reference for any
// thread count: every output row is owned by one thread and the per-row worker
// is shared code.
TEST_CASE("matmul variants: OpenMP output is bitwise equal to serial reference") {
    ParallelGuard guard;
    const int m = 96, k = 128, n = 512;  // large enough to cross the parallel threshold
    const auto a = rand_vec(static_cast<size_t>(m) * k, 1);
    const auto b = rand_vec(static_cast<size_t>(k) * n, 2);
    const auto bt = rand_vec(static_cast<size_t>(n) * k, 3);
    const auto atall = rand_vec(static_cast<size_t>(k) * m, 4);

    std::vector<float> ref(static_cast<size_t>(m) * n), par(ref.size());
    kernels::serial::matmul_nn(a.data(), b.data(), ref.data(), m, k, n);
    kernels::set_parallel(true);
    kernels::matmul_nn(a.data(), b.data(), par.data(), m, k, n);
    CHECK(ref == par);

    kernels::serial::matmul_nt(a.data(), bt.data(), ref.data(), m, k, n);
    kernels::matmul_nt(a.data(), bt.data(), par.data(), m, k, n);
    CHECK(ref == par);

    kernels::serial::matmul_tn(atall.data(), b.data(), ref.data(), m, k, n);
    kernels::matmul_tn(atall.data(), b.data(), par.data(), m, k, n);
    CHECK(ref == par);
}

TEST_CASE("matmul_nt and matmul_tn agree with matmul_nn on materialized transposes") {
    const int m = 7, k = 13, n = 9;
    const auto a = rand_vec(static_cast<size_t>(m) * k, 5);
    const auto b = rand_vec(static_cast<size_t>(k) * n, 6);

    // nt: c = a * b^T with b stored [n x k]
    std::vector<float> b_nt(static_cast<size_t>(n) * k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < n; ++j) b_nt[static_cast<size_t>(j) * k + i] = b[static_cast<size_t>(i) * n + j];
    std::vector<float> c1(static_cast<size_t>(m) * n), c2(c1.size());
    kernels::serial::matmul_nn(a.data(), b.data(), c1.data(), m, k, n);
    kernels::serial::matmul_nt(a.data(), b_nt.data(), c2.data(), m, k, n);
    for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-5));

    // tn: c = a^T * b with a stored [k x m]
    std::vector<float> a_tn(static_cast<size_t>(k) * m);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) a_tn[static_cast<size_t>(p) * m + i] = a[static_cast<size_t>(i) * k + p];
    std::vector<float> c4(static_cast<size_t>(m) * n);
    kernels::serial::matmul_tn(a_tn.data(), b.data(), c4.data(), m, k, n);
    for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == doctest::Approx(c4[i]).epsilon(1e-5));
}

TEST_CASE("softmax rows: parallel equals serial bitwise, rows sum to one") {
    ParallelGuard guard;
    const int rows = 512, n = 2048;
    const auto x = rand_vec(static_cast<size_t>(rows) * n, 7);
    std::vector<float> ref(x.size()), par(x.size());
    kernels::serial::softmax_rows(x.data(), ref.data(), rows, n);
    kernels::set_parallel(true);
    kernels::softmax_rows(x.data(), par.data(), rows, n);
    CHECK(ref == par);
    for (int i = 0; i < rows; i += 37) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += ref[static_cast<size_t>(i) * n + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("attention: parallel equals serial bitwise, causal limit respected") {
    ParallelGuard guard;
    const int t = 64, heads = 4, hd = 32;
    const int d = heads * hd;
    auto q = rand_vec(static_cast<size_t>(t) * d, 8);
    auto k = rand_vec(static_cast<size_t>(t) * d, 9);
    const auto v = rand_vec(static_cast<size_t>(t) * d, 10);
    kernels::serial::rope_rows(q.data(), t, heads, hd, 0, 10000.0f);
    kernels::serial::rope_rows(k.data(), t, heads, hd, 0, 10000.0f);

    std::vector<float> ref(static_cast<size_t>(t) * d), par(ref.size());
    std::vector<float> probs_ref(static_cast<size_t>(heads) * t * t), probs_par(probs_ref.size());
    kernels::serial::attention(q.data(), k.data(), v.data(), ref.data(), probs_ref.data(), t, t,
                               heads, hd, 0);
    kernels::set_parallel(true);
    kernels::attention(q.data(), k.data(), v.data(), par.data(), probs_par.data(), t, t, heads, hd, 0);
    CHECK(ref == par);
    CHECK(probs_ref == probs_par);

    // No probability mass above the causal diagonal.
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < t; i += 11)
            for (int j = i + 1; j < t; ++j)
                CHECK(probs_ref[(static_cast<size_t>(h) * t + i) * t + j] == 0.0f);
}

TEST_CASE("rope rotation is norm-preserving and inverted by the backward flag") {
    const int t = 8, heads = 2, hd = 16;
    const int d = heads * hd;
    const auto original = rand_vec(static_cast<size_t>(t) * d, 11);
    auto x = original;
    kernels::serial::rope_rows(x.data(), t, heads, hd, 3, 10000.0f);
    double n0 = 0.0, n1 = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        n0 += static_cast<double>(original[i]) * original[i];
        n1 += static_cast<double>(x[i]) * x[i];
    }
    CHECK(n0 == doctest::Approx(n1).epsilon(1e-5));
    kernels::serial::rope_rows(x.data(), t, heads, hd, 3, 10000.0f, true);
    for (size_t i = 0; i < x.size(); ++i) CHECK(x[i] == doctest::Approx(original[i]).epsilon(1e-5));
}

TEST_CASE("thread count does not change results") {
    ParallelGuard guard;
    const int m = 128, k = 256, n = 256;
    const auto a = rand_vec(static_cast<size_t>(m) * k, 12);
    const auto b = rand_vec(static_cast<size_t>(k) * n, 13);
    std::vector<float> one(static_cast<size_t>(m) * n), many(one.size());
    kernels::set_parallel(true);
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    kernels::matmul_nn(a.data(), b.data(), one.data(), m, k, n);
    omp_set_num_threads(saved > 1 ? saved : 2);
    kernels::matmul_nn(a.data(), b.data(), many.data(), m, k, n);
    omp_set_num_threads(saved);
    CHECK(one == many);
}
