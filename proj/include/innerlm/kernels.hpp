#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace innerlm::kernels {

// Runtime switch between the serial reference kernels and the OpenMP drivers.
// Both call the same per-row workers, so outputs are bitwise identical for any
// thread count; tests assert this and the benchmark tool compares throughput.
inline bool& parallel_flag() {
    static bool flag = true;
    return flag;
}
inline void set_parallel(bool on) { parallel_flag() = on; }
inline bool parallel_enabled() { return parallel_flag(); }

// Work below this many multiply-accumulates is not worth a parallel region.
inline constexpr double kParallelMacThreshold = 6.0e5;

namespace detail {

// Row workers are noinline so serial and OpenMP drivers execute the exact same
// machine code, keeping per-element float accumulation order identical.

template <typename S>
[[gnu::noinline]] void matmul_nn_row(const S* a, const S* b, S* c, int k, int n) {
    for (int j = 0; j < n; ++j) c[j] = S(0);
    for (int p = 0; p < k; ++p) {
        const S av = a[p];
        const S* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * brow[j];
    }
}

template <typename S>
[[gnu::noinline]] void matmul_nt_row(const S* a, const S* b, S* c, int k, int n) {
    for (int j = 0; j < n; ++j) {
        const S* brow = b + static_cast<size_t>(j) * k;
        S acc = S(0);
        for (int p = 0; p < k; ++p) acc += a[p] * brow[p];
        c[j] = acc;
    }
}

template <typename S>
[[gnu::noinline]] void matmul_tn_row(const S* a, const S* b, S* c, int i, int m, int k, int n) {
    for (int j = 0; j < n; ++j) c[j] = S(0);
    for (int p = 0; p < k; ++p) {
        const S av = a[static_cast<size_t>(p) * m + i];
        const S* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * brow[j];
    }
}

template <typename S>
[[gnu::noinline]] void softmax_row(const S* x, S* y, int n) {
    S mx = x[0];
    for (int j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
    S sum = S(0);
    for (int j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
    }
    const S inv = S(1) / sum;
    for (int j = 0; j < n; ++j) y[j] *= inv;
}

// Returns the saved inverse RMS so backward can reuse it.
template <typename S>
[[gnu::noinline]] S rmsnorm_row(const S* x, const S* w, S* y, int n, S eps) {
    S ss = S(0);
    for (int j = 0; j < n; ++j) ss += x[j] * x[j];
    const S inv = S(1) / std::sqrt(ss / S(n) + eps);
    for (int j = 0; j < n; ++j) y[j] = x[j] * inv * w[j];
    return inv;
}

template <typename S>
[[gnu::noinline]] void silu_row(const S* x, S* y, int n) {
    for (int j = 0; j < n; ++j) {
        const S sig = S(1) / (S(1) + std::exp(-x[j]));
        y[j] = x[j] * sig;
    }
}

// Rotary position encoding over pair (2t, 2t+1) within each head; the row's
// absolute position is pos0 + row index.
template <typename S>
[[gnu::noinline]] void rope_row(S* x, int row, int heads, int head_dim, int pos0, S base, bool inverse) {
    const S pos = S(pos0 + row);
    for (int h = 0; h < heads; ++h) {
        S* xh = x + static_cast<size_t>(h) * head_dim;
        for (int t = 0; t < head_dim / 2; ++t) {
            const S theta = pos * std::pow(base, S(-2) * S(t) / S(head_dim));
            const S c = std::cos(theta);
            const S s = inverse ? -std::sin(theta) : std::sin(theta);
            const S x0 = xh[2 * t];
            const S x1 = xh[2 * t + 1];
            xh[2 * t] = c * x0 - s * x1;
            xh[2 * t + 1] = s * x0 + c * x1;
        }
    }
}

// One attention output row for one head. q/k are already rotated. Row i may
// attend to keys [0, lim); probs (when non-null) receives the tk-wide row.
template <typename S>
[[gnu::noinline]] void attention_row(const S* qrow, const S* k, const S* v, S* out, S* probs,
                                     int lim, int tk, int d, int head_dim, S inv_sqrt_hd) {
    S* score = probs;
    S local[256];
    thread_local std::vector<S> spill;
    if (score == nullptr) {
        if (lim <= 256) {
            score = local;
        } else {
            spill.resize(static_cast<size_t>(lim));
            score = spill.data();
        }
    }
    S mx = S(0);
    for (int j = 0; j < lim; ++j) {
        const S* krow = k + static_cast<size_t>(j) * d;
        S acc = S(0);
        for (int t = 0; t < head_dim; ++t) acc += qrow[t] * krow[t];
        acc *= inv_sqrt_hd;
        score[j] = acc;
        mx = (j == 0 || acc > mx) ? acc : mx;
    }
    S sum = S(0);
    for (int j = 0; j < lim; ++j) {
        score[j] = std::exp(score[j] - mx);
        sum += score[j];
    }
    const S inv = S(1) / sum;
    for (int t = 0; t < head_dim; ++t) out[t] = S(0);
    for (int j = 0; j < lim; ++j) {
        const S p = score[j] * inv;
        if (probs != nullptr) probs[j] = p;
        const S* vrow = v + static_cast<size_t>(j) * d;
        for (int t = 0; t < head_dim; ++t) out[t] += p * vrow[t];
    }
    if (probs != nullptr) {
        for (int j = lim; j < tk; ++j) probs[j] = S(0);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Serial reference kernels.
// ---------------------------------------------------------------------------
namespace serial {

// c[m x n] = a[m x k] * b[k x n]
template <typename S>
void matmul_nn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        detail::matmul_nn_row(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
}

// c[m x n] = a[m x k] * b[n x k]^T
template <typename S>
void matmul_nt(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        detail::matmul_nt_row(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
}

// c[m x n] = a[k x m]^T * b[k x n]
template <typename S>
void matmul_tn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) detail::matmul_tn_row(a, b, c + static_cast<size_t>(i) * n, i, m, k, n);
}

template <typename S>
void softmax_rows(const S* x, S* y, int rows, int n) {
    for (int i = 0; i < rows; ++i)
        detail::softmax_row(x + static_cast<size_t>(i) * n, y + static_cast<size_t>(i) * n, n);
}

template <typename S>
void rmsnorm_rows(const S* x, const S* w, S* y, S* inv_rms, int rows, int n, S eps) {
    for (int i = 0; i < rows; ++i)
        inv_rms[i] = detail::rmsnorm_row(x + static_cast<size_t>(i) * n, w, y + static_cast<size_t>(i) * n, n, eps);
}

template <typename S>
void silu(const S* x, S* y, size_t count) {
    detail::silu_row(x, y, static_cast<int>(count));
}

template <typename S>
void rope_rows(S* x, int rows, int heads, int head_dim, int pos0, S base, bool inverse = false) {
    for (int i = 0; i < rows; ++i)
        detail::rope_row(x + static_cast<size_t>(i) * heads * head_dim, i, heads, head_dim, pos0, base, inverse);
}

template <typename S>
void attention(const S* q, const S* k, const S* v, S* out, S* probs, int tq, int tk, int heads,
               int head_dim, int q_pos0) {
    const int d = heads * head_dim;
    const S inv_sqrt_hd = S(1) / std::sqrt(S(head_dim));
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < tq; ++i) {
            const int lim = q_pos0 + i + 1;
            S* prow = probs ? probs + (static_cast<size_t>(h) * tq + i) * tk : nullptr;
            detail::attention_row(q + static_cast<size_t>(i) * d + h * head_dim, k + h * head_dim,
                                  v + h * head_dim, out + static_cast<size_t>(i) * d + h * head_dim,
                                  prow, lim, tk, d, head_dim, inv_sqrt_hd);
        }
    }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP drivers. Fall back to the serial loop when parallelism is disabled
// or the workload is too small to amortize a parallel region.
// ---------------------------------------------------------------------------

template <typename S>
void matmul_nn(const S* a, const S* b, S* c, int m, int k, int n) {
    if (!parallel_enabled() || m < 2 || double(m) * k * n < kParallelMacThreshold) {
        serial::matmul_nn(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
        detail::matmul_nn_row(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
}

template <typename S>
void matmul_nt(const S* a, const S* b, S* c, int m, int k, int n) {
    if (!parallel_enabled() || m < 2 || double(m) * k * n < kParallelMacThreshold) {
        serial::matmul_nt(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
        detail::matmul_nt_row(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
}

template <typename S>
void matmul_tn(const S* a, const S* b, S* c, int m, int k, int n) {
    if (!parallel_enabled() || m < 2 || double(m) * k * n < kParallelMacThreshold) {
        serial::matmul_tn(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) detail::matmul_tn_row(a, b, c + static_cast<size_t>(i) * n, i, m, k, n);
}

template <typename S>
void softmax_rows(const S* x, S* y, int rows, int n) {
    if (!parallel_enabled() || rows < 2 || double(rows) * n < kParallelMacThreshold) {
        serial::softmax_rows(x, y, rows, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i)
        detail::softmax_row(x + static_cast<size_t>(i) * n, y + static_cast<size_t>(i) * n, n);
}

template <typename S>
void rmsnorm_rows(const S* x, const S* w, S* y, S* inv_rms, int rows, int n, S eps) {
    // Cheap relative to the matmuls around it; a parallel region rarely pays off.
    serial::rmsnorm_rows(x, w, y, inv_rms, rows, n, eps);
}

template <typename S>
void silu(const S* x, S* y, size_t count) {
    serial::silu(x, y, count);
}

template <typename S>
void rope_rows(S* x, int rows, int heads, int head_dim, int pos0, S base, bool inverse = false) {
    serial::rope_rows(x, rows, heads, head_dim, pos0, base, inverse);
}

template <typename S>
void attention(const S* q, const S* k, const S* v, S* out, S* probs, int tq, int tk, int heads,
               int head_dim, int q_pos0) {
    const double work = double(heads) * tq * tk * head_dim;
    if (!parallel_enabled() || heads * tq < 2 || work < kParallelMacThreshold) {
        serial::attention(q, k, v, out, probs, tq, tk, heads, head_dim, q_pos0);
        return;
    }
    const int d = heads * head_dim;
    const S inv_sqrt_hd = S(1) / std::sqrt(S(head_dim));
#pragma omp parallel for schedule(static) collapse(2)
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < tq; ++i) {
            const int lim = q_pos0 + i + 1;
            S* prow = probs ? probs + (static_cast<size_t>(h) * tq + i) * tk : nullptr;
            detail::attention_row(q + static_cast<size_t>(i) * d + h * head_dim, k + h * head_dim,
                                  v + h * head_dim, out + static_cast<size_t>(i) * d + h * head_dim,
                                  prow, lim, tk, d, head_dim, inv_sqrt_hd);
        }
    }
}

}  // namespace innerlm::kernels
