#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "innerlm/errors.hpp"
#include "innerlm/kernels.hpp"
#include "innerlm/rng.hpp"

namespace innerlm {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
    os << "]";
    return os.str();
}

template <typename S>
struct TensorData {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated only for trainable leaves that received gradient
    bool trainable = false;
    bool leaf = true;
    uint64_t id = 0;
};

inline uint64_t next_tensor_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Shared-ownership handle over a dense row-major buffer. Parameters are
// trainable leaves; everything an op returns is a non-leaf intermediate whose
// adjoint lives in the tape, never in the tensor itself.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<S>>();
        t.d_->shape = std::move(shape);
        t.d_->value.assign(static_cast<size_t>(shape_numel(t.d_->shape)), S(0));
        t.d_->id = next_tensor_id();
        return t;
    }

    static Tensor full(Shape shape, S v) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.d_->value) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.d_ = std::make_shared<TensorData<S>>();
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(data);
        t.d_->id = next_tensor_id();
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double sigma) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.d_->value) x = static_cast<S>(rng.normal() * sigma);
        return t;
    }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(d_->value.size()); }
    int rows() const { return rank() == 2 ? dim(0) : 1; }
    int cols() const { return rank() == 2 ? dim(1) : dim(0); }

    S* data() { return d_->value.data(); }
    const S* data() const { return d_->value.data(); }
    std::vector<S>& values() { return d_->value; }
    const std::vector<S>& values() const { return d_->value; }
    S item() const {
        if (numel() != 1) throw DimensionError("item: tensor is not scalar, shape " + shape_str(shape()));
        return d_->value[0];
    }

    bool trainable() const { return d_->trainable; }
    void set_trainable(bool on) {
        d_->trainable = on;
        if (!on) d_->grad.clear();
    }
    bool is_leaf() const { return d_->leaf; }
    void mark_nonleaf() { d_->leaf = false; }
    uint64_t id() const { return d_->id; }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<S>& grad() const { return d_->grad; }
    std::vector<S>& grad_buffer() {
        if (d_->grad.empty()) d_->grad.assign(d_->value.size(), S(0));
        return d_->grad;
    }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
    }
    void drop_grad() { d_->grad.clear(); }

    Tensor clone() const {
        Tensor t = from(shape(), values());
        t.d_->trainable = d_->trainable;
        return t;
    }

    // Exact value comparison; shapes must match too.
    bool equals(const Tensor& other) const {
        return d_->shape == other.d_->shape && d_->value == other.d_->value;
    }

    bool same_object(const Tensor& other) const { return d_.get() == other.d_.get(); }

private:
    std::shared_ptr<TensorData<S>> d_;
};

// Reverse-mode tape. Records one node per differentiable op in creation order
// (a valid topological order); backward walks it once in reverse. Adjoints of
// intermediates live here; trainable leaves accumulate into Tensor::grad.
template <typename S>
class Tape {
public:
    void record(Tensor<S> out, std::vector<Tensor<S>> inputs,
                std::function<void(Tape&, const std::vector<S>&)> backward) {
        out.mark_nonleaf();
        produced_.insert(out.id());
        nodes_.push_back(Node{std::move(out), std::move(inputs), std::move(backward)});
    }

    bool wants_grad(const Tensor<S>& t) const {
        return t.trainable() || produced_.count(t.id()) != 0;
    }

    // Routes a gradient contribution: trainable leaves accumulate into their
    // grad buffer, recorded intermediates into the tape adjoint, frozen leaves
    // are dropped.
    void accumulate(Tensor<S>& t, const S* g, size_t n) {
        if (t.is_leaf()) {
            if (!t.trainable()) return;
            auto& buf = t.grad_buffer();
            for (size_t i = 0; i < n; ++i) buf[i] += g[i];
            return;
        }
        if (produced_.count(t.id()) == 0) return;
        auto& adj = adjoints_[t.id()];
        if (adj.empty()) adj.assign(static_cast<size_t>(t.numel()), S(0));
        for (size_t i = 0; i < n; ++i) adj[i] += g[i];
    }

    const std::vector<S>* adjoint_of(const Tensor<S>& t) const {
        auto it = adjoints_.find(t.id());
        return it == adjoints_.end() ? nullptr : &it->second;
    }

    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1)
            throw DimensionError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (produced_.count(loss.id()) == 0)
            throw ValueError("backward: loss was not produced by this tape");
        adjoints_[loss.id()] = {S(1)};
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto adj = adjoints_.find(it->out.id());
            if (adj == adjoints_.end()) continue;
            it->back(*this, adj->second);
        }
    }

    size_t size() const { return nodes_.size(); }

    // Graph inspection: every tensor id that appears as a node input or output.
    template <typename Fn>
    void visit_tensor_ids(Fn&& fn) const {
        for (const auto& n : nodes_) {
            fn(n.out.id());
            for (const auto& in : n.inputs) fn(in.id());
        }
    }

    void reset() {
        nodes_.clear();
        adjoints_.clear();
        produced_.clear();
    }

private:
    struct Node {
        Tensor<S> out;
        std::vector<Tensor<S>> inputs;
        std::function<void(Tape&, const std::vector<S>&)> back;
    };
    std::vector<Node> nodes_;
    std::unordered_map<uint64_t, std::vector<S>> adjoints_;
    std::unordered_set<uint64_t> produced_;
};

namespace ops {

template <typename S>
Tensor<S> transpose(Tape<S>* tape, Tensor<S> a);

template <typename S>
inline bool should_record(Tape<S>* tape, std::initializer_list<const Tensor<S>*> inputs) {
    if (tape == nullptr) return false;
    for (const auto* t : inputs)
        if (tape->wants_grad(*t)) return true;
    return false;
}

// c = a * b for a [m x k], b [k x n]
template <typename S>
Tensor<S> matmul(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    kernels::matmul_nn(a.data(), b.data(), out.data(), m, k, n);
    if (should_record(tape, {&a, &b})) {
        tape->record(out, {a, b}, [a, b, m, k, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            if (tp.wants_grad(a)) {
                std::vector<S> da(static_cast<size_t>(m) * k);
                kernels::matmul_nt(dy.data(), b.data(), da.data(), m, n, k);
                tp.accumulate(a, da.data(), da.size());
            }
            if (tp.wants_grad(b)) {
                std::vector<S> db(static_cast<size_t>(k) * n);
                kernels::matmul_tn(a.data(), dy.data(), db.data(), k, m, n);
                tp.accumulate(b, db.data(), db.size());
            }
        });
    }
    return out;
}

enum class BroadcastKind { Same, RowVector, Scalar };

template <typename S>
inline BroadcastKind broadcast_kind(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() == b.shape()) return BroadcastKind::Same;
    if (b.numel() == 1) return BroadcastKind::Scalar;
    if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) return BroadcastKind::RowVector;
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename S>
Tensor<S> add(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
    const BroadcastKind kind = broadcast_kind(a, b, "add");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = static_cast<size_t>(a.numel());
    const int cols = a.rank() == 2 ? a.dim(1) : static_cast<int>(n);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    switch (kind) {
        case BroadcastKind::Same:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case BroadcastKind::RowVector:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % cols];
            break;
        case BroadcastKind::Scalar:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[0];
            break;
    }
    if (should_record(tape, {&a, &b})) {
        tape->record(out, {a, b}, [a, b, kind, n, cols](Tape<S>& tp, const std::vector<S>& dy) mutable {
            if (tp.wants_grad(a)) tp.accumulate(a, dy.data(), n);
            if (tp.wants_grad(b)) {
                if (kind == BroadcastKind::Same) {
                    tp.accumulate(b, dy.data(), n);
                } else if (kind == BroadcastKind::RowVector) {
                    std::vector<S> db(static_cast<size_t>(cols), S(0));
                    for (size_t i = 0; i < n; ++i) db[i % cols] += dy[i];
                    tp.accumulate(b, db.data(), db.size());
                } else {
                    S s = S(0);
                    for (size_t i = 0; i < n; ++i) s += dy[i];
                    tp.accumulate(b, &s, 1);
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
    const BroadcastKind kind = broadcast_kind(a, b, "mul");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = static_cast<size_t>(a.numel());
    const int cols = a.rank() == 2 ? a.dim(1) : static_cast<int>(n);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    switch (kind) {
        case BroadcastKind::Same:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        case BroadcastKind::RowVector:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i % cols];
            break;
        case BroadcastKind::Scalar:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[0];
            break;
    }
    if (should_record(tape, {&a, &b})) {
        tape->record(out, {a, b}, [a, b, kind, n, cols](Tape<S>& tp, const std::vector<S>& dy) mutable {
            const S* pa = a.data();
            const S* pb = b.data();
            if (tp.wants_grad(a)) {
                std::vector<S> da(n);
                if (kind == BroadcastKind::Same)
                    for (size_t i = 0; i < n; ++i) da[i] = dy[i] * pb[i];
                else if (kind == BroadcastKind::RowVector)
                    for (size_t i = 0; i < n; ++i) da[i] = dy[i] * pb[i % cols];
                else
                    for (size_t i = 0; i < n; ++i) da[i] = dy[i] * pb[0];
                tp.accumulate(a, da.data(), n);
            }
            if (tp.wants_grad(b)) {
                if (kind == BroadcastKind::Same) {
                    std::vector<S> db(n);
                    for (size_t i = 0; i < n; ++i) db[i] = dy[i] * pa[i];
                    tp.accumulate(b, db.data(), n);
                } else if (kind == BroadcastKind::RowVector) {
                    std::vector<S> db(static_cast<size_t>(cols), S(0));
                    for (size_t i = 0; i < n; ++i) db[i % cols] += dy[i] * pa[i];
                    tp.accumulate(b, db.data(), db.size());
                } else {
                    S s = S(0);
                    for (size_t i = 0; i < n; ++i) s += dy[i] * pa[i];
                    tp.accumulate(b, &s, 1);
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, Tensor<S> a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = static_cast<size_t>(a.numel());
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (should_record(tape, {&a})) {
        tape->record(out, {a}, [a, c, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            std::vector<S> da(n);
            for (size_t i = 0; i < n; ++i) da[i] = dy[i] * c;
            tp.accumulate(a, da.data(), n);
        });
    }
    return out;
}

template <typename S>
Tensor<S> silu(Tape<S>* tape, Tensor<S> a) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = static_cast<size_t>(a.numel());
    kernels::silu(a.data(), out.data(), n);
    if (should_record(tape, {&a})) {
        tape->record(out, {a}, [a, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            std::vector<S> da(n);
            const S* x = a.data();
            for (size_t i = 0; i < n; ++i) {
                const S sig = S(1) / (S(1) + std::exp(-x[i]));
                da[i] = dy[i] * sig * (S(1) + x[i] * (S(1) - sig));
            }
            tp.accumulate(a, da.data(), n);
        });
    }
    return out;
}

inline constexpr double kRmsEps = 1e-6;

// Unit-RMS scaling along the last dimension, then elementwise weight.
template <typename S>
Tensor<S> rms_norm(Tape<S>* tape, Tensor<S> x, Tensor<S> w) {
    const int n = x.rank() == 2 ? x.dim(1) : x.dim(0);
    if (n == 0) throw DimensionError("rms_norm: zero-length last dimension");
    if (w.rank() != 1 || w.dim(0) != n)
        throw DimensionError("rms_norm: weight shape " + shape_str(w.shape()) +
                             " does not match last dimension of " + shape_str(x.shape()));
    const int rows = x.rank() == 2 ? x.dim(0) : 1;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto inv_rms = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    kernels::rmsnorm_rows(x.data(), w.data(), out.data(), inv_rms->data(), rows, n, S(kRmsEps));
    if (should_record(tape, {&x, &w})) {
        tape->record(out, {x, w}, [x, w, inv_rms, rows, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            const S* px = x.data();
            const S* pw = w.data();
            if (tp.wants_grad(x)) {
                std::vector<S> dx(static_cast<size_t>(rows) * n);
                for (int i = 0; i < rows; ++i) {
                    const S r = (*inv_rms)[static_cast<size_t>(i)];
                    const S* xi = px + static_cast<size_t>(i) * n;
                    const S* dyi = dy.data() + static_cast<size_t>(i) * n;
                    S common = S(0);
                    for (int j = 0; j < n; ++j) common += dyi[j] * pw[j] * xi[j];
                    const S factor = r * r * r * common / S(n);
                    S* dxi = dx.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) dxi[j] = r * dyi[j] * pw[j] - xi[j] * factor;
                }
                tp.accumulate(x, dx.data(), dx.size());
            }
            if (tp.wants_grad(w)) {
                std::vector<S> dw(static_cast<size_t>(n), S(0));
                for (int i = 0; i < rows; ++i) {
                    const S r = (*inv_rms)[static_cast<size_t>(i)];
                    const S* xi = px + static_cast<size_t>(i) * n;
                    const S* dyi = dy.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) dw[j] += dyi[j] * xi[j] * r;
                }
                tp.accumulate(w, dw.data(), dw.size());
            }
        });
    }
    return out;
}

// Softmax along `axis` (0 or 1 for matrices, 0 for vectors), max-stabilized.
template <typename S>
Tensor<S> softmax(Tape<S>* tape, Tensor<S> x, int axis) {
    if (x.rank() == 1) {
        if (axis != 0) throw DimensionError("softmax: axis out of range for vector");
        Tensor<S> out = Tensor<S>::zeros(x.shape());
        kernels::softmax_rows(x.data(), out.data(), 1, x.dim(0));
        if (should_record(tape, {&x})) {
            const int n = x.dim(0);
            tape->record(out, {x}, [x, out, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
                const S* y = out.data();
                S dot = S(0);
                for (int j = 0; j < n; ++j) dot += dy[static_cast<size_t>(j)] * y[j];
                std::vector<S> dx(static_cast<size_t>(n));
                for (int j = 0; j < n; ++j) dx[static_cast<size_t>(j)] = y[j] * (dy[static_cast<size_t>(j)] - dot);
                tp.accumulate(x, dx.data(), dx.size());
            });
        }
        return out;
    }
    if (x.rank() != 2 || (axis != 0 && axis != 1))
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                             shape_str(x.shape()));
    if (axis == 0) {
        Tensor<S> xt = transpose(tape, x);
        Tensor<S> yt = softmax(tape, xt, 1);
        return transpose(tape, yt);
    }
    const int rows = x.dim(0), n = x.dim(1);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    kernels::softmax_rows(x.data(), out.data(), rows, n);
    if (should_record(tape, {&x})) {
        tape->record(out, {x}, [x, out, rows, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            const S* y = out.data();
            std::vector<S> dx(static_cast<size_t>(rows) * n);
            for (int i = 0; i < rows; ++i) {
                const S* yi = y + static_cast<size_t>(i) * n;
                const S* dyi = dy.data() + static_cast<size_t>(i) * n;
                S dot = S(0);
                for (int j = 0; j < n; ++j) dot += dyi[j] * yi[j];
                S* dxi = dx.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) dxi[j] = yi[j] * (dyi[j] - dot);
            }
            tp.accumulate(x, dx.data(), dx.size());
        });
    }
    return out;
}

template <typename S>
Tensor<S> transpose(Tape<S>* tape, Tensor<S> a) {
    if (a.rank() != 2) throw DimensionError("transpose: expected matrix, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    Tensor<S> out = Tensor<S>::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.data()[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    if (should_record(tape, {&a})) {
        tape->record(out, {a}, [a, m, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            std::vector<S> da(static_cast<size_t>(m) * n);
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    da[static_cast<size_t>(i) * n + j] = dy[static_cast<size_t>(j) * m + i];
            tp.accumulate(a, da.data(), da.size());
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum(Tape<S>* tape, Tensor<S> a) {
    Tensor<S> out = Tensor<S>::zeros({1});
    S acc = S(0);
    const size_t n = static_cast<size_t>(a.numel());
    for (size_t i = 0; i < n; ++i) acc += a.data()[i];
    out.data()[0] = acc;
    if (should_record(tape, {&a})) {
        tape->record(out, {a}, [a, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            std::vector<S> da(n, dy[0]);
            tp.accumulate(a, da.data(), n);
        });
    }
    return out;
}

// Row gather from an embedding table; backward scatter-adds into the table.
template <typename S>
Tensor<S> embedding(Tape<S>* tape, Tensor<S> table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw DimensionError("embedding: table must be a matrix");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw ValueError("embedding: token id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
    const int t = static_cast<int>(ids.size());
    Tensor<S> out = Tensor<S>::zeros({t, d});
    for (int i = 0; i < t; ++i)
        std::copy_n(table.data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d, d,
                    out.data() + static_cast<size_t>(i) * d);
    if (should_record(tape, {&table})) {
        tape->record(out, {table}, [table, ids, v, d, t](Tape<S>& tp, const std::vector<S>& dy) mutable {
            std::vector<S> dtab(static_cast<size_t>(v) * d, S(0));
            for (int i = 0; i < t; ++i) {
                S* row = dtab.data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d;
                const S* g = dy.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) row[j] += g[j];
            }
            tp.accumulate(table, dtab.data(), dtab.size());
        });
    }
    return out;
}

template <typename S>
Tensor<S> concat_rows(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("concat_rows: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const int ra = a.dim(0), rb = b.dim(0), n = a.dim(1);
    Tensor<S> out = Tensor<S>::zeros({ra + rb, n});
    std::copy_n(a.data(), static_cast<size_t>(ra) * n, out.data());
    std::copy_n(b.data(), static_cast<size_t>(rb) * n, out.data() + static_cast<size_t>(ra) * n);
    if (should_record(tape, {&a, &b})) {
        tape->record(out, {a, b}, [a, b, ra, rb, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            if (tp.wants_grad(a)) tp.accumulate(a, dy.data(), static_cast<size_t>(ra) * n);
            if (tp.wants_grad(b))
                tp.accumulate(b, dy.data() + static_cast<size_t>(ra) * n, static_cast<size_t>(rb) * n);
        });
    }
    return out;
}

template <typename S>
Tensor<S> slice_rows(Tape<S>* tape, Tensor<S> a, int begin, int end) {
    if (a.rank() != 2) throw DimensionError("slice_rows: expected matrix");
    if (begin < 0 || end > a.dim(0) || begin >= end)
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") invalid for " + shape_str(a.shape()));
    const int n = a.dim(1), rows = end - begin;
    Tensor<S> out = Tensor<S>::zeros({rows, n});
    std::copy_n(a.data() + static_cast<size_t>(begin) * n, static_cast<size_t>(rows) * n, out.data());
    if (should_record(tape, {&a})) {
        tape->record(out, {a}, [a, begin, rows, n](Tape<S>& tp, const std::vector<S>& dy) mutable {
            std::vector<S> da(static_cast<size_t>(a.numel()), S(0));
            std::copy_n(dy.data(), static_cast<size_t>(rows) * n, da.data() + static_cast<size_t>(begin) * n);
            tp.accumulate(a, da.data(), da.size());
        });
    }
    return out;
}

// Masked mean negative log-likelihood over next-token targets.
template <typename S>
Tensor<S> cross_entropy(Tape<S>* tape, Tensor<S> logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>& mask) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [T x V]");
    const int t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != t || static_cast<int>(mask.size()) != t)
        throw DimensionError("cross_entropy: targets/mask length does not match logits rows");
    int count = 0;
    for (int i = 0; i < t; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        ++count;
        const int id = targets[static_cast<size_t>(i)];
        if (id < 0 || id >= v)
            throw ValueError("cross_entropy: target id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
    }
    if (count == 0) throw ValueError("cross_entropy: all positions masked out");
    auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(t) * v);
    kernels::softmax_rows(logits.data(), probs->data(), t, v);
    S loss = S(0);
    for (int i = 0; i < t; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const S p = (*probs)[static_cast<size_t>(i) * v + targets[static_cast<size_t>(i)]];
        loss -= std::log(p);
    }
    loss /= S(count);
    Tensor<S> out = Tensor<S>::from({1}, {loss});
    if (should_record(tape, {&logits})) {
        tape->record(out, {logits},
                     [logits, probs, targets, mask, t, v, count](Tape<S>& tp, const std::vector<S>& dy) mutable {
                         std::vector<S> dl(static_cast<size_t>(t) * v, S(0));
                         const S w = dy[0] / S(count);
                         for (int i = 0; i < t; ++i) {
                             if (!mask[static_cast<size_t>(i)]) continue;
                             const S* pi = probs->data() + static_cast<size_t>(i) * v;
                             S* di = dl.data() + static_cast<size_t>(i) * v;
                             for (int j = 0; j < v; ++j) di[j] = w * pi[j];
                             di[targets[static_cast<size_t>(i)]] -= w;
                         }
                         tp.accumulate(logits, dl.data(), dl.size());
                     });
    }
    return out;
}

// Multi-head causal self-attention with rotary positions. q/k/v are the
// projected [T x d] streams; rotation happens inside so cached and full paths
// share the same arithmetic.
template <typename S>
Tensor<S> causal_self_attention(Tape<S>* tape, Tensor<S> q, Tensor<S> k, Tensor<S> v,
                                int n_heads, S rope_base) {
    if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
        throw DimensionError("attention: q/k/v shapes must match, got " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    const int t = q.dim(0), d = q.dim(1);
    if (d % n_heads != 0) throw DimensionError("attention: width not divisible by head count");
    const int hd = d / n_heads;
    auto qr = std::make_shared<std::vector<S>>(q.values());
    auto kr = std::make_shared<std::vector<S>>(k.values());
    kernels::rope_rows(qr->data(), t, n_heads, hd, 0, rope_base);
    kernels::rope_rows(kr->data(), t, n_heads, hd, 0, rope_base);
    const bool rec = should_record(tape, {&q, &k, &v});
    auto probs = rec ? std::make_shared<std::vector<S>>(static_cast<size_t>(n_heads) * t * t) : nullptr;
    Tensor<S> out = Tensor<S>::zeros({t, d});
    kernels::attention(qr->data(), kr->data(), v.data(), out.data(), probs ? probs->data() : nullptr, t,
                       t, n_heads, hd, 0);
    if (rec) {
        tape->record(out, {q, k, v},
                     [q, k, v, qr, kr, probs, t, d, hd, n_heads, rope_base](Tape<S>& tp,
                                                                            const std::vector<S>& dy) mutable {
            const S inv_sqrt_hd = S(1) / std::sqrt(S(hd));
            std::vector<S> dq(static_cast<size_t>(t) * d, S(0));
            std::vector<S> dk(static_cast<size_t>(t) * d, S(0));
            std::vector<S> dv(static_cast<size_t>(t) * d, S(0));
            // Per-head contiguous scratch.
            std::vector<S> qh(static_cast<size_t>(t) * hd), kh(qh.size()), vh(qh.size()), doh(qh.size());
            std::vector<S> dp(static_cast<size_t>(t) * t), ds(dp.size());
            std::vector<S> gq(qh.size()), gk(qh.size()), gv(qh.size());
            for (int h = 0; h < n_heads; ++h) {
                const int off = h * hd;
                for (int i = 0; i < t; ++i) {
                    std::copy_n(qr->data() + static_cast<size_t>(i) * d + off, hd,
                                qh.data() + static_cast<size_t>(i) * hd);
                    std::copy_n(kr->data() + static_cast<size_t>(i) * d + off, hd,
                                kh.data() + static_cast<size_t>(i) * hd);
                    std::copy_n(v.data() + static_cast<size_t>(i) * d + off, hd,
                                vh.data() + static_cast<size_t>(i) * hd);
                    std::copy_n(dy.data() + static_cast<size_t>(i) * d + off, hd,
                                doh.data() + static_cast<size_t>(i) * hd);
                }
                const S* p = probs->data() + static_cast<size_t>(h) * t * t;
                // dP = dOut * V^T ; dS = P o (dP - rowsum(dP o P)) / sqrt(hd)
                kernels::matmul_nt(doh.data(), vh.data(), dp.data(), t, hd, t);
                for (int i = 0; i < t; ++i) {
                    const S* pi = p + static_cast<size_t>(i) * t;
                    const S* dpi = dp.data() + static_cast<size_t>(i) * t;
                    S rs = S(0);
                    for (int j = 0; j < t; ++j) rs += dpi[j] * pi[j];
                    S* dsi = ds.data() + static_cast<size_t>(i) * t;
                    for (int j = 0; j < t; ++j) dsi[j] = pi[j] * (dpi[j] - rs) * inv_sqrt_hd;
                }
                kernels::matmul_nn(ds.data(), kh.data(), gq.data(), t, t, hd);
                kernels::matmul_tn(ds.data(), qh.data(), gk.data(), t, t, hd);
                kernels::matmul_tn(p, doh.data(), gv.data(), t, t, hd);
                for (int i = 0; i < t; ++i) {
                    std::copy_n(gq.data() + static_cast<size_t>(i) * hd, hd,
                                dq.data() + static_cast<size_t>(i) * d + off);
                    std::copy_n(gk.data() + static_cast<size_t>(i) * hd, hd,
                                dk.data() + static_cast<size_t>(i) * d + off);
                    std::copy_n(gv.data() + static_cast<size_t>(i) * hd, hd,
                                dv.data() + static_cast<size_t>(i) * d + off);
                }
            }
            // Rotation is orthogonal; its backward is the inverse rotation.
            kernels::rope_rows(dq.data(), t, n_heads, hd, 0, rope_base, true);
            kernels::rope_rows(dk.data(), t, n_heads, hd, 0, rope_base, true);
            if (tp.wants_grad(q)) tp.accumulate(q, dq.data(), dq.size());
            if (tp.wants_grad(k)) tp.accumulate(k, dk.data(), dk.size());
            if (tp.wants_grad(v)) tp.accumulate(v, dv.data(), dv.size());
        });
    }
    return out;
}

}  // namespace ops
}  // namespace innerlm
