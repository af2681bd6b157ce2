#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mgt/error.hpp"
#include "mgt/rng.hpp"
#include "mgt/tensor.hpp"

namespace mgt {

enum class RunMode { kTrain, kEval };

// Handle to a tensor recorded on a Tape. The tape id guards against mixing
// handles across tapes.
struct Val {
    int32_t idx = -1;
    uint32_t tape_id = 0;
    bool ok() const { return idx >= 0; }
};

// Binary attention mask over the trailing two (S x S) dims of an operand.
// batch == 1 broadcasts one mask over all leading dims.
struct MaskView {
    const uint8_t* data = nullptr;
    int64_t batch = 1;
    int64_t s = 0;

    const uint8_t* matrix(int64_t b) const { return data + (batch == 1 ? 0 : b) * s * s; }
};

// Running statistics for one batch-norm site; owned by the model, mutated by
// the op in train mode.
template <class T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
};

namespace detail {

// c += a (m x k) * b (k x n). The j-loop is contiguous on b and c so the
// compiler can vectorize without value-changing flags.
template <class T>
inline void mm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t l = 0; l < k; ++l) {
            T av = arow[l];
            const T* brow = b + l * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
inline void transpose(const T* x, T* out, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
}

inline Shape batch_dims(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

}  // namespace detail

// Reverse-mode tape. Ops compute forward immediately and, while recording,
// push a backward closure; backward() replays closures in exact reverse
// order with ordered (deterministic) gradient accumulation.
template <class T>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording), id_(next_id()++) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }

    Val leaf(Tensor<T> v, bool requires_grad = false) {
        return push(std::move(v), requires_grad && recording_);
    }

    const Tensor<T>& value(Val v) const { return node(v).value; }

    // Valid after backward(); zero tensor if the node received no gradient.
    const Tensor<T>& grad(Val v) const {
        Node& n = const_cast<Node&>(node(v));
        check(n.requires_grad, "Tape::grad: node does not require gradients");
        if (!n.grad_allocated) {
            n.grad = Tensor<T>::zeros(n.value.shape);
            n.grad_allocated = true;
        }
        return n.grad;
    }

    bool requires_grad(Val v) const { return node(v).requires_grad; }

    size_t num_nodes() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        backs_.clear();
    }

    // ---- ops ------------------------------------------------------------

    // a: [..., m, k], b: [..., k, n]. Leading dims must match or broadcast
    // from a single (or absent) batch.
    Val matmul(Val a, Val b) { return matmul_impl(a, b, false); }

    // a: [..., m, k], b: [..., n, k]; computes a * b^T. Used for Q K^T.
    Val matmul_nt(Val a, Val b) { return matmul_impl(a, b, true); }

    Val add(Val a, Val b) {
        const Tensor<T>& x = value(a);
        const Tensor<T>& y = value(b);
        check_arg(same_shape(x.shape, y.shape),
                  "add: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
        Tensor<T> out(x.shape);
        for (int64_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] + y.data[i];
        Val o = push(std::move(out), needs_grad({a, b}));
        record(o, [this, a, b, o] {
            const Tensor<T>& g = node(o).grad;
            accumulate(a, [&](Tensor<T>& ga) { for (int64_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i]; });
            accumulate(b, [&](Tensor<T>& gb) { for (int64_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i]; });
        });
        return o;
    }

    // x: [..., d], bias: [d], broadcast over all leading dims.
    Val add_bias(Val x, Val bias) {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& bv = value(bias);
        check_arg(bv.rank() == 1 && xv.rank() >= 1 && xv.dim(-1) == bv.dim(0),
                  "add_bias: shape mismatch " + shape_str(xv.shape) + " vs " + shape_str(bv.shape));
        int64_t d = bv.dim(0);
        int64_t rows = xv.size() / d;
        Tensor<T> out(xv.shape);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) out.data[r * d + j] = xv.data[r * d + j] + bv.data[j];
        Val o = push(std::move(out), needs_grad({x, bias}));
        record(o, [this, x, bias, o, rows, d] {
            const Tensor<T>& g = node(o).grad;
            accumulate(x, [&](Tensor<T>& gx) { for (int64_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i]; });
            accumulate(bias, [&](Tensor<T>& gb) {
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) gb.data[j] += g.data[r * d + j];
            });
        });
        return o;
    }

    Val scale(Val x, T c) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape);
        for (int64_t i = 0; i < xv.size(); ++i) out.data[i] = xv.data[i] * c;
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o, c] {
            const Tensor<T>& g = node(o).grad;
            accumulate(x, [&](Tensor<T>& gx) { for (int64_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * c; });
        });
        return o;
    }

    Val relu(Val x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape);
        for (int64_t i = 0; i < xv.size(); ++i) out.data[i] = xv.data[i] > T(0) ? xv.data[i] : T(0);
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o] {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& xv2 = value(x);
            accumulate(x, [&](Tensor<T>& gx) {
                for (int64_t i = 0; i < g.size(); ++i)
                    if (xv2.data[i] > T(0)) gx.data[i] += g.data[i];
            });
        });
        return o;
    }

    // Elementwise product of two same-shape tensors.
    Val mul(Val a, Val b) {
        const Tensor<T>& x = value(a);
        const Tensor<T>& y = value(b);
        check_arg(same_shape(x.shape, y.shape),
                  "mul: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
        Tensor<T> out(x.shape);
        for (int64_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] * y.data[i];
        Val o = push(std::move(out), needs_grad({a, b}));
        record(o, [this, a, b, o] {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& xv = value(a);
            const Tensor<T>& yv = value(b);
            accumulate(a, [&](Tensor<T>& ga) { for (int64_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * yv.data[i]; });
            accumulate(b, [&](Tensor<T>& gb) { for (int64_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * xv.data[i]; });
        });
        return o;
    }

    Val concat_lastdim(std::span<const Val> parts) {
        check_arg(!parts.empty(), "concat_lastdim: no inputs");
        const Shape& head = value(parts[0]).shape;
        Shape lead(head.begin(), head.end() - 1);
        int64_t total_last = 0;
        std::vector<int64_t> widths;
        for (Val p : parts) {
            const Shape& s = value(p).shape;
            check_arg(Shape(s.begin(), s.end() - 1) == lead,
                      "concat_lastdim: leading-dim mismatch " + shape_str(head) + " vs " + shape_str(s));
            widths.push_back(s.back());
            total_last += s.back();
        }
        Shape out_shape = lead;
        out_shape.push_back(total_last);
        Tensor<T> out(out_shape);
        int64_t rows = numel(lead);
        int64_t off = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor<T>& pv = value(parts[pi]);
            int64_t w = widths[pi];
            for (int64_t r = 0; r < rows; ++r)
                std::copy_n(pv.ptr() + r * w, w, out.ptr() + r * total_last + off);
            off += w;
        }
        std::vector<Val> parts_copy(parts.begin(), parts.end());
        Val o = push(std::move(out), needs_grad(parts));
        record(o, [this, parts_copy, widths, rows, total_last, o] {
            const Tensor<T>& g = node(o).grad;
            int64_t off2 = 0;
            for (size_t pi = 0; pi < parts_copy.size(); ++pi) {
                int64_t w = widths[pi];
                int64_t start = off2;
                accumulate(parts_copy[pi], [&](Tensor<T>& gp) {
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t j = 0; j < w; ++j) gp.data[r * w + j] += g.data[r * total_last + start + j];
                });
                off2 += w;
            }
        });
        return o;
    }

    Val concat_lastdim(std::initializer_list<Val> parts) {
        return concat_lastdim(std::span<const Val>(parts.begin(), parts.size()));
    }

    // [B, S, H*Dh] -> [B, H, S, Dh]
    Val split_heads(Val x, int64_t heads) {
        const Tensor<T>& xv = value(x);
        check_arg(xv.rank() == 3, "split_heads: expected rank-3 input, got " + shape_str(xv.shape));
        int64_t b = xv.dim(0), s = xv.dim(1), d = xv.dim(2);
        check_arg(d % heads == 0, "split_heads: last dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
        int64_t dh = d / heads;
        Tensor<T> out({b, heads, s, dh});
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t si = 0; si < s; ++si)
                for (int64_t h = 0; h < heads; ++h)
                    std::copy_n(xv.ptr() + ((bi * s + si) * d + h * dh), dh,
                                out.ptr() + (((bi * heads + h) * s + si) * dh));
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o, b, s, d, heads, dh] {
            const Tensor<T>& g = node(o).grad;
            accumulate(x, [&](Tensor<T>& gx) {
                for (int64_t bi = 0; bi < b; ++bi)
                    for (int64_t si = 0; si < s; ++si)
                        for (int64_t h = 0; h < heads; ++h) {
                            const T* src = g.ptr() + (((bi * heads + h) * s + si) * dh);
                            T* dst = gx.ptr() + ((bi * s + si) * d + h * dh);
                            for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                        }
            });
        });
        return o;
    }

    // [B, H, S, Dh] -> [B, S, H*Dh]
    Val merge_heads(Val x) {
        const Tensor<T>& xv = value(x);
        check_arg(xv.rank() == 4, "merge_heads: expected rank-4 input, got " + shape_str(xv.shape));
        int64_t b = xv.dim(0), heads = xv.dim(1), s = xv.dim(2), dh = xv.dim(3);
        int64_t d = heads * dh;
        Tensor<T> out({b, s, d});
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t si = 0; si < s; ++si)
                    std::copy_n(xv.ptr() + (((bi * heads + h) * s + si) * dh), dh,
                                out.ptr() + ((bi * s + si) * d + h * dh));
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o, b, s, d, heads, dh] {
            const Tensor<T>& g = node(o).grad;
            accumulate(x, [&](Tensor<T>& gx) {
                for (int64_t bi = 0; bi < b; ++bi)
                    for (int64_t h = 0; h < heads; ++h)
                        for (int64_t si = 0; si < s; ++si) {
                            const T* src = g.ptr() + ((bi * s + si) * d + h * dh);
                            T* dst = gx.ptr() + (((bi * heads + h) * s + si) * dh);
                            for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                        }
            });
        });
        return o;
    }

    Val reshape(Val x, Shape new_shape) {
        const Tensor<T>& xv = value(x);
        check_arg(numel(new_shape) == xv.size(),
                  "reshape: element count mismatch " + shape_str(xv.shape) + " vs " + shape_str(new_shape));
        Tensor<T> out(new_shape, xv.data);
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o] {
            const Tensor<T>& g = node(o).grad;
            accumulate(x, [&](Tensor<T>& gx) { for (int64_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i]; });
        });
        return o;
    }

    // Row-wise softmax over the last dimension, max-subtracted for stability.
    Val softmax_lastdim(Val x) {
        const Tensor<T>& xv = value(x);
        check_arg(xv.rank() >= 1 && xv.dim(-1) >= 1, "softmax_lastdim: empty last dimension");
        int64_t n = xv.dim(-1);
        int64_t rows = xv.size() / n;
        Tensor<T> out(xv.shape);
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = xv.ptr() + r * n;
            T* yr = out.ptr() + r * n;
            T m = xr[0];
            for (int64_t j = 1; j < n; ++j) m = std::max(m, xr[j]);
            T sum = T(0);
            for (int64_t j = 0; j < n; ++j) {
                yr[j] = std::exp(xr[j] - m);
                sum += yr[j];
            }
            T inv = T(1) / sum;
            for (int64_t j = 0; j < n; ++j) yr[j] *= inv;
        }
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o, rows, n] {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& y = node(o).value;
            accumulate(x, [&](Tensor<T>& gx) {
                for (int64_t r = 0; r < rows; ++r) {
                    const T* yr = y.ptr() + r * n;
                    const T* gr = g.ptr() + r * n;
                    T dot = T(0);
                    for (int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                    T* gxr = gx.ptr() + r * n;
                    for (int64_t j = 0; j < n; ++j) gxr[j] += yr[j] * (gr[j] - dot);
                }
            });
        });
        return o;
    }

    // Entries with mask == 0 are replaced by -1e9; no gradient flows through
    // replaced entries. x trailing dims must be S x S.
    Val masked_fill_neg_inf(Val x, MaskView mask) { return apply_mask(x, mask, /*fill=*/true); }

    // Elementwise multiply by the binary mask (Hadamard); gradient masked
    // identically.
    Val hadamard_mask(Val x, MaskView mask) { return apply_mask(x, mask, /*fill=*/false); }

    // table: [V, e]; out shape = idx_shape + [e]. Backward scatter-adds.
    Val embedding_lookup(Val table, std::span<const int32_t> indices, Shape idx_shape) {
        const Tensor<T>& tv = value(table);
        check_arg(tv.rank() == 2, "embedding_lookup: table must be rank 2, got " + shape_str(tv.shape));
        check_arg(static_cast<int64_t>(indices.size()) == numel(idx_shape),
                  "embedding_lookup: index count does not match index shape");
        int64_t v = tv.dim(0), e = tv.dim(1);
        for (size_t i = 0; i < indices.size(); ++i)
            check_arg(indices[i] >= 0 && indices[i] < v,
                      "embedding_lookup: index " + std::to_string(indices[i]) + " out of range [0," + std::to_string(v) + ") at position " + std::to_string(i));
        Shape out_shape = idx_shape;
        out_shape.push_back(e);
        Tensor<T> out(out_shape);
        for (size_t i = 0; i < indices.size(); ++i)
            std::copy_n(tv.ptr() + static_cast<int64_t>(indices[i]) * e, e, out.ptr() + static_cast<int64_t>(i) * e);
        std::vector<int32_t> idx_copy(indices.begin(), indices.end());
        Val o = push(std::move(out), needs_grad({table}));
        record(o, [this, table, o, idx_copy, e] {
            const Tensor<T>& g = node(o).grad;
            accumulate(table, [&](Tensor<T>& gt) {
                for (size_t i = 0; i < idx_copy.size(); ++i) {
                    T* dst = gt.ptr() + static_cast<int64_t>(idx_copy[i]) * e;
                    const T* src = g.ptr() + static_cast<int64_t>(i) * e;
                    for (int64_t j = 0; j < e; ++j) dst[j] += src[j];
                }
            });
        });
        return o;
    }

    // x: [B, S, d], valid: B*S flags -> [B, d]; sums rows with valid = 1.
    // Every sample must have at least one valid row.
    Val sum_rows_masked(Val x, std::span<const uint8_t> valid) {
        const Tensor<T>& xv = value(x);
        check_arg(xv.rank() == 3, "sum_rows_masked: expected rank-3 input, got " + shape_str(xv.shape));
        int64_t b = xv.dim(0), s = xv.dim(1), d = xv.dim(2);
        check_arg(static_cast<int64_t>(valid.size()) == b * s, "sum_rows_masked: valid length mismatch");
        Tensor<T> out({b, d});
        for (int64_t bi = 0; bi < b; ++bi) {
            int64_t ones = 0;
            T* dst = out.ptr() + bi * d;
            for (int64_t si = 0; si < s; ++si) {
                if (!valid[bi * s + si]) continue;
                ++ones;
                const T* src = xv.ptr() + (bi * s + si) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
            check_arg(ones > 0, "sum_rows_masked: sample " + std::to_string(bi) + " has no valid rows");
        }
        std::vector<uint8_t> valid_copy(valid.begin(), valid.end());
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o, valid_copy, b, s, d] {
            const Tensor<T>& g = node(o).grad;
            accumulate(x, [&](Tensor<T>& gx) {
                for (int64_t bi = 0; bi < b; ++bi)
                    for (int64_t si = 0; si < s; ++si) {
                        if (!valid_copy[bi * s + si]) continue;
                        T* dst = gx.ptr() + (bi * s + si) * d;
                        const T* src = g.ptr() + bi * d;
                        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                    }
            });
        });
        return o;
    }

    // Inverted dropout: train mode zeroes with probability p and scales
    // survivors by 1/(1-p); eval mode is the identity.
    Val dropout(Val x, double p, RunMode mode, Rng& rng) {
        check_arg(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1), got " + std::to_string(p));
        const Tensor<T>& xv = value(x);
        if (mode == RunMode::kEval || p == 0.0) {
            Tensor<T> out = xv;
            Val o = push(std::move(out), needs_grad({x}));
            record(o, [this, x, o] {
                const Tensor<T>& g = node(o).grad;
                accumulate(x, [&](Tensor<T>& gx) { for (int64_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i]; });
            });
            return o;
        }
        T keep_scale = T(1) / T(1 - p);
        std::vector<uint8_t> kept(static_cast<size_t>(xv.size()));
        Tensor<T> out(xv.shape);
        for (int64_t i = 0; i < xv.size(); ++i) {
            kept[i] = rng.uniform() >= p;
            out.data[i] = kept[i] ? xv.data[i] * keep_scale : T(0);
        }
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o, kept = std::move(kept), keep_scale] {
            const Tensor<T>& g = node(o).grad;
            accumulate(x, [&](Tensor<T>& gx) {
                for (int64_t i = 0; i < g.size(); ++i)
                    if (kept[i]) gx.data[i] += g.data[i] * keep_scale;
            });
        });
        return o;
    }

    // x: [N, d]. Train mode normalizes per feature with batch statistics over
    // rows with valid = 1 (empty valid = all rows) and updates running stats
    // with momentum 0.1; eval mode uses running stats. eps = 1e-5.
    Val batch_norm(Val x, Val gamma, Val beta, BatchNormState<T>& state, RunMode mode,
                   std::span<const uint8_t> valid = {}) {
        const Tensor<T>& xv = value(x);
        check_arg(xv.rank() == 2, "batch_norm: expected rank-2 input, got " + shape_str(xv.shape));
        int64_t n = xv.dim(0), d = xv.dim(1);
        const Tensor<T>& gv = value(gamma);
        const Tensor<T>& bv = value(beta);
        check_arg(gv.shape == Shape{d} && bv.shape == Shape{d}, "batch_norm: gamma/beta shape mismatch");
        check_arg(valid.empty() || static_cast<int64_t>(valid.size()) == n, "batch_norm: valid length mismatch");
        const T eps = T(1e-5);

        if (mode == RunMode::kEval) {
            Tensor<T> out({n, d});
            std::vector<T> inv_std(static_cast<size_t>(d));
            for (int64_t j = 0; j < d; ++j) inv_std[j] = T(1) / std::sqrt(state.running_var.data[j] + eps);
            for (int64_t r = 0; r < n; ++r)
                for (int64_t j = 0; j < d; ++j)
                    out.data[r * d + j] =
                        gv.data[j] * (xv.data[r * d + j] - state.running_mean.data[j]) * inv_std[j] + bv.data[j];
            Val o = push(std::move(out), needs_grad({x, gamma, beta}));
            record(o, [this, x, gamma, beta, o, n, d, inv_std,
                       mean = state.running_mean.data] {
                const Tensor<T>& g = node(o).grad;
                const Tensor<T>& xv2 = value(x);
                const Tensor<T>& gv2 = value(gamma);
                accumulate(x, [&](Tensor<T>& gx) {
                    for (int64_t r = 0; r < n; ++r)
                        for (int64_t j = 0; j < d; ++j) gx.data[r * d + j] += g.data[r * d + j] * gv2.data[j] * inv_std[j];
                });
                accumulate(gamma, [&](Tensor<T>& gg) {
                    for (int64_t r = 0; r < n; ++r)
                        for (int64_t j = 0; j < d; ++j)
                            gg.data[j] += g.data[r * d + j] * (xv2.data[r * d + j] - mean[j]) * inv_std[j];
                });
                accumulate(beta, [&](Tensor<T>& gb) {
                    for (int64_t r = 0; r < n; ++r)
                        for (int64_t j = 0; j < d; ++j) gb.data[j] += g.data[r * d + j];
                });
            });
            return o;
        }

        // Train mode.
        int64_t nv = 0;
        if (valid.empty()) {
            nv = n;
        } else {
            for (uint8_t f : valid) nv += f ? 1 : 0;
        }
        check_arg(nv >= 2, "batch_norm: train mode needs at least 2 valid rows, got " + std::to_string(nv));

        std::vector<T> mean(static_cast<size_t>(d), T(0)), var(static_cast<size_t>(d), T(0));
        for (int64_t r = 0; r < n; ++r) {
            if (!valid.empty() && !valid[r]) continue;
            for (int64_t j = 0; j < d; ++j) mean[j] += xv.data[r * d + j];
        }
        for (int64_t j = 0; j < d; ++j) mean[j] /= T(nv);
        for (int64_t r = 0; r < n; ++r) {
            if (!valid.empty() && !valid[r]) continue;
            for (int64_t j = 0; j < d; ++j) {
                T c = xv.data[r * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        for (int64_t j = 0; j < d; ++j) var[j] /= T(nv);

        const T momentum = T(0.1);
        T unbias = T(nv) / T(nv - 1);
        for (int64_t j = 0; j < d; ++j) {
            state.running_mean.data[j] = (T(1) - momentum) * state.running_mean.data[j] + momentum * mean[j];
            state.running_var.data[j] = (T(1) - momentum) * state.running_var.data[j] + momentum * var[j] * unbias;
        }

        std::vector<T> inv_std(static_cast<size_t>(d));
        for (int64_t j = 0; j < d; ++j) inv_std[j] = T(1) / std::sqrt(var[j] + eps);

        Tensor<T> out({n, d});
        for (int64_t r = 0; r < n; ++r)
            for (int64_t j = 0; j < d; ++j)
                out.data[r * d + j] = gv.data[j] * (xv.data[r * d + j] - mean[j]) * inv_std[j] + bv.data[j];

        std::vector<uint8_t> valid_copy(valid.begin(), valid.end());
        Val o = push(std::move(out), needs_grad({x, gamma, beta}));
        record(o, [this, x, gamma, beta, o, n, d, nv, mean, inv_std, valid_copy] {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& xv2 = value(x);
            const Tensor<T>& gv2 = value(gamma);
            // All rows (valid or not) are normalized with the batch stats, so
            // every row contributes to d(mean), d(var), d(gamma), d(beta);
            // only valid rows receive the statistic terms in dx.
            std::vector<T> sum_g(static_cast<size_t>(d), T(0));      // sum over rows of dy*gamma
            std::vector<T> sum_gx(static_cast<size_t>(d), T(0));     // sum over rows of dy*gamma*(x-mean)
            for (int64_t r = 0; r < n; ++r)
                for (int64_t j = 0; j < d; ++j) {
                    T gj = g.data[r * d + j] * gv2.data[j];
                    sum_g[j] += gj;
                    sum_gx[j] += gj * (xv2.data[r * d + j] - mean[j]);
                }
            accumulate(x, [&](Tensor<T>& gx) {
                for (int64_t j = 0; j < d; ++j) {
                    T dvar = sum_gx[j] * T(-0.5) * inv_std[j] * inv_std[j] * inv_std[j];
                    T dmean = -inv_std[j] * sum_g[j];
                    for (int64_t r = 0; r < n; ++r) {
                        T gj = g.data[r * d + j] * gv2.data[j];
                        T dx = gj * inv_std[j];
                        if (valid_copy.empty() || valid_copy[r])
                            dx += dvar * T(2) * (xv2.data[r * d + j] - mean[j]) / T(nv) + dmean / T(nv);
                        gx.data[r * d + j] += dx;
                    }
                }
            });
            accumulate(gamma, [&](Tensor<T>& gg) {
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t j = 0; j < d; ++j)
                        gg.data[j] += g.data[r * d + j] * (xv2.data[r * d + j] - mean[j]) * inv_std[j];
            });
            accumulate(beta, [&](Tensor<T>& gb) {
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t j = 0; j < d; ++j) gb.data[j] += g.data[r * d + j];
            });
        });
        return o;
    }

    // logits: [N, C]; returns the scalar mean of -log softmax(logits)[label].
    Val cross_entropy_logits(Val logits, std::span<const int32_t> labels) {
        const Tensor<T>& lv = value(logits);
        check_arg(lv.rank() == 2, "cross_entropy_logits: expected rank-2 logits, got " + shape_str(lv.shape));
        int64_t n = lv.dim(0), c = lv.dim(1);
        check_arg(static_cast<int64_t>(labels.size()) == n, "cross_entropy_logits: label count mismatch");
        for (int64_t i = 0; i < n; ++i)
            check_arg(labels[i] >= 0 && labels[i] < c,
                      "cross_entropy_logits: label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(c) + ")");
        T total = T(0);
        for (int64_t r = 0; r < n; ++r) {
            const T* row = lv.ptr() + r * c;
            T m = row[0];
            for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
            T sum = T(0);
            for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - m);
            total += m + std::log(sum) - row[labels[r]];
        }
        Tensor<T> out({1});
        out.data[0] = total / T(n);
        std::vector<int32_t> labels_copy(labels.begin(), labels.end());
        Val o = push(std::move(out), needs_grad({logits}));
        record(o, [this, logits, o, labels_copy, n, c] {
            T gscale = node(o).grad.data[0] / T(n);
            const Tensor<T>& lv2 = value(logits);
            accumulate(logits, [&](Tensor<T>& gl) {
                for (int64_t r = 0; r < n; ++r) {
                    const T* row = lv2.ptr() + r * c;
                    T m = row[0];
                    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
                    T sum = T(0);
                    for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - m);
                    T inv = T(1) / sum;
                    T* grow = gl.ptr() + r * c;
                    for (int64_t j = 0; j < c; ++j) grow[j] += gscale * std::exp(row[j] - m) * inv;
                    grow[labels_copy[r]] -= gscale;
                }
            });
        });
        return o;
    }

    Val reduce_sum(Val x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out({1});
        T s = T(0);
        for (int64_t i = 0; i < xv.size(); ++i) s += xv.data[i];
        out.data[0] = s;
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o] {
            T g = node(o).grad.data[0];
            accumulate(x, [&](Tensor<T>& gx) { for (int64_t i = 0; i < gx.size(); ++i) gx.data[i] += g; });
        });
        return o;
    }

    // Runs all recorded backward rules in exact reverse recording order,
    // seeding d(loss)/d(loss) = 1.
    void backward(Val loss) {
        check(loss.tape_id == id_ && loss.idx >= 0 && loss.idx < static_cast<int32_t>(nodes_.size()),
              "backward: loss is not recorded on this tape");
        Node& ln = nodes_[static_cast<size_t>(loss.idx)];
        check(ln.value.size() == 1, "backward: loss must be a scalar, got " + shape_str(ln.value.shape));
        check(recording_, "backward: tape is not recording");
        if (!ln.requires_grad) return;  // nothing depends on parameters
        grad_buf(loss).data[0] = T(1);
        for (auto it = backs_.rbegin(); it != backs_.rend(); ++it) (*it)();
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        bool grad_allocated = false;
    };

    static uint32_t& next_id() {
        static uint32_t counter = 1;
        return counter;
    }

    const Node& node(Val v) const {
        check(v.tape_id == id_, "Tape: value belongs to a different tape");
        check(v.idx >= 0 && v.idx < static_cast<int32_t>(nodes_.size()), "Tape: invalid value handle");
        return nodes_[static_cast<size_t>(v.idx)];
    }
    Node& node(Val v) { return const_cast<Node&>(static_cast<const Tape*>(this)->node(v)); }

    Val push(Tensor<T> v, bool requires_grad) {
        nodes_.push_back(Node{std::move(v), Tensor<T>{}, requires_grad, false});
        return Val{static_cast<int32_t>(nodes_.size() - 1), id_};
    }

    bool needs_grad(std::initializer_list<Val> parents) const {
        return needs_grad(std::span<const Val>(parents.begin(), parents.size()));
    }
    bool needs_grad(std::span<const Val> parents) const {
        if (!recording_) return false;
        for (Val p : parents)
            if (node(p).requires_grad) return true;
        return false;
    }

    Tensor<T>& grad_buf(Val v) {
        Node& n = node(v);
        if (!n.grad_allocated) {
            n.grad = Tensor<T>::zeros(n.value.shape);
            n.grad_allocated = true;
        }
        return n.grad;
    }

    // Run fn on the parent's gradient buffer if the parent wants gradients.
    template <class Fn>
    void accumulate(Val parent, Fn&& fn) {
        if (!node(parent).requires_grad) return;
        fn(grad_buf(parent));
    }

    template <class Fn>
    void record(Val out, Fn&& fn) {
        if (!recording_ || !node(out).requires_grad) return;
        // Skip the whole rule when no gradient ever reached this node.
        backs_.push_back([this, out, fn = std::forward<Fn>(fn)] {
            if (!node(out).grad_allocated) return;
            fn();
        });
    }

    Val matmul_impl(Val a, Val b, bool transpose_b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        const char* opname = transpose_b ? "matmul_nt" : "matmul";
        check_arg(av.rank() >= 2 && bv.rank() >= 2,
                  std::string(opname) + ": operands must be at least rank 2, got " + shape_str(av.shape) + " and " + shape_str(bv.shape));
        int64_t m = av.dim(-2), k = av.dim(-1);
        int64_t bk = transpose_b ? bv.dim(-1) : bv.dim(-2);
        int64_t n = transpose_b ? bv.dim(-2) : bv.dim(-1);
        check_arg(k == bk, std::string(opname) + ": inner dimension mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));

        Shape batch_a = detail::batch_dims(av.shape);
        Shape batch_b = detail::batch_dims(bv.shape);
        int64_t na = numel(batch_a), nb = numel(batch_b);
        check_arg(batch_a == batch_b || na == 1 || nb == 1,
                  std::string(opname) + ": batch dimensions do not match or broadcast: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
        int64_t batches = std::max(na, nb);
        Shape out_batch = (na >= nb) ? batch_a : batch_b;
        Shape out_shape = out_batch;
        out_shape.push_back(m);
        out_shape.push_back(n);

        Tensor<T> out(out_shape);
        std::vector<T> scratch;
        if (transpose_b) scratch.resize(static_cast<size_t>(k * n));
        for (int64_t bi = 0; bi < batches; ++bi) {
            const T* ap = av.ptr() + (na == 1 ? 0 : bi) * m * k;
            const T* bp = bv.ptr() + (nb == 1 ? 0 : bi) * k * n;
            T* cp = out.ptr() + bi * m * n;
            if (transpose_b) {
                detail::transpose(bp, scratch.data(), n, k);  // [n,k] -> [k,n]
                detail::mm_acc(ap, scratch.data(), cp, m, k, n);
            } else {
                detail::mm_acc(ap, bp, cp, m, k, n);
            }
        }

        Val o = push(std::move(out), needs_grad({a, b}));
        record(o, [this, a, b, o, transpose_b, m, k, n, na, nb, batches] {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& av2 = value(a);
            const Tensor<T>& bv2 = value(b);
            accumulate(a, [&](Tensor<T>& ga) {
                std::vector<T> scratch(static_cast<size_t>(n * k));
                for (int64_t bi = 0; bi < batches; ++bi) {
                    const T* gp = g.ptr() + bi * m * n;
                    const T* bp = bv2.ptr() + (nb == 1 ? 0 : bi) * k * n;
                    T* gap = ga.ptr() + (na == 1 ? 0 : bi) * m * k;
                    if (transpose_b) {
                        // dA = dC * B, B is [n,k]
                        detail::mm_acc(gp, bp, gap, m, n, k);
                    } else {
                        // dA = dC * B^T
                        detail::transpose(bp, scratch.data(), k, n);  // [k,n] -> [n,k]
                        detail::mm_acc(gp, scratch.data(), gap, m, n, k);
                    }
                }
            });
            accumulate(b, [&](Tensor<T>& gb) {
                std::vector<T> scratch(static_cast<size_t>(std::max(m * k, m * n)));
                for (int64_t bi = 0; bi < batches; ++bi) {
                    const T* gp = g.ptr() + bi * m * n;
                    const T* ap = av2.ptr() + (na == 1 ? 0 : bi) * m * k;
                    T* gbp = gb.ptr() + (nb == 1 ? 0 : bi) * k * n;
                    if (transpose_b) {
                        // dB = dC^T * A, dB is [n,k]
                        detail::transpose(gp, scratch.data(), m, n);  // [m,n] -> [n,m]
                        detail::mm_acc(scratch.data(), ap, gbp, n, m, k);
                    } else {
                        // dB = A^T * dC, dB is [k,n]
                        detail::transpose(ap, scratch.data(), m, k);  // [m,k] -> [k,m]
                        detail::mm_acc(scratch.data(), gp, gbp, k, m, n);
                    }
                }
            });
        });
        return o;
    }

    Val apply_mask(Val x, MaskView mask, bool fill) {
        const Tensor<T>& xv = value(x);
        check_arg(xv.rank() >= 2, "mask op: input must be at least rank 2");
        int64_t s2 = xv.dim(-1), s1 = xv.dim(-2);
        check_arg(s1 == mask.s && s2 == mask.s,
                  "mask op: trailing dims " + shape_str(xv.shape) + " do not match mask S=" + std::to_string(mask.s));
        int64_t lead = xv.size() / (s1 * s2);
        check_arg(mask.batch == 1 || lead % mask.batch == 0,
                  "mask op: leading dims not divisible by mask batch");
        int64_t per_mask = mask.batch == 1 ? lead : lead / mask.batch;
        const T kFill = T(-1e9);

        Tensor<T> out(xv.shape);
        for (int64_t l = 0; l < lead; ++l) {
            const uint8_t* m = mask.matrix(l / per_mask);
            const T* xp = xv.ptr() + l * s1 * s2;
            T* op = out.ptr() + l * s1 * s2;
            if (fill) {
                for (int64_t i = 0; i < s1 * s2; ++i) op[i] = m[i] ? xp[i] : kFill;
            } else {
                for (int64_t i = 0; i < s1 * s2; ++i) op[i] = m[i] ? xp[i] : T(0);
            }
        }
        // Copy the relevant mask bytes so the closure does not dangle.
        std::vector<uint8_t> mask_copy(mask.data, mask.data + mask.batch * mask.s * mask.s);
        int64_t mbatch = mask.batch;
        Val o = push(std::move(out), needs_grad({x}));
        record(o, [this, x, o, mask_copy = std::move(mask_copy), mbatch, per_mask, lead, s1, s2] {
            const Tensor<T>& g = node(o).grad;
            accumulate(x, [&](Tensor<T>& gx) {
                for (int64_t l = 0; l < lead; ++l) {
                    const uint8_t* m = mask_copy.data() + (mbatch == 1 ? 0 : l / per_mask) * s1 * s2;
                    const T* gp = g.ptr() + l * s1 * s2;
                    T* gxp = gx.ptr() + l * s1 * s2;
                    for (int64_t i = 0; i < s1 * s2; ++i)
                        if (m[i]) gxp[i] += gp[i];
                }
            });
        });
        return o;
    }

    bool recording_;
    uint32_t id_;
    std::vector<Node> nodes_;
    std::vector<std::function<void()>> backs_;
};

}  // namespace mgt
