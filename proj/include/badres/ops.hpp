#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "badres/errors.hpp"
#include "badres/parallel.hpp"
#include "badres/tensor.hpp"

// Differentiable tensor ops. Every op validates shapes up front, computes the
// forward value with 64-bit accumulation in reductions, and records a graph
// node when any input requires grad. Backprop closures work on raw float
// arrays and never re-enter the op layer, so no graph is built during the
// backward sweep.

namespace badres {

namespace detail {

inline void op_shape_error(const char* op, const std::string& detail) {
    throw config_error(std::string(op) + ": " + detail);
}

inline void attach(Tensor& out, OpKind kind, std::vector<Tensor> inputs,
                   std::function<void(const Tensor&)> backprop) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (!any) return;
    out.set_requires_grad(true);
    auto node = std::make_shared<GraphNode>();
    node->kind = kind;
    node->inputs = std::move(inputs);
    node->backprop = std::move(backprop);
    out.set_node(std::move(node));
}

// C[i,:] += sum_k A[i,k] * B[k,:], rows [r0, r1); A is MxK, B is KxN.
inline void gemm_nn_rows(const float* a, const float* b, float* c,
                         std::size_t r0, std::size_t r1, std::size_t k,
                         std::size_t n) {
    std::vector<double> acc(n);
    for (std::size_t i = r0; i < r1; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = static_cast<double>(arow[kk]);
            const float* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        float* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
    }
}

inline void transpose_matrix(const float* src, std::size_t rows, std::size_t cols,
                             float* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[i,j] += sum_r A[r,i] * B[r,j] into a double buffer; A is RxM, B is RxN
// (i.e. C += A^T * B). Row range selects output rows i.
inline void gemm_tn_rows_acc(const float* a, const float* b, double* c,
                             std::size_t i0, std::size_t i1, std::size_t rows,
                             std::size_t m, std::size_t n) {
    for (std::size_t i = i0; i < i1; ++i) {
        double* crow = c + i * n;
        for (std::size_t r = 0; r < rows; ++r) {
            const double av = static_cast<double>(a[r * m + i]);
            if (av == 0.0) continue;
            const float* brow = b + r * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * static_cast<double>(brow[j]);
        }
    }
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// True when b's shape equals the trailing dims of a's shape (leading-batch
// broadcast; the only broadcast form supported).
inline bool is_suffix_shape(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    const std::size_t off = a.size() - b.size();
    for (std::size_t i = 0; i < b.size(); ++i)
        if (a[off + i] != b[i]) return false;
    return true;
}

// Sums g over leading chunks: g has `chunks * inner` elements, result inner.
inline std::vector<float> reduce_leading(const std::vector<float>& g,
                                         std::size_t inner) {
    const std::size_t chunks = g.size() / inner;
    std::vector<double> acc(inner, 0.0);
    for (std::size_t c = 0; c < chunks; ++c) {
        const float* src = g.data() + c * inner;
        for (std::size_t i = 0; i < inner; ++i) acc[i] += static_cast<double>(src[i]);
    }
    std::vector<float> out(inner);
    for (std::size_t i = 0; i < inner; ++i) out[i] = static_cast<float>(acc[i]);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: (L..., m, k) x (L..., k, n) -> (L..., m, n), or rhs of rank 2
// shared across all leading batch dims.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        detail::op_shape_error("matmul", "inputs must have rank >= 2, got " +
                                             shape_str(a.shape()) + " and " +
                                             shape_str(b.shape()));
    const bool shared_rhs = b.rank() == 2 && a.rank() != 2;
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
    const std::size_t bk = bs[bs.size() - 2], n = bs[bs.size() - 1];
    if (k != bk)
        detail::op_shape_error("matmul", "inner dimensions disagree: " +
                                             shape_str(as) + " x " + shape_str(bs));
    std::size_t batch = 1;
    if (!shared_rhs) {
        if (as.size() != bs.size())
            detail::op_shape_error("matmul", "rank mismatch: " + shape_str(as) +
                                                 " x " + shape_str(bs));
        for (std::size_t i = 0; i + 2 < as.size(); ++i) {
            if (as[i] != bs[i])
                detail::op_shape_error("matmul", "batch dimensions disagree: " +
                                                     shape_str(as) + " x " + shape_str(bs));
        }
    }
    for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];

    Shape out_shape(as.begin(), as.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(std::move(out_shape));

    const float* ad = a.data().data();
    const float* bd = b.data().data();
    float* cd = out.mutable_data().data();
    const std::size_t rows_total = batch * m;
    detail::parallel_for(rows_total, 4096 / std::max<std::size_t>(k, 1) + 1,
                         [&](std::size_t r0, std::size_t r1) {
                             for (std::size_t bi = r0 / m; bi * m < r1; ++bi) {
                                 const std::size_t lo = std::max(r0, bi * m) - bi * m;
                                 const std::size_t hi = std::min(r1, (bi + 1) * m) - bi * m;
                                 const float* bmat = shared_rhs ? bd : bd + bi * k * n;
                                 detail::gemm_nn_rows(ad + bi * m * k, bmat,
                                                      cd + bi * m * n, lo, hi, k, n);
                             }
                         });

    detail::attach(out, OpKind::matmul, {a, b}, [a, b, batch, m, k, n, shared_rhs](const Tensor& o) {
        const std::vector<float>& g = o.grad();
        const float* gd = g.data();
        const float* ad = a.data().data();
        const float* bd = b.data().data();
        if (a.requires_grad()) {
            // dA[bi] = dC[bi] * B[bi]^T, run as an NN product against a
            // transposed copy of B so the inner loop streams rows.
            std::vector<float> da(a.numel());
            std::vector<float> bt_shared;
            if (shared_rhs) {
                bt_shared.resize(k * n);
                detail::transpose_matrix(bd, k, n, bt_shared.data());
            }
            detail::parallel_for(batch * m, 4096 / std::max<std::size_t>(n, 1) + 1,
                                 [&](std::size_t r0, std::size_t r1) {
                                     std::vector<float> bt_local;
                                     for (std::size_t bi = r0 / m; bi * m < r1; ++bi) {
                                         const std::size_t lo = std::max(r0, bi * m) - bi * m;
                                         const std::size_t hi = std::min(r1, (bi + 1) * m) - bi * m;
                                         const float* bt;
                                         if (shared_rhs) {
                                             bt = bt_shared.data();
                                         } else {
                                             bt_local.resize(k * n);
                                             detail::transpose_matrix(bd + bi * k * n, k, n,
                                                                      bt_local.data());
                                             bt = bt_local.data();
                                         }
                                         detail::gemm_nn_rows(gd + bi * m * n, bt,
                                                              da.data() + bi * m * k,
                                                              lo, hi, n, k);
                                     }
                                 });
            a.accumulate_grad(da);
        }
        if (b.requires_grad()) {
            std::vector<float> db(b.numel());
            if (shared_rhs) {
                // dB = sum over all batch rows: A^T * dC, with A as (batch*m, k)
                std::vector<double> acc(k * n, 0.0);
                detail::parallel_for(k, 8, [&](std::size_t i0, std::size_t i1) {
                    detail::gemm_tn_rows_acc(ad, gd, acc.data(), i0, i1, batch * m, k, n);
                });
                for (std::size_t i = 0; i < db.size(); ++i) db[i] = static_cast<float>(acc[i]);
            } else {
                detail::parallel_for(batch, 1, [&](std::size_t b0, std::size_t b1) {
                    std::vector<double> acc(k * n);
                    for (std::size_t bi = b0; bi < b1; ++bi) {
                        std::fill(acc.begin(), acc.end(), 0.0);
                        detail::gemm_tn_rows_acc(ad + bi * m * k, gd + bi * m * n,
                                                 acc.data(), 0, k, m, k, n);
                        float* dst = db.data() + bi * k * n;
                        for (std::size_t i = 0; i < k * n; ++i) dst[i] = static_cast<float>(acc[i]);
                    }
                });
            }
            b.accumulate_grad(db);
        }
    });
    return out;
}

namespace detail {

enum class BinKind { add, subtract, multiply };

inline Tensor binary_elementwise(const Tensor& a, const Tensor& b, BinKind op) {
    const char* name = op == BinKind::add        ? "add"
                       : op == BinKind::subtract ? "subtract"
                                                 : "multiply";
    if (!is_suffix_shape(a.shape(), b.shape()))
        op_shape_error(name, "rhs shape " + shape_str(b.shape()) +
                                 " is not a trailing suffix of lhs shape " +
                                 shape_str(a.shape()));
    const std::size_t inner = b.numel();
    const std::size_t total = a.numel();
    const std::size_t chunks = total / inner;
    std::vector<float> out_data(total);
    const float* ad = a.data().data();
    const float* bd = b.data().data();
    for (std::size_t c = 0; c < chunks; ++c) {
        const float* arow = ad + c * inner;
        float* orow = out_data.data() + c * inner;
        switch (op) {
            case BinKind::add:
                for (std::size_t i = 0; i < inner; ++i) orow[i] = arow[i] + bd[i];
                break;
            case BinKind::subtract:
                for (std::size_t i = 0; i < inner; ++i) orow[i] = arow[i] - bd[i];
                break;
            case BinKind::multiply:
                for (std::size_t i = 0; i < inner; ++i) orow[i] = arow[i] * bd[i];
                break;
        }
    }
    Tensor out(a.shape(), std::move(out_data));
    const OpKind kind = op == BinKind::add        ? OpKind::add
                        : op == BinKind::subtract ? OpKind::subtract
                                                  : OpKind::multiply;
    attach(out, kind, {a, b}, [a, b, op, inner](const Tensor& o) {
        const std::vector<float>& g = o.grad();
        if (a.requires_grad()) {
            if (op == BinKind::multiply) {
                std::vector<float> da(g.size());
                const float* bd = b.data().data();
                const std::size_t chunks = g.size() / inner;
                for (std::size_t c = 0; c < chunks; ++c)
                    for (std::size_t i = 0; i < inner; ++i)
                        da[c * inner + i] = g[c * inner + i] * bd[i];
                a.accumulate_grad(da);
            } else {
                a.accumulate_grad(g);
            }
        }
        if (b.requires_grad()) {
            std::vector<float> gb;
            if (op == BinKind::multiply) {
                gb.resize(g.size());
                const float* ad = a.data().data();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * ad[i];
            } else {
                gb = g;
            }
            std::vector<float> db = reduce_leading(gb, inner);
            if (op == BinKind::subtract)
                for (float& v : db) v = -v;
            b.accumulate_grad(db);
        }
    });
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(a, b, detail::BinKind::add);
}
inline Tensor subtract(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(a, b, detail::BinKind::subtract);
}
inline Tensor multiply(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(a, b, detail::BinKind::multiply);
}

inline Tensor scalar_multiply(const Tensor& a, float s) {
    std::vector<float> out_data(a.numel());
    const float* ad = a.data().data();
    for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = ad[i] * s;
    Tensor out(a.shape(), std::move(out_data));
    detail::attach(out, OpKind::scalar_multiply, {a}, [a, s](const Tensor& o) {
        const std::vector<float>& g = o.grad();
        std::vector<float> da(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * s;
        a.accumulate_grad(da);
    });
    return out;
}

// Normalizes over the last axis: (x - mean) / sqrt(var + eps), no affine
// part; scale and shift are separate mul/add ops with their own gradients.
inline Tensor layer_norm(const Tensor& x, float eps = 1e-5f) {
    if (x.rank() < 1 || x.shape().back() < 2)
        detail::op_shape_error("layer_norm", "last axis must have >= 2 elements, got " +
                                                 shape_str(x.shape()));
    const std::size_t inner = x.shape().back();
    const std::size_t rows = x.numel() / inner;
    std::vector<float> out_data(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const float* xd = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = xd + r * inner;
        double mean = 0.0;
        for (std::size_t i = 0; i < inner; ++i) mean += static_cast<double>(row[i]);
        mean /= static_cast<double>(inner);
        double var = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
            const double d = static_cast<double>(row[i]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(inner);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*inv_std)[r] = inv;
        float* orow = out_data.data() + r * inner;
        for (std::size_t i = 0; i < inner; ++i)
            orow[i] = static_cast<float>((static_cast<double>(row[i]) - mean) * inv);
    }
    Tensor out(x.shape(), std::move(out_data));
    detail::attach(out, OpKind::layer_norm, {x}, [x, inv_std, rows, inner](const Tensor& o) {
        const std::vector<float>& g = o.grad();
        const float* y = o.data().data();
        std::vector<float> dx(x.numel());
        for (std::size_t r = 0; r < rows; ++r) {
            const float* grow = g.data() + r * inner;
            const float* yrow = y + r * inner;
            double gsum = 0.0, gysum = 0.0;
            for (std::size_t i = 0; i < inner; ++i) {
                gsum += static_cast<double>(grow[i]);
                gysum += static_cast<double>(grow[i]) * static_cast<double>(yrow[i]);
            }
            const double n = static_cast<double>(inner);
            const double inv = (*inv_std)[r];
            float* drow = dx.data() + r * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                const double gi = static_cast<double>(grow[i]);
                const double yi = static_cast<double>(yrow[i]);
                drow[i] = static_cast<float>(inv * (gi - gsum / n - yi * gysum / n));
            }
        }
        x.accumulate_grad(dx);
    });
    return out;
}

// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
    if (x.rank() < 1)
        detail::op_shape_error("softmax", "input must have rank >= 1");
    const std::size_t inner = x.shape().back();
    const std::size_t rows = x.numel() / inner;
    std::vector<float> out_data(x.numel());
    const float* xd = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = xd + r * inner;
        float m = row[0];
        for (std::size_t i = 1; i < inner; ++i) m = std::max(m, row[i]);
        double sum = 0.0;
        float* orow = out_data.data() + r * inner;
        for (std::size_t i = 0; i < inner; ++i) {
            const double e = std::exp(static_cast<double>(row[i]) - static_cast<double>(m));
            orow[i] = static_cast<float>(e);
            sum += e;
        }
        for (std::size_t i = 0; i < inner; ++i)
            orow[i] = static_cast<float>(static_cast<double>(orow[i]) / sum);
    }
    Tensor out(x.shape(), std::move(out_data));
    detail::attach(out, OpKind::softmax, {x}, [x, rows, inner](const Tensor& o) {
        const std::vector<float>& g = o.grad();
        const float* y = o.data().data();
        std::vector<float> dx(x.numel());
        for (std::size_t r = 0; r < rows; ++r) {
            const float* grow = g.data() + r * inner;
            const float* yrow = y + r * inner;
            double dot = 0.0;
            for (std::size_t i = 0; i < inner; ++i)
                dot += static_cast<double>(grow[i]) * static_cast<double>(yrow[i]);
            float* drow = dx.data() + r * inner;
            for (std::size_t i = 0; i < inner; ++i)
                drow[i] = static_cast<float>(static_cast<double>(yrow[i]) *
                                             (static_cast<double>(grow[i]) - dot));
        }
        x.accumulate_grad(dx);
    });
    return out;
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
inline Tensor gelu(const Tensor& x) {
    std::vector<float> out_data(x.numel());
    const float* xd = x.data().data();
    for (std::size_t i = 0; i < out_data.size(); ++i) {
        const double v = static_cast<double>(xd[i]);
        out_data[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)));
    }
    Tensor out(x.shape(), std::move(out_data));
    detail::attach(out, OpKind::gelu, {x}, [x](const Tensor& o) {
        const std::vector<float>& g = o.grad();
        const float* xd = x.data().data();
        std::vector<float> dx(g.size());
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = static_cast<double>(xd[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            dx[i] = static_cast<float>(static_cast<double>(g[i]) * (cdf + v * pdf));
        }
        x.accumulate_grad(dx);
    });
    return out;
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        detail::op_shape_error("reshape", "cannot reshape " + shape_str(x.shape()) +
                                              " to " + shape_str(new_shape));
    Tensor out(std::move(new_shape), x.data());
    detail::attach(out, OpKind::reshape, {x}, [x](const Tensor& o) {
        x.accumulate_grad(o.grad());
    });
    return out;
}

namespace detail {

inline std::vector<float> permute_data(const std::vector<float>& src, const Shape& in_shape,
                                       const std::vector<std::size_t>& perm) {
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
    const auto in_strides = row_major_strides(in_shape);
    std::vector<std::size_t> gather(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) gather[i] = in_strides[perm[i]];
    std::vector<float> out(src.size());
    const std::size_t rank = perm.size();
    std::vector<std::size_t> coord(rank, 0);
    std::size_t src_idx = 0;
    for (std::size_t o = 0; o < out.size(); ++o) {
        out[o] = src[src_idx];
        // odometer increment over the output coordinates
        for (std::size_t ax = rank; ax-- > 0;) {
            coord[ax]++;
            src_idx += gather[ax];
            if (coord[ax] < out_shape[ax]) break;
            src_idx -= coord[ax] * gather[ax];
            coord[ax] = 0;
        }
    }
    return out;
}

}  // namespace detail

// General axis permutation; out.shape[i] = x.shape[perm[i]].
inline Tensor transpose(const Tensor& x, std::vector<std::size_t> perm) {
    if (perm.size() != x.rank())
        detail::op_shape_error("transpose", "permutation size " + std::to_string(perm.size()) +
                                                " does not match rank of " + shape_str(x.shape()));
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t p : perm) {
        if (p >= perm.size() || seen[p])
            detail::op_shape_error("transpose", "invalid permutation for " + shape_str(x.shape()));
        seen[p] = true;
    }
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.shape()[perm[i]];
    Tensor out(std::move(out_shape), detail::permute_data(x.data(), x.shape(), perm));
    detail::attach(out, OpKind::transpose, {x}, [x, perm](const Tensor& o) {
        std::vector<std::size_t> inv(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
        x.accumulate_grad(detail::permute_data(o.grad(), o.shape(), inv));
    });
    return out;
}

inline Tensor concat(const std::vector<Tensor>& inputs, std::size_t axis) {
    if (inputs.empty()) detail::op_shape_error("concat", "no inputs");
    const Shape& base = inputs[0].shape();
    if (axis >= base.size())
        detail::op_shape_error("concat", "axis " + std::to_string(axis) +
                                             " out of range for " + shape_str(base));
    std::size_t axis_total = 0;
    for (const Tensor& t : inputs) {
        if (t.rank() != base.size())
            detail::op_shape_error("concat", "rank mismatch: " + shape_str(base) +
                                                 " vs " + shape_str(t.shape()));
        for (std::size_t i = 0; i < base.size(); ++i)
            if (i != axis && t.shape()[i] != base[i])
                detail::op_shape_error("concat", "shape mismatch off axis: " + shape_str(base) +
                                                     " vs " + shape_str(t.shape()));
        axis_total += t.shape()[axis];
    }
    Shape out_shape = base;
    out_shape[axis] = axis_total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
    for (std::size_t i = axis + 1; i < base.size(); ++i) inner *= base[i];

    std::vector<float> out_data(shape_numel(out_shape));
    const std::size_t out_block = axis_total * inner;
    std::size_t offset = 0;
    for (const Tensor& t : inputs) {
        const std::size_t block = t.shape()[axis] * inner;
        const float* src = t.data().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(src + o * block, src + (o + 1) * block,
                      out_data.data() + o * out_block + offset);
        offset += block;
    }
    Tensor out(std::move(out_shape), std::move(out_data));
    detail::attach(out, OpKind::concat, inputs,
                   [inputs, axis, outer, inner, out_block](const Tensor& o) {
                       const std::vector<float>& g = o.grad();
                       std::size_t offset = 0;
                       for (const Tensor& t : inputs) {
                           const std::size_t block = t.shape()[axis] * inner;
                           if (t.requires_grad()) {
                               std::vector<float> dt(t.numel());
                               for (std::size_t ob = 0; ob < outer; ++ob)
                                   std::copy(g.data() + ob * out_block + offset,
                                             g.data() + ob * out_block + offset + block,
                                             dt.data() + ob * block);
                               t.accumulate_grad(dt);
                           }
                           offset += block;
                       }
                   });
    return out;
}

// Selects one index along an axis; the axis is dropped from the shape.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t index) {
    const Shape& s = x.shape();
    if (axis >= s.size() || index >= s[axis])
        detail::op_shape_error("slice", "axis " + std::to_string(axis) + " index " +
                                            std::to_string(index) + " out of range for " +
                                            shape_str(s));
    if (s.size() < 2)
        detail::op_shape_error("slice", "cannot drop the only axis of " + shape_str(s));
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out_shape.push_back(s[i]);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t axis_dim = s[axis];
    std::vector<float> out_data(outer * inner);
    const float* xd = x.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(xd + (o * axis_dim + index) * inner, xd + (o * axis_dim + index + 1) * inner,
                  out_data.data() + o * inner);
    Tensor out(std::move(out_shape), std::move(out_data));
    detail::attach(out, OpKind::slice, {x}, [x, outer, inner, axis_dim, index](const Tensor& o) {
        const std::vector<float>& g = o.grad();
        std::vector<float> dx(x.numel(), 0.0f);
        for (std::size_t ob = 0; ob < outer; ++ob)
            std::copy(g.data() + ob * inner, g.data() + (ob + 1) * inner,
                      dx.data() + (ob * axis_dim + index) * inner);
        x.accumulate_grad(dx);
    });
    return out;
}

// Tiles x along a new leading axis of size n: (d...) -> (n, d...).
inline Tensor repeat_leading(const Tensor& x, std::size_t n) {
    if (n == 0) detail::op_shape_error("repeat_leading", "repeat count must be positive");
    Shape out_shape;
    out_shape.push_back(n);
    for (std::size_t d : x.shape()) out_shape.push_back(d);
    std::vector<float> out_data(n * x.numel());
    for (std::size_t c = 0; c < n; ++c)
        std::copy(x.data().begin(), x.data().end(), out_data.begin() + c * x.numel());
    Tensor out(std::move(out_shape), std::move(out_data));
    detail::attach(out, OpKind::repeat_leading, {x}, [x](const Tensor& o) {
        x.accumulate_grad(detail::reduce_leading(o.grad(), x.numel()));
    });
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += static_cast<double>(v);
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    detail::attach(out, OpKind::sum, {x}, [x](const Tensor& o) {
        x.accumulate_grad(std::vector<float>(x.numel(), o.grad()[0]));
    });
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += static_cast<double>(v);
    const double n = static_cast<double>(x.numel());
    Tensor out = Tensor::scalar(static_cast<float>(acc / n));
    detail::attach(out, OpKind::mean, {x}, [x, n](const Tensor& o) {
        const float gv = static_cast<float>(static_cast<double>(o.grad()[0]) / n);
        x.accumulate_grad(std::vector<float>(x.numel(), gv));
    });
    return out;
}

// Mean over the batch of -log softmax(logits)[label]; logits are (batch,
// classes). Stable log-sum-exp, 64-bit accumulation.
inline Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        detail::op_shape_error("cross_entropy", "logits must be (batch, classes), got " +
                                                    shape_str(logits.shape()));
    const std::size_t batch = logits.shape()[0];
    const std::size_t classes = logits.shape()[1];
    if (labels.size() != batch)
        detail::op_shape_error("cross_entropy", "label count " + std::to_string(labels.size()) +
                                                    " does not match batch " + std::to_string(batch));
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
            throw usage_error("cross_entropy: label " + std::to_string(labels[i]) +
                              " out of range [0, " + std::to_string(classes) + ") at sample " +
                              std::to_string(i));

    auto probs = std::make_shared<std::vector<float>>(logits.numel());
    const float* xd = logits.data().data();
    double total = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        const float* row = xd + r * classes;
        float m = row[0];
        for (std::size_t i = 1; i < classes; ++i) m = std::max(m, row[i]);
        double sum = 0.0;
        float* prow = probs->data() + r * classes;
        for (std::size_t i = 0; i < classes; ++i) {
            const double e = std::exp(static_cast<double>(row[i]) - static_cast<double>(m));
            prow[i] = static_cast<float>(e);
            sum += e;
        }
        for (std::size_t i = 0; i < classes; ++i)
            prow[i] = static_cast<float>(static_cast<double>(prow[i]) / sum);
        const double lse = static_cast<double>(m) + std::log(sum);
        total += lse - static_cast<double>(row[labels[r]]);
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(batch)));
    detail::attach(out, OpKind::cross_entropy, {logits},
                   [logits, labels, probs, batch, classes](const Tensor& o) {
                       const float g0 = o.grad()[0];
                       const float scale = g0 / static_cast<float>(batch);
                       std::vector<float> dx(logits.numel());
                       for (std::size_t r = 0; r < batch; ++r) {
                           const float* prow = probs->data() + r * classes;
                           float* drow = dx.data() + r * classes;
                           for (std::size_t i = 0; i < classes; ++i) drow[i] = prow[i] * scale;
                           drow[labels[r]] -= scale;
                       }
                       logits.accumulate_grad(dx);
                   });
    return out;
}

}  // namespace badres
