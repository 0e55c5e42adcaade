// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "aqa/rng.hpp"
#include "aqa/tensor.hpp"

namespace aqa {

namespace detail {

// True if `small` equals the trailing dims of `big` (rank-0 matches anything).
inline bool is_suffix(const std::vector<int>& small, const std::vector<int>& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class Real>
void matmul_acc(Real* c, const Real* a, const Real* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const Real* arow = a + static_cast<std::int64_t>(i) * k;
        Real* crow = c + static_cast<std::int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            const Real* brow = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcast over leading axes
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> binary_broadcast(const char* name, const TensorT<Real>& a, const TensorT<Real>& b,
                               int mode /*0=add 1=sub 2=mul*/) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (!(sa == sb || detail::is_suffix(sb, sa) || detail::is_suffix(sa, sb)))
        throw Error(cat(name, ": shapes not broadcastable: ", shape_str(sa), " vs ", shape_str(sb)));

    const bool a_big = a.size() >= b.size();
    const std::vector<int>& out_shape = a_big ? sa : sb;
    const std::int64_t n = std::max(a.size(), b.size());
    const std::int64_t na = a.size(), nb = b.size();
    const Real* av = a.value().data();
    const Real* bv = b.value().data();

    std::vector<Real> out(static_cast<size_t>(n));
    switch (mode) {
    case 0:
        for (std::int64_t f = 0; f < n; ++f) out[f] = av[f % na] + bv[f % nb];
        break;
    case 1:
        for (std::int64_t f = 0; f < n; ++f) out[f] = av[f % na] - bv[f % nb];
        break;
    default:
        for (std::int64_t f = 0; f < n; ++f) out[f] = av[f % na] * bv[f % nb];
        break;
    }

    auto* pa = a.node();
    auto* pb = b.node();
    return custom_op<Real>(name, out_shape, std::move(out), {a, b},
                           [pa, pb, n, na, nb, mode](TensorNodeT<Real>& self) {
                               pa->ensure_grad();
                               pb->ensure_grad();
                               const Real* g = self.grad.data();
                               Real* ga = pa->grad.data();
                               Real* gb = pb->grad.data();
                               const Real* avv = pa->value.data();
                               const Real* bvv = pb->value.data();
                               switch (mode) {
                               case 0:
                                   for (std::int64_t f = 0; f < n; ++f) {
                                       ga[f % na] += g[f];
                                       gb[f % nb] += g[f];
                                   }
                                   break;
                               case 1:
                                   for (std::int64_t f = 0; f < n; ++f) {
                                       ga[f % na] += g[f];
                                       gb[f % nb] -= g[f];
                                   }
                                   break;
                               default:
                                   for (std::int64_t f = 0; f < n; ++f) {
                                       ga[f % na] += g[f] * bvv[f % nb];
                                       gb[f % nb] += g[f] * avv[f % na];
                                   }
                                   break;
                               }
                           });
}

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
    return binary_broadcast("add", a, b, 0);
}
template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
    return binary_broadcast("sub", a, b, 1);
}
template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
    return binary_broadcast("mul", a, b, 2);
}

// Multiply by a plain constant (no grad through the constant).
template <class Real>
TensorT<Real> scale(const TensorT<Real>& x, Real c) {
    std::vector<Real> out(x.value().begin(), x.value().end());
    for (auto& v : out) v *= c;
    auto* px = x.node();
    return custom_op<Real>("scale", x.shape(), std::move(out), {x},
                           [px, c](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               for (size_t f = 0; f < self.grad.size(); ++f)
                                   px->grad[f] += self.grad[f] * c;
                           });
}

template <class Real>
TensorT<Real> neg(const TensorT<Real>& x) {
    return scale(x, Real(-1));
}

// ---------------------------------------------------------------------------
// matmul: 2-D, or batched with identical leading dims
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sb.size() != sa.size())
        throw Error(cat("matmul: want equal ranks >= 2, got ", shape_str(sa), " vs ", shape_str(sb)));
    const int r = static_cast<int>(sa.size());
    for (int i = 0; i < r - 2; ++i)
        if (sa[i] != sb[i])
            throw Error(cat("matmul: batch dims differ: ", shape_str(sa), " vs ", shape_str(sb)));
    const int m = sa[r - 2], k = sa[r - 1], k2 = sb[r - 2], n = sb[r - 1];
    if (k != k2)
        throw Error(cat("matmul: inner dims differ: ", shape_str(sa), " vs ", shape_str(sb)));

    std::int64_t batch = 1;
    for (int i = 0; i < r - 2; ++i) batch *= sa[i];
    std::vector<int> out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<Real> out(static_cast<size_t>(batch) * m * n, Real(0));
    {
        const Real* av = a.value().data();
        const Real* bv = b.value().data();
        Real* ov = out.data();
        for (std::int64_t t = 0; t < batch; ++t)
            detail::matmul_acc(ov + t * m * n, av + t * m * k, bv + t * k * n, m, k, n);
    }

    auto* pa = a.node();
    auto* pb = b.node();
    return custom_op<Real>(
        "matmul", std::move(out_shape), std::move(out), {a, b},
        [pa, pb, batch, m, k, n](TensorNodeT<Real>& self) {
            pa->ensure_grad();
            pb->ensure_grad();
            const Real* g = self.grad.data();
            const Real* av = pa->value.data();
            const Real* bv = pb->value.data();
            Real* ga = pa->grad.data();
            Real* gb = pb->grad.data();
            for (std::int64_t t = 0; t < batch; ++t) {
                const Real* gt = g + t * m * n;
                const Real* at = av + t * m * k;
                const Real* bt = bv + t * k * n;
                Real* gat = ga + t * m * k;
                Real* gbt = gb + t * k * n;
                // dA = dC * B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        Real s = 0;
                        const Real* grow = gt + static_cast<std::int64_t>(i) * n;
                        const Real* brow = bt + static_cast<std::int64_t>(p) * n;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        gat[static_cast<std::int64_t>(i) * k + p] += s;
                    }
                // dB = A^T * dC
                for (int i = 0; i < m; ++i) {
                    const Real* arow = at + static_cast<std::int64_t>(i) * k;
                    const Real* grow = gt + static_cast<std::int64_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const Real av_ip = arow[p];
                        if (av_ip == Real(0)) continue;
                        Real* gbrow = gbt + static_cast<std::int64_t>(p) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av_ip * grow[j];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// transpose (general axis permutation, numpy semantics)
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> transpose(const TensorT<Real>& x, std::vector<int> perm) {
    const auto& sx = x.shape();
    const int r = static_cast<int>(sx.size());
    if (static_cast<int>(perm.size()) != r)
        throw Error(cat("transpose: perm size ", perm.size(), " vs rank ", r, " of ", shape_str(sx)));
    std::vector<bool> used(static_cast<size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || used[static_cast<size_t>(p)])
            throw Error(cat("transpose: invalid permutation for shape ", shape_str(sx)));
        used[static_cast<size_t>(p)] = true;
    }

    std::vector<int> out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[i] = sx[perm[i]];
    const auto in_strides = row_major_strides(sx);
    // stride to advance in the input when out index i advances
    std::vector<std::int64_t> gather(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) gather[i] = in_strides[perm[i]];
    const auto out_strides = row_major_strides(out_shape);

    const std::int64_t n = x.size();
    std::vector<Real> out(static_cast<size_t>(n));
    const Real* xv = x.value().data();
    std::vector<std::int64_t> src_of(static_cast<size_t>(n));
    for (std::int64_t f = 0; f < n; ++f) {
        std::int64_t rem = f, src = 0;
        for (int i = 0; i < r; ++i) {
            const std::int64_t idx = rem / out_strides[i];
            rem -= idx * out_strides[i];
            src += idx * gather[i];
        }
        src_of[f] = src;
        out[f] = xv[src];
    }

    auto* px = x.node();
    return custom_op<Real>("transpose", std::move(out_shape), std::move(out), {x},
                           [px, src_of = std::move(src_of)](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               Real* gx = px->grad.data();
                               const Real* g = self.grad.data();
                               for (size_t f = 0; f < src_of.size(); ++f) gx[src_of[f]] += g[f];
                           });
}

template <class Real>
TensorT<Real> transpose(const TensorT<Real>& x) {
    if (x.rank() != 2)
        throw Error(cat("transpose: default form wants rank 2, got ", shape_str(x.shape())));
    return transpose(x, {1, 0});
}

// ---------------------------------------------------------------------------
// reshape / concat / slice
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> reshape(const TensorT<Real>& x, std::vector<int> new_shape) {
    if (numel(new_shape) != x.size())
        throw Error(cat("reshape: ", shape_str(x.shape()), " (", x.size(), " values) to ",
                        shape_str(new_shape), " (", numel(new_shape), " values)"));
    std::vector<Real> out(x.value());
    auto* px = x.node();
    return custom_op<Real>("reshape", std::move(new_shape), std::move(out), {x},
                           [px](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               for (size_t f = 0; f < self.grad.size(); ++f)
                                   px->grad[f] += self.grad[f];
                           });
}

template <class Real>
TensorT<Real> concat(const std::vector<TensorT<Real>>& parts, int axis) {
    if (parts.empty()) throw Error("concat: no inputs");
    const auto& s0 = parts[0].shape();
    const int r = static_cast<int>(s0.size());
    if (axis < 0 || axis >= r)
        throw Error(cat("concat: axis ", axis, " out of range for ", shape_str(s0)));
    int axis_total = 0;
    for (const auto& p : parts) {
        const auto& sp = p.shape();
        if (static_cast<int>(sp.size()) != r)
            throw Error(cat("concat: rank mismatch: ", shape_str(s0), " vs ", shape_str(sp)));
        for (int i = 0; i < r; ++i)
            if (i != axis && sp[i] != s0[i])
                throw Error(cat("concat: shape mismatch off axis ", axis, ": ", shape_str(s0),
                                " vs ", shape_str(sp)));
        axis_total += sp[axis];
    }

    std::vector<int> out_shape = s0;
    out_shape[axis] = axis_total;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[i];
    for (int i = axis + 1; i < r; ++i) inner *= s0[i];

    std::vector<Real> out(static_cast<size_t>(numel(out_shape)));
    std::vector<std::int64_t> spans;
    spans.reserve(parts.size());
    for (const auto& p : parts) spans.push_back(static_cast<std::int64_t>(p.shape()[axis]) * inner);
    {
        Real* ov = out.data();
        const std::int64_t out_row = static_cast<std::int64_t>(axis_total) * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
            std::int64_t off = o * out_row;
            for (size_t pi = 0; pi < parts.size(); ++pi) {
                const Real* pv = parts[pi].value().data() + o * spans[pi];
                std::copy(pv, pv + spans[pi], ov + off);
                off += spans[pi];
            }
        }
    }

    std::vector<TensorNodeT<Real>*> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    const std::int64_t out_row = static_cast<std::int64_t>(axis_total) * inner;
    return custom_op<Real>(
        "concat", std::move(out_shape), std::move(out), parts,
        [pnodes, spans, outer, out_row](TensorNodeT<Real>& self) {
            const Real* g = self.grad.data();
            for (auto* pn : pnodes) pn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                std::int64_t off = o * out_row;
                for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                    Real* gp = pnodes[pi]->grad.data() + o * spans[pi];
                    const Real* gs = g + off;
                    for (std::int64_t f = 0; f < spans[pi]; ++f) gp[f] += gs[f];
                    off += spans[pi];
                }
            }
        });
}

template <class Real>
TensorT<Real> slice(const TensorT<Real>& x, int axis, int start, int stop) {
    const auto& sx = x.shape();
    const int r = static_cast<int>(sx.size());
    if (axis < 0 || axis >= r)
        throw Error(cat("slice: axis ", axis, " out of range for ", shape_str(sx)));
    if (start < 0 || stop > sx[axis] || start >= stop)
        throw Error(cat("slice: range [", start, ", ", stop, ") invalid for axis ", axis, " of ",
                        shape_str(sx)));

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sx[i];
    for (int i = axis + 1; i < r; ++i) inner *= sx[i];
    const int span = stop - start;
    std::vector<int> out_shape = sx;
    out_shape[axis] = span;

    std::vector<Real> out(static_cast<size_t>(outer) * span * inner);
    const std::int64_t in_row = static_cast<std::int64_t>(sx[axis]) * inner;
    const std::int64_t out_row = static_cast<std::int64_t>(span) * inner;
    {
        const Real* xv = x.value().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(xv + o * in_row + start * inner, xv + o * in_row + stop * inner,
                      out.data() + o * out_row);
    }

    auto* px = x.node();
    const std::int64_t start_off = static_cast<std::int64_t>(start) * inner;
    return custom_op<Real>("slice", std::move(out_shape), std::move(out), {x},
                           [px, outer, in_row, out_row, start_off](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               Real* gx = px->grad.data();
                               const Real* g = self.grad.data();
                               for (std::int64_t o = 0; o < outer; ++o) {
                                   Real* dst = gx + o * in_row + start_off;
                                   const Real* src = g + o * out_row;
                                   for (std::int64_t f = 0; f < out_row; ++f) dst[f] += src[f];
                               }
                           });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> sum(const TensorT<Real>& x, int axis, bool keepdim = false) {
    const auto& sx = x.shape();
    const int r = static_cast<int>(sx.size());
    if (axis < 0 || axis >= r)
        throw Error(cat("sum: axis ", axis, " out of range for ", shape_str(sx)));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sx[i];
    for (int i = axis + 1; i < r; ++i) inner *= sx[i];
    const int span = sx[axis];

    std::vector<int> out_shape;
    for (int i = 0; i < r; ++i) {
        if (i == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(sx[i]);
        }
    }

    std::vector<Real> out(static_cast<size_t>(outer) * inner, Real(0));
    {
        const Real* xv = x.value().data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (int a = 0; a < span; ++a) {
                const Real* src = xv + (o * span + a) * inner;
                Real* dst = out.data() + o * inner;
                for (std::int64_t f = 0; f < inner; ++f) dst[f] += src[f];
            }
    }

    auto* px = x.node();
    return custom_op<Real>("sum", std::move(out_shape), std::move(out), {x},
                           [px, outer, inner, span](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               Real* gx = px->grad.data();
                               const Real* g = self.grad.data();
                               for (std::int64_t o = 0; o < outer; ++o)
                                   for (int a = 0; a < span; ++a) {
                                       Real* dst = gx + (o * span + a) * inner;
                                       const Real* src = g + o * inner;
                                       for (std::int64_t f = 0; f < inner; ++f) dst[f] += src[f];
                                   }
                           });
}

template <class Real>
TensorT<Real> mean(const TensorT<Real>& x, int axis, bool keepdim = false) {
    const int span = x.shape()[static_cast<size_t>(axis)];
    return scale(sum(x, axis, keepdim), Real(1) / static_cast<Real>(span));
}

template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& x) {
    Real s = 0;
    for (Real v : x.value()) s += v;
    auto* px = x.node();
    return custom_op<Real>("sum_all", {}, {s}, {x}, [px](TensorNodeT<Real>& self) {
        px->ensure_grad();
        const Real g = self.grad[0];
        for (auto& gv : px->grad) gv += g;
    });
}

template <class Real>
TensorT<Real> mean_all(const TensorT<Real>& x) {
    return scale(sum_all(x), Real(1) / static_cast<Real>(x.size()));
}

// ---------------------------------------------------------------------------
// softmax / layer norm over the last axis
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> softmax_lastdim(const TensorT<Real>& x) {
    const auto& sx = x.shape();
    if (sx.empty()) throw Error("softmax: rank-0 input");
    const std::int64_t cols = sx.back();
    const std::int64_t rows = x.size() / cols;

    std::vector<Real> out(static_cast<size_t>(x.size()));
    const Real* xv = x.value().data();
    for (std::int64_t rI = 0; rI < rows; ++rI) {
        const Real* src = xv + rI * cols;
        Real* dst = out.data() + rI * cols;
        Real mx = src[0];
        for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
        Real z = 0;
        for (std::int64_t j = 0; j < cols; ++j) {
            dst[j] = std::exp(src[j] - mx);
            z += dst[j];
        }
        const Real inv = Real(1) / z;
        for (std::int64_t j = 0; j < cols; ++j) dst[j] *= inv;
    }

    auto* px = x.node();
    return custom_op<Real>("softmax", sx, std::move(out), {x},
                           [px, rows, cols](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               Real* gx = px->grad.data();
                               const Real* g = self.grad.data();
                               const Real* y = self.value.data();
                               for (std::int64_t rI = 0; rI < rows; ++rI) {
                                   const Real* gr = g + rI * cols;
                                   const Real* yr = y + rI * cols;
                                   Real dot = 0;
                                   for (std::int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                                   Real* gxr = gx + rI * cols;
                                   for (std::int64_t j = 0; j < cols; ++j)
                                       gxr[j] += yr[j] * (gr[j] - dot);
                               }
                           });
}

// Non-affine normalization; scale/shift are composed from mul/add outside.
template <class Real>
TensorT<Real> layer_norm_lastdim(const TensorT<Real>& x, Real eps = Real(1e-12)) {
    const auto& sx = x.shape();
    if (sx.empty()) throw Error("layer_norm: rank-0 input");
    const std::int64_t cols = sx.back();
    const std::int64_t rows = x.size() / cols;

    std::vector<Real> out(static_cast<size_t>(x.size()));
    std::vector<Real> inv_std(static_cast<size_t>(rows));
    const Real* xv = x.value().data();
    for (std::int64_t rI = 0; rI < rows; ++rI) {
        const Real* src = xv + rI * cols;
        Real mu = 0;
        for (std::int64_t j = 0; j < cols; ++j) mu += src[j];
        mu /= static_cast<Real>(cols);
        Real var = 0;
        for (std::int64_t j = 0; j < cols; ++j) {
            const Real d = src[j] - mu;
            var += d * d;
        }
        var /= static_cast<Real>(cols);
        const Real is = Real(1) / std::sqrt(var + eps);
        inv_std[rI] = is;
        Real* dst = out.data() + rI * cols;
        for (std::int64_t j = 0; j < cols; ++j) dst[j] = (src[j] - mu) * is;
    }

    auto* px = x.node();
    return custom_op<Real>(
        "layer_norm", sx, std::move(out), {x},
        [px, rows, cols, inv_std = std::move(inv_std)](TensorNodeT<Real>& self) {
            px->ensure_grad();
            Real* gx = px->grad.data();
            const Real* g = self.grad.data();
            const Real* y = self.value.data();
            for (std::int64_t rI = 0; rI < rows; ++rI) {
                const Real* gr = g + rI * cols;
                const Real* yr = y + rI * cols;
                Real m1 = 0, m2 = 0;
                for (std::int64_t j = 0; j < cols; ++j) {
                    m1 += gr[j];
                    m2 += gr[j] * yr[j];
                }
                m1 /= static_cast<Real>(cols);
                m2 /= static_cast<Real>(cols);
                const Real is = inv_std[rI];
                Real* gxr = gx + rI * cols;
                for (std::int64_t j = 0; j < cols; ++j)
                    gxr[j] += is * (gr[j] - m1 - yr[j] * m2);
            }
        });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> relu(const TensorT<Real>& x) {
    std::vector<Real> out(x.value());
    for (auto& v : out)
        if (v < Real(0)) v = Real(0);
    auto* px = x.node();
    return custom_op<Real>("relu", x.shape(), std::move(out), {x},
                           [px](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               const Real* xv = px->value.data();
                               for (size_t f = 0; f < self.grad.size(); ++f)
                                   if (xv[f] > Real(0)) px->grad[f] += self.grad[f];
                           });
}

// Exact erf form.
template <class Real>
TensorT<Real> gelu(const TensorT<Real>& x) {
    constexpr Real kInvSqrt2 = Real(0.7071067811865475);
    constexpr Real kInvSqrt2Pi = Real(0.3989422804014327);
    std::vector<Real> out(x.value());
    for (auto& v : out) v = Real(0.5) * v * (Real(1) + std::erf(v * kInvSqrt2));
    auto* px = x.node();
    return custom_op<Real>("gelu", x.shape(), std::move(out), {x},
                           [px](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               const Real* xv = px->value.data();
                               for (size_t f = 0; f < self.grad.size(); ++f) {
                                   const Real v = xv[f];
                                   const Real cdf = Real(0.5) * (Real(1) + std::erf(v * kInvSqrt2));
                                   const Real pdf = kInvSqrt2Pi * std::exp(Real(-0.5) * v * v);
                                   px->grad[f] += self.grad[f] * (cdf + v * pdf);
                               }
                           });
}

template <class Real>
TensorT<Real> log_t(const TensorT<Real>& x) {
    std::vector<Real> out(x.value());
    for (auto& v : out) v = std::log(v);
    auto* px = x.node();
    return custom_op<Real>("log", x.shape(), std::move(out), {x},
                           [px](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               const Real* xv = px->value.data();
                               for (size_t f = 0; f < self.grad.size(); ++f)
                                   px->grad[f] += self.grad[f] / xv[f];
                           });
}

// Elementwise x^p for scalar p.
template <class Real>
TensorT<Real> pow_scalar(const TensorT<Real>& x, Real p) {
    std::vector<Real> out(x.value());
    for (auto& v : out) v = std::pow(v, p);
    auto* px = x.node();
    return custom_op<Real>("pow", x.shape(), std::move(out), {x},
                           [px, p](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               const Real* xv = px->value.data();
                               for (size_t f = 0; f < self.grad.size(); ++f)
                                   px->grad[f] += self.grad[f] * p * std::pow(xv[f], p - Real(1));
                           });
}

template <class Real>
TensorT<Real> sqrt_t(const TensorT<Real>& x) {
    std::vector<Real> out(x.value());
    for (auto& v : out) v = std::sqrt(v);
    auto* px = x.node();
    return custom_op<Real>("sqrt", x.shape(), std::move(out), {x},
                           [px](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               const Real* y = self.value.data();
                               for (size_t f = 0; f < self.grad.size(); ++f)
                                   px->grad[f] += self.grad[f] * Real(0.5) / y[f];
                           });
}

template <class Real>
TensorT<Real> square(const TensorT<Real>& x) {
    return pow_scalar(x, Real(2));
}

template <class Real>
TensorT<Real> div(const TensorT<Real>& a, const TensorT<Real>& b) {
    return mul(a, pow_scalar(b, Real(-1)));
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

// Inverted-dropout mask: kept entries carry 1/(1-p). Generated once per use
// site so gradient checks can freeze it.
template <class Real>
TensorT<Real> dropout_mask(const std::vector<int>& shape, Real p, Rng& rng) {
    if (p < Real(0) || p >= Real(1)) throw Error(cat("dropout: p=", p, " outside [0, 1)"));
    std::vector<Real> vals(static_cast<size_t>(numel(shape)));
    const Real keep = Real(1) / (Real(1) - p);
    for (auto& v : vals) v = rng.uniform() < static_cast<double>(p) ? Real(0) : keep;
    return TensorT<Real>::from(shape, std::move(vals));
}

// Train-mode dropout: elementwise mask. Eval mode is simply "do not call".
// Gradient flows to x only; the mask is a frozen constant.
template <class Real>
TensorT<Real> dropout(const TensorT<Real>& x, const TensorT<Real>& mask) {
    if (x.shape() != mask.shape())
        throw Error(cat("dropout: mask shape ", shape_str(mask.shape()), " vs input ",
                        shape_str(x.shape())));
    std::vector<Real> out(static_cast<size_t>(x.size()));
    const Real* xv = x.value().data();
    const Real* mv = mask.value().data();
    for (std::int64_t f = 0; f < x.size(); ++f) out[f] = xv[f] * mv[f];
    auto* px = x.node();
    auto mh = mask.handle(); // keep the mask alive without a grad edge
    return custom_op<Real>("dropout", x.shape(), std::move(out), {x},
                           [px, mh](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               const Real* mv = mh->value.data();
                               for (size_t f = 0; f < self.grad.size(); ++f)
                                   px->grad[f] += self.grad[f] * mv[f];
                           });
}

// ---------------------------------------------------------------------------
// gathers
// ---------------------------------------------------------------------------

// Row lookup into a [V, C] table (embedding lookup).
template <class Real>
TensorT<Real> embedding(const TensorT<Real>& table, const std::vector<int>& ids) {
    if (table.rank() != 2)
        throw Error(cat("embedding: table must be rank 2, got ", shape_str(table.shape())));
    const int v = table.shape()[0], c = table.shape()[1];
    for (int id : ids)
        if (id < 0 || id >= v)
            throw Error(cat("embedding: id ", id, " out of range for table ", shape_str(table.shape())));

    std::vector<Real> out(ids.size() * static_cast<size_t>(c));
    const Real* tv = table.value().data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(tv + static_cast<std::int64_t>(ids[i]) * c,
                  tv + static_cast<std::int64_t>(ids[i] + 1) * c,
                  out.data() + i * static_cast<size_t>(c));

    auto* pt = table.node();
    return custom_op<Real>("embedding", {static_cast<int>(ids.size()), c}, std::move(out), {table},
                           [pt, ids, c](TensorNodeT<Real>& self) {
                               pt->ensure_grad();
                               Real* gt = pt->grad.data();
                               const Real* g = self.grad.data();
                               for (size_t i = 0; i < ids.size(); ++i) {
                                   Real* dst = gt + static_cast<std::int64_t>(ids[i]) * c;
                                   const Real* src = g + i * static_cast<size_t>(c);
                                   for (int j = 0; j < c; ++j) dst[j] += src[j];
                               }
                           });
}

// Arbitrary flat-index gather; backward scatter-adds.
template <class Real>
TensorT<Real> take(const TensorT<Real>& x, std::vector<std::int64_t> idx, std::vector<int> out_shape) {
    if (numel(out_shape) != static_cast<std::int64_t>(idx.size()))
        throw Error(cat("take: ", idx.size(), " indices vs out shape ", shape_str(out_shape)));
    const std::int64_t n = x.size();
    std::vector<Real> out(idx.size());
    const Real* xv = x.value().data();
    for (size_t f = 0; f < idx.size(); ++f) {
        if (idx[f] < 0 || idx[f] >= n)
            throw Error(cat("take: index ", idx[f], " out of range for ", shape_str(x.shape())));
        out[f] = xv[idx[f]];
    }
    auto* px = x.node();
    return custom_op<Real>("take", std::move(out_shape), std::move(out), {x},
                           [px, idx = std::move(idx)](TensorNodeT<Real>& self) {
                               px->ensure_grad();
                               Real* gx = px->grad.data();
                               const Real* g = self.grad.data();
                               for (size_t f = 0; f < idx.size(); ++f) gx[idx[f]] += g[f];
                           });
}

// ---------------------------------------------------------------------------
// small 3-D convolution (the only convolution the models need)
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> conv3d(const TensorT<Real>& x, const TensorT<Real>& w, const TensorT<Real>& bias,
                     std::array<int, 3> stride, std::array<int, 3> pad) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 4 || sw.size() != 5)
        throw Error(cat("conv3d: want input [C,D,H,W] and kernel [Co,Ci,kd,kh,kw], got ",
                        shape_str(sx), " and ", shape_str(sw)));
    const int ci = sx[0], d = sx[1], h = sx[2], wd = sx[3];
    const int co = sw[0], ci2 = sw[1], kd = sw[2], kh = sw[3], kw = sw[4];
    if (ci != ci2)
        throw Error(cat("conv3d: input channels ", shape_str(sx), " vs kernel ", shape_str(sw)));
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != co))
        throw Error(cat("conv3d: bias shape ", shape_str(bias.shape()), " vs Co=", co));
    for (int i = 0; i < 3; ++i)
        if (stride[i] < 1 || pad[i] < 0) throw Error("conv3d: bad stride/pad");

    const int od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    const int oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    const int ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    if (od < 1 || oh < 1 || ow < 1)
        throw Error(cat("conv3d: kernel ", shape_str(sw), " too large for input ", shape_str(sx)));

    std::vector<Real> out(static_cast<size_t>(co) * od * oh * ow, Real(0));
    const Real* xv = x.value().data();
    const Real* wv = w.value().data();
    auto xat = [&](int c, int z, int y, int xx) {
        return xv[((static_cast<std::int64_t>(c) * d + z) * h + y) * wd + xx];
    };
    for (int oc = 0; oc < co; ++oc) {
        const Real b0 = bias.defined() ? bias.value()[static_cast<size_t>(oc)] : Real(0);
        for (int oz = 0; oz < od; ++oz)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    Real acc = b0;
                    for (int icn = 0; icn < ci; ++icn)
                        for (int kz = 0; kz < kd; ++kz) {
                            const int z = oz * stride[0] - pad[0] + kz;
                            if (z < 0 || z >= d) continue;
                            for (int ky = 0; ky < kh; ++ky) {
                                const int y = oy * stride[1] - pad[1] + ky;
                                if (y < 0 || y >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int xc = ox * stride[2] - pad[2] + kx;
                                    if (xc < 0 || xc >= wd) continue;
                                    acc += xat(icn, z, y, xc) *
                                           wv[((((static_cast<std::int64_t>(oc) * ci + icn) * kd + kz) * kh + ky) * kw + kx)];
                                }
                            }
                        }
                    out[((static_cast<std::int64_t>(oc) * od + oz) * oh + oy) * ow + ox] = acc;
                }
    }

    std::vector<TensorT<Real>> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    auto* px = x.node();
    auto* pw = w.node();
    auto* pb = bias.defined() ? bias.node() : nullptr;
    return custom_op<Real>(
        "conv3d", {co, od, oh, ow}, std::move(out), parents,
        [px, pw, pb, ci, d, h, wd, co, kd, kh, kw, od, oh, ow, stride, pad](TensorNodeT<Real>& self) {
            px->ensure_grad();
            pw->ensure_grad();
            if (pb) pb->ensure_grad();
            const Real* g = self.grad.data();
            const Real* xv = px->value.data();
            const Real* wv = pw->value.data();
            Real* gx = px->grad.data();
            Real* gw = pw->grad.data();
            for (int oc = 0; oc < co; ++oc)
                for (int oz = 0; oz < od; ++oz)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            const Real go =
                                g[((static_cast<std::int64_t>(oc) * od + oz) * oh + oy) * ow + ox];
                            if (go == Real(0)) continue;
                            if (pb) pb->grad[static_cast<size_t>(oc)] += go;
                            for (int icn = 0; icn < ci; ++icn)
                                for (int kz = 0; kz < kd; ++kz) {
                                    const int z = oz * stride[0] - pad[0] + kz;
                                    if (z < 0 || z >= d) continue;
                                    for (int ky = 0; ky < kh; ++ky) {
                                        const int y = oy * stride[1] - pad[1] + ky;
                                        if (y < 0 || y >= h) continue;
                                        for (int kx = 0; kx < kw; ++kx) {
                                            const int xc = ox * stride[2] - pad[2] + kx;
                                            if (xc < 0 || xc >= wd) continue;
                                            const std::int64_t xi =
                                                ((static_cast<std::int64_t>(icn) * d + z) * h + y) * wd + xc;
                                            const std::int64_t wi =
                                                (((static_cast<std::int64_t>(oc) * ci + icn) * kd + kz) * kh + ky) * kw + kx;
                                            gx[xi] += go * wv[wi];
                                            gw[wi] += go * xv[xi];
                                        }
                                    }
                                }
                        }
        });
}

template <class Real>
TensorT<Real> conv3d(const TensorT<Real>& x, const TensorT<Real>& w, const TensorT<Real>& bias,
                     int stride, int pad) {
    return conv3d(x, w, bias, {stride, stride, stride}, {pad, pad, pad});
}

} // namespace aqa
