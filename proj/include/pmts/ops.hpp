#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pmts/tensor.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and,
// when a tape is given and some input requires grad, records a closure that
// accumulates local gradients in reverse execution order.
namespace pmts {

namespace detail {

inline std::vector<double>& grad_of(const std::shared_ptr<TensorImpl>& t) {
    if (t->grad.size() != t->values.size()) t->grad.assign(t->values.size(), 0.0);
    return t->grad;
}

inline bool wants_grad(GradTape* tape, std::initializer_list<const Tensor*> ins) {
    if (!tape) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

} // namespace detail

inline double sigmoid_scalar(double x) {
    // Branch on sign so exp never overflows.
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b, GradTape* tape = nullptr) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    debug_check_finite(out, "add");
    if (detail::wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record([ai, bi, oi, n] {
            const auto& g = detail::grad_of(oi);
            if (ai->requires_grad) {
                auto& ga = detail::grad_of(ai);
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_of(bi);
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b, GradTape* tape = nullptr) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    debug_check_finite(out, "mul");
    if (detail::wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record([ai, bi, oi, n] {
            const auto& g = detail::grad_of(oi);
            if (ai->requires_grad) {
                auto& ga = detail::grad_of(ai);
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bi->values[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_of(bi);
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ai->values[i];
            }
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& x, GradTape* tape = nullptr) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(x[i]);
    debug_check_finite(out, "sigmoid");
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi, n] {
            const auto& g = detail::grad_of(oi);
            auto& gx = detail::grad_of(xi);
            for (std::size_t i = 0; i < n; ++i) {
                const double s = oi->values[i];
                gx[i] += g[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

inline Tensor silu(const Tensor& x, GradTape* tape = nullptr) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * sigmoid_scalar(x[i]);
    debug_check_finite(out, "silu");
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi, n] {
            const auto& g = detail::grad_of(oi);
            auto& gx = detail::grad_of(xi);
            for (std::size_t i = 0; i < n; ++i) {
                const double v = xi->values[i];
                const double s = sigmoid_scalar(v);
                gx[i] += g[i] * s * (1.0 + v * (1.0 - s));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, GradTape* tape = nullptr) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[p * n + j];
        }
    }
    debug_check_finite(out, "matmul");
    if (detail::wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record([ai, bi, oi, m, k, n] {
            const auto& g = detail::grad_of(oi);
            if (ai->requires_grad) {
                auto& ga = detail::grad_of(ai); // dA = G . B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bi->values[p * n + j];
                        ga[i * k + p] += acc;
                    }
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_of(bi); // dB = A^T . G
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < m; ++i) acc += ai->values[i * k + p] * g[i * n + j];
                        gb[p * n + j] += acc;
                    }
            }
        });
    }
    return out;
}

// Projects the channel axis of x[B x C x T] through m[C x R] at every time
// position: out[b,r,t] = sum_c x[b,c,t] * m[c,r].
inline Tensor channel_matmul(const Tensor& x, const Tensor& m, GradTape* tape = nullptr) {
    if (x.rank() != 3 || m.rank() != 2 || x.dim(1) != m.dim(0)) {
        throw ShapeError("channel_matmul: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(m.shape()));
    }
    const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), R = m.dim(1);
    Tensor out = Tensor::zeros({B, R, T});
    for (std::size_t b = 0; b < B; ++b) {
        const double* xb = x.values().data() + b * C * T;
        double* ob = out.values().data() + b * R * T;
        for (std::size_t c = 0; c < C; ++c) {
            const double* xc = xb + c * T;
            const double* mc = m.values().data() + c * R;
            for (std::size_t r = 0; r < R; ++r) {
                const double w = mc[r];
                if (w == 0.0) continue;
                double* orow = ob + r * T;
                for (std::size_t t = 0; t < T; ++t) orow[t] += w * xc[t];
            }
        }
    }
    debug_check_finite(out, "channel_matmul");
    if (detail::wants_grad(tape, {&x, &m})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), mi = m.impl(), oi = out.impl();
        tape->record([xi, mi, oi, B, C, T, R] {
            const auto& g = detail::grad_of(oi);
            if (xi->requires_grad) {
                auto& gx = detail::grad_of(xi);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t r = 0; r < R; ++r) {
                            const double w = mi->values[c * R + r];
                            if (w == 0.0) continue;
                            const double* grow = g.data() + (b * R + r) * T;
                            double* gxc = gx.data() + (b * C + c) * T;
                            for (std::size_t t = 0; t < T; ++t) gxc[t] += w * grow[t];
                        }
            }
            if (mi->requires_grad) {
                auto& gm = detail::grad_of(mi);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t r = 0; r < R; ++r) {
                            const double* xc = xi->values.data() + (b * C + c) * T;
                            const double* grow = g.data() + (b * R + r) * T;
                            double acc = 0.0;
                            for (std::size_t t = 0; t < T; ++t) acc += xc[t] * grow[t];
                            gm[c * R + r] += acc;
                        }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// 1-D cross-correlation over x[B x C_in x T] (or [C_in x T]) with weights
// w[C_out x C_in/groups x K]. groups == C_in with a channel multiplier gives
// the depthwise case; a depthwise pass followed by a 1x1 pointwise pass forms
// a depthwise-separable convolution.
inline Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t padding = 0, std::size_t groups = 1, GradTape* tape = nullptr) {
    if (stride == 0) throw ShapeError("conv1d: stride must be >= 1");
    const bool batched = x.rank() == 3;
    if (!batched && x.rank() != 2) {
        throw ShapeError("conv1d: input must be [C x T] or [B x C x T], got " + shape_str(x.shape()));
    }
    if (w.rank() != 3) throw ShapeError("conv1d: weight must be [C_out x C_in/groups x K], got " + shape_str(w.shape()));
    const std::size_t B = batched ? x.dim(0) : 1;
    const std::size_t Cin = batched ? x.dim(1) : x.dim(0);
    const std::size_t T = batched ? x.dim(2) : x.dim(1);
    const std::size_t Cout = w.dim(0), Cg = w.dim(1), K = w.dim(2);
    if (groups == 0 || Cin % groups != 0 || Cout % groups != 0) {
        throw ShapeError("conv1d: groups=" + std::to_string(groups) + " does not divide channels " +
                         std::to_string(Cin) + "/" + std::to_string(Cout));
    }
    if (Cg != Cin / groups) {
        throw ShapeError("conv1d: weight " + shape_str(w.shape()) + " inconsistent with C_in=" +
                         std::to_string(Cin) + " groups=" + std::to_string(groups));
    }
    if (T + 2 * padding < K) {
        throw ShapeError("conv1d: kernel " + std::to_string(K) + " longer than padded input " +
                         std::to_string(T + 2 * padding));
    }
    const std::size_t To = (T + 2 * padding - K) / stride + 1;
    const std::size_t cout_g = Cout / groups;

    Tensor out = batched ? Tensor::zeros({B, Cout, To}) : Tensor::zeros({Cout, To});
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    double* ov = out.values().data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t oc = 0; oc < Cout; ++oc) {
            const std::size_t g = oc / cout_g;
            double* orow = ov + (b * Cout + oc) * To;
            for (std::size_t icl = 0; icl < Cg; ++icl) {
                const std::size_t ic = g * Cg + icl;
                const double* xrow = xv + (b * Cin + ic) * T;
                const double* wrow = wv + (oc * Cg + icl) * K;
                for (std::size_t k = 0; k < K; ++k) {
                    const double wk = wrow[k];
                    if (wk == 0.0) continue;
                    // t_in = to*stride - padding + k must land in [0, T)
                    for (std::size_t to = 0; to < To; ++to) {
                        const std::ptrdiff_t ti =
                            static_cast<std::ptrdiff_t>(to * stride + k) - static_cast<std::ptrdiff_t>(padding);
                        if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                        orow[to] += wk * xrow[ti];
                    }
                }
            }
        }
    }
    debug_check_finite(out, "conv1d");
    if (detail::wants_grad(tape, {&x, &w})) {
        out.set_requires_grad(true);
        auto xim = x.impl(), wim = w.impl(), oim = out.impl();
        tape->record([xim, wim, oim, B, Cin, T, Cout, Cg, K, To, cout_g, stride, padding] {
            const auto& g = detail::grad_of(oim);
            const bool need_x = xim->requires_grad;
            const bool need_w = wim->requires_grad;
            auto* gx = need_x ? &detail::grad_of(xim) : nullptr;
            auto* gw = need_w ? &detail::grad_of(wim) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t oc = 0; oc < Cout; ++oc) {
                    const std::size_t grp = oc / cout_g;
                    const double* grow = g.data() + (b * Cout + oc) * To;
                    for (std::size_t icl = 0; icl < Cg; ++icl) {
                        const std::size_t ic = grp * Cg + icl;
                        const double* xrow = xim->values.data() + (b * Cin + ic) * T;
                        const double* wrow = wim->values.data() + (oc * Cg + icl) * K;
                        double* gxrow = need_x ? gx->data() + (b * Cin + ic) * T : nullptr;
                        double* gwrow = need_w ? gw->data() + (oc * Cg + icl) * K : nullptr;
                        for (std::size_t k = 0; k < K; ++k) {
                            double wacc = 0.0;
                            for (std::size_t to = 0; to < To; ++to) {
                                const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to * stride + k) -
                                                          static_cast<std::ptrdiff_t>(padding);
                                if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                                if (need_x) gxrow[ti] += wrow[k] * grow[to];
                                if (need_w) wacc += xrow[ti] * grow[to];
                            }
                            if (need_w) gwrow[k] += wacc;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// x[B x C x T]; training mode normalizes per channel over batch x time and,
// when update_running is set, folds the batch statistics into the running
// buffers (momentum convention: running = (1-m)*running + m*batch). Eval mode
// normalizes with the running statistics and never touches them.
inline Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          Tensor& running_mean, Tensor& running_var, bool training,
                          bool update_running = true, double eps = 1e-5, double momentum = 0.1,
                          GradTape* tape = nullptr) {
    if (x.rank() != 3) throw ShapeError("batchnorm1d: input must be [B x C x T], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C) {
        throw ShapeError("batchnorm1d: parameter size mismatch for C=" + std::to_string(C));
    }
    const std::size_t M = B * T;
    std::vector<double> mean(C), var(C);
    if (training) {
        if (M <= 1) throw NumericError("batchnorm1d: degenerate variance, B*T == 1 in training mode");
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double* row = x.values().data() + (b * C + c) * T;
                for (std::size_t t = 0; t < T; ++t) s += row[t];
            }
            const double mu = s / static_cast<double>(M);
            double sq = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double* row = x.values().data() + (b * C + c) * T;
                for (std::size_t t = 0; t < T; ++t) sq += (row[t] - mu) * (row[t] - mu);
            }
            mean[c] = mu;
            var[c] = sq / static_cast<double>(M);
        }
        if (update_running) {
            const double unbias = static_cast<double>(M) / static_cast<double>(M - 1);
            for (std::size_t c = 0; c < C; ++c) {
                running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
                running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c] * unbias;
            }
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            var[c] = running_var[c];
        }
    }

    std::vector<double> invstd(C);
    for (std::size_t c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);

    Tensor out = Tensor::zeros(x.shape());
    // x_hat is needed by backward; shared with the closure below.
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const double* row = x.values().data() + (b * C + c) * T;
            double* orow = out.values().data() + (b * C + c) * T;
            double* hrow = xhat->data() + (b * C + c) * T;
            const double mu = mean[c], is = invstd[c], gm = gamma[c], bt = beta[c];
            for (std::size_t t = 0; t < T; ++t) {
                hrow[t] = (row[t] - mu) * is;
                orow[t] = gm * hrow[t] + bt;
            }
        }
    debug_check_finite(out, "batchnorm1d");

    if (detail::wants_grad(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        tape->record([xi, gi, bi, oi, xhat, invstd, B, C, T, M, training] {
            const auto& g = detail::grad_of(oi);
            for (std::size_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gh = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const double* grow = g.data() + (b * C + c) * T;
                    const double* hrow = xhat->data() + (b * C + c) * T;
                    for (std::size_t t = 0; t < T; ++t) {
                        sum_g += grow[t];
                        sum_gh += grow[t] * hrow[t];
                    }
                }
                if (gi->requires_grad) detail::grad_of(gi)[c] += sum_gh;
                if (bi->requires_grad) detail::grad_of(bi)[c] += sum_g;
                if (xi->requires_grad) {
                    auto& gx = detail::grad_of(xi);
                    const double gm = gi->values[c], is = invstd[c];
                    if (training) {
                        const double inv_m = 1.0 / static_cast<double>(M);
                        for (std::size_t b = 0; b < B; ++b) {
                            const double* grow = g.data() + (b * C + c) * T;
                            const double* hrow = xhat->data() + (b * C + c) * T;
                            double* gxrow = gx.data() + (b * C + c) * T;
                            for (std::size_t t = 0; t < T; ++t)
                                gxrow[t] += gm * is * (grow[t] - inv_m * sum_g - hrow[t] * inv_m * sum_gh);
                        }
                    } else {
                        for (std::size_t b = 0; b < B; ++b) {
                            const double* grow = g.data() + (b * C + c) * T;
                            double* gxrow = gx.data() + (b * C + c) * T;
                            for (std::size_t t = 0; t < T; ++t) gxrow[t] += gm * is * grow[t];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling and reductions
// ---------------------------------------------------------------------------

// Mean along the variable axis (axis 0), keeping a leading dimension of 1.
inline Tensor mean_pool_vars(const Tensor& v, GradTape* tape = nullptr) {
    if (v.rank() < 1 || v.dim(0) == 0) {
        throw ShapeError("mean_pool_vars: empty variable axis in " + shape_str(v.shape()));
    }
    const std::size_t R = v.dim(0);
    const std::size_t inner = v.numel() / R;
    Shape out_shape = v.shape();
    out_shape[0] = 1;
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t i = 0; i < inner; ++i) out[i] += v[r * inner + i];
    const double inv = 1.0 / static_cast<double>(R);
    for (std::size_t i = 0; i < inner; ++i) out[i] *= inv;
    debug_check_finite(out, "mean_pool_vars");
    if (detail::wants_grad(tape, {&v})) {
        out.set_requires_grad(true);
        auto vi = v.impl(), oi = out.impl();
        tape->record([vi, oi, R, inner, inv] {
            const auto& g = detail::grad_of(oi);
            auto& gv = detail::grad_of(vi);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t i = 0; i < inner; ++i) gv[r * inner + i] += g[i] * inv;
        });
    }
    return out;
}

// Mean over the trailing time axis: [C x T] -> [C], [B x C x T] -> [B x C].
inline Tensor global_avg_pool_time(const Tensor& z, GradTape* tape = nullptr) {
    if (z.rank() != 2 && z.rank() != 3) {
        throw ShapeError("global_avg_pool_time: input must be [C x T] or [B x C x T], got " +
                         shape_str(z.shape()));
    }
    const std::size_t T = z.dim(z.rank() - 1);
    if (T == 0) throw ShapeError("global_avg_pool_time: empty time axis in " + shape_str(z.shape()));
    const std::size_t rowsn = z.numel() / T;
    Shape out_shape(z.shape().begin(), z.shape().end() - 1);
    Tensor out = Tensor::zeros(out_shape);
    const double inv = 1.0 / static_cast<double>(T);
    for (std::size_t r = 0; r < rowsn; ++r) {
        double s = 0.0;
        for (std::size_t t = 0; t < T; ++t) s += z[r * T + t];
        out[r] = s * inv;
    }
    debug_check_finite(out, "global_avg_pool_time");
    if (detail::wants_grad(tape, {&z})) {
        out.set_requires_grad(true);
        auto zi = z.impl(), oi = out.impl();
        tape->record([zi, oi, rowsn, T, inv] {
            const auto& g = detail::grad_of(oi);
            auto& gz = detail::grad_of(zi);
            for (std::size_t r = 0; r < rowsn; ++r)
                for (std::size_t t = 0; t < T; ++t) gz[r * T + t] += g[r] * inv;
        });
    }
    return out;
}

// Sum of all elements as a scalar tensor.
inline Tensor sum_all(const Tensor& x, GradTape* tape = nullptr) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
    Tensor out = Tensor::scalar(acc);
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi] {
            const double g = detail::grad_of(oi)[0];
            auto& gx = detail::grad_of(xi);
            for (double& v : gx) v += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// (1/2B) * ||target - pred||^2; gradient w.r.t. pred is (pred - target)/B.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target, GradTape* tape = nullptr) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    const std::size_t B = pred.numel();
    if (B == 0) throw ShapeError("mse_loss: empty batch");
    double acc = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const double d = target[i] - pred[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / (2.0 * static_cast<double>(B)));
    debug_check_finite(out, "mse_loss");
    if (detail::wants_grad(tape, {&pred, &target})) {
        out.set_requires_grad(true);
        auto pi = pred.impl(), ti = target.impl(), oi = out.impl();
        tape->record([pi, ti, oi, B] {
            const double g = detail::grad_of(oi)[0];
            const double inv_b = 1.0 / static_cast<double>(B);
            if (pi->requires_grad) {
                auto& gp = detail::grad_of(pi);
                for (std::size_t i = 0; i < B; ++i) gp[i] += g * (pi->values[i] - ti->values[i]) * inv_b;
            }
            if (ti->requires_grad) {
                auto& gt = detail::grad_of(ti);
                for (std::size_t i = 0; i < B; ++i) gt[i] += g * (ti->values[i] - pi->values[i]) * inv_b;
            }
        });
    }
    return out;
}

// (1 / 2*sum(w)) * sum_i w_i (pred_i - target_i)^2; used for masked objectives.
inline Tensor weighted_mse(const Tensor& pred, const Tensor& target, const std::vector<double>& w,
                           GradTape* tape = nullptr) {
    if (pred.shape() != target.shape() || w.size() != pred.numel()) {
        throw ShapeError("weighted_mse: size mismatch");
    }
    double wsum = 0.0;
    for (double x : w) wsum += x;
    if (wsum <= 0.0) throw NumericError("weighted_mse: weights sum to zero");
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = pred[i] - target[i];
        acc += w[i] * d * d;
    }
    Tensor out = Tensor::scalar(acc / (2.0 * wsum));
    if (detail::wants_grad(tape, {&pred})) {
        out.set_requires_grad(true);
        auto pi = pred.impl(), ti = target.impl(), oi = out.impl();
        tape->record([pi, ti, oi, w, wsum] {
            const double g = detail::grad_of(oi)[0];
            auto& gp = detail::grad_of(pi);
            for (std::size_t i = 0; i < w.size(); ++i)
                gp[i] += g * w[i] * (pi->values[i] - ti->values[i]) / wsum;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

// Slice [start, start+count) along axis 0 (copying).
inline Tensor rows(const Tensor& x, std::size_t start, std::size_t count, GradTape* tape = nullptr) {
    if (x.rank() < 1 || start + count > x.dim(0)) {
        throw ShapeError("rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of bounds for " + shape_str(x.shape()));
    }
    const std::size_t inner = x.numel() / x.dim(0);
    Shape out_shape = x.shape();
    out_shape[0] = count;
    Tensor out = Tensor::zeros(out_shape);
    std::copy_n(x.values().data() + start * inner, count * inner, out.values().data());
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi, start, count, inner] {
            const auto& g = detail::grad_of(oi);
            auto& gx = detail::grad_of(xi);
            for (std::size_t i = 0; i < count * inner; ++i) gx[start * inner + i] += g[i];
        });
    }
    return out;
}

// Concatenate along axis 0; all parts must share trailing dims.
inline Tensor vconcat(const std::vector<Tensor>& parts, GradTape* tape = nullptr) {
    if (parts.empty()) throw ShapeError("vconcat: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        Shape ptail(p.shape().begin() + 1, p.shape().end());
        if (ptail != tail) {
            throw ShapeError("vconcat: trailing shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        total += p.dim(0);
    }
    Shape out_shape = parts[0].shape();
    out_shape[0] = total;
    Tensor out = Tensor::zeros(out_shape);
    std::size_t offset = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        std::copy_n(p.values().data(), p.numel(), out.values().data() + offset);
        offset += p.numel();
        any_grad = any_grad || p.requires_grad();
    }
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        tape->record([impls, oi] {
            const auto& g = detail::grad_of(oi);
            std::size_t off = 0;
            for (const auto& pi : impls) {
                if (pi->requires_grad) {
                    auto& gp = detail::grad_of(pi);
                    for (std::size_t i = 0; i < pi->values.size(); ++i) gp[i] += g[off + i];
                }
                off += pi->values.size();
            }
        });
    }
    return out;
}

// Copying reshape; element order is preserved.
inline Tensor reshape(const Tensor& x, Shape new_shape, GradTape* tape = nullptr) {
    if (shape_numel(new_shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    }
    Tensor out(std::move(new_shape), x.values());
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record([xi, oi] {
            const auto& g = detail::grad_of(oi);
            auto& gx = detail::grad_of(xi);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

} // namespace pmts
