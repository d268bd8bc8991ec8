// Sequence-level tape ops: RMS/layer normalization, causal depthwise
// convolution, the discretized state-space scan, and fused multi-head
// attention. Each op is one tape node with a hand-derived backward pass.
#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "hymate/tape.hpp"

namespace hymate {

// Zero-order-hold discretization of a diagonal continuous pair (a, b) at step
// dt: abar = exp(dt a), bbar = (dt a)^{-1} (exp(dt a) - 1) dt b. The Taylor
// branch covers |dt a| < 1e-6 where the closed form loses digits.
inline double zoh_abar(double a, double dt) { return std::exp(dt * a); }

inline double zoh_bbar(double a, double b, double dt) {
    const double x = dt * a;
    if (std::abs(x) < 1e-6) return dt * b * (1.0 + 0.5 * x);
    return (std::exp(x) - 1.0) / a * b;
}

// y_c = gain_c * x_c / sqrt(mean(x^2) + eps), applied per row.
// eps may be zero; an all-zero row then maps to zero with zero gradient.
inline Var rmsnorm_rows(Tape& t, Var x, Var gain, double eps) {
    require(eps >= 0.0, "rmsnorm: negative eps");
    const Tensor& xv = t.val(x);
    const Tensor& gv = t.val(gain);
    require(xv.ndim() == 2 && gv.numel() == xv.cols(), "rmsnorm: shape mismatch");
    const std::size_t n = xv.rows(), c = xv.cols();
    Tensor y = Tensor::zeros({n, c});
    for (std::size_t r = 0; r < n; ++r) {
        double ms = 0.0;
        const double* xr = xv.ptr() + r * c;
        for (std::size_t j = 0; j < c; ++j) ms += xr[j] * xr[j];
        ms /= static_cast<double>(c);
        const double denom = std::sqrt(ms + eps);
        if (denom == 0.0) continue;  // zero row stays zero
        for (std::size_t j = 0; j < c; ++j) y[r * c + j] = gv[j] * xr[j] / denom;
    }
    int xi = x.id, gi = gain.id;
    return t.push(std::move(y), t.needs_grad(x) || t.needs_grad(gain),
                  [xi, gi, n, c, eps](Tape& t) {
                      const Tensor& g = t.gref();
                      const Tensor& xval = t.val(Var{xi});
                      const Tensor& gval = t.val(Var{gi});
                      const bool wx = t.wants(xi), wg = t.wants(gi);
                      Tensor* gx = wx ? &t.acc(xi) : nullptr;
                      Tensor* gg = wg ? &t.acc(gi) : nullptr;
                      for (std::size_t r = 0; r < n; ++r) {
                          const double* xr = xval.ptr() + r * c;
                          const double* gr = g.ptr() + r * c;
                          double ms = 0.0;
                          for (std::size_t j = 0; j < c; ++j) ms += xr[j] * xr[j];
                          ms /= static_cast<double>(c);
                          const double denom = std::sqrt(ms + eps);
                          if (denom == 0.0) continue;
                          // s = sum_j g_j * gain_j * x_j
                          double s = 0.0;
                          for (std::size_t j = 0; j < c; ++j) s += gr[j] * gval[j] * xr[j];
                          const double d3 = denom * denom * denom;
                          for (std::size_t j = 0; j < c; ++j) {
                              if (wx)
                                  (*gx)[r * c + j] += gr[j] * gval[j] / denom -
                                                      xr[j] * s / (static_cast<double>(c) * d3);
                              if (wg) (*gg)[j] += gr[j] * xr[j] / denom;
                          }
                      }
                  });
}

// Standard layer normalization with learnable gain and bias, per row.
inline Var layernorm_rows(Tape& t, Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = t.val(x);
    const Tensor& gv = t.val(gain);
    const Tensor& bv = t.val(bias);
    require(xv.ndim() == 2 && gv.numel() == xv.cols() && bv.numel() == xv.cols(),
            "layernorm: shape mismatch");
    const std::size_t n = xv.rows(), c = xv.cols();
    Tensor y = Tensor::zeros({n, c});
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = xv.ptr() + r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(c);
        const double sd = std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) y[r * c + j] = gv[j] * (xr[j] - mu) / sd + bv[j];
    }
    int xi = x.id, gi = gain.id, bi = bias.id;
    bool rg = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
    return t.push(std::move(y), rg, [xi, gi, bi, n, c, eps](Tape& t) {
        const Tensor& g = t.gref();
        const Tensor& xval = t.val(Var{xi});
        const Tensor& gval = t.val(Var{gi});
        const bool wx = t.wants(xi), wg = t.wants(gi), wb = t.wants(bi);
        Tensor* gx = wx ? &t.acc(xi) : nullptr;
        Tensor* gg = wg ? &t.acc(gi) : nullptr;
        Tensor* gb = wb ? &t.acc(bi) : nullptr;
        const double cn = static_cast<double>(c);
        std::vector<double> xhat(c);
        for (std::size_t r = 0; r < n; ++r) {
            const double* xr = xval.ptr() + r * c;
            const double* gr = g.ptr() + r * c;
            double mu = 0.0;
            for (std::size_t j = 0; j < c; ++j) mu += xr[j];
            mu /= cn;
            double var = 0.0;
            for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= cn;
            const double sd = std::sqrt(var + eps);
            for (std::size_t j = 0; j < c; ++j) xhat[j] = (xr[j] - mu) / sd;
            if (wg || wb) {
                for (std::size_t j = 0; j < c; ++j) {
                    if (wg) (*gg)[j] += gr[j] * xhat[j];
                    if (wb) (*gb)[j] += gr[j];
                }
            }
            if (wx) {
                // dx = (G - mean(G) - xhat * mean(G .* xhat)) / sd, G = g .* gain
                double mg = 0.0, mgx = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double G = gr[j] * gval[j];
                    mg += G;
                    mgx += G * xhat[j];
                }
                mg /= cn;
                mgx /= cn;
                for (std::size_t j = 0; j < c; ++j) {
                    const double G = gr[j] * gval[j];
                    (*gx)[r * c + j] += (G - mg - xhat[j] * mgx) / sd;
                }
            }
        }
    });
}

// Depthwise causal convolution along the sequence axis.
// X: n x c, W: c x k (tap j reaches j steps into the past), b: c.
inline Var causal_dwconv(Tape& t, Var x, Var w, Var b) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    const Tensor& bv = t.val(b);
    require(xv.ndim() == 2 && wv.ndim() == 2 && wv.rows() == xv.cols() &&
                bv.numel() == xv.cols(),
            "causal_dwconv: shape mismatch");
    const std::size_t n = xv.rows(), c = xv.cols(), k = wv.cols();
    Tensor y = Tensor::zeros({n, c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* wr = wv.ptr() + ch * k;
        for (std::size_t i = 0; i < n; ++i) {
            double s = bv[ch];
            const std::size_t jmax = std::min(k, i + 1);
            for (std::size_t j = 0; j < jmax; ++j) s += wr[j] * xv[(i - j) * c + ch];
            y[i * c + ch] = s;
        }
    }
    int xi = x.id, wi = w.id, bi = b.id;
    bool rg = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(b);
    return t.push(std::move(y), rg, [xi, wi, bi, n, c, k](Tape& t) {
        const Tensor& g = t.gref();
        const Tensor& xval = t.val(Var{xi});
        const Tensor& wval = t.val(Var{wi});
        const bool wx = t.wants(xi), ww = t.wants(wi), wb = t.wants(bi);
        Tensor* gx = wx ? &t.acc(xi) : nullptr;
        Tensor* gw = ww ? &t.acc(wi) : nullptr;
        Tensor* gb = wb ? &t.acc(bi) : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* wr = wval.ptr() + ch * k;
            for (std::size_t i = 0; i < n; ++i) {
                const double go = g[i * c + ch];
                if (go == 0.0) continue;
                if (wb) (*gb)[ch] += go;
                const std::size_t jmax = std::min(k, i + 1);
                for (std::size_t j = 0; j < jmax; ++j) {
                    if (wx) (*gx)[(i - j) * c + ch] += go * wr[j];
                    if (ww) (*gw)[ch * k + j] += go * xval[(i - j) * c + ch];
                }
            }
        }
    });
}

namespace detail {

// Partial derivatives of the ZOH pair w.r.t. (a, b, dt).
struct ZohPartials {
    double abar, bbar;
    double dab_da, dab_ddt;
    double dbb_da, dbb_db, dbb_ddt;
};

inline ZohPartials zoh_partials(double a, double b, double dt) {
    ZohPartials p{};
    const double x = dt * a;
    p.abar = std::exp(x);
    p.dab_da = dt * p.abar;
    p.dab_ddt = a * p.abar;
    if (std::abs(x) < 1e-6) {
        p.bbar = dt * b * (1.0 + 0.5 * x);
        p.dbb_db = dt * (1.0 + 0.5 * x);
        p.dbb_ddt = b * (1.0 + x);
        p.dbb_da = 0.5 * dt * dt * b;
    } else {
        p.bbar = (p.abar - 1.0) / a * b;
        p.dbb_db = (p.abar - 1.0) / a;
        p.dbb_ddt = b * p.abar;
        p.dbb_da = b * (x * p.abar - p.abar + 1.0) / (a * a);
    }
    return p;
}

}  // namespace detail

// Discretized diagonal state-space scan over all channels of a sequence.
//
//   h_t = abar_t . h_{t-1} + bbar_t * u_t        (per channel, psi states)
//   y_t = C . h_t
//
// u:  n x c input (one column per channel)
// dt: either c (time-invariant step per channel) or n x c (selective,
//     input-dependent step per position and channel)
// A, B, C: c x psi diagonal dynamics per channel (A entries must be < 0)
// Strictly causal; h_0 = 0. Non-finite input is flagged on the tape and
// propagates.
inline Var ssm_scan(Tape& t, Var u, Var dt, Var a, Var b, Var c) {
    const Tensor& uv = t.val(u);
    const Tensor& dtv = t.val(dt);
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    const Tensor& cv = t.val(c);
    require(uv.ndim() == 2, "ssm_scan: u must be n x c");
    const std::size_t n = uv.rows(), ch = uv.cols();
    require(av.ndim() == 2 && av.rows() == ch, "ssm_scan: A must be c x psi");
    const std::size_t psi = av.cols();
    require(bv.same_shape(av) && cv.same_shape(av), "ssm_scan: B/C shape mismatch");
    const bool selective = dtv.ndim() == 2;
    if (selective)
        require(dtv.rows() == n && dtv.cols() == ch, "ssm_scan: dt must be n x c or c");
    else
        require(dtv.numel() == ch, "ssm_scan: dt must be n x c or c");
    for (double v : dtv.data()) require(v > 0.0, "ssm_scan: dt must be positive");
    if (!uv.all_finite()) t.flag_nonfinite("ssm_scan input");

    // States are stored for the backward pass: h[(t*ch + channel)*psi + k].
    auto h = std::make_shared<std::vector<double>>();
    const bool rec = t.recording() &&
                     (t.needs_grad(u) || t.needs_grad(dt) || t.needs_grad(a) ||
                      t.needs_grad(b) || t.needs_grad(c));
    if (rec) h->assign(n * ch * psi, 0.0);

    Tensor y = Tensor::zeros({n, ch});
    std::vector<double> hcur(psi);
    for (std::size_t q = 0; q < ch; ++q) {
        const double* arow = av.ptr() + q * psi;
        const double* brow = bv.ptr() + q * psi;
        const double* crow = cv.ptr() + q * psi;
        std::fill(hcur.begin(), hcur.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double step = selective ? dtv[i * ch + q] : dtv[q];
            const double ui = uv[i * ch + q];
            double acc = 0.0;
            for (std::size_t k = 0; k < psi; ++k) {
                const double abar = zoh_abar(arow[k], step);
                const double bbar = zoh_bbar(arow[k], brow[k], step);
                hcur[k] = abar * hcur[k] + bbar * ui;
                acc += crow[k] * hcur[k];
            }
            y[i * ch + q] = acc;
            if (rec) {
                double* hs = h->data() + (i * ch + q) * psi;
                for (std::size_t k = 0; k < psi; ++k) hs[k] = hcur[k];
            }
        }
    }

    int ui_ = u.id, di_ = dt.id, ai_ = a.id, bi_ = b.id, ci_ = c.id;
    return t.push(std::move(y), rec, [ui_, di_, ai_, bi_, ci_, n, ch, psi, selective,
                                      h](Tape& t) {
        const Tensor& g = t.gref();
        const Tensor& uval = t.val(Var{ui_});
        const Tensor& dtval = t.val(Var{di_});
        const Tensor& aval = t.val(Var{ai_});
        const Tensor& bval = t.val(Var{bi_});
        const Tensor& cval = t.val(Var{ci_});
        const bool wu = t.wants(ui_), wdt = t.wants(di_), wa = t.wants(ai_),
                   wb = t.wants(bi_), wc = t.wants(ci_);
        Tensor* gu = wu ? &t.acc(ui_) : nullptr;
        Tensor* gdt = wdt ? &t.acc(di_) : nullptr;
        Tensor* ga = wa ? &t.acc(ai_) : nullptr;
        Tensor* gb = wb ? &t.acc(bi_) : nullptr;
        Tensor* gc = wc ? &t.acc(ci_) : nullptr;
        std::vector<double> lambda(psi);
        for (std::size_t q = 0; q < ch; ++q) {
            const double* arow = aval.ptr() + q * psi;
            const double* brow = bval.ptr() + q * psi;
            const double* crow = cval.ptr() + q * psi;
            std::fill(lambda.begin(), lambda.end(), 0.0);
            for (std::size_t i = n; i-- > 0;) {
                const double go = g[i * ch + q];
                const double step = selective ? dtval[i * ch + q] : dtval[q];
                const double ui = uval[i * ch + q];
                const double* hs = h->data() + (i * ch + q) * psi;
                const double* hprev = i > 0 ? h->data() + ((i - 1) * ch + q) * psi : nullptr;
                double du_acc = 0.0, ddt_acc = 0.0;
                for (std::size_t k = 0; k < psi; ++k) {
                    // lambda_k = dL/dh_{i,k}
                    lambda[k] += crow[k] * go;
                    if (wc) (*gc)[q * psi + k] += go * hs[k];
                    const auto p = detail::zoh_partials(arow[k], brow[k], step);
                    const double hp = hprev ? hprev[k] : 0.0;
                    const double dabar = lambda[k] * hp;
                    const double dbbar = lambda[k] * ui;
                    du_acc += p.bbar * lambda[k];
                    if (wa) (*ga)[q * psi + k] += dabar * p.dab_da + dbbar * p.dbb_da;
                    if (wb) (*gb)[q * psi + k] += dbbar * p.dbb_db;
                    ddt_acc += dabar * p.dab_ddt + dbbar * p.dbb_ddt;
                    // propagate to h_{i-1}
                    lambda[k] *= p.abar;
                }
                if (wu) (*gu)[i * ch + q] += du_acc;
                if (wdt) {
                    if (selective)
                        (*gdt)[i * ch + q] += ddt_acc;
                    else
                        (*gdt)[q] += ddt_acc;
                }
            }
        }
    });
}

// Fused multi-head scaled dot-product attention.
//
// Q, K, V: n x tau with tau divisible by n_heads; head h owns the column
// block [h*dh, (h+1)*dh). Scores are recomputed row-by-row in the backward
// pass, so no n x n matrix is ever materialized (long sequences stay cheap
// in memory).
inline Var multi_head_attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads,
                                bool causal = false) {
    const Tensor& qv = t.val(q);
    const Tensor& kv = t.val(k);
    const Tensor& vv = t.val(v);
    require(qv.ndim() == 2 && qv.same_shape(kv) && qv.same_shape(vv),
            "attention: Q/K/V shape mismatch");
    const std::size_t n = qv.rows(), tau = qv.cols();
    require(n_heads > 0 && tau % n_heads == 0, "attention: heads must divide tau");
    const std::size_t dh = tau / n_heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out = Tensor::zeros({n, tau});
    std::vector<double> srow(n), prow(n);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
        const std::size_t off = hd * dh;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t lim = causal ? i + 1 : n;
            const double* qi = qv.ptr() + i * tau + off;
            double m = -1e300;
            for (std::size_t j = 0; j < lim; ++j) {
                const double* kj = kv.ptr() + j * tau + off;
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                srow[j] = s * scl;
                m = std::max(m, srow[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < lim; ++j) {
                prow[j] = std::exp(std::max(srow[j] - m, -700.0));
                z += prow[j];
            }
            double* oi = out.ptr() + i * tau + off;
            for (std::size_t j = 0; j < lim; ++j) {
                const double p = prow[j] / z;
                const double* vj = vv.ptr() + j * tau + off;
                for (std::size_t d = 0; d < dh; ++d) oi[d] += p * vj[d];
            }
        }
    }

    int qi_ = q.id, ki_ = k.id, vi_ = v.id;
    bool rg = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
    return t.push(std::move(out), rg, [qi_, ki_, vi_, n, tau, dh, n_heads, scl,
                                       causal](Tape& t) {
        const Tensor& g = t.gref();
        const Tensor& qval = t.val(Var{qi_});
        const Tensor& kval = t.val(Var{ki_});
        const Tensor& vval = t.val(Var{vi_});
        const bool wq = t.wants(qi_), wk = t.wants(ki_), wv = t.wants(vi_);
        Tensor* gq = wq ? &t.acc(qi_) : nullptr;
        Tensor* gk = wk ? &t.acc(ki_) : nullptr;
        Tensor* gv = wv ? &t.acc(vi_) : nullptr;
        std::vector<double> srow(n), prow(n), dprow(n);
        for (std::size_t hd = 0; hd < n_heads; ++hd) {
            const std::size_t off = hd * dh;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t lim = causal ? i + 1 : n;
                const double* qi = qval.ptr() + i * tau + off;
                const double* gi = g.ptr() + i * tau + off;
                double m = -1e300;
                for (std::size_t j = 0; j < lim; ++j) {
                    const double* kj = kval.ptr() + j * tau + off;
                    double s = 0.0;
                    for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    srow[j] = s * scl;
                    m = std::max(m, srow[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < lim; ++j) {
                    prow[j] = std::exp(std::max(srow[j] - m, -700.0));
                    z += prow[j];
                }
                // dp_j = dO_i . V_j ; ds = p .* (dp - sum(p .* dp))
                double pdp = 0.0;
                for (std::size_t j = 0; j < lim; ++j) {
                    prow[j] /= z;
                    const double* vj = vval.ptr() + j * tau + off;
                    double dp = 0.0;
                    for (std::size_t d = 0; d < dh; ++d) dp += gi[d] * vj[d];
                    dprow[j] = dp;
                    pdp += prow[j] * dp;
                }
                for (std::size_t j = 0; j < lim; ++j) {
                    const double p = prow[j];
                    const double ds = p * (dprow[j] - pdp) * scl;
                    const double* kj = kval.ptr() + j * tau + off;
                    if (wq) {
                        double* gqi = gq->ptr() + i * tau + off;
                        for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
                    }
                    if (wk) {
                        double* gkj = gk->ptr() + j * tau + off;
                        for (std::size_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
                    }
                    if (wv) {
                        double* gvj = gv->ptr() + j * tau + off;
                        for (std::size_t d = 0; d < dh; ++d) gvj[d] += p * gi[d];
                    }
                }
            }
        }
    });
}

}  // namespace hymate
