// Reverse-mode automatic differentiation over Tensor-granular operations.
//
// A Tape records one forward pass as a DAG of nodes; backward() walks the
// nodes in reverse creation order and accumulates gradients into every leaf
// that was created with requires_grad. Ops are coarse (whole matmuls, whole
// scans) so tapes stay small even for long sequences. A tape built with
// recording=false stores values only and is the inference path.
//
// Tapes are single-threaded and live for one batch; values are immutable once
// written by their producing op.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hymate/common.hpp"
#include "hymate/tensor.hpp"

namespace hymate {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    Var leaf(Tensor value, bool requires_grad = false) {
        return push(std::move(value), requires_grad && recording_, nullptr);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var constant(double value) { return leaf(Tensor::scalar(value), false); }

    const Tensor& val(Var v) const {
        require(v.valid() && static_cast<std::size_t>(v.id) < nodes_.size(), "Tape: bad var");
        return nodes_[static_cast<std::size_t>(v.id)].value;
    }

    // Gradient of the last backward() root w.r.t. v. Zero tensor if untouched.
    const Tensor& grad(Var v) {
        require(ran_backward_, "Tape::grad: backward() has not run");
        return gbuf(v.id);
    }

    // Accumulates d(root)/d(leaf) into every requires_grad leaf.
    // root must be scalar; a non-finite root value is flagged and NaN
    // propagates so callers can diagnose.
    void backward(Var root) {
        require(root.valid(), "Tape::backward: invalid root");
        require(recording_, "Tape::backward: tape built with recording=false");
        const Tensor& rv = val(root);
        require(rv.is_scalar(), "Tape::backward: root is not a scalar");
        if (!std::isfinite(rv.item())) flag_nonfinite("backward root");
        grads_.assign(nodes_.size(), Tensor());
        touched_.assign(nodes_.size(), 0);
        ran_backward_ = true;
        gbuf(root.id)[0] = 1.0;
        touched_[static_cast<std::size_t>(root.id)] = 1;
        for (int i = root.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && touched_[static_cast<std::size_t>(i)]) {
                self_id_ = i;
                n.back(*this);
            }
        }
        self_id_ = -1;
    }

    bool saw_nonfinite() const { return saw_nonfinite_; }
    const std::string& nonfinite_where() const { return nonfinite_where_; }
    void flag_nonfinite(const std::string& where) {
        if (!saw_nonfinite_) nonfinite_where_ = where;
        saw_nonfinite_ = true;
    }

    // ---- elementwise and reduction ops ------------------------------------

    Var add(Var a, Var b) {
        const Tensor &av = val(a), &bv = val(b);
        require(av.same_shape(bv), "add: shape mismatch");
        Tensor out = av;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
        return binary_ew(std::move(out), a, b,
                         [](double, double, double g) { return std::pair{g, g}; });
    }

    Var sub(Var a, Var b) {
        const Tensor &av = val(a), &bv = val(b);
        require(av.same_shape(bv), "sub: shape mismatch");
        Tensor out = av;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
        return binary_ew(std::move(out), a, b,
                         [](double, double, double g) { return std::pair{g, -g}; });
    }

    Var mul(Var a, Var b) {
        const Tensor &av = val(a), &bv = val(b);
        require(av.same_shape(bv), "mul: shape mismatch");
        Tensor out = av;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
        return binary_ew(std::move(out), a, b,
                         [](double x, double y, double g) { return std::pair{g * y, g * x}; });
    }

    Var scale(Var a, double c) {
        Tensor out = val(a);
        for (auto& x : out.data()) x *= c;
        int ai = a.id;
        return push(std::move(out), needs_grad(a), [ai, c](Tape& t) {
            if (!t.wants(ai)) return;
            const Tensor& g = t.gref();
            Tensor& ga = t.acc(ai);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
        });
    }

    Var add_scalar(Var a, double c) {
        Tensor out = val(a);
        for (auto& x : out.data()) x += c;
        int ai = a.id;
        return push(std::move(out), needs_grad(a), [ai](Tape& t) {
            if (!t.wants(ai)) return;
            const Tensor& g = t.gref();
            Tensor& ga = t.acc(ai);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        });
    }

    // M (n x c) + row vector v (c), broadcast over rows.
    Var add_rowvec(Var m, Var v) {
        const Tensor &mv = val(m), &vv = val(v);
        require(mv.ndim() == 2 && vv.numel() == mv.cols(), "add_rowvec: shape mismatch");
        Tensor out = mv;
        const std::size_t n = mv.rows(), c = mv.cols();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) out.at(r, j) += vv[j];
        int mi = m.id, vi = v.id;
        return push(std::move(out), needs_grad(m) || needs_grad(v), [mi, vi, n, c](Tape& t) {
            const Tensor& g = t.gref();
            if (t.wants(mi)) {
                Tensor& gm = t.acc(mi);
                for (std::size_t i = 0; i < g.numel(); ++i) gm[i] += g[i];
            }
            if (t.wants(vi)) {
                Tensor& gv = t.acc(vi);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < c; ++j) gv[j] += g[r * c + j];
            }
        });
    }

    Var mul_rowvec(Var m, Var v) {
        const Tensor &mv = val(m), &vv = val(v);
        require(mv.ndim() == 2 && vv.numel() == mv.cols(), "mul_rowvec: shape mismatch");
        Tensor out = mv;
        const std::size_t n = mv.rows(), c = mv.cols();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) out.at(r, j) *= vv[j];
        int mi = m.id, vi = v.id;
        return push(std::move(out), needs_grad(m) || needs_grad(v), [mi, vi, n, c](Tape& t) {
            const Tensor& g = t.gref();
            const Tensor& mval = t.val(Var{mi});
            const Tensor& vval = t.val(Var{vi});
            if (t.wants(mi)) {
                Tensor& gm = t.acc(mi);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < c; ++j) gm[r * c + j] += g[r * c + j] * vval[j];
            }
            if (t.wants(vi)) {
                Tensor& gv = t.acc(vi);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < c; ++j) gv[j] += g[r * c + j] * mval[r * c + j];
            }
        });
    }

    Var tanh(Var a) {
        return unary_ew(a, [](double x) { return std::tanh(x); },
                        [](double, double y, double g) { return g * (1.0 - y * y); });
    }

    Var sigmoid(Var a) {
        return unary_ew(a, [](double x) { return sigmoid_val(x); },
                        [](double, double y, double g) { return g * y * (1.0 - y); });
    }

    // silu(x) = x * sigmoid(x)
    Var silu(Var a) {
        return unary_ew(a,
                        [](double x) { return x * sigmoid_val(x); },
                        [](double x, double, double g) {
                            const double s = sigmoid_val(x);
                            return g * s * (1.0 + x * (1.0 - s));
                        });
    }

    Var softplus(Var a) {
        return unary_ew(a, [](double x) { return softplus_val(x); },
                        [](double x, double, double g) { return g * sigmoid_val(x); });
    }

    Var exp(Var a) {
        return unary_ew(a, [](double x) { return std::exp(x); },
                        [](double, double y, double g) { return g * y; });
    }

    Var square(Var a) {
        return unary_ew(a, [](double x) { return x * x; },
                        [](double x, double, double g) { return 2.0 * g * x; });
    }

    Var sum(Var a) {
        const Tensor& av = val(a);
        double s = 0.0;
        for (double x : av.data()) s += x;
        int ai = a.id;
        return push(Tensor::scalar(s), needs_grad(a), [ai](Tape& t) {
            if (!t.wants(ai)) return;
            const double g = t.gref()[0];
            Tensor& ga = t.acc(ai);
            for (auto& x : ga.data()) x += g;
        });
    }

    Var mean(Var a) {
        std::size_t n = val(a).numel();
        return scale(sum(a), 1.0 / static_cast<double>(n));
    }

    Var dot(Var a, Var b) {
        const Tensor &av = val(a), &bv = val(b);
        require(av.numel() == bv.numel(), "dot: length mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < av.numel(); ++i) s += av[i] * bv[i];
        int ai = a.id, bi = b.id;
        return push(Tensor::scalar(s), needs_grad(a) || needs_grad(b), [ai, bi](Tape& t) {
            const double g = t.gref()[0];
            const Tensor &aval = t.val(Var{ai}), &bval = t.val(Var{bi});
            if (t.wants(ai)) {
                Tensor& ga = t.acc(ai);
                for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g * bval[i];
            }
            if (t.wants(bi)) {
                Tensor& gb = t.acc(bi);
                for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g * aval[i];
            }
        });
    }

    // Sum of a list of scalars as a single node.
    Var sum_vars(const std::vector<Var>& vs) {
        require(!vs.empty(), "sum_vars: empty");
        double s = 0.0;
        bool rg = false;
        std::vector<int> ids;
        ids.reserve(vs.size());
        for (Var v : vs) {
            require(val(v).is_scalar(), "sum_vars: non-scalar term");
            s += val(v).item();
            rg = rg || needs_grad(v);
            ids.push_back(v.id);
        }
        return push(Tensor::scalar(s), rg, [ids](Tape& t) {
            const double g = t.gref()[0];
            for (int id : ids)
                if (t.wants(id)) t.acc(id)[0] += g;
        });
    }

    // ---- linear algebra ----------------------------------------------------

    // Y = X * W^T (+ b). X: n x in, W: out x in, b: out. Returns n x out.
    Var affine(Var x, Var w, Var b = Var{}) {
        const Tensor &xv = val(x), &wv = val(w);
        require(xv.ndim() == 2 && wv.ndim() == 2 && xv.cols() == wv.cols(),
                "affine: shape mismatch " + xv.shape_str() + " vs " + wv.shape_str());
        const std::size_t n = xv.rows(), in = xv.cols(), out = wv.rows();
        const double* bp = nullptr;
        if (b.valid()) {
            require(val(b).numel() == out, "affine: bias mismatch");
            bp = val(b).ptr();
        }
        Tensor y = Tensor::zeros({n, out});
        for (std::size_t r = 0; r < n; ++r) {
            const double* xr = xv.ptr() + r * in;
            double* yr = y.ptr() + r * out;
            for (std::size_t o = 0; o < out; ++o) {
                const double* wr = wv.ptr() + o * in;
                double s = bp ? bp[o] : 0.0;
                for (std::size_t k = 0; k < in; ++k) s += xr[k] * wr[k];
                yr[o] = s;
            }
        }
        int xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1;
        bool rg = needs_grad(x) || needs_grad(w) || (b.valid() && needs_grad(b));
        return push(std::move(y), rg, [xi, wi, bi, n, in, out](Tape& t) {
            const Tensor& g = t.gref();
            const Tensor& xval = t.val(Var{xi});
            const Tensor& wval = t.val(Var{wi});
            if (t.wants(xi)) {  // dX = dY * W
                Tensor& gx = t.acc(xi);
                for (std::size_t r = 0; r < n; ++r) {
                    const double* gr = g.ptr() + r * out;
                    double* gxr = gx.ptr() + r * in;
                    for (std::size_t o = 0; o < out; ++o) {
                        const double go = gr[o];
                        if (go == 0.0) continue;
                        const double* wr = wval.ptr() + o * in;
                        for (std::size_t k = 0; k < in; ++k) gxr[k] += go * wr[k];
                    }
                }
            }
            if (t.wants(wi)) {  // dW = dY^T * X
                Tensor& gw = t.acc(wi);
                for (std::size_t r = 0; r < n; ++r) {
                    const double* gr = g.ptr() + r * out;
                    const double* xr = xval.ptr() + r * in;
                    for (std::size_t o = 0; o < out; ++o) {
                        const double go = gr[o];
                        if (go == 0.0) continue;
                        double* gwr = gw.ptr() + o * in;
                        for (std::size_t k = 0; k < in; ++k) gwr[k] += go * xr[k];
                    }
                }
            }
            if (bi >= 0 && t.wants(bi)) {
                Tensor& gb = t.acc(bi);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t o = 0; o < out; ++o) gb[o] += g[r * out + o];
            }
        });
    }

    // y = W * x (+ b). W: out x in, x: in. Returns out.
    Var affine_vec(Var x, Var w, Var b = Var{}) {
        const Tensor &xv = val(x), &wv = val(w);
        require(wv.ndim() == 2 && xv.numel() == wv.cols(), "affine_vec: shape mismatch");
        const std::size_t in = wv.cols(), out = wv.rows();
        const double* bp = nullptr;
        if (b.valid()) {
            require(val(b).numel() == out, "affine_vec: bias mismatch");
            bp = val(b).ptr();
        }
        Tensor y = Tensor::zeros({out});
        for (std::size_t o = 0; o < out; ++o) {
            const double* wr = wv.ptr() + o * in;
            double s = bp ? bp[o] : 0.0;
            for (std::size_t k = 0; k < in; ++k) s += wr[k] * xv[k];
            y[o] = s;
        }
        int xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1;
        bool rg = needs_grad(x) || needs_grad(w) || (b.valid() && needs_grad(b));
        return push(std::move(y), rg, [xi, wi, bi, in, out](Tape& t) {
            const Tensor& g = t.gref();
            const Tensor& xval = t.val(Var{xi});
            const Tensor& wval = t.val(Var{wi});
            if (t.wants(xi)) {
                Tensor& gx = t.acc(xi);
                for (std::size_t o = 0; o < out; ++o) {
                    const double go = g[o];
                    if (go == 0.0) continue;
                    const double* wr = wval.ptr() + o * in;
                    for (std::size_t k = 0; k < in; ++k) gx[k] += go * wr[k];
                }
            }
            if (t.wants(wi)) {
                Tensor& gw = t.acc(wi);
                for (std::size_t o = 0; o < out; ++o) {
                    const double go = g[o];
                    if (go == 0.0) continue;
                    double* gwr = gw.ptr() + o * in;
                    for (std::size_t k = 0; k < in; ++k) gwr[k] += go * xval[k];
                }
            }
            if (bi >= 0 && t.wants(bi)) {
                Tensor& gb = t.acc(bi);
                for (std::size_t o = 0; o < out; ++o) gb[o] += g[o];
            }
        });
    }

    // C = A * B. A: m x k, B: k x n.
    Var matmul(Var a, Var b) {
        const Tensor &av = val(a), &bv = val(b);
        require(av.ndim() == 2 && bv.ndim() == 2 && av.cols() == bv.rows(),
                "matmul: shape mismatch");
        const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
        Tensor c = Tensor::zeros({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double x = av[i * k + p];
                if (x == 0.0) continue;
                const double* br = bv.ptr() + p * n;
                double* cr = c.ptr() + i * n;
                for (std::size_t j = 0; j < n; ++j) cr[j] += x * br[j];
            }
        int ai = a.id, bi = b.id;
        return push(std::move(c), needs_grad(a) || needs_grad(b), [ai, bi, m, k, n](Tape& t) {
            const Tensor& g = t.gref();
            const Tensor& aval = t.val(Var{ai});
            const Tensor& bval = t.val(Var{bi});
            if (t.wants(ai)) {  // dA = G * B^T
                Tensor& ga = t.acc(ai);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        const double* gr = g.ptr() + i * n;
                        const double* br = bval.ptr() + p * n;
                        for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
                        ga[i * k + p] += s;
                    }
            }
            if (t.wants(bi)) {  // dB = A^T * G
                Tensor& gb = t.acc(bi);
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double x = aval[i * k + p];
                        if (x == 0.0) continue;
                        const double* gr = g.ptr() + i * n;
                        double* gbr = gb.ptr() + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbr[j] += x * gr[j];
                    }
            }
        });
    }

    // a_i = S_i . u for each row of S. S: n x d, u: d. Returns n.
    Var matvec_rows(Var s, Var u) {
        const Tensor &sv = val(s), &uv = val(u);
        require(sv.ndim() == 2 && uv.numel() == sv.cols(), "matvec_rows: shape mismatch");
        const std::size_t n = sv.rows(), d = sv.cols();
        Tensor a = Tensor::zeros({n});
        for (std::size_t r = 0; r < n; ++r) {
            double acc = 0.0;
            const double* sr = sv.ptr() + r * d;
            for (std::size_t j = 0; j < d; ++j) acc += sr[j] * uv[j];
            a[r] = acc;
        }
        int si = s.id, ui = u.id;
        return push(std::move(a), needs_grad(s) || needs_grad(u), [si, ui, n, d](Tape& t) {
            const Tensor& g = t.gref();
            const Tensor& sval = t.val(Var{si});
            const Tensor& uval = t.val(Var{ui});
            if (t.wants(si)) {
                Tensor& gs = t.acc(si);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < d; ++j) gs[r * d + j] += g[r] * uval[j];
            }
            if (t.wants(ui)) {
                Tensor& gu = t.acc(ui);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < d; ++j) gu[j] += g[r] * sval[r * d + j];
            }
        });
    }

    // z = sum_i alpha_i * C_i. C: n x tau, alpha: n. Returns tau.
    Var weighted_sum_rows(Var c, Var alpha) {
        const Tensor &cv = val(c), &av = val(alpha);
        require(cv.ndim() == 2 && av.numel() == cv.rows(), "weighted_sum_rows: shape mismatch");
        const std::size_t n = cv.rows(), tau = cv.cols();
        Tensor z = Tensor::zeros({tau});
        for (std::size_t r = 0; r < n; ++r) {
            const double w = av[r];
            const double* cr = cv.ptr() + r * tau;
            for (std::size_t j = 0; j < tau; ++j) z[j] += w * cr[j];
        }
        int ci = c.id, ai = alpha.id;
        return push(std::move(z), needs_grad(c) || needs_grad(alpha), [ci, ai, n, tau](Tape& t) {
            const Tensor& g = t.gref();
            const Tensor& cval = t.val(Var{ci});
            const Tensor& aval = t.val(Var{ai});
            if (t.wants(ci)) {
                Tensor& gc = t.acc(ci);
                for (std::size_t r = 0; r < n; ++r) {
                    const double w = aval[r];
                    for (std::size_t j = 0; j < tau; ++j) gc[r * tau + j] += w * g[j];
                }
            }
            if (t.wants(ai)) {
                Tensor& ga = t.acc(ai);
                for (std::size_t r = 0; r < n; ++r) {
                    double s = 0.0;
                    const double* cr = cval.ptr() + r * tau;
                    for (std::size_t j = 0; j < tau; ++j) s += cr[j] * g[j];
                    ga[r] += s;
                }
            }
        });
    }

    Var concat_vec(Var a, Var b) {
        const Tensor &av = val(a), &bv = val(b);
        const std::size_t na = av.numel(), nb = bv.numel();
        Tensor out = Tensor::zeros({na + nb});
        for (std::size_t i = 0; i < na; ++i) out[i] = av[i];
        for (std::size_t i = 0; i < nb; ++i) out[na + i] = bv[i];
        int ai = a.id, bi = b.id;
        return push(std::move(out), needs_grad(a) || needs_grad(b), [ai, bi, na, nb](Tape& t) {
            const Tensor& g = t.gref();
            if (t.wants(ai)) {
                Tensor& ga = t.acc(ai);
                for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
            }
            if (t.wants(bi)) {
                Tensor& gb = t.acc(bi);
                for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
            }
        });
    }

    // Columns [c0, c1) of X.
    Var slice_cols(Var x, std::size_t c0, std::size_t c1) {
        const Tensor& xv = val(x);
        require(xv.ndim() == 2 && c0 < c1 && c1 <= xv.cols(), "slice_cols: bad range");
        const std::size_t n = xv.rows(), c = xv.cols(), w = c1 - c0;
        Tensor out = Tensor::zeros({n, w});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < w; ++j) out[r * w + j] = xv[r * c + c0 + j];
        int xi = x.id;
        return push(std::move(out), needs_grad(x), [xi, n, c, c0, w](Tape& t) {
            if (!t.wants(xi)) return;
            const Tensor& g = t.gref();
            Tensor& gx = t.acc(xi);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < w; ++j) gx[r * c + c0 + j] += g[r * w + j];
        });
    }

    // Row lookup: out row i = table[idx[i]].
    Var rows_gather(Var table, std::vector<std::size_t> idx) {
        const Tensor& tv = val(table);
        require(tv.ndim() == 2, "rows_gather: table must be 2-d");
        const std::size_t c = tv.cols(), n = idx.size();
        for (std::size_t i : idx) require(i < tv.rows(), "rows_gather: index out of range");
        Tensor out = Tensor::zeros({n, c});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) out[r * c + j] = tv[idx[r] * c + j];
        int ti = table.id;
        return push(std::move(out), needs_grad(table), [ti, idx = std::move(idx), c](Tape& t) {
            if (!t.wants(ti)) return;
            const Tensor& g = t.gref();
            Tensor& gt = t.acc(ti);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < c; ++j) gt[idx[r] * c + j] += g[r * c + j];
        });
    }

    // ---- softmax and losses ------------------------------------------------

    // Numerically safe softmax over a vector. Strictly positive outputs for
    // finite inputs (shifted logits are clamped at -700 before exp).
    Var softmax_vec(Var x) {
        const Tensor& xv = val(x);
        Tensor p = softmax_values(xv.data());
        int xi = x.id;
        return push(std::move(p), needs_grad(x), [xi](Tape& t) {
            if (!t.wants(xi)) return;
            const Tensor& g = t.gref();
            const Tensor& pv = t.val(Var{t.self_id_});
            // dx = p .* (g - sum(p .* g))
            double s = 0.0;
            for (std::size_t i = 0; i < g.numel(); ++i) s += pv[i] * g[i];
            Tensor& gx = t.acc(xi);
            for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += pv[i] * (g[i] - s);
        });
    }

    // Row-wise softmax of an n x m matrix; optional causal mask (entries with
    // column > row get weight zero).
    Var softmax_rows(Var x, bool causal = false) {
        const Tensor& xv = val(x);
        require(xv.ndim() == 2, "softmax_rows: need matrix");
        const std::size_t n = xv.rows(), m = xv.cols();
        Tensor p = Tensor::zeros({n, m});
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t lim = causal ? std::min(m, r + 1) : m;
            std::vector<double> row(xv.ptr() + r * m, xv.ptr() + r * m + lim);
            Tensor pr = softmax_values(row);
            for (std::size_t j = 0; j < lim; ++j) p[r * m + j] = pr[j];
        }
        int xi = x.id;
        return push(std::move(p), needs_grad(x), [xi, n, m, causal](Tape& t) {
            if (!t.wants(xi)) return;
            const Tensor& g = t.gref();
            const Tensor& pv = t.val(Var{t.self_id_});
            Tensor& gx = t.acc(xi);
            for (std::size_t r = 0; r < n; ++r) {
                const std::size_t lim = causal ? std::min(m, r + 1) : m;
                double s = 0.0;
                for (std::size_t j = 0; j < lim; ++j) s += pv[r * m + j] * g[r * m + j];
                for (std::size_t j = 0; j < lim; ++j)
                    gx[r * m + j] += pv[r * m + j] * (g[r * m + j] - s);
            }
        });
    }

    // sum_j mask_j * x_j^2 with a constant mask; masked entries never enter
    // the arithmetic, so perturbing them cannot change value or gradients.
    Var masked_sq_sum(Var x, const std::vector<double>& mask) {
        const Tensor& xv = val(x);
        require(mask.size() == xv.numel(), "masked_sq_sum: mask length mismatch");
        double s = 0.0;
        std::vector<std::size_t> live;
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (mask[i] != 0.0) {
                s += xv[i] * xv[i];
                live.push_back(i);
            }
        }
        int xi = x.id;
        return push(Tensor::scalar(s), needs_grad(x), [xi, live = std::move(live)](Tape& t) {
            if (!t.wants(xi)) return;
            const double g = t.gref()[0];
            const Tensor& xval = t.val(Var{xi});
            Tensor& gx = t.acc(xi);
            for (std::size_t i : live) gx[i] += 2.0 * g * xval[i];
        });
    }

    // Binary cross-entropy on a logit, stable for large |logit|.
    Var bce_with_logits(Var logit, double y) {
        const double l = val(logit).item();
        const double loss = std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
        int li = logit.id;
        return push(Tensor::scalar(loss), needs_grad(logit), [li, y](Tape& t) {
            if (!t.wants(li)) return;
            const double g = t.gref()[0];
            const double l = t.val(Var{li}).item();
            t.acc(li)[0] += g * (sigmoid_val(l) - y);
        });
    }

    // ---- plumbing used by op closures (public for the op headers) ---------

    bool needs_grad(Var v) const {
        return v.valid() && nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }

    Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && recording_;
        if (n.requires_grad && back) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    // Gradient buffer of the node whose closure is currently running.
    const Tensor& gref() const { return grads_[static_cast<std::size_t>(self_id_)]; }

    bool wants(int id) const {
        return id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad;
    }

    Tensor& acc(int id) {
        touched_[static_cast<std::size_t>(id)] = 1;
        return gbuf(id);
    }

    int self_id_ = -1;  // id of the node whose backward closure is running

    static double sigmoid_val(double x) {
        if (x >= 0) {
            const double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        const double e = std::exp(x);
        return e / (1.0 + e);
    }

    static double softplus_val(double x) {
        if (x > 30.0) return x;
        return std::log1p(std::exp(x));
    }

    static Tensor softmax_values(const std::vector<double>& x) {
        require(!x.empty(), "softmax: empty input");
        double m = x[0];
        for (double v : x) m = std::max(m, v);
        Tensor p = Tensor::zeros({x.size()});
        double z = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double e = std::exp(std::max(x[i] - m, -700.0));
            p[i] = e;
            z += e;
        }
        for (std::size_t i = 0; i < x.size(); ++i) p[i] /= z;
        return p;
    }

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        std::function<void(Tape&)> back;
    };

    template <typename F, typename B>
    Var unary_ew(Var a, F fwd, B bwd) {
        Tensor out = val(a);
        for (auto& x : out.data()) x = fwd(x);
        int ai = a.id;
        return push(std::move(out), needs_grad(a), [ai, bwd](Tape& t) {
            if (!t.wants(ai)) return;
            const Tensor& g = t.gref();
            const Tensor& y = t.val(Var{t.self_id_});
            const Tensor& x = t.val(Var{ai});
            Tensor& ga = t.acc(ai);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += bwd(x[i], y[i], g[i]);
        });
    }

    template <typename B>
    Var binary_ew(Tensor out, Var a, Var b, B bwd) {
        int ai = a.id, bi = b.id;
        return push(std::move(out), needs_grad(a) || needs_grad(b), [ai, bi, bwd](Tape& t) {
            const Tensor& g = t.gref();
            const Tensor& av = t.val(Var{ai});
            const Tensor& bv = t.val(Var{bi});
            const bool wa = t.wants(ai), wb = t.wants(bi);
            Tensor* ga = wa ? &t.acc(ai) : nullptr;
            Tensor* gb = wb ? &t.acc(bi) : nullptr;
            for (std::size_t i = 0; i < g.numel(); ++i) {
                auto [da, db] = bwd(av[i], bv[i], g[i]);
                if (wa) (*ga)[i] += da;
                if (wb) (*gb)[i] += db;
            }
        });
    }

    Tensor& gbuf(int id) {
        Tensor& g = grads_[static_cast<std::size_t>(id)];
        if (g.numel() == 0 && nodes_[static_cast<std::size_t>(id)].value.numel() > 0)
            g = Tensor::zeros(nodes_[static_cast<std::size_t>(id)].value.shape());
        return g;
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<char> touched_;
    bool recording_ = true;
    bool ran_backward_ = false;
    bool saw_nonfinite_ = false;
    std::string nonfinite_where_;
};

}  // namespace hymate
