#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "dmem/tensor.hpp"

namespace dmem {

// Reverse-mode tape. Ops append backward closures while recording; calling
// backward(loss) seeds d(loss)/d(loss)=1 and replays the closures in
// reverse. Gradients accumulate into the grad buffers attached to tensors,
// so parameters keep their gradients after the tape is gone. Pass a null
// tape (or disable it) for pure inference.
template <typename T>
class Tape {
public:
    bool active() const { return enabled_; }
    void set_enabled(bool e) { enabled_ = e; }

    void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

    size_t size() const { return steps_.size(); }

    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (!loss.grad) throw std::invalid_argument("backward: loss does not require grad");
        (*loss.grad)[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        steps_.clear();
    }

private:
    std::vector<std::function<void()>> steps_;
    bool enabled_ = true;
};

namespace detail {

inline void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
bool tracked(Tape<T>* tp, std::initializer_list<const Tensor<T>*> ins) {
    if (!tp || !tp->active()) return false;
    for (const Tensor<T>* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(same_shape(a, b), "add: shape mismatch");
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
    if (detail::tracked(tp, {&a, &b})) {
        out.alloc_grad();
        tp->record([ag = a.grad, bg = b.grad, og = out.grad, n] {
            for (size_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*og)[i];
                if (bg) (*bg)[i] += (*og)[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(same_shape(a, b), "sub: shape mismatch");
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
    if (detail::tracked(tp, {&a, &b})) {
        out.alloc_grad();
        tp->record([ag = a.grad, bg = b.grad, og = out.grad, n] {
            for (size_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*og)[i];
                if (bg) (*bg)[i] -= (*og)[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(same_shape(a, b), "mul: shape mismatch");
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
    if (detail::tracked(tp, {&a, &b})) {
        out.alloc_grad();
        tp->record([ad = a.data, bd = b.data, ag = a.grad, bg = b.grad, og = out.grad, n] {
            for (size_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*og)[i] * (*bd)[i];
                if (bg) (*bg)[i] += (*og)[i] * (*ad)[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tp, const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * c;
    if (detail::tracked(tp, {&a})) {
        out.alloc_grad();
        tp->record([ag = a.grad, og = out.grad, c, n] {
            for (size_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i] * c;
        });
    }
    return out;
}

// a + c*b, the low-rank correction pattern.
template <typename T>
Tensor<T> add_scaled(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b, T c) {
    detail::check(same_shape(a, b), "add_scaled: shape mismatch");
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + c * (*b.data)[i];
    if (detail::tracked(tp, {&a, &b})) {
        out.alloc_grad();
        tp->record([ag = a.grad, bg = b.grad, og = out.grad, c, n] {
            for (size_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*og)[i];
                if (bg) (*bg)[i] += (*og)[i] * c;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> one_minus(Tape<T>* tp, const Tensor<T>& a) {
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = T(1) - (*a.data)[i];
    if (detail::tracked(tp, {&a})) {
        out.alloc_grad();
        tp->record([ag = a.grad, og = out.grad, n] {
            for (size_t i = 0; i < n; ++i) (*ag)[i] -= (*og)[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> vtanh(Tape<T>* tp, const Tensor<T>& a) {
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::tanh((*a.data)[i]);
    if (detail::tracked(tp, {&a})) {
        out.alloc_grad();
        tp->record([ag = a.grad, od = out.data, og = out.grad, n] {
            for (size_t i = 0; i < n; ++i) {
                T y = (*od)[i];
                (*ag)[i] += (*og)[i] * (T(1) - y * y);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> vsigmoid(Tape<T>* tp, const Tensor<T>& a) {
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) {
        T x = (*a.data)[i];
        (*out.data)[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                   : std::exp(x) / (T(1) + std::exp(x));
    }
    if (detail::tracked(tp, {&a})) {
        out.alloc_grad();
        tp->record([ag = a.grad, od = out.data, og = out.grad, n] {
            for (size_t i = 0; i < n; ++i) {
                T y = (*od)[i];
                (*ag)[i] += (*og)[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// tanh-approximation GELU.
template <typename T>
Tensor<T> vgelu(Tape<T>* tp, const Tensor<T>& a) {
    constexpr double kC = 0.7978845608028654; // sqrt(2/pi)
    constexpr double kA = 0.044715;
    Tensor<T> out(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) {
        double x = static_cast<double>((*a.data)[i]);
        double u = kC * (x + kA * x * x * x);
        (*out.data)[i] = static_cast<T>(0.5 * x * (1.0 + std::tanh(u)));
    }
    if (detail::tracked(tp, {&a})) {
        out.alloc_grad();
        tp->record([ad = a.data, ag = a.grad, og = out.grad, n] {
            for (size_t i = 0; i < n; ++i) {
                double x = static_cast<double>((*ad)[i]);
                double u = kC * (x + kA * x * x * x);
                double th = std::tanh(u);
                double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
                (*ag)[i] += (*og)[i] * static_cast<T>(d);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D inputs");
    detail::check(a.cols() == b.rows(), "matmul: inner extents mismatch");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i) {
        T* orow = out.data->data() + static_cast<size_t>(i) * n;
        const T* arow = a.data->data() + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            T av = arow[p];
            const T* brow = b.data->data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (detail::tracked(tp, {&a, &b})) {
        out.alloc_grad();
        tp->record([ad = a.data, bd = b.data, ag = a.grad, bg = b.grad, og = out.grad, m, k, n] {
            if (ag) {
                // dA = dOut * B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        T acc = T(0);
                        const T* grow = og->data() + static_cast<size_t>(i) * n;
                        const T* brow = bd->data() + static_cast<size_t>(p) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        (*ag)[static_cast<size_t>(i) * k + p] += acc;
                    }
            }
            if (bg) {
                // dB = A^T * dOut
                for (int i = 0; i < m; ++i) {
                    const T* arow = ad->data() + static_cast<size_t>(i) * k;
                    const T* grow = og->data() + static_cast<size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        T av = arow[p];
                        T* brow = bg->data() + static_cast<size_t>(p) * n;
                        for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

// a * b^T with b stored row-major [n x k]; the natural layout for applying
// [out x in] weight matrices to [rows x in] activations.
template <typename T>
Tensor<T> matmul_nt(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2, "matmul_nt: expects 2-D inputs");
    detail::check(a.cols() == b.cols(), "matmul_nt: inner extents mismatch");
    const int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i) {
        const T* arow = a.data->data() + static_cast<size_t>(i) * k;
        T* orow = out.data->data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b.data->data() + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            orow[j] = acc;
        }
    }
    if (detail::tracked(tp, {&a, &b})) {
        out.alloc_grad();
        tp->record([ad = a.data, bd = b.data, ag = a.grad, bg = b.grad, og = out.grad, m, k, n] {
            for (int i = 0; i < m; ++i) {
                const T* grow = og->data() + static_cast<size_t>(i) * n;
                const T* arow = ad->data() + static_cast<size_t>(i) * k;
                for (int j = 0; j < n; ++j) {
                    T gv = grow[j];
                    if (gv == T(0)) continue;
                    const T* brow = bd->data() + static_cast<size_t>(j) * k;
                    if (ag) {
                        T* arowg = ag->data() + static_cast<size_t>(i) * k;
                        for (int p = 0; p < k; ++p) arowg[p] += gv * brow[p];
                    }
                    if (bg) {
                        T* browg = bg->data() + static_cast<size_t>(j) * k;
                        for (int p = 0; p < k; ++p) browg[p] += gv * arow[p];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> matvec(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& x) {
    detail::check(a.ndim() == 2 && x.ndim() == 1, "matvec: expects matrix and vector");
    detail::check(a.cols() == x.shape[0], "matvec: extent mismatch");
    const int m = a.rows(), n = a.cols();
    Tensor<T> out({m});
    for (int i = 0; i < m; ++i) {
        const T* arow = a.data->data() + static_cast<size_t>(i) * n;
        T acc = T(0);
        for (int j = 0; j < n; ++j) acc += arow[j] * (*x.data)[j];
        (*out.data)[i] = acc;
    }
    if (detail::tracked(tp, {&a, &x})) {
        out.alloc_grad();
        tp->record([ad = a.data, xd = x.data, ag = a.grad, xg = x.grad, og = out.grad, m, n] {
            for (int i = 0; i < m; ++i) {
                T gv = (*og)[i];
                if (gv == T(0)) continue;
                if (ag) {
                    T* arowg = ag->data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) arowg[j] += gv * (*xd)[j];
                }
                if (xg) {
                    const T* arow = ad->data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) (*xg)[j] += gv * arow[j];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> outer(Tape<T>* tp, const Tensor<T>& u, const Tensor<T>& v) {
    detail::check(u.ndim() == 1 && v.ndim() == 1, "outer: expects vectors");
    const int m = u.shape[0], n = v.shape[0];
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at2(i, j) = (*u.data)[i] * (*v.data)[j];
    if (detail::tracked(tp, {&u, &v})) {
        out.alloc_grad();
        tp->record([ud = u.data, vd = v.data, ug = u.grad, vg = v.grad, og = out.grad, m, n] {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    T gv = (*og)[static_cast<size_t>(i) * n + j];
                    if (ug) (*ug)[i] += gv * (*vd)[j];
                    if (vg) (*vg)[j] += gv * (*ud)[i];
                }
        });
    }
    return out;
}

// Diag(s) * M: row i scaled by s[i].
template <typename T>
Tensor<T> row_scale(Tape<T>* tp, const Tensor<T>& m, const Tensor<T>& s) {
    detail::check(m.ndim() == 2 && s.ndim() == 1, "row_scale: expects matrix and vector");
    detail::check(m.rows() == s.shape[0], "row_scale: row count mismatch");
    const int rows = m.rows(), cols = m.cols();
    Tensor<T> out({rows, cols});
    for (int i = 0; i < rows; ++i) {
        T sv = (*s.data)[i];
        for (int j = 0; j < cols; ++j) out.at2(i, j) = sv * m.at2(i, j);
    }
    if (detail::tracked(tp, {&m, &s})) {
        out.alloc_grad();
        tp->record([md = m.data, sd = s.data, mg = m.grad, sg = s.grad, og = out.grad, rows, cols] {
            for (int i = 0; i < rows; ++i) {
                T sv = (*sd)[i];
                for (int j = 0; j < cols; ++j) {
                    T gv = (*og)[static_cast<size_t>(i) * cols + j];
                    if (mg) (*mg)[static_cast<size_t>(i) * cols + j] += gv * sv;
                    if (sg) (*sg)[i] += gv * (*md)[static_cast<size_t>(i) * cols + j];
                }
            }
        });
    }
    return out;
}

// Broadcast add of a row vector to every row (bias add).
template <typename T>
Tensor<T> add_rowvec(Tape<T>* tp, const Tensor<T>& m, const Tensor<T>& v) {
    detail::check(m.ndim() == 2 && v.ndim() == 1, "add_rowvec: expects matrix and vector");
    detail::check(m.cols() == v.shape[0], "add_rowvec: column count mismatch");
    const int rows = m.rows(), cols = m.cols();
    Tensor<T> out({rows, cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.at2(i, j) = m.at2(i, j) + (*v.data)[j];
    if (detail::tracked(tp, {&m, &v})) {
        out.alloc_grad();
        tp->record([mg = m.grad, vg = v.grad, og = out.grad, rows, cols] {
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    T gv = (*og)[static_cast<size_t>(i) * cols + j];
                    if (mg) (*mg)[static_cast<size_t>(i) * cols + j] += gv;
                    if (vg) (*vg)[j] += gv;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

// Shared forward/backward for x / (||x|| + eps) applied to each row.
template <typename T>
void l2norm_backward_row(const T* x, const T* g, T* xg, int n, T eps) {
    double nrm = 0.0;
    for (int j = 0; j < n; ++j) nrm += static_cast<double>(x[j]) * static_cast<double>(x[j]);
    nrm = std::sqrt(nrm);
    const double s = nrm + static_cast<double>(eps);
    double gdotx = 0.0;
    for (int j = 0; j < n; ++j) gdotx += static_cast<double>(g[j]) * static_cast<double>(x[j]);
    for (int j = 0; j < n; ++j) {
        double d = static_cast<double>(g[j]) / s;
        if (nrm > 0.0) d -= static_cast<double>(x[j]) * gdotx / (nrm * s * s);
        xg[j] += static_cast<T>(d);
    }
}

} // namespace detail

template <typename T>
Tensor<T> l2norm_eps(Tape<T>* tp, const Tensor<T>& x, T eps) {
    detail::check(x.ndim() == 1, "l2norm_eps: expects a vector");
    const int n = x.shape[0];
    Tensor<T> out({n});
    double nrm = 0.0;
    for (int j = 0; j < n; ++j) nrm += static_cast<double>((*x.data)[j]) * static_cast<double>((*x.data)[j]);
    const T denom = static_cast<T>(std::sqrt(nrm)) + eps;
    for (int j = 0; j < n; ++j) (*out.data)[j] = (*x.data)[j] / denom;
    if (detail::tracked(tp, {&x})) {
        out.alloc_grad();
        tp->record([xd = x.data, xg = x.grad, og = out.grad, n, eps] {
            detail::l2norm_backward_row(xd->data(), og->data(), xg->data(), n, eps);
        });
    }
    return out;
}

template <typename T>
Tensor<T> l2norm_rows(Tape<T>* tp, const Tensor<T>& m, T eps) {
    detail::check(m.ndim() == 2, "l2norm_rows: expects a matrix");
    const int rows = m.rows(), cols = m.cols();
    Tensor<T> out({rows, cols});
    for (int i = 0; i < rows; ++i) {
        const T* x = m.data->data() + static_cast<size_t>(i) * cols;
        double nrm = 0.0;
        for (int j = 0; j < cols; ++j) nrm += static_cast<double>(x[j]) * static_cast<double>(x[j]);
        const T denom = static_cast<T>(std::sqrt(nrm)) + eps;
        T* o = out.data->data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) o[j] = x[j] / denom;
    }
    if (detail::tracked(tp, {&m})) {
        out.alloc_grad();
        tp->record([md = m.data, mg = m.grad, og = out.grad, rows, cols, eps] {
            for (int i = 0; i < rows; ++i)
                detail::l2norm_backward_row(md->data() + static_cast<size_t>(i) * cols,
                                            og->data() + static_cast<size_t>(i) * cols,
                                            mg->data() + static_cast<size_t>(i) * cols, cols, eps);
        });
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm_rows(Tape<T>* tp, const Tensor<T>& m, const Tensor<T>& gain,
                          const Tensor<T>& bias, T eps) {
    detail::check(m.ndim() == 2, "layer_norm_rows: expects a matrix");
    detail::check(gain.ndim() == 1 && gain.shape[0] == m.cols(), "layer_norm_rows: gain extent");
    detail::check(bias.ndim() == 1 && bias.shape[0] == m.cols(), "layer_norm_rows: bias extent");
    const int rows = m.rows(), cols = m.cols();
    Tensor<T> out({rows, cols});
    auto xhat = std::make_shared<std::vector<T>>(m.data->size());
    auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        const T* x = m.data->data() + static_cast<size_t>(i) * cols;
        double mu = 0.0;
        for (int j = 0; j < cols; ++j) mu += static_cast<double>(x[j]);
        mu /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            double d = static_cast<double>(x[j]) - mu;
            var += d * d;
        }
        var /= cols;
        double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*inv_sigma)[static_cast<size_t>(i)] = static_cast<T>(inv);
        T* o = out.data->data() + static_cast<size_t>(i) * cols;
        T* xh = xhat->data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
            xh[j] = static_cast<T>((static_cast<double>(x[j]) - mu) * inv);
            o[j] = xh[j] * (*gain.data)[j] + (*bias.data)[j];
        }
    }
    if (detail::tracked(tp, {&m, &gain, &bias})) {
        out.alloc_grad();
        tp->record([mg = m.grad, gd = gain.data, gg = gain.grad, bg = bias.grad,
                    og = out.grad, xhat, inv_sigma, rows, cols] {
            std::vector<double> gh(static_cast<size_t>(cols));
            for (int i = 0; i < rows; ++i) {
                const T* g = og->data() + static_cast<size_t>(i) * cols;
                const T* xh = xhat->data() + static_cast<size_t>(i) * cols;
                if (gg || bg) {
                    for (int j = 0; j < cols; ++j) {
                        if (gg) (*gg)[j] += g[j] * xh[j];
                        if (bg) (*bg)[j] += g[j];
                    }
                }
                if (mg) {
                    double mean_gh = 0.0, mean_ghx = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        gh[static_cast<size_t>(j)] = static_cast<double>(g[j]) * static_cast<double>((*gd)[j]);
                        mean_gh += gh[static_cast<size_t>(j)];
                        mean_ghx += gh[static_cast<size_t>(j)] * static_cast<double>(xh[j]);
                    }
                    mean_gh /= cols;
                    mean_ghx /= cols;
                    double inv = static_cast<double>((*inv_sigma)[static_cast<size_t>(i)]);
                    T* mgrow = mg->data() + static_cast<size_t>(i) * cols;
                    for (int j = 0; j < cols; ++j)
                        mgrow[j] += static_cast<T>((gh[static_cast<size_t>(j)] - mean_gh -
                                                    static_cast<double>(xh[j]) * mean_ghx) * inv);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax / losses / reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(Tape<T>* tp, const Tensor<T>& m) {
    detail::check(m.ndim() == 2, "softmax_rows: expects a matrix");
    const int rows = m.rows(), cols = m.cols();
    Tensor<T> out({rows, cols});
    for (int i = 0; i < rows; ++i) {
        const T* x = m.data->data() + static_cast<size_t>(i) * cols;
        T* o = out.data->data() + static_cast<size_t>(i) * cols;
        T mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            double e = std::exp(static_cast<double>(x[j] - mx));
            o[j] = static_cast<T>(e);
            sum += e;
        }
        for (int j = 0; j < cols; ++j) o[j] = static_cast<T>(static_cast<double>(o[j]) / sum);
    }
    if (detail::tracked(tp, {&m})) {
        out.alloc_grad();
        tp->record([mg = m.grad, od = out.data, og = out.grad, rows, cols] {
            for (int i = 0; i < rows; ++i) {
                const T* y = od->data() + static_cast<size_t>(i) * cols;
                const T* g = og->data() + static_cast<size_t>(i) * cols;
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += static_cast<double>(g[j]) * static_cast<double>(y[j]);
                T* mgrow = mg->data() + static_cast<size_t>(i) * cols;
                for (int j = 0; j < cols; ++j)
                    mgrow[j] += static_cast<T>(static_cast<double>(y[j]) *
                                               (static_cast<double>(g[j]) - dot));
            }
        });
    }
    return out;
}

// Sum of -log softmax(logits[i])[target[i]] over rows where mask[i] is true.
template <typename T>
Tensor<T> cross_entropy_sum(Tape<T>* tp, const Tensor<T>& logits,
                            std::span<const int> targets, std::span<const char> mask) {
    detail::check(logits.ndim() == 2, "cross_entropy_sum: expects a matrix");
    const int rows = logits.rows(), cols = logits.cols();
    detail::check(static_cast<int>(targets.size()) == rows, "cross_entropy_sum: target count");
    detail::check(static_cast<int>(mask.size()) == rows, "cross_entropy_sum: mask count");
    bool any = false;
    for (int i = 0; i < rows; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        detail::check(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < cols,
                      "cross_entropy_sum: target out of range");
        any = true;
    }
    detail::check(any, "cross_entropy_sum: empty target set");

    auto probs = std::make_shared<std::vector<T>>(logits.data->size());
    double loss = 0.0;
    for (int i = 0; i < rows; ++i) {
        const T* x = logits.data->data() + static_cast<size_t>(i) * cols;
        T* p = probs->data() + static_cast<size_t>(i) * cols;
        T mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            double e = std::exp(static_cast<double>(x[j] - mx));
            p[j] = static_cast<T>(e);
            sum += e;
        }
        for (int j = 0; j < cols; ++j) p[j] = static_cast<T>(static_cast<double>(p[j]) / sum);
        if (mask[static_cast<size_t>(i)])
            loss -= std::log(std::max(static_cast<double>(p[targets[static_cast<size_t>(i)]]), 1e-300));
    }
    Tensor<T> out({1});
    (*out.data)[0] = static_cast<T>(loss);
    if (detail::tracked(tp, {&logits})) {
        out.alloc_grad();
        std::vector<int> tgt(targets.begin(), targets.end());
        std::vector<char> msk(mask.begin(), mask.end());
        tp->record([lg = logits.grad, og = out.grad, probs, tgt = std::move(tgt),
                    msk = std::move(msk), rows, cols] {
            T gv = (*og)[0];
            if (gv == T(0)) return;
            for (int i = 0; i < rows; ++i) {
                if (!msk[static_cast<size_t>(i)]) continue;
                const T* p = probs->data() + static_cast<size_t>(i) * cols;
                T* g = lg->data() + static_cast<size_t>(i) * cols;
                for (int j = 0; j < cols; ++j) g[j] += gv * p[j];
                g[tgt[static_cast<size_t>(i)]] -= gv;
            }
        });
    }
    return out;
}

// Mean of the selected rows; the segment-pooling primitive.
template <typename T>
Tensor<T> mean_rows(Tape<T>* tp, const Tensor<T>& m, std::span<const int> rows_idx) {
    detail::check(m.ndim() == 2, "mean_rows: expects a matrix");
    detail::check(!rows_idx.empty(), "mean_rows: empty index set");
    const int cols = m.cols();
    for (int i : rows_idx)
        detail::check(i >= 0 && i < m.rows(), "mean_rows: index out of range");
    Tensor<T> out({cols});
    for (int i : rows_idx)
        for (int j = 0; j < cols; ++j) (*out.data)[j] += m.at2(i, j);
    const T inv = T(1) / static_cast<T>(rows_idx.size());
    for (int j = 0; j < cols; ++j) (*out.data)[j] *= inv;
    if (detail::tracked(tp, {&m})) {
        out.alloc_grad();
        std::vector<int> idx(rows_idx.begin(), rows_idx.end());
        tp->record([mg = m.grad, og = out.grad, idx = std::move(idx), cols, inv] {
            for (int i : idx)
                for (int j = 0; j < cols; ++j)
                    (*mg)[static_cast<size_t>(i) * cols + j] += (*og)[j] * inv;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sumsq(Tape<T>* tp, const Tensor<T>& x) {
    Tensor<T> out({1});
    double acc = 0.0;
    const size_t n = x.numel();
    for (size_t i = 0; i < n; ++i)
        acc += static_cast<double>((*x.data)[i]) * static_cast<double>((*x.data)[i]);
    (*out.data)[0] = static_cast<T>(acc);
    if (detail::tracked(tp, {&x})) {
        out.alloc_grad();
        tp->record([xd = x.data, xg = x.grad, og = out.grad, n] {
            T gv = (*og)[0];
            for (size_t i = 0; i < n; ++i) (*xg)[i] += T(2) * gv * (*xd)[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> take_row(Tape<T>* tp, const Tensor<T>& m, int i) {
    detail::check(m.ndim() == 2, "take_row: expects a matrix");
    detail::check(i >= 0 && i < m.rows(), "take_row: index out of range");
    const int cols = m.cols();
    Tensor<T> out({cols});
    std::copy_n(m.data->data() + static_cast<size_t>(i) * cols, cols, out.data->data());
    if (detail::tracked(tp, {&m})) {
        out.alloc_grad();
        tp->record([mg = m.grad, og = out.grad, i, cols] {
            for (int j = 0; j < cols; ++j) (*mg)[static_cast<size_t>(i) * cols + j] += (*og)[j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> stack_rows(Tape<T>* tp, const std::vector<Tensor<T>>& rows) {
    detail::check(!rows.empty(), "stack_rows: empty input");
    const int cols = rows[0].shape.at(0);
    for (const auto& r : rows)
        detail::check(r.ndim() == 1 && r.shape[0] == cols, "stack_rows: extent mismatch");
    const int m = static_cast<int>(rows.size());
    Tensor<T> out({m, cols});
    for (int i = 0; i < m; ++i)
        std::copy_n(rows[static_cast<size_t>(i)].data->data(), cols,
                    out.data->data() + static_cast<size_t>(i) * cols);
    bool any = false;
    for (const auto& r : rows) any = any || r.requires_grad();
    if (tp && tp->active() && any) {
        out.alloc_grad();
        std::vector<std::shared_ptr<std::vector<T>>> grads;
        grads.reserve(rows.size());
        for (const auto& r : rows) grads.push_back(r.grad);
        tp->record([grads = std::move(grads), og = out.grad, cols] {
            for (size_t i = 0; i < grads.size(); ++i) {
                if (!grads[i]) continue;
                for (int j = 0; j < cols; ++j)
                    (*grads[i])[static_cast<size_t>(j)] += (*og)[i * static_cast<size_t>(cols) + static_cast<size_t>(j)];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_vecs(Tape<T>* tp, const std::vector<Tensor<T>>& parts) {
    detail::check(!parts.empty(), "concat_vecs: empty input");
    int total = 0;
    for (const auto& p : parts) {
        detail::check(p.ndim() == 1, "concat_vecs: expects vectors");
        total += p.shape[0];
    }
    Tensor<T> out({total});
    int off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data->data(), p.shape[0], out.data->data() + off);
        off += p.shape[0];
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tp && tp->active() && any) {
        out.alloc_grad();
        std::vector<std::shared_ptr<std::vector<T>>> grads;
        std::vector<int> sizes;
        for (const auto& p : parts) {
            grads.push_back(p.grad);
            sizes.push_back(p.shape[0]);
        }
        tp->record([grads = std::move(grads), sizes = std::move(sizes), og = out.grad] {
            int off2 = 0;
            for (size_t i = 0; i < grads.size(); ++i) {
                if (grads[i])
                    for (int j = 0; j < sizes[i]; ++j) (*grads[i])[static_cast<size_t>(j)] += (*og)[static_cast<size_t>(off2 + j)];
                off2 += sizes[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_cols(Tape<T>* tp, const Tensor<T>& m, int c0, int c1) {
    detail::check(m.ndim() == 2, "slice_cols: expects a matrix");
    detail::check(0 <= c0 && c0 < c1 && c1 <= m.cols(), "slice_cols: bad range");
    const int rows = m.rows(), cols = m.cols(), w = c1 - c0;
    Tensor<T> out({rows, w});
    for (int i = 0; i < rows; ++i)
        std::copy_n(m.data->data() + static_cast<size_t>(i) * cols + c0, w,
                    out.data->data() + static_cast<size_t>(i) * w);
    if (detail::tracked(tp, {&m})) {
        out.alloc_grad();
        tp->record([mg = m.grad, og = out.grad, rows, cols, c0, w] {
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < w; ++j)
                    (*mg)[static_cast<size_t>(i) * cols + c0 + j] += (*og)[static_cast<size_t>(i) * w + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(Tape<T>* tp, const Tensor<T>& m, int r0, int r1) {
    detail::check(m.ndim() == 2, "slice_rows: expects a matrix");
    detail::check(0 <= r0 && r0 < r1 && r1 <= m.rows(), "slice_rows: bad range");
    const int cols = m.cols(), h = r1 - r0;
    Tensor<T> out({h, cols});
    std::copy_n(m.data->data() + static_cast<size_t>(r0) * cols, static_cast<size_t>(h) * cols,
                out.data->data());
    if (detail::tracked(tp, {&m})) {
        out.alloc_grad();
        tp->record([mg = m.grad, og = out.grad, r0, h, cols] {
            for (size_t i = 0; i < static_cast<size_t>(h) * cols; ++i)
                (*mg)[static_cast<size_t>(r0) * cols + i] += (*og)[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tp, const std::vector<Tensor<T>>& parts) {
    detail::check(!parts.empty(), "concat_cols: empty input");
    const int rows = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        detail::check(p.ndim() == 2 && p.rows() == rows, "concat_cols: row count mismatch");
        total += p.cols();
    }
    Tensor<T> out({rows, total});
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < rows; ++i)
            std::copy_n(p.data->data() + static_cast<size_t>(i) * p.cols(), p.cols(),
                        out.data->data() + static_cast<size_t>(i) * total + off);
        off += p.cols();
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tp && tp->active() && any) {
        out.alloc_grad();
        std::vector<std::shared_ptr<std::vector<T>>> grads;
        std::vector<int> widths;
        for (const auto& p : parts) {
            grads.push_back(p.grad);
            widths.push_back(p.cols());
        }
        tp->record([grads = std::move(grads), widths = std::move(widths), og = out.grad, rows, total] {
            int off2 = 0;
            for (size_t k = 0; k < grads.size(); ++k) {
                if (grads[k])
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < widths[k]; ++j)
                            (*grads[k])[static_cast<size_t>(i) * widths[k] + static_cast<size_t>(j)] +=
                                (*og)[static_cast<size_t>(i) * total + off2 + static_cast<size_t>(j)];
                off2 += widths[k];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> embedding_lookup(Tape<T>* tp, const Tensor<T>& table, std::span<const int> ids) {
    detail::check(table.ndim() == 2, "embedding_lookup: expects a matrix table");
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        detail::check(id >= 0 && id < v, "embedding_lookup: id out of range");
    const int n = static_cast<int>(ids.size());
    Tensor<T> out({n, d});
    for (int i = 0; i < n; ++i)
        std::copy_n(table.data->data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d, d,
                    out.data->data() + static_cast<size_t>(i) * d);
    if (detail::tracked(tp, {&table})) {
        out.alloc_grad();
        std::vector<int> ids_copy(ids.begin(), ids.end());
        tp->record([tg = table.grad, og = out.grad, ids = std::move(ids_copy), d] {
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j)
                    (*tg)[static_cast<size_t>(ids[i]) * d + j] += (*og)[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
        });
    }
    return out;
}

} // namespace dmem
