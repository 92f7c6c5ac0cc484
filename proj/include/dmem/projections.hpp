#pragma once

#include <cmath>
#include <utility>

#include "dmem/tape.hpp"

namespace dmem {

// Epsilon guard in the key/query normalization so tanh-saturated or zero
// activations never divide by zero.
inline constexpr double kMemEps = 1e-6;

// Trainable maps from a backbone hidden state x (dim d) into the memory
// space (rank r): read query, write key, write value, and the write gate.
// One instance per (hooked layer, sub-state); parameters are never shared.
template <typename T>
struct MemoryProjections {
    Tensor<T> wq, wk, wv, wbeta;  // [r x d]
    Tensor<T> b;                  // [r], gate bias

    int rank() const { return wq.rows(); }
    int dim() const { return wq.cols(); }
};

// Small uniform init scaled by 1/sqrt(d); gate bias -2 so beta starts near
// 0.12 (retention-dominant while the steering maps are still near zero).
template <typename T>
MemoryProjections<T> init_projections(int d, int r, SplitMix64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    MemoryProjections<T> p;
    p.wq = param(uniform<T>(rng, {r, d}, -bound, bound));
    p.wk = param(uniform<T>(rng, {r, d}, -bound, bound));
    p.wv = param(uniform<T>(rng, {r, d}, -bound, bound));
    p.wbeta = param(uniform<T>(rng, {r, d}, -bound, bound));
    p.b = param(full<T>({r}, T(-2)));
    return p;
}

// q^m and k^m: tanh then eps-normalized, so norms are <= 1 and ~1 away from
// the origin. Row-batched over a [T x d] hidden matrix.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> project_qk(Tape<T>* tp, const MemoryProjections<T>& p,
                                           const Tensor<T>& x_rows) {
    Tensor<T> q = l2norm_rows(tp, vtanh(tp, matmul_nt(tp, x_rows, p.wq)), static_cast<T>(kMemEps));
    Tensor<T> k = l2norm_rows(tp, vtanh(tp, matmul_nt(tp, x_rows, p.wk)), static_cast<T>(kMemEps));
    return {q, k};
}

// v^m: plain linear map, deliberately unnormalized.
template <typename T>
Tensor<T> project_v(Tape<T>* tp, const MemoryProjections<T>& p, const Tensor<T>& x_rows) {
    return matmul_nt(tp, x_rows, p.wv);
}

// Write gate beta = sigmoid(W x + b) in (0,1)^r and retention gate
// lambda = 1 - beta, computed (never parameterized) so beta + lambda = 1
// holds exactly.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> gates(Tape<T>* tp, const MemoryProjections<T>& p,
                                      const Tensor<T>& x_rows) {
    Tensor<T> beta = vsigmoid(tp, add_rowvec(tp, matmul_nt(tp, x_rows, p.wbeta), p.b));
    return {beta, one_minus(tp, beta)};
}

} // namespace dmem
