#pragma once

#include <stdexcept>
#include <vector>

#include "dmem/tape.hpp"

namespace dmem {

// Online state of associative memory: N sub-state matrices of shape [r x r]
// compressing key->value associations seen so far. N is 1 unless the
// multi-state write policy is active. The step counter is diagnostic only;
// it never enters a formula.
template <typename T>
struct OnlineState {
    std::vector<Tensor<T>> S;
    long step = 0;

    int n_states() const { return static_cast<int>(S.size()); }
    int rank() const { return S.empty() ? 0 : S[0].rows(); }

    static OnlineState zero(int n_states, int r) {
        OnlineState st;
        st.S.reserve(static_cast<size_t>(n_states));
        for (int i = 0; i < n_states; ++i) st.S.push_back(zeros<T>({r, r}));
        return st;
    }

    OnlineState clone() const {
        OnlineState st;
        st.step = step;
        st.S.reserve(S.size());
        for (const auto& s : S) st.S.push_back(s.clone());
        return st;
    }

    bool all_finite() const {
        for (const auto& s : S)
            if (!s.all_finite()) return false;
        return true;
    }
};

// Readout r = S q per sub-state, concatenated in sub-state order. The cost
// is independent of how many tokens were written.
template <typename T>
Tensor<T> state_read(Tape<T>* tp, const OnlineState<T>& st, const std::vector<Tensor<T>>& qm) {
    if (qm.size() != st.S.size())
        throw std::invalid_argument("state_read: sub-state count mismatch");
    std::vector<Tensor<T>> reads;
    reads.reserve(qm.size());
    for (size_t i = 0; i < qm.size(); ++i) reads.push_back(matvec(tp, st.S[i], qm[i]));
    if (reads.size() == 1) return reads[0];
    return concat_vecs(tp, reads);
}

// Gated delta-rule write for one sub-state matrix:
//
//   S' = Diag(lambda) S + Diag(beta) (v - S k) k^T,   lambda = 1 - beta.
//
// Equivalent to one SGD step per row on the online regression loss
// 1/2 ||S k - v||^2 with an L2 retention term, at row-wise step size
// beta_i. lambda is derived from beta here, never stored, so the
// lambda = 1 - beta precondition holds by construction. Composed from tape
// primitives so gradients flow through the whole recurrence.
template <typename T>
Tensor<T> delta_write(Tape<T>* tp, const Tensor<T>& S, const Tensor<T>& k, const Tensor<T>& v,
                      const Tensor<T>& beta) {
    if (S.ndim() != 2 || S.rows() != S.cols()) throw std::invalid_argument("delta_write: S must be square");
    const int r = S.rows();
    if (k.numel() != static_cast<size_t>(r) || v.numel() != static_cast<size_t>(r) ||
        beta.numel() != static_cast<size_t>(r))
        throw std::invalid_argument("delta_write: rank mismatch");
    if (!S.all_finite() || !k.all_finite() || !v.all_finite() || !beta.all_finite())
        throw std::invalid_argument("delta_write: non-finite input");
    Tensor<T> lambda = one_minus(tp, beta);
    Tensor<T> innovation = sub(tp, v, matvec(tp, S, k));
    Tensor<T> retained = row_scale(tp, S, lambda);
    return add(tp, retained, row_scale(tp, outer(tp, innovation, k), beta));
}

// Row-wise decomposition of delta_write: each memory dimension i evolves
// independently as s' = lambda_i s + beta_i (v_i - s.k) k^T. Stacking all
// rows reproduces delta_write. Diagnostic/verification form, no tape.
template <typename T>
Tensor<T> row_write(const Tensor<T>& s_row, int i, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& beta) {
    if (s_row.ndim() != 1) throw std::invalid_argument("row_write: expects a row vector");
    const int r = s_row.shape[0];
    if (i < 0 || i >= static_cast<int>(beta.numel()))
        throw std::invalid_argument("row_write: row index out of range");
    const T b = (*beta.data)[static_cast<size_t>(i)];
    const T lam = T(1) - b;
    T pred = T(0);
    for (int j = 0; j < r; ++j) pred += (*s_row.data)[j] * (*k.data)[j];
    Tensor<T> out({r});
    const T vi = (*v.data)[static_cast<size_t>(i)];
    for (int j = 0; j < r; ++j)
        (*out.data)[j] = lam * (*s_row.data)[j] + b * (vi - pred) * (*k.data)[j];
    return out;
}

// 1/2 ||S k - v||^2: the regression objective whose gated SGD step the
// write op implements. Diagnostic only; delta_write never calls a generic
// optimizer.
template <typename T>
Tensor<T> online_regression_loss(Tape<T>* tp, const Tensor<T>& S, const Tensor<T>& k,
                                 const Tensor<T>& v) {
    return scale(tp, sumsq(tp, sub(tp, matvec(tp, S, k), v)), T(0.5));
}

} // namespace dmem
