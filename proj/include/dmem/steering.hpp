#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dmem/tape.hpp"

namespace dmem {

// Attention branches a correction can target.
enum BranchBit : unsigned {
    kBranchQ = 1u,
    kBranchK = 2u,
    kBranchV = 4u,
    kBranchO = 8u,
};
using BranchSet = unsigned;

// "qo" -> Q|O. Canonical order in strings is q,k,v,o; "none" (or empty)
// disables steering entirely (writes-only configuration).
inline BranchSet parse_branches(const std::string& s) {
    if (s.empty() || s == "none") return 0u;
    BranchSet out = 0u;
    for (char c : s) {
        switch (c) {
            case 'q': out |= kBranchQ; break;
            case 'k': out |= kBranchK; break;
            case 'v': out |= kBranchV; break;
            case 'o': out |= kBranchO; break;
            default: throw std::invalid_argument("branches: unknown branch '" + std::string(1, c) + "'");
        }
    }
    return out;
}

inline std::string branches_to_string(BranchSet b) {
    if (!b) return "none";
    std::string s;
    if (b & kBranchQ) s += 'q';
    if (b & kBranchK) s += 'k';
    if (b & kBranchV) s += 'v';
    if (b & kBranchO) s += 'o';
    return s;
}

// Layer subset grammar: "all" | "front:K" | "middle:K" | "back:K" |
// explicit comma list ("0,2"). Returns sorted unique indices.
inline std::vector<int> parse_layers(const std::string& s, int n_layers) {
    auto ranged = [&](int lo, int k) {
        if (k < 1 || lo < 0 || lo + k > n_layers)
            throw std::invalid_argument("layers: subset out of range for " + std::to_string(n_layers) + " layers");
        std::vector<int> out;
        for (int i = 0; i < k; ++i) out.push_back(lo + i);
        return out;
    };
    if (s.empty() || s == "all") return ranged(0, n_layers);
    auto colon = s.find(':');
    if (colon != std::string::npos) {
        const std::string kind = s.substr(0, colon);
        const int k = std::stoi(s.substr(colon + 1));
        if (kind == "front") return ranged(0, k);
        if (kind == "back") return ranged(n_layers - k, k);
        if (kind == "middle") return ranged((n_layers - k) / 2, k);
        throw std::invalid_argument("layers: unknown subset kind '" + kind + "'");
    }
    std::vector<int> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        const int idx = std::stoi(s.substr(pos, comma - pos));
        if (idx < 0 || idx >= n_layers) throw std::invalid_argument("layers: index out of range");
        out.push_back(idx);
        pos = comma + 1;
    }
    std::sort(out.begin(), out.end());
    if (std::adjacent_find(out.begin(), out.end()) != out.end())
        throw std::invalid_argument("layers: duplicate index");
    if (out.empty()) throw std::invalid_argument("layers: empty set");
    return out;
}

// Per-layer low-rank readout maps, d x (N*r) each, present only for the
// enabled branches (absent, not zero-filled, otherwise). All maps start at
// exactly zero so the mechanism is a no-op on the frozen backbone until
// trained. The applied scale is alpha / r with r the per-sub-state rank:
// Appendix-level hyperparameters fix r and alpha independently of N, so
// scaling by N*r would silently change magnitudes under the multi-state
// policy.
template <typename T>
struct SteeringMaps {
    Tensor<T> wq, wk, wv, wo;
    BranchSet branches = 0;
    double alpha = 16.0;
    int rank = 8;  // per-sub-state r, the scale denominator

    T scale() const { return static_cast<T>(alpha / rank); }
    bool has(BranchBit bit) const { return (branches & bit) != 0; }
};

template <typename T>
SteeringMaps<T> init_steering(int d, int n_states, int r, BranchSet branches, double alpha) {
    SteeringMaps<T> m;
    m.branches = branches;
    m.alpha = alpha;
    m.rank = r;
    const int in = n_states * r;
    if (branches & kBranchQ) m.wq = param(zeros<T>({d, in}));
    if (branches & kBranchK) m.wk = param(zeros<T>({d, in}));
    if (branches & kBranchV) m.wv = param(zeros<T>({d, in}));
    if (branches & kBranchO) m.wo = param(zeros<T>({d, in}));
    return m;
}

// One correction vector per enabled branch, each of the target branch's
// dimension; undefined tensors mark disabled branches.
template <typename T>
struct Corrections {
    Tensor<T> dq, dk, dv, dout;
};

template <typename T>
Corrections<T> corrections(Tape<T>* tp, const SteeringMaps<T>& m, const Tensor<T>& r_read) {
    Corrections<T> c;
    if (m.has(kBranchQ)) c.dq = matvec(tp, m.wq, r_read);
    if (m.has(kBranchK)) c.dk = matvec(tp, m.wk, r_read);
    if (m.has(kBranchV)) c.dv = matvec(tp, m.wv, r_read);
    if (m.has(kBranchO)) c.dout = matvec(tp, m.wo, r_read);
    return c;
}

// q_tilde = q0 + (alpha/r) dq, applied to the full concatenated multi-head
// query before head reshaping.
template <typename T>
Tensor<T> apply_query(Tape<T>* tp, const SteeringMaps<T>& m, const Tensor<T>& q0, const Tensor<T>& dq) {
    if (!m.has(kBranchQ)) throw std::logic_error("apply_query: q branch disabled");
    return add_scaled(tp, q0, dq, m.scale());
}

// y_tilde = a + (alpha/r) dout, added after the attention block's W_O
// projection.
template <typename T>
Tensor<T> apply_output(Tape<T>* tp, const SteeringMaps<T>& m, const Tensor<T>& a, const Tensor<T>& dout) {
    if (!m.has(kBranchO)) throw std::logic_error("apply_output: o branch disabled");
    return add_scaled(tp, a, dout, m.scale());
}

// Key/value corrections follow the same additive pattern, applied to the
// freshly computed k/v at the current position before it enters the cache
// (each position corrected exactly once).
template <typename T>
Tensor<T> apply_key(Tape<T>* tp, const SteeringMaps<T>& m, const Tensor<T>& k0, const Tensor<T>& dk) {
    if (!m.has(kBranchK)) throw std::logic_error("apply_key: k branch disabled");
    return add_scaled(tp, k0, dk, m.scale());
}

template <typename T>
Tensor<T> apply_value(Tape<T>* tp, const SteeringMaps<T>& m, const Tensor<T>& v0, const Tensor<T>& dv) {
    if (!m.has(kBranchV)) throw std::logic_error("apply_value: v branch disabled");
    return add_scaled(tp, v0, dv, m.scale());
}

} // namespace dmem
